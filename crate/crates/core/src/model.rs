//! The full conditional model: encoder `g` plus invertible network `Θ`,
//! sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::encoder::{CondFeatures, Encoder};
use crate::error::{Error, Result};
use crate::flow::{Flow, LayerRegistry};
use crate::params::{Bound, ParamStore};
use crate::preprocess;
use crate::tensor::{Scalar, Tensor};

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub flow: Flow<T>,
    pub params: ParamStore<T>,
    /// Seed the parameters were drawn from; rebuilding with it reproduces
    /// the parameter layout.
    pub seed: u64,
    /// Whether actnorm layers have seen their initialization batch.
    pub actnorm_ready: bool,
}

/// Flow evaluation of one batch.
pub struct Pass {
    pub cond: CondFeatures,
    pub z: Var,
    /// Per-element log-determinant `[N]`.
    pub logdet: Var,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(cfg, seed, &LayerRegistry::default())
    }

    pub fn with_registry(cfg: &ModelConfig, seed: u64, registry: &LayerRegistry<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::build(cfg, &mut params, &mut rng)?;
        let flow = Flow::build(cfg, encoder.feature_width(), registry, &mut params, &mut rng)?;
        Ok(Model {
            config: cfg.clone(),
            encoder,
            flow,
            params,
            seed,
            actnorm_ready: false,
        })
    }

    /// The same model with parameters converted to another precision.
    pub fn to_precision<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(&self.config, self.seed)?;
        for (id, v) in self.params.ids().zip(self.params.values()) {
            out.params.set(id, v.cast())?;
        }
        out.actnorm_ready = self.actnorm_ready;
        Ok(out)
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    /// Side multiple that image extents must satisfy.
    pub fn size_multiple(&self) -> usize {
        1 << self.config.levels
    }

    pub fn encode(&self, p: &Bound<T>, x_low: &Tensor<T>) -> Result<CondFeatures> {
        self.encoder.encode(p, x_low)
    }

    /// `squeeze^L(g(x_l))`, differentiable.
    pub fn encoder_mean(&self, tape: &Tape<T>, cond: &CondFeatures) -> Result<Var> {
        let mut m = cond.color_map;
        for _ in 0..self.levels() {
            m = tape.squeeze2x2(m)?;
        }
        Ok(m)
    }

    /// `squeeze^L(C(x_ref))` as a constant: no gradient flows through this
    /// branch.
    pub fn reference_mean(&self, tape: &Tape<T>, x_ref: &Tensor<T>) -> Result<Var> {
        let cm = preprocess::color_map(x_ref)?;
        Ok(tape.constant(preprocess::squeeze_like_latent(&cm, self.levels())?))
    }

    /// Latent prior mean per batch element: the reference branch where
    /// `use_ref[b]` is set, the encoder branch elsewhere.
    pub fn prior_mean(&self, tape: &Tape<T>, cond: &CondFeatures, x_ref: &Tensor<T>, use_ref: &[bool]) -> Result<Var> {
        let enc = self.encoder_mean(tape, cond)?;
        if use_ref.len() != x_ref.shape()[0] {
            return Err(Error::shape(format!(
                "{} selector draws for a batch of {}",
                use_ref.len(),
                x_ref.shape()[0]
            )));
        }
        if !use_ref.iter().any(|&r| r) {
            return Ok(enc);
        }
        let reference = self.reference_mean(tape, x_ref)?;
        if use_ref.iter().all(|&r| r) {
            return Ok(reference);
        }
        let n = use_ref.len();
        let mask: Vec<T> = use_ref.iter().map(|&r| if r { T::one() } else { T::zero() }).collect();
        let keep: Vec<T> = use_ref.iter().map(|&r| if r { T::zero() } else { T::one() }).collect();
        let mask = tape.constant(Tensor::new(&[n, 1, 1, 1], mask)?);
        let keep = tape.constant(Tensor::new(&[n, 1, 1, 1], keep)?);
        tape.add(tape.mul(reference, mask)?, tape.mul(enc, keep)?)
    }

    /// Encodes `x_low` and pushes `x_high` through the flow.
    pub fn forward(&self, p: &Bound<T>, x_low: &Tensor<T>, x_high: Var) -> Result<Pass> {
        let cond = self.encode(p, x_low)?;
        let (z, logdet) = self.flow.forward(p, x_high, &cond.level_feats)?;
        Ok(Pass { cond, z, logdet })
    }

    /// Runs actnorm data-dependent initialization on one batch, once.
    pub fn data_init(&mut self, x_low: &Tensor<T>, x_high: &Tensor<T>) -> Result<()> {
        if self.actnorm_ready {
            return Ok(());
        }
        let feats = {
            let tape = Tape::no_grad();
            let p = self.params.bind(&tape, false);
            let cond = self.encode(&p, x_low)?;
            cond.level_feats.iter().map(|&v| tape.value(v)).collect::<Vec<_>>()
        };
        self.flow.data_init(&mut self.params, x_high, &feats)?;
        self.actnorm_ready = true;
        Ok(())
    }

    /// Finds the first non-finite activation for a batch, for diagnostics.
    pub fn locate_non_finite(&self, x_low: &Tensor<T>, x_high: &Tensor<T>) -> String {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape, false);
        let cond = match self.encode(&p, x_low) {
            Ok(c) => c,
            Err(e) => return format!("encoder failed: {e}"),
        };
        if !tape.value(cond.color_map).all_finite() {
            return "encoder color map".into();
        }
        if let Some(l) = cond.level_feats.iter().position(|&v| !tape.value(v).all_finite()) {
            return format!("encoder level feature {l}");
        }
        let x = tape.constant(x_high.clone());
        match self.flow.forward_traced(&p, x, &cond.level_feats) {
            Ok((_, _, trace)) => match trace.iter().position(|&v| !tape.value(v).all_finite()) {
                Some(i) => format!("flow layer {i} ({})", self.flow.layers()[i].kind()),
                None => "log-determinant or prior term".into(),
            },
            Err(e) => format!("flow failed: {e}"),
        }
    }
}
