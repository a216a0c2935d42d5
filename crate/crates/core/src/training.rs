//! Objectives, optimizer, learning-rate schedule and the training loop.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{self, ImagePair};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// `½·log(2π)`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// `−log N(z; mean, I)` summed over all elements.
pub fn gaussian_nll<T: Scalar>(z: &Tensor<T>, mean: &Tensor<T>) -> Result<f64> {
    if z.shape() != mean.shape() {
        return Err(Error::shape(format!("latent {:?} vs mean {:?}", z.shape(), mean.shape())));
    }
    Ok(z.data()
        .iter()
        .zip(mean.data())
        .map(|(&a, &m)| HALF_LOG_2PI + 0.5 * (a.f64() - m.f64()).powi(2))
        .sum())
}

/// Per-batch-element Gaussian NLL `[N]` on the tape.
pub fn gaussian_nll_var<T: Scalar>(tape: &Tape<T>, z: Var, mean: Var) -> Result<Var> {
    let zs = tape.shape(z);
    if zs != tape.shape(mean) {
        return Err(Error::shape(format!("latent {zs:?} vs mean {:?}", tape.shape(mean))));
    }
    let dims: usize = zs[1..].iter().product();
    let sq = tape.scale(tape.square(tape.sub(z, mean)?)?, 0.5)?;
    tape.add_scalar(tape.sum_axes(sq, &[1, 2, 3], false)?, dims as f64 * HALF_LOG_2PI)
}

/// The per-element terms of `−log p(x_high | x_low)`.
pub struct NllTerms {
    /// `gaussian − logdet`, `[N]`.
    pub total: Var,
    pub prior: Var,
    pub logdet: Var,
    /// Elements per batch item.
    pub dims: usize,
}

/// NLL of `x_high` under the prior mean chosen by `use_ref`.
pub fn nll_terms<T: Scalar>(model: &Model<T>, p: &Bound<T>, x_low: &Tensor<T>, x_high: Var, x_ref: &Tensor<T>, use_ref: &[bool]) -> Result<NllTerms> {
    let tape = p.tape();
    let pass = model.forward(p, x_low, x_high)?;
    let mean = model.prior_mean(tape, &pass.cond, x_ref, use_ref)?;
    let prior = gaussian_nll_var(tape, pass.z, mean)?;
    let total = tape.sub(prior, pass.logdet)?;
    let dims = tape.shape(x_high)[1..].iter().product();
    Ok(NllTerms {
        total,
        prior,
        logdet: pass.logdet,
        dims,
    })
}

// -- objectives -----------------------------------------------------------------

/// A training objective: the scalar to minimize, plus its value in nats
/// per dimension for the loss log.
pub trait Objective<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn loss(&self, model: &Model<T>, p: &Bound<T>, low: &Tensor<T>, high: &Tensor<T>, use_ref: &[bool]) -> Result<(Var, f64)>;
}

/// Exact change-of-variables NLL, averaged per dimension.
pub struct NllObjective;

impl<T: Scalar> Objective<T> for NllObjective {
    fn name(&self) -> &'static str {
        "nll"
    }

    fn loss(&self, model: &Model<T>, p: &Bound<T>, low: &Tensor<T>, high: &Tensor<T>, use_ref: &[bool]) -> Result<(Var, f64)> {
        let tape = p.tape();
        let x = tape.constant(high.clone());
        let terms = nll_terms(model, p, low, x, high, use_ref)?;
        let n = use_ref.len();
        let loss = tape.scale(tape.sum(terms.total)?, 1.0 / (n * terms.dims) as f64)?;
        let v = tape.value(loss).item().f64();
        Ok((loss, v))
    }
}

/// Pixel reconstruction baseline: mean `|Θ⁻¹(squeeze(g(x_l))) − x_ref|`.
/// The logged value is the matching Laplace NLL `ln(2b) + l1/b` per
/// dimension.
pub struct L1Objective {
    pub laplace_b: f64,
}

impl<T: Scalar> Objective<T> for L1Objective {
    fn name(&self) -> &'static str {
        "l1-baseline"
    }

    fn loss(&self, model: &Model<T>, p: &Bound<T>, low: &Tensor<T>, high: &Tensor<T>, _use_ref: &[bool]) -> Result<(Var, f64)> {
        let tape = p.tape();
        let out = reconstruct(model, p, low, 0.0)?;
        let target = tape.constant(high.clone());
        let loss = tape.mean(tape.abs(tape.sub(out, target)?)?)?;
        let l1 = tape.value(loss).item().f64();
        Ok((loss, (2.0 * self.laplace_b).ln() + l1 / self.laplace_b))
    }
}

/// `Θ⁻¹(squeeze^L(g(x_l)) + offset)`, unclamped and differentiable.
pub fn reconstruct<T: Scalar>(model: &Model<T>, p: &Bound<T>, low: &Tensor<T>, offset: f64) -> Result<Var> {
    let tape = p.tape();
    let cond = model.encode(p, low)?;
    let mut z = model.encoder_mean(tape, &cond)?;
    if offset != 0.0 {
        z = tape.add_scalar(z, offset)?;
    }
    model.flow.inverse(p, z, &cond.level_feats)
}

pub type ObjectiveFactory<T> = fn(&TrainConfig) -> Box<dyn Objective<T>>;

/// Objectives by name.
pub struct ObjectiveRegistry<T: Scalar> {
    factories: BTreeMap<&'static str, ObjectiveFactory<T>>,
}

impl<T: Scalar> Default for ObjectiveRegistry<T> {
    fn default() -> Self {
        let mut r = ObjectiveRegistry {
            factories: BTreeMap::new(),
        };
        r.register("nll", |_| Box::new(NllObjective));
        r.register("l1-baseline", |c| Box::new(L1Objective { laplace_b: c.laplace_b }));
        r
    }
}

impl<T: Scalar> ObjectiveRegistry<T> {
    pub fn register(&mut self, name: &'static str, f: ObjectiveFactory<T>) {
        self.factories.insert(name, f);
    }

    pub fn create(&self, name: &str, cfg: &TrainConfig) -> Result<Box<dyn Objective<T>>> {
        let f = self.factories.get(name).ok_or_else(|| {
            let known: Vec<_> = self.factories.keys().copied().collect();
            Error::invalid(format!("unknown loss_mode `{name}` (known: {})", known.join(", ")))
        })?;
        Ok(f(cfg))
    }
}

// -- optimizer ----------------------------------------------------------------

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((w, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if w.shape() != g.shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), w.shape())));
            }
            let (w, m, v) = (w.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Iteration at which each milestone fraction takes effect.
pub fn milestone_iters(cfg: &TrainConfig) -> Vec<u64> {
    cfg.milestones
        .iter()
        .map(|f| (f * cfg.total_iters as f64).round() as u64)
        .collect()
}

/// `lr · decay^(milestones passed)` for a zero-based iteration.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> f64 {
    let passed = milestone_iters(cfg).iter().filter(|&&m| iter >= m).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}

// -- training loop ----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StepReport {
    /// One-based index of the completed iteration.
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub objective: &'static str,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub loss_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub first_loss: f64,
    pub last_loss: f64,
    pub iters: u64,
    pub warnings: Vec<String>,
}

pub const COLD_START_WARNING: &str =
    "l1-baseline training without an NLL warm start; this is known not to converge (set train.nll_warmup_iters)";

/// Owns everything needed to continue a run: model, optimizer moments,
/// iteration counter and the data/selector generator.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub iter: u64,
    pub rng: ChaCha8Rng,
    objectives: ObjectiveRegistry<f32>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.train.seed)?;
        let adam = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        let t = Trainer {
            config,
            model,
            adam,
            iter: 0,
            rng,
            objectives: ObjectiveRegistry::default(),
        };
        t.objectives.create(&t.config.train.loss_mode, &t.config.train)?;
        Ok(t)
    }

    /// Rebuilds a trainer from saved pieces; used by checkpoint loading.
    pub fn from_parts(config: RunConfig, model: Model<f32>, adam: Adam<f32>, iter: u64, rng: ChaCha8Rng) -> Result<Self> {
        let t = Trainer {
            config,
            model,
            adam,
            iter,
            rng,
            objectives: ObjectiveRegistry::default(),
        };
        t.objectives.create(&t.config.train.loss_mode, &t.config.train)?;
        Ok(t)
    }

    pub fn objectives_mut(&mut self) -> &mut ObjectiveRegistry<f32> {
        &mut self.objectives
    }

    /// Objective in effect at the next iteration.
    pub fn current_objective(&self) -> &str {
        let t = &self.config.train;
        if t.loss_mode != "nll" && self.iter < t.nll_warmup_iters {
            "nll"
        } else {
            &t.loss_mode
        }
    }

    /// One optimizer step. On a non-finite loss or gradient nothing is
    /// updated and the iteration counter does not advance.
    pub fn step(&mut self, pairs: &[ImagePair]) -> Result<StepReport> {
        let tc = self.config.train.clone();
        let batch = data::sample_patch_batch(pairs, tc.patch_size, tc.batch_size, &mut self.rng)?;
        let use_ref: Vec<bool> = (0..tc.batch_size)
            .map(|_| self.rng.random::<f64>() < tc.selector_p)
            .collect();
        self.model.data_init(&batch.low, &batch.high)?;
        let objective = self.objectives.create(self.current_objective(), &tc)?;
        if objective.name() != "nll" && self.iter == 0 {
            log::warn!("{COLD_START_WARNING}");
        }
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, true);
        let (loss, value) = objective.loss(&self.model, &p, &batch.low, &batch.high, &use_ref)?;
        let where_ = || self.model.locate_non_finite(&batch.low, &batch.high);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at iteration {}; first non-finite value: {}",
                self.iter + 1,
                where_()
            )));
        }
        let grads = p.collect_grads(&tape.backward(loss)?)?;
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at iteration {}",
                self.model.params.name(self.model.params.ids().nth(i).expect("index in range")),
                self.iter + 1
            )));
        }
        drop(p);
        let lr = lr_schedule(self.iter, &tc);
        self.adam.step(self.model.params.values_mut(), &grads, lr)?;
        self.iter += 1;
        Ok(StepReport {
            iter: self.iter,
            loss: value,
            lr,
            objective: objective.name(),
        })
    }

    /// Runs until `train.total_iters`, logging every iteration. Two
    /// consecutive non-finite steps abort the run after saving the last
    /// finite state.
    pub fn train(&mut self, pairs: &[ImagePair], out: &TrainOutputs) -> Result<TrainSummary> {
        self.train_until(pairs, out, self.config.train.total_iters)
    }

    pub fn train_until(&mut self, pairs: &[ImagePair], out: &TrainOutputs, until: u64) -> Result<TrainSummary> {
        if pairs.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let mut csv = match &out.loss_csv {
            Some(path) => Some(open_loss_csv(path, self.iter == 0)?),
            None => None,
        };
        let mut summary = TrainSummary::default();
        if self.config.train.loss_mode != "nll" && self.config.train.nll_warmup_iters == 0 && self.iter == 0 {
            summary.warnings.push(COLD_START_WARNING.into());
        }
        let every = self.config.train.checkpoint_every;
        let mut failures = 0;
        while self.iter < until {
            match self.step(pairs) {
                Ok(r) => {
                    failures = 0;
                    if summary.iters == 0 {
                        summary.first_loss = r.loss;
                    }
                    summary.last_loss = r.loss;
                    summary.iters += 1;
                    if let Some(f) = csv.as_mut() {
                        writeln!(f, "{},{},{}", r.iter, r.loss, r.lr)?;
                    }
                    log::info!("iter {} {} {:.6} lr {}", r.iter, r.objective, r.loss, r.lr);
                    if every > 0 && r.iter % every == 0 {
                        if let Some(path) = &out.checkpoint {
                            self.save(path)?;
                        }
                    }
                }
                Err(Error::NonFinite(msg)) => {
                    failures += 1;
                    log::warn!("non-finite step skipped: {msg}");
                    if failures >= 2 {
                        if let Some(path) = &out.checkpoint {
                            self.save(path)?;
                        }
                        return Err(Error::NonFinite(msg));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(f) = csv.as_mut() {
            f.flush()?;
        }
        if let Some(path) = &out.checkpoint {
            self.save(path)?;
        }
        Ok(summary)
    }
}

fn open_loss_csv(path: &Path, fresh: bool) -> Result<std::io::BufWriter<std::fs::File>> {
    let new = fresh || !path.exists();
    let file = if new {
        std::fs::File::create(path)?
    } else {
        OpenOptions::new().append(true).open(path)?
    };
    let mut w = std::io::BufWriter::new(file);
    if new {
        writeln!(w, "iter,loss_nats_per_dim,lr")?;
    }
    Ok(w)
}
