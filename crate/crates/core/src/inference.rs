//! Enhancement, likelihood scoring and gradient activation maps over a
//! trained model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::config::InferenceConfig;
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Model;
use crate::preprocess;
use crate::tensor::{Scalar, Tensor};
use crate::training::nll_terms;

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceOptions {
    /// Latent sampler name: `mean` or `sample`.
    pub mode: String,
    pub samples: usize,
    pub temperature: f64,
    pub z_offset: f64,
    pub seed: u64,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        InferenceConfig::default().into()
    }
}

impl From<InferenceConfig> for EnhanceOptions {
    fn from(c: InferenceConfig) -> Self {
        EnhanceOptions {
            mode: c.mode,
            samples: c.samples,
            temperature: c.temperature,
            z_offset: c.z_offset,
            seed: c.seed,
        }
    }
}

/// Produces the latents to invert from the (offset) latent mean.
pub trait LatentSampler<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn latents(&self, mean: &Tensor<T>, opts: &EnhanceOptions, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>>;
}

/// The mean itself, once.
pub struct MeanSampler;

impl<T: Scalar> LatentSampler<T> for MeanSampler {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn latents(&self, mean: &Tensor<T>, _opts: &EnhanceOptions, _rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
        vec![mean.clone()]
    }
}

/// `K` draws of `mean + τ·ε`, `ε ~ N(0, I)`.
pub struct GaussianSampler;

impl<T: Scalar> LatentSampler<T> for GaussianSampler {
    fn name(&self) -> &'static str {
        "sample"
    }

    fn latents(&self, mean: &Tensor<T>, opts: &EnhanceOptions, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
        (0..opts.samples)
            .map(|_| {
                mean.map(|m| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + T::of(opts.temperature * e)
                })
            })
            .collect()
    }
}

pub fn sampler<T: Scalar>(name: &str) -> Result<Box<dyn LatentSampler<T>>> {
    let mut reg: BTreeMap<&str, fn() -> Box<dyn LatentSampler<T>>> = BTreeMap::new();
    reg.insert("mean", || Box::new(MeanSampler));
    reg.insert("sample", || Box::new(GaussianSampler));
    let f = reg.get(name).ok_or_else(|| {
        Error::invalid(format!(
            "unknown enhance mode `{name}` (known: {})",
            reg.keys().copied().collect::<Vec<_>>().join(", ")
        ))
    })?;
    Ok(f())
}

/// Reflect-pads the bottom/right edges up to a multiple of `m`.
fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<(Tensor<T>, usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    let ph = (m - h % m) % m;
    let pw = (m - w % m) % m;
    let padded = if ph == 0 && pw == 0 { x.clone() } else { x.reflect_pad(ph, pw)? };
    Ok((padded, h, w))
}

/// Enhances a low-light image `(1, 3, H, W)`. Inputs whose extents are not
/// multiples of `2^levels` are reflect-padded and the result cropped back.
pub fn enhance<T: Scalar>(model: &Model<T>, x_low: &Tensor<T>, opts: &EnhanceOptions) -> Result<Tensor<T>> {
    if opts.samples == 0 || opts.temperature < 0.0 {
        return Err(Error::invalid("enhance needs samples >= 1 and temperature >= 0"));
    }
    let sampler = sampler::<T>(&opts.mode)?;
    let (x, h, w) = pad_to_multiple(x_low, model.size_multiple())?;
    let tape = Tape::no_grad();
    let p = model.params.bind(&tape, false);
    let cond = model.encode(&p, &x)?;
    let mean = tape.value(model.encoder_mean(&tape, &cond)?).map(|v| v + T::of(opts.z_offset));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let latents = sampler.latents(&mean, opts, &mut rng);
    let k = latents.len();
    let mut acc: Option<Tensor<T>> = None;
    for z in latents {
        let out = tape.value(model.flow.inverse(&p, tape.constant(z), &cond.level_feats)?);
        acc = Some(match acc {
            None => out,
            Some(a) => a.add(&out)?,
        });
    }
    let avg = acc.expect("at least one latent").scale(T::of(1.0 / k as f64));
    avg.crop(0, 0, h, w).map(|t| t.map(|v| v.max(T::zero()).min(T::one())))
}

/// Likelihood of a candidate normally exposed image given a low-light one,
/// under the encoder-branch prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllScore {
    /// Raw `−log p` in nats.
    pub total: f64,
    pub per_dim: f64,
    /// Gaussian prior term of `total`.
    pub prior: f64,
    pub logdet: f64,
}

pub fn score_nll<T: Scalar>(model: &Model<T>, x_low: &Tensor<T>, candidate: &Tensor<T>) -> Result<NllScore> {
    if x_low.shape() != candidate.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x_low.shape(), candidate.shape())));
    }
    let m = model.size_multiple();
    let (low, _, _) = pad_to_multiple(x_low, m)?;
    let (cand, _, _) = pad_to_multiple(candidate, m)?;
    let n = low.shape()[0];
    let tape = Tape::no_grad();
    let p = model.params.bind(&tape, false);
    let x = tape.constant(cand.clone());
    let terms = nll_terms(model, &p, &low, x, &cand, &vec![false; n])?;
    let sum = |v| tape.value(v).to_f64_vec().iter().sum::<f64>();
    let total = sum(terms.total);
    Ok(NllScore {
        total,
        per_dim: total / (n * terms.dims) as f64,
        prior: sum(terms.prior),
        logdet: sum(terms.logdet),
    })
}

/// Per-pixel L2 norm across channels of `∂NLL/∂x_high`, `(1, 1, H, W)`.
pub fn gradient_norm_map<T: Scalar>(model: &Model<T>, x_low: &Tensor<T>, x_high: &Tensor<T>) -> Result<Tensor<T>> {
    if x_low.shape() != x_high.shape() || x_low.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "gradient map needs two equal single images, got {:?} and {:?}",
            x_low.shape(),
            x_high.shape()
        )));
    }
    let (low, h, w) = pad_to_multiple(x_low, model.size_multiple())?;
    let (high, _, _) = pad_to_multiple(x_high, model.size_multiple())?;
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let x = tape.leaf(high.clone(), true);
    let terms = nll_terms(model, &p, &low, x, &high, &[false])?;
    let loss = tape.sum(terms.total)?;
    let g = tape.backward(loss)?.wrt(x)?.crop(0, 0, h, w)?;
    let plane = h * w;
    let d = g.data();
    let norms = (0..plane)
        .map(|i| {
            let s: f64 = (0..3).map(|c| d[c * plane + i].f64().powi(2)).sum();
            T::of(s.sqrt())
        })
        .collect();
    Tensor::new(&[1, 1, h, w], norms)
}

/// Histogram-equalized gradient norm map in `[0, 1]`, `(1, 1, H, W)`.
pub fn grad_activation_map<T: Scalar>(model: &Model<T>, x_low: &Tensor<T>, x_high: &Tensor<T>) -> Result<Tensor<T>> {
    let norms = gradient_norm_map(model, x_low, x_high)?;
    let max = norms.data().iter().fold(T::zero(), |a, &b| a.max(b));
    let scaled = if max > T::zero() { norms.map(|v| v / max) } else { norms };
    preprocess::hist_eq(&scaled)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Per-dim NLL of the reference under the model.
    pub nll_per_dim: f64,
}

/// Scores `candidates` (or the model's enhancements when `None`) against
/// each pair's reference.
pub fn evaluate(
    model: &Model<f32>,
    pairs: &[ImagePair],
    opts: &EnhanceOptions,
    candidates: Option<&[Tensor<f32>]>,
) -> Result<Vec<EvalRow>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let out = match candidates {
                Some(c) => c[i].clone(),
                None => enhance(model, &pair.low, opts)?,
            };
            Ok(EvalRow {
                id: pair.id.clone(),
                psnr_db: metrics::psnr_capped(&out, &pair.high)?,
                ssim: metrics::ssim(&out, &pair.high)?,
                nll_per_dim: score_nll(model, &pair.low, &pair.high)?.per_dim,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            levels: 1,
            steps_per_level: 2,
            coupling_hidden: 8,
            encoder_blocks: 1,
            encoder_dense_layers: 2,
            encoder_growth: 4,
            encoder_width: 6,
            ..Default::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.random_range(0.05..0.95))
    }

    #[test]
    fn mean_enhancement_round_trips_to_latent_mean() {
        let model = Model::<f64>::new(&tiny(), 1).unwrap();
        let low = image(4, 6, 2);
        let tape = Tape::no_grad();
        let p = model.params.bind(&tape, false);
        let cond = model.encode(&p, &low).unwrap();
        let mean = tape.value(model.encoder_mean(&tape, &cond).unwrap());
        let raw = tape.value(model.flow.inverse(&p, tape.constant(mean.clone()), &cond.level_feats).unwrap());
        let (z, _) = model.flow.forward(&p, tape.constant(raw), &cond.level_feats).unwrap();
        assert!(tape.value(z).max_abs_diff(&mean) < 1e-9);
    }

    #[test]
    fn zero_temperature_sampling_equals_mean() {
        let model = Model::<f64>::new(&tiny(), 1).unwrap();
        let low = image(4, 4, 3);
        let mean = enhance(&model, &low, &EnhanceOptions::default()).unwrap();
        let opts = EnhanceOptions {
            mode: "sample".into(),
            samples: 3,
            temperature: 0.0,
            ..Default::default()
        };
        assert!(enhance(&model, &low, &opts).unwrap().max_abs_diff(&mean) < 1e-12);
        assert!(enhance(&model, &low, &EnhanceOptions { mode: "mode".into(), ..Default::default() }).is_err());
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let model = Model::<f64>::new(&tiny(), 1).unwrap();
        let out = enhance(&model, &image(5, 7, 4), &EnhanceOptions::default()).unwrap();
        assert_eq!(out.shape(), &[1, 3, 5, 7]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn score_is_deterministic_and_mean_minimizes_prior() {
        let model = Model::<f64>::new(&tiny(), 5).unwrap();
        let low = image(4, 4, 6);
        let tape = Tape::no_grad();
        let p = model.params.bind(&tape, false);
        let cond = model.encode(&p, &low).unwrap();
        let mean = tape.value(model.encoder_mean(&tape, &cond).unwrap());
        let cand = tape.value(model.flow.inverse(&p, tape.constant(mean), &cond.level_feats).unwrap());
        let a = score_nll(&model, &low, &cand).unwrap();
        assert_eq!(a, score_nll(&model, &low, &cand).unwrap());
        assert!((a.prior - 48.0 * crate::training::HALF_LOG_2PI).abs() < 1e-8);
        for off in [-0.1, 0.05, 0.2] {
            let other = score_nll(&model, &low, &cand.map(|v| v + off)).unwrap();
            assert!(other.prior > a.prior);
        }
    }

    #[test]
    fn activation_map_shape_and_range() {
        let model = Model::<f64>::new(&tiny(), 2).unwrap();
        let g = grad_activation_map(&model, &image(6, 6, 1), &image(6, 6, 2)).unwrap();
        assert_eq!(g.shape(), &[1, 1, 6, 6]);
        assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
