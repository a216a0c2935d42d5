//! Built-in invariant checks run by `llflow selftest`: flow round-trip,
//! log-determinant against a dense Jacobian, gradients against finite
//! differences, and metric closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::linalg::Lu;
use crate::metrics;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::training::nll_terms;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Moves flow parameters away from their identity-like starting values so
/// invariant checks exercise every code path. Actnorm scales are scaled by
/// a factor in `[0.8, 1.2)`, so data-initialized statistics are kept
/// roughly intact.
pub fn jitter_params<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let small = Normal::new(0.0, 0.05).expect("valid std");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let v = &mut store.values_mut()[id.index()];
        let data = v.data_mut();
        if name.starts_with("flow.") && name.ends_with(".scale") {
            data.iter_mut().for_each(|x| *x *= T::of(rng.random_range(0.8..1.2)));
        } else if name.starts_with("flow.") && name.ends_with(".bias") {
            data.iter_mut().for_each(|x| *x += T::of(rng.random_range(-0.1..0.1)));
        } else if name.starts_with("flow.") && name.ends_with(".weight") {
            data.iter_mut().for_each(|x| *x += T::of(small.sample(rng)));
        }
    }
}

/// Small model used by the checks.
pub fn check_model_config(levels: usize, steps: usize) -> ModelConfig {
    ModelConfig {
        levels,
        steps_per_level: steps,
        coupling_hidden: 8,
        encoder_blocks: 1,
        encoder_dense_layers: 2,
        encoder_growth: 4,
        encoder_width: 6,
        ..Default::default()
    }
}

fn random_image<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(0.02..0.98)))
}

/// Dense Jacobian `∂z/∂x` of the flow, row-major `(D, D)`, built with one
/// backward pass per latent element.
pub fn flow_jacobian(model: &Model<f64>, x_low: &Tensor<f64>, x: &Tensor<f64>) -> Result<(Vec<f64>, f64)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let xv = tape.leaf(x.clone(), true);
    let pass = model.forward(&p, x_low, xv)?;
    let d = x.numel();
    let zshape = tape.shape(pass.z);
    let mut jac = vec![0.0; d * d];
    for i in 0..d {
        let mut onehot = vec![0.0; d];
        onehot[i] = 1.0;
        let e = tape.constant(Tensor::new(&zshape, onehot)?);
        let zi = tape.sum(tape.mul(pass.z, e)?)?;
        let g = tape.backward(zi)?.wrt(xv)?;
        jac[i * d..(i + 1) * d].copy_from_slice(g.data());
    }
    Ok((jac, tape.value(pass.logdet).item()))
}

fn round_trip_check() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for draw in 0..3 {
        let mut model = Model::<f32>::new(&ModelConfig::default(), draw)?;
        let low = random_image::<f32>(&[1, 3, 32, 32], &mut rng);
        let x = random_image::<f32>(&[1, 3, 32, 32], &mut rng);
        model.data_init(&low, &x)?;
        jitter_params(&mut model.params, &mut rng);
        let tape = Tape::no_grad();
        let p = model.params.bind(&tape, false);
        let pass = model.forward(&p, &low, tape.constant(x.clone()))?;
        let back = model.flow.inverse(&p, pass.z, &pass.cond.level_feats)?;
        worst = worst.max(tape.value(back).max_abs_diff(&x));
    }
    Ok(CheckResult {
        name: "flow round-trip",
        passed: worst < 1e-4,
        detail: format!("max |inverse(forward(x)) - x| = {worst:.3e}"),
    })
}

fn logdet_check() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for draw in 0..3 {
        let mut model = Model::<f64>::new(&check_model_config(1, 2), 10 + draw)?;
        jitter_params(&mut model.params, &mut rng);
        let low = random_image::<f64>(&[1, 3, 4, 4], &mut rng);
        let x = random_image::<f64>(&[1, 3, 4, 4], &mut rng);
        let (jac, logdet) = flow_jacobian(&model, &low, &x)?;
        let brute = Lu::factor(&jac, 48)?.log_abs_det();
        worst = worst.max((brute - logdet).abs() / brute.abs().max(1.0));
    }
    Ok(CheckResult {
        name: "log-determinant vs dense Jacobian",
        passed: worst < 1e-5,
        detail: format!("max relative error {worst:.3e}"),
    })
}

fn gradient_check() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Model::<f64>::new(&check_model_config(2, 1), 4)?;
    jitter_params(&mut model.params, &mut rng);
    let low = random_image::<f64>(&[2, 3, 8, 8], &mut rng);
    let high = random_image::<f64>(&[2, 3, 8, 8], &mut rng);
    let use_ref = [false, true];
    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let tape = Tape::no_grad();
        let p = m.params.bind(&tape, false);
        let t = nll_terms(m, &p, &low, tape.constant(high.clone()), &high, &use_ref)?;
        Ok(tape.value(t.total).sum_all())
    };
    let tape = Tape::new();
    let p = model.params.bind(&tape, true);
    let t = nll_terms(&model, &p, &low, tape.constant(high.clone()), &high, &use_ref)?;
    let loss = tape.sum(t.total)?;
    let grads = p.collect_grads(&tape.backward(loss)?)?;
    drop(p);
    let mut worst = 0f64;
    let h = 1e-4;
    for _ in 0..10 {
        let k = rng.random_range(0..model.params.len());
        let i = rng.random_range(0..model.params.values()[k].numel());
        let orig = model.params.values()[k].data()[i];
        model.params.values_mut()[k].data_mut()[i] = orig + h;
        let plus = loss_of(&model)?;
        model.params.values_mut()[k].data_mut()[i] = orig - h;
        let minus = loss_of(&model)?;
        model.params.values_mut()[k].data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let an = grads[k].data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(CheckResult {
        name: "parameter gradients vs finite differences",
        passed: worst < 1e-3,
        detail: format!("max relative error {worst:.3e} over 10 sampled parameters"),
    })
}

fn metric_check() -> Result<CheckResult> {
    let z = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
    let d = Tensor::<f64>::full(&[1, 3, 16, 16], 0.1);
    let p = metrics::psnr(&z, &d)?;
    let s = metrics::ssim(&d, &d)?;
    Ok(CheckResult {
        name: "metric closed forms",
        passed: (p - 20.0).abs() < 1e-9 && (s - 1.0).abs() < 1e-12,
        detail: format!("psnr(0, 0.1) = {p:.6} dB, ssim(a, a) = {s:.6}"),
    })
}

/// Runs every check; an error inside a check counts as a failure.
pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Result<CheckResult>); 4] = [
        ("flow round-trip", round_trip_check),
        ("log-determinant vs dense Jacobian", logdet_check),
        ("parameter gradients vs finite differences", gradient_check),
        ("metric closed forms", metric_check),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
