//! Invertible network: per level a 2×2 squeeze followed by flow steps, each
//! step a configurable sequence of layers resolved by name through a
//! [`LayerRegistry`] (default `actnorm → inv1x1 → affine-coupling`).
//!
//! Log-determinants are tracked per batch element in nats.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{kaiming_normal, Bound, ParamId, ParamStore};
use crate::tensor::{self, Scalar, Tensor};

const ACTNORM_EPS: f64 = 1e-6;
const COUPLING_SLOPE: f64 = 0.2;
/// Coupling scale is `sigmoid(raw + SCALE_SHIFT) + SCALE_FLOOR`.
const SCALE_SHIFT: f64 = 2.0;
const SCALE_FLOOR: f64 = 0.5;

/// One invertible layer. Implementations hold only parameter ids; values
/// live in the shared [`ParamStore`].
pub trait FlowLayer<T: Scalar>: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Zero-based flow level this layer belongs to.
    fn level(&self) -> usize;

    /// Returns the output and this layer's log-determinant contribution,
    /// shaped `[]` (shared by the batch) or `[N]`.
    fn forward(&self, p: &Bound<T>, h: Var, cond: Var) -> Result<(Var, Var)>;

    fn inverse(&self, p: &Bound<T>, y: Var, cond: Var) -> Result<Var>;

    /// Data-dependent initialization from this layer's input on the first
    /// batch. Most layers need none.
    fn data_init(&self, _store: &mut ParamStore<T>, _h: &Tensor<T>) -> Result<()> {
        Ok(())
    }
}

/// What a layer factory knows about its position in the network.
#[derive(Clone, Debug)]
pub struct LayerCtx {
    pub name: String,
    pub level: usize,
    pub channels: usize,
    pub cond_channels: usize,
    pub hidden: usize,
}

pub type LayerFactory<T> =
    fn(&LayerCtx, &mut ParamStore<T>, &mut ChaCha8Rng) -> Result<Box<dyn FlowLayer<T>>>;

/// Flow layer constructors by kind name.
pub struct LayerRegistry<T: Scalar> {
    factories: BTreeMap<&'static str, LayerFactory<T>>,
}

impl<T: Scalar> Default for LayerRegistry<T> {
    fn default() -> Self {
        let mut r = LayerRegistry {
            factories: BTreeMap::new(),
        };
        r.register("actnorm", |c, s, _| Ok(Box::new(ActNorm::build(c, s)?)));
        r.register("inv1x1", |c, s, rng| Ok(Box::new(Inv1x1::build(c, s, rng)?)));
        r.register("affine-coupling", |c, s, rng| Ok(Box::new(AffineCoupling::build(c, s, rng)?)));
        r
    }
}

impl<T: Scalar> LayerRegistry<T> {
    pub fn register(&mut self, kind: &'static str, factory: LayerFactory<T>) {
        self.factories.insert(kind, factory);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(
        &self,
        kind: &str,
        ctx: &LayerCtx,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn FlowLayer<T>>> {
        let f = self.factories.get(kind).ok_or_else(|| {
            let known: Vec<_> = self.kinds().collect();
            Error::invalid(format!("unknown flow layer `{kind}` (known: {})", known.join(", ")))
        })?;
        f(ctx, store, rng)
    }
}

// -- actnorm ---------------------------------------------------------------

/// Per-channel `y = (h + bias) · scale`.
pub struct ActNorm {
    level: usize,
    bias: ParamId,
    scale: ParamId,
}

impl ActNorm {
    pub fn build<T: Scalar>(ctx: &LayerCtx, store: &mut ParamStore<T>) -> Result<Self> {
        let c = ctx.channels;
        Ok(ActNorm {
            level: ctx.level,
            bias: store.add(format!("{}.bias", ctx.name), Tensor::zeros(&[1, c, 1, 1]))?,
            scale: store.add(format!("{}.scale", ctx.name), Tensor::ones(&[1, c, 1, 1]))?,
        })
    }

    fn check_scale<T: Scalar>(tape: &Tape<T>, scale: Var) -> Result<()> {
        if let Some(c) = tape.value(scale).data().iter().position(|&v| v == T::zero()) {
            return Err(Error::ZeroScale { channel: c });
        }
        Ok(())
    }
}

impl<T: Scalar> FlowLayer<T> for ActNorm {
    fn kind(&self) -> &'static str {
        "actnorm"
    }

    fn level(&self) -> usize {
        self.level
    }

    fn forward(&self, p: &Bound<T>, h: Var, _cond: Var) -> Result<(Var, Var)> {
        let tape = p.tape();
        let (bias, scale) = (p.var(self.bias), p.var(self.scale));
        Self::check_scale(tape, scale)?;
        let y = tape.mul(tape.add(h, bias)?, scale)?;
        let shape = tape.shape(h);
        let hw = (shape[2] * shape[3]) as f64;
        let ld = tape.scale(tape.sum(tape.log(tape.abs(scale)?)?)?, hw)?;
        Ok((y, ld))
    }

    fn inverse(&self, p: &Bound<T>, y: Var, _cond: Var) -> Result<Var> {
        let tape = p.tape();
        let (bias, scale) = (p.var(self.bias), p.var(self.scale));
        Self::check_scale(tape, scale)?;
        tape.sub(tape.div(y, scale)?, bias)
    }

    fn data_init(&self, store: &mut ParamStore<T>, h: &Tensor<T>) -> Result<()> {
        let (n, c, hh, w) = h.dims4()?;
        let plane = hh * w;
        let count = (n * plane) as f64;
        let mut bias = vec![T::zero(); c];
        let mut scale = vec![T::zero(); c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|b| {
                let off = (b * c + ch) * plane;
                h.data()[off..off + plane].iter().map(|v| v.f64())
            });
            let mean = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            bias[ch] = T::of(-mean);
            scale[ch] = T::of(1.0 / (var.sqrt() + ACTNORM_EPS));
        }
        store.set(self.bias, Tensor::new(&[1, c, 1, 1], bias)?)?;
        store.set(self.scale, Tensor::new(&[1, c, 1, 1], scale)?)
    }
}

// -- invertible 1x1 convolution ------------------------------------------

/// Per-pixel channel mixing `y = W h`.
pub struct Inv1x1 {
    level: usize,
    weight: ParamId,
}

impl Inv1x1 {
    pub fn build<T: Scalar>(ctx: &LayerCtx, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = ctx.channels;
        let w = ones_preserving_rotation(c, rng);
        Ok(Inv1x1 {
            level: ctx.level,
            weight: store.add(format!("{}.weight", ctx.name), Tensor::from_f64(&[c, c], &w)?)?,
        })
    }
}

impl<T: Scalar> FlowLayer<T> for Inv1x1 {
    fn kind(&self) -> &'static str {
        "inv1x1"
    }

    fn level(&self) -> usize {
        self.level
    }

    fn forward(&self, p: &Bound<T>, h: Var, _cond: Var) -> Result<(Var, Var)> {
        let tape = p.tape();
        let w = p.var(self.weight);
        let shape = tape.shape(h);
        let ld = tape.scale(tape.log_abs_det(w)?, (shape[2] * shape[3]) as f64)?;
        Ok((tape.channel_mix(h, w)?, ld))
    }

    fn inverse(&self, p: &Bound<T>, y: Var, _cond: Var) -> Result<Var> {
        let tape = p.tape();
        let inv = tape.mat_inverse(p.var(self.weight))?;
        tape.channel_mix(y, inv)
    }
}

/// Random rotation `Q` with `Q·1 = 1`: a Householder reflection `H` taking
/// `e1` to `1/√c`, then `Q = H · diag(1, R) · H` with `R` a random
/// orthogonal `(c-1)×(c-1)` matrix. Row-major.
fn ones_preserving_rotation(c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if c == 1 {
        return vec![1.0];
    }
    let m = c - 1;
    let r = random_orthogonal(m, rng);
    let mut d = vec![0.0; c * c];
    d[0] = 1.0;
    for i in 0..m {
        for j in 0..m {
            d[(i + 1) * c + j + 1] = r[i * m + j];
        }
    }
    let u = 1.0 / (c as f64).sqrt();
    let mut v = vec![-u; c];
    v[0] += 1.0;
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let hmat: Vec<f64> = (0..c * c)
        .map(|k| {
            let (i, j) = (k / c, k % c);
            f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j] / vv
        })
        .collect();
    matmul(&matmul(&hmat, &d, c), &hmat, c)
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Modified Gram-Schmidt on the rows of a Gaussian matrix.
    let mut a: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum();
            for k in 0..n {
                a[i * n + k] -= dot * a[j * n + k];
            }
        }
        let norm = (0..n).map(|k| a[i * n + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..n {
            a[i * n + k] /= norm;
        }
    }
    a
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    tensor::gemm(n, n, n, a, false, b, false, &mut out, false);
    out
}

// -- conditional affine coupling -----------------------------------------

/// `h_b' = s ⊙ h_b + t` with `(raw, t) = NN(h_a, cond)` and
/// `s = sigmoid(raw + 2) + 0.5`.
pub struct AffineCoupling {
    level: usize,
    split: usize,
    rest: usize,
    cond_channels: usize,
    conv_in: (ParamId, ParamId),
    conv_mid: (ParamId, ParamId),
    conv_out: (ParamId, ParamId),
}

impl AffineCoupling {
    pub fn build<T: Scalar>(ctx: &LayerCtx, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if ctx.channels < 2 {
            return Err(Error::invalid("affine coupling needs at least 2 channels"));
        }
        let split = ctx.channels / 2;
        let rest = ctx.channels - split;
        let hid = ctx.hidden;
        let mut conv = |suffix: &str, w: Tensor<T>, cout: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(format!("{}.{suffix}.weight", ctx.name), w)?,
                store.add(format!("{}.{suffix}.bias", ctx.name), Tensor::zeros(&[cout]))?,
            ))
        };
        let w_in = kaiming_normal(&[hid, split + ctx.cond_channels, 3, 3], 1.0, rng);
        let w_mid = kaiming_normal(&[hid, hid, 1, 1], 1.0, rng);
        Ok(AffineCoupling {
            level: ctx.level,
            split,
            rest,
            cond_channels: ctx.cond_channels,
            conv_in: conv("in", w_in, hid)?,
            conv_mid: conv("mid", w_mid, hid)?,
            conv_out: conv("out", Tensor::zeros(&[2 * rest, hid, 3, 3]), 2 * rest)?,
        })
    }

    /// Returns `(s, t)` for the given `h_a`.
    fn scale_shift<T: Scalar>(&self, p: &Bound<T>, h_a: Var, cond: Var) -> Result<(Var, Var)> {
        let tape = p.tape();
        let hs = tape.shape(h_a);
        let cs = tape.shape(cond);
        if cs.len() != 4 || cs[0] != hs[0] || cs[1] != self.cond_channels || cs[2..] != hs[2..] {
            return Err(Error::shape(format!(
                "coupling condition {cs:?} does not match activations {hs:?} with {} condition channels",
                self.cond_channels
            )));
        }
        let conv = |x: Var, (w, b): (ParamId, ParamId), pad: usize| tape.conv2d(x, p.var(w), Some(p.var(b)), 1, pad);
        let x = tape.concat_channels(&[h_a, cond])?;
        let x = tape.leaky_relu(conv(x, self.conv_in, 1)?, COUPLING_SLOPE)?;
        let x = tape.leaky_relu(conv(x, self.conv_mid, 0)?, COUPLING_SLOPE)?;
        let out = conv(x, self.conv_out, 1)?;
        let raw = tape.slice_channels(out, 0, self.rest)?;
        let t = tape.slice_channels(out, self.rest, self.rest)?;
        let s = tape.add_scalar(tape.sigmoid(tape.add_scalar(raw, SCALE_SHIFT)?)?, SCALE_FLOOR)?;
        Ok((s, t))
    }
}

impl<T: Scalar> FlowLayer<T> for AffineCoupling {
    fn kind(&self) -> &'static str {
        "affine-coupling"
    }

    fn level(&self) -> usize {
        self.level
    }

    fn forward(&self, p: &Bound<T>, h: Var, cond: Var) -> Result<(Var, Var)> {
        let tape = p.tape();
        let h_a = tape.slice_channels(h, 0, self.split)?;
        let h_b = tape.slice_channels(h, self.split, self.rest)?;
        let (s, t) = self.scale_shift(p, h_a, cond)?;
        let y_b = tape.add(tape.mul(s, h_b)?, t)?;
        let ld = tape.sum_axes(tape.log(s)?, &[1, 2, 3], false)?;
        Ok((tape.concat_channels(&[h_a, y_b])?, ld))
    }

    fn inverse(&self, p: &Bound<T>, y: Var, cond: Var) -> Result<Var> {
        let tape = p.tape();
        let h_a = tape.slice_channels(y, 0, self.split)?;
        let y_b = tape.slice_channels(y, self.split, self.rest)?;
        let (s, t) = self.scale_shift(p, h_a, cond)?;
        let h_b = tape.div(tape.sub(y_b, t)?, s)?;
        tape.concat_channels(&[h_a, h_b])
    }
}

// -- the network ------------------------------------------------------------

/// Squeeze-then-steps levels with no splits: the latent keeps every
/// dimension of the input, shaped `(N, 3·4^L, H/2^L, W/2^L)`.
pub struct Flow<T: Scalar> {
    levels: usize,
    layers: Vec<Box<dyn FlowLayer<T>>>,
}

impl<T: Scalar> Flow<T> {
    pub fn build(
        cfg: &ModelConfig,
        cond_channels: usize,
        registry: &LayerRegistry<T>,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.step_layers.is_empty() {
            return Err(Error::invalid("model.step_layers is empty"));
        }
        let mut layers = Vec::new();
        for level in 0..cfg.levels {
            let channels = 3 * 4usize.pow(level as u32 + 1);
            for step in 0..cfg.steps_per_level {
                for (i, kind) in cfg.step_layers.iter().enumerate() {
                    let ctx = LayerCtx {
                        name: format!("flow.l{level}.s{step}.{i}.{kind}"),
                        level,
                        channels,
                        cond_channels,
                        hidden: cfg.coupling_hidden,
                    };
                    layers.push(registry.create(kind, &ctx, store, rng)?);
                }
            }
        }
        Ok(Flow {
            levels: cfg.levels,
            layers,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn layers(&self) -> &[Box<dyn FlowLayer<T>>] {
        &self.layers
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = 1usize << self.levels;
        if shape.len() != 4 || shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(Error::shape(format!(
                "flow input {shape:?} is not divisible by 2^levels = {f}"
            )));
        }
        Ok(())
    }

    /// `z = Θ(x; cond)` and the per-element log-determinant `[N]`.
    pub fn forward(&self, p: &Bound<T>, x: Var, cond: &[Var]) -> Result<(Var, Var)> {
        let (z, ld, _) = self.forward_traced(p, x, cond)?;
        Ok((z, ld))
    }

    /// Like [`Flow::forward`], also returning each layer's output in order.
    pub fn forward_traced(&self, p: &Bound<T>, x: Var, cond: &[Var]) -> Result<(Var, Var, Vec<Var>)> {
        let tape = p.tape();
        let shape = tape.shape(x);
        self.check_input(&shape)?;
        let mut logdet = tape.constant(Tensor::zeros(&[shape[0]]));
        let mut h = x;
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut level = usize::MAX;
        for layer in &self.layers {
            if layer.level() != level {
                level = layer.level();
                h = tape.squeeze2x2(h)?;
            }
            let c = *cond.get(level).ok_or_else(|| Error::shape("missing level condition features"))?;
            let (y, ld) = layer.forward(p, h, c)?;
            logdet = tape.add(logdet, ld)?;
            trace.push(y);
            h = y;
        }
        Ok((h, logdet, trace))
    }

    /// Exact inverse, layer by layer in reverse order.
    pub fn inverse(&self, p: &Bound<T>, z: Var, cond: &[Var]) -> Result<Var> {
        let tape = p.tape();
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let c = *cond.get(layer.level()).ok_or_else(|| Error::shape("missing level condition features"))?;
            h = layer.inverse(p, h, c)?;
            if i == 0 || self.layers[i - 1].level() != layer.level() {
                h = tape.unsqueeze2x2(h)?;
            }
        }
        Ok(h)
    }

    /// Runs the data-dependent initialization of every layer on one batch,
    /// feeding each layer the output of the already-initialized prefix.
    pub fn data_init(&self, store: &mut ParamStore<T>, x: &Tensor<T>, cond: &[Tensor<T>]) -> Result<()> {
        let mut h = x.clone();
        let mut level = usize::MAX;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.level() != level {
                level = layer.level();
                h = tensor::squeeze2x2(&h)?;
            }
            layer.data_init(store, &h)?;
            let tape = Tape::no_grad();
            let p = store.bind(&tape, false);
            let hv = tape.constant(h);
            let c = tape.constant(cond[level].clone());
            let (y, _) = self.layers[i].forward(&p, hv, c)?;
            h = tape.value(y);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    fn ctx(channels: usize, cond: usize) -> LayerCtx {
        LayerCtx {
            name: "t".into(),
            level: 0,
            channels,
            cond_channels: cond,
            hidden: 8,
        }
    }

    #[test]
    fn actnorm_scale_two_log_det() {
        let mut store = ParamStore::<f64>::new();
        let an = ActNorm::build(&ctx(1, 0), &mut store).unwrap();
        store.set(an.scale, Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let h = tape.constant(rand_tensor(&[1, 1, 2, 2], 1, 1.0));
        let c = tape.constant(Tensor::zeros(&[1, 0, 2, 2]));
        let (_, ld) = FlowLayer::<f64>::forward(&an, &p, h, c).unwrap();
        assert!((tape.value(ld).item() - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn actnorm_identity_and_zero_scale() {
        let mut store = ParamStore::<f64>::new();
        let an = ActNorm::build(&ctx(2, 0), &mut store).unwrap();
        let x = rand_tensor(&[1, 2, 2, 2], 2, 1.0);
        {
            let tape = Tape::no_grad();
            let p = store.bind(&tape, false);
            let c = tape.constant(Tensor::zeros(&[1, 0, 2, 2]));
            let (y, ld) = FlowLayer::<f64>::forward(&an, &p, tape.constant(x.clone()), c).unwrap();
            assert_eq!(tape.value(y).data(), x.data());
            assert_eq!(tape.value(ld).item(), 0.0);
        }
        store.set(an.scale, Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let c = tape.constant(Tensor::zeros(&[1, 0, 2, 2]));
        let err = FlowLayer::<f64>::forward(&an, &p, tape.constant(x), c).unwrap_err();
        assert!(matches!(err, Error::ZeroScale { channel: 1 }));
    }

    #[test]
    fn actnorm_data_init_normalizes() {
        let mut store = ParamStore::<f64>::new();
        let an = ActNorm::build(&ctx(3, 0), &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[4, 3, 6, 6], |i| {
            let c = (i / 36) % 3;
            3.0 * c as f64 - 2.0 + (c as f64 + 0.5) * rng.random_range(-1.0..1.0)
        });
        FlowLayer::<f64>::data_init(&an, &mut store, &x).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let c = tape.constant(Tensor::zeros(&[4, 0, 6, 6]));
        let (y, _) = FlowLayer::<f64>::forward(&an, &p, tape.constant(x), c).unwrap();
        let y = tape.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| (0..36).map(move |k| (b, k)))
                .map(|(b, k)| y.data()[(b * 3 + ch) * 36 + k])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn inv1x1_swap_and_identity() {
        let mut store = ParamStore::<f64>::new();
        let inv = Inv1x1::build(&ctx(2, 0), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = rand_tensor(&[1, 2, 2, 2], 3, 1.0);
        for (w, swapped) in [(vec![1.0, 0.0, 0.0, 1.0], false), (vec![0.0, 1.0, 1.0, 0.0], true)] {
            store.set(inv.weight, Tensor::new(&[2, 2], w).unwrap()).unwrap();
            let tape = Tape::no_grad();
            let p = store.bind(&tape, false);
            let c = tape.constant(Tensor::zeros(&[1, 0, 2, 2]));
            let (y, ld) = FlowLayer::<f64>::forward(&inv, &p, tape.constant(x.clone()), c).unwrap();
            let y = tape.value(y);
            assert_eq!(tape.value(ld).item(), 0.0);
            let expect = if swapped {
                tensor::concat_channels(&[&tensor::slice_channels(&x, 1, 1).unwrap(), &tensor::slice_channels(&x, 0, 1).unwrap()]).unwrap()
            } else {
                x.clone()
            };
            assert_eq!(y.data(), expect.data());
        }
    }

    #[test]
    fn inv1x1_init_is_orthogonal_and_fixes_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for c in [2, 3, 12, 48] {
            let q = ones_preserving_rotation(c, &mut rng);
            for i in 0..c {
                let row: f64 = (0..c).map(|j| q[i * c + j]).sum();
                assert!((row - 1.0).abs() < 1e-10);
                for j in 0..c {
                    let dot: f64 = (0..c).map(|k| q[i * c + k] * q[j * c + k]).sum();
                    assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn singular_inv1x1_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let inv = Inv1x1::build(&ctx(2, 0), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.set(inv.weight, Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap()).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let c = tape.constant(Tensor::zeros(&[1, 0, 1, 1]));
        let h = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        assert!(matches!(FlowLayer::<f64>::forward(&inv, &p, h, c), Err(Error::Singular { .. })));
    }

    #[test]
    fn zero_coupling_scales_by_constant() {
        let mut store = ParamStore::<f64>::new();
        let cp = AffineCoupling::build(&ctx(4, 2), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = rand_tensor(&[1, 4, 3, 3], 6, 1.0);
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let c = tape.constant(rand_tensor(&[1, 2, 3, 3], 7, 1.0));
        let (y, ld) = FlowLayer::<f64>::forward(&cp, &p, tape.constant(x.clone()), c).unwrap();
        let s = 1.0 / (1.0 + (-2f64).exp()) + 0.5;
        let y = tape.value(y);
        for (i, (&a, &b)) in y.data().iter().zip(x.data()).enumerate() {
            let expect = if i >= 18 { s * b } else { b };
            assert!((a - expect).abs() < 1e-12);
        }
        assert!((tape.value(ld).data()[0] - 18.0 * s.ln()).abs() < 1e-10);
    }

    #[test]
    fn coupling_rejects_mismatched_condition() {
        let mut store = ParamStore::<f64>::new();
        let cp = AffineCoupling::build(&ctx(4, 2), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let h = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let c = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(FlowLayer::<f64>::forward(&cp, &p, h, c).is_err());
    }

    #[test]
    fn unknown_layer_kind_is_rejected() {
        let reg = LayerRegistry::<f32>::default();
        let mut store = ParamStore::new();
        let err = reg
            .create("spline", &ctx(4, 0), &mut store, &mut ChaCha8Rng::seed_from_u64(0))
            .err()
            .unwrap();
        assert!(err.to_string().contains("spline"));
    }
}
