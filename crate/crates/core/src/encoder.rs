//! Conditioning encoder: a small residual-in-residual dense network over the
//! 12-channel encoder input, producing the color map used as the latent mean
//! and one condition feature map per flow level.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{kaiming_normal, Bound, ParamId, ParamStore};
use crate::preprocess::{self, ENCODER_INPUT_CHANNELS};
use crate::tensor::{Scalar, Tensor};

const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Conv> {
        let weight = store.add(format!("{name}.weight"), kaiming_normal(&[cout, cin, k, k], gain, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    fn apply<T: Scalar>(&self, p: &Bound<T>, x: Var) -> Result<Var> {
        p.tape()
            .conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Encoder outputs: `g(x_l)` and the per-level features.
pub struct CondFeatures {
    pub color_map: Var,
    /// `level_feats[l]` has spatial extent `H/2^(l+1) × W/2^(l+1)`.
    pub level_feats: Vec<Var>,
}

pub struct Encoder {
    stem: Conv,
    blocks: Vec<Vec<Conv>>,
    trunk: Conv,
    head: Conv,
    down: Vec<Conv>,
    residual_scale: f64,
    color_range: f64,
    width: usize,
}

impl Encoder {
    pub fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Encoder> {
        let f = cfg.encoder_width;
        let g = cfg.encoder_growth;
        let stem = Conv::new(store, "enc.stem", ENCODER_INPUT_CHANNELS, f, 3, 1, 1.0, rng)?;
        let mut blocks = Vec::with_capacity(cfg.encoder_blocks);
        for b in 0..cfg.encoder_blocks {
            let mut convs = Vec::with_capacity(cfg.encoder_dense_layers);
            for d in 0..cfg.encoder_dense_layers {
                let cin = f + d * g;
                let cout = if d + 1 == cfg.encoder_dense_layers { f } else { g };
                convs.push(Conv::new(store, &format!("enc.block{b}.conv{d}"), cin, cout, 3, 1, 0.1, rng)?);
            }
            blocks.push(convs);
        }
        let trunk = Conv::new(store, "enc.trunk", f, f, 3, 1, 1.0, rng)?;
        let head = Conv::new(store, "enc.head", f, 3, 3, 1, 1.0, rng)?;
        let down = (0..cfg.levels)
            .map(|l| Conv::new(store, &format!("enc.down{l}"), f, f, 3, 2, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            stem,
            blocks,
            trunk,
            head,
            down,
            residual_scale: cfg.encoder_residual_scale,
            color_range: cfg.color_map_range,
            width: f,
        })
    }

    /// Channel width of every level feature map.
    pub fn feature_width(&self) -> usize {
        self.width
    }

    /// Runs the encoder on a low-light batch `(N, 3, H, W)`.
    pub fn encode<T: Scalar>(&self, p: &Bound<T>, x_low: &Tensor<T>) -> Result<CondFeatures> {
        let (_, _, h, w) = x_low.dims4()?;
        let f = 1usize << self.down.len();
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "encoder input {h}x{w} is not divisible by 2^levels = {f}"
            )));
        }
        let tape: &Tape<T> = p.tape();
        let input = tape.constant(preprocess::encoder_input(x_low)?);
        let stem = self.stem.apply(p, input)?;
        let mut x = stem;
        for block in &self.blocks {
            x = self.dense_block(p, block, x)?;
        }
        let trunk = tape.add(self.trunk.apply(p, x)?, stem)?;
        let raw = self.head.apply(p, trunk)?;
        let color_map = tape.scale(tape.sigmoid(raw)?, self.color_range)?;
        let mut level_feats = Vec::with_capacity(self.down.len());
        let mut d = trunk;
        for (l, conv) in self.down.iter().enumerate() {
            let src = if l == 0 { d } else { tape.leaky_relu(d, LRELU_SLOPE)? };
            d = conv.apply(p, src)?;
            level_feats.push(d);
        }
        Ok(CondFeatures {
            color_map,
            level_feats,
        })
    }

    fn dense_block<T: Scalar>(&self, p: &Bound<T>, convs: &[Conv], x: Var) -> Result<Var> {
        let tape = p.tape();
        let mut feats = vec![x];
        let last = convs.len() - 1;
        for (i, conv) in convs.iter().enumerate() {
            let inp = if feats.len() == 1 { x } else { tape.concat_channels(&feats)? };
            let out = conv.apply(p, inp)?;
            if i == last {
                return tape.add(x, tape.scale(out, self.residual_scale)?);
            }
            feats.push(tape.leaky_relu(out, LRELU_SLOPE)?);
        }
        unreachable!("dense block has at least one conv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            levels: 2,
            encoder_blocks: 1,
            encoder_dense_layers: 2,
            encoder_growth: 4,
            encoder_width: 6,
            ..Default::default()
        }
    }

    fn image<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| T::of(rng.random_range(0.02..0.3)))
    }

    #[test]
    fn output_shapes_follow_levels() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::build(&small_cfg(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let out = enc.encode(&p, &image(8, 12, 1)).unwrap();
        assert_eq!(tape.shape(out.color_map), vec![1, 3, 8, 12]);
        assert_eq!(tape.shape(out.level_feats[0]), vec![1, 6, 4, 6]);
        assert_eq!(tape.shape(out.level_feats[1]), vec![1, 6, 2, 3]);
        let cm = tape.value(out.color_map);
        assert!(cm.data().iter().all(|&v| v > 0.0 && v <= 2.0));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::build(&small_cfg(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        assert!(enc.encode(&p, &image(6, 8, 1)).is_err());
    }

    #[test]
    fn zero_weights_give_bias_outputs() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::build(&small_cfg(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            let fill = if store.name(id) == "enc.head.bias" { 0.5 } else { 0.0 };
            let fill = if store.name(id).starts_with("enc.down") && store.name(id).ends_with("bias") { 0.25 } else { fill };
            store.set(id, Tensor::full(&shape, fill)).unwrap();
        }
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let out = enc.encode(&p, &image(4, 4, 3)).unwrap();
        let expect = 2.0 * (1.0 / (1.0 + (-0.5f64).exp()));
        assert!(tape.value(out.color_map).data().iter().all(|&v| (v - expect).abs() < 1e-12));
        for lf in out.level_feats {
            assert!(tape.value(lf).data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let enc = Encoder::build(&small_cfg(), &mut store, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let tape = Tape::no_grad();
            let p = store.bind(&tape, false);
            let out = enc.encode(&p, &image(8, 8, 4)).unwrap();
            (tape.value(out.color_map).to_vec(), tape.value(out.level_feats[1]).to_vec())
        };
        let a = run();
        let b = run();
        assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = image::<f64>(4, 4, 5);
        let objective = |store: &ParamStore<f64>| -> f64 {
            let tape = Tape::no_grad();
            let p = store.bind(&tape, false);
            let out = enc.encode(&p, &x).unwrap();
            tape.value(out.color_map).sum_all()
        };
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let out = enc.encode(&p, &x).unwrap();
        let loss = tape.sum(out.color_map).unwrap();
        let grads = p.collect_grads(&tape.backward(loss).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in ["enc.stem.weight", "enc.block0.conv0.weight", "enc.block0.conv1.weight", "enc.trunk.weight", "enc.head.weight"] {
            let id = store.find(name).unwrap();
            for _ in 0..3 {
                let k = rng.random_range(0..store.get(id).numel());
                let h = 1e-6;
                let mut plus = store.clone();
                plus.values_mut()[id.index()].data_mut()[k] += h;
                let mut minus = store.clone();
                minus.values_mut()[id.index()].data_mut()[k] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads[id.index()].data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{k}]: fd {fd} vs autodiff {an}");
            }
        }
    }
}
