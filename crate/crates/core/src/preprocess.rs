//! Encoder inputs and latent-prior means derived directly from images.
//!
//! All functions take `(N, 3, H, W)` batches with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{self, Axis, Scalar, Tensor};

/// Guard added to the channel mean so black pixels stay finite.
pub const COLOR_MAP_EPS: f64 = 1e-6;

/// Histogram bins used by [`hist_eq`].
pub const HIST_BINS: usize = 256;

/// Channels of the encoder input: image, equalized image, color map, noise map.
pub const ENCODER_INPUT_CHANNELS: usize = 12;

/// Illumination-invariant color map `x / (mean_c(x) + eps)`.
pub fn color_map<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    let mean = tensor::sum_axes(x, &[1], true)?.map(|v| v / T::of(c as f64) + T::of(COLOR_MAP_EPS));
    x.zip_with(&mean, |v, m| v / m)
}

/// Per-pixel, per-channel `max(|∇x C(x)|, |∇y C(x)|)`.
pub fn noise_map<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let cm = color_map(x)?;
    let gx = tensor::spatial_gradient(&cm, Axis::X)?;
    let gy = tensor::spatial_gradient(&cm, Axis::Y)?;
    gx.zip_with(&gy, |a, b| a.abs().max(b.abs()))
}

/// Bin of a `[0, 1]` value among [`HIST_BINS`] equal-width bins.
pub fn hist_bin<T: Scalar>(v: T) -> usize {
    let b = (v.f64() * HIST_BINS as f64).floor();
    b.clamp(0.0, (HIST_BINS - 1) as f64) as usize
}

/// Per-channel histogram equalization:
/// `(CDF(bin(x)) - CDF_min) / (1 - CDF_min)`, clamped to `[0, 1]`, where
/// `CDF_min` is the CDF at the lowest occupied bin.
///
/// A channel whose values all fall into one bin is returned unchanged.
pub fn hist_eq<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = x.to_vec();
    for chan in out.chunks_mut(plane) {
        let mut counts = [0usize; HIST_BINS];
        for &v in chan.iter() {
            counts[hist_bin(v)] += 1;
        }
        let occupied = counts.iter().filter(|&&c| c > 0).count();
        if occupied <= 1 {
            continue;
        }
        let mut cdf = [0.0f64; HIST_BINS];
        let mut acc = 0usize;
        for (i, &c) in counts.iter().enumerate() {
            acc += c;
            cdf[i] = acc as f64 / plane as f64;
        }
        let first = counts.iter().position(|&c| c > 0).unwrap_or(0);
        let cdf_min = cdf[first];
        for v in chan.iter_mut() {
            let e = (cdf[hist_bin(*v)] - cdf_min) / (1.0 - cdf_min);
            *v = T::of(e.clamp(0.0, 1.0));
        }
    }
    Tensor::new(x.shape(), out)
}

/// Applies the 2×2 squeeze `levels` times so a `(N, 3, H, W)` map takes the
/// flow's latent shape `(N, 3·4^levels, H/2^levels, W/2^levels)`.
pub fn squeeze_like_latent<T: Scalar>(map: &Tensor<T>, levels: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = map.dims4()?;
    let f = 1usize << levels;
    if h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} is not divisible by 2^{levels} = {f}"
        )));
    }
    let mut out = map.clone();
    for _ in 0..levels {
        out = tensor::squeeze2x2(&out)?;
    }
    Ok(out)
}

/// The 12-channel encoder input `[x, h(x), C(x), N(x)]`.
pub fn encoder_input<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected an RGB batch, got {c} channels")));
    }
    let he = hist_eq(x)?;
    let cm = color_map(x)?;
    let nm = noise_map(x)?;
    tensor::concat_channels(&[x, &he, &cm, &nm])
}
