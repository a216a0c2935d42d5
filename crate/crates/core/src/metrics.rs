//! Full-reference image quality: PSNR on RGB, SSIM on Rec.601 luminance.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Value written to CSV files in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over every element; identical inputs give `+∞`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// [`psnr`] with infinity replaced by [`PSNR_CAP_DB`].
pub fn psnr_capped<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr(a, b)?.min(PSNR_CAP_DB))
}

/// Rec.601 luminance planes `(N, H·W)` of an RGB batch.
pub fn luminance<T: Scalar>(x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("luminance needs 3 channels, got {c}")));
    }
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            let d = &x.data()[b * 3 * plane..(b + 1) * 3 * plane];
            (0..plane)
                .map(|i| 0.299 * d[i].f64() + 0.587 * d[plane + i].f64() + 0.114 * d[2 * plane + i].f64())
                .collect()
        })
        .collect())
}

/// Normalized separable Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid window positions of the luminance planes,
/// averaged over the batch.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (n, _, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (la, lb) = (luminance(a)?, luminance(b)?);
    let mut total = 0.0;
    for (x, y) in la.iter().zip(&lb) {
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let sxx = filter_valid(&prod(x, x), h, w, &taps);
        let syy = filter_valid(&prod(y, y), h, w, &taps);
        let sxy = filter_valid(&prod(x, y), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / n as f64)
}
