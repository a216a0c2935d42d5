//! Dense n-dimensional arrays and the eager kernels the tape builds on.
//!
//! Images use the `(batch, channel, height, width)` layout. Tensors are
//! immutable once built: the element buffer sits behind an `Arc`, so clones
//! are cheap and any mutation goes through copy-on-write.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type tag used by the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U64 = 2,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
        }
    }
}

/// Floating-point element type. Training runs in `f32`; gradient and
/// Jacobian oracles run the same code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// Strides and extents must stay inside the given buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal fits the scalar type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major matrix product `c (m×n) = op(a) · op(b) [+ c]`.
///
/// `a` is `m×k` row-major, or `k×m` when `a_t` is set; likewise `b` is
/// `k×n` or `n×k` with `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above; strides describe dense row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.data.len();
        if n <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{:?}, {:?}, .. {} elements]", self.shape, self.data[0], self.data[1], n)
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| a.as_ref().clone())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.f64())).collect(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// `(batch, channel, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a (batch, channel, height, width) tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let (_, ch, h, w) = self.dims4().expect("rank-4 tensor");
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().f64())
            .fold(0.0, f64::max)
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        broadcast_binary(self, other, f)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Batch entry `b` of a rank-4 tensor as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if b >= n {
            return Err(Error::shape(format!("batch index {b} out of range {n}")));
        }
        let len = c * h * w;
        Ok(Self::from_parts(
            vec![1, c, h, w],
            self.data[b * len..(b + 1) * len].to_vec(),
        ))
    }

    /// Stacks `(1, C, H, W)` (or `(n, C, H, W)`) tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let (bn, bc, bh, bw) = t.dims4()?;
            if (bc, bh, bw) != (c, h, w) {
                return Err(Error::shape(format!(
                    "stack: {:?} does not match {:?}",
                    t.shape, first.shape
                )));
            }
            n += bn;
            data.extend_from_slice(t.data());
        }
        Ok(Self::from_parts(vec![n, c, h, w], data))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of every batch and channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (n, c, hh, ww) = self.dims4()?;
        if y0 + h > hh || x0 + w > ww {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {hh}x{ww}"
            )));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(hh * ww) {
            for y in y0..y0 + h {
                out.extend_from_slice(&plane[y * ww + x0..y * ww + x0 + w]);
            }
        }
        Ok(Self::from_parts(vec![n, c, h, w], out))
    }

    /// Reflect-pads the bottom and right edges (mirror without repeating the
    /// border sample).
    pub fn reflect_pad(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if (pad_h > 0 && pad_h >= h) || (pad_w > 0 && pad_w >= w) {
            return Err(Error::shape(format!(
                "reflect pad ({pad_h},{pad_w}) too large for {h}x{w}"
            )));
        }
        let (oh, ow) = (h + pad_h, w + pad_w);
        let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in self.data.chunks(h * w) {
            for y in 0..oh {
                let sy = reflect(y, h);
                for x in 0..ow {
                    out.push(plane[sy * w + reflect(x, w)]);
                }
            }
        }
        Ok(Self::from_parts(vec![n, c, oh, ow], out))
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

fn pad4(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() > 4 {
        return Err(Error::shape(format!(
            "broadcasting supports rank <= 4, got {shape:?}"
        )));
    }
    let mut out = [1usize; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Ok(out)
}

fn strides4(shape: &[usize; 4], out: &[usize; 4]) -> [usize; 4] {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Output shape of broadcasting `a` against `b`.
///
/// Either operand may be a one-element tensor; otherwise ranks must agree
/// and every axis must match or be 1 on one side.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 && a.len() >= b.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && b.len() >= a.len() {
        return Ok(b.to_vec());
    }
    if a.len() != b.len() {
        return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    if a.shape == b.shape {
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    if b.numel() == 1 {
        let y = b.data[0];
        return Ok(Tensor::from_parts(out_shape, a.data.iter().map(|&x| f(x, y)).collect()));
    }
    if a.numel() == 1 {
        let x = a.data[0];
        return Ok(Tensor::from_parts(out_shape, b.data.iter().map(|&y| f(x, y)).collect()));
    }
    let o = pad4(&out_shape)?;
    let sa = strides4(&pad4(&a.shape)?, &o);
    let sb = strides4(&pad4(&b.shape)?, &o);
    let mut data = Vec::with_capacity(o.iter().product());
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o[3] {
                    data.push(f(a.data[ba + i3 * sa[3]], b.data[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums `grad` (shaped like a broadcast result) back down to `target`.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if grad.shape == target {
        return Ok(grad.clone());
    }
    let nt: usize = target.iter().product();
    if nt == 1 {
        return Ok(Tensor::from_parts(target.to_vec(), vec![grad.sum_all()]));
    }
    let o = pad4(&grad.shape)?;
    let st = strides4(&pad4(target)?, &o);
    let mut data = vec![T::zero(); nt];
    let mut k = 0;
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..o[3] {
                    data[base + i3 * st[3]] += grad.data[k];
                    k += 1;
                }
            }
        }
    }
    Ok(Tensor::from_parts(target.to_vec(), data))
}

// ---------------------------------------------------------------------------
// Reductions

/// Sums over `axes`. With `keepdim` the reduced axes stay as extent 1.
pub fn sum_axes<T: Scalar>(x: &Tensor<T>, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
    if axes.is_empty() {
        return Err(Error::EmptyAxes);
    }
    let rank = x.shape.len();
    let mut reduce = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::shape(format!("axis {a} out of range for {:?}", x.shape)));
        }
        reduce[a] = true;
    }
    let kept: Vec<usize> = x
        .shape
        .iter()
        .zip(&reduce)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let summed = reduce_to_shape(x, &kept)?;
    if keepdim {
        Ok(summed)
    } else {
        let squeezed: Vec<usize> = x
            .shape
            .iter()
            .zip(&reduce)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        summed.reshape(&squeezed)
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape(format!("conv2d input must be rank 4, got {input:?}"))),
        };
        let (cout, kc, kh, kw) = match *kernel {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape(format!("conv2d kernel must be rank 4, got {kernel:?}"))),
        };
        if kc != cin {
            return Err(Error::shape(format!(
                "conv2d kernel expects {kc} input channels, input has {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let span_h = h as isize + 2 * pad as isize - kh as isize;
        let span_w = w as isize + 2 * pad as isize - kw as isize;
        if span_h < 0 || span_w < 0 {
            return Err(Error::shape(format!(
                "conv2d output extent negative: input {h}x{w}, kernel {kh}x{kw}, padding {pad}"
            )));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: span_h as usize / stride + 1,
            wo: span_w as usize / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let src = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let dst = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x (N, Cin, H, W)` with `kernel (Cout, Cin, kH, kW)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(&x.shape, &kernel.shape, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::shape(format!(
                "conv2d bias has {} elements, expected {}",
                b.numel(),
                g.cout
            )));
        }
    }
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_plane();
    let mut out = vec![T::zero(); g.n * out_len];
    out.par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each(|(b, dst)| {
            let img = &x.data[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(g.cout, g.cin, g.out_plane(), kernel.data(), false, img, false, dst, false);
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                g.im2col(img, &mut cols);
                gemm(g.cout, g.patch_len(), g.out_plane(), kernel.data(), false, &cols, false, dst, false);
            }
            if let Some(bias) = bias {
                for (co, chunk) in dst.chunks_mut(g.out_plane()).enumerate() {
                    let bv = bias.data[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

/// Gradient of `conv2d` with respect to its input.
pub(crate) fn conv2d_grad_input<T: Scalar>(
    grad: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_plane();
    let mut gx = vec![T::zero(); g.n * in_len];
    gx.par_chunks_mut(in_len.max(1))
        .enumerate()
        .for_each(|(b, dst)| {
            let gy = &grad.data[b * out_len..(b + 1) * out_len];
            if g.is_pointwise() {
                gemm(g.cin, g.cout, g.out_plane(), kernel.data(), true, gy, false, dst, false);
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                gemm(g.patch_len(), g.cout, g.out_plane(), kernel.data(), true, gy, false, &mut cols, false);
                g.col2im(&cols, dst);
            }
        });
    Tensor::from_parts(vec![g.n, g.cin, g.h, g.w], gx)
}

/// Gradient of `conv2d` with respect to its kernel. Per-sample partial
/// sums are reduced in batch order so the result is thread-count independent.
pub(crate) fn conv2d_grad_kernel<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_plane();
    let klen = g.cout * g.patch_len();
    let partials: Vec<Vec<T>> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let img = &x.data[b * in_len..(b + 1) * in_len];
            let gy = &grad.data[b * out_len..(b + 1) * out_len];
            let mut gk = vec![T::zero(); klen];
            if g.is_pointwise() {
                gemm(g.cout, g.out_plane(), g.cin, gy, false, img, true, &mut gk, false);
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                g.im2col(img, &mut cols);
                gemm(g.cout, g.out_plane(), g.patch_len(), gy, false, &cols, true, &mut gk, false);
            }
            gk
        })
        .collect();
    let mut total = vec![T::zero(); klen];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += *v;
        }
    }
    Tensor::from_parts(vec![g.cout, g.cin, g.kh, g.kw], total)
}

/// Per-channel sum of a conv output gradient, i.e. the bias gradient.
pub(crate) fn channel_sums<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad.dims4()?;
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * h * w;
            *acc += grad.data[start..start + h * w].iter().copied().sum::<T>();
        }
    }
    Ok(Tensor::from_parts(vec![c], out))
}

// ---------------------------------------------------------------------------
// Layout ops

/// 2×2 space-to-channel rearrangement. Output channel `4c + 2dy + dx` holds
/// the `(dy, dx)` corner of every 2×2 block of input channel `c`.
pub fn squeeze2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("squeeze needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ch * 4 + dy * 2 + dx;
                    let dst = &mut out[(b * 4 * c + oc) * oh * ow..(b * 4 * c + oc + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[y * ow + xx] = src[(2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, 4 * c, oh, ow], out))
}

/// Exact inverse of [`squeeze2x2`].
pub fn unsqueeze2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, oh, ow) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::shape(format!("unsqueeze needs channels divisible by 4, got {c4}")));
    }
    let c = c4 / 4;
    let (h, w) = (oh * 2, ow * 2);
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ch * 4 + dy * 2 + dx;
                    let src = &x.data[(b * c4 + oc) * oh * ow..(b * c4 + oc + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(2 * y + dy) * w + 2 * xx + dx] = src[y * ow + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat: {:?} incompatible with {:?}",
                p.shape, first.shape
            )));
        }
        total_c += pc;
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for b in 0..n {
        for p in parts {
            let len = p.shape[1] * h * w;
            out.extend_from_slice(&p.data[b * len..(b + 1) * len]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total_c, h, w], out))
}

/// Channels `[start, start + len)` of a rank-4 tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if start + len > c {
        return Err(Error::shape(format!(
            "channel slice [{start}, {}) out of range {c}",
            start + len
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let base = (b * c + start) * plane;
        out.extend_from_slice(&x.data[base..base + len * plane]);
    }
    Ok(Tensor::from_parts(vec![n, len, h, w], out))
}

/// Per-pixel channel mixing `y[:, :, p] = W · x[:, :, p]` for `W (C, C)`.
pub fn channel_mix<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, ww) = x.dims4()?;
    if w.shape != [c, c] {
        return Err(Error::shape(format!(
            "channel mix matrix {:?} does not match {c} channels",
            w.shape
        )));
    }
    let len = c * h * ww;
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        gemm(c, c, h * ww, w.data(), false, &x.data[b * len..(b + 1) * len], false, &mut out[b * len..(b + 1) * len], false);
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Forward difference along `axis`; the last row/column is zero so the
/// output keeps the input shape.
pub fn spatial_gradient<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let extent = match axis {
        Axis::X => w,
        Axis::Y => h,
    };
    if extent < 2 {
        return Err(Error::shape(format!(
            "spatial gradient along {axis:?} needs extent >= 2, got {extent}"
        )));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in x.data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        match axis {
            Axis::X => {
                for y in 0..h {
                    for xx in 0..w - 1 {
                        dst[y * w + xx] = src[y * w + xx + 1] - src[y * w + xx];
                    }
                }
            }
            Axis::Y => {
                for y in 0..h - 1 {
                    for xx in 0..w {
                        dst[y * w + xx] = src[(y + 1) * w + xx] - src[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Adjoint of [`spatial_gradient`].
pub(crate) fn spatial_gradient_adjoint<T: Scalar>(g: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let (_, _, h, w) = g.dims4()?;
    let mut out = vec![T::zero(); g.numel()];
    for (src, dst) in g.data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        match axis {
            Axis::X => {
                for y in 0..h {
                    for xx in 0..w - 1 {
                        let v = src[y * w + xx];
                        dst[y * w + xx + 1] += v;
                        dst[y * w + xx] -= v;
                    }
                }
            }
            Axis::Y => {
                for y in 0..h - 1 {
                    for xx in 0..w {
                        let v = src[y * w + xx];
                        dst[(y + 1) * w + xx] += v;
                        dst[y * w + xx] -= v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.shape.clone(), out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}
