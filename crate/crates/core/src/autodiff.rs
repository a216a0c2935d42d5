//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every op applied to its [`Var`] handles together with
//! a closure that maps the output gradient to parent gradients. Nodes are
//! appended in evaluation order, so walking the node list backwards is a
//! reverse topological order and each node is visited exactly once.
//!
//! Tapes are meant to live for one training step. A tape built with
//! [`Tape::no_grad`] evaluates the same ops without recording closures.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{self, Axis, ConvGeom, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Abs,
    MaxPair,
}

pub struct Tape<T: Scalar> {
    id: u64,
    record: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that evaluates ops but records no derivatives.
    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            record,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.len() {
            return Err(Error::Detached);
        }
        Ok(())
    }

    fn push_raw(&self, value: Tensor<T>, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    /// Records an op result. `make_backward` receives, for each parent,
    /// whether it needs a gradient; it is only called when some parent does.
    fn push<F>(&self, value: Tensor<T>, parents: &[Var], make_backward: F) -> Result<Var>
    where
        F: FnOnce(Vec<bool>) -> BackwardFn<T>,
    {
        for &p in parents {
            self.check(p)?;
        }
        let needs: Vec<bool> = {
            let nodes = self.nodes.borrow();
            parents.iter().map(|p| nodes[p.index].requires_grad).collect()
        };
        if self.record && needs.iter().any(|&n| n) {
            let back = make_backward(needs);
            Ok(self.push_raw(value, true, parents.iter().map(|p| p.index).collect(), Some(back)))
        } else {
            Ok(self.push_raw(value, false, Vec::new(), None))
        }
    }

    /// Input tensor. Gradients are tracked when `requires_grad` is set and
    /// the tape records.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(value, requires_grad && self.record, Vec::new(), None)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.check(v).expect("var from another tape");
        self.nodes.borrow()[v.index].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.index].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.index].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self, v: Var) -> Result<Var> {
        self.check(v)?;
        Ok(self.constant(self.value(v)))
    }

    // -- elementwise -------------------------------------------------------

    pub fn elementwise(&self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::invalid(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Div => self.div(a, need_b()?),
            ElementwiseOp::MaxPair => self.max_pair(a, need_b()?),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Sigmoid => self.sigmoid(a),
            ElementwiseOp::Tanh => self.tanh(a),
            ElementwiseOp::Abs => self.abs(a),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.add(&bv)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push(out, &[a, b], move |needs| {
            Box::new(move |g| {
                Ok(vec![
                    needs[0].then(|| tensor::reduce_to_shape(g, &sa)).transpose()?,
                    needs[1].then(|| tensor::reduce_to_shape(g, &sb)).transpose()?,
                ])
            })
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.sub(&bv)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push(out, &[a, b], move |needs| {
            Box::new(move |g| {
                Ok(vec![
                    needs[0].then(|| tensor::reduce_to_shape(g, &sa)).transpose()?,
                    needs[1]
                        .then(|| tensor::reduce_to_shape(&g.scale(-T::one()), &sb))
                        .transpose()?,
                ])
            })
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.mul(&bv)?;
        self.push(out, &[a, b], move |needs| {
            Box::new(move |g| {
                Ok(vec![
                    needs[0]
                        .then(|| tensor::reduce_to_shape(&g.mul(&bv)?, av.shape()))
                        .transpose()?,
                    needs[1]
                        .then(|| tensor::reduce_to_shape(&g.mul(&av)?, bv.shape()))
                        .transpose()?,
                ])
            })
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if let Some(index) = bv.data().iter().position(|v| *v == T::zero()) {
            return Err(Error::DivByZero { index });
        }
        let out = av.zip_with(&bv, |x, y| x / y)?;
        let outc = out.clone();
        self.push(out, &[a, b], move |needs| {
            Box::new(move |g| {
                let ga = if needs[0] {
                    Some(tensor::reduce_to_shape(&g.zip_with(&bv, |g, y| g / y)?, av.shape())?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.mul(&outc)?;
                    let t = t.zip_with(&bv, |v, y| -v / y)?;
                    Some(tensor::reduce_to_shape(&t, bv.shape())?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            })
        })
    }

    pub fn max_pair(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_with(&bv, |x, y| if x >= y { x } else { y })?;
        self.push(out, &[a, b], move |needs| {
            Box::new(move |g| {
                let mask_a = av.zip_with(&bv, |x, y| if x >= y { T::one() } else { T::zero() })?;
                let ga = if needs[0] {
                    Some(tensor::reduce_to_shape(&g.mul(&mask_a)?, av.shape())?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    let m = g.zip_with(&mask_a, |g, m| g * (T::one() - m))?;
                    Some(tensor::reduce_to_shape(&m, bv.shape())?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            })
        })
    }

    fn unary<F, D>(&self, x: Var, f: F, df: D) -> Result<Var>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let xv = self.value(x);
        let out = xv.map(f);
        let yv = out.clone();
        self.push(out, &[x], move |_| {
            Box::new(move |g| {
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                Ok(vec![Some(Tensor::new(xv.shape(), d)?)])
            })
        })
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(index) = xv.data().iter().position(|v| *v <= T::zero() || v.is_nan()) {
            return Err(Error::LogDomain {
                index,
                value: xv.data()[index].f64(),
            });
        }
        self.unary(x, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        self.unary(
            x,
            move |v| if v >= T::zero() { v } else { v * s },
            move |x, _| if x >= T::zero() { T::one() } else { s },
        )
    }

    // -- reductions --------------------------------------------------------

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum_all());
        let shape = xv.shape().to_vec();
        self.push(out, &[x], move |_| {
            Box::new(move |g| Ok(vec![Some(Tensor::full(&shape, g.item()))]))
        })
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axes(&self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let xv = self.value(x);
        let out = tensor::sum_axes(&xv, axes, keepdim)?;
        let in_shape = xv.shape().to_vec();
        let kept: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        self.push(out, &[x], move |_| {
            Box::new(move |g| {
                let g = g.reshape(&kept)?;
                Ok(vec![Some(Tensor::zeros(&in_shape).add(&g)?)])
            })
        })
    }

    /// Mean over the channel axis of an `(N, C, H, W)` tensor, keeping a
    /// single channel.
    pub fn channel_mean(&self, x: Var) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        let s = self.sum_axes(x, &[1], true)?;
        self.scale(s, 1.0 / c as f64)
    }

    // -- structure ---------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.reshape(shape)?;
        let orig = xv.shape().to_vec();
        self.push(out, &[x], move |_| Box::new(move |g| Ok(vec![Some(g.reshape(&orig)?)])))
    }

    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let bv = bias.map(|b| self.value(b));
        let geom = ConvGeom::new(xv.shape(), kv.shape(), stride, pad)?;
        let out = tensor::conv2d(&xv, &kv, bv.as_ref(), stride, pad)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        let bias_shape = bv.map(|b| b.shape().to_vec());
        self.push(out, &parents, move |needs| {
            Box::new(move |g| {
                let mut grads = vec![
                    needs[0].then(|| tensor::conv2d_grad_input(g, &kv, &geom)),
                    needs[1].then(|| tensor::conv2d_grad_kernel(g, &xv, &geom)),
                ];
                if let Some(shape) = &bias_shape {
                    grads.push(if needs[2] {
                        Some(tensor::channel_sums(g)?.reshape(shape)?)
                    } else {
                        None
                    });
                }
                Ok(grads)
            })
        })
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let out = tensor::concat_channels(&refs)?;
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        self.push(out, parts, move |needs| {
            Box::new(move |g| {
                let mut start = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    grads.push(if needs[i] {
                        Some(tensor::slice_channels(g, start, w)?)
                    } else {
                        None
                    });
                    start += w;
                }
                Ok(grads)
            })
        })
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = tensor::slice_channels(&xv, start, len)?;
        let (n, c, h, w) = xv.dims4()?;
        self.push(out, &[x], move |_| {
            Box::new(move |g| {
                let mut parts = Vec::with_capacity(3);
                let before = Tensor::zeros(&[n, start, h, w]);
                let after = Tensor::zeros(&[n, c - start - len, h, w]);
                if start > 0 {
                    parts.push(&before);
                }
                parts.push(g);
                if c - start - len > 0 {
                    parts.push(&after);
                }
                Ok(vec![Some(tensor::concat_channels(&parts)?)])
            })
        })
    }

    pub fn squeeze2x2(&self, x: Var) -> Result<Var> {
        let out = tensor::squeeze2x2(&self.value(x))?;
        self.push(out, &[x], |_| Box::new(|g| Ok(vec![Some(tensor::unsqueeze2x2(g)?)])))
    }

    pub fn unsqueeze2x2(&self, x: Var) -> Result<Var> {
        let out = tensor::unsqueeze2x2(&self.value(x))?;
        self.push(out, &[x], |_| Box::new(|g| Ok(vec![Some(tensor::squeeze2x2(g)?)])))
    }

    pub fn spatial_gradient(&self, x: Var, axis: Axis) -> Result<Var> {
        let out = tensor::spatial_gradient(&self.value(x), axis)?;
        self.push(out, &[x], move |_| {
            Box::new(move |g| Ok(vec![Some(tensor::spatial_gradient_adjoint(g, axis)?)]))
        })
    }

    // -- channel mixing ----------------------------------------------------

    /// `y[:, :, p] = W · x[:, :, p]` with a learnable `W (C, C)`.
    pub fn channel_mix(&self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let out = tensor::channel_mix(&xv, &wv)?;
        self.push(out, &[x, w], move |needs| {
            Box::new(move |g| {
                let (n, c, h, ww) = xv.dims4()?;
                let gx = if needs[0] {
                    let wt = transpose(&wv);
                    Some(tensor::channel_mix(g, &wt)?)
                } else {
                    None
                };
                let gw = if needs[1] {
                    let len = c * h * ww;
                    let mut acc = vec![T::zero(); c * c];
                    for b in 0..n {
                        tensor::gemm(
                            c,
                            h * ww,
                            c,
                            &g.data()[b * len..(b + 1) * len],
                            false,
                            &xv.data()[b * len..(b + 1) * len],
                            true,
                            &mut acc,
                            true,
                        );
                    }
                    Some(Tensor::new(&[c, c], acc)?)
                } else {
                    None
                };
                Ok(vec![gx, gw])
            })
        })
    }

    /// `log|det W|` of a square matrix, as a rank-0 tensor.
    pub fn log_abs_det(&self, w: Var) -> Result<Var> {
        let wv = self.value(w);
        let n = square_dim(&wv)?;
        let a = wv.to_f64_vec();
        let lad = linalg::log_abs_det_checked(&a, n)?;
        let out = Tensor::scalar(T::of(lad));
        self.push(out, &[w], move |_| {
            Box::new(move |g| {
                // d log|det W| / dW = W^{-T}
                let inv = linalg::inverse_checked(&a, n)?;
                let gs = g.item().f64();
                let data = (0..n * n)
                    .map(|k| T::of(gs * inv[(k % n) * n + k / n]))
                    .collect();
                Ok(vec![Some(Tensor::new(&[n, n], data)?)])
            })
        })
    }

    pub fn mat_inverse(&self, w: Var) -> Result<Var> {
        let wv = self.value(w);
        let n = square_dim(&wv)?;
        let inv = linalg::inverse_checked(&wv.to_f64_vec(), n)?;
        let out = Tensor::new(&[n, n], inv.iter().map(|&v| T::of(v)).collect())?;
        let vinv = out.clone();
        self.push(out, &[w], move |_| {
            Box::new(move |g| {
                // dW = -V^T G V^T
                let vt = transpose(&vinv);
                let mut tmp = vec![T::zero(); n * n];
                tensor::gemm(n, n, n, vt.data(), false, g.data(), false, &mut tmp, false);
                let mut res = vec![T::zero(); n * n];
                tensor::gemm(n, n, n, &tmp, false, vt.data(), false, &mut res, false);
                res.iter_mut().for_each(|v| *v = -*v);
                Ok(vec![Some(Tensor::new(&[n, n], res)?)])
            })
        })
    }

    // -- backward ----------------------------------------------------------

    /// Gradients of the one-element `loss` with respect to every recorded
    /// tensor. A loss that does not depend on any gradient-tracked leaf
    /// yields all-zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let root = &nodes[loss.index];
        if root.value.numel() != 1 {
            return Err(Error::NonScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.index] = Some(Tensor::ones(root.value.shape()));
        }
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[i].clone() else { continue };
            let parent_grads = back(&g)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    accumulate(&mut grads[p], pg);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.index >= self.shapes.len() {
            return Err(Error::Detached);
        }
        Ok(self
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.index])))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn square_dim<T: Scalar>(w: &Tensor<T>) -> Result<usize> {
    match *w.shape() {
        [a, b] if a == b => Ok(a),
        _ => Err(Error::shape(format!("expected a square matrix, got {:?}", w.shape()))),
    }
}

fn transpose<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let d = w.data();
    Tensor::from_fn(&[c, r], |k| d[(k % r) * c + k / r])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let z = tape.constant(t(&[1], &[0.0]));
        let e = tape.elementwise(ElementwiseOp::Exp, z, None).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0]);

        let p = tape.constant(t(&[2], &[1.0, 5.0]));
        let q = tape.constant(t(&[2], &[4.0, 2.0]));
        let m = tape.elementwise(ElementwiseOp::MaxPair, p, Some(q)).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 5.0]);
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let zero = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(a, zero), Err(Error::DivByZero { index: 1 })));
        let neg = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(neg), Err(Error::LogDomain { index: 1, .. })));
        assert!(matches!(tape.sum_axes(a, &[], false), Err(Error::EmptyAxes)));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_constant_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalar(_))));
        let other = Tape::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(y), Err(Error::Detached)));
    }

    #[test]
    fn channel_mean_of_pixel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3, 1, 1], &[0.2, 0.4, 0.6]));
        let m = tape.channel_mean(x).unwrap();
        assert_eq!(tape.shape(m), vec![1, 1, 1, 1]);
        assert!((tape.value(m).item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn mean_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 5], &vals));
        let m = tape.mean(x).unwrap();
        let mut acc = 0.0;
        for v in &vals {
            acc += v;
        }
        assert!((tape.value(m).item() - acc / 15.0).abs() < 1e-14);
        let rows = tape.sum_axes(x, &[1], false).unwrap();
        for r in 0..3 {
            let expect: f64 = vals[r * 5..r * 5 + 5].iter().sum();
            assert!((tape.value(rows).data()[r] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        assert!(!tape.requires_grad(y));
    }
}
