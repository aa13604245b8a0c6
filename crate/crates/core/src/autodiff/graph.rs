//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records executed operations in order; [`Graph::backward`]
//! walks them in exact reverse order, accumulating (never overwriting)
//! gradients, and returns the gradient of every keyed parameter leaf.
//! Constant leaves created with [`Graph::input`] are never differentiated.
//!
//! Shape discipline: rank 0 scalars, rank 1 vectors, rank 2 row-major
//! matrices. No implicit broadcasting except scalar-with-tensor
//! ([`Graph::scalar_mul`]); everything else requires exact shapes.

use super::tensor::{AutodiffError, Scalar, Tensor};
use crate::dsp;
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Handle to a node in one graph. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Key tying a parameter leaf to its slot in an external parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamKey(pub usize);

/// Gradients keyed by parameter, in key order.
pub type GradMap<F> = BTreeMap<ParamKey, Vec<F>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScalarMul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Linear { x: Var, w: Var, b: Var },
    Concat { axis: usize, parts: Vec<Var> },
    Slice { x: Var, axis: usize, start: usize, end: usize },
    RepeatRows { x: Var, n: usize },
    Reshape(Var),
    MeanAxis { x: Var, axis: usize },
    MeanAll(Var),
    SumAll(Var),
    StdAxis { x: Var, axis: usize },
    Abs(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softplus(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, scale: Var, shift: Var },
    DiffRows(Var),
    MovingAvgRows { x: Var, window: usize },
    HilbertImag(Var),
    Atan2 { y: Var, x: Var },
    WrapAngle(Var),
}

struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    needs_grad: bool,
    param: Option<ParamKey>,
    op: Op,
}

/// Topologically ordered record of executed operations.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    done: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            done: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            value,
            shape,
            needs_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; gradients never flow into it.
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Trainable leaf keyed into the returned gradient map.
    pub fn param(&mut self, t: &Tensor<F>, key: ParamKey) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(key);
        v
    }

    pub fn constant_scalar(&mut self, value: F) -> Var {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node is consistent")
    }

    /// Scalar value of a rank-0 (or single-element) node.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(AutodiffError::BadRank {
                op,
                shape: self.shape(v).to_vec(),
                msg: "expected a matrix",
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn ewise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(op_name, a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, op, needs))
    }

    fn unary(
        &mut self,
        x: Var,
        op: Op,
        f: impl Fn(F) -> F,
    ) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.ewise("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.ewise("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.ewise("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = F::from_f64(c);
        self.unary(x, Op::Scale(x, c), |v| v * k)
    }

    /// Multiply a tensor by a scalar node (the one permitted broadcast).
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(AutodiffError::BadRank {
                op: "scalar_mul",
                shape: self.shape(s).to_vec(),
                msg: "scalar operand must have one element",
            });
        }
        let sv = self.nodes[s.0].value[0];
        let value = self.nodes[x.0].value.iter().map(|&v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.shape(x).to_vec(), value, Op::ScalarMul(x, s), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let value = mm_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.rank2("transpose", x)?;
        let value = transpose_raw(&self.nodes[x.0].value, r, c);
        let needs = self.needs(x);
        Ok(self.push(vec![c, r], value, Op::Transpose(x), needs))
    }

    /// `x·w` plus a bias row added to every output row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, kx) = self.rank2("linear", x)?;
        let (kw, n) = self.rank2("linear", w)?;
        if kx != kw {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                lhs: vec![m, kx],
                rhs: vec![kw, n],
            });
        }
        if self.shape(b) != [n] {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                lhs: vec![n],
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut value = mm_nn(&self.nodes[x.0].value, &self.nodes[w.0].value, m, kx, n);
        for row in value.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&self.nodes[b.0].value) {
                *o = *o + bv;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![m, n], value, Op::Linear { x, w, b }, needs))
    }

    /// Concatenate along `axis`. Vectors concatenate on axis 0; matrices on
    /// axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Invalid {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank.max(1) || rank == 0 || rank > 2 {
            return Err(AutodiffError::BadRank {
                op: "concat",
                shape: self.shape(parts[0]).to_vec(),
                msg: "axis out of range for rank",
            });
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let (shape, value) = if rank == 1 {
            let total: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
            let mut value = Vec::with_capacity(total);
            for &p in parts {
                value.extend_from_slice(&self.nodes[p.0].value);
            }
            (vec![total], value)
        } else if axis == 0 {
            let cols = self.rank2("concat", parts[0])?.1;
            let mut rows = 0;
            for &p in parts {
                let (r, c) = self.rank2("concat", p)?;
                if c != cols {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        lhs: self.shape(parts[0]).to_vec(),
                        rhs: self.shape(p).to_vec(),
                    });
                }
                rows += r;
            }
            let mut value = Vec::with_capacity(rows * cols);
            for &p in parts {
                value.extend_from_slice(&self.nodes[p.0].value);
            }
            (vec![rows, cols], value)
        } else {
            let rows = self.rank2("concat", parts[0])?.0;
            let mut cols = 0;
            for &p in parts {
                let (r, c) = self.rank2("concat", p)?;
                if r != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        lhs: self.shape(parts[0]).to_vec(),
                        rhs: self.shape(p).to_vec(),
                    });
                }
                cols += c;
            }
            let mut value = vec![F::zero(); rows * cols];
            let mut at = 0;
            for &p in parts {
                let (_, c) = self.rank2("concat", p)?;
                for i in 0..rows {
                    value[i * cols + at..i * cols + at + c]
                        .copy_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
                }
                at += c;
            }
            (vec![rows, cols], value)
        };
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Half-open `[start, end)` slice along `axis` of a vector or matrix.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.get(axis).ok_or(AutodiffError::BadRank {
            op: "slice",
            shape: shape.clone(),
            msg: "axis out of range",
        })?;
        if start >= end || end > dim {
            return Err(AutodiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} invalid for dim {dim}"),
            });
        }
        let needs = self.needs(x);
        let (out_shape, value) = match shape.as_slice() {
            [_] => (
                vec![end - start],
                self.nodes[x.0].value[start..end].to_vec(),
            ),
            [_, c] if axis == 0 => (
                vec![end - start, *c],
                self.nodes[x.0].value[start * c..end * c].to_vec(),
            ),
            [r, c] => {
                let mut value = Vec::with_capacity(r * (end - start));
                for i in 0..*r {
                    value.extend_from_slice(&self.nodes[x.0].value[i * c + start..i * c + end]);
                }
                (vec![*r, end - start], value)
            }
            _ => {
                return Err(AutodiffError::BadRank {
                    op: "slice",
                    shape,
                    msg: "expected vector or matrix",
                })
            }
        };
        Ok(self.push(out_shape, value, Op::Slice { x, axis, start, end }, needs))
    }

    /// Broadcast a vector to `n` identical rows.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let [d] = shape.as_slice() else {
            return Err(AutodiffError::BadRank {
                op: "repeat_rows",
                shape,
                msg: "expected a vector",
            });
        };
        let mut value = Vec::with_capacity(n * d);
        for _ in 0..n {
            value.extend_from_slice(&self.nodes[x.0].value);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, *d], value, Op::RepeatRows { x, n }, needs))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(AutodiffError::BadShape {
                shape,
                len: self.nodes[x.0].value.len(),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, value, Op::Reshape(x), needs))
    }

    /// Mean over `axis` of a matrix: axis 0 averages rows out, axis 1
    /// averages columns out.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.rank2("mean_axis", x)?;
        let v = &self.nodes[x.0].value;
        let needs = self.needs(x);
        let (shape, value) = match axis {
            0 => {
                let mut out = vec![F::zero(); c];
                for row in v.chunks_exact(c) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o = *o + x;
                    }
                }
                let inv = F::from_f64(1.0 / r as f64);
                out.iter_mut().for_each(|o| *o = *o * inv);
                (vec![c], out)
            }
            1 => {
                let inv = F::from_f64(1.0 / c as f64);
                let out = v
                    .chunks_exact(c)
                    .map(|row| row.iter().copied().sum::<F>() * inv)
                    .collect();
                (vec![r], out)
            }
            _ => {
                return Err(AutodiffError::Invalid {
                    op: "mean_axis",
                    msg: format!("axis {axis} out of range"),
                })
            }
        };
        Ok(self.push(shape, value, Op::MeanAxis { x, axis }, needs))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let mean = v.iter().copied().sum::<F>() * F::from_f64(1.0 / v.len() as f64);
        let needs = self.needs(x);
        self.push(vec![], vec![mean], Op::MeanAll(x), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum = self.nodes[x.0].value.iter().copied().sum::<F>();
        let needs = self.needs(x);
        self.push(vec![], vec![sum], Op::SumAll(x), needs)
    }

    /// Population standard deviation over `axis` of a matrix.
    /// Subgradient 0 where the deviation is 0.
    pub fn std_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.rank2("std_axis", x)?;
        if axis > 1 {
            return Err(AutodiffError::Invalid {
                op: "std_axis",
                msg: format!("axis {axis} out of range"),
            });
        }
        let v = &self.nodes[x.0].value;
        let (groups, len, stride, step) = if axis == 0 {
            (c, r, 1usize, c)
        } else {
            (r, c, c, 1usize)
        };
        let mut out = Vec::with_capacity(groups);
        for gidx in 0..groups {
            let base = gidx * stride;
            let mut mean = F::zero();
            for i in 0..len {
                mean = mean + v[base + i * step];
            }
            mean = mean * F::from_f64(1.0 / len as f64);
            let mut var = F::zero();
            for i in 0..len {
                let d = v[base + i * step] - mean;
                var = var + d * d;
            }
            out.push((var * F::from_f64(1.0 / len as f64)).sqrt());
        }
        let needs = self.needs(x);
        let shape = vec![groups];
        Ok(self.push(shape, out, Op::StdAxis { x, axis }, needs))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_stable)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu_value(v.as_f64()))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |v| softplus_stable(v.as_f64()))
    }

    /// Softmax along `axis` of a matrix (max-subtracted for stability).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.rank2("softmax", x)?;
        if axis > 1 {
            return Err(AutodiffError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range"),
            });
        }
        let v = &self.nodes[x.0].value;
        let mut value = vec![F::zero(); r * c];
        let (groups, len, stride, step) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for gidx in 0..groups {
            let base = gidx * stride;
            let mut max = F::neg_infinity();
            for i in 0..len {
                max = max.max(v[base + i * step]);
            }
            let mut denom = F::zero();
            for i in 0..len {
                let e = (v[base + i * step] - max).exp();
                value[base + i * step] = e;
                denom = denom + e;
            }
            let inv = F::one() / denom;
            for i in 0..len {
                value[base + i * step] = value[base + i * step] * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, c], value, Op::Softmax { x, axis }, needs))
    }

    /// Normalize each row to zero mean / unit variance (ε = 1e-5), then
    /// apply a per-feature scale and shift.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.rank2("layer_norm", x)?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![c],
                rhs: self.shape(scale).to_vec(),
            });
        }
        let mut value = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let (norm, _, _) = normalize_row(row);
            for j in 0..c {
                value[i * c + j] =
                    norm[j] * self.nodes[scale.0].value[j] + self.nodes[shift.0].value[j];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(vec![r, c], value, Op::LayerNorm { x, scale, shift }, needs))
    }

    /// Row-wise temporal difference; row 0 of the output is zero.
    pub fn diff_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.rank2("diff_rows", x)?;
        let v = &self.nodes[x.0].value;
        let mut value = vec![F::zero(); r * c];
        for i in 1..r {
            for j in 0..c {
                value[i * c + j] = v[i * c + j] - v[(i - 1) * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, c], value, Op::DiffRows(x), needs))
    }

    /// Centered moving average down the rows with edge replication.
    pub fn moving_avg_rows(&mut self, x: Var, window: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.rank2("moving_avg_rows", x)?;
        if window == 0 {
            return Err(AutodiffError::Invalid {
                op: "moving_avg_rows",
                msg: "window must be >= 1".into(),
            });
        }
        let v = &self.nodes[x.0].value;
        let (lo, hi) = window_span(window);
        let inv = F::from_f64(1.0 / window as f64);
        let mut value = vec![F::zero(); r * c];
        for i in 0..r as isize {
            for off in lo..=hi {
                let src = (i + off).clamp(0, r as isize - 1) as usize;
                for j in 0..c {
                    value[i as usize * c + j] = value[i as usize * c + j] + v[src * c + j];
                }
            }
        }
        value.iter_mut().for_each(|o| *o = *o * inv);
        let needs = self.needs(x);
        Ok(self.push(vec![r, c], value, Op::MovingAvgRows { x, window }, needs))
    }

    /// Hilbert transform (imaginary part of the analytic signal) applied
    /// down each column. The adjoint of this linear map is its negation.
    pub fn hilbert_imag(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.rank2("hilbert_imag", x)?;
        if r < 2 {
            return Err(AutodiffError::Invalid {
                op: "hilbert_imag",
                msg: format!("need at least 2 rows, got {r}"),
            });
        }
        let value = hilbert_columns(&self.nodes[x.0].value, r, c, false);
        let needs = self.needs(x);
        Ok(self.push(vec![r, c], value, Op::HilbertImag(x), needs))
    }

    /// Elementwise four-quadrant angle of `(x, y)` pairs; 0 at the origin.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var, AutodiffError> {
        self.same_shape("atan2", y, x)?;
        let value = self.nodes[y.0]
            .value
            .iter()
            .zip(&self.nodes[x.0].value)
            .map(|(&yv, &xv)| {
                if yv == F::zero() && xv == F::zero() {
                    F::zero()
                } else {
                    yv.atan2(xv)
                }
            })
            .collect();
        let needs = self.needs(y) || self.needs(x);
        Ok(self.push(self.shape(y).to_vec(), value, Op::Atan2 { y, x }, needs))
    }

    /// Wrap angles into `(-π, π]`; derivative 1 almost everywhere.
    pub fn wrap_angle(&mut self, x: Var) -> Var {
        self.unary(x, Op::WrapAngle(x), |v| {
            F::from_f64(dsp::wrap_angle(v.as_f64()))
        })
    }

    /// Reverse sweep from a scalar loss. Populates a gradient for every
    /// parameter leaf reachable from `loss`. Errors on a second call.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<F>, AutodiffError> {
        if self.done {
            return Err(AutodiffError::BackwardTwice);
        }
        self.done = true;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(
                self.nodes[loss.0].shape.clone(),
            ));
        }

        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = GradMap::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Some(key) = self.nodes[id].param {
                let entry = out.entry(key).or_insert_with(|| vec![F::zero(); g.len()]);
                for (a, b) in entry.iter_mut().zip(&g) {
                    *a = *a + *b;
                }
            }
            let op = self.nodes[id].op.clone();
            self.propagate(id, &op, &g, &mut grads);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contrib: impl FnOnce(&mut [F])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        contrib(slot);
    }

    fn propagate(&self, id: usize, op: &Op, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| axpy(ga, g, F::one()));
                self.accumulate(grads, b, |gb| axpy(gb, g, F::one()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| axpy(ga, g, F::one()));
                self.accumulate(grads, b, |gb| axpy(gb, g, -F::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(grads, a, |ga| {
                    for ((o, &gv), &bvv) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gv * bvv;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for ((o, &gv), &avv) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gv * avv;
                    }
                });
            }
            Op::Scale(x, c) => {
                let k = F::from_f64(c);
                self.accumulate(grads, x, |gx| axpy(gx, g, k));
            }
            Op::ScalarMul(x, s) => {
                let sv = self.nodes[s.0].value[0];
                let xv = &self.nodes[x.0].value;
                self.accumulate(grads, x, |gx| axpy(gx, g, sv));
                self.accumulate(grads, s, |gs| {
                    let dot = g.iter().zip(xv).map(|(&gv, &xvv)| gv * xvv).sum::<F>();
                    gs[0] = gs[0] + dot;
                });
            }
            Op::MatMul(a, b) => {
                let [m, k] = self.nodes[a.0].shape[..] else { unreachable!() };
                let [_, n] = self.nodes[b.0].shape[..] else { unreachable!() };
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(grads, a, |ga| {
                    let d = mm_nt(g, bv, m, n, k);
                    axpy(ga, &d, F::one());
                });
                self.accumulate(grads, b, |gb| {
                    let d = mm_tn(av, g, m, k, n);
                    axpy(gb, &d, F::one());
                });
            }
            Op::Transpose(x) => {
                let [c, r] = self.nodes[id].shape[..] else { unreachable!() };
                self.accumulate(grads, x, |gx| {
                    let d = transpose_raw(g, c, r);
                    axpy(gx, &d, F::one());
                });
            }
            Op::Linear { x, w, b } => {
                let [m, k] = self.nodes[x.0].shape[..] else { unreachable!() };
                let [_, n] = self.nodes[w.0].shape[..] else { unreachable!() };
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                self.accumulate(grads, x, |gx| {
                    let d = mm_nt(g, wv, m, n, k);
                    axpy(gx, &d, F::one());
                });
                self.accumulate(grads, w, |gw| {
                    let d = mm_tn(xv, g, m, k, n);
                    axpy(gw, &d, F::one());
                });
                self.accumulate(grads, b, |gb| {
                    for row in g.chunks_exact(n) {
                        for (o, &gv) in gb.iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Op::Concat { axis, ref parts } => {
                let rank = self.nodes[parts[0].0].shape.len();
                if rank == 1 || axis == 0 {
                    let mut at = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        self.accumulate(grads, p, |gp| axpy(gp, &g[at..at + len], F::one()));
                        at += len;
                    }
                } else {
                    let rows = self.nodes[parts[0].0].shape[0];
                    let total_cols: usize = self.nodes[id].shape[1];
                    let mut at = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].shape[1];
                        self.accumulate(grads, p, |gp| {
                            for i in 0..rows {
                                for j in 0..c {
                                    gp[i * c + j] = gp[i * c + j] + g[i * total_cols + at + j];
                                }
                            }
                        });
                        at += c;
                    }
                }
            }
            Op::Slice { x, axis, start, end } => {
                let shape = &self.nodes[x.0].shape;
                match shape[..] {
                    [_] => self.accumulate(grads, x, |gx| {
                        axpy(&mut gx[start..end], g, F::one());
                    }),
                    [_, c] if axis == 0 => self.accumulate(grads, x, |gx| {
                        axpy(&mut gx[start * c..end * c], g, F::one());
                    }),
                    [r, c] => self.accumulate(grads, x, |gx| {
                        let w = end - start;
                        for i in 0..r {
                            for j in 0..w {
                                gx[i * c + start + j] = gx[i * c + start + j] + g[i * w + j];
                            }
                        }
                    }),
                    _ => unreachable!(),
                }
            }
            Op::RepeatRows { x, n } => {
                let d = self.nodes[x.0].value.len();
                self.accumulate(grads, x, |gx| {
                    for i in 0..n {
                        for j in 0..d {
                            gx[j] = gx[j] + g[i * d + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, x, |gx| axpy(gx, g, F::one()));
            }
            Op::MeanAxis { x, axis } => {
                let [r, c] = self.nodes[x.0].shape[..] else { unreachable!() };
                if axis == 0 {
                    let inv = F::from_f64(1.0 / r as f64);
                    self.accumulate(grads, x, |gx| {
                        for row in gx.chunks_exact_mut(c) {
                            for (o, &gv) in row.iter_mut().zip(g) {
                                *o = *o + gv * inv;
                            }
                        }
                    });
                } else {
                    let inv = F::from_f64(1.0 / c as f64);
                    self.accumulate(grads, x, |gx| {
                        for (i, row) in gx.chunks_exact_mut(c).enumerate() {
                            for o in row.iter_mut() {
                                *o = *o + g[i] * inv;
                            }
                        }
                    });
                }
            }
            Op::MeanAll(x) => {
                let inv = F::from_f64(1.0 / self.nodes[x.0].value.len() as f64);
                self.accumulate(grads, x, |gx| {
                    let gv = g[0] * inv;
                    gx.iter_mut().for_each(|o| *o = *o + gv);
                });
            }
            Op::SumAll(x) => {
                self.accumulate(grads, x, |gx| {
                    gx.iter_mut().for_each(|o| *o = *o + g[0]);
                });
            }
            Op::StdAxis { x, axis } => {
                let [r, c] = self.nodes[x.0].shape[..] else { unreachable!() };
                let v = &self.nodes[x.0].value;
                let sigma = &self.nodes[id].value;
                let (groups, len, stride, step) = if axis == 0 {
                    (c, r, 1usize, c)
                } else {
                    (r, c, c, 1usize)
                };
                self.accumulate(grads, x, |gx| {
                    for gidx in 0..groups {
                        if sigma[gidx] <= F::zero() {
                            continue; // subgradient 0 at zero deviation
                        }
                        let base = gidx * stride;
                        let mut mean = F::zero();
                        for i in 0..len {
                            mean = mean + v[base + i * step];
                        }
                        mean = mean * F::from_f64(1.0 / len as f64);
                        let coef = g[gidx] / (F::from_f64(len as f64) * sigma[gidx]);
                        for i in 0..len {
                            let at = base + i * step;
                            gx[at] = gx[at] + coef * (v[at] - mean);
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let v = &self.nodes[x.0].value;
                self.accumulate(grads, x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(v) {
                        let s = if xv > F::zero() {
                            F::one()
                        } else if xv < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        *o = *o + gv * s;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, x, |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *o = *o + gv * yv * (F::one() - yv);
                    }
                });
            }
            Op::Gelu(x) => {
                let v = &self.nodes[x.0].value;
                self.accumulate(grads, x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(v) {
                        *o = *o + gv * F::from_f64(gelu_derivative(xv.as_f64()));
                    }
                });
            }
            Op::Softplus(x) => {
                let v = &self.nodes[x.0].value;
                self.accumulate(grads, x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(v) {
                        *o = *o + gv * sigmoid_stable(xv);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let [r, c] = self.nodes[id].shape[..] else { unreachable!() };
                let y = &self.nodes[id].value;
                let (groups, len, stride, step) = if axis == 1 {
                    (r, c, c, 1usize)
                } else {
                    (c, r, 1usize, c)
                };
                self.accumulate(grads, x, |gx| {
                    for gidx in 0..groups {
                        let base = gidx * stride;
                        let mut dot = F::zero();
                        for i in 0..len {
                            let at = base + i * step;
                            dot = dot + g[at] * y[at];
                        }
                        for i in 0..len {
                            let at = base + i * step;
                            gx[at] = gx[at] + y[at] * (g[at] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, scale, shift } => {
                let [r, c] = self.nodes[id].shape[..] else { unreachable!() };
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[scale.0].value;
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let (norm, _, inv_std) = normalize_row(row);
                    self.accumulate(grads, scale, |gs| {
                        for j in 0..c {
                            gs[j] = gs[j] + grow[j] * norm[j];
                        }
                    });
                    self.accumulate(grads, shift, |gb| {
                        for j in 0..c {
                            gb[j] = gb[j] + grow[j];
                        }
                    });
                    self.accumulate(grads, x, |gx| {
                        // d/dx of (x - mean) / std per row
                        let mut gnorm = vec![F::zero(); c];
                        for j in 0..c {
                            gnorm[j] = grow[j] * sv[j];
                        }
                        let inv_n = F::from_f64(1.0 / c as f64);
                        let mean_g = gnorm.iter().copied().sum::<F>() * inv_n;
                        let mean_gn = gnorm
                            .iter()
                            .zip(&norm)
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            * inv_n;
                        for j in 0..c {
                            let d = (gnorm[j] - mean_g - norm[j] * mean_gn) * inv_std;
                            gx[i * c + j] = gx[i * c + j] + d;
                        }
                    });
                }
            }
            Op::DiffRows(x) => {
                let [r, c] = self.nodes[id].shape[..] else { unreachable!() };
                self.accumulate(grads, x, |gx| {
                    for i in 1..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[i * c + j];
                            gx[(i - 1) * c + j] = gx[(i - 1) * c + j] - g[i * c + j];
                        }
                    }
                });
            }
            Op::MovingAvgRows { x, window } => {
                let [r, c] = self.nodes[id].shape[..] else { unreachable!() };
                let (lo, hi) = window_span(window);
                let inv = F::from_f64(1.0 / window as f64);
                self.accumulate(grads, x, |gx| {
                    for i in 0..r as isize {
                        for off in lo..=hi {
                            let src = (i + off).clamp(0, r as isize - 1) as usize;
                            for j in 0..c {
                                gx[src * c + j] = gx[src * c + j] + g[i as usize * c + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::HilbertImag(x) => {
                let [r, c] = self.nodes[id].shape[..] else { unreachable!() };
                self.accumulate(grads, x, |gx| {
                    let adj = hilbert_columns(g, r, c, true);
                    axpy(gx, &adj, F::one());
                });
            }
            Op::Atan2 { y, x } => {
                let (yv, xv) = (&self.nodes[y.0].value, &self.nodes[x.0].value);
                self.accumulate(grads, y, |gy| {
                    for i in 0..g.len() {
                        let d = xv[i] * xv[i] + yv[i] * yv[i];
                        if d > F::zero() {
                            gy[i] = gy[i] + g[i] * xv[i] / d;
                        }
                    }
                });
                self.accumulate(grads, x, |gx| {
                    for i in 0..g.len() {
                        let d = xv[i] * xv[i] + yv[i] * yv[i];
                        if d > F::zero() {
                            gx[i] = gx[i] - g[i] * yv[i] / d;
                        }
                    }
                });
            }
            Op::WrapAngle(x) => {
                self.accumulate(grads, x, |gx| axpy(gx, g, F::one()));
            }
        }
    }
}

fn axpy<F: Scalar>(acc: &mut [F], delta: &[F], k: F) {
    debug_assert_eq!(acc.len(), delta.len());
    for (a, &d) in acc.iter_mut().zip(delta) {
        *a = *a + k * d;
    }
}

/// `A(m x k) · B(k x n)`.
fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `A(m x n) · Bᵀ` where `B` is `k x n`, giving `m x k`.
fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum::<F>();
        }
    }
    out
}

/// `Aᵀ · B` where `A` is `m x k` and `B` is `m x n`, giving `k x n`.
fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<F: Scalar>(v: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    out
}

fn window_span(window: usize) -> (isize, isize) {
    let lo = -((window as isize - 1) / 2);
    let hi = window as isize / 2;
    (lo, hi)
}

/// Normalize one row to zero mean and unit variance; returns
/// `(normalized, mean, 1/std)`.
fn normalize_row<F: Scalar>(row: &[F]) -> (Vec<F>, F, F) {
    let n = F::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = F::one() / (var + F::from_f64(LAYER_NORM_EPS)).sqrt();
    let norm = row.iter().map(|&v| (v - mean) * inv_std).collect();
    (norm, mean, inv_std)
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU.
fn gelu_value<F: Scalar>(x: f64) -> F {
    let u = GELU_C * (x + GELU_A * x * x * x);
    F::from_f64(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus_stable<F: Scalar>(x: f64) -> F {
    let v = if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    F::from_f64(v)
}

/// Hilbert transform per column of a row-major `r x c` buffer. With
/// `adjoint = true` computes the transposed map (the negation).
fn hilbert_columns<F: Scalar>(v: &[F], r: usize, c: usize, adjoint: bool) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    let mut col = vec![0.0f64; r];
    for j in 0..c {
        for i in 0..r {
            col[i] = v[i * c + j].as_f64();
        }
        let h = dsp::hilbert_imag(&col);
        let sign = if adjoint { -1.0 } else { 1.0 };
        for i in 0..r {
            out[i * c + j] = F::from_f64(sign * h[i]);
        }
    }
    out
}

/// Convenience checks used by tests: wrapped angles stay in `(-π, π]`.
#[allow(dead_code)]
fn in_principal_range(x: f64) -> bool {
    -PI < x && x <= PI
}
