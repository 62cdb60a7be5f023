use std::cell::RefCell;
use std::collections::HashMap;

use super::kernels::{col2im, conv2d_output_extent, gemm, im2col, upsample_index, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// `max(n, NORM_EPS)` that keeps a NaN norm NaN.
fn floor_norm(n: f64) -> f64 {
    if n < NORM_EPS {
        NORM_EPS
    } else {
        n
    }
}

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample(usize),
    Softplus(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Ln(usize),
    Exp(usize),
    Recip(usize),
    Affine(usize, f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    BroadcastMul {
        a: usize,
        b: usize,
        b_index: Vec<usize>,
    },
    PowConst(usize, f64),
    Pow(usize, usize),
    Concat {
        inputs: Vec<usize>,
        extents: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    SumAxes {
        input: usize,
        out_index: Vec<usize>,
    },
    L2Normalize {
        input: usize,
        group: Vec<usize>,
        norms: Vec<f64>,
    },
    LogSoftmax {
        input: usize,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    MatMul(usize, usize),
    Distance(usize, usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// A dynamic tape of executed operations.
///
/// Every operation appends one node; nodes are only ever appended, so
/// execution order is a topological order. A graph is single-threaded
/// (`!Sync`); independent graphs can live on independent threads.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by one [`Graph::backward`] call, keyed by node.
///
/// Holds entries for every `requires_grad` leaf reached from the loss and for
/// any interior node marked with [`Graph::retain_grad`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn group_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::dim(format!("axis {a} out of range for shape {shape:?}")));
        }
    }
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut g = 0;
        for &d in &kept {
            g = g * shape[d] + coord[d];
        }
        index.push(g);
        for d in (0..shape.len()).rev() {
            coord[d] += 1;
            if coord[d] < shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    Ok((index, out_shape))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d(x^p)/dx with the x = 0 limits taken from the right.
#[inline]
fn pow_dx(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        if p == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        p * x.powf(p - 1.0)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`: gradients never flow through the result.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    /// Keep the gradient of an interior node in the next [`Graph::backward`].
    pub fn retain_grad(&self, v: Var) {
        self.nodes.borrow_mut()[v.0].retain = true;
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |t| t.shape().to_vec())
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.with_value(v, Tensor::item)
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.with_value(a, |t| t.map(f));
        self.push(out, op, &[a.0])
    }

    // ---- convolution and resampling ------------------------------------

    /// 2-D cross-correlation of a C_in×H×W input with a C_out×C_in×k×k bank.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, geom, cols) = {
            let nodes = self.nodes.borrow();
            let (x, w, b) = (&nodes[input.0].value, &nodes[weight.0].value, &nodes[bias.0].value);
            let (c_in, h, wd) = x.chw()?;
            let &[c_out, wc_in, kh, kw] = w.shape() else {
                return Err(Error::dim(format!("conv2d weight must be 4-D, got {:?}", w.shape())));
            };
            if wc_in != c_in {
                return Err(Error::dim(format!(
                    "conv2d: input has {c_in} channels, weight expects {wc_in}"
                )));
            }
            if kh != kw {
                return Err(Error::dim(format!("conv2d: non-square kernel {kh}×{kw}")));
            }
            if b.shape() != [c_out] {
                return Err(Error::dim(format!(
                    "conv2d: bias shape {:?}, expected [{c_out}]",
                    b.shape()
                )));
            }
            if stride == 0 {
                return Err(Error::Parameter("conv2d: stride must be positive".into()));
            }
            let (h_out, w_out) = match (
                conv2d_output_extent(h, kh, stride, padding),
                conv2d_output_extent(wd, kw, stride, padding),
            ) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => {
                    return Err(Error::dim(format!(
                        "conv2d: kernel {kh} does not fit {h}×{wd} input with padding {padding}"
                    )))
                }
            };
            let geom = ConvGeom {
                c_in,
                h,
                w: wd,
                k: kh,
                stride,
                padding,
                h_out,
                w_out,
            };
            let cols = im2col(x.data(), &geom);
            let p = geom.positions();
            let mut out = vec![0.0; c_out * p];
            for (co, row) in out.chunks_exact_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
            gemm(c_out, geom.patch_len(), p, w.data(), false, &cols, false, 1.0, &mut out);
            (Tensor::new(vec![c_out, h_out, w_out], out)?, geom, cols)
        };
        Ok(self.push(
            out,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                geom,
                cols,
            },
            &[input.0, weight.0, bias.0],
        ))
    }

    /// Nearest-neighbour upsampling of a C×H×W tensor to C×H_t×W_t.
    pub fn upsample_nearest(&self, input: Var, target: (usize, usize)) -> Result<Var> {
        let (ht, wt) = target;
        let out = self.with_value(input, |x| -> Result<Tensor> {
            let (c, h, w) = x.chw()?;
            if ht == 0 || wt == 0 {
                return Err(Error::dim("upsample target has a zero extent"));
            }
            if ht < h || wt < w {
                return Err(Error::dim(format!(
                    "upsample target {ht}×{wt} smaller than source {h}×{w}"
                )));
            }
            let src = x.data();
            let mut out = Vec::with_capacity(c * ht * wt);
            for ch in 0..c {
                for i in 0..ht {
                    let row = (ch * h + upsample_index(i, h, ht)) * w;
                    for j in 0..wt {
                        out.push(src[row + upsample_index(j, w, wt)]);
                    }
                }
            }
            Tensor::new(vec![c, ht, wt], out)
        })?;
        Ok(self.push(out, Op::Upsample(input.0), &[input.0]))
    }

    // ---- elementwise ---------------------------------------------------

    /// ln(1 + e^x) in the overflow-safe form max(x, 0) + ln(1 + e^{-|x|}).
    pub fn softplus(&self, a: Var) -> Var {
        self.map_unary(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus(a.0))
    }

    pub fn relu(&self, a: Var) -> Var {
        // `f64::max` would turn NaN into 0
        self.map_unary(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a.0))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.map_unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    /// Natural logarithm. Callers guarantee positive inputs.
    pub fn ln(&self, a: Var) -> Var {
        self.map_unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.map_unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.map_unary(a, f64::recip, Op::Recip(a.0))
    }

    /// `scale · a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        self.map_unary(a, |x| scale * x + shift, Op::Affine(a.0, scale))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    /// `a^p` for a constant exponent; intended for nonnegative bases.
    pub fn pow_const(&self, a: Var, p: f64) -> Var {
        self.map_unary(a, |x| x.powf(p), Op::PowConst(a.0, p))
    }

    /// `a^p` with a differentiable one-element exponent; intended for
    /// nonnegative bases.
    pub fn pow(&self, a: Var, p: Var) -> Result<Var> {
        let p_val = self.item(p)?;
        let out = self.with_value(a, |t| t.map(|x| x.powf(p_val)));
        Ok(self.push(out, Op::Pow(a.0, p.0), &[a.0, p.0]))
    }

    fn binary(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(x, y, what)?;
            let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.push(out, op, &[a.0, b.0]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |u, v| u + v, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |u, v| u - v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |u, v| u * v, Op::Mul(a.0, b.0))
    }

    /// Elementwise product where `b` has the same rank as `a` and every extent
    /// of `b` is either equal to `a`'s or 1 (e.g. C×H×W ⊙ 1×H×W).
    pub fn broadcast_mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, b_index) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.ndim() != y.ndim() || x.shape().iter().zip(y.shape()).any(|(&p, &q)| q != p && q != 1) {
                return Err(Error::dim(format!(
                    "broadcast_mul: {:?} cannot broadcast onto {:?}",
                    y.shape(),
                    x.shape()
                )));
            }
            let broadcast_axes: Vec<usize> = (0..y.ndim()).filter(|&d| y.shape()[d] != x.shape()[d]).collect();
            let (b_index, _) = group_index(x.shape(), &broadcast_axes)?;
            let data = x.data().iter().zip(&b_index).map(|(&u, &j)| u * y.data()[j]).collect();
            (Tensor::new(x.shape().to_vec(), data)?, b_index)
        };
        Ok(self.push(
            out,
            Op::BroadcastMul {
                a: a.0,
                b: b.0,
                b_index,
            },
            &[a.0, b.0],
        ))
    }

    // ---- structural ----------------------------------------------------

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let (out, extents, outer, inner) = {
            let nodes = self.nodes.borrow();
            let first = &nodes
                .get(parts.first().ok_or_else(|| Error::dim("concat of nothing"))?.0)
                .expect("valid var")
                .value;
            let shape = first.shape();
            if axis >= shape.len() {
                return Err(Error::dim(format!("concat axis {axis} out of range for {shape:?}")));
            }
            let mut extents = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible =
                    s.len() == shape.len() && s.iter().zip(shape).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(Error::dim(format!("concat: {s:?} incompatible with {shape:?}")));
                }
                extents.push(s[axis]);
            }
            let total: usize = extents.iter().sum();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = total;
            (Tensor::new(out_shape, data)?, extents, outer, inner)
        };
        let inputs: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.clone(),
                extents,
                outer,
                inner,
            },
            &inputs,
        ))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), &[a.0]))
    }

    // ---- reductions ----------------------------------------------------

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let (out, out_index) = self.with_value(a, |x| -> Result<_> {
            let (out_index, out_shape) = group_index(x.shape(), axes)?;
            let mut data = vec![0.0; out_shape.iter().product()];
            for (&v, &g) in x.data().iter().zip(&out_index) {
                data[g] += v;
            }
            Ok((Tensor::new(out_shape, data)?, out_index))
        })?;
        Ok(self.push(out, Op::SumAxes { input: a.0, out_index }, &[a.0]))
    }

    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let count: usize = axes.iter().filter_map(|&d| shape.get(d)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum(&self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes).expect("all axes are in range")
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with_value(a, Tensor::len);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Divides every slice spanned by `axes` by its Euclidean norm
    /// (floored at [`NORM_EPS`]).
    pub fn l2_normalize(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let (out, group, norms) = self.with_value(a, |x| -> Result<_> {
            let (group, group_shape) = group_index(x.shape(), axes)?;
            let mut norms = vec![0.0; group_shape.iter().product()];
            for (&v, &g) in x.data().iter().zip(&group) {
                norms[g] += v * v;
            }
            norms.iter_mut().for_each(|n| *n = n.sqrt());
            let data = x
                .data()
                .iter()
                .zip(&group)
                .map(|(&v, &g)| v / floor_norm(norms[g]))
                .collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, group, norms))
        })?;
        Ok(self.push(
            out,
            Op::L2Normalize {
                input: a.0,
                group,
                norms,
            },
            &[a.0],
        ))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (out, outer, extent, inner) = self.with_value(a, |x| -> Result<_> {
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::dim(format!(
                    "log_softmax axis {axis} out of range for {shape:?}"
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let extent = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let src = x.data();
            let mut data = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * extent + k) * inner + i;
                    let max = (0..extent).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + (0..extent).map(|k| (src[at(k)] - max).exp()).sum::<f64>().ln();
                    for k in 0..extent {
                        data[at(k)] = src[at(k)] - lse;
                    }
                }
            }
            Ok((Tensor::new(shape.to_vec(), data)?, outer, extent, inner))
        })?;
        Ok(self.push(
            out,
            Op::LogSoftmax {
                input: a.0,
                outer,
                extent,
                inner,
            },
            &[a.0],
        ))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (&[m, k], &[k2, n]) = (x.shape(), y.shape()) else {
                return Err(Error::dim(format!(
                    "matmul expects 2-D operands, got {:?} and {:?}",
                    x.shape(),
                    y.shape()
                )));
            };
            if k != k2 {
                return Err(Error::dim(format!("matmul: inner extents {k} and {k2} differ")));
            }
            let mut data = vec![0.0; m * n];
            gemm(m, k, n, x.data(), false, y.data(), false, 0.0, &mut data);
            Tensor::new(vec![m, n], data)?
        };
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// Euclidean distance between two same-shape tensors, as a scalar.
    pub fn euclidean_distance(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(x, y, "euclidean_distance")?;
            let d2: f64 = x.data().iter().zip(y.data()).map(|(u, v)| (u - v) * (u - v)).sum();
            Tensor::scalar(d2.sqrt())
        };
        Ok(self.push(out, Op::Distance(a.0, b.0), &[a.0, b.0]))
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates d`loss`/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("loss is not a node of this graph".into()))?;
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out = Gradients::default();
        if !root.requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.retain || matches!(node.op, Op::Leaf) {
                out.grads.insert(
                    i,
                    Tensor::new(node.value.shape().to_vec(), gy.clone()).expect("grad shape"),
                );
            }
            let mut acc = |j: usize, contrib: Vec<f64>| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |j: usize| nodes[j].value.data();
            let y = node.value.data();
            let elementwise = |j: usize, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
                val(j).iter().zip(&gy).map(|(&x, &g)| f(x, g)).collect()
            };

            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let c_out = node.value.shape()[0];
                    let p = geom.positions();
                    let ck = geom.patch_len();
                    if nodes[*weight].requires_grad {
                        let mut dw = vec![0.0; c_out * ck];
                        gemm(c_out, p, ck, &gy, false, cols, true, 0.0, &mut dw);
                        acc(*weight, dw);
                    }
                    if nodes[*bias].requires_grad {
                        acc(*bias, gy.chunks_exact(p).map(|r| r.iter().sum()).collect());
                    }
                    if nodes[*input].requires_grad {
                        let mut dcols = vec![0.0; ck * p];
                        gemm(ck, c_out, p, val(*weight), true, &gy, false, 0.0, &mut dcols);
                        acc(*input, col2im(&dcols, geom));
                    }
                }
                Op::Upsample(a) => {
                    let (c, h, w) = nodes[*a].value.chw().expect("3-D");
                    let (_, ht, wt) = node.value.chw().expect("3-D");
                    let mut dx = vec![0.0; c * h * w];
                    let mut k = 0;
                    for ch in 0..c {
                        for i in 0..ht {
                            let row = (ch * h + upsample_index(i, h, ht)) * w;
                            for j in 0..wt {
                                dx[row + upsample_index(j, w, wt)] += gy[k];
                                k += 1;
                            }
                        }
                    }
                    acc(*a, dx);
                }
                Op::Softplus(a) => acc(*a, elementwise(*a, &|x, g| g * sigmoid(x))),
                Op::Relu(a) => acc(*a, elementwise(*a, &|x, g| if x > 0.0 { g } else { 0.0 })),
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    acc(*a, elementwise(*a, &|x, g| if x > 0.0 { g } else { s * g }))
                }
                Op::Sigmoid(a) => acc(*a, y.iter().zip(&gy).map(|(&s, &g)| g * s * (1.0 - s)).collect()),
                Op::Ln(a) => acc(*a, elementwise(*a, &|x, g| g / x)),
                Op::Exp(a) => acc(*a, y.iter().zip(&gy).map(|(&e, &g)| g * e).collect()),
                Op::Recip(a) => acc(*a, elementwise(*a, &|x, g| -g / (x * x))),
                Op::Affine(a, s) => acc(*a, gy.iter().map(|g| g * s).collect()),
                Op::Add(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy.iter().map(|g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (val(*a), val(*b));
                    acc(*a, gy.iter().zip(xb).map(|(g, v)| g * v).collect());
                    acc(*b, gy.iter().zip(xa).map(|(g, v)| g * v).collect());
                }
                Op::BroadcastMul { a, b, b_index } => {
                    let (xa, xb) = (val(*a), val(*b));
                    acc(*a, gy.iter().zip(b_index).map(|(g, &j)| g * xb[j]).collect());
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; xb.len()];
                        for ((g, &j), v) in gy.iter().zip(b_index).zip(xa) {
                            db[j] += g * v;
                        }
                        acc(*b, db);
                    }
                }
                Op::PowConst(a, p) => {
                    let p = *p;
                    acc(*a, elementwise(*a, &|x, g| g * pow_dx(x, p)));
                }
                Op::Pow(a, pv) => {
                    let p = val(*pv)[0];
                    acc(*a, elementwise(*a, &|x, g| g * pow_dx(x, p)));
                    let dp: f64 = val(*a)
                        .iter()
                        .zip(y)
                        .zip(&gy)
                        .map(|((&x, &yv), &g)| if x > 0.0 { g * yv * x.ln() } else { 0.0 })
                        .sum();
                    acc(*pv, vec![dp]);
                }
                Op::Concat {
                    inputs,
                    extents,
                    outer,
                    inner,
                } => {
                    let total: usize = extents.iter().sum();
                    let mut offset = 0;
                    for (&j, &ext) in inputs.iter().zip(extents) {
                        let block = ext * inner;
                        let mut dx = Vec::with_capacity(outer * block);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&gy[start..start + block]);
                        }
                        offset += ext;
                        acc(j, dx);
                    }
                }
                Op::Reshape(a) => acc(*a, gy.clone()),
                Op::SumAxes { input, out_index } => {
                    acc(*input, out_index.iter().map(|&g| gy[g]).collect());
                }
                Op::L2Normalize { input, group, norms } => {
                    let mut dots = vec![0.0; norms.len()];
                    for ((&yv, &g), &k) in y.iter().zip(&gy).zip(group) {
                        dots[k] += yv * g;
                    }
                    let dx = y
                        .iter()
                        .zip(&gy)
                        .zip(group)
                        .map(|((&yv, &g), &k)| {
                            if !(norms[k] <= NORM_EPS) {
                                (g - yv * dots[k]) / norms[k]
                            } else {
                                g / NORM_EPS
                            }
                        })
                        .collect();
                    acc(*input, dx);
                }
                Op::LogSoftmax {
                    input,
                    outer,
                    extent,
                    inner,
                } => {
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| (o * extent + k) * inner + i;
                            let gsum: f64 = (0..*extent).map(|k| gy[at(k)]).sum();
                            for k in 0..*extent {
                                dx[at(k)] = gy[at(k)] - y[at(k)].exp() * gsum;
                            }
                        }
                    }
                    acc(*input, dx);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[1];
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &gy, false, val(*b), true, 0.0, &mut da);
                        acc(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, val(*a), true, &gy, false, 0.0, &mut db);
                        acc(*b, db);
                    }
                }
                Op::Distance(a, b) => {
                    let d = y[0];
                    let g = gy[0];
                    let diff: Vec<f64> = if d > 0.0 {
                        val(*a).iter().zip(val(*b)).map(|(u, v)| g * (u - v) / d).collect()
                    } else {
                        vec![0.0; val(*a).len()]
                    };
                    acc(*b, diff.iter().map(|v| -v).collect());
                    acc(*a, diff);
                }
            }
        }
        Ok(out)
    }
}
