use std::collections::HashMap;

use super::kernels::{self, col2im, im2col, ConvGeom, MatRef};
use super::{numel, Precision, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    ScalarMul,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

/// Second operand of a binary elementwise op.
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(c: f64) -> Self {
        Operand::Scalar(c)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    ScalarMul(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations, replayed in reverse by
/// [`Tape::backward`].
///
/// Node order is a topological order: every op only refers to earlier nodes.
/// Gradients are retained for leaves only and accumulate across repeated
/// `backward` calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    bound: HashMap<TensorId, Var>,
    precision: Precision,
}

/// Shape produced by broadcasting `b` against `a` along leading axes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if a == b || numel(short) == 1 || long.ends_with(short) {
        Ok(long.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Sums `g` (length `numel(out)`) into a buffer of length `m` where output
/// index `i` maps to `i % m`.
fn reduce_into(dst: &mut [f64], g: &[f64], scale: impl Fn(usize) -> f64) {
    let m = dst.len();
    if m == g.len() {
        for (i, (d, gi)) in dst.iter_mut().zip(g).enumerate() {
            *d += gi * scale(i);
        }
    } else {
        for (i, gi) in g.iter().enumerate() {
            dst[i % m] += gi * scale(i);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, mut value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.precision.round_slice(&mut value);
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, mut value: Vec<f64>, requires_grad: bool) -> Var {
        self.precision.round_slice(&mut value);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf that carries its `requires_grad` flag.
    ///
    /// Binding the same tensor twice returns the same node.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(v) = self.bound.get(&t.id()) {
            return *v;
        }
        let v = self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad());
        self.bound.insert(t.id(), v);
        v
    }

    /// Makes later [`Tape::param`] calls for `t` return `v`, so a layer can
    /// be evaluated at values other than its own. `v` must have `t`'s shape
    /// and `t` must not be bound yet.
    pub fn bind(&mut self, t: &Tensor, v: Var) -> Result<()> {
        if self.shape(v) != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "bind",
                lhs: t.shape().to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        if self.bound.contains_key(&t.id()) {
            return Err(Error::invalid("tensor is already bound on this tape"));
        }
        self.bound.insert(t.id(), v);
        Ok(())
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    /// Records a leaf with an explicit gradient requirement.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push_leaf(shape.to_vec(), data, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Gradient of a bound parameter tensor.
    pub fn param_grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.bound.get(&t.id()).and_then(|v| self.grad(*v))
    }

    /// Adds this tape's gradient for `t` into `t.grad`. Returns whether a
    /// gradient was present.
    pub fn write_grad(&self, t: &mut Tensor) -> Result<bool> {
        match self.param_grad(t) {
            Some(g) => {
                let g = g.to_vec();
                t.accumulate_grad(&g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---------------------------------------------------------------- ops

    /// Generic entry point for the elementwise primitives.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Operand>) -> Result<Var> {
        use ElementwiseOp::*;
        match (op, b) {
            (Add, Some(Operand::Var(b))) => self.add(a, b),
            (Add, Some(Operand::Scalar(c))) => Ok(self.add_scalar(a, c)),
            (Sub, Some(Operand::Var(b))) => self.sub(a, b),
            (Sub, Some(Operand::Scalar(c))) => Ok(self.add_scalar(a, -c)),
            (Mul, Some(Operand::Var(b))) => self.mul(a, b),
            (Mul | ScalarMul, Some(Operand::Scalar(c))) => Ok(self.scale(a, c)),
            (Relu, None) => Ok(self.relu(a)),
            (Sigmoid, None) => Ok(self.sigmoid(a)),
            (Exp, None) => Ok(self.exp(a)),
            (Log, None) => self.log(a),
            (op, b) => Err(Error::invalid(format!(
                "elementwise {op:?} does not accept operand {b:?}"
            ))),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let (ma, mb) = (va.len(), vb.len());
        let value = (0..numel(&shape))
            .map(|i| f(va[i % ma], vb[i % mb]))
            .collect();
        Ok(self.push(shape, value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::ScalarMul(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).iter().position(|&x| x <= 0.0) {
            return Err(Error::invalid(format!(
                "log of non-positive value {} at index {i}",
                self.value(a)[i]
            )));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// `(m x k) . (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::rm(self.value(a), k),
            MatRef::rm(self.value(b), n),
            0.0,
            &mut value,
        );
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map `x . w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let mut value: Vec<f64> = (0..n).flat_map(|_| self.value(b).iter().copied()).collect();
        kernels::gemm(
            n,
            din,
            dout,
            MatRef::rm(self.value(x), din),
            MatRef::rm_t(self.value(w), din),
            1.0,
            &mut value,
        );
        Ok(self.push(vec![n, dout], value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![1], vec![s], Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), &[a]))
    }

    /// Concatenates rank-2 nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![rows, total], value, Op::Concat(parts.to_vec()), parts))
    }

    /// 2-D convolution: `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || self.shape(b) != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::invalid(format!(
                "conv2d: kernel {:?} does not fit input {:?} with padding {pad}, stride {stride}",
                &sw[2..],
                &sx[2..]
            )));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            ow: (sx[3] + 2 * pad - sw[3]) / stride + 1,
        };
        let out_ch = sw[0];
        let cols = im2col(self.value(x), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; out_ch * ncols];
        kernels::gemm(
            out_ch,
            rows,
            ncols,
            MatRef::rm(self.value(w), rows),
            MatRef::rm(&cols, ncols),
            0.0,
            &mut out,
        );
        let ohw = geom.oh * geom.ow;
        let mut value = kernels::channel_major_to_batch(&out, geom.n, out_ch, ohw);
        let bias = self.value(b);
        for (chunk_idx, chunk) in value.chunks_mut(ohw).enumerate() {
            let bo = bias[chunk_idx % out_ch];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
        let shape = vec![geom.n, out_ch, geom.oh, geom.ow];
        Ok(self.push(shape, value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed 2-D convolution: `x: [N, C_in, H, W]`,
    /// `w: [C_in, C_out, k, k]`, `b: [C_out]`; output extent
    /// `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || self.shape(b) != [sw[1]] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let big_h = ((sx[2] - 1) * stride + sw[2]).checked_sub(2 * pad);
        let big_w = ((sx[3] - 1) * stride + sw[3]).checked_sub(2 * pad);
        let (Some(big_h), Some(big_w)) = (big_h, big_w) else {
            return Err(Error::invalid("conv_transpose2d: padding exceeds output"));
        };
        if stride == 0 || big_h == 0 || big_w == 0 {
            return Err(Error::invalid("conv_transpose2d: empty output"));
        }
        let (in_ch, out_ch) = (sw[0], sw[1]);
        // The large output image is unfolded onto the small input grid.
        let geom = ConvGeom {
            n: sx[0],
            c: out_ch,
            h: big_h,
            w: big_w,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: sx[2],
            ow: sx[3],
        };
        let hw = sx[2] * sx[3];
        let xm = kernels::batch_to_channel_major(self.value(x), geom.n, in_ch, hw);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        kernels::gemm(
            rows,
            in_ch,
            ncols,
            MatRef::rm_t(self.value(w), rows),
            MatRef::rm(&xm, ncols),
            0.0,
            &mut cols,
        );
        let mut value = col2im(&cols, &geom);
        let bias = self.value(b);
        let big = big_h * big_w;
        for (chunk_idx, chunk) in value.chunks_mut(big).enumerate() {
            let bo = bias[chunk_idx % out_ch];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
        let shape = vec![geom.n, out_ch, big_h, big_w];
        Ok(self.push(
            shape,
            value,
            Op::ConvTranspose2d { x, w, b, geom },
            &[x, w, b],
        ))
    }

    /// `[N, C, H, W]` to `[N, C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                lhs: s,
                rhs: vec![],
            });
        }
        let hw = s[2] * s[3];
        let value = self
            .value(x)
            .chunks(hw.max(1))
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(vec![s[0], s[1]], value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Row-wise softmax of `[N, K]` logits with per-row max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: s,
                rhs: vec![],
            });
        }
        let value = softmax_rows(self.value(logits), s[1]);
        Ok(self.push(s, value, Op::Softmax(logits), &[logits]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let k = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits);
        let mut loss = 0.0;
        for (row, &y) in z.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len().max(1) as f64;
        let probs = softmax_rows(z, k);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, recon: Var, target: Var) -> Result<Var> {
        if self.shape(recon) != self.shape(target) {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape(recon).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let (a, b) = (self.value(recon), self.value(target));
        let loss =
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Mse(recon, target),
            &[recon, target],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`, accumulating into leaf
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let mut g = g;
                self.precision.round_slice(&mut g);
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |_| 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    reduce_into(gb, g, |_| 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |_| 1.0);
                }
                if let Some(gb) = slot!(*b) {
                    reduce_into(gb, g, |_| -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |j| vb[j % vb.len()]);
                }
                if let Some(gb) = slot!(*b) {
                    reduce_into(gb, g, |j| va[j % va.len()]);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |_| 1.0);
                }
            }
            Op::ScalarMul(a, c) => {
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |_| *c);
                }
            }
            Op::Relu(a) => {
                let y = &node.value;
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |j| if y[j] > 0.0 { 1.0 } else { 0.0 });
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |j| y[j] * (1.0 - y[j]));
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |j| y[j]);
                }
            }
            Op::Log(a) => {
                let x = &nodes[a.0].value;
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |j| 1.0 / x[j]);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(*a) {
                    // dA = dC . B^T
                    kernels::gemm(m, n, k, MatRef::rm(g, n), MatRef::rm_t(vb, n), 1.0, ga);
                }
                if let Some(gb) = slot!(*b) {
                    // dB = A^T . dC
                    kernels::gemm(k, m, n, MatRef::rm_t(va, k), MatRef::rm(g, n), 1.0, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let dout = nodes[w.0].shape[0];
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                if let Some(gx) = slot!(*x) {
                    kernels::gemm(
                        n,
                        dout,
                        din,
                        MatRef::rm(g, dout),
                        MatRef::rm(vw, din),
                        1.0,
                        gx,
                    );
                }
                if let Some(gw) = slot!(*w) {
                    kernels::gemm(
                        dout,
                        n,
                        din,
                        MatRef::rm_t(g, dout),
                        MatRef::rm(vx, din),
                        1.0,
                        gw,
                    );
                }
                if let Some(gb) = slot!(*b) {
                    reduce_into(gb, g, |_| 1.0);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot!(*a) {
                    let s = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    reduce_into(ga, g, |_| 1.0);
                }
            }
            Op::Concat(parts) => {
                let total = node.shape[1];
                let rows = node.shape[0];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    if let Some(gp) = slot!(*p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let out_ch = nodes[w.0].shape[0];
                let ohw = geom.oh * geom.ow;
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let gm = kernels::batch_to_channel_major(g, geom.n, out_ch, ohw);
                if let Some(gw) = slot!(*w) {
                    let cols = im2col(&nodes[x.0].value, geom);
                    kernels::gemm(
                        out_ch,
                        ncols,
                        rows,
                        MatRef::rm(&gm, ncols),
                        MatRef::rm_t(&cols, ncols),
                        1.0,
                        gw,
                    );
                }
                if let Some(gb) = slot!(*b) {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        *gbo += gm[o * ncols..(o + 1) * ncols].iter().sum::<f64>();
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dcols = vec![0.0; rows * ncols];
                    kernels::gemm(
                        rows,
                        out_ch,
                        ncols,
                        MatRef::rm_t(&nodes[w.0].value, rows),
                        MatRef::rm(&gm, ncols),
                        0.0,
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, geom);
                    gx.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let in_ch = nodes[w.0].shape[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let hw = geom.oh * geom.ow;
                let dcols = im2col(g, geom);
                if let Some(gw) = slot!(*w) {
                    let xm = kernels::batch_to_channel_major(&nodes[x.0].value, geom.n, in_ch, hw);
                    kernels::gemm(
                        in_ch,
                        ncols,
                        rows,
                        MatRef::rm(&xm, ncols),
                        MatRef::rm_t(&dcols, ncols),
                        1.0,
                        gw,
                    );
                }
                if let Some(gb) = slot!(*b) {
                    let big = geom.h * geom.w;
                    for (chunk_idx, chunk) in g.chunks(big).enumerate() {
                        gb[chunk_idx % geom.c] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dxm = vec![0.0; in_ch * ncols];
                    kernels::gemm(
                        in_ch,
                        rows,
                        ncols,
                        MatRef::rm(&nodes[w.0].value, rows),
                        MatRef::rm(&dcols, ncols),
                        0.0,
                        &mut dxm,
                    );
                    let dx = kernels::channel_major_to_batch(&dxm, geom.n, in_ch, hw);
                    gx.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = &nodes[x.0].shape;
                let hw = s[2] * s[3];
                if let Some(gx) = slot!(*x) {
                    for (chunk, gi) in gx.chunks_mut(hw.max(1)).zip(g) {
                        let v = gi / hw as f64;
                        chunk.iter_mut().for_each(|c| *c += v);
                    }
                }
            }
            Op::Softmax(a) => {
                let k = node.shape[1];
                let y = &node.value;
                if let Some(ga) = slot!(*a) {
                    for ((gr, yr), dr) in g.chunks(k).zip(y.chunks(k)).zip(ga.chunks_mut(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = nodes[logits.0].shape[1];
                let scale = g[0] / labels.len().max(1) as f64;
                if let Some(gl) = slot!(*logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let scale = 2.0 * g[0] / va.len().max(1) as f64;
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut()
                        .zip(va.iter().zip(vb))
                        .for_each(|(d, (x, y))| *d += scale * (x - y));
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut()
                        .zip(va.iter().zip(vb))
                        .for_each(|(d, (x, y))| *d -= scale * (x - y));
                }
            }
        }
    }
}

/// Gradient buffer for `v`, or `None` when it needs no gradient.
fn grad_slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(z: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    out
}
