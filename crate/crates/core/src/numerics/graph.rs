//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in creation order, which is a topological order of the
//! computation: every op's inputs already exist when the op is recorded.
//! `backward` walks the tape once from the loss towards index zero.
//!
//! Broadcasting is limited to `add_bias`, which adds a `[d]` vector to every
//! row of a `[..., d]` tensor. All other binary ops require equal shapes.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Real),
    Abs(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        groups: usize,
    },
    Slice {
        x: Var,
        dim: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        dim: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    MaskRows {
        x: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single computation tape. Confined to one thread; independent graphs share nothing.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    visit_log: Vec<Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Leaves that take part in differentiation.
    pub fn grad_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Nodes processed by the most recent `backward`, in visit order.
    pub fn last_backward_order(&self) -> &[Var] {
        &self.visit_log
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(dim_err(format!(
                "matmul: cannot multiply {:?} by {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(dim_err(format!(
                "transpose needs rank 2, got {:?}",
                av.shape()
            )));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let out = transpose_raw(av.data(), m, n);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[..., d] + b[d]`, the bias added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.rank() != 1 || bv.shape()[0] != d {
            return Err(dim_err(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Elementwise absolute value; the derivative at exactly 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.abs());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_row(row);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last dimension, then `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let d = self.value(x).last_dim();
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let s = self.value(v).shape();
            if s != [d] {
                return Err(dim_err(format!(
                    "layer_norm: {what} {s:?} does not match last dim {d}"
                )));
            }
        }
        self.normalize(x, Some(gain), Some(bias), eps)
    }

    /// Parameter-free per-row standardization over the last dimension.
    pub fn standardize_lastdim(&mut self, x: Var, eps: Real) -> Result<Var> {
        self.normalize(x, None, None, eps)
    }

    fn normalize(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: Real,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        let (xhat, rstd) = standardize_raw(xv.data(), d, eps);
        let mut out = xhat.clone();
        if let Some(gv) = gain {
            let g = self.value(gv).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(g).for_each(|(o, gg)| *o *= gg);
            }
        }
        if let Some(bv) = bias {
            let b = self.value(bv).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(b).for_each(|(o, bb)| *o += bb);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Grouped 1-D convolution over time with same-length zero padding.
    ///
    /// `x` is `[t, c]`, `weight` is `[c, c / groups, kernel]` with an odd kernel,
    /// `bias` is `[c]`. Output channel `o` reads input channels
    /// `(o / (c / groups)) * (c / groups) ..` of its group.
    pub fn grouped_conv1d(&mut self, x: Var, weight: Var, bias: Var, groups: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        if xv.rank() != 2 {
            return Err(dim_err(format!(
                "conv1d input must be [t, c], got {:?}",
                xv.shape()
            )));
        }
        let (t, c) = (xv.shape()[0], xv.shape()[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "conv1d: {c} channels not divisible into {groups} groups"
            )));
        }
        let gs = c / groups;
        if wv.rank() != 3 || wv.shape()[0] != c || wv.shape()[1] != gs {
            return Err(dim_err(format!(
                "conv1d: weight {:?} does not match [{c}, {gs}, k]",
                wv.shape()
            )));
        }
        let k = wv.shape()[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel must be odd, got {k}")));
        }
        if bv.shape() != [c] {
            return Err(dim_err(format!(
                "conv1d: bias {:?} must be [{c}]",
                bv.shape()
            )));
        }
        let out = conv1d_raw(xv.data(), wv.data(), bv.data(), t, c, gs, k);
        let rg = self.any_grad(&[x, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![t, c], out)?,
            Op::Conv1d {
                x,
                w: weight,
                b: bias,
                groups,
            },
            rg,
        ))
    }

    /// First `n` entries along `dim`.
    pub fn slice_prefix(&mut self, x: Var, dim: usize, n: usize) -> Result<Var> {
        self.slice_range(x, dim, 0, n)
    }

    /// Entries `start .. start + len` along `dim`.
    pub fn slice_range(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if dim >= shape.len() || len == 0 || start + len > shape[dim] {
            return Err(dim_err(format!(
                "slice [{start}, {}) along dim {dim} out of range for {shape:?}",
                start + len
            )));
        }
        if start == 0 && len == shape[dim] {
            return Ok(x);
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let full = shape[dim];
        let mut out = Vec::with_capacity(outer * len * inner);
        let data = xv.data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[dim] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Slice { x, dim, start }, rg))
    }

    /// Concatenate along `dim`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err("concat of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if dim >= first.len() {
            return Err(dim_err(format!(
                "concat dim {dim} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == dim || a == b);
            if !ok {
                return Err(dim_err(format!(
                    "concat: {s:?} incompatible with {first:?}"
                )));
            }
            total += s[dim];
        }
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[dim] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut oshape = first;
        oshape[dim] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// Rows `rows` of a 2-D tensor, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || rows.is_empty() {
            return Err(dim_err(format!(
                "gather_rows needs a 2-D tensor and at least one row, got {:?}",
                xv.shape()
            )));
        }
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= t {
                return Err(dim_err(format!("row {r} out of range for {t} rows")));
            }
            out.extend_from_slice(xv.row(r));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `x` with each listed row replaced by `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, rows: &[usize]) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(fill));
        if xv.rank() != 2 || fv.shape() != [xv.shape()[1]] {
            return Err(dim_err(format!(
                "mask_rows: fill {:?} incompatible with {:?}",
                fv.shape(),
                xv.shape()
            )));
        }
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = xv.clone();
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        for &r in &rows {
            if r >= t {
                return Err(dim_err(format!("row {r} out of range for {t} rows")));
            }
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(fv.data());
        }
        let rg = self.any_grad(&[x, fill]);
        Ok(self.push(out, Op::MaskRows { x, fill, rows }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as Real), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let m = s / xv.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m as Real), Op::Mean(x), rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a single-element `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass seeding the loss gradient with `seed`.
    pub fn backward_scaled(&mut self, loss: Var, seed: Real) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.visit_log.clear();
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, seed));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.visit_log.push(Var(i));
            let contributions = self.input_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(cg.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut res = Vec::new();
                if self.nodes[a.0].requires_grad {
                    // g [m,n] . b^T [n,k]
                    let ga = gemm(gd, false, bv.data(), true, m, n, k);
                    res.push((*a, Tensor::new(vec![m, k], ga)?));
                }
                if self.nodes[b.0].requires_grad {
                    // a^T [k,m] . g [m,n]
                    let gb = gemm(av.data(), true, gd, false, k, m, n);
                    res.push((*b, Tensor::new(vec![k, n], gb)?));
                }
                res
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                let (m, n) = (s[0], s[1]);
                vec![(*a, Tensor::new(vec![m, n], transpose_raw(gd, n, m))?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => {
                let mut neg = g.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                vec![(*a, g.clone()), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, val(*b), |x, y| x * y);
                let gb = zip_map(g, val(*a), |x, y| x * y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias(x, b) => {
                let d = val(*b).numel();
                let mut gb = vec![0.0f64; d];
                for row in gd.chunks(d) {
                    gb.iter_mut()
                        .zip(row)
                        .for_each(|(acc, v)| *acc += *v as f64);
                }
                let gb = gb.into_iter().map(|v| v as Real).collect();
                vec![(*x, g.clone()), (*b, Tensor::new(vec![d], gb)?)]
            }
            Op::Scale(x, c) => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= c);
                vec![(*x, gx)]
            }
            Op::Abs(x) => {
                let gx = zip_map(g, val(*x), |gg, xx| {
                    if xx > 0.0 {
                        gg
                    } else if xx < 0.0 {
                        -gg
                    } else {
                        0.0
                    }
                });
                vec![(*x, gx)]
            }
            Op::Gelu(x) => {
                let gx = zip_map(g, val(*x), |gg, xx| gg * gelu_grad_scalar(xx));
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for ((gxr, yr), gr) in gx.chunks_mut(d).zip(y.data().chunks(d)).zip(gd.chunks(d)) {
                    let s = dot(gr, yr) as Real;
                    for j in 0..d {
                        gxr[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let xs = val(*x).shape().to_vec();
                let d = *xs.last().unwrap();
                let ones;
                let gain_data: &[Real] = match gain {
                    Some(gv) => val(*gv).data(),
                    None => {
                        ones = vec![1.0; d];
                        &ones
                    }
                };
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0f64; d];
                let mut gbias = vec![0.0f64; d];
                for (r, ((gxr, xr), gr)) in gx
                    .chunks_mut(d)
                    .zip(xhat.chunks(d))
                    .zip(gd.chunks(d))
                    .enumerate()
                {
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for j in 0..d {
                        let gh = (gr[j] * gain_data[j]) as f64;
                        m1 += gh;
                        m2 += gh * xr[j] as f64;
                        ggain[j] += (gr[j] * xr[j]) as f64;
                        gbias[j] += gr[j] as f64;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    let rs = rstd[r] as f64;
                    for j in 0..d {
                        let gh = (gr[j] * gain_data[j]) as f64;
                        gxr[j] = (rs * (gh - m1 - xr[j] as f64 * m2)) as Real;
                    }
                }
                let mut res = vec![(*x, Tensor::new(xs, gx)?)];
                if let Some(gv) = gain {
                    res.push((
                        *gv,
                        Tensor::vector(ggain.into_iter().map(|v| v as Real).collect()),
                    ));
                }
                if let Some(bv) = bias {
                    res.push((
                        *bv,
                        Tensor::vector(gbias.into_iter().map(|v| v as Real).collect()),
                    ));
                }
                res
            }
            Op::Conv1d { x, w, b, groups } => {
                let (xv, wv) = (val(*x), val(*w));
                let (t, c) = (xv.shape()[0], xv.shape()[1]);
                let gs = c / groups;
                let k = wv.shape()[2];
                let (gx, gw, gb) = conv1d_backward_raw(xv.data(), wv.data(), gd, t, c, gs, k);
                vec![
                    (*x, Tensor::new(vec![t, c], gx)?),
                    (*w, Tensor::new(wv.shape().to_vec(), gw)?),
                    (*b, Tensor::new(vec![c], gb)?),
                ]
            }
            Op::Slice { x, dim, start } => {
                let shape = val(*x).shape().to_vec();
                let outer: usize = shape[..*dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let full = shape[*dim];
                let len = g.shape()[*dim];
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Concat { parts, dim } => {
                let shape = g.shape();
                let outer: usize = shape[..*dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let total = shape[*dim];
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let len = ps[*dim];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gp.extend_from_slice(&gd[src..src + len * inner]);
                    }
                    offset += len;
                    res.push((p, Tensor::new(ps, gp)?));
                }
                res
            }
            Op::GatherRows { x, rows } => {
                let shape = val(*x).shape().to_vec();
                let d = shape[1];
                let mut gx = Tensor::zeros(&shape);
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                    dst.iter_mut()
                        .zip(&gd[i * d..(i + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*x, gx)]
            }
            Op::MaskRows { x, fill, rows } => {
                let d = val(*fill).numel();
                let mut gx = g.clone();
                let mut gf = vec![0.0f64; d];
                for &r in rows {
                    let row = &mut gx.data_mut()[r * d..(r + 1) * d];
                    gf.iter_mut()
                        .zip(row.iter())
                        .for_each(|(a, b)| *a += *b as f64);
                    row.iter_mut().for_each(|v| *v = 0.0);
                }
                let gf = Tensor::vector(gf.into_iter().map(|v| v as Real).collect());
                vec![(*x, gx), (*fill, gf)]
            }
            Op::Sum(x) => {
                let shape = val(*x).shape().to_vec();
                vec![(*x, Tensor::full(&shape, gd[0]))]
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let v = gd[0] / xv.numel() as Real;
                vec![(*x, Tensor::full(xv.shape(), v))]
            }
        };
        Ok(out)
    }
}

// ---- raw kernels ------------------------------------------------------------

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn dot(a: &[Real], b: &[Real]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `op(a) [m,k] x op(b) [k,n]`, row-major; `ta`/`tb` read the operand as
/// stored transposed (`a` as `[k,m]`, `b` as `[n,k]`).
pub(crate) fn gemm(
    a: &[Real],
    ta: bool,
    b: &[Real],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold m*k, k*n and m*n elements and the strides above
    // address exactly those row-major (or transposed) layouts.
    unsafe {
        #[cfg(not(feature = "f64"))]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
        #[cfg(feature = "f64")]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    gemm(a, false, b, false, m, k, n)
}

fn transpose_raw(a: &[Real], m: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn gelu_scalar(x: Real) -> Real {
    let xf = x as f64;
    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
    (0.5 * xf * (1.0 + u.tanh())) as Real
}

fn gelu_grad_scalar(x: Real) -> Real {
    let xf = x as f64;
    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
    (0.5 * (1.0 + th) + 0.5 * xf * (1.0 - th * th) * du) as Real
}

fn softmax_row(row: &mut [Real]) {
    let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut s = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v - m) as f64).exp();
        *v = e as Real;
        s += e;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / s) as Real;
    }
}

/// Per-row `(x - mean) / sqrt(var + eps)` and the row reciprocal std devs.
pub(crate) fn standardize_raw(x: &[Real], d: usize, eps: Real) -> (Vec<Real>, Vec<Real>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (orow, xrow) in out.chunks_mut(d).zip(x.chunks(d)) {
        let mean = xrow.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = xrow
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rs = 1.0 / (var + eps as f64).sqrt();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = ((v as f64 - mean) * rs) as Real;
        }
        rstd.push(rs as Real);
    }
    (out, rstd)
}

fn conv1d_raw(
    x: &[Real],
    w: &[Real],
    b: &[Real],
    t: usize,
    c: usize,
    gs: usize,
    k: usize,
) -> Vec<Real> {
    let pad = k / 2;
    let mut out = vec![0.0; t * c];
    for o in 0..c {
        let base = (o / gs) * gs;
        let wo = &w[o * gs * k..(o + 1) * gs * k];
        for tau in 0..t {
            let mut acc = b[o] as f64;
            for j in 0..k {
                let src = tau + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xr = &x[(src - pad) * c + base..(src - pad) * c + base + gs];
                for i in 0..gs {
                    acc += wo[i * k + j] as f64 * xr[i] as f64;
                }
            }
            out[tau * c + o] = acc as Real;
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv1d_backward_raw(
    x: &[Real],
    w: &[Real],
    g: &[Real],
    t: usize,
    c: usize,
    gs: usize,
    k: usize,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let pad = k / 2;
    let mut gx = vec![0.0f64; t * c];
    let mut gw = vec![0.0f64; c * gs * k];
    let mut gb = vec![0.0f64; c];
    for o in 0..c {
        let base = (o / gs) * gs;
        for tau in 0..t {
            let gv = g[tau * c + o] as f64;
            gb[o] += gv;
            if gv == 0.0 {
                continue;
            }
            for j in 0..k {
                let src = tau + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let row = (src - pad) * c + base;
                for i in 0..gs {
                    gw[(o * gs + i) * k + j] += gv * x[row + i] as f64;
                    gx[row + i] += gv * w[(o * gs + i) * k + j] as f64;
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(|x| x as Real).collect();
    (cast(gx), cast(gw), cast(gb))
}
