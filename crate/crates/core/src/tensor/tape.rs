use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erf;

use super::kernels::{conv2d_backward, conv2d_forward, gemm};
use super::{inverse_perm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Gelu(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Conv2d { x: Var, k: Var, bias: Option<Var> },
    Subsample2(Var),
    Upsample2(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every op appends one node; [`Tape::backward`] walks the nodes in reverse
/// order, so each recorded op is visited exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn big_phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Splits a shape around `axis` into (outer, len, inner) extents.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Gradients are reported only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, &f)?
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|x| f(x, s))
        } else if ta.is_scalar() {
            let s = ta.item();
            tb.map(|x| f(s, x))
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| x * big_phi(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var always has matching shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            n,
            k,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Batched matmul: `[B, m, k] · [B, k, n] → [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                n,
                k,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([bs, m, n], out)?, Op::Bmm(a, b), ng))
    }

    /// Same-padded 3×3 convolution. `x` is `[C_in, H, W]` or `[N, C_in, H, W]`,
    /// `k` is `[C_out, C_in, 3, 3]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
        let (n, cin, h, w) = conv_dims(self.shape(x))?;
        let ks = self.shape(k);
        if ks.len() != 4 || ks[1] != cin || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::shape("conv2d", self.shape(x), ks));
        }
        let cout = ks[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", &[cout], self.shape(b)));
            }
        }
        let out = conv2d_forward(
            self.value(x).data(),
            n,
            cin,
            h,
            w,
            self.value(k).data(),
            cout,
            bias.map(|b| self.value(b).data()),
        );
        let shape = if self.shape(x).len() == 3 {
            vec![cout, h, w]
        } else {
            vec![n, cout, h, w]
        };
        let ng = self.needs(x) || self.needs(k) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, k, bias }, ng))
    }

    /// Keeps every second row and column of the trailing two axes.
    pub fn subsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let nd = s.len();
        if nd < 2 || !s[nd - 1].is_multiple_of(2) || !s[nd - 2].is_multiple_of(2) {
            return Err(Error::invalid("subsample2", format!("needs even H, W, got {s:?}")));
        }
        let (h, w) = (s[nd - 2], s[nd - 1]);
        let lead: usize = s[..nd - 2].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(lead * h * w / 4);
        for p in 0..lead {
            for y in (0..h).step_by(2) {
                let row = &src[p * h * w + y * w..p * h * w + (y + 1) * w];
                out.extend(row.iter().step_by(2));
            }
        }
        let mut shape = s.clone();
        shape[nd - 2] /= 2;
        shape[nd - 1] /= 2;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Subsample2(x), ng))
    }

    /// Nearest-neighbour 2× upsampling of the trailing two axes.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let nd = s.len();
        if nd < 2 {
            return Err(Error::invalid("upsample2", format!("needs ≥2 axes, got {s:?}")));
        }
        let (h, w) = (s[nd - 2], s[nd - 1]);
        let lead: usize = s[..nd - 2].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; lead * h * w * 4];
        for p in 0..lead {
            for y in 0..2 * h {
                let srow = &src[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
                let drow = &mut out[p * 4 * h * w + y * 2 * w..p * 4 * h * w + (y + 1) * 2 * w];
                for (xx, d) in drow.iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
        let mut shape = s.clone();
        shape[nd - 2] *= 2;
        shape[nd - 1] *= 2;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2(x), ng))
    }

    /// Normalizes each slice along the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&1);
        let rows = t.len() / d;
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(x);
        self.push(value, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = around_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; t.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, axis }, ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = around_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let ng = self.needs(x);
        self.push(v, Op::Mean(x), ng)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    fn last_axis_vector(&self, name: &'static str, x: Var, b: Var) -> Result<()> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape(name, sx, sb));
        }
        Ok(())
    }

    /// Adds vector `b` to every slice along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.last_axis_vector("add_bias", x, b)?;
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(bv.len()) {
            row.iter_mut().zip(&bv).for_each(|(v, c)| *v += c);
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddBias(x, b), ng))
    }

    /// Multiplies every slice along the last axis of `x` by vector `g`.
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var> {
        self.last_axis_vector("mul_bias", x, g)?;
        let gv = self.value(g).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(gv.len()) {
            row.iter_mut().zip(&gv).for_each(|(v, c)| *v *= c);
        }
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push(value, Op::MulBias(x, g), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad matches leaf"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if self.nodes[v.0].value.len() == g.len() {
                        acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += s * g));
                    } else {
                        let total: f64 = g.iter().sum();
                        acc(v, &mut |d| d[0] += s * total);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                for (v, other) in [(*a, bv), (*b, av)] {
                    let own_len = self.nodes[v.0].value.len();
                    if own_len == g.len() {
                        if other.len() == g.len() {
                            acc(v, &mut |d| {
                                for ((d, &g), &o) in d.iter_mut().zip(g).zip(other) {
                                    *d += g * o;
                                }
                            });
                        } else {
                            let o = other[0];
                            acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * o));
                        }
                    } else {
                        let total: f64 = g.iter().zip(other).map(|(g, o)| g * o).sum();
                        acc(v, &mut |d| d[0] += total);
                    }
                }
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += s * g)),
            Op::AddConst(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)),
            Op::Silu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(x);
                        *d += g * (s + x * s * (1.0 - s));
                    }
                })
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * (big_phi(x) + x * phi(x));
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y;
                }
            }),
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        let s = if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                        *d += g * s;
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x >= *lo && x <= *hi {
                            *d += g;
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| gemm(m, k, n, g, false, bv, true, d, true));
                acc(*b, &mut |d| gemm(k, n, m, av, true, g, false, d, true));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..bs {
                        gemm(
                            m,
                            k,
                            n,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            true,
                            &mut d[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..bs {
                        gemm(
                            k,
                            n,
                            m,
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut d[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                });
            }
            Op::Conv2d { x, k, bias } => {
                let (n, cin, h, w) = conv_dims(shp(*x)).expect("validated in forward");
                let cout = shp(*k)[0];
                let (xv, kv) = (val(*x), val(*k));
                acc(*x, &mut |dx| {
                    conv2d_backward(xv, n, cin, h, w, kv, cout, g, Some(dx), None, None)
                });
                acc(*k, &mut |dk| {
                    conv2d_backward(xv, n, cin, h, w, kv, cout, g, None, Some(dk), None)
                });
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        conv2d_backward(xv, n, cin, h, w, kv, cout, g, None, None, Some(db))
                    });
                }
            }
            Op::Subsample2(a) => {
                let s = shp(*a);
                let nd = s.len();
                let (h, w) = (s[nd - 2], s[nd - 1]);
                let lead: usize = s[..nd - 2].iter().product();
                acc(*a, &mut |d| {
                    let mut it = g.iter();
                    for p in 0..lead {
                        for y in (0..h).step_by(2) {
                            for xx in (0..w).step_by(2) {
                                d[p * h * w + y * w + xx] += it.next().expect("sized");
                            }
                        }
                    }
                })
            }
            Op::Upsample2(a) => {
                let s = shp(*a);
                let nd = s.len();
                let (h, w) = (s[nd - 2], s[nd - 1]);
                let lead: usize = s[..nd - 2].iter().product();
                acc(*a, &mut |d| {
                    for p in 0..lead {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[p * h * w + (y / 2) * w + xx / 2] +=
                                    g[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                })
            }
            Op::LayerNorm { x, inv_std } => {
                let dim = *shp(*x).last().unwrap_or(&1);
                acc(*x, &mut |d| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let ys = &out[r * dim..(r + 1) * dim];
                        let gs = &g[r * dim..(r + 1) * dim];
                        let mg = gs.iter().sum::<f64>() / dim as f64;
                        let mgy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / dim as f64;
                        for ((d, &g), &y) in d[r * dim..(r + 1) * dim].iter_mut().zip(gs).zip(ys) {
                            *d += is * (g - mg - y * mgy);
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = around_axis(shp(*x), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::Permute(a, perm) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("sized");
                let back = gt.permute(&inverse_perm(perm)).expect("valid permutation");
                acc(*a, &mut |d| d.iter_mut().zip(back.data()).for_each(|(d, &g)| *d += g));
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = around_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shp(p)[*axis];
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            d[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &g)| *d += g);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = around_axis(shp(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        d[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::AddBias(x, b) => {
                let dim = shp(*b)[0];
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| {
                    for row in g.chunks(dim) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::MulBias(x, gain) => {
                let dim = shp(*gain)[0];
                let (xv, gv) = (val(*x), val(*gain));
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(dim).zip(g.chunks(dim)) {
                        for ((d, &g), &c) in drow.iter_mut().zip(grow).zip(gv) {
                            *d += g * c;
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, xrow) in g.chunks(dim).zip(xv.chunks(dim)) {
                        for ((d, &g), &x) in d.iter_mut().zip(grow).zip(xrow) {
                            *d += g * x;
                        }
                    }
                });
            }
        }
    }
}

fn conv_dims(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid("conv2d", format!("expected [C,H,W] or [N,C,H,W], got {s:?}"))),
    }
}
