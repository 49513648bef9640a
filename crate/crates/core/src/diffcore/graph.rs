//! Tape-style reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the tape in reverse and accumulates adjoints; nodes whose inputs
//! carry no gradient are skipped entirely.

use std::rc::Rc;

use super::{DiffError, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive logit bias for blocked attention entries.
pub const MASK_NEG: f64 = -1e9;

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, F),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Softmax { x: Var },
    RmsNorm { x: Var, gain: Option<Var>, inv_rms: Vec<F> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Mse { pred: Var, target: Var },
    TimestepEmbed { t: Var, scale: F },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { base: Var, src: Var, rows: Vec<usize>, additive: bool },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Rope { x: Var, cos: Rc<Vec<F>>, sin: Rc<Vec<F>> },
    MulPerBatch { x: Var, s: Var },
    AddPerBatch { x: Var, s: Var },
    MixTokens { x: Var, weights: Rc<Tensor<F>> },
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A single computation graph. Single-writer; build one per forward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Grads<F> {
    slots: Vec<Option<Vec<F>>>,
    dims: Vec<Vec<usize>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let data = self.slots.get(v.0)?.as_ref()?.clone();
        Some(Tensor::new(self.dims[v.0].clone(), data).expect("gradient dims match node"))
    }

    pub fn slice(&self, v: Var) -> Option<&[F]> {
        self.slots.get(v.0)?.as_deref()
    }
}

fn outer_inner(dims: &[usize], axis: usize) -> (usize, usize) {
    (dims[..axis].iter().product(), dims[axis + 1..].iter().product())
}

fn tanh_gelu<F: Real>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (F::one() + th);
    let du = c * (F::one() + F::of(3.0) * k * x * x);
    let dy = half * (F::one() + th) + half * x * (F::one() - th * th) * du;
    (y, dy)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf input. `requires_grad` marks it as a differentiation target.
    pub fn input(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.input(t, false)
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// `a · b`. `b` is either a rank-2 weight applied to the trailing axis of
    /// `a` (any rank), or a rank-3 batch matching a rank-3 `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` (transpose over the last two axes of `b`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        let (batch, m, k, n) = match (ad.len(), bd.len()) {
            (ra, 2) if ra >= 2 => {
                let (bk, bn) = if trans_b { (bd[1], bd[0]) } else { (bd[0], bd[1]) };
                if ad[ra - 1] != bk {
                    return Err(DiffError::shape("matmul", format!("{ad:?} x {bd:?} (trans_b={trans_b})")));
                }
                (1, ad[..ra - 1].iter().product(), bk, bn)
            }
            (3, 3) => {
                let (bk, bn) = if trans_b { (bd[2], bd[1]) } else { (bd[1], bd[2]) };
                if ad[0] != bd[0] || ad[2] != bk {
                    return Err(DiffError::shape("matmul", format!("{ad:?} x {bd:?} (trans_b={trans_b})")));
                }
                (ad[0], ad[1], bk, bn)
            }
            _ => return Err(DiffError::shape("matmul", format!("unsupported ranks {ad:?} x {bd:?}"))),
        };
        let mut out_dims = ad.clone();
        *out_dims.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let b_strides = if trans_b { (1, k) } else { (n, 1) };
            for g in 0..batch {
                let (ao, bo, co) = (g * m * k, if bd.len() == 3 { g * k * n } else { 0 }, g * m * n);
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    &av[ao..ao + m * k],
                    (k, 1),
                    &bv[bo..bo + k * n],
                    b_strides,
                    F::zero(),
                    &mut out[co..co + m * n],
                    (n, 1),
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::new(out_dims, out)?, Op::MatMul { a, b, trans_b }, ng)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let d = self.dims(x).to_vec();
        if d.len() < 2 {
            return Err(DiffError::shape("transpose", format!("rank {} < 2", d.len())));
        }
        let r = d.len();
        let (m, n) = (d[r - 2], d[r - 1]);
        let batch = d[..r - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for g in 0..batch {
            let o = g * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = src[o + i * n + j];
                }
            }
        }
        let mut od = d.clone();
        od.swap(r - 2, r - 1);
        let ng = self.ng(x);
        self.push("transpose", Tensor::new(od, out)?, Op::Transpose(x), ng)
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.dims(a) != self.dims(b) {
            return Err(DiffError::shape(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, node: Op<F>) -> Result<Var, DiffError> {
        self.same_dims(op, a, b)?;
        let out: Vec<F> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let dims = self.dims(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(op, Tensor::new(dims, out)?, node, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a rank-1 `bias` along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let n = self.value(x).last_dim();
        if self.dims(bias) != [n] {
            return Err(DiffError::shape("add_bias", format!("{:?} + {:?}", self.dims(x), self.dims(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push("add_bias", t, Op::AddBias { x, bias }, ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var, DiffError> {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push("scale", t, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Result<Var, DiffError> {
        let t = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push("add_scalar", t, Op::AddScalar(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x).map(|v| tanh_gelu(v).0);
        let ng = self.ng(x);
        self.push("gelu", t, Op::Gelu(x), ng)
    }

    // ---------------------------------------------------------------------
    // structure

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = parts.first().ok_or_else(|| DiffError::shape("concat", "no parts".into()))?;
        let d0 = self.dims(*first).to_vec();
        if axis >= d0.len() {
            return Err(DiffError::shape("concat", format!("axis {axis} out of range for {d0:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            let compatible = d.len() == d0.len() && d.iter().zip(&d0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(DiffError::shape("concat", format!("{d0:?} vs {d:?} along axis {axis}")));
            }
            total += d[axis];
        }
        let (outer, inner) = outer_inner(&d0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.dims(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut od = d0;
        od[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat", Tensor::new(od, out)?, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        let d = self.dims(x).to_vec();
        if axis >= d.len() || start >= end || end > d[axis] {
            return Err(DiffError::shape("slice", format!("[{start},{end}) on axis {axis} of {d:?}")));
        }
        let (outer, inner) = outer_inner(&d, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * d[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut od = d;
        od[axis] = end - start;
        let ng = self.ng(x);
        self.push("slice", Tensor::new(od, out)?, Op::Slice { x, axis, start }, ng)
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, DiffError> {
        let total = *self.dims(x).get(axis).ok_or_else(|| DiffError::shape("split", format!("axis {axis}")))?;
        if sizes.iter().sum::<usize>() != total {
            return Err(DiffError::shape("split", format!("sizes {sizes:?} do not sum to {total}")));
        }
        let mut at = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, at, at + s)?);
            at += s;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x).clone().reshape(dims.to_vec())?;
        let ng = self.ng(x);
        self.push("reshape", t, Op::Reshape(x), ng)
    }

    /// Rows of the trailing-axis matrix view, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x);
        let (nr, n) = (t.rows(), t.last_dim());
        if rows.is_empty() || rows.iter().any(|&r| r >= nr) {
            return Err(DiffError::shape("gather_rows", format!("rows {rows:?} of {:?}", t.dims())));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let ng = self.ng(x);
        self.push("gather_rows", Tensor::new([rows.len(), n], out)?, Op::GatherRows { x, rows: rows.to_vec() }, ng)
    }

    /// Copy of `base` with `rows[i]` replaced by (or incremented by) `src` row `i`.
    pub fn scatter_rows(&mut self, base: Var, rows: &[usize], src: Var, additive: bool) -> Result<Var, DiffError> {
        let (bt, st) = (self.value(base), self.value(src));
        let n = bt.last_dim();
        if st.last_dim() != n || st.rows() != rows.len() || rows.iter().any(|&r| r >= bt.rows()) {
            return Err(DiffError::shape(
                "scatter_rows",
                format!("src {:?} into {:?} at {rows:?}", st.dims(), bt.dims()),
            ));
        }
        let mut seen = rows.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != rows.len() {
            return Err(DiffError::shape("scatter_rows", format!("duplicate rows {rows:?}")));
        }
        let mut t = bt.clone();
        for (i, &r) in rows.iter().enumerate() {
            let s = st.row(i).to_vec();
            let dst = t.row_mut(r);
            if additive {
                for (d, v) in dst.iter_mut().zip(s) {
                    *d = *d + v;
                }
            } else {
                dst.copy_from_slice(&s);
            }
        }
        let ng = self.ng(base) || self.ng(src);
        self.push("scatter_rows", t, Op::ScatterRows { base, src, rows: rows.to_vec(), additive }, ng)
    }

    /// `[B, T, h·dh] -> [B·h, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, DiffError> {
        let d = self.dims(x).to_vec();
        if d.len() != 3 || heads == 0 || !d[2].is_multiple_of(heads) {
            return Err(DiffError::shape("split_heads", format!("{d:?} into {heads} heads")));
        }
        let (b, t, dh) = (d[0], d[1], d[2] / heads);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let s = (bi * t + ti) * d[2] + h * dh;
                    let o = ((bi * heads + h) * t + ti) * dh;
                    out[o..o + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let ng = self.ng(x);
        self.push("split_heads", Tensor::new([b * heads, t, dh], out)?, Op::SplitHeads { x, heads }, ng)
    }

    /// `[B·h, T, dh] -> [B, T, h·dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var, DiffError> {
        let d = self.dims(x).to_vec();
        if d.len() != 3 || heads == 0 || !d[0].is_multiple_of(heads) {
            return Err(DiffError::shape("merge_heads", format!("{d:?} from {heads} heads")));
        }
        let (b, t, dh) = (d[0] / heads, d[1], d[2]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let s = ((bi * heads + h) * t + ti) * dh;
                    let o = (bi * t + ti) * heads * dh + h * dh;
                    out[o..o + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let ng = self.ng(x);
        self.push("merge_heads", Tensor::new([b, t, heads * dh], out)?, Op::MergeHeads { x, heads }, ng)
    }

    // ---------------------------------------------------------------------
    // attention pieces

    /// Softmax over the last axis after adding an optional additive mask.
    ///
    /// `x` is `[G, T, S]` (or `[T, S]`); `mask` is `[G / repeat, T, S]`, so
    /// matrix `g` of `x` uses mask matrix `g / repeat` (heads share the mask
    /// of their batch element).
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&Tensor<F>>, repeat: usize) -> Result<Var, DiffError> {
        let xt = self.value(x);
        let d = xt.dims().to_vec();
        if d.len() < 2 {
            return Err(DiffError::shape("softmax", format!("rank {} < 2", d.len())));
        }
        let (t, s) = (d[d.len() - 2], d[d.len() - 1]);
        let rows = xt.rows();
        let g = rows / t;
        if let Some(m) = mask {
            let md = m.dims();
            let ok = repeat > 0
                && g.is_multiple_of(repeat)
                && m.last_dim() == s
                && md.len() >= 2
                && md[md.len() - 2] == t
                && m.rows() == (g / repeat) * t;
            if !ok {
                return Err(DiffError::shape("softmax", format!("mask {md:?} (repeat {repeat}) vs logits {d:?}")));
            }
        }
        let mut out = xt.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * s..(r + 1) * s];
            if let Some(m) = mask {
                let mr = ((r / t) / repeat) * t + r % t;
                for (v, &b) in row.iter_mut().zip(m.row(mr)) {
                    *v = *v + b;
                }
            }
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            let inv = F::one() / z;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let ng = self.ng(x);
        self.push("softmax", Tensor::new(d, out)?, Op::Softmax { x }, ng)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        self.softmax_masked(x, None, 1)
    }

    /// Rotary rotation of consecutive pairs along the last axis.
    ///
    /// `x` is `[G, T, dh]`; `cos`/`sin` are `[T, dh/2]` row-major tables.
    pub fn rope(&mut self, x: Var, cos: Rc<Vec<F>>, sin: Rc<Vec<F>>) -> Result<Var, DiffError> {
        let d = self.dims(x).to_vec();
        let (t, dh) = (d[d.len() - 2], d[d.len() - 1]);
        if d.len() < 2 || dh % 2 != 0 || cos.len() != t * dh / 2 || sin.len() != cos.len() {
            return Err(DiffError::shape("rope", format!("{d:?} with table of {} entries", cos.len())));
        }
        let half = dh / 2;
        let mut out = self.value(x).data().to_vec();
        for (r, row) in out.chunks_mut(dh).enumerate() {
            let ti = r % t;
            for j in 0..half {
                let (c, s) = (cos[ti * half + j], sin[ti * half + j]);
                let (x0, x1) = (row[2 * j], row[2 * j + 1]);
                row[2 * j] = x0 * c - x1 * s;
                row[2 * j + 1] = x0 * s + x1 * c;
            }
        }
        let ng = self.ng(x);
        self.push("rope", Tensor::new(d, out)?, Op::Rope { x, cos, sin }, ng)
    }

    /// Row-wise RMS normalization over the last axis with optional gain.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: F) -> Result<Var, DiffError> {
        let xt = self.value(x);
        let n = xt.last_dim();
        if let Some(gv) = gain {
            if self.dims(gv) != [n] {
                return Err(DiffError::shape("rms_norm", format!("gain {:?} for rows of {n}", self.dims(gv))));
            }
        }
        let gvals = gain.map(|gv| self.value(gv).data().to_vec());
        let mut out = xt.data().to_vec();
        let mut inv_rms = Vec::with_capacity(xt.rows());
        for row in out.chunks_mut(n) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / F::of(n as f64);
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * inv;
                if let Some(g) = &gvals {
                    *v = *v * g[j];
                }
            }
        }
        let dims = xt.dims().to_vec();
        let ng = self.ng(x) || gain.is_some_and(|g| self.ng(g));
        self.push("rms_norm", Tensor::new(dims, out)?, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    /// `x[b, t, :] * s[b, :]` for `x: [B, T, n]`, `s: [B, n]`.
    pub fn mul_per_batch(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        self.per_batch("mul_per_batch", x, s, true)
    }

    /// `x[b, t, :] + s[b, :]` for `x: [B, T, n]`, `s: [B, n]`.
    pub fn add_per_batch(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        self.per_batch("add_per_batch", x, s, false)
    }

    fn per_batch(&mut self, name: &'static str, x: Var, s: Var, mul: bool) -> Result<Var, DiffError> {
        let (xd, sd) = (self.dims(x).to_vec(), self.dims(s).to_vec());
        if xd.len() != 3 || sd != [xd[0], xd[2]] {
            return Err(DiffError::shape(name, format!("{xd:?} with {sd:?}")));
        }
        let (t, n) = (xd[1], xd[2]);
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let srow = &sv[(r / t) * n..(r / t + 1) * n];
            for (v, &m) in row.iter_mut().zip(srow) {
                *v = if mul { *v * m } else { *v + m };
            }
        }
        let op = if mul { Op::MulPerBatch { x, s } } else { Op::AddPerBatch { x, s } };
        let ng = self.ng(x) || self.ng(s);
        self.push(name, Tensor::new(xd, out)?, op, ng)
    }

    /// Fixed linear mixing of tokens: `out[b] = W · x[b]` with `W: [R, N]`
    /// constant and `x: [B, N, d]`.
    pub fn mix_tokens(&mut self, x: Var, weights: Rc<Tensor<F>>) -> Result<Var, DiffError> {
        let xd = self.dims(x).to_vec();
        let wd = weights.dims().to_vec();
        if xd.len() != 3 || wd.len() != 2 || wd[1] != xd[1] {
            return Err(DiffError::shape("mix_tokens", format!("{wd:?} · {xd:?}")));
        }
        let (b, nn, d, r) = (xd[0], xd[1], xd[2], wd[0]);
        let mut out = vec![F::zero(); b * r * d];
        let xv = self.value(x).data();
        for bi in 0..b {
            F::gemm(
                r,
                nn,
                d,
                F::one(),
                weights.data(),
                (nn, 1),
                &xv[bi * nn * d..(bi + 1) * nn * d],
                (d, 1),
                F::zero(),
                &mut out[bi * r * d..(bi + 1) * r * d],
                (d, 1),
            );
        }
        let ng = self.ng(x);
        self.push("mix_tokens", Tensor::new([b, r, d], out)?, Op::MixTokens { x, weights }, ng)
    }

    // ---------------------------------------------------------------------
    // lookups, embeddings, reductions

    /// Rows of `table` selected by `ids`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(DiffError::shape("embedding", format!("table {:?}, {} ids", t.dims(), ids.len())));
        }
        let (v, d) = (t.dims()[0], t.dims()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(DiffError::shape("embedding", format!("id {bad} outside vocabulary of {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        self.push("embedding", Tensor::new([ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    /// Sinusoidal embedding of a `[B]` vector of times into `[B, dim]`
    /// (`cos` half then `sin` half, angle `t · scale · 10000^(-i/half)`).
    pub fn timestep_embedding(&mut self, t: Var, dim: usize, scale: F) -> Result<Var, DiffError> {
        let td = self.dims(t).to_vec();
        if td.len() != 1 || dim < 2 || !dim.is_multiple_of(2) {
            return Err(DiffError::shape("timestep_embedding", format!("t {td:?}, dim {dim}")));
        }
        let half = dim / 2;
        let mut out = Vec::with_capacity(td[0] * dim);
        for &tv in self.value(t).data() {
            let mut row = vec![F::zero(); dim];
            for i in 0..half {
                let a = tv * scale * timestep_freq::<F>(i, half);
                row[i] = a.cos();
                row[half + i] = a.sin();
            }
            out.extend(row);
        }
        let ng = self.ng(t);
        self.push("timestep_embedding", Tensor::new([td[0], dim], out)?, Op::TimestepEmbed { t, scale }, ng)
    }

    /// Mean squared error between `pred` and `target` (scalar output).
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, DiffError> {
        self.same_dims("mse", pred, target)?;
        let n = F::of(self.value(pred).numel() as f64);
        let s: F = self.value(pred).data().iter().zip(self.value(target).data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let ng = self.ng(pred) || self.ng(target);
        self.push("mse", Tensor::scalar(s / n), Op::Mse { pred, target }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        let ng = self.ng(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), ng)
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Reverse-mode adjoints of the scalar `loss` with respect to every node
    /// that requires gradient.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>, DiffError> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NotScalar { dims: self.dims(loss).to_vec() });
        }
        let n = self.nodes.len();
        let mut slots: Vec<Option<Vec<F>>> = vec![None; n];
        slots[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.backprop_node(i, &g, &mut slots);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(DiffError::NonFinite { op: "backward" });
            }
        }
        let dims = self.nodes.iter().map(|nd| nd.value.dims().to_vec()).collect();
        Ok(Grads { slots, dims })
    }

    fn acc<'s>(&self, slots: &'s mut [Option<Vec<F>>], v: Var) -> Option<&'s mut Vec<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(slots[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backprop_node(&self, i: usize, g: &[F], slots: &mut [Option<Vec<F>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ad, bd) = (self.dims(*a), self.dims(*b));
                let batched = bd.len() == 3;
                let (batch, m, k) = if batched { (ad[0], ad[1], ad[2]) } else { (1, self.value(*a).rows(), ad[ad.len() - 1]) };
                let n = out.last_dim();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(slots, *a) {
                    // dA = dC · Bᵀ ; B is [k,n] (or stored [n,k] when trans_b)
                    let bt_strides = if *trans_b { (k, 1) } else { (1, n) };
                    for gi in 0..batch {
                        let bo = if batched { gi * k * n } else { 0 };
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            &g[gi * m * n..(gi + 1) * m * n],
                            (n, 1),
                            &bv[bo..bo + k * n],
                            bt_strides,
                            F::one(),
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            (k, 1),
                        );
                    }
                }
                if let Some(gb) = self.acc(slots, *b) {
                    for gi in 0..batch {
                        let bo = if batched { gi * k * n } else { 0 };
                        let a_blk = &av[gi * m * k..(gi + 1) * m * k];
                        let g_blk = &g[gi * m * n..(gi + 1) * m * n];
                        if *trans_b {
                            // dB[n,k] = dCᵀ · A
                            F::gemm(n, m, k, F::one(), g_blk, (1, n), a_blk, (k, 1), F::one(), &mut gb[bo..bo + k * n], (k, 1));
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            F::gemm(k, m, n, F::one(), a_blk, (1, k), g_blk, (n, 1), F::one(), &mut gb[bo..bo + k * n], (n, 1));
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let d = out.dims();
                let r = d.len();
                let (m, n) = (d[r - 2], d[r - 1]);
                if let Some(gx) = self.acc(slots, *x) {
                    let batch = out.numel() / (m * n);
                    for b in 0..batch {
                        let o = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                gx[o + j * m + i] = gx[o + j * m + i] + g[o + i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(slots, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(slots, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(slots, *b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(slots, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + s * y;
                    }
                }
                if let Some(gb) = self.acc(slots, *b) {
                    for ((d, &s), &y) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + s * y;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.acc(slots, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(slots, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(slots, *x) {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d = *d + v * *s;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(slots, *x) {
                    add_into(gx, g);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(slots, *x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d = *d + s * tanh_gelu(v).1;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(out.dims(), *axis);
                let total = out.dims()[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let len = self.dims(p)[*axis] * inner;
                    if let Some(gp) = self.acc(slots, p) {
                        for o in 0..outer {
                            add_into(&mut gp[o * len..(o + 1) * len], &g[o * total + off..o * total + off + len]);
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xd = self.dims(*x);
                let (outer, inner) = outer_inner(xd, *axis);
                let len = out.dims()[*axis] * inner;
                let full = xd[*axis] * inner;
                if let Some(gx) = self.acc(slots, *x) {
                    for o in 0..outer {
                        let b = o * full + start * inner;
                        add_into(&mut gx[b..b + len], &g[o * len..(o + 1) * len]);
                    }
                }
            }
            Op::Softmax { x } => {
                let s = out.last_dim();
                let y = out.data();
                if let Some(gx) = self.acc(slots, *x) {
                    for ((gr, yr), dr) in g.chunks(s).zip(y.chunks(s)).zip(gx.chunks_mut(s)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gg), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + yy * (gg - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let n = out.last_dim();
                let xv = self.value(*x).data();
                let gvals = gain.map(|gv| self.value(gv).data().to_vec());
                if let Some(gg) = gain.and_then(|gv| self.acc(slots, gv)) {
                    for ((gr, xr), &inv) in g.chunks(n).zip(xv.chunks(n)).zip(inv_rms) {
                        for j in 0..n {
                            gg[j] = gg[j] + gr[j] * xr[j] * inv;
                        }
                    }
                }
                if let Some(gx) = self.acc(slots, *x) {
                    let nf = F::of(n as f64);
                    for (((gr, xr), &inv), dr) in g.chunks(n).zip(xv.chunks(n)).zip(inv_rms).zip(gx.chunks_mut(n)) {
                        let dyh: Vec<F> = match &gvals {
                            Some(gv) => gr.iter().zip(gv).map(|(&a, &b)| a * b).collect(),
                            None => gr.to_vec(),
                        };
                        let dot: F = dyh.iter().zip(xr).map(|(&a, &b)| a * b * inv).sum::<F>() / nf;
                        for j in 0..n {
                            let xh = xr[j] * inv;
                            dr[j] = dr[j] + (dyh[j] - xh * dot) * inv;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.acc(slots, *table) {
                    let d = out.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let n = F::of(out.numel().max(self.value(*pred).numel()) as f64);
                let (pv, tv) = (self.value(*pred).data(), self.value(*target).data());
                let c = F::of(2.0) * g[0] / n;
                if let Some(gp) = self.acc(slots, *pred) {
                    for ((d, &p), &t) in gp.iter_mut().zip(pv).zip(tv) {
                        *d = *d + c * (p - t);
                    }
                }
                if let Some(gt) = self.acc(slots, *target) {
                    for ((d, &p), &t) in gt.iter_mut().zip(pv).zip(tv) {
                        *d = *d - c * (p - t);
                    }
                }
            }
            Op::TimestepEmbed { t, scale } => {
                let dim = out.last_dim();
                let half = dim / 2;
                let tv = self.value(*t).data();
                if let Some(gt) = self.acc(slots, *t) {
                    for (b, &tt) in tv.iter().enumerate() {
                        let mut acc = F::zero();
                        for i in 0..half {
                            let f = *scale * timestep_freq::<F>(i, half);
                            let a = tt * f;
                            acc = acc - g[b * dim + i] * a.sin() * f + g[b * dim + half + i] * a.cos() * f;
                        }
                        gt[b] = gt[b] + acc;
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let n = out.last_dim();
                if let Some(gx) = self.acc(slots, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::ScatterRows { base, src, rows, additive } => {
                let n = out.last_dim();
                if let Some(gb) = self.acc(slots, *base) {
                    if *additive {
                        add_into(gb, g);
                    } else {
                        let mut gg = g.to_vec();
                        for &r in rows {
                            gg[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = F::zero());
                        }
                        add_into(gb, &gg);
                    }
                }
                if let Some(gs) = self.acc(slots, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gs[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let xd = self.dims(*x);
                let (b, t, dm) = (xd[0], xd[1], xd[2]);
                let dh = dm / heads;
                if let Some(gx) = self.acc(slots, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let s = (bi * t + ti) * dm + h * dh;
                                let o = ((bi * heads + h) * t + ti) * dh;
                                add_into(&mut gx[s..s + dh], &g[o..o + dh]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let od = out.dims();
                let (b, t, dm) = (od[0], od[1], od[2]);
                let dh = dm / heads;
                if let Some(gx) = self.acc(slots, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let s = ((bi * heads + h) * t + ti) * dh;
                                let o = (bi * t + ti) * dm + h * dh;
                                add_into(&mut gx[s..s + dh], &g[o..o + dh]);
                            }
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let d = out.dims();
                let (t, dh) = (d[d.len() - 2], d[d.len() - 1]);
                let half = dh / 2;
                if let Some(gx) = self.acc(slots, *x) {
                    for (r, (gr, dr)) in g.chunks(dh).zip(gx.chunks_mut(dh)).enumerate() {
                        let ti = r % t;
                        for j in 0..half {
                            let (c, s) = (cos[ti * half + j], sin[ti * half + j]);
                            let (g0, g1) = (gr[2 * j], gr[2 * j + 1]);
                            dr[2 * j] = dr[2 * j] + g0 * c + g1 * s;
                            dr[2 * j + 1] = dr[2 * j + 1] - g0 * s + g1 * c;
                        }
                    }
                }
            }
            Op::MulPerBatch { x, s } => {
                let d = out.dims();
                let (t, n) = (d[1], d[2]);
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if let Some(gx) = self.acc(slots, *x) {
                    for (r, (gr, dr)) in g.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                        let srow = &sv[(r / t) * n..(r / t + 1) * n];
                        for j in 0..n {
                            dr[j] = dr[j] + gr[j] * srow[j];
                        }
                    }
                }
                if let Some(gs) = self.acc(slots, *s) {
                    for (r, (gr, xr)) in g.chunks(n).zip(xv.chunks(n)).enumerate() {
                        let drow = &mut gs[(r / t) * n..(r / t + 1) * n];
                        for j in 0..n {
                            drow[j] = drow[j] + gr[j] * xr[j];
                        }
                    }
                }
            }
            Op::AddPerBatch { x, s } => {
                let d = out.dims();
                let (t, n) = (d[1], d[2]);
                if let Some(gx) = self.acc(slots, *x) {
                    add_into(gx, g);
                }
                if let Some(gs) = self.acc(slots, *s) {
                    for (r, gr) in g.chunks(n).enumerate() {
                        add_into(&mut gs[(r / t) * n..(r / t + 1) * n], gr);
                    }
                }
            }
            Op::MixTokens { x, weights } => {
                let xd = self.dims(*x);
                let (b, nn, d) = (xd[0], xd[1], xd[2]);
                let r = weights.dims()[0];
                if let Some(gx) = self.acc(slots, *x) {
                    for bi in 0..b {
                        F::gemm(
                            nn,
                            r,
                            d,
                            F::one(),
                            weights.data(),
                            (1, nn),
                            &g[bi * r * d..(bi + 1) * r * d],
                            (d, 1),
                            F::one(),
                            &mut gx[bi * nn * d..(bi + 1) * nn * d],
                            (d, 1),
                        );
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(slots, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                let n = F::of(self.value(*x).numel() as f64);
                if let Some(gx) = self.acc(slots, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0] / n);
                }
            }
        }
    }
}

fn timestep_freq<F: Real>(i: usize, half: usize) -> F {
    F::of((-(10000f64).ln() * i as f64 / half as f64).exp())
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
