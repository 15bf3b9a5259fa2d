//! Reverse-mode automatic differentiation over whole-tensor primitives.
//!
//! Every op appends one node to the tape; node ids are therefore already in
//! topological order, and `backward` is a single reverse sweep. Parameters are
//! borrowed into the tape without copying.

use std::borrow::Cow;

use super::kernels::{col2im, im2col, rms_norm_forward, softmax_in_place};
use super::real::{gemm, View};
use super::{Real, Tensor};
use crate::error::{shape_err, Result, TiltError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inclusive rectangle of feature-map cells (rows `r0..=r1`, cols `c0..=c1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst { x: Var, factors: Vec<T> },
    Scale(Var, T),
    Relu(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<T> },
    Softmax(Var),
    Attention(Box<AttentionCache<T>>),
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Var, k: usize, cols: Vec<T> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    UpConv2 { x: Var, w: Var, b: Var },
    Concat(Var, Var),
    RoiPool { fm: Var, argmax: Vec<usize> },
    GatherBias { table: Var, idx: Vec<usize> },
    MaskRows { x: Var, keep: Vec<bool> },
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    heads: usize,
    scale: T,
    probs: Vec<T>,
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive ops.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn require_rank(t: &Tensor<impl Real>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return shape_err(format!("{what}: expected rank {rank}, got shape {:?}", t.shape()));
    }
    Ok(())
}

fn mat_view(trans: bool, stored_cols: usize) -> View {
    if trans {
        View::cols(0, stored_cols)
    } else {
        View::rows(0, stored_cols)
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Owned trainable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn val(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// `op(a) · op(b)` for rank-2 operands, with optional transposes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        require_rank(av, 2, "matmul lhs")?;
        require_rank(bv, 2, "matmul rhs")?;
        let (ar, ac) = (av.shape()[0], av.shape()[1]);
        let (br, bc) = (bv.shape()[0], bv.shape()[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                av.shape(),
                if ta { "ᵀ" } else { "" },
                bv.shape(),
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            mat_view(ta, ac),
            bv.data(),
            mat_view(tb, bc),
            T::zero(),
            &mut out,
            View::rows(0, n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.val(a).shape(),
                self.val(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds vector `bias[d]` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.val(x).dims2()?;
        if self.val(bias).len() != d {
            return shape_err(format!(
                "add_row: bias of {} entries for rows of {d}",
                self.val(bias).len()
            ));
        }
        let bv = self.val(bias).data();
        let data = self
            .val(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bv[i % d])
            .collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with fixed factors (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.val(x).len() {
            return shape_err("mul_const: factor count differs from element count");
        }
        let data = self
            .val(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(v, f)| *v * *f)
            .collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::MulConst { x, factors }, &[x]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.val(x).data().iter().map(|v| *v * s).collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data).expect("same length");
        self.push_op(value, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.val(x).data().iter().map(|v| v.max(T::zero())).collect();
        let value = Tensor::new(self.val(x).shape().to_vec(), data).expect("same length");
        self.push_op(value, Op::Relu(x), &[x])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (value, inv) = rms_norm_forward(self.val(x), self.val(gain))?;
        Ok(self.push_op(value, Op::RmsNorm { x, gain, inv }, &[x, gain]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = super::kernels::softmax_rows(self.val(x))?;
        Ok(self.push_op(value, Op::Softmax(x), &[x]))
    }

    /// Multi-head attention `softmax(q kᵀ · scale + bias) v`, computed per head.
    ///
    /// `q` is `[n, d]`, `k` and `v` are `[m, d]`, `bias` is `[heads, n, m]`.
    /// With `causal`, query `i` only sees keys `j <= i`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        scale: T,
        causal: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        require_rank(qv, 2, "attention q")?;
        require_rank(kv, 2, "attention k")?;
        require_rank(vv, 2, "attention v")?;
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        let m = kv.shape()[0];
        if kv.shape()[1] != d || vv.shape() != kv.shape() {
            return shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("attention: width {d} not divisible by {heads} heads"));
        }
        if causal && n != m {
            return shape_err("attention: causal mask needs square scores");
        }
        if let Some(b) = bias {
            if self.val(b).shape() != [heads, n, m] {
                return shape_err(format!(
                    "attention bias {:?}, expected {:?}",
                    self.val(b).shape(),
                    [heads, n, m]
                ));
            }
        }
        let dh = d / heads;
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                n,
                dh,
                m,
                scale,
                qv.data(),
                View::rows(h * dh, d),
                kv.data(),
                View::cols(h * dh, d),
                T::zero(),
                p,
                View::rows(0, m),
            );
            if let Some(b) = bias {
                let bh = &self.val(b).data()[h * n * m..(h + 1) * n * m];
                p.iter_mut().zip(bh).for_each(|(x, y)| *x += *y);
            }
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                if causal {
                    row[i + 1..].iter_mut().for_each(|x| *x = T::neg_infinity());
                }
                softmax_in_place(row);
            }
            gemm(
                n,
                m,
                dh,
                T::one(),
                p,
                View::rows(0, m),
                vv.data(),
                View::rows(h * dh, d),
                T::zero(),
                &mut out,
                View::rows(h * dh, d),
            );
        }
        let value = Tensor::new(vec![n, d], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let cache = AttentionCache {
            q,
            k,
            v,
            bias,
            heads,
            scale,
            probs,
        };
        Ok(self.push_op(value, Op::Attention(Box::new(cache)), &inputs))
    }

    /// Attention probabilities `[heads, n, m]` cached by an attention node.
    pub fn attention_probs(&self, var: Var) -> Option<&[T]> {
        match &self.nodes[var.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// Gathers rows of `table[vocab, d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.val(table);
        require_rank(tv, 2, "embedding table")?;
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return shape_err(format!("token id {id} outside vocabulary of {vocab}"));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_op(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean token cross-entropy of `logits[t, vocab]` against `targets[t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.val(logits);
        require_rank(lv, 2, "cross_entropy logits")?;
        let (t, vocab) = (lv.shape()[0], lv.shape()[1]);
        if t == 0 || t != targets.len() {
            return shape_err(format!("cross_entropy: {t} rows for {} targets", targets.len()));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (i, &y) in targets.iter().enumerate() {
            if y >= vocab {
                return shape_err(format!("target id {y} outside vocabulary of {vocab}"));
            }
            let row = &lv.data()[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|z| (*z - max).exp()).sum::<T>().ln();
            total += lse - row[y];
            softmax_in_place(&mut probs[i * vocab..(i + 1) * vocab]);
        }
        let value = Tensor::scalar(total / T::lit(t as f64));
        Ok(self.push_op(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).sum());
        self.push_op(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.val(x).len().max(1) as f64);
        let value = Tensor::scalar(self.val(x).sum() / n);
        self.push_op(value, Op::Mean(x), &[x])
    }

    /// Stride-1 convolution with zero padding `k/2`.
    /// `x[ci, h, w]`, `w[co, ci, k, k]`, `b[co]` → `[co, h, w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        require_rank(xv, 3, "conv2d input")?;
        require_rank(wv, 4, "conv2d kernel")?;
        let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, wci, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if wci != ci || k != k2 || k % 2 == 0 || bv.len() != co {
            return shape_err(format!(
                "conv2d: input {:?}, kernel {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let hw = h * wd;
        let ckk = ci * k * k;
        let cols = im2col(xv.data(), ci, h, wd, k);
        let mut out = vec![T::zero(); co * hw];
        for (o, chunk) in out.chunks_mut(hw.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bv.data()[o]);
        }
        gemm(
            co,
            ckk,
            hw,
            T::one(),
            wv.data(),
            View::rows(0, ckk),
            &cols,
            View::rows(0, hw),
            T::one(),
            &mut out,
            View::rows(0, hw),
        );
        let value = Tensor::new(vec![co, h, wd], out)?;
        Ok(self.push_op(value, Op::Conv2d { x, w, b, k, cols }, &[x, w, b]))
    }

    /// 2×2 max pooling with stride 2 over `[c, h, w]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        require_rank(xv, 3, "max_pool2 input")?;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = ch * h * w + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * y + dy) * w + 2 * xo + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push_op(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// 2×2 stride-2 transposed convolution.
    /// `x[ci, h, w]`, `w[ci, co, 2, 2]`, `b[co]` → `[co, 2h, 2w]`.
    pub fn up_conv2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        require_rank(xv, 3, "up_conv2 input")?;
        require_rank(wv, 4, "up_conv2 kernel")?;
        let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let co = wv.shape()[1];
        if wv.shape() != [ci, co, 2, 2] || bv.len() != co {
            return shape_err(format!(
                "up_conv2: input {:?}, kernel {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let hw = h * wd;
        let mut y = vec![T::zero(); co * 4 * hw];
        gemm(
            co * 4,
            ci,
            hw,
            T::one(),
            wv.data(),
            View::cols(0, co * 4),
            xv.data(),
            View::rows(0, hw),
            T::zero(),
            &mut y,
            View::rows(0, hw),
        );
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![T::zero(); co * oh * ow];
        for o in 0..co {
            let bias = bv.data()[o];
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                let src = &y[(o * 4 + q) * hw..(o * 4 + q + 1) * hw];
                for yy in 0..h {
                    for xx in 0..wd {
                        out[o * oh * ow + (2 * yy + dy) * ow + 2 * xx + dx] =
                            src[yy * wd + xx] + bias;
                    }
                }
            }
        }
        let value = Tensor::new(vec![co, oh, ow], out)?;
        Ok(self.push_op(value, Op::UpConv2 { x, w, b }, &[x, w, b]))
    }

    /// Channel concatenation of `[c1, h, w]` and `[c2, h, w]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        require_rank(av, 3, "concat lhs")?;
        require_rank(bv, 3, "concat rhs")?;
        if av.shape()[1..] != bv.shape()[1..] {
            return shape_err(format!("concat: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let shape = vec![av.shape()[0] + bv.shape()[0], av.shape()[1], av.shape()[2]];
        let value = Tensor::new(shape, data)?;
        Ok(self.push_op(value, Op::Concat(a, b), &[a, b]))
    }

    /// Channelwise max of `fm[c, h, w]` over each rectangle; `None` rows are zero.
    pub fn roi_pool(&mut self, fm: Var, rects: &[Option<CellRect>]) -> Result<Var> {
        let fv = self.val(fm);
        require_rank(fv, 3, "roi_pool feature map")?;
        let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        let src = fv.data();
        let mut out = vec![T::zero(); rects.len() * c];
        let mut argmax = vec![usize::MAX; rects.len() * c];
        for (i, rect) in rects.iter().enumerate() {
            let Some(r) = rect else { continue };
            if r.r0 > r.r1 || r.c0 > r.c1 || r.r1 >= h || r.c1 >= w {
                return shape_err(format!("roi {r:?} outside {h}x{w} feature grid"));
            }
            for ch in 0..c {
                let mut best = ch * h * w + r.r0 * w + r.c0;
                for y in r.r0..=r.r1 {
                    for x in r.c0..=r.c1 {
                        let idx = ch * h * w + y * w + x;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out[i * c + ch] = src[best];
                argmax[i * c + ch] = best;
            }
        }
        let value = Tensor::new(vec![rects.len(), c], out)?;
        Ok(self.push_op(value, Op::RoiPool { fm, argmax }, &[fm]))
    }

    /// `out[h, i, j] = table[idx[i*m + j], h]` for `table[buckets, heads]`.
    pub fn gather_bias(&mut self, table: Var, idx: Vec<usize>, n: usize, m: usize) -> Result<Var> {
        let tv = self.val(table);
        require_rank(tv, 2, "bias table")?;
        let (buckets, heads) = (tv.shape()[0], tv.shape()[1]);
        if idx.len() != n * m {
            return shape_err(format!("gather_bias: {} indices for {n}x{m}", idx.len()));
        }
        if let Some(bad) = idx.iter().find(|&&b| b >= buckets) {
            return shape_err(format!("bucket {bad} outside table of {buckets}"));
        }
        let mut out = vec![T::zero(); heads * n * m];
        for (p, &b) in idx.iter().enumerate() {
            for h in 0..heads {
                out[h * n * m + p] = tv.data()[b * heads + h];
            }
        }
        let value = Tensor::new(vec![heads, n, m], out)?;
        Ok(self.push_op(value, Op::GatherBias { table, idx }, &[table]))
    }

    /// Zeroes the rows of `x[n, d]` whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (n, d) = self.val(x).dims2()?;
        if keep.len() != n {
            return shape_err(format!("mask_rows: {} flags for {n} rows", keep.len()));
        }
        let mut data = self.val(x).data().to_vec();
        for (i, k) in keep.iter().enumerate() {
            if !k {
                data[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss).len() != 1 {
            return Err(TiltError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.val(loss).shape().to_vec(),
            vec![T::one()],
        )?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], var: Var, data: Vec<T>) {
        if !self.needs(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.data_mut().iter_mut().zip(data).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.val(var).shape().to_vec(), data).expect("grad shape"),
                )
            }
        }
    }

    fn backward_node(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (self.val(a), self.val(b));
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                if self.needs(a) {
                    let mut da = vec![T::zero(); ar * ac];
                    if ta {
                        // dA[k,m] = op(B) · dCᵀ
                        gemm(
                            k,
                            n,
                            m,
                            T::one(),
                            bv.data(),
                            mat_view(tb, bc),
                            gd,
                            View::cols(0, n),
                            T::zero(),
                            &mut da,
                            View::rows(0, m),
                        );
                    } else {
                        // dA[m,k] = dC · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gd,
                            View::rows(0, n),
                            bv.data(),
                            mat_view(!tb, bc),
                            T::zero(),
                            &mut da,
                            View::rows(0, k),
                        );
                    }
                    self.acc(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); br * bc];
                    if tb {
                        // dB[n,k] = dCᵀ · op(A)
                        gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gd,
                            View::cols(0, n),
                            av.data(),
                            mat_view(ta, ac),
                            T::zero(),
                            &mut db,
                            View::rows(0, k),
                        );
                    } else {
                        // dB[k,n] = op(A)ᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.data(),
                            mat_view(!ta, ac),
                            gd,
                            View::rows(0, n),
                            T::zero(),
                            &mut db,
                            View::rows(0, n),
                        );
                    }
                    self.acc(grads, b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, gd.to_vec());
                let d = self.val(*bias).len();
                let mut db = vec![T::zero(); d];
                for (i, v) in gd.iter().enumerate() {
                    db[i % d] += *v;
                }
                self.acc(grads, *bias, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    self.acc(grads, *a, gd.iter().zip(bv).map(|(g, y)| *g * *y).collect());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, gd.iter().zip(av).map(|(g, x)| *g * *x).collect());
                }
            }
            Op::MulConst { x, factors } => {
                self.acc(grads, *x, gd.iter().zip(factors).map(|(g, f)| *g * *f).collect());
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, gd.iter().map(|g| *g * *s).collect());
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                self.acc(
                    grads,
                    *x,
                    gd.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                        .collect(),
                );
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = self.val(*x);
                let gv = self.val(*gain).data();
                let (rows, d) = xv.dims2()?;
                let dn = T::lit(d as f64);
                let mut dx = vec![T::zero(); rows * d];
                let mut dg = vec![T::zero(); d];
                for r in 0..rows {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let s = inv[r];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += gr[j] * gv[j] * xr[j];
                        dg[j] += gr[j] * xr[j] * s;
                    }
                    let coef = s * s * s * dot / dn;
                    for j in 0..d {
                        dx[r * d + j] = s * gr[j] * gv[j] - xr[j] * coef;
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dg);
            }
            Op::Softmax(x) => {
                let (rows, cols) = out.dims2()?;
                let p = out.data();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: T = pr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Attention(c) => self.backward_attention(c, gd, grads),
            Op::Embed { table, ids } => {
                let tv = self.val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[row * d + j];
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.val(*logits).shape()[1];
                let scale = gd[0] / T::lit(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (i, &y) in targets.iter().enumerate() {
                    dl[i * vocab + y] -= scale;
                }
                self.acc(grads, *logits, dl);
            }
            Op::Sum(x) => {
                self.acc(grads, *x, vec![gd[0]; self.val(*x).len()]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                self.acc(grads, *x, vec![gd[0] / T::lit(n.max(1) as f64); n]);
            }
            Op::Conv2d { x, w, b, k, cols } => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let co = wv.shape()[0];
                let hw = h * wd;
                let ckk = ci * k * k;
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); co * ckk];
                    gemm(
                        co,
                        hw,
                        ckk,
                        T::one(),
                        gd,
                        View::rows(0, hw),
                        cols,
                        View::cols(0, hw),
                        T::zero(),
                        &mut dw,
                        View::rows(0, ckk),
                    );
                    self.acc(grads, *w, dw);
                }
                if self.needs(*b) {
                    let db = (0..co).map(|o| gd[o * hw..(o + 1) * hw].iter().copied().sum()).collect();
                    self.acc(grads, *b, db);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    gemm(
                        ckk,
                        co,
                        hw,
                        T::one(),
                        wv.data(),
                        View::cols(0, ckk),
                        gd,
                        View::rows(0, hw),
                        T::zero(),
                        &mut dcols,
                        View::rows(0, hw),
                    );
                    self.acc(grads, *x, col2im(&dcols, ci, h, wd, *k));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                self.acc(grads, *x, dx);
            }
            Op::UpConv2 { x, w, b } => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                let (ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let co = wv.shape()[1];
                let hw = h * wd;
                let (oh, ow) = (2 * h, 2 * wd);
                let mut dy = vec![T::zero(); co * 4 * hw];
                let mut db = vec![T::zero(); co];
                for o in 0..co {
                    for q in 0..4 {
                        let (ddy, ddx) = (q / 2, q % 2);
                        for yy in 0..h {
                            for xx in 0..wd {
                                let v = gd[o * oh * ow + (2 * yy + ddy) * ow + 2 * xx + ddx];
                                dy[(o * 4 + q) * hw + yy * wd + xx] = v;
                                db[o] += v;
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); ci * hw];
                    gemm(
                        ci,
                        co * 4,
                        hw,
                        T::one(),
                        wv.data(),
                        View::rows(0, co * 4),
                        &dy,
                        View::rows(0, hw),
                        T::zero(),
                        &mut dx,
                        View::rows(0, hw),
                    );
                    self.acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); ci * co * 4];
                    gemm(
                        ci,
                        hw,
                        co * 4,
                        T::one(),
                        xv.data(),
                        View::rows(0, hw),
                        &dy,
                        View::cols(0, hw),
                        T::zero(),
                        &mut dw,
                        View::rows(0, co * 4),
                    );
                    self.acc(grads, *w, dw);
                }
                self.acc(grads, *b, db);
            }
            Op::Concat(a, b) => {
                let na = self.val(*a).len();
                self.acc(grads, *a, gd[..na].to_vec());
                self.acc(grads, *b, gd[na..].to_vec());
            }
            Op::RoiPool { fm, argmax } => {
                let mut dfm = vec![T::zero(); self.val(*fm).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        dfm[src] += gd[o];
                    }
                }
                self.acc(grads, *fm, dfm);
            }
            Op::GatherBias { table, idx } => {
                let tv = self.val(*table);
                let heads = tv.shape()[1];
                let nm = idx.len();
                let mut dt = vec![T::zero(); tv.len()];
                for (p, &bucket) in idx.iter().enumerate() {
                    for h in 0..heads {
                        dt[bucket * heads + h] += gd[h * nm + p];
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::MaskRows { x, keep } => {
                let d = gd.len() / keep.len().max(1);
                let mut dx = gd.to_vec();
                for (i, k) in keep.iter().enumerate() {
                    if !k {
                        dx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                self.acc(grads, *x, dx);
            }
        }
        Ok(())
    }

    fn backward_attention(
        &self,
        c: &AttentionCache<T>,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.val(c.q), self.val(c.k), self.val(c.v));
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        let m = kv.shape()[0];
        let heads = c.heads;
        let dh = d / heads;
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); m * d];
        let mut dv = vec![T::zero(); m * d];
        let mut dbias = vec![T::zero(); if c.bias.is_some() { heads * n * m } else { 0 }];
        let mut ds = vec![T::zero(); n * m];
        for h in 0..heads {
            let p = &c.probs[h * n * m..(h + 1) * n * m];
            // dP = dO_h · v_hᵀ
            gemm(
                n,
                dh,
                m,
                T::one(),
                gd,
                View::rows(h * dh, d),
                vv.data(),
                View::cols(h * dh, d),
                T::zero(),
                &mut ds,
                View::rows(0, m),
            );
            // dV_h = Pᵀ · dO_h
            gemm(
                m,
                n,
                dh,
                T::one(),
                p,
                View::cols(0, m),
                gd,
                View::rows(h * dh, d),
                T::zero(),
                &mut dv,
                View::rows(h * dh, d),
            );
            for i in 0..n {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut ds[i * m..(i + 1) * m];
                let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                for j in 0..m {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            if c.bias.is_some() {
                dbias[h * n * m..(h + 1) * n * m].copy_from_slice(&ds);
            }
            gemm(
                n,
                m,
                dh,
                c.scale,
                &ds,
                View::rows(0, m),
                kv.data(),
                View::rows(h * dh, d),
                T::zero(),
                &mut dq,
                View::rows(h * dh, d),
            );
            gemm(
                m,
                n,
                dh,
                c.scale,
                &ds,
                View::cols(0, m),
                qv.data(),
                View::rows(h * dh, d),
                T::zero(),
                &mut dk,
                View::rows(h * dh, d),
            );
        }
        self.acc(grads, c.q, dq);
        self.acc(grads, c.k, dk);
        self.acc(grads, c.v, dv);
        if let Some(b) = c.bias {
            self.acc(grads, b, dbias);
        }
    }
}
