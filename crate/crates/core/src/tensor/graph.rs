use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse form of a boolean attention mask: for every query row, the key
/// columns it may attend to, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRows {
    rows: Vec<Vec<u32>>,
    offsets: Vec<usize>,
    tiles: Vec<Tile>,
}

/// Consecutive query rows `r0..r1` whose keys all fall in `c0..c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Tile {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

const TILE_ROWS: usize = 64;

impl MaskRows {
    pub fn new(rows: Vec<Vec<u32>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut acc = 0;
        for r in &rows {
            offsets.push(acc);
            acc += r.len();
        }
        offsets.push(acc);
        let tiles = Self::tiles_for(&rows);
        Self { rows, offsets, tiles }
    }

    fn tiles_for(rows: &[Vec<u32>]) -> Vec<Tile> {
        let mut tiles: Vec<Tile> = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            let (Some(&lo), Some(&hi)) = (r.first(), r.last()) else {
                continue;
            };
            let (lo, hi) = (lo as usize, hi as usize + 1);
            match tiles.last_mut() {
                Some(t) if t.r1 == i && t.c0 == lo && t.r1 - t.r0 < TILE_ROWS => {
                    t.r1 += 1;
                    t.c1 = t.c1.max(hi);
                }
                _ => tiles.push(Tile {
                    r0: i,
                    r1: i + 1,
                    c0: lo,
                    c1: hi,
                }),
            }
        }
        tiles
    }

    fn widest_tile(&self) -> (usize, usize) {
        self.tiles
            .iter()
            .fold((0, 0), |(r, w), t| (r.max(t.r1 - t.r0), w.max(t.c1 - t.c0)))
    }

    /// From a row-major `t×t` boolean matrix.
    pub fn from_dense(t: usize, dense: &[bool]) -> Self {
        assert_eq!(dense.len(), t * t);
        let rows = (0..t)
            .map(|i| {
                (0..t)
                    .filter(|&j| dense[i * t + j])
                    .map(|j| j as u32)
                    .collect()
            })
            .collect();
        Self::new(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    fn nnz(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    EmbedSum(Vec<(Var, Vec<Option<usize>>)>),
    Gelu {
        a: Var,
        th: Vec<T>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<MaskRows>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape. Inputs of a node always precede it, so reverse
/// insertion order is a valid topological order for backward.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    detached: Detached<T>,
}

/// What [`Graph::detach`] does with the values it cuts.
#[derive(Debug, Default)]
enum Detached<T> {
    #[default]
    Live,
    Record(Vec<Tensor<T>>),
    Replay(std::vec::IntoIter<Tensor<T>>),
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Attention probabilities of one recorded attention op.
pub struct AttentionProbs<'g, T> {
    mask: &'g MaskRows,
    heads: usize,
    probs: &'g [T],
}

impl<T: Scalar> AttentionProbs<'_, T> {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Dense `t×t` row-major matrix for one head (zeros where masked).
    pub fn dense(&self, head: usize) -> Vec<T> {
        let t = self.mask.len();
        let base = head * self.mask.nnz();
        let mut out = vec![T::zero(); t * t];
        for i in 0..t {
            let off = base + self.mask.offsets[i];
            for (jj, &j) in self.mask.row(i).iter().enumerate() {
                out[i * t + j as usize] = self.probs[off + jj];
            }
        }
        out
    }

    pub fn mean_over_heads(&self) -> Vec<T> {
        let t = self.mask.len();
        let mut acc = vec![T::zero(); t * t];
        for h in 0..self.heads {
            for (a, p) in acc.iter_mut().zip(self.dense(h)) {
                *a += p;
            }
        }
        let inv = T::one() / T::of(self.heads as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn tanh_exp<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            detached: Detached::Live,
        }
    }

    /// A graph that never tracks gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Same value, cut from the tape.
    ///
    /// While replaying, the value recorded at the same call index is used
    /// instead, so stop-gradient terms stay fixed under perturbation.
    pub fn detach(&mut self, v: Var) -> Var {
        let live = self.nodes[v.0].value.clone();
        let value = match &mut self.detached {
            Detached::Live => live,
            Detached::Record(seen) => {
                seen.push(live.clone());
                live
            }
            Detached::Replay(queue) => queue
                .next()
                .filter(|t| t.shape() == live.shape())
                .expect("replayed detach values do not match this graph"),
        };
        self.constant(value)
    }

    /// Starts recording the values cut by [`Graph::detach`].
    pub fn record_detached(&mut self) {
        self.detached = Detached::Record(Vec::new());
    }

    /// Values recorded since [`Graph::record_detached`], in call order.
    pub fn take_detached(&mut self) -> Vec<Tensor<T>> {
        match std::mem::take(&mut self.detached) {
            Detached::Record(v) => v,
            _ => Vec::new(),
        }
    }

    /// Makes subsequent [`Graph::detach`] calls return `values` in order.
    pub fn replay_detached(&mut self, values: Vec<Tensor<T>>) {
        self.detached = Detached::Replay(values.into_iter());
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_, T>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                heads, mask, probs, ..
            } => Some(AttentionProbs {
                mask,
                heads: *heads,
                probs,
            }),
            _ => None,
        }
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `a[i, :] + bias` for every row `i`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        let n = *sa.last().unwrap_or(&0);
        if sa.len() != 2 || sb.iter().product::<usize>() != n {
            return Err(shape_err("add_row", &sa, &sb));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a·bᵀ` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            out.data_mut(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(shape_err("transpose", &sa, &[]));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row `i` of the output is the sum over sources of `table[idx[i]]`
    /// for every source whose index list has an entry at `i`.
    pub fn embed_sum(
        &mut self,
        rows: usize,
        sources: Vec<(Var, Vec<Option<usize>>)>,
    ) -> Result<Var> {
        let cols = match sources.first() {
            Some((v, _)) => self.value(*v).cols(),
            None => return Err(Error::Layout("embed_sum without sources".into())),
        };
        let mut out = Tensor::zeros(&[rows, cols]);
        for (table, idx) in &sources {
            let t = self.value(*table);
            if t.cols() != cols || idx.len() != rows {
                return Err(shape_err("embed_sum", &[rows, cols], t.shape()));
            }
            for (i, ix) in idx.iter().enumerate() {
                if let Some(r) = *ix {
                    if r >= t.rows() {
                        return Err(Error::Index {
                            op: "embed_sum",
                            index: r,
                            size: t.rows(),
                        });
                    }
                    let src = t.row(r);
                    for (o, &s) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
        let rg = sources.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(out, Op::EmbedSum(sources), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(GELU_C);
        let k = T::of(GELU_A);
        let half = T::of(0.5);
        let ta = self.value(a);
        let th: Vec<T> = ta.data().iter().map(|&x| tanh_exp(c * (x + k * x * x * x))).collect();
        let data = ta.data().iter().zip(&th).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        let op = if rg { Op::Gelu { a, th } } else { Op::Leaf };
        self.push(out, op, rg)
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let eps = T::of(eps);
        let inv_n = T::one() / T::of(n as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / n.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = if rg {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, op, rg))
    }

    /// Multi-head scaled dot-product attention over `[t, d]` projections.
    /// Keys outside `mask.row(i)` are excluded from row `i`'s softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Rc<MaskRows>,
        heads: usize,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(shape_err("attention", &sq, self.shape(k)));
        }
        let (t, d) = (sq[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention heads", &sq, &[heads]));
        }
        if mask.len() != t {
            return Err(shape_err("attention mask", &sq, &[mask.len(), mask.len()]));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let nnz = mask.nnz();
        let mut probs = vec![T::zero(); heads * nnz];
        let mut out = vec![T::zero(); t * d];
        let (max_r, max_w) = mask.widest_tile();
        let mut scores = vec![T::zero(); max_r * max_w];
        let mut tmp = vec![T::zero(); max_r * dh];
        let (di, one) = (d as isize, 1isize);
        for h in 0..heads {
            let hs = h * dh;
            for tile in &mask.tiles {
                let (r, w) = (tile.r1 - tile.r0, tile.c1 - tile.c0);
                let s = &mut scores[..r * w];
                let qa = &qd[tile.r0 * d + hs..];
                T::gemm(r, dh, w, qa, di, one, &kd[tile.c0 * d + hs..], one, di, T::zero(), s);
                for (ii, srow) in s.chunks_mut(w).enumerate() {
                    let i = tile.r0 + ii;
                    let allowed = mask.row(i);
                    let off = h * nnz + mask.offsets[i];
                    let p = &mut probs[off..off + allowed.len()];
                    for (pj, &j) in p.iter_mut().zip(allowed) {
                        *pj = srow[j as usize - tile.c0] * scale;
                    }
                    softmax_in_place(p);
                    srow.iter_mut().for_each(|x| *x = T::zero());
                    for (&pj, &j) in p.iter().zip(allowed) {
                        srow[j as usize - tile.c0] = pj;
                    }
                }
                let o = &mut tmp[..r * dh];
                T::gemm(r, w, dh, s, w as isize, one, &vd[tile.c0 * d + hs..], di, one, T::zero(), o);
                for (ii, orow) in o.chunks(dh).enumerate() {
                    let at = (tile.r0 + ii) * d + hs;
                    out[at..at + dh].copy_from_slice(orow);
                }
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(shape_err("cross_entropy", &sl, &[targets.len()]));
        }
        let (rows, v) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: v,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        // Reductions accumulate in f64 so the mean does not depend on row order.
        let mut total = 0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let picked = row[t];
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            total += (z.ln() + max - picked).as_f64();
            let inv = T::one() / z;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let loss = if rows == 0 {
            T::zero()
        } else {
            T::of(total / rows as f64)
        };
        let rg = self.rg(logits);
        let op = if rg {
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Per-element mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len().max(1);
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| ((x - y) * (x - y)).as_f64())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(T::of(s / n as f64)),
            Op::Mse(a, b),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        let s = T::of(s);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum of scalar nodes; an empty list yields a zero constant.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar `loss`; clears gradients from any earlier pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gout: &[T]) {
        // Split borrows: node values are read-only during the reverse pass.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let grads = &mut self.grads;
        fn slot<'g, T: Scalar>(
            nodes: &[Node<T>],
            grads: &'g mut [Option<Vec<T>>],
            v: Var,
        ) -> Option<&'g mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    axpy(T::one(), gout, g);
                }
                if let Some(g) = slot(&nodes, grads, *b) {
                    axpy(T::one(), gout, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    axpy(T::one(), gout, g);
                }
                if let Some(g) = slot(&nodes, grads, *b) {
                    axpy(-T::one(), gout, g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(val(*b)) {
                        *gi += go * bv;
                    }
                }
                if let Some(g) = slot(&nodes, grads, *b) {
                    for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(val(*a)) {
                        *gi += go * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    axpy(*s, gout, g);
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    axpy(T::one(), gout, g);
                }
                if let Some(g) = slot(&nodes, grads, *bias) {
                    let n = g.len();
                    for row in gout.chunks(n) {
                        axpy(T::one(), row, g);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(g) = slot(&nodes, grads, *a) {
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, gout, n as isize, 1, val(*b), 1, n as isize, T::one(), g);
                }
                if let Some(g) = slot(&nodes, grads, *b) {
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, val(*a), 1, k as isize, gout, n as isize, 1, T::one(), g);
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if let Some(g) = slot(&nodes, grads, *a) {
                    // dA = dC · B
                    T::gemm(m, n, k, gout, n as isize, 1, val(*b), k as isize, 1, T::one(), g);
                }
                if let Some(g) = slot(&nodes, grads, *b) {
                    // dB = dCᵀ · A
                    T::gemm(n, m, k, gout, 1, n as isize, val(*a), k as isize, 1, T::one(), g);
                }
            }
            Op::Transpose(a) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    let s = nodes[a.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gout[c * m + r];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    let cols = nodes[a.0].value.cols();
                    let off = start * cols;
                    axpy(T::one(), gout, &mut g[off..off + gout.len()]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(g) = slot(&nodes, grads, *p) {
                        axpy(T::one(), &gout[off..off + len], g);
                    }
                    off += len;
                }
            }
            Op::EmbedSum(sources) => {
                let cols = node.value.cols();
                for (table, idx) in sources {
                    if let Some(g) = slot(&nodes, grads, *table) {
                        for (i, ix) in idx.iter().enumerate() {
                            if let Some(r) = *ix {
                                axpy(
                                    T::one(),
                                    &gout[i * cols..(i + 1) * cols],
                                    &mut g[r * cols..(r + 1) * cols],
                                );
                            }
                        }
                    }
                }
            }
            Op::Gelu { a, th } => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    let c = T::of(GELU_C);
                    let k = T::of(GELU_A);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    for (((gi, &go), &x), &th) in g.iter_mut().zip(gout).zip(val(*a)).zip(th) {
                        let d = half * (T::one() + th)
                            + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        *gi += go * d;
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    let n = node.value.cols();
                    for ((gr, gor), yr) in g
                        .chunks_mut(n)
                        .zip(gout.chunks(n))
                        .zip(node.value.data().chunks(n))
                    {
                        let s = dot(gor, yr);
                        for ((gi, &go), &y) in gr.iter_mut().zip(gor).zip(yr) {
                            *gi += y * (go - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gam = val(*gamma);
                if let Some(g) = slot(&nodes, grads, *x) {
                    let inv_n = T::one() / T::of(n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let go = &gout[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = go[j] * gam[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_n;
                        let m2 = dot(&dxhat, xh) * inv_n;
                        let gr = &mut g[r * n..(r + 1) * n];
                        for j in 0..n {
                            gr[j] += rs * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(g) = slot(&nodes, grads, *gamma) {
                    for (go, xh) in gout.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += go[j] * xh[j];
                        }
                    }
                }
                if let Some(g) = slot(&nodes, grads, *beta) {
                    for go in gout.chunks(n) {
                        axpy(T::one(), go, g);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let s = node.value.shape();
                let (t, d) = (s[0], s[1]);
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let nnz = mask.nnz();
                let mut dq = vec![T::zero(); t * d];
                let mut dk = vec![T::zero(); t * d];
                let mut dv = vec![T::zero(); t * d];
                let (max_r, max_w) = mask.widest_tile();
                let mut pd = vec![T::zero(); max_r * max_w];
                let mut dp = vec![T::zero(); max_r * max_w];
                let mut tmp = vec![T::zero(); max_r.max(max_w) * dh];
                let (di, one) = (d as isize, 1isize);
                let add_rows = |dst: &mut [T], row0: usize, hs: usize, src: &[T]| {
                    for (ii, srow) in src.chunks(dh).enumerate() {
                        let at = (row0 + ii) * d + hs;
                        axpy(T::one(), srow, &mut dst[at..at + dh]);
                    }
                };
                for h in 0..*heads {
                    let hs = h * dh;
                    for tile in &mask.tiles {
                        let (r, w) = (tile.r1 - tile.r0, tile.c1 - tile.c0);
                        let (wi, pd, dp) = (w as isize, &mut pd[..r * w], &mut dp[..r * w]);
                        let go = &gout[tile.r0 * d + hs..];
                        T::gemm(r, dh, w, go, di, one, &vd[tile.c0 * d + hs..], one, di, T::zero(), dp);
                        for (ii, (prow, dprow)) in pd.chunks_mut(w).zip(dp.chunks_mut(w)).enumerate() {
                            let i = tile.r0 + ii;
                            let allowed = mask.row(i);
                            let off = h * nnz + mask.offsets[i];
                            let p = &probs[off..off + allowed.len()];
                            let sdot = p
                                .iter()
                                .zip(allowed)
                                .fold(T::zero(), |acc, (&pj, &j)| acc + pj * dprow[j as usize - tile.c0]);
                            prow.iter_mut().for_each(|x| *x = T::zero());
                            for (&pj, &j) in p.iter().zip(allowed) {
                                let c = j as usize - tile.c0;
                                prow[c] = pj;
                                dprow[c] = pj * (dprow[c] - sdot) * scale;
                            }
                            for (c, x) in dprow.iter_mut().enumerate() {
                                if prow[c] == T::zero() {
                                    *x = T::zero();
                                }
                            }
                        }
                        let tv = &mut tmp[..w * dh];
                        T::gemm(w, r, dh, pd, one, wi, go, di, one, T::zero(), tv);
                        add_rows(&mut dv, tile.c0, hs, tv);
                        let tk = &mut tmp[..w * dh];
                        T::gemm(w, r, dh, dp, one, wi, &qd[tile.r0 * d + hs..], di, one, T::zero(), tk);
                        add_rows(&mut dk, tile.c0, hs, tk);
                        let tq = &mut tmp[..r * dh];
                        T::gemm(r, w, dh, dp, wi, one, &kd[tile.c0 * d + hs..], di, one, T::zero(), tq);
                        add_rows(&mut dq, tile.r0, hs, tq);
                    }
                }
                for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(g) = slot(&nodes, grads, *var) {
                        axpy(T::one(), &delta, g);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(g) = slot(&nodes, grads, *logits) {
                    let rows = targets.len();
                    let v = g.len() / rows.max(1);
                    let w = gout[0] / T::of(rows.max(1) as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = &mut g[r * v..(r + 1) * v];
                        axpy(w, &probs[r * v..(r + 1) * v], gr);
                        gr[t] -= w;
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = nodes[a.0].value.len().max(1);
                let w = T::of(2.0) * gout[0] / T::of(n as f64);
                let (av, bv) = (val(*a), val(*b));
                if let Some(g) = slot(&nodes, grads, *a) {
                    for ((gi, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                        *gi += w * (x - y);
                    }
                }
                if let Some(g) = slot(&nodes, grads, *b) {
                    for ((gi, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                        *gi -= w * (x - y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = slot(&nodes, grads, *a) {
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }
            }
        }
        self.nodes = nodes;
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}
