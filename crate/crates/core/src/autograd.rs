//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every value is a 2-D `Array2`; vectors are `m × 1` or `1 × n`, scalars
//! `1 × 1`. Ops are recorded in creation order, so the backward sweep simply
//! walks the node list in reverse.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

/// Floating point types the tape can run on: `f32` for training, `f64` for
/// gradient auditing.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logit offset applied to disallowed attention keys.
pub const MASK_LOGIT: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape information for the fused multi-head attention op: `batch`
/// sequences of `width` positions each, laid out as consecutive row blocks.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub batch: usize,
    pub width: usize,
    pub heads: usize,
    /// `batch × width × width`, `true` where query may attend to key.
    pub mask: Vec<bool>,
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Gather(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    Dropout(Var, Array2<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<T>,
    },
    RowDot(Var, Var),
    Reshape(Var),
    InfoNce(Var, Array2<T>),
    SoftplusNeg(Var),
    Sum(Var),
    Scale(Var, T),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Array2<T>) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1);
        let out = self.value(a) + self.value(b);
        self.push(out, Op::AddRow(a, b))
    }

    /// Row lookup: output row `r` is row `idx[r]` of `table`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let src = self.value(table);
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        self.push(out, Op::Gather(table, idx))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask = self
            .value(x)
            .mapv(|_| if rng.random::<f64>() < rate { T::zero() } else { keep });
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout(x, mask))
    }

    /// Per-row layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.ncols() as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Array2::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut out) in xv.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Fused multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `(batch·width) × d`; head `h` uses columns `h·d/heads .. (h+1)·d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(rows, layout.batch * layout.width);
        assert_eq!(layout.mask.len(), layout.batch * layout.width * layout.width);
        assert_eq!(d % layout.heads, 0);
        let (out, probs) = attention_forward(self.value(q).view(), self.value(k).view(), self.value(v).view(), &layout);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    /// Row-wise inner product of two equally shaped matrices, `m × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let out = (self.value(a) * self.value(b)).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowDot(a, b))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<T> = self.value(x).iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("reshape preserves element count");
        self.push(out, Op::Reshape(x))
    }

    /// Per-row softmax cross-entropy with the positive in column 0:
    /// `logsumexp(row) − row[0]`, returned as `m × 1`.
    pub fn info_nce(&mut self, logits: Var) -> Var {
        let lv = self.value(logits);
        let mut probs = Array2::zeros(lv.dim());
        let mut out = Array2::zeros((lv.nrows(), 1));
        for ((row, mut p), o) in lv.rows().into_iter().zip(probs.rows_mut()).zip(out.iter_mut()) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            Zip::from(&mut p).and(&row).for_each(|p, &v| {
                *p = (v - max).exp();
                z = z + *p;
            });
            p.mapv_inplace(|v| v / z);
            *o = max + z.ln() - row[0];
        }
        self.push(out, Op::InfoNce(logits, probs))
    }

    /// Elementwise `−ln σ(x)`, computed stably.
    pub fn softplus_neg(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(neg_log_sigmoid);
        self.push(out, Op::SoftplusNeg(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::Gather(table, idx) => {
                    let mut dt = Array2::zeros(self.shape(*table));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = dt.row_mut(i);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &v| {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(&node.value).for_each(|d, &s| *d = *d * s * (T::one() - s));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout(x, mask) => accumulate(&mut grads, *x, g * mask),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gy = &g * self.value(*gain);
                    let n = T::of(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(g.dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let gr = gy.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, &gv, &xv| *o = inv_std[r] * (gv - mean_g - xv * mean_gx));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        g.view(),
                        self.value(*q).view(),
                        self.value(*k).view(),
                        self.value(*v).view(),
                        layout,
                        probs,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::RowDot(a, b) => {
                    let da = self.value(*b) * &g;
                    let db = self.value(*a) * &g;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Reshape(x) => {
                    let flat: Vec<T> = g.iter().copied().collect();
                    let dx = Array2::from_shape_vec(self.shape(*x), flat).expect("same element count");
                    accumulate(&mut grads, *x, dx);
                }
                Op::InfoNce(logits, probs) => {
                    let mut dx = probs.clone();
                    for (mut row, &gr) in dx.rows_mut().into_iter().zip(g.iter()) {
                        row[0] = row[0] - T::one();
                        row.mapv_inplace(|v| v * gr);
                    }
                    accumulate(&mut grads, *logits, dx);
                }
                Op::SoftplusNeg(x) => {
                    // d/dx −ln σ(x) = σ(x) − 1
                    let mut dx = g;
                    Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &v| *d = *d * (sigmoid(v) - T::one()));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let dx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g * *c),
            }
        }
        Gradients { grads }
    }

    /// `(param id, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(usize, Array2<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => grads.grads[i].take().map(|g| (id, g)),
                _ => None,
            })
            .collect()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `−ln σ(x) = ln(1 + e^{−x})`.
pub fn neg_log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Softmax attention probabilities for one (sequence, head) block:
/// `scores` is `width × width` pre-mask logits, overwritten with probabilities.
pub(crate) fn masked_softmax_rows<T: Scalar>(scores: &mut [T], mask: &[bool], width: usize) {
    let offset = T::of(MASK_LOGIT);
    for (row, mrow) in scores.chunks_mut(width).zip(mask.chunks(width)) {
        for (s, &m) in row.iter_mut().zip(mrow) {
            if !m {
                *s = *s + offset;
            }
        }
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            z = z + *s;
        }
        for s in row.iter_mut() {
            *s = *s / z;
        }
    }
}

fn attention_forward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    layout: &AttnLayout,
) -> (Array2<T>, Vec<T>) {
    let (w, h) = (layout.width, layout.heads);
    let d = q.ncols();
    let dh = d / h;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = Array2::zeros(q.dim());
    let mut probs = vec![T::zero(); layout.batch * h * w * w];
    for b in 0..layout.batch {
        let rows = b * w..(b + 1) * w;
        let mask = &layout.mask[b * w * w..(b + 1) * w * w];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let qb = q.slice(s![rows.clone(), cols.clone()]);
            let kb = k.slice(s![rows.clone(), cols.clone()]);
            let vb = v.slice(s![rows.clone(), cols.clone()]);
            let block = &mut probs[(b * h + head) * w * w..(b * h + head + 1) * w * w];
            let scores = qb.dot(&kb.t());
            for (dst, &src) in block.iter_mut().zip(scores.iter()) {
                *dst = src * scale;
            }
            masked_softmax_rows(block, mask, w);
            let p = ArrayView2::from_shape((w, w), &*block).expect("square block");
            out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vb));
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    g: ArrayView2<T>,
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    layout: &AttnLayout,
    probs: &[T],
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let (w, h) = (layout.width, layout.heads);
    let d = q.ncols();
    let dh = d / h;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = Array2::zeros(q.dim());
    let mut dk = Array2::zeros(k.dim());
    let mut dv = Array2::zeros(v.dim());
    for b in 0..layout.batch {
        let rows = b * w..(b + 1) * w;
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let p = ArrayView2::from_shape((w, w), &probs[(b * h + head) * w * w..(b * h + head + 1) * w * w])
                .expect("square block");
            let gb = g.slice(s![rows.clone(), cols.clone()]);
            let qb = q.slice(s![rows.clone(), cols.clone()]);
            let kb = k.slice(s![rows.clone(), cols.clone()]);
            let vb = v.slice(s![rows.clone(), cols.clone()]);

            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&gb));
            let dp = gb.dot(&vb.t());
            let mut ds = Array2::zeros((w, w));
            for r in 0..w {
                let dot: T = (0..w).map(|c| p[[r, c]] * dp[[r, c]]).sum();
                for c in 0..w {
                    ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot) * scale;
                }
            }
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kb));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qb));
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of d(out)/d(input) for a graph builder `f`
    /// taking the leaf vars and returning a scalar.
    fn check<F>(inputs: Vec<Array2<f64>>, f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let run = |vals: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().enumerate().map(|(i, v)| tape.param(i, v.clone())).collect();
            let out = f(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = run(&inputs);
        let mut grads = tape.backward(out);
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.take(*var).unwrap_or_else(|| Array2::zeros(inputs[i].dim()));
            for idx in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                let (r, c) = (idx / inputs[i].ncols(), idx % inputs[i].ncols());
                plus[i][[r, c]] += 1e-6;
                minus[i][[r, c]] -= 1e-6;
                let (tp, _, op) = run(&plus);
                let (tm, _, om) = run(&minus);
                let numeric = (tp.scalar(op) - tm.scalar(om)) / 2e-6;
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * numeric.abs().max(1.0),
                    "input {i} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_row_relu_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let a = t.add_row(m, v[2]);
            let r = t.relu(a);
            let s = t.sigmoid(r);
            t.sum(s)
        });
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(4, 5, &mut rng);
        check(vec![random(4, 5, &mut rng), random(1, 5, &mut rng), random(1, 5, &mut rng)], move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let c = t.constant(w.clone());
            let d = t.row_dot(y, c);
            t.sum(d)
        });
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, width) = (2, 3);
        let mask: Vec<bool> = (0..batch * width * width).map(|i| i % 4 != 1 || i % width == (i / width) % width).collect();
        let w = random(batch * width, 4, &mut rng);
        check(
            vec![random(6, 4, &mut rng), random(6, 4, &mut rng), random(6, 4, &mut rng)],
            move |t, v| {
                let layout = AttnLayout {
                    batch,
                    width,
                    heads: 2,
                    mask: mask.clone(),
                };
                let o = t.attention(v[0], v[1], v[2], layout);
                let c = t.constant(w.clone());
                let d = t.row_dot(o, c);
                t.sum(d)
            },
        );
    }

    #[test]
    fn info_nce_gather_reshape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(5, 3, &mut rng), random(4, 3, &mut rng)], |t, v| {
            let rows = t.gather(v[0], vec![0, 1, 4, 2, 2, 3]);
            let other = t.gather(v[1], vec![3, 0, 1, 1, 2, 0]);
            let d = t.row_dot(rows, other);
            let l = t.reshape(d, 2, 3);
            let n = t.info_nce(l);
            let sp = t.softplus_neg(n);
            let m = t.mean(sp);
            t.scale(m, 1.7)
        });
    }

    #[test]
    fn sub_and_dropout_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(3, 3, &mut rng), random(3, 3, &mut rng)], |t, v| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
            let s = t.sub(v[0], v[1]);
            let a = t.add(s, v[0]);
            let d = t.dropout(a, 0.3, &mut drop_rng);
            let q = t.row_dot(d, d);
            t.sum(q)
        });
    }

    #[test]
    fn info_nce_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Array2::from_elem((2, 100), 0.37));
        let out = tape.info_nce(l);
        for &v in tape.value(out) {
            assert!((v - 100f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalize_and_mask() {
        let mut scores = vec![0.3, -1.0, 2.0, 0.5, 0.5, 0.5, 9.0, 1.0, -4.0];
        let mask = [true, false, true, true, true, true, false, false, true];
        masked_softmax_rows(&mut scores, &mask, 3);
        for row in scores.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(scores[1], 0.0);
        assert_eq!(&scores[6..], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn stable_sigmoid_helpers() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((neg_log_sigmoid(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(neg_log_sigmoid(-800.0f64).is_finite());
        assert!(neg_log_sigmoid(800.0f64) >= 0.0);
        let x = array![[1.0f32]];
        let mut t = Tape::<f32>::new();
        let v = t.constant(x);
        let s = t.sigmoid(v);
        assert!((t.scalar(s) - 0.7310586).abs() < 1e-6);
    }
}
