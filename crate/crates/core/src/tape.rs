//! Reverse-mode differentiation over 2-D matrices.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! value. [`Tape::backward`] walks the record in reverse and accumulates
//! gradients for every node, including the trainable parameters borrowed from
//! a [`ParamStore`]. Only the handful of operations the model needs are
//! supported.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<F>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Unfold(Var, usize),
    Gather(Var, Vec<usize>),
    BroadcastRows(Var),
    PoolPairs(Var),
    RepeatPairs(Var),
    Mean(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>, Array2<F>),
}

struct Node<F> {
    value: Option<Array2<F>>,
    op: Op<F>,
}

/// Recorded forward computation.
pub struct Tape<'a, F: Scalar> {
    params: &'a ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<F> {
    nodes: Vec<Option<Array2<F>>>,
    params: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient with respect to a recorded node, if it influenced the output.
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<F>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed like the store; parameters that did not
    /// take part in the computation get `None`.
    pub fn into_param_grads(self) -> Vec<Option<Array2<F>>> {
        self.params
    }
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new(params: &'a ParamStore<F>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Records an input that is differentiable but not a parameter.
    pub fn input(&mut self, m: Array2<F>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Same as [`Tape::input`]; the distinction is only for readability.
    pub fn constant(&mut self, m: Array2<F>) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        self.push(y, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) - self.value(b);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let y = self.value(a) + r;
        self.push(y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "mul_row expects a single row");
        let y = self.value(a) * r;
        self.push(y, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let y = self.value(a) * c;
        self.push(y, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let y = self.value(a) + c;
        self.push(y, Op::AddConst(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(y, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = softmax_rows_unchecked(self.value(a));
        self.push(y, Op::SoftmaxRows(a))
    }

    /// Per-row standardization (zero mean, unit variance), without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: F) -> Var {
        let x = self.value(a);
        let n = F::of(x.ncols() as f64);
        let mut y = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        self.push(y, Op::LayerNormRows(a, rstd))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(y, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(y, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(y, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(y, Op::SliceRows(a, start))
    }

    /// Zero-padded sliding window along rows: output row `i` is the
    /// concatenation of input rows `i - r ..= i + r` with `r = kernel / 2`.
    /// Followed by a matmul this is a same-padded 1-D convolution.
    pub fn unfold(&mut self, a: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "unfold kernel must be odd");
        let x = self.value(a);
        let (t, c) = x.dim();
        let r = kernel / 2;
        let mut y = Array2::zeros((t, kernel * c));
        for j in 0..kernel {
            // output rows i where 0 <= i + j - r < t
            let lo = r.saturating_sub(j);
            let hi = (t + r).saturating_sub(j).min(t);
            if lo >= hi {
                continue;
            }
            let src_lo = lo + j - r;
            let src_hi = hi + j - r;
            y.slice_mut(s![lo..hi, j * c..(j + 1) * c])
                .assign(&x.slice(s![src_lo..src_hi, ..]));
        }
        self.push(y, Op::Unfold(a, kernel))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tab = self.value(table);
        let mut y = Array2::zeros((ids.len(), tab.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            y.row_mut(i).assign(&tab.row(id));
        }
        self.push(y, Op::Gather(table, ids.to_vec()))
    }

    /// Repeats a `1×n` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "broadcast_rows expects a single row");
        let y = r.broadcast((rows, r.ncols())).unwrap().to_owned();
        self.push(y, Op::BroadcastRows(row))
    }

    /// Averages consecutive row pairs; the row count must be even.
    pub fn pool_pairs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (t, c) = x.dim();
        assert!(t % 2 == 0, "pool_pairs needs an even row count");
        let half = F::of(0.5);
        let mut y = Array2::zeros((t / 2, c));
        Zip::from(y.rows_mut())
            .and(x.slice(s![0..;2, ..]).rows())
            .and(x.slice(s![1..;2, ..]).rows())
            .for_each(|mut o, a, b| {
                Zip::from(&mut o)
                    .and(&a)
                    .and(&b)
                    .for_each(|o, &a, &b| *o = (a + b) * half)
            });
        self.push(y, Op::PoolPairs(a))
    }

    /// Nearest-neighbour upsampling: every row is emitted twice.
    pub fn repeat_pairs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (t, c) = x.dim();
        let mut y = Array2::zeros((2 * t, c));
        y.slice_mut(s![0..;2, ..]).assign(x);
        y.slice_mut(s![1..;2, ..]).assign(x);
        self.push(y, Op::RepeatPairs(a))
    }

    /// Mean over all elements, as a `1×1` matrix.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.sum() / F::of(x.len() as f64);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a))
    }

    /// Mean squared difference between two equally shaped matrices.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let p = softmax_rows_unchecked(self.value(logits));
        assert_eq!(p.nrows(), labels.len());
        let n = F::of(labels.len() as f64);
        let nll = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p[[i, y]].max(F::min_positive_value()).ln())
            .sum::<F>()
            / n;
        self.push(
            Array2::from_elem((1, 1), nll),
            Op::SoftmaxCrossEntropy(logits, labels.to_vec(), p),
        )
    }

    /// Reverse pass from a scalar (`1×1`) output.
    pub fn backward(&self, out: Var) -> Grads<F> {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut params: Vec<Option<Array2<F>>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let me = Var(i);
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    params[id.index()] = Some(g.clone());
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *b, g.clone());
                    accum(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, g.mapv(|v| -v));
                    accum(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(&mut grads, *row, gr);
                    accum(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    accum(&mut grads, *row, gr);
                    accum(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accum(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::AddConst(a) => accum(&mut grads, *a, g),
                Op::Silu(a) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*a)).for_each(|gv, &x| {
                        let sg = sigmoid(x);
                        *gv = *gv * sg * (F::one() + x * (F::one() - sg));
                    });
                    accum(&mut grads, *a, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(me);
                    let mut gx = g;
                    for (mut gr, yr) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                        Zip::from(&mut gr).and(&yr).for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    }
                    accum(&mut grads, *a, gx);
                }
                Op::LayerNormRows(a, rstd) => {
                    let xhat = self.value(me);
                    let n = F::of(xhat.ncols() as f64);
                    let mut gx = g;
                    for ((mut gr, xr), &r) in gx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
                        let mg = gr.sum() / n;
                        let mgx = gr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
                        Zip::from(&mut gr)
                            .and(&xr)
                            .for_each(|gv, &xv| *gv = r * (*gv - mg - xv * mgx));
                    }
                    accum(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accum(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accum(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        accum(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accum(&mut grads, *a, ga);
                }
                Op::Unfold(a, kernel) => {
                    let (t, c) = self.value(*a).dim();
                    let r = kernel / 2;
                    let mut ga = Array2::zeros((t, c));
                    for j in 0..*kernel {
                        let lo = r.saturating_sub(j);
                        let hi = (t + r).saturating_sub(j).min(t);
                        if lo >= hi {
                            continue;
                        }
                        let mut dst = ga.slice_mut(s![lo + j - r..hi + j - r, ..]);
                        dst.scaled_add(F::one(), &g.slice(s![lo..hi, j * c..(j + 1) * c]));
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row.scaled_add(F::one(), &g.row(i));
                    }
                    accum(&mut grads, *table, gt);
                }
                Op::BroadcastRows(row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(&mut grads, *row, gr);
                }
                Op::PoolPairs(a) => {
                    let (t2, c) = g.dim();
                    let half = F::of(0.5);
                    let gh = g.mapv(|v| v * half);
                    let mut ga = Array2::zeros((2 * t2, c));
                    ga.slice_mut(s![0..;2, ..]).assign(&gh);
                    ga.slice_mut(s![1..;2, ..]).assign(&gh);
                    accum(&mut grads, *a, ga);
                }
                Op::RepeatPairs(a) => {
                    let ga = &g.slice(s![0..;2, ..]) + &g.slice(s![1..;2, ..]);
                    accum(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let dim = self.value(*a).dim();
                    let v = g[[0, 0]] / F::of((dim.0 * dim.1) as f64);
                    accum(&mut grads, *a, Array2::from_elem(dim, v));
                }
                Op::SoftmaxCrossEntropy(logits, labels, p) => {
                    let scale = g[[0, 0]] / F::of(labels.len() as f64);
                    let mut gx = p.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gx[[i, y]] = gx[[i, y]] - F::one();
                    }
                    gx.mapv_inplace(|v| v * scale);
                    accum(&mut grads, *logits, gx);
                }
            }
        }
        Grads {
            nodes: grads,
            params,
        }
    }
}

fn accum<F: Scalar>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.scaled_add(F::one(), &g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Row-wise softmax with max subtraction; assumes finite input.
pub(crate) fn softmax_rows_unchecked<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}
