//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` matrix; vectors are `1×c` rows and
//! scalars are `1×1`. Ops append a node holding the forward value plus
//! whatever the backward rule needs, and [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because a node
//! can only reference earlier nodes.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{Gradients, ParamId, ParamStore};
use super::rng::RngStream;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Constant,
    Param(ParamId),
    Lookup { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Array2<f64>),
    ReduceMean(Var),
    ReduceMax(Var, Vec<usize>),
    Sum(Var),
    StraightThrough(Var),
    Bce {
        p: Var,
        targets: Array2<f64>,
        weights: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// One forward/backward recording. Parameters are read from the borrowed
/// store; gradients come back keyed by [`ParamId`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
    rng: Option<RngStream>,
}

fn shape(a: &Array2<f64>) -> [usize; 2] {
    let (r, c) = a.dim();
    [r, c]
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            mode,
            rng: None,
        }
    }

    /// Training tape whose dropout masks come from `rng`.
    pub fn training(params: &'p ParamStore, rng: RngStream) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            mode: Mode::Train,
            rng: Some(rng),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        shape(self.value(v))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Array2<f64>, op: Op, name: &str) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(name.to_string()));
        }
        Ok(self.push(value, op))
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Embedding lookup: gathers rows of a parameter without copying the whole
    /// table onto the tape.
    pub fn lookup(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.params.get(id);
        let (v, d) = table.dim();
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::Usage(format!(
                "token id {bad} out of range for embedding table of {v} rows"
            )));
        }
        let mut out = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&table.row(r));
        }
        Ok(self.push(
            out,
            Op::Lookup {
                param: id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::dim("matmul", &shape(av), &shape(bv)));
        }
        let out = av.dot(bv);
        self.push_checked(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::dim("matmul_t", &shape(av), &shape(bv)));
        }
        let out = av.dot(&bv.t());
        self.push_checked(out, Op::MatMulT(a, b), "matmul_t")
    }

    /// Elementwise sum. A `1×c` right operand is broadcast over the rows of
    /// the left operand (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() == bv.dim() {
            let out = av + bv;
            return self.push_checked(out, Op::Add(a, b), "add");
        }
        if bv.nrows() == 1 && bv.ncols() == av.ncols() {
            let out = av + &bv.row(0);
            return self.push_checked(out, Op::AddRow(a, b), "add");
        }
        Err(Error::dim("add", &shape(av), &shape(bv)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::dim("sub", &shape(av), &shape(bv)));
        }
        let out = av - bv;
        self.push_checked(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::dim("mul", &shape(av), &shape(bv)));
        }
        let out = av * bv;
        self.push_checked(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a) * factor;
        self.push_checked(out, Op::Scale(a, factor), "scale")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let cols = self.value(first).ncols();
        for &p in parts {
            if self.value(p).ncols() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    &shape(self.value(first)),
                    &shape(self.value(p)),
                ));
            }
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let rows = self.value(first).nrows();
        for &p in parts {
            if self.value(p).nrows() != rows {
                return Err(Error::dim(
                    "concat_cols",
                    &shape(self.value(first)),
                    &shape(self.value(p)),
                ));
            }
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.nrows() {
            return Err(Error::dim("slice_rows", &shape(av), &[start, end]));
        }
        let out = av.slice(s![start..end, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.ncols() {
            return Err(Error::dim("slice_cols", &shape(av), &[start, end]));
        }
        let out = av.slice(s![.., start..end]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Row `i` of the output is row `rows[i]` of `a`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.nrows()) {
            return Err(Error::dim("gather_rows", &shape(av), &[bad]));
        }
        let mut out = Array2::zeros((rows.len(), av.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&av.row(r));
        }
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec())))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(sigmoid);
        self.push_checked(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(f64::tanh);
        self.push_checked(out, Op::Tanh(a), "tanh")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(gelu);
        self.push_checked(out, Op::Gelu(a), "gelu")
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push_checked(out, Op::RowSoftmax(a), "row_softmax")
    }

    /// Normalises each row to zero mean and unit variance, then applies the
    /// `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        for p in [gain, bias] {
            if self.value(p).dim() != (1, cols) {
                return Err(Error::dim("layer_norm", &shape(xv), &shape(self.value(p))));
            }
        }
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
        }
        let out = &xhat * &self.value(gain).row(0) + &self.value(bias).row(0);
        self.push_checked(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout; identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Usage("training tape has no dropout stream".into()))?;
        let keep = 1.0 - rate;
        let (r, c) = self.nodes[a.0].value.dim();
        let mask = Array2::from_shape_simple_fn((r, c), || {
            if rng.uniform() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let out = self.value(a) * &mask;
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    /// Mean over rows, producing a `1×c` row.
    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::dim("reduce_mean", &shape(av), &[]))?
            .insert_axis(Axis(0));
        Ok(self.push(out, Op::ReduceMean(a)))
    }

    /// Column-wise max over rows, producing a `1×c` row. Ties go to the lowest
    /// row index.
    pub fn reduce_max(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.nrows() == 0 {
            return Err(Error::dim("reduce_max", &shape(av), &[]));
        }
        let cols = av.ncols();
        let mut arg = vec![0usize; cols];
        let mut out = Array2::zeros((1, cols));
        for c in 0..cols {
            let col = av.column(c);
            let mut best = 0;
            for r in 1..col.len() {
                if col[r] > col[best] {
                    best = r;
                }
            }
            arg[c] = best;
            out[[0, c]] = col[best];
        }
        Ok(self.push(out, Op::ReduceMax(a, arg)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_checked(out, Op::Sum(a), "sum")
    }

    /// Forward value is `quantized`; the backward pass hands the incoming
    /// gradient to `v` unchanged and nothing to the source of `quantized`.
    pub fn straight_through(&mut self, v: Var, quantized: ArrayView2<f64>) -> Result<Var> {
        let vv = self.value(v);
        if vv.dim() != quantized.dim() {
            return Err(Error::dim(
                "straight_through",
                &shape(vv),
                &[quantized.nrows(), quantized.ncols()],
            ));
        }
        Ok(self.push(quantized.to_owned(), Op::StraightThrough(v)))
    }

    /// Weighted binary cross-entropy summed over all cells, with the
    /// probabilities clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, p: Var, targets: Array2<f64>, weights: Array2<f64>) -> Result<Var> {
        let pv = self.value(p);
        if pv.dim() != targets.dim() || pv.dim() != weights.dim() {
            return Err(Error::dim("bce", &shape(pv), &shape(&targets)));
        }
        if let Some(bad) = pv.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("bce probability {bad}")));
        }
        let mut total = 0.0;
        for ((&pr, &y), &w) in pv.iter().zip(&targets).zip(&weights) {
            let pc = pr.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let out = Array2::from_elem((1, 1), total);
        self.push_checked(
            out,
            Op::Bce {
                p,
                targets,
                weights,
            },
            "bce",
        )
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed_shape = shape(self.value(loss));
        if seed_shape != [1, 1] {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {seed_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::new(self.params.len());

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, g.view()),
                Op::Lookup { param, rows } => {
                    let dim = self.params.get(*param).dim();
                    out.accumulate_rows(*param, dim, rows, g.view());
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = &g * &y.mapv(|v| v * (1.0 - v));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = &g * &y.mapv(|v| 1.0 - v * v);
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |gy, &yy| *gy -= yy * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_row = self.value(*gain).row(0).to_owned();
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &gain_row;
                    let cols = dxhat.ncols() as f64;
                    let mut gx = Array2::zeros(dxhat.dim());
                    for i in 0..dxhat.nrows() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        let is = inv_std[i];
                        let mut out_row = gx.row_mut(i);
                        for c in 0..dr.len() {
                            out_row[c] = is / cols * (cols * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::Dropout(a, mask) => acc(&mut grads, *a, g * mask),
                Op::ReduceMean(a) => {
                    let (rows, cols) = self.value(*a).dim();
                    let row = g.row(0).mapv(|v| v / rows as f64);
                    let ga = row.broadcast((rows, cols)).expect("row broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::ReduceMax(a, arg) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (c, &r) in arg.iter().enumerate() {
                        ga[[r, c]] += g[[0, c]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::StraightThrough(v) => acc(&mut grads, *v, g),
                Op::Bce {
                    p,
                    targets,
                    weights,
                } => {
                    let seed = g[[0, 0]];
                    let pv = self.value(*p);
                    let mut gp = Array2::zeros(pv.dim());
                    for (((o, &pr), &y), &w) in
                        gp.iter_mut().zip(pv.iter()).zip(targets).zip(weights)
                    {
                        if pr > PROB_CLAMP && pr < 1.0 - PROB_CLAMP {
                            *o = seed * w * (-y / pr + (1.0 - y) / (1.0 - pr));
                        }
                    }
                    acc(&mut grads, *p, gp);
                }
            }
        }
        Ok(out)
    }
}
