use super::{axpy, LinearParams, Matrix, MlpParams, ParamGrads, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Linear { x: Var, weight: ParamId, bias: ParamId },
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    /// `argmax[g * C + c]` is the winning input row for group `g`, channel `c`.
    ReduceMax { x: Var, argmax: Vec<usize> },
    Avg2(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    RowDot(Var, Var),
    Sigmoid(Var),
    Blend { alpha: Var, a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Tape of operations. Nodes are appended in evaluation order, so the tape
/// is already topologically sorted.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Backward {
    grads: Vec<Option<Matrix>>,
    pub params: ParamGrads,
}

impl Backward {
    /// Gradient w.r.t. a node; `None` if no seed reached it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn linear(&mut self, x: Var, p: &LinearParams) -> Result<Var> {
        let w = self.store.value(p.weight);
        let b = self.store.value(p.bias);
        let xv = self.value(x);
        if xv.cols() != w.cols() || w.rows() != b.cols() {
            return Err(shape_err(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    xv.shape(),
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        let wt = w.transpose();
        let (n, c_in, c_out) = (xv.rows(), w.cols(), w.rows());
        let mut out = Matrix::zeros(n, c_out);
        for r in 0..n {
            let xr = xv.row(r);
            let or = out.row_mut(r);
            or.copy_from_slice(b.row(0));
            for i in 0..c_in {
                let xi = xr[i];
                if xi != 0.0 {
                    axpy(or, xi, wt.row(i));
                }
            }
        }
        Ok(self.push(
            out,
            Op::Linear {
                x,
                weight: p.weight,
                bias: p.bias,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    pub fn mlp(&mut self, x: Var, p: &MlpParams) -> Result<Var> {
        let mut h = x;
        let last = p.layers.len() - 1;
        for (i, layer) in p.layers.iter().enumerate() {
            h = self.linear(h, layer)?;
            if i < last || p.final_relu {
                h = self.relu(h);
            }
        }
        Ok(h)
    }

    /// Column concatenation in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs"));
        };
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("{start}..{end} of {} columns", xv.cols()),
            ));
        }
        let mut out = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// Row gather; backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: xv.rows(),
            });
        }
        let out = xv.select_rows(idx);
        Ok(self.push(
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Masked max over consecutive groups of `k` rows. `valid` has one flag
    /// per input row. Ties route the gradient to the smallest row index.
    pub fn reduce_max(&mut self, x: Var, k: usize, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if k == 0 || !xv.rows().is_multiple_of(k) || valid.len() != xv.rows() {
            return Err(shape_err(
                "reduce_max",
                format!("{} rows, k = {k}, {} mask entries", xv.rows(), valid.len()),
            ));
        }
        let (groups, c) = (xv.rows() / k, xv.cols());
        let mut out = Matrix::zeros(groups, c);
        let mut argmax = vec![usize::MAX; groups * c];
        for g in 0..groups {
            let rows = g * k..(g + 1) * k;
            if !valid[rows.clone()].iter().any(|&v| v) {
                return Err(Error::InvalidArgument(format!(
                    "reduce_max: group {g} has no valid rows"
                )));
            }
            let best = &mut argmax[g * c..(g + 1) * c];
            for r in rows {
                if !valid[r] {
                    continue;
                }
                let xr = xv.row(r);
                for ch in 0..c {
                    if best[ch] == usize::MAX || xr[ch] > xv[(best[ch], ch)] {
                        best[ch] = r;
                    }
                }
            }
            for ch in 0..c {
                out[(g, ch)] = xv[(best[ch], ch)];
            }
        }
        Ok(self.push(out, Op::ReduceMax { x, argmax }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `(a + b) / 2`.
    pub fn avg2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("avg2", a, b)?;
        let mut out = self.value(a).clone();
        for (o, bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = 0.5 * (*o + bv);
        }
        Ok(self.push(out, Op::Avg2(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// Per-row inner product, `M x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            out[(r, 0)] = av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum();
        }
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x))
    }

    /// Row-wise `alpha * a + (1 - alpha) * b` with `alpha` of shape `M x 1`.
    pub fn blend(&mut self, alpha: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("blend", a, b)?;
        let (al, av, bv) = (self.value(alpha), self.value(a), self.value(b));
        if al.shape() != (av.rows(), 1) {
            return Err(shape_err("blend", format!("alpha {:?}", al.shape())));
        }
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let t = al[(r, 0)];
            for c in 0..av.cols() {
                out[(r, c)] = t * av[(r, c)] + (1.0 - t) * bv[(r, c)];
            }
        }
        Ok(self.push(out, Op::Blend { alpha, a, b }))
    }

    /// Reverse pass from the given output gradients.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Result<Backward> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut params = self.store.zero_grads();
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(shape_err(
                    "backward",
                    format!("seed {:?} for node {:?}", g.shape(), self.value(*v).shape()),
                ));
            }
            accumulate(&mut grads, *v, g);
        }
        for id in (0..self.nodes.len()).rev() {
            let (grads, rest) = grads.split_at_mut(id);
            let Some(gy) = &rest[0] else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Linear { x, weight, bias } => {
                    let xv = self.value(*x);
                    let w = self.store.value(*weight);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    {
                        let gw = params.get_mut(*weight);
                        for r in 0..xv.rows() {
                            let gyr = gy.row(r);
                            let xr = xv.row(r);
                            let gxr = gx.row_mut(r);
                            for (o, &g) in gyr.iter().enumerate() {
                                if g != 0.0 {
                                    axpy(gxr, g, w.row(o));
                                    axpy(gw.row_mut(o), g, xr);
                                }
                            }
                        }
                    }
                    let gb = params.get_mut(*bias);
                    for r in 0..gy.rows() {
                        axpy(gb.row_mut(0), 1.0, gy.row(r));
                    }
                    accumulate_owned(grads, *x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = gy.clone();
                    for (g, y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate_owned(grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut gp = Matrix::zeros(gy.rows(), w);
                        for r in 0..gy.rows() {
                            gp.row_mut(r).copy_from_slice(&gy.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate_owned(grads, *p, gp);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..gy.rows() {
                        gx.row_mut(r)[*start..*start + gy.cols()].copy_from_slice(gy.row(r));
                    }
                    accumulate_owned(grads, *x, gx);
                }
                Op::Gather { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(gx.row_mut(i), 1.0, gy.row(r));
                    }
                    accumulate_owned(grads, *x, gx);
                }
                Op::ReduceMax { x, argmax } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = Matrix::zeros(xv.rows(), c);
                    for (slot, &row) in argmax.iter().enumerate() {
                        let (g, ch) = (slot / c.max(1), slot % c.max(1));
                        gx[(row, ch)] += gy[(g, ch)];
                    }
                    accumulate_owned(grads, *x, gx);
                }
                Op::Avg2(a, b) => {
                    let mut half = gy.clone();
                    half.data_mut().iter_mut().for_each(|v| *v *= 0.5);
                    accumulate(grads, *a, &half);
                    accumulate_owned(grads, *b, half);
                }
                Op::Add(a, b) => {
                    accumulate(grads, *a, gy);
                    accumulate(grads, *b, gy);
                }
                Op::Scale(x, f) => {
                    let mut gx = gy.clone();
                    gx.data_mut().iter_mut().for_each(|v| *v *= f);
                    accumulate_owned(grads, *x, gx);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let g = gy[(r, 0)];
                        axpy(ga.row_mut(r), g, bv.row(r));
                        axpy(gb.row_mut(r), g, av.row(r));
                    }
                    accumulate_owned(grads, *a, ga);
                    accumulate_owned(grads, *b, gb);
                }
                Op::Sigmoid(x) => {
                    let mut gx = gy.clone();
                    for (g, y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate_owned(grads, *x, gx);
                }
                Op::Blend { alpha, a, b } => {
                    let (al, av, bv) = (self.value(*alpha), self.value(*a), self.value(*b));
                    let mut galpha = Matrix::zeros(al.rows(), 1);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let t = al[(r, 0)];
                        let mut s = 0.0;
                        for c in 0..av.cols() {
                            let g = gy[(r, c)];
                            s += g * (av[(r, c)] - bv[(r, c)]);
                            ga[(r, c)] = g * t;
                            gb[(r, c)] = g * (1.0 - t);
                        }
                        galpha[(r, 0)] = s;
                    }
                    accumulate_owned(grads, *alpha, galpha);
                    accumulate_owned(grads, *a, ga);
                    accumulate_owned(grads, *b, gb);
                }
            }
        }
        Ok(Backward { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
