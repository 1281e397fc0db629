use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{matmul_nt_acc, matmul_tn_acc};
use crate::{Gradients, ParamId, ParamSet, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    MeanRows(usize),
    SumRows(usize),
    SumAll(usize),
    L2NormalizeRows { input: usize, norms: Vec<f64> },
    GatherRows { input: usize, indices: Vec<usize> },
    SegmentMean { input: usize, segments: Vec<usize>, counts: Vec<usize> },
    MaskedLogSoftmax { input: usize, mask: Vec<bool> },
    PickCols { input: usize, columns: Vec<usize> },
    Scatter { input: usize, positions: Vec<usize> },
    EntropyRows(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record. Nodes are stored in creation order,
/// which is a topological order, and `backward` walks it in reverse.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a parameter leaf; its gradient lands in `Gradients[id]`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va, vb));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::Add(ia, ib), ng))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let (va, vr) = (&self.nodes[ia].value, &self.nodes[ir].value);
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(mismatch("add_row", va, vr));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_slice_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let ng = self.ng(ia) || self.ng(ir);
        Ok(self.push(value, Op::AddRow(ia, ir), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(mismatch("sub", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::Sub(ia, ib), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::Mul(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let mut value = self.nodes[ia].value.clone();
        value.scale_in_place(factor);
        let ng = self.ng(ia);
        Ok(self.push(value, Op::Scale(ia, factor), ng))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let mut value = self.nodes[ia].value.clone();
        for v in value.data_mut() {
            *v += c;
        }
        let ng = self.ng(ia);
        Ok(self.push(value, Op::AddScalar(ia), ng))
    }

    /// Concatenates along columns (axis 1); all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(TensorError::Empty("concat_cols"));
        };
        let rows = self.nodes[first].value.rows();
        let mut cols = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rows() != rows {
                return Err(mismatch("concat_cols", &self.nodes[first].value, v));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(idx), ng))
    }

    /// Concatenates along rows (axis 0); all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(TensorError::Empty("concat_rows"));
        };
        let cols = self.nodes[first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(mismatch("concat_rows", &self.nodes[first].value, v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(idx), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data)?;
        let ng = self.ng(ia);
        Ok(self.push(value, op(ia), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data)?;
        let ng = self.ng(ia);
        Ok(self.push(value, Op::Clamp { input: ia, lo, hi }, ng))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(mismatch("minimum", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x.min(*y)).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(value, Op::Minimum(ia, ib), ng))
    }

    /// Column-wise mean over rows, giving a `1×c` row. Zero rows give zeros.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let mut value = column_sums(va);
        if va.rows() > 0 {
            value.scale_in_place(1.0 / va.rows() as f64);
        }
        let ng = self.ng(ia);
        Ok(self.push(value, Op::MeanRows(ia), ng))
    }

    /// Column-wise sum over rows, giving a `1×c` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let value = column_sums(&self.nodes[ia].value);
        let ng = self.ng(ia);
        Ok(self.push(value, Op::SumRows(ia), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let total = self.nodes[ia].value.data().iter().sum();
        let ng = self.ng(ia);
        Ok(self.push(Tensor::scalar(total), Op::SumAll(ia), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Empty("mean"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Divides each row by its L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let mut value = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = value.row_slice_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
            norms.push(norm);
        }
        let ng = self.ng(ia);
        Ok(self.push(value, Op::L2NormalizeRows { input: ia, norms }, ng))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let mut data = Vec::with_capacity(indices.len() * va.cols());
        for &i in indices {
            if i >= va.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: va.rows(),
                });
            }
            data.extend_from_slice(va.row_slice(i));
        }
        let value = Tensor::from_vec(indices.len(), va.cols(), data)?;
        let ng = self.ng(ia);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: ia,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Row `s` of the output is the mean of the input rows `i` with
    /// `segments[i] == s`; segments with no rows are zero.
    pub fn segment_mean(
        &mut self,
        a: Var,
        segments: &[usize],
        num_segments: usize,
    ) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if segments.len() != va.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_mean",
                left: va.shape().to_vec(),
                right: vec![segments.len()],
            });
        }
        let mut counts = vec![0usize; num_segments];
        let mut value = Tensor::zeros(num_segments, va.cols());
        for (r, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_mean",
                    index: s,
                    bound: num_segments,
                });
            }
            counts[s] += 1;
            for (o, x) in value.row_slice_mut(s).iter_mut().zip(va.row_slice(r)) {
                *o += x;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = 1.0 / c as f64;
                for o in value.row_slice_mut(s) {
                    *o *= inv;
                }
            }
        }
        let ng = self.ng(ia);
        Ok(self.push(
            value,
            Op::SegmentMean {
                input: ia,
                segments: segments.to_vec(),
                counts,
            },
            ng,
        ))
    }

    /// Row-wise log-softmax restricted to entries where `mask` is true.
    /// Masked-out entries become `-inf` and receive zero gradient.
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if mask.len() != va.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_log_softmax",
                left: va.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let cols = va.cols();
        let mut value = Tensor::filled(va.rows(), cols, f64::NEG_INFINITY);
        for r in 0..va.rows() {
            let row = va.row_slice(r);
            let m = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::AllMasked { row: r });
            }
            let lse = max
                + row
                    .iter()
                    .zip(m)
                    .filter(|(_, &k)| k)
                    .map(|(x, _)| (x - max).exp())
                    .sum::<f64>()
                    .ln();
            for (c, (x, &k)) in row.iter().zip(m).enumerate() {
                if k {
                    value.set(r, c, x - lse);
                }
            }
        }
        let ng = self.ng(ia);
        Ok(self.push(
            value,
            Op::MaskedLogSoftmax {
                input: ia,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Picks `a[r, columns[r]]` for every row, giving a column vector.
    pub fn pick_cols(&mut self, a: Var, columns: &[usize]) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if columns.len() != va.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "pick_cols",
                left: va.shape().to_vec(),
                right: vec![columns.len()],
            });
        }
        let mut data = Vec::with_capacity(columns.len());
        for (r, &c) in columns.iter().enumerate() {
            if c >= va.cols() {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_cols",
                    index: c,
                    bound: va.cols(),
                });
            }
            data.push(va.get(r, c));
        }
        let value = Tensor::from_vec(columns.len(), 1, data)?;
        let ng = self.ng(ia);
        Ok(self.push(
            value,
            Op::PickCols {
                input: ia,
                columns: columns.to_vec(),
            },
            ng,
        ))
    }

    /// Places element `i` of `a` (row-major) at flat position
    /// `positions[i]` of a fresh `rows×cols` zero tensor.
    pub fn scatter(
        &mut self,
        a: Var,
        positions: &[usize],
        rows: usize,
        cols: usize,
    ) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if positions.len() != va.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter",
                left: va.shape().to_vec(),
                right: vec![positions.len()],
            });
        }
        let mut value = Tensor::zeros(rows, cols);
        for (&p, &x) in positions.iter().zip(va.data()) {
            if p >= rows * cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter",
                    index: p,
                    bound: rows * cols,
                });
            }
            value.data_mut()[p] = x;
        }
        let ng = self.ng(ia);
        Ok(self.push(
            value,
            Op::Scatter {
                input: ia,
                positions: positions.to_vec(),
            },
            ng,
        ))
    }

    /// Entropy of each row of log-probabilities; `-inf` entries count as
    /// zero probability.
    pub fn entropy_rows(&mut self, logp: Var) -> Result<Var, TensorError> {
        let ia = self.idx(logp)?;
        let va = &self.nodes[ia].value;
        let data = (0..va.rows())
            .map(|r| {
                -va.row_slice(r)
                    .iter()
                    .filter(|l| l.is_finite())
                    .map(|&l| l.exp() * l)
                    .sum::<f64>()
            })
            .collect();
        let value = Tensor::from_vec(va.rows(), 1, data)?;
        let ng = self.ng(ia);
        Ok(self.push(value, Op::EntropyRows(ia), ng))
    }

    /// Accumulates `∂loss/∂param` into `grads` for every parameter leaf that
    /// `loss` depends on. Calling twice without zeroing adds twice.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<(), TensorError> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(il + 1);
        adj.resize_with(il + 1, || None);
        adj[il] = Some(Tensor::scalar(1.0));

        for i in (0..=il).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj, grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>], grads: &mut Gradients) {
        let node = &self.nodes[i];
        let y = &node.value;
        let nodes = &self.nodes;
        macro_rules! slot {
            ($j:expr) => {
                grad_slot(nodes, adj, $j)
            };
        }
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => grads.get_mut(*id).add_assign(g),
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(ga) = slot!(*a) {
                    matmul_nt_acc(g, vb, ga);
                }
                if let Some(gb) = slot!(*b) {
                    matmul_tn_acc(va, g, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot!(*b) {
                    gb.add_assign(g);
                }
            }
            Op::AddRow(a, r) => {
                if let Some(ga) = slot!(*a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = slot!(*r) {
                    gr.add_assign(&column_sums(g));
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot!(*b) {
                    for (o, x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += c * x;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.add_assign(g);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if let Some(gp) = slot!(p) {
                        for r in 0..g.rows() {
                            let src = &g.row_slice(r)[offset..offset + w];
                            for (o, x) in gp.row_slice_mut(r).iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if let Some(gp) = slot!(p) {
                        for (o, x) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *o += x;
                        }
                    }
                    offset += len;
                }
            }
            Op::Relu(a) => {
                let va = &nodes[*a].value;
                if let Some(ga) = slot!(*a) {
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((o, x), t) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += x * (1.0 - t * t);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((o, x), e) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += x * e;
                    }
                }
            }
            Op::Square(a) => {
                let va = &nodes[*a].value;
                if let Some(ga) = slot!(*a) {
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += 2.0 * v * x;
                    }
                }
            }
            Op::Clamp { input, lo, hi } => {
                let va = &nodes[*input].value;
                if let Some(ga) = slot!(*input) {
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if v > lo && v < hi {
                            *o += x;
                        }
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let pick_a: Vec<bool> = va.data().iter().zip(vb.data()).map(|(x, y)| x <= y).collect();
                if let Some(ga) = slot!(*a) {
                    for ((o, x), &k) in ga.data_mut().iter_mut().zip(g.data()).zip(&pick_a) {
                        if k {
                            *o += x;
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((o, x), &k) in gb.data_mut().iter_mut().zip(g.data()).zip(&pick_a) {
                        if !k {
                            *o += x;
                        }
                    }
                }
            }
            Op::MeanRows(a) | Op::SumRows(a) => {
                let rows = nodes[*a].value.rows();
                let factor = match node.op {
                    Op::MeanRows(_) if rows > 0 => 1.0 / rows as f64,
                    _ => 1.0,
                };
                if let Some(ga) = slot!(*a) {
                    for r in 0..rows {
                        for (o, x) in ga.row_slice_mut(r).iter_mut().zip(g.data()) {
                            *o += factor * x;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                if let Some(ga) = slot!(*a) {
                    for o in ga.data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                if let Some(ga) = slot!(*input) {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, gy), yy) in ga.row_slice_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += (gy - yy * dot) / norm;
                        }
                    }
                }
            }
            Op::GatherRows { input, indices } => {
                if let Some(ga) = slot!(*input) {
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, x) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SegmentMean {
                input,
                segments,
                counts,
            } => {
                if let Some(ga) = slot!(*input) {
                    for (r, &s) in segments.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for (o, x) in ga.row_slice_mut(r).iter_mut().zip(g.row_slice(s)) {
                            *o += inv * x;
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax { input, mask } => {
                let cols = y.cols();
                if let Some(ga) = slot!(*input) {
                    for r in 0..y.rows() {
                        let m = &mask[r * cols..(r + 1) * cols];
                        let gr = g.row_slice(r);
                        let total: f64 = gr.iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| x).sum();
                        let yr = y.row_slice(r);
                        for c in 0..cols {
                            if m[c] {
                                ga.row_slice_mut(r)[c] += gr[c] - yr[c].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::PickCols { input, columns } => {
                if let Some(ga) = slot!(*input) {
                    for (r, &c) in columns.iter().enumerate() {
                        let v = ga.get(r, c) + g.data()[r];
                        ga.set(r, c, v);
                    }
                }
            }
            Op::Scatter { input, positions } => {
                if let Some(ga) = slot!(*input) {
                    for (o, &p) in ga.data_mut().iter_mut().zip(positions) {
                        *o += g.data()[p];
                    }
                }
            }
            Op::EntropyRows(a) => {
                let va = &nodes[*a].value;
                if let Some(ga) = slot!(*a) {
                    for r in 0..va.rows() {
                        let gr = g.data()[r];
                        for (o, &l) in ga.row_slice_mut(r).iter_mut().zip(va.row_slice(r)) {
                            if l.is_finite() {
                                *o += -gr * l.exp() * (l + 1.0);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lazily allocates the adjoint of input `j`, skipping inputs that do not
/// lead to any parameter.
fn grad_slot<'a>(nodes: &[Node], adj: &'a mut [Option<Tensor>], j: usize) -> Option<&'a mut Tensor> {
    if !nodes[j].needs_grad {
        return None;
    }
    let v = &nodes[j].value;
    Some(adj[j].get_or_insert_with(|| Tensor::zeros(v.rows(), v.cols())))
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
            *o += x;
        }
    }
    out
}
