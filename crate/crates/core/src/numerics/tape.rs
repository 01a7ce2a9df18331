//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`Tape`] records a forward computation as a sequence of nodes; values
//! are computed eagerly at recording time. [`Tape::backward`] walks the
//! recording in reverse and produces exact gradients for every parameter
//! leaf. Constant leaves (features, masks, frozen posterior weights) take
//! no part in gradient propagation.

use super::{sigmoid, Mat, NumericsError, ParamId, ParamStore, PROB_CLIP};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant leaf; never receives gradient.
    Const,
    /// Parameter leaf bound to a store entry.
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + row` where `row` is `1 x c`, broadcast over the rows of `a`.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// `x * s` where `s` is a `1 x 1` node.
    MulScalarNode(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    MulElem(NodeId, NodeId),
    /// Row `i` of the output is row `idx[i]` of the input.
    GatherRows(NodeId, Vec<usize>),
    /// Row `idx[i]` of the (`out_rows` x c) output accumulates row `i` of the input.
    ScatterAddRows { src: NodeId, idx: Vec<usize> },
    /// Row `i` scaled by the constant `coeffs[i]`.
    ScaleRows(NodeId, Vec<f64>),
    MeanRows(NodeId),
    RepeatRows(NodeId),
    /// Concatenate the rows of the inputs (equal column counts).
    VStack(Vec<NodeId>),
    Transpose(NodeId),
    SumAll(NodeId),
    /// Row sums: (r x c) -> (r x 1).
    RowSums(NodeId),
    /// Row-wise `softmax(row / tau)` with max-subtraction.
    SoftmaxRows(NodeId, f64),
    /// Row-wise `log softmax(row / tau)`.
    LogSoftmaxRows(NodeId, f64),
    /// Elementwise `ln(clamp(x, PROB_CLIP, 1 - PROB_CLIP))`; zero gradient where clamped.
    LogClipped(NodeId),
    /// Elementwise `ln(clamp(sigmoid(x), PROB_CLIP, 1 - PROB_CLIP))` computed via softplus.
    LogSigmoid(NodeId),
    /// Column-wise log-sum-exp: (m x c) -> (1 x c).
    LogSumExpCols(NodeId),
    /// Elementwise `x.powf(e)` for constant `e >= 0`; inputs must be nonnegative.
    PowConst(NodeId, f64),
    /// Rows scaled to unit Euclidean norm (zero rows pass through).
    NormalizeRows(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-parameter gradients produced by [`Tape::backward`].
pub struct TapeGrads {
    grads: Vec<(ParamId, Mat)>,
}

impl TapeGrads {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().map(|(id, m)| (*id, m))
    }

    /// Scale every gradient in place.
    pub fn scale(&mut self, s: f64) {
        for (_, m) in &mut self.grads {
            *m = m.scale(s);
        }
    }

    /// Add into the store's gradient accumulators, in leaf recording order.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        for (id, m) in &self.grads {
            store.accumulate_grad(*id, m)?;
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalarNode(a, b)
            | Op::MulElem(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::VStack(inputs) => inputs.iter().any(|n| self.nodes[n.0].needs_grad),
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows { src: a, .. }
            | Op::ScaleRows(a, _)
            | Op::MeanRows(a)
            | Op::RepeatRows(a)
            | Op::Transpose(a)
            | Op::SumAll(a)
            | Op::RowSums(a)
            | Op::SoftmaxRows(a, _)
            | Op::LogSoftmaxRows(a, _)
            | Op::LogClipped(a)
            | Op::LogSigmoid(a)
            | Op::LogSumExpCols(a)
            | Op::PowConst(a, _)
            | Op::NormalizeRows(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = &self.nodes[id.0].value;
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    // ----- leaves ---------------------------------------------------------

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    // ----- ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(v, Op::Add(a, b))
    }

    /// Broadcast-add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let am = &self.nodes[a.0].value;
        let rm = &self.nodes[row.0].value;
        assert_eq!(rm.rows(), 1, "add_row expects a 1-row bias");
        assert_eq!(am.cols(), rm.cols(), "add_row column mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(rm.row(0)) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a.0].value.scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    /// Multiply every entry of `x` by the scalar node `s` (`1 x 1`).
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s.0].value.shape(), (1, 1));
        let sv = self.nodes[s.0].value.get(0, 0);
        let v = self.nodes[x.0].value.scale(sv);
        self.push(v, Op::MulScalarNode(x, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mul_elem(&self.nodes[b.0].value);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let am = &self.nodes[a.0].value;
        let mut v = Mat::zeros(idx.len(), am.cols());
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(am.row(r));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn scatter_add_rows(&mut self, src: NodeId, idx: Vec<usize>, out_rows: usize) -> NodeId {
        let sm = &self.nodes[src.0].value;
        assert_eq!(sm.rows(), idx.len(), "scatter_add_rows index mismatch");
        let mut v = Mat::zeros(out_rows, sm.cols());
        for (i, &r) in idx.iter().enumerate() {
            for (o, &s) in v.row_mut(r).iter_mut().zip(sm.row(i)) {
                *o += s;
            }
        }
        self.push(v, Op::ScatterAddRows { src, idx })
    }

    pub fn scale_rows(&mut self, a: NodeId, coeffs: Vec<f64>) -> NodeId {
        let am = &self.nodes[a.0].value;
        assert_eq!(am.rows(), coeffs.len(), "scale_rows coeff mismatch");
        let mut v = am.clone();
        for (r, &c) in coeffs.iter().enumerate() {
            for o in v.row_mut(r) {
                *o *= c;
            }
        }
        self.push(v, Op::ScaleRows(a, coeffs))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let am = &self.nodes[a.0].value;
        assert!(am.rows() > 0, "mean_rows on empty matrix");
        let inv = 1.0 / am.rows() as f64;
        let mut v = Mat::zeros(1, am.cols());
        for r in 0..am.rows() {
            for (o, &x) in v.row_mut(0).iter_mut().zip(am.row(r)) {
                *o += x;
            }
        }
        for o in v.row_mut(0) {
            *o *= inv;
        }
        self.push(v, Op::MeanRows(a))
    }

    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let am = &self.nodes[a.0].value;
        assert_eq!(am.rows(), 1, "repeat_rows expects a 1-row input");
        let mut v = Mat::zeros(n, am.cols());
        for r in 0..n {
            v.row_mut(r).copy_from_slice(am.row(0));
        }
        self.push(v, Op::RepeatRows(a))
    }

    pub fn vstack(&mut self, inputs: Vec<NodeId>) -> NodeId {
        assert!(!inputs.is_empty(), "vstack of nothing");
        let cols = self.nodes[inputs[0].0].value.cols();
        let total: usize = inputs.iter().map(|n| self.nodes[n.0].value.rows()).sum();
        let mut v = Mat::zeros(total, cols);
        let mut at = 0;
        for n in &inputs {
            let m = &self.nodes[n.0].value;
            assert_eq!(m.cols(), cols, "vstack column mismatch");
            for r in 0..m.rows() {
                v.row_mut(at).copy_from_slice(m.row(r));
                at += 1;
            }
        }
        self.push(v, Op::VStack(inputs))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Mat::from_vec(1, 1, vec![s]).unwrap(), Op::SumAll(a))
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let am = &self.nodes[a.0].value;
        let mut v = Mat::zeros(am.rows(), 1);
        for r in 0..am.rows() {
            v.set(r, 0, am.row(r).iter().sum());
        }
        self.push(v, Op::RowSums(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId, tau: f64) -> NodeId {
        assert!(tau > 0.0, "softmax temperature must be positive");
        let am = &self.nodes[a.0].value;
        let mut v = am.clone();
        for r in 0..v.rows() {
            softmax_row_inplace(v.row_mut(r), tau);
        }
        self.push(v, Op::SoftmaxRows(a, tau))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId, tau: f64) -> NodeId {
        assert!(tau > 0.0, "softmax temperature must be positive");
        let am = &self.nodes[a.0].value;
        let mut v = am.clone();
        for r in 0..v.rows() {
            log_softmax_row_inplace(v.row_mut(r), tau);
        }
        self.push(v, Op::LogSoftmaxRows(a, tau))
    }

    pub fn log_clipped(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .map(|x| x.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln());
        self.push(v, Op::LogClipped(a))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(log_sigmoid_clipped);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn log_sum_exp_cols(&mut self, a: NodeId) -> NodeId {
        let am = &self.nodes[a.0].value;
        assert!(am.rows() > 0, "log_sum_exp_cols on empty matrix");
        let mut v = Mat::zeros(1, am.cols());
        for c in 0..am.cols() {
            let mut m = f64::NEG_INFINITY;
            for r in 0..am.rows() {
                m = m.max(am.get(r, c));
            }
            let mut s = 0.0;
            for r in 0..am.rows() {
                s += (am.get(r, c) - m).exp();
            }
            v.set(0, c, m + s.ln());
        }
        self.push(v, Op::LogSumExpCols(a))
    }

    pub fn pow_const(&mut self, a: NodeId, e: f64) -> NodeId {
        assert!(e >= 0.0, "pow_const exponent must be nonnegative");
        let v = self.nodes[a.0].value.map(|x| x.powf(e));
        self.push(v, Op::PowConst(a, e))
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let am = &self.nodes[a.0].value;
        let mut v = am.clone();
        for r in 0..v.rows() {
            let n = row_norm(v.row(r));
            if n > 0.0 {
                for x in v.row_mut(r) {
                    *x /= n;
                }
            }
        }
        self.push(v, Op::NormalizeRows(a))
    }

    // ----- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` node with respect to every parameter
    /// leaf on the tape. Fails if the loss value is not finite.
    pub fn backward(&self, loss: NodeId) -> Result<TapeGrads, NumericsError> {
        let lm = &self.nodes[loss.0].value;
        assert_eq!(lm.shape(), (1, 1), "backward expects a scalar loss node");
        let lv = lm.get(0, 0);
        if !lv.is_finite() {
            return Err(NumericsError::NonFiniteLoss(lv));
        }

        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Mat::zeros(node.value.rows(), node.value.cols()));
                out.push((pid, g));
            }
        }
        Ok(TapeGrads { grads: out })
    }

    fn accum(&self, grads: &mut [Option<Mat>], target: NodeId, delta: Mat) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |n: &NodeId| &self.nodes[n.0].value;
        match &self.nodes[i].op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                // d(AB) -> dA = G B^T, dB = A^T G
                let da = g.matmul(&val(b).transpose());
                let db = val(a).transpose().matmul(g);
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                let mut dr = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accum(grads, *row, dr);
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.scale(*s)),
            Op::AddConst(a) => self.accum(grads, *a, g.clone()),
            Op::MulScalarNode(x, s) => {
                let sv = val(s).get(0, 0);
                self.accum(grads, *x, g.scale(sv));
                let ds = val(x).mul_elem(g).sum();
                self.accum(grads, *s, Mat::from_vec(1, 1, vec![ds]).unwrap());
            }
            Op::Relu(a) => {
                let am = val(a);
                let mut d = g.clone();
                for (o, &x) in d.data_mut().iter_mut().zip(am.data()) {
                    if x <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[i].value;
                let mut d = g.clone();
                for (o, &p) in d.data_mut().iter_mut().zip(out.data()) {
                    *o *= p * (1.0 - p);
                }
                self.accum(grads, *a, d);
            }
            Op::MulElem(a, b) => {
                self.accum(grads, *a, g.mul_elem(val(b)));
                self.accum(grads, *b, g.mul_elem(val(a)));
            }
            Op::GatherRows(a, idx) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows(), am.cols());
                for (i_out, &r) in idx.iter().enumerate() {
                    for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(i_out)) {
                        *o += x;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::ScatterAddRows { src, idx, .. } => {
                let sm = val(src);
                let mut d = Mat::zeros(sm.rows(), sm.cols());
                for (i_src, &r) in idx.iter().enumerate() {
                    d.row_mut(i_src).copy_from_slice(g.row(r));
                }
                self.accum(grads, *src, d);
            }
            Op::ScaleRows(a, coeffs) => {
                let mut d = g.clone();
                for (r, &c) in coeffs.iter().enumerate() {
                    for o in d.row_mut(r) {
                        *o *= c;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let am = val(a);
                let inv = 1.0 / am.rows() as f64;
                let mut d = Mat::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o = x * inv;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::RepeatRows(a) => {
                let mut d = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::VStack(inputs) => {
                let mut at = 0;
                for n in inputs {
                    let m = val(n);
                    let mut d = Mat::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        d.row_mut(r).copy_from_slice(g.row(at));
                        at += 1;
                    }
                    self.accum(grads, *n, d);
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, g.transpose()),
            Op::SumAll(a) => {
                let am = val(a);
                let d = Mat::filled(am.rows(), am.cols(), g.get(0, 0));
                self.accum(grads, *a, d);
            }
            Op::RowSums(a) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    let gv = g.get(r, 0);
                    for o in d.row_mut(r) {
                        *o = gv;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::SoftmaxRows(a, tau) => {
                // d logits_j = p_j (g_j - sum_k g_k p_k) / tau
                let p = &self.nodes[i].value;
                let mut d = Mat::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
                    for ((o, &gj), &pj) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(p.row(r)) {
                        *o = pj * (gj - dot) / tau;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LogSoftmaxRows(a, tau) => {
                // d logits_j = (g_j - p_j sum_k g_k) / tau
                let lp = &self.nodes[i].value;
                let mut d = Mat::zeros(lp.rows(), lp.cols());
                for r in 0..lp.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((o, &gj), &lpj) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(lp.row(r)) {
                        *o = (gj - lpj.exp() * gsum) / tau;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LogClipped(a) => {
                let am = val(a);
                let mut d = g.clone();
                for (o, &x) in d.data_mut().iter_mut().zip(am.data()) {
                    if x > PROB_CLIP && x < 1.0 - PROB_CLIP {
                        *o /= x;
                    } else {
                        *o = 0.0;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                let am = val(a);
                let mut d = g.clone();
                for (o, &x) in d.data_mut().iter_mut().zip(am.data()) {
                    let raw = -softplus(-x);
                    if raw > LOG_CLIP_LO && raw < LOG_CLIP_HI {
                        *o *= sigmoid(-x);
                    } else {
                        *o = 0.0;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LogSumExpCols(a) => {
                let am = val(a);
                let out = &self.nodes[i].value;
                let mut d = Mat::zeros(am.rows(), am.cols());
                for c in 0..am.cols() {
                    let gv = g.get(0, c);
                    let lse = out.get(0, c);
                    for r in 0..am.rows() {
                        d.set(r, c, gv * (am.get(r, c) - lse).exp());
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::PowConst(a, e) => {
                let am = val(a);
                let mut d = g.clone();
                if *e == 0.0 {
                    for o in d.data_mut() {
                        *o = 0.0;
                    }
                } else {
                    for (o, &x) in d.data_mut().iter_mut().zip(am.data()) {
                        *o *= e * x.powf(e - 1.0);
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::NormalizeRows(a) => {
                let am = val(a);
                let out = &self.nodes[i].value;
                let mut d = Mat::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    let n = row_norm(am.row(r));
                    if n == 0.0 {
                        continue;
                    }
                    let ydotg: f64 = out.row(r).iter().zip(g.row(r)).map(|(y, x)| y * x).sum();
                    for ((o, &gj), &yj) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(out.row(r)) {
                        *o = (gj - yj * ydotg) / n;
                    }
                }
                self.accum(grads, *a, d);
            }
        }
    }
}

/// Lower clip for log-probabilities: `ln(PROB_CLIP)`.
pub(crate) const LOG_CLIP_LO: f64 = -27.631021115928547; // ln(1e-12)
/// Upper clip for log-probabilities: `ln(1 - PROB_CLIP)`.
pub(crate) const LOG_CLIP_HI: f64 = -1.0000000000005e-12;

/// `ln(1 + e^t)` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `ln(sigmoid(x))` clamped to the probability-clipping window.
pub(crate) fn log_sigmoid_clipped(x: f64) -> f64 {
    (-softplus(-x)).clamp(LOG_CLIP_LO, LOG_CLIP_HI)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn softmax_row_inplace(row: &mut [f64], tau: f64) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - m) / tau).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn log_softmax_row_inplace(row: &mut [f64], tau: f64) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m) / tau;
        sum += x.exp();
    }
    let lse = sum.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, glorot_uniform, seeded_rng};
    use rand::Rng;

    /// Backward + finite differences for a tape-built scalar loss.
    fn fd_error<F>(build: F, store: &mut ParamStore) -> f64
    where
        F: Fn(&ParamStore, &mut Tape) -> NodeId,
    {
        let mut tape = Tape::new();
        let loss = build(store, &mut tape);
        store.zero_grads();
        tape.backward(loss)
            .unwrap()
            .accumulate_into(store)
            .unwrap();
        grad_check(
            |p| {
                let mut t = Tape::new();
                let l = build(p, &mut t);
                t.scalar(l)
            },
            store,
            1e-5,
        )
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = seeded_rng(seed);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = seeded_rng(42);
        let mut store = ParamStore::new();
        let w1 = store.register("w1", glorot_uniform(3, 4, &mut rng));
        let b1 = store.register("b1", glorot_uniform(1, 4, &mut rng));
        let w2 = store.register("w2", glorot_uniform(4, 2, &mut rng));
        let b2 = store.register("b2", glorot_uniform(1, 2, &mut rng));
        let x = random_mat(5, 3, 7);
        let err = fd_error(
            |p, t| {
                let xn = t.constant(x.clone());
                let w1n = t.param(p, w1);
                let b1n = t.param(p, b1);
                let w2n = t.param(p, w2);
                let b2n = t.param(p, b2);
                let h = t.matmul(xn, w1n);
                let h = t.add_row(h, b1n);
                let h = t.relu(h);
                let o = t.matmul(h, w2n);
                let o = t.add_row(o, b2n);
                let o = t.sigmoid(o);
                t.sum_all(o)
            },
            &mut store,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        // gather/scatter/scale_rows/mean/vstack/transpose in one composite.
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let w = store.register("w", glorot_uniform(4, 3, &mut rng));
        let idx_src = vec![0, 2, 1, 3, 2];
        let idx_dst = vec![1, 0, 3, 2, 0];
        let coeffs = vec![0.5, -1.25, 2.0, 0.75, 1.5];
        let err = fd_error(
            |p, t| {
                let wn = t.param(p, w);
                let gathered = t.gather_rows(wn, idx_src.clone());
                let scaled = t.scale_rows(gathered, coeffs.clone());
                let scattered = t.scatter_add_rows(scaled, idx_dst.clone(), 4);
                let mean = t.mean_rows(scattered);
                let rep = t.repeat_rows(mean, 3);
                let tr = t.transpose(rep);
                let stacked = t.vstack(vec![tr, wn]);
                let sq = t.mul_elem(stacked, stacked);
                t.sum_all(sq)
            },
            &mut store,
        );
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn softmax_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let w = store.register("w", random_mat(3, 4, 11));
        let probe = random_mat(3, 4, 12);
        for tau in [0.5, 1.0, 3.0] {
            let err = fd_error(
                |p, t| {
                    let wn = t.param(p, w);
                    let sm = t.softmax_rows(wn, tau);
                    let lsm = t.log_softmax_rows(wn, tau);
                    let pc = t.constant(probe.clone());
                    let a = t.mul_elem(sm, pc);
                    let pc2 = t.constant(probe.clone());
                    let b = t.mul_elem(lsm, pc2);
                    let s = t.add(a, b);
                    t.sum_all(s)
                },
                &mut store,
            );
            assert!(err < 1e-6, "tau={tau}: max relative error {err}");
        }
    }

    #[test]
    fn log_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let w = store.register("w", random_mat(2, 5, 21));
        let err = fd_error(
            |p, t| {
                let wn = t.param(p, w);
                let ls = t.log_sigmoid(wn);
                let sg = t.sigmoid(wn);
                let lc = t.log_clipped(sg);
                let lse = t.log_sum_exp_cols(wn);
                let a = t.sum_all(ls);
                let b = t.sum_all(lc);
                let c = t.sum_all(lse);
                let ab = t.add(a, b);
                t.add(ab, c)
            },
            &mut store,
        );
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn scalar_pow_and_normalize_match_finite_differences() {
        let mut store = ParamStore::new();
        let w = store.register("w", random_mat(3, 3, 31));
        let s = store.register("s", Mat::from_vec(1, 1, vec![0.37]).unwrap());
        let err = fd_error(
            |p, t| {
                let wn = t.param(p, w);
                let sn = t.param(p, s);
                let sp1 = t.add_const(sn, 1.0);
                let scaled = t.mul_scalar_node(wn, sp1);
                let nrm = t.normalize_rows(scaled);
                let sg = t.sigmoid(nrm);
                let pw = t.pow_const(sg, 2.5);
                t.sum_all(pw)
            },
            &mut store,
        );
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn pow_zero_has_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Mat::from_vec(1, 2, vec![0.25, 0.75]).unwrap());
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let pw = tape.pow_const(wn, 0.0);
        let loss = tape.sum_all(pw);
        assert_eq!(tape.scalar(loss), 2.0);
        tape.backward(loss)
            .unwrap()
            .accumulate_into(&mut store)
            .unwrap();
        assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_sum_exp_of_single_row_is_identity() {
        let mut tape = Tape::new();
        let values = vec![-3.125, 0.0, 7.5, -27.0];
        let x = tape.constant(Mat::from_vec(1, 4, values.clone()).unwrap());
        let lse = tape.log_sum_exp_cols(x);
        assert_eq!(tape.value(lse).data(), values.as_slice());
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut store = ParamStore::new();
        let w = store.register("w", Mat::from_vec(1, 1, vec![1.0]).unwrap());
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let big = tape.scale(wn, f64::INFINITY);
        let loss = tape.sum_all(big);
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn reused_parameter_leaves_accumulate() {
        // The same parameter recorded as two leaves contributes twice.
        let mut store = ParamStore::new();
        let w = store.register("w", Mat::from_vec(1, 2, vec![2.0, 3.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let s = tape.add(a, b);
        let loss = tape.sum_all(s);
        tape.backward(loss)
            .unwrap()
            .accumulate_into(&mut store)
            .unwrap();
        assert_eq!(store.grad(w).data(), &[2.0, 2.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_clipping_window() {
        assert_eq!(log_sigmoid_clipped(-1000.0), LOG_CLIP_LO);
        assert_eq!(log_sigmoid_clipped(1000.0), LOG_CLIP_HI);
        assert!((log_sigmoid_clipped(0.0) + 2.0f64.ln()).abs() < 1e-15);
    }
}
