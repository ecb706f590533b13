//! Recording computation graph with exact reverse-mode gradients.
//!
//! The forward pass appends nodes in topological order and evaluates them
//! eagerly; every node keeps its value, so the graph doubles as the activation
//! record. Two consumers build on this:
//!
//! * `backward` — reverse-mode accumulation of d(output)/d(node) for every
//!   node, seeded at a scalar output node. The adjoint at a node is exactly
//!   the derivative of the output with respect to that node's value treated as
//!   an independent input of the downstream computation.
//! * `replay_scalar` — re-runs only the downstream part of the graph after
//!   overriding a single entry of one node's value. This is the finite-
//!   difference side of the same contract, kept deliberately free of any
//!   gradient code.
//!
//! All math is sequential f64, so results are bit-stable across runs and
//! thread counts.

use crate::tensor::Mat;

pub type NodeId = usize;

/// Epsilon inside RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// Additive attention-mask value for disallowed positions. Finite so that
/// arithmetic never produces NaN, yet exp(-1e30 + s) == 0 exactly.
pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf holding externally supplied data (embeddings, weights, masks).
    Const,
    /// a @ b
    MatMul(NodeId, NodeId),
    /// a @ b^T
    MatMulTransB(NodeId, NodeId),
    /// Elementwise a + b (same shape).
    Add(NodeId, NodeId),
    /// Broadcast add of a 1 x C bias row onto an R x C matrix.
    AddRow(NodeId, NodeId),
    /// a * factor
    Scale(NodeId, f64),
    /// Row-wise x / sqrt(mean(x^2) + RMS_EPS), no learned scale.
    RmsNorm(NodeId),
    /// Exact erf-based GeLU, elementwise.
    Gelu(NodeId),
    /// Row-wise softmax (inputs already include any additive mask).
    SoftmaxRows(NodeId),
    /// Row-wise log-softmax.
    LogSoftmaxRows(NodeId),
    /// Columns [start, start+len) of a.
    SliceCols(NodeId, usize, usize),
    /// Horizontal concatenation.
    ConcatCols(Vec<NodeId>),
    /// Selected (row, col) entries of a, as an n x 1 column.
    SelectEntries(NodeId, Vec<(usize, usize)>),
    /// Sum of all entries, as 1 x 1.
    SumAll(NodeId),
    /// Elementwise exp.
    Exp(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Const => vec![],
            Op::MatMul(a, b) | Op::MatMulTransB(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::RmsNorm(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SliceCols(a, _, _)
            | Op::SelectEntries(a, _)
            | Op::SumAll(a)
            | Op::Exp(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Mat,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.nodes.push(Node {
            op: Op::Const,
            value,
        });
        self.nodes.len() - 1
    }

    /// Appends an op, evaluating it immediately. Inputs must already exist.
    pub fn push(&mut self, op: Op) -> NodeId {
        for &input in &op.inputs() {
            assert!(input < self.nodes.len(), "op references a future node");
        }
        let value = eval_op(&op, &|id| &self.nodes[id].value);
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    /// Reverse-mode gradients of the scalar at `seed` with respect to every
    /// node. Nodes with no path to the seed get `None`.
    pub fn backward(&self, seed: NodeId) -> Vec<Option<Mat>> {
        let seed_value = &self.nodes[seed].value;
        assert_eq!(
            seed_value.shape(),
            (1, 1),
            "backward seed must be a 1x1 scalar node"
        );
        let mut adjoints: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        adjoints[seed] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=seed).rev() {
            let Some(grad) = adjoints[id].take() else {
                continue;
            };
            self.accumulate_inputs(id, &grad, &mut adjoints);
            adjoints[id] = Some(grad);
        }
        adjoints
    }

    fn accumulate_inputs(&self, id: NodeId, grad: &Mat, adjoints: &mut [Option<Mat>]) {
        let node = &self.nodes[id];
        let mut add = |target: NodeId, delta: Mat| {
            match &mut adjoints[target] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Const => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add(*a, grad.matmul_transb(bv));
                add(*b, av.matmul_transa(grad));
            }
            Op::MatMulTransB(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add(*a, grad.matmul(bv));
                add(*b, grad.matmul_transa(av));
            }
            Op::Add(a, b) => {
                add(*a, grad.clone());
                add(*b, grad.clone());
            }
            Op::AddRow(a, row) => {
                add(*a, grad.clone());
                let mut row_grad = Mat::zeros(1, grad.cols);
                for r in 0..grad.rows {
                    for c in 0..grad.cols {
                        row_grad.data[c] += grad.get(r, c);
                    }
                }
                add(*row, row_grad);
            }
            Op::Scale(a, factor) => {
                let mut g = grad.clone();
                for v in &mut g.data {
                    *v *= factor;
                }
                add(*a, g);
            }
            Op::RmsNorm(a) => {
                let x = &self.nodes[*a].value;
                let mut dx = Mat::zeros(x.rows, x.cols);
                let c = x.cols as f64;
                for r in 0..x.rows {
                    let xr = x.row(r);
                    let gr = grad.row(r);
                    let mean_sq = xr.iter().map(|v| v * v).sum::<f64>() / c;
                    let rho = (mean_sq + RMS_EPS).sqrt();
                    let dot: f64 = gr.iter().zip(xr).map(|(g, v)| g * v).sum();
                    let dxr = dx.row_mut(r);
                    for j in 0..xr.len() {
                        dxr[j] = gr[j] / rho - xr[j] * dot / (c * rho * rho * rho);
                    }
                }
                add(*a, dx);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let mut dx = grad.clone();
                for (g, &v) in dx.data.iter_mut().zip(&x.data) {
                    *g *= gelu_prime(v);
                }
                add(*a, dx);
            }
            Op::SoftmaxRows(_a) => {
                let y = &node.value;
                let a = match &node.op {
                    Op::SoftmaxRows(a) => *a,
                    _ => unreachable!(),
                };
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = grad.row(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(g, v)| g * v).sum();
                    let dxr = dx.row_mut(r);
                    for j in 0..yr.len() {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add(a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = grad.row(r);
                    let total: f64 = gr.iter().sum();
                    let dxr = dx.row_mut(r);
                    for j in 0..yr.len() {
                        dxr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                add(*a, dx);
            }
            Op::SliceCols(a, start, len) => {
                let src = &self.nodes[*a].value;
                let mut dx = Mat::zeros(src.rows, src.cols);
                for r in 0..grad.rows {
                    for c in 0..*len {
                        dx.set(r, start + c, grad.get(r, c));
                    }
                }
                add(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let cols = self.nodes[part].value.cols;
                    let mut dp = Mat::zeros(grad.rows, cols);
                    for r in 0..grad.rows {
                        for c in 0..cols {
                            dp.set(r, c, grad.get(r, offset + c));
                        }
                    }
                    add(part, dp);
                    offset += cols;
                }
            }
            Op::SelectEntries(a, indices) => {
                let src = &self.nodes[*a].value;
                let mut dx = Mat::zeros(src.rows, src.cols);
                for (k, &(r, c)) in indices.iter().enumerate() {
                    dx.data[r * dx.cols + c] += grad.get(k, 0);
                }
                add(*a, dx);
            }
            Op::SumAll(a) => {
                let src = &self.nodes[*a].value;
                let g = grad.get(0, 0);
                let mut dx = Mat::zeros(src.rows, src.cols);
                for v in &mut dx.data {
                    *v = g;
                }
                add(*a, dx);
            }
            Op::Exp(a) => {
                let y = &node.value;
                let mut dx = grad.clone();
                for (g, &v) in dx.data.iter_mut().zip(&y.data) {
                    *g *= v;
                }
                add(*a, dx);
            }
        }
    }

    /// Overrides one entry of node `target`'s value and recomputes only the
    /// nodes downstream of it, returning the scalar at `output`.
    ///
    /// This is a pure forward replay — no gradient code is involved — so it
    /// serves as the independent finite-difference oracle.
    pub fn replay_scalar(
        &self,
        target: NodeId,
        row: usize,
        col: usize,
        new_value: f64,
        output: NodeId,
    ) -> f64 {
        assert!(target <= output, "override must not be downstream of output");
        let mut scratch: Vec<Option<Mat>> = vec![None; output + 1];
        let mut overridden = self.nodes[target].value.clone();
        overridden.set(row, col, new_value);
        scratch[target] = Some(overridden);

        for id in target + 1..=output {
            let op = &self.nodes[id].op;
            let affected = op.inputs().iter().any(|&i| scratch[i].is_some());
            if affected {
                let value = eval_op(op, &|i: NodeId| {
                    scratch[i].as_ref().unwrap_or(&self.nodes[i].value)
                });
                scratch[id] = Some(value);
            }
        }
        let out = scratch[output].as_ref().unwrap_or(&self.nodes[output].value);
        assert_eq!(out.shape(), (1, 1), "replay output must be scalar");
        out.get(0, 0)
    }
}

fn eval_op<'a>(op: &Op, get: &dyn Fn(NodeId) -> &'a Mat) -> Mat {
    match op {
        Op::Const => unreachable!("constants are installed, not evaluated"),
        Op::MatMul(a, b) => get(*a).matmul(get(*b)),
        Op::MatMulTransB(a, b) => get(*a).matmul_transb(get(*b)),
        Op::Add(a, b) => {
            let (av, bv) = (get(*a), get(*b));
            assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
            let mut out = av.clone();
            out.add_assign(bv);
            out
        }
        Op::AddRow(a, row) => {
            let (av, rv) = (get(*a), get(*row));
            assert_eq!(rv.rows, 1, "bias row must be 1 x C");
            assert_eq!(av.cols, rv.cols, "bias width mismatch");
            let mut out = av.clone();
            for r in 0..out.rows {
                let out_row = out.row_mut(r);
                for (v, b) in out_row.iter_mut().zip(&rv.data) {
                    *v += b;
                }
            }
            out
        }
        Op::Scale(a, factor) => {
            let mut out = get(*a).clone();
            for v in &mut out.data {
                *v *= factor;
            }
            out
        }
        Op::RmsNorm(a) => {
            let x = get(*a);
            let mut out = Mat::zeros(x.rows, x.cols);
            let c = x.cols as f64;
            for r in 0..x.rows {
                let xr = x.row(r);
                let mean_sq = xr.iter().map(|v| v * v).sum::<f64>() / c;
                let rho = (mean_sq + RMS_EPS).sqrt();
                let out_row = out.row_mut(r);
                for (o, &v) in out_row.iter_mut().zip(xr) {
                    *o = v / rho;
                }
            }
            out
        }
        Op::Gelu(a) => {
            let mut out = get(*a).clone();
            for v in &mut out.data {
                *v = gelu(*v);
            }
            out
        }
        Op::SoftmaxRows(a) => {
            let x = get(*a);
            let mut out = Mat::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let xr = x.row(r);
                let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let out_row = out.row_mut(r);
                let mut total = 0.0;
                for (o, &v) in out_row.iter_mut().zip(xr) {
                    *o = (v - max).exp();
                    total += *o;
                }
                for o in out_row.iter_mut() {
                    *o /= total;
                }
            }
            out
        }
        Op::LogSoftmaxRows(a) => {
            let x = get(*a);
            let mut out = Mat::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let xr = x.row(r);
                let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_sum = xr.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                let out_row = out.row_mut(r);
                for (o, &v) in out_row.iter_mut().zip(xr) {
                    *o = v - log_sum;
                }
            }
            out
        }
        Op::SliceCols(a, start, len) => {
            let x = get(*a);
            assert!(start + len <= x.cols, "slice out of range");
            let mut out = Mat::zeros(x.rows, *len);
            for r in 0..x.rows {
                let xr = x.row(r);
                out.row_mut(r).copy_from_slice(&xr[*start..start + len]);
            }
            out
        }
        Op::ConcatCols(parts) => {
            let mats: Vec<&Mat> = parts.iter().map(|&p| get(p)).collect();
            let rows = mats.first().map_or(0, |m| m.rows);
            let cols: usize = mats.iter().map(|m| m.cols).sum();
            let mut out = Mat::zeros(rows, cols);
            for r in 0..rows {
                let out_row = out.row_mut(r);
                let mut offset = 0;
                for m in &mats {
                    assert_eq!(m.rows, rows, "concat row mismatch");
                    out_row[offset..offset + m.cols].copy_from_slice(m.row(r));
                    offset += m.cols;
                }
            }
            out
        }
        Op::SelectEntries(a, indices) => {
            let x = get(*a);
            let mut out = Mat::zeros(indices.len(), 1);
            for (k, &(r, c)) in indices.iter().enumerate() {
                out.data[k] = x.get(r, c);
            }
            out
        }
        Op::SumAll(a) => {
            let total: f64 = get(*a).data.iter().sum();
            Mat::from_vec(1, 1, vec![total])
        }
        Op::Exp(a) => {
            let mut out = get(*a).clone();
            for v in &mut out.data {
                *v = v.exp();
            }
            out
        }
    }
}

// ── activation functions ──────────────────────────────────────────────────

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF.
fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GeLU: x * Phi(x).
pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

/// d/dx GeLU = Phi(x) + x * phi(x).
pub fn gelu_prime(x: f64) -> f64 {
    phi_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(g: &Graph, node: NodeId, row: usize, col: usize, out: NodeId) -> f64 {
        let base = g.value(node).get(row, col);
        let eps = 1e-6;
        let plus = g.replay_scalar(node, row, col, base + eps, out);
        let minus = g.replay_scalar(node, row, col, base - eps, out);
        (plus - minus) / (2.0 * eps)
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.15865525393145707).abs() < 1e-15);
    }

    #[test]
    fn linear_chain_gradient_is_exact() {
        // P = 0.3 * h: backward gives exactly 0.3; the replay-based central
        // difference has no truncation error for a linear map, only the
        // rounding from representing 2.0 +/- 1e-6.
        let mut g = Graph::new();
        let h = g.constant(Mat::from_vec(1, 1, vec![2.0]));
        let p = g.push(Op::Scale(h, 0.3));
        let adj = g.backward(p);
        assert_eq!(adj[h].as_ref().unwrap().get(0, 0), 0.3);
        let fd = central_diff(&g, h, 0, 0, p);
        assert!((fd - 0.3).abs() < 1e-9, "fd = {fd}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut g = Graph::new();
        let a = g.constant(Mat::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]));
        let b = g.constant(Mat::from_rows(&[vec![1.5, 0.0], vec![-0.5, 1.0]]));
        let c = g.push(Op::MatMul(a, b));
        let e = g.push(Op::Exp(c));
        let s = g.push(Op::SumAll(e));
        let adj = g.backward(s);
        for (node, rows, cols) in [(a, 2, 2), (b, 2, 2)] {
            for r in 0..rows {
                for cidx in 0..cols {
                    let fd = central_diff(&g, node, r, cidx, s);
                    let bp = adj[node].as_ref().unwrap().get(r, cidx);
                    assert!(
                        (fd - bp).abs() <= 1e-6 * fd.abs().max(bp.abs()).max(1.0),
                        "node {node} [{r},{cidx}]: fd {fd} vs bp {bp}"
                    );
                }
            }
        }
    }

    #[test]
    fn rmsnorm_softmax_gelu_pipeline_gradients() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_rows(&[
            vec![0.3, -0.7, 1.2, 0.1],
            vec![-0.2, 0.4, 0.0, 0.9],
        ]));
        let n = g.push(Op::RmsNorm(x));
        let ge = g.push(Op::Gelu(n));
        let sm = g.push(Op::SoftmaxRows(ge));
        let ls = g.push(Op::LogSoftmaxRows(sm));
        let sel = g.push(Op::SelectEntries(ls, vec![(0, 2), (1, 3)]));
        let total = g.push(Op::SumAll(sel));
        let p = g.push(Op::Exp(total));
        let adj = g.backward(p);
        for r in 0..2 {
            for c in 0..4 {
                let fd = central_diff(&g, x, r, c, p);
                let bp = adj[x].as_ref().unwrap().get(r, c);
                let scale = fd.abs().max(bp.abs());
                assert!(
                    (fd - bp).abs() <= 1e-9 + 1e-6 * scale,
                    "[{r},{c}]: fd {fd} vs bp {bp}"
                );
            }
        }
    }

    #[test]
    fn slice_concat_and_transb_gradients() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_rows(&[vec![0.2, -0.4, 0.6, 0.8]]));
        let left = g.push(Op::SliceCols(x, 0, 2));
        let right = g.push(Op::SliceCols(x, 2, 2));
        let prod = g.push(Op::MatMulTransB(left, right));
        let cat = g.push(Op::ConcatCols(vec![left, prod]));
        let s = g.push(Op::SumAll(cat));
        let e = g.push(Op::Exp(s));
        let adj = g.backward(e);
        for c in 0..4 {
            let fd = central_diff(&g, x, 0, c, e);
            let bp = adj[x].as_ref().unwrap().get(0, c);
            assert!(
                (fd - bp).abs() <= 1e-9 + 1e-6 * fd.abs().max(bp.abs()),
                "[0,{c}]: fd {fd} vs bp {bp}"
            );
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]));
        let sm = g.push(Op::SoftmaxRows(x));
        for r in 0..2 {
            let total: f64 = g.value(sm).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_scores_get_zero_probability() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_rows(&[vec![0.5, MASK_NEG, 1.0]]));
        let sm = g.push(Op::SoftmaxRows(x));
        assert_eq!(g.value(sm).get(0, 1), 0.0);
        let total: f64 = g.value(sm).row(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn replay_without_change_returns_base_value() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_vec(1, 1, vec![0.7]));
        let e = g.push(Op::Exp(x));
        let s = g.push(Op::SumAll(e));
        let base = g.value(s).get(0, 0);
        let replayed = g.replay_scalar(x, 0, 0, 0.7, s);
        assert_eq!(base, replayed);
    }
}
