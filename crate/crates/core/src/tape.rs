//! Tape-based reverse-mode differentiation.
//!
//! A `Tape` records every primitive applied through it into a topologically
//! ordered list of nodes. `backward` replays the list in reverse, visiting
//! each node exactly once, and accumulates gradients for every recorded
//! input. A single tape is single-threaded; independent tapes share nothing
//! and may live on separate threads.
//!
//! Every forward result is checked for non-finite values immediately; a NaN
//! or Inf anywhere aborts with a diagnostic naming the offending operation.

use std::cell::RefCell;

use crate::latency::{backlog_kernel, dependency_layer_kernel, density_kernel};
use crate::masks::scheduler_mask_values;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    RowMax { x: usize, argmax: Vec<usize> },
    SliceCols { x: usize, start: usize, end: usize },
    ConcatCols(Vec<usize>),
    Entry { x: usize, index: usize },
    LayerNorm { x: usize, gain: usize, shift: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedSoftmax { scores: usize, mask: usize, exp_over_z: Vec<f64> },
    RelPosBias { scores: usize, bias: usize },
    SchedulerMask { centers: usize, max_span: usize, tau: f64 },
    DepLayer { mask: usize, prev: usize, argmax: Vec<usize> },
    Density(usize),
    LowerColSum { x: usize, include_diag: bool },
    Backlog { work: usize, active: Vec<bool> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Scale(..) => "scale",
            Op::RowMax { .. } => "row_max",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Entry { .. } => "entry",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::RelPosBias { .. } => "rel_pos_bias",
            Op::SchedulerMask { .. } => "scheduler_mask",
            Op::DepLayer { .. } => "dep_layer",
            Op::Density(..) => "last_dep_density",
            Op::LowerColSum { .. } => "lower_col_sum",
            Op::Backlog { .. } => "backlog",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Records forward operations for reverse-mode differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant or parameter tensor as a leaf node.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Clones the current value of a node.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].out.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].out.item()
    }

    fn push(&self, op: Op, out: Tensor) -> Var {
        assert!(
            out.all_finite(),
            "non-finite value produced by `{}` (shape {:?})",
            op.name(),
            out.shape()
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, out });
        Var(nodes.len() - 1)
    }

    /// Elementwise addition. A vector right operand of length `cols` is
    /// broadcast over the rows of a matrix left operand (bias addition).
    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].out, &nodes[b.0].out);
            if ta.shape() == tb.shape() {
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
                Tensor::new(ta.shape().to_vec(), data)
            } else {
                assert!(
                    ta.is_matrix() && tb.shape().len() == 1 && tb.len() == ta.cols(),
                    "add: shape mismatch {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                );
                let c = ta.cols();
                let data = ta
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + tb.data()[i % c])
                    .collect();
                Tensor::new(ta.shape().to_vec(), data)
            }
        };
        self.push(Op::Add(a.0, b.0), out)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].out, &nodes[b.0].out);
            assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(Op::Sub(a.0, b.0), out)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].out, &nodes[b.0].out);
            assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(Op::Mul(a.0, b.0), out)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].out, &nodes[b.0].out);
            assert_eq!(ta.shape(), tb.shape(), "div: shape mismatch");
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(Op::Div(a.0, b.0), out)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].out, &nodes[b.0].out);
            assert!(ta.is_matrix() && tb.is_matrix(), "matmul: operands must be matrices");
            assert_eq!(ta.cols(), tb.rows(), "matmul: inner dimension mismatch");
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            Tensor::matrix(m, n, mat_mul(ta.data(), m, k, tb.data(), n))
        };
        self.push(Op::Matmul(a.0, b.0), out)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            assert!(ta.is_matrix(), "transpose: operand must be a matrix");
            let (r, c) = (ta.rows(), ta.cols());
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = ta.at(i, j);
                }
            }
            Tensor::matrix(c, r, data)
        };
        self.push(Op::Transpose(a.0), out)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(Op::Sigmoid(a.0), out)
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            let data = ta.data().iter().map(|x| x.exp()).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(Op::Exp(a.0), out)
    }

    pub fn log(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            let data: Vec<f64> = ta
                .data()
                .iter()
                .map(|&x| {
                    assert!(x > 0.0, "log of non-positive value {x}");
                    x.ln()
                })
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(Op::Log(a.0), out)
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(Op::Relu(a.0), out)
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].out.data().iter().sum())
        };
        self.push(Op::Sum(a.0), out)
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64)
        };
        self.push(Op::Mean(a.0), out)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            let data = ta.data().iter().map(|x| x * factor).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(Op::Scale(a.0, factor), out)
    }

    /// Per-row maximum. Ties resolve to the lowest index; the subgradient
    /// routes the entire upstream gradient to that index.
    pub fn row_max(&self, a: Var) -> Var {
        let (out, argmax) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            assert!(ta.is_matrix(), "row_max: operand must be a matrix");
            let (r, c) = (ta.rows(), ta.cols());
            assert!(c > 0, "row_max: empty rows");
            let mut vals = Vec::with_capacity(r);
            let mut arg = Vec::with_capacity(r);
            for i in 0..r {
                let row = ta.row(i);
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                vals.push(row[best]);
                arg.push(best);
            }
            (Tensor::vector(vals), arg)
        };
        self.push(Op::RowMax { x: a.0, argmax }, out)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].out;
            assert!(ta.is_matrix() && start < end && end <= ta.cols(), "slice_cols: bad range");
            let r = ta.rows();
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&ta.row(i)[start..end]);
            }
            Tensor::matrix(r, end - start, data)
        };
        self.push(Op::SliceCols { x: a.0, start, end }, out)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let out = {
            let nodes = self.nodes.borrow();
            let r = nodes[parts[0].0].out.rows();
            let total: usize = parts.iter().map(|p| nodes[p.0].out.cols()).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    let t = &nodes[p.0].out;
                    assert_eq!(t.rows(), r, "concat_cols: row mismatch");
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::matrix(r, total, data)
        };
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), out)
    }

    /// Picks one element of a vector as a scalar.
    pub fn entry(&self, a: Var, index: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].out.data()[index])
        };
        self.push(Op::Entry { x: a.0, index }, out)
    }

    /// Row-wise layer normalization with learnable gain and shift vectors.
    pub fn layer_norm(&self, x: Var, gain: Var, shift: Var) -> Var {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].out;
            let tg = &nodes[gain.0].out;
            let tb = &nodes[shift.0].out;
            assert!(tx.is_matrix(), "layer_norm: input must be a matrix");
            let (r, c) = (tx.rows(), tx.cols());
            assert_eq!(tg.len(), c, "layer_norm: gain length mismatch");
            assert_eq!(tb.len(), c, "layer_norm: shift length mismatch");
            let mut out = vec![0.0; r * c];
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            for i in 0..r {
                let row = tx.row(i);
                let m = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let h = (row[j] - m) * is;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * tg.data()[j] + tb.data()[j];
                }
            }
            (Tensor::matrix(r, c, out), xhat, inv_std)
        };
        self.push(Op::LayerNorm { x: x.0, gain: gain.0, shift: shift.0, xhat, inv_std }, out)
    }

    /// Attention scores under a multiplicative fractional mask:
    /// `A[i][j] = exp(P[i][j]) * M[i][j] / sum_t exp(P[i][t]) * M[i][t]`.
    ///
    /// Rows of `P` are shifted by their maximum before exponentiation
    /// (a mathematical identity) for numeric stability. Differentiable in
    /// both `P` and `M`; a row whose mask is entirely zero is rejected.
    pub fn masked_softmax(&self, scores: Var, mask: Var) -> Var {
        let (out, exp_over_z) = {
            let nodes = self.nodes.borrow();
            let tp = &nodes[scores.0].out;
            let tm = &nodes[mask.0].out;
            assert_eq!(tp.shape(), tm.shape(), "masked_softmax: shape mismatch");
            assert!(tp.is_matrix(), "masked_softmax: inputs must be matrices");
            let (r, c) = (tp.rows(), tp.cols());
            let mut out = vec![0.0; r * c];
            let mut eoz = vec![0.0; r * c];
            for i in 0..r {
                let prow = tp.row(i);
                let mrow = tm.row(i);
                let shift = prow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    z += (prow[j] - shift).exp() * mrow[j];
                }
                assert!(z > 0.0, "masked_softmax: row {i} has no unmasked entries");
                for j in 0..c {
                    let e = (prow[j] - shift).exp() / z;
                    eoz[i * c + j] = e;
                    out[i * c + j] = e * mrow[j];
                }
            }
            (Tensor::matrix(r, c, out), eoz)
        };
        self.push(Op::MaskedSoftmax { scores: scores.0, mask: mask.0, exp_over_z }, out)
    }

    /// Adds a learned relative-position bias to square attention scores:
    /// `out[i][j] = scores[i][j] + bias[clamp(j - i, -w, w) + w]` where the
    /// bias vector has odd length `2w + 1`. Offsets beyond the window share
    /// its edge entries.
    pub fn rel_pos_bias(&self, scores: Var, bias: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let tp = &nodes[scores.0].out;
            let tb = &nodes[bias.0].out;
            assert!(
                tp.is_matrix() && tp.rows() == tp.cols(),
                "rel_pos_bias: scores must be square"
            );
            assert!(tb.len() % 2 == 1, "rel_pos_bias: bias length must be odd");
            let t = tp.rows();
            let w = (tb.len() / 2) as i64;
            let mut data = Vec::with_capacity(t * t);
            for i in 0..t {
                for j in 0..t {
                    let d = (j as i64 - i as i64).clamp(-w, w) + w;
                    data.push(tp.at(i, j) + tb.data()[d as usize]);
                }
            }
            Tensor::matrix(t, t, data)
        };
        self.push(Op::RelPosBias { scores: scores.0, bias: bias.0 }, out)
    }

    /// Builds a full T x T attention mask from per-frame curve centers:
    /// past entries are 1, forward entries within `max_span` follow the
    /// annealable reverse-S curve `1 - sigmoid((offset - center) / tau)`,
    /// everything further is 0.
    pub fn scheduler_mask(&self, centers: Var, max_span: usize, tau: f64) -> Var {
        assert!(tau > 0.0, "scheduler_mask: tau must be positive");
        let out = {
            let nodes = self.nodes.borrow();
            scheduler_mask_values(nodes[centers.0].out.data(), max_span, tau)
        };
        self.push(Op::SchedulerMask { centers: centers.0, max_span, tau }, out)
    }

    /// One layer of the dependency dynamic program:
    /// `D[i][j] = max_t M[i][t] * Dprev[t][j]` over the reachable band.
    /// `layer` is 1-based; the output band is `j <= i + layer * span`.
    pub fn dep_layer(&self, mask: Var, prev: Var, span: usize, layer: usize) -> Var {
        let (out, argmax) = {
            let nodes = self.nodes.borrow();
            dependency_layer_kernel(&nodes[mask.0].out, &nodes[prev.0].out, span, layer)
        };
        self.push(Op::DepLayer { mask: mask.0, prev: prev.0, argmax }, out)
    }

    /// Differences a dependency matrix along `j` into the last-dependency
    /// density: `F[i][j] = D[i][j] - D[i][j+1]`, with the tail mass
    /// `F[i][T-1] = D[i][T-1]`. Rejects non-monotone input.
    pub fn last_dep_density(&self, dep: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            density_kernel(&nodes[dep.0].out)
        };
        self.push(Op::Density(dep.0), out)
    }

    /// Column sums over the lower triangle: `v[j] = sum_{t <= j} X[t][j]`
    /// (or `t < j` when `include_diag` is false).
    pub fn lower_col_sum(&self, x: Var, include_diag: bool) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].out;
            assert!(tx.is_matrix(), "lower_col_sum: input must be a matrix");
            let (r, c) = (tx.rows(), tx.cols());
            assert_eq!(r, c, "lower_col_sum: input must be square");
            let mut v = vec![0.0; c];
            for j in 0..c {
                let top = if include_diag { j + 1 } else { j };
                for t in 0..top {
                    v[j] += tx.at(t, j);
                }
            }
            Tensor::vector(v)
        };
        self.push(Op::LowerColSum { x: x.0, include_diag }, out)
    }

    /// Carried-work recursion `b[i] = max(b[i-1] + q[i] - per_frame, 0)`
    /// with `b[-1] = 0`; the max uses the subgradient rule (active side).
    pub fn backlog(&self, work: Var, per_frame: f64) -> Var {
        let (out, active) = {
            let nodes = self.nodes.borrow();
            let (b, active) = backlog_kernel(nodes[work.0].out.data(), per_frame);
            (Tensor::vector(b), active)
        };
        self.push(Op::Backlog { work: work.0, active }, out)
    }

    /// Mean per-row cross-entropy between `logits` and integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].out;
            assert!(tl.is_matrix(), "cross_entropy: logits must be a matrix");
            let (r, c) = (tl.rows(), tl.cols());
            assert_eq!(labels.len(), r, "cross_entropy: label count mismatch");
            let mut probs = vec![0.0; r * c];
            let mut loss = 0.0;
            for i in 0..r {
                let label = labels[i];
                assert!(label < c, "cross_entropy: label {label} out of range (n_classes {c})");
                let row = tl.row(i);
                let shift = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - shift).exp()).sum();
                for j in 0..c {
                    probs[i * c + j] = (row[j] - shift).exp() / z;
                }
                loss -= (row[label] - shift) - z.ln();
            }
            (Tensor::scalar(loss / r as f64), probs)
        };
        self.push(Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs }, out)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node;
    /// leaves not reachable from the root read back as zero.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].out.len(), 1, "backward: root must be scalar-shaped");
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.out.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], target: usize, f: &mut dyn FnMut(&mut [f64])| {
            let len = nodes[target].out.len();
            let slot = grads[target].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                let blen = nodes[*b].out.len();
                if blen == g.len() {
                    acc(grads, *b, &mut |gb| {
                        for (gi, gv) in gb.iter_mut().zip(g) {
                            *gi += gv;
                        }
                    });
                } else {
                    // broadcast bias: reduce over rows
                    acc(grads, *b, &mut |gb| {
                        for (k, gv) in g.iter().enumerate() {
                            gb[k % blen] += gv;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for (gi, gv) in gb.iter_mut().zip(g) {
                        *gi -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].out.data(), nodes[*b].out.data());
                acc(grads, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (nodes[*a].out.data(), nodes[*b].out.data());
                acc(grads, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / vb[i];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&nodes[*a].out, &nodes[*b].out);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(grads, *a, &mut |ga| {
                    // ga += g * b^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data()[kk * n + j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                });
                acc(grads, *b, &mut |gb| {
                    // gb += a^T * g
                    for kk in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ta.data()[i * k + kk] * g[i * n + j];
                            }
                            gb[kk * n + j] += s;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let ta = &nodes[*a].out;
                let (r, c) = (ta.rows(), ta.cols());
                acc(grads, *a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = nodes[id].out.data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = nodes[id].out.data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = nodes[*a].out.data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[*a].out.data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                acc(grads, *a, &mut |ga| {
                    for gi in ga.iter_mut() {
                        *gi += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = nodes[*a].out.len() as f64;
                let gv = g[0] / n;
                acc(grads, *a, &mut |ga| {
                    for gi in ga.iter_mut() {
                        *gi += gv;
                    }
                });
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                acc(grads, *a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * f;
                    }
                });
            }
            Op::RowMax { x, argmax } => {
                let c = nodes[*x].out.cols();
                acc(grads, *x, &mut |gx| {
                    for (i, &j) in argmax.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                });
            }
            Op::SliceCols { x, start, end } => {
                let c = nodes[*x].out.cols();
                let w = end - start;
                acc(grads, *x, &mut |gx| {
                    for i in 0..nodes[id].out.rows() {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let r = nodes[id].out.rows();
                let total = nodes[id].out.cols();
                let mut offset = 0usize;
                for &p in parts {
                    let w = nodes[p].out.cols();
                    acc(grads, p, &mut |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Entry { x, index } => {
                let gv = g[0];
                let idx = *index;
                acc(grads, *x, &mut |gx| {
                    gx[idx] += gv;
                });
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let (r, c) = (nodes[*x].out.rows(), nodes[*x].out.cols());
                let gain_v = nodes[*gain].out.data();
                acc(grads, *x, &mut |gx| {
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * gain_v[j];
                            m1 += dh;
                            m2 += dh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = g[i * c + j] * gain_v[j];
                            gx[i * c + j] += inv_std[i] * (dh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                });
                acc(grads, *gain, &mut |gg| {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(grads, *shift, &mut |gs| {
                    for i in 0..r {
                        for j in 0..c {
                            gs[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::MaskedSoftmax { scores, mask, exp_over_z } => {
                let a_out = nodes[id].out.data();
                let (r, c) = (nodes[id].out.rows(), nodes[id].out.cols());
                let mut row_dot = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        row_dot[i] += g[i * c + j] * a_out[i * c + j];
                    }
                }
                acc(grads, *scores, &mut |gp| {
                    for i in 0..r {
                        for j in 0..c {
                            gp[i * c + j] += a_out[i * c + j] * (g[i * c + j] - row_dot[i]);
                        }
                    }
                });
                acc(grads, *mask, &mut |gm| {
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] += exp_over_z[i * c + j] * (g[i * c + j] - row_dot[i]);
                        }
                    }
                });
            }
            Op::RelPosBias { scores, bias } => {
                let t = nodes[id].out.rows();
                let w = (nodes[*bias].out.len() / 2) as i64;
                acc(grads, *scores, &mut |gp| {
                    for (k, gk) in g.iter().enumerate() {
                        gp[k] += gk;
                    }
                });
                acc(grads, *bias, &mut |gb| {
                    for i in 0..t {
                        for j in 0..t {
                            let d = (j as i64 - i as i64).clamp(-w, w) + w;
                            gb[d as usize] += g[i * t + j];
                        }
                    }
                });
            }
            Op::SchedulerMask { centers, max_span, tau } => {
                let o = nodes[*centers].out.data();
                let t = o.len();
                acc(grads, *centers, &mut |go| {
                    for i in 0..t {
                        let hi = (i + *max_span).min(t - 1);
                        let mut s = 0.0;
                        for j in (i + 1)..=hi {
                            let z = ((j - i) as f64 - o[i]) / tau;
                            let sg = sigmoid(z);
                            s += g[i * t + j] * sg * (1.0 - sg) / tau;
                        }
                        go[i] += s;
                    }
                });
            }
            Op::DepLayer { mask, prev, argmax } => {
                let tm = &nodes[*mask].out;
                let tp = &nodes[*prev].out;
                let t = tm.rows();
                // argmax[i*t + j] == usize::MAX marks entries outside the band
                // (structural 0 or 1): no gradient flows there.
                acc(grads, *mask, &mut |gm| {
                    for i in 0..t {
                        for j in 0..t {
                            let ts = argmax[i * t + j];
                            if ts != usize::MAX {
                                gm[i * t + ts] += g[i * t + j] * tp.at(ts, j);
                            }
                        }
                    }
                });
                acc(grads, *prev, &mut |gp| {
                    for i in 0..t {
                        for j in 0..t {
                            let ts = argmax[i * t + j];
                            if ts != usize::MAX {
                                gp[ts * t + j] += g[i * t + j] * tm.at(i, ts);
                            }
                        }
                    }
                });
            }
            Op::Density(dep) => {
                let t = nodes[*dep].out.rows();
                acc(grads, *dep, &mut |gd| {
                    for i in 0..t {
                        for j in 0..t {
                            let mut gv = g[i * t + j];
                            if j >= 1 {
                                gv -= g[i * t + j - 1];
                            }
                            gd[i * t + j] += gv;
                        }
                    }
                });
            }
            Op::LowerColSum { x, include_diag } => {
                let c = nodes[*x].out.cols();
                let inc = *include_diag;
                acc(grads, *x, &mut |gx| {
                    for j in 0..c {
                        let top = if inc { j + 1 } else { j };
                        for t in 0..top {
                            gx[t * c + j] += g[j];
                        }
                    }
                });
            }
            Op::Backlog { work, active } => {
                acc(grads, *work, &mut |gq| {
                    let n = active.len();
                    let mut carry = 0.0;
                    for i in (0..n).rev() {
                        let gi = g[i] + carry;
                        if active[i] {
                            gq[i] += gi;
                            carry = gi;
                        } else {
                            carry = 0.0;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (r, c) = (nodes[*logits].out.rows(), nodes[*logits].out.cols());
                let gv = g[0] / r as f64;
                acc(grads, *logits, &mut |gl| {
                    for i in 0..r {
                        for j in 0..c {
                            let p = probs[i * c + j];
                            let y = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += gv * (p - y);
                        }
                    }
                });
            }
        }
    }
}

/// Gradients from one reverse pass, keyed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a node; zero-filled when the node is unreachable from
    /// the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
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

fn mat_mul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
