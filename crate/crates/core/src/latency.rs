//! Dependency analysis over the attention compute DAG and the three
//! differentiable latency regularizers.
//!
//! The compute DAG has one node per (frame, layer); node `(i, l)` reads node
//! `(t, l-1)` with strength `M^l[i][t]`. `D^l[i][j]` is the maximal product
//! of mask strengths over any path from input frame `j` up to node `(i, l)`
//! — the (fractional) dependency of that node on frame `j`. Differencing `D`
//! along `j` yields the last-dependency density `F`, from which the
//! algorithmic-latency and backlog losses follow.
//!
//! Every quantity here has an independent oracle: a shortest-path reduction
//! for `D`, brute-force path enumeration for binary last dependencies, and a
//! discrete-event simulation for the backlog.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::masks::MaskStack;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One layer of the dependency DP: `out[i][j] = max_t M[i][t] * prev[t][j]`.
///
/// `layer` is the 1-based index of the layer producing `out`; `span` bounds
/// each layer's forward reach, so `out[i][j]` is structurally 1 for `j <= i`
/// and 0 for `j > i + layer * span`. The returned argmax records the chosen
/// `t` per entry (lowest index on ties), `usize::MAX` for structural
/// entries.
pub(crate) fn dependency_layer_kernel(
    mask: &Tensor,
    prev: &Tensor,
    span: usize,
    layer: usize,
) -> (Tensor, Vec<usize>) {
    let t = mask.rows();
    assert!(mask.is_matrix() && mask.cols() == t, "dep_layer: mask must be square");
    assert_eq!(prev.shape(), mask.shape(), "dep_layer: shape mismatch");
    assert!(layer >= 1, "dep_layer: layer index is 1-based");
    let mut out = Tensor::zeros(vec![t, t]);
    let mut argmax = vec![usize::MAX; t * t];
    for i in 0..t {
        for j in 0..=i {
            *out.at_mut(i, j) = 1.0;
        }
        let j_hi = (i + layer * span).min(t - 1);
        let t_hi = (i + span).min(t - 1);
        for j in (i + 1)..=j_hi {
            let mut best = -1.0;
            let mut arg = usize::MAX;
            for tt in 0..=t_hi {
                let v = mask.at(i, tt) * prev.at(tt, j);
                if v > best {
                    best = v;
                    arg = tt;
                }
            }
            *out.at_mut(i, j) = best;
            argmax[i * t + j] = arg;
        }
    }
    (out, argmax)
}

/// Differences a dependency matrix into the last-dependency density:
/// `F[i][j] = D[i][j] - D[i][j+1]`, tail mass `F[i][T-1] = D[i][T-1]`.
/// Panics if `D` increases along `j` by more than 1e-12.
pub(crate) fn density_kernel(dep: &Tensor) -> Tensor {
    let t = dep.rows();
    assert!(dep.is_matrix() && dep.cols() == t, "density: input must be square");
    let mut f = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in 0..t - 1 {
            let d = dep.at(i, j) - dep.at(i, j + 1);
            assert!(
                d >= -1e-12,
                "density: dependency row {i} increases at column {j} by {}",
                -d
            );
            *f.at_mut(i, j) = d.max(0.0);
        }
        *f.at_mut(i, t - 1) = dep.at(i, t - 1);
    }
    f
}

/// Carried-work recursion `b[i] = max(b[i-1] + q[i] - per_frame, 0)` with
/// `b[-1] = 0`. Also returns which frames kept a positive backlog (the
/// active side of the max, for the subgradient).
pub(crate) fn backlog_kernel(q: &[f64], per_frame: f64) -> (Vec<f64>, Vec<bool>) {
    let mut b = Vec::with_capacity(q.len());
    let mut active = Vec::with_capacity(q.len());
    let mut carry = 0.0;
    for &qi in q {
        let raw = carry + qi - per_frame;
        if raw > 0.0 {
            carry = raw;
            active.push(true);
        } else {
            carry = 0.0;
            active.push(false);
        }
        b.push(carry);
    }
    (b, active)
}

/// Plain (non-tape) dependency DP over a mask stack. Returns one `T x T`
/// matrix per layer; `span` bounds each layer's forward reach.
pub fn dependency_forward(masks: &MaskStack, span: usize) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = Vec::with_capacity(masks.n_layers());
    out.push(masks.layers[0].clone());
    for l in 1..masks.n_layers() {
        let (d, _) = dependency_layer_kernel(&masks.layers[l], &out[l - 1], span, l + 1);
        out.push(d);
    }
    out
}

/// Independent oracle for the dependency matrices via shortest paths.
///
/// The layered DAG has a node per (layer, frame); an edge from `(l-1, t)` to
/// `(l, i)` exists when `M^l[i][t] > 0` and carries weight `-ln M^l[i][t]`.
/// Then `D^l[i][j] = exp(-dist((0, j) -> (l, i)))`, computed by Dijkstra
/// from each source frame. Shares no code with the DP.
pub fn dependency_oracle(masks: &MaskStack) -> Vec<Tensor> {
    let t = masks.t();
    let l_count = masks.n_layers();
    let mut out = vec![Tensor::zeros(vec![t, t]); l_count];
    #[derive(PartialEq)]
    struct Entry(f64, usize, usize); // (dist, layer, frame)
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0
                .total_cmp(&other.0)
                .then(self.1.cmp(&other.1))
                .then(self.2.cmp(&other.2))
        }
    }
    for j in 0..t {
        // dist[layer][frame]; layer 0 is the input frames
        let mut dist = vec![vec![f64::INFINITY; t]; l_count + 1];
        dist[0][j] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse(Entry(0.0, 0, j)));
        while let Some(Reverse(Entry(d, l, f))) = heap.pop() {
            if d > dist[l][f] {
                continue;
            }
            if l == l_count {
                continue;
            }
            for i in 0..t {
                let m = masks.layers[l].at(i, f);
                if m > 0.0 {
                    let nd = d - m.ln();
                    if nd < dist[l + 1][i] {
                        dist[l + 1][i] = nd;
                        heap.push(Reverse(Entry(nd, l + 1, i)));
                    }
                }
            }
        }
        for l in 1..=l_count {
            for i in 0..t {
                if dist[l][i].is_finite() {
                    *out[l - 1].at_mut(i, j) = (-dist[l][i]).exp();
                }
            }
        }
    }
    out
}

/// Brute-force last dependency of every node under binary masks, by
/// recursive path enumeration (no memoization, no shared code with the DP).
/// `out[l][i]` is the furthest input frame reachable from node `(i, l+1)`.
pub fn brute_force_last_dep(masks: &MaskStack) -> Vec<Vec<usize>> {
    fn last(masks: &MaskStack, l: usize, i: usize) -> usize {
        if l == 0 {
            return i;
        }
        let t = masks.t();
        let mut best = 0;
        for tt in 0..t {
            if masks.layers[l - 1].at(i, tt) != 0.0 {
                best = best.max(last(masks, l - 1, tt));
            }
        }
        best
    }
    (1..=masks.n_layers())
        .map(|l| (0..masks.t()).map(|i| last(masks, l, i)).collect())
        .collect()
}

/// Per-frame work arrivals and carried backlog.
#[derive(Clone, Debug, PartialEq)]
pub struct BacklogTrace {
    /// Nodes whose last dependency lands on each frame (fractional).
    pub newly_ready: Vec<f64>,
    /// Nodes still waiting after each frame's budget is spent.
    pub backlog: Vec<f64>,
    /// Node throughput in nodes per second.
    pub node_throughput: f64,
    /// Frame rate in frames per second.
    pub frame_rate: f64,
    /// Work left at the final frame, expressed in seconds of compute.
    pub upl_seconds: f64,
}

/// Builds the backlog trace from per-layer densities. `include_current`
/// selects whether a node's own frame counts toward its arrival sum
/// (`t <= i`, the default) or only strictly earlier frames (`t < i`).
pub fn backlog_trace(
    f_layers: &[Tensor],
    mu: f64,
    rho: f64,
    include_current: bool,
) -> BacklogTrace {
    assert!(mu > 0.0 && rho > 0.0, "backlog_trace: mu and rho must be positive");
    let t = f_layers[0].rows();
    let mut q = vec![0.0; t];
    for f in f_layers {
        for i in 0..t {
            let top = if include_current { i + 1 } else { i };
            for tt in 0..top {
                q[i] += f.at(tt, i);
            }
        }
    }
    let (b, _) = backlog_kernel(&q, mu / rho);
    let upl = b[t - 1] / mu;
    BacklogTrace {
        newly_ready: q,
        backlog: b,
        node_throughput: mu,
        frame_rate: rho,
        upl_seconds: upl,
    }
}

/// Discrete-event backlog oracle for binary masks: each node joins the
/// ready queue on the frame its last input (by brute-force reachability)
/// arrives, and `mu / rho` nodes retire per frame.
pub fn backlog_oracle(masks: &MaskStack, mu: f64, rho: f64) -> BacklogTrace {
    let t = masks.t();
    let last = brute_force_last_dep(masks);
    let mut arrivals = vec![0.0; t];
    for layer in &last {
        for &m in layer {
            arrivals[m] += 1.0;
        }
    }
    let c = mu / rho;
    let mut backlog = Vec::with_capacity(t);
    let mut pending = 0.0;
    for &a in &arrivals {
        pending = (pending + a - c).max(0.0);
        backlog.push(pending);
    }
    let upl = pending / mu;
    BacklogTrace {
        newly_ready: arrivals,
        backlog,
        node_throughput: mu,
        frame_rate: rho,
        upl_seconds: upl,
    }
}

/// Expected per-frame delays from a top-layer density: frames and ms.
pub fn frame_delays(f_top: &Tensor, frame_ms: f64) -> (Vec<f64>, Vec<f64>) {
    let t = f_top.rows();
    let mut frames = vec![0.0; t];
    for i in 0..t {
        for j in (i + 1)..t {
            frames[i] += (j - i) as f64 * f_top.at(i, j);
        }
    }
    let ms = frames.iter().map(|d| d * frame_ms).collect();
    (frames, ms)
}

// ---- tape-side builders -------------------------------------------------

/// Records the full dependency DP on a tape. `mask_vars[0]` doubles as the
/// first-layer dependency matrix.
pub fn dependency_dp(tape: &Tape, mask_vars: &[Var], span: usize) -> Vec<Var> {
    let mut out = Vec::with_capacity(mask_vars.len());
    out.push(mask_vars[0]);
    for l in 1..mask_vars.len() {
        let d = tape.dep_layer(mask_vars[l], out[l - 1], span, l + 1);
        out.push(d);
    }
    out
}

/// `(1/T) * sum_l sum_{j>i} M^l[i][j]` on the tape.
pub fn l1_loss(tape: &Tape, mask_vars: &[Var]) -> Var {
    let t = tape.value(mask_vars[0]).rows();
    let upper = tape.leaf(strict_upper_ones(t));
    let mut acc = tape.sum(tape.mul(mask_vars[0], upper));
    for &m in &mask_vars[1..] {
        acc = tape.add(acc, tape.sum(tape.mul(m, upper)));
    }
    tape.scale(acc, 1.0 / t as f64)
}

/// `(1/T) * sum_i sum_{j>i} (j-i) * F_top[i][j]` on the tape.
pub fn alg_latency_loss(tape: &Tape, f_top: Var) -> Var {
    let t = tape.value(f_top).rows();
    let mut w = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            *w.at_mut(i, j) = (j - i) as f64;
        }
    }
    let weights = tape.leaf(w);
    tape.scale(tape.sum(tape.mul(f_top, weights)), 1.0 / t as f64)
}

/// `b[T-1] / mu` on the tape, with the arrival sums and backlog recursion
/// recorded so the loss differentiates through the densities.
pub fn upl_loss(tape: &Tape, f_vars: &[Var], mu: f64, rho: f64, include_current: bool) -> Var {
    let t = tape.value(f_vars[0]).rows();
    let mut q = tape.lower_col_sum(f_vars[0], include_current);
    for &f in &f_vars[1..] {
        q = tape.add(q, tape.lower_col_sum(f, include_current));
    }
    let b = tape.backlog(q, mu / rho);
    tape.scale(tape.entry(b, t - 1), 1.0 / mu)
}

fn strict_upper_ones(t: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            *m.at_mut(i, j) = 1.0;
        }
    }
    m
}
