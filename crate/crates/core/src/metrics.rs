//! Evaluation metrics and report artifacts.
//!
//! Latency statistics follow the per-utterance convention: each utterance is
//! reduced to its mean frame delay first, and the mean/median/90th
//! percentile are taken across utterances with nearest-rank percentiles (no
//! interpolation), so reports are bit-reproducible.

use std::io::Write as _;
use std::path::Path;

use crate::data::UtteranceSample;
use crate::latency::{
    backlog_trace, density_kernel, dependency_forward, frame_delays,
};
use crate::masks::MaskStack;
use crate::model::{encoder_forward, EncoderConfig, EncoderState, ParamVars};
use crate::tape::Tape;
use crate::{Error, Result};

/// Binarization threshold for hard-latency evaluation.
pub const BINARIZE_THETA: f64 = 1e-7;

/// Everything measured on a single utterance.
#[derive(Clone, Debug)]
pub struct UtteranceEval {
    pub frames: usize,
    pub correct: usize,
    pub soft_latency_frames: f64,
    pub hard_latency_frames: f64,
    pub l1_norm_frames: f64,
    pub upl_seconds: f64,
    /// Per-frame expected delays (frames) under the binarized masks.
    pub hard_delays: Vec<f64>,
    /// Backlog trace under the binarized masks.
    pub newly_ready: Vec<f64>,
    pub backlog: Vec<f64>,
}

impl UtteranceEval {
    pub fn error_rate(&self) -> f64 {
        1.0 - self.correct as f64 / self.frames as f64
    }
}

/// Runs the model on one utterance and measures accuracy plus the soft
/// (fractional-mask) and hard (binarized-mask) latency metrics.
pub fn evaluate_utterance(
    state: &EncoderState,
    cfg: &EncoderConfig,
    sample: &UtteranceSample,
) -> UtteranceEval {
    let t = sample.t();
    let tape = Tape::new();
    let pv = ParamVars::register(&tape, &state.params);
    let fwd = encoder_forward(&tape, &pv, cfg, &sample.features, state.tau);
    let logits = tape.value(fwd.logits);
    let mut correct = 0;
    for i in 0..t {
        let row = logits.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == sample.labels[i] {
            correct += 1;
        }
    }

    let soft = MaskStack { layers: fwd.masks.iter().map(|&m| tape.value(m)).collect() };
    let span = cfg.layer_span(t);
    let soft_mean = {
        let deps = dependency_forward(&soft, span);
        let f = density_kernel(&deps[deps.len() - 1]);
        let (frames, _) = frame_delays(&f, cfg.frame_ms);
        frames.iter().sum::<f64>() / t as f64
    };
    let l1 = {
        let mut s = 0.0;
        for m in &soft.layers {
            for i in 0..t {
                for j in (i + 1)..t {
                    s += m.at(i, j);
                }
            }
        }
        s / t as f64
    };

    let hard = soft.binarize(BINARIZE_THETA);
    let hard_deps = dependency_forward(&hard, span);
    let hard_f: Vec<_> = hard_deps.iter().map(density_kernel).collect();
    let (hard_delays, _) = frame_delays(&hard_f[hard_f.len() - 1], cfg.frame_ms);
    let hard_mean = hard_delays.iter().sum::<f64>() / t as f64;
    let trace = backlog_trace(&hard_f, cfg.mu, cfg.rho, cfg.backlog_include_current);

    UtteranceEval {
        frames: t,
        correct,
        soft_latency_frames: soft_mean,
        hard_latency_frames: hard_mean,
        l1_norm_frames: l1,
        upl_seconds: trace.upl_seconds,
        hard_delays,
        newly_ready: trace.newly_ready,
        backlog: trace.backlog,
    }
}

/// Evaluates every utterance, optionally across threads; results come back
/// in dataset order regardless of worker count.
pub fn evaluate_dataset(
    state: &EncoderState,
    cfg: &EncoderConfig,
    data: &[UtteranceSample],
    workers: usize,
) -> Vec<UtteranceEval> {
    let workers = workers.max(1).min(data.len().max(1));
    if workers == 1 {
        return data.iter().map(|u| evaluate_utterance(state, cfg, u)).collect();
    }
    let mut indexed: Vec<(usize, UtteranceEval)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let data = &data;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut i = w;
                while i < data.len() {
                    out.push((i, evaluate_utterance(state, cfg, &data[i])));
                    i += workers;
                }
                out
            }));
        }
        handles.into_iter().flat_map(|h| h.join().expect("eval worker panicked")).collect()
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, e)| e).collect()
}

/// Mean and nearest-rank 50th/90th percentiles of per-utterance values.
pub fn latency_stats(per_utterance: &[f64]) -> Result<(f64, f64, f64)> {
    if per_utterance.is_empty() {
        return Err(Error::Data("latency_stats on an empty set".into()));
    }
    let mean = per_utterance.iter().sum::<f64>() / per_utterance.len() as f64;
    let mut sorted = per_utterance.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((mean, nearest_rank(&sorted, 50.0), nearest_rank(&sorted, 90.0)))
}

fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = (pct / 100.0 * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Spearman rank correlation with tie-averaged ranks; 0 when either side
/// has no variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman: length mismatch");
    let rx = tie_ranks(xs);
    let ry = tie_ranks(ys);
    pearson(&rx, &ry)
}

fn tie_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Per-group error/latency means over five difficulty buckets, plus the
/// Spearman correlation across the groups.
#[derive(Clone, Debug)]
pub struct DifficultyTable {
    /// `(mean error rate, mean latency)` per group, easiest group first.
    pub groups: Vec<(f64, f64)>,
    pub rho: f64,
}

/// Buckets utterances into 5 error-rate percentile groups and correlates
/// group error with group latency. Requires at least 50 utterances.
pub fn difficulty_correlation(pairs: &[(f64, f64)]) -> Result<DifficultyTable> {
    if pairs.len() < 50 {
        return Err(Error::Data(format!(
            "difficulty_correlation needs >= 50 utterances, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0).then(a.cmp(&b)));
    let mut groups = Vec::with_capacity(5);
    for g in 0..5 {
        let lo = g * n / 5;
        let hi = (g + 1) * n / 5;
        let slice = &idx[lo..hi];
        let me = slice.iter().map(|&i| pairs[i].0).sum::<f64>() / slice.len() as f64;
        let ml = slice.iter().map(|&i| pairs[i].1).sum::<f64>() / slice.len() as f64;
        groups.push((me, ml));
    }
    let errs: Vec<f64> = groups.iter().map(|g| g.0).collect();
    let lats: Vec<f64> = groups.iter().map(|g| g.1).collect();
    Ok(DifficultyTable { rho: spearman(&errs, &lats), groups })
}

/// One line of the evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub mask_mode: String,
    pub k: usize,
    pub lambda: f64,
    pub sched_loss_kind: String,
    pub accuracy: f64,
    pub alg_latency_ms: f64,
    pub alg_latency_p50_ms: f64,
    pub alg_latency_p90_ms: f64,
    pub l1_norm_frames: f64,
    pub upl_ms: f64,
    pub soft_latency_frames: f64,
    pub hard_latency_frames: f64,
}

const REPORT_HEADER: &str = "label,mask_mode,k,lambda,sched_loss_kind,accuracy,alg_latency_ms,\
alg_latency_p50_ms,alg_latency_p90_ms,l1_norm_frames,upl_ms,soft_latency_frames,\
hard_latency_frames";

/// Aggregates per-utterance evaluations into one report row. Accuracy pools
/// frames; latencies use per-utterance means (hard, in ms) with nearest-rank
/// percentiles.
pub fn aggregate(label: &str, cfg: &EncoderConfig, evals: &[UtteranceEval]) -> Result<EvalRow> {
    let frames: usize = evals.iter().map(|e| e.frames).sum();
    let correct: usize = evals.iter().map(|e| e.correct).sum();
    let hard_ms: Vec<f64> =
        evals.iter().map(|e| e.hard_latency_frames * cfg.frame_ms).collect();
    let (mean, p50, p90) = latency_stats(&hard_ms)?;
    let n = evals.len() as f64;
    Ok(EvalRow {
        label: label.to_string(),
        mask_mode: cfg.mask_mode.to_string(),
        k: cfg.k,
        lambda: cfg.lambda,
        sched_loss_kind: cfg.sched_loss_kind.to_string(),
        accuracy: correct as f64 / frames as f64,
        alg_latency_ms: mean,
        alg_latency_p50_ms: p50,
        alg_latency_p90_ms: p90,
        l1_norm_frames: evals.iter().map(|e| e.l1_norm_frames).sum::<f64>() / n,
        upl_ms: evals.iter().map(|e| e.upl_seconds * 1000.0).sum::<f64>() / n,
        soft_latency_frames: evals.iter().map(|e| e.soft_latency_frames).sum::<f64>() / n,
        hard_latency_frames: evals.iter().map(|e| e.hard_latency_frames).sum::<f64>() / n,
    })
}

/// Writes report rows as CSV with the fixed column order.
pub fn write_report(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.mask_mode,
            r.k,
            r.lambda,
            r.sched_loss_kind,
            r.accuracy,
            r.alg_latency_ms,
            r.alg_latency_p50_ms,
            r.alg_latency_p90_ms,
            r.l1_norm_frames,
            r.upl_ms,
            r.soft_latency_frames,
            r.hard_latency_frames
        )?;
    }
    Ok(())
}

/// Parses a CSV written by [`write_report`].
pub fn read_report(path: &Path) -> Result<Vec<EvalRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        _ => return Err(Error::Data("missing or unexpected report header".into())),
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 13 {
            return Err(Error::Data(format!("bad report row: `{line}`")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Data(format!("bad number `{s}`")))
        };
        rows.push(EvalRow {
            label: cols[0].to_string(),
            mask_mode: cols[1].to_string(),
            k: cols[2].parse().map_err(|_| Error::Data(format!("bad k `{}`", cols[2])))?,
            lambda: num(cols[3])?,
            sched_loss_kind: cols[4].to_string(),
            accuracy: num(cols[5])?,
            alg_latency_ms: num(cols[6])?,
            alg_latency_p50_ms: num(cols[7])?,
            alg_latency_p90_ms: num(cols[8])?,
            l1_norm_frames: num(cols[9])?,
            upl_ms: num(cols[10])?,
            soft_latency_frames: num(cols[11])?,
            hard_latency_frames: num(cols[12])?,
        });
    }
    Ok(rows)
}
