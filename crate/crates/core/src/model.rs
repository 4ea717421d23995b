//! Transformer encoder with adaptive lookahead scheduling.
//!
//! Pre-norm blocks; each block's attention is gated by a mask that is either
//! a static family (causal / layerwise / chunked / full) or produced by a
//! per-layer scheduler: a two-layer feed-forward net reads the previous
//! layer's hidden states and emits per-frame curve centers
//! `o_i = sigmoid(ffn(h_i)) * (K + epsilon)`, which shape an annealable
//! reverse-S mask row. Training jointly minimizes the task cross-entropy and
//! `lambda` times one of the latency regularizers; the temperature `tau`
//! anneals exponentially so the fractional masks harden over the run.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::UtteranceSample;
use crate::latency::{
    alg_latency_loss, dependency_dp, dependency_forward, density_kernel, frame_delays, l1_loss,
    upl_loss,
};
use crate::masks::{causal_mask, chunked_mask, full_mask, layerwise_mask, MaskStack};
use crate::optim::{Adam, Param};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Hidden width of every scheduler feed-forward net.
pub const SCHED_HIDDEN: usize = 64;

/// Half-width of the learned relative-position bias each attention head
/// adds to its scores; offsets beyond the window share its edge entries.
pub const REL_WINDOW: usize = 8;

/// Initial height of each head's relative-position peak. Head `h` starts
/// aimed at forward offset `h + 1`, giving heads distinct receptive
/// offsets from the first step; training is free to move or flatten them.
pub const REL_PEAK_INIT: f64 = 4.0;

/// Which latency regularizer joins the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedLossKind {
    None,
    L1,
    AlgLat,
    Upl,
}

impl fmt::Display for SchedLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SchedLossKind::None => "none",
            SchedLossKind::L1 => "l1",
            SchedLossKind::AlgLat => "alg_lat",
            SchedLossKind::Upl => "upl",
        };
        f.write_str(s)
    }
}

/// Mask family applied in every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Adaptive,
    Causal,
    Layerwise,
    Chunked(usize),
    Full,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskMode::Adaptive => f.write_str("adaptive"),
            MaskMode::Causal => f.write_str("causal"),
            MaskMode::Layerwise => f.write_str("layerwise"),
            MaskMode::Chunked(c) => write!(f, "chunked({c})"),
            MaskMode::Full => f.write_str("full"),
        }
    }
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(MaskMode::Adaptive),
            "causal" => Ok(MaskMode::Causal),
            "layerwise" => Ok(MaskMode::Layerwise),
            "full" => Ok(MaskMode::Full),
            _ => {
                if let Some(inner) = s.strip_prefix("chunked(").and_then(|r| r.strip_suffix(')')) {
                    let c: usize = inner
                        .parse()
                        .map_err(|_| Error::Config(format!("bad chunk size in `{s}`")))?;
                    if c == 0 {
                        return Err(Error::Config("chunk size must be at least 1".into()));
                    }
                    Ok(MaskMode::Chunked(c))
                } else {
                    Err(Error::Config(format!("unknown mask_mode `{s}`")))
                }
            }
        }
    }
}

impl Serialize for MaskMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MaskMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Model, regularizer, and training settings. `d_in` and `n_classes` of 0
/// mean "derive from the task config".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(default = "d4")]
    pub layers: usize,
    #[serde(default = "d64")]
    pub d_model: usize,
    #[serde(default = "d4")]
    pub n_heads: usize,
    #[serde(default = "d128")]
    pub d_ff: usize,
    #[serde(default)]
    pub d_in: usize,
    #[serde(default)]
    pub n_classes: usize,
    #[serde(default = "d8")]
    pub k: usize,
    #[serde(default = "dhalf")]
    pub epsilon: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub lambda_warmup: Option<u64>,
    #[serde(default = "dkind")]
    pub sched_loss_kind: SchedLossKind,
    #[serde(default = "dmode")]
    pub mask_mode: MaskMode,
    #[serde(default = "dmu")]
    pub mu: f64,
    #[serde(default = "drho")]
    pub rho: f64,
    #[serde(default = "dframe")]
    pub frame_ms: f64,
    #[serde(default = "done")]
    pub tau_start: f64,
    #[serde(default = "dtau_end")]
    pub tau_end: f64,
    #[serde(default)]
    pub tau_decay: Option<f64>,
    #[serde(default)]
    pub tau_start_step: Option<u64>,
    #[serde(default = "dlr")]
    pub learning_rate: f64,
    #[serde(default = "dbeta1")]
    pub beta1: f64,
    #[serde(default = "dbeta2")]
    pub beta2: f64,
    #[serde(default = "deps")]
    pub adam_epsilon: f64,
    #[serde(default = "dsteps")]
    pub steps: u64,
    #[serde(default = "d4u")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "dtrue")]
    pub backlog_include_current: bool,
}

fn d4() -> usize {
    4
}
fn d4u() -> usize {
    4
}
fn d64() -> usize {
    64
}
fn d128() -> usize {
    128
}
fn d8() -> usize {
    8
}
fn dhalf() -> f64 {
    0.5
}
fn dkind() -> SchedLossKind {
    SchedLossKind::None
}
fn dmode() -> MaskMode {
    MaskMode::Adaptive
}
fn dmu() -> f64 {
    100.0
}
fn drho() -> f64 {
    1000.0 / 120.0
}
fn dframe() -> f64 {
    120.0
}
fn done() -> f64 {
    1.0
}
fn dtau_end() -> f64 {
    1e-4
}
fn dlr() -> f64 {
    3e-3
}
fn dbeta1() -> f64 {
    0.9
}
fn dbeta2() -> f64 {
    0.999
}
fn deps() -> f64 {
    1e-8
}
fn dsteps() -> u64 {
    1000
}
fn dtrue() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model must be a positive multiple of n_heads".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.d_in == 0 || self.n_classes == 0 {
            return Err(Error::Config("d_in and n_classes must be resolved before use".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(Error::Config("need tau_start >= tau_end > 0".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.mu <= 0.0 || self.rho <= 0.0 {
            return Err(Error::Config("mu and rho must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Forward reach of a single layer's mask, for the dependency DP band.
    pub fn layer_span(&self, t: usize) -> usize {
        match self.mask_mode {
            MaskMode::Adaptive | MaskMode::Layerwise => self.k,
            MaskMode::Chunked(c) => c - 1,
            MaskMode::Causal => 0,
            MaskMode::Full => t - 1,
        }
    }

    /// Step at which annealing begins; defaults to 30% of total steps.
    pub fn anneal_start(&self) -> u64 {
        self.tau_start_step.unwrap_or(self.steps * 3 / 10)
    }

    /// Step at which the latency penalty switches on. Defaults to halfway
    /// to the annealing start: early enough that the penalty still acts
    /// while tau is 1 and scheduler gradients are strong, late enough that
    /// the task has started to exploit lookahead. Without the grace period
    /// some seeds shut the window before the task can demonstrate that
    /// lookahead pays, and never recover.
    pub fn lambda_warmup_steps(&self) -> u64 {
        self.lambda_warmup.unwrap_or_else(|| self.anneal_start() / 2)
    }

    /// Per-step decay; defaults to reaching `tau_end` exactly at the final
    /// step.
    pub fn anneal_decay(&self) -> f64 {
        if let Some(d) = self.tau_decay {
            return d;
        }
        let span = self.steps.saturating_sub(self.anneal_start()).max(1);
        (self.tau_end / self.tau_start).powf(1.0 / span as f64)
    }
}

/// Temperature at a given step: flat at `tau_start`, then exponential decay
/// floored at `tau_end`.
pub fn anneal_temperature(step: u64, cfg: &EncoderConfig) -> f64 {
    let start = cfg.anneal_start();
    if step < start {
        return cfg.tau_start;
    }
    let decayed = cfg.tau_start * cfg.anneal_decay().powf((step - start) as f64);
    decayed.max(cfg.tau_end)
}

/// All trainable parameters plus the annealing state.
#[derive(Clone)]
pub struct EncoderState {
    pub params: Vec<Param>,
    pub tau: f64,
    pub step: u64,
}

impl EncoderState {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains. The
    /// scheduler output bias starts at 0, so centers begin at
    /// `0.5 * (K + epsilon)` (half-open lookahead).
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        let xavier = |name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let lim = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect();
            Param::new(name, Tensor::matrix(rows, cols, data))
        };
        let zeros = |name: String, n: usize| Param::new(name, Tensor::zeros(vec![n]));
        let ones = |name: String, n: usize| Param::new(name, Tensor::full(vec![n], 1.0));

        params.push(xavier("input.proj".into(), cfg.d_in, cfg.d_model, rng));
        params.push(zeros("input.bias".into(), cfg.d_model));
        for b in 0..cfg.layers {
            params.push(ones(format!("block{b}.ln1.gain"), cfg.d_model));
            params.push(zeros(format!("block{b}.ln1.shift"), cfg.d_model));
            for w in ["wq", "wk", "wv", "wo"] {
                params.push(xavier(format!("block{b}.attn.{w}"), cfg.d_model, cfg.d_model, rng));
            }
            for hh in 0..cfg.n_heads {
                let mut rp = Tensor::zeros(vec![1, 2 * REL_WINDOW + 1]);
                *rp.at_mut(0, REL_WINDOW + (hh + 1).min(REL_WINDOW)) = REL_PEAK_INIT;
                params.push(Param::new(format!("block{b}.attn.rp{hh}"), rp));
            }
            params.push(ones(format!("block{b}.ln2.gain"), cfg.d_model));
            params.push(zeros(format!("block{b}.ln2.shift"), cfg.d_model));
            params.push(xavier(format!("block{b}.ffn.w1"), cfg.d_model, cfg.d_ff, rng));
            params.push(zeros(format!("block{b}.ffn.b1"), cfg.d_ff));
            params.push(xavier(format!("block{b}.ffn.w2"), cfg.d_ff, cfg.d_model, rng));
            params.push(zeros(format!("block{b}.ffn.b2"), cfg.d_model));
            params.push(xavier(format!("block{b}.sched.w1"), cfg.d_model, SCHED_HIDDEN, rng));
            params.push(zeros(format!("block{b}.sched.b1"), SCHED_HIDDEN));
            params.push(xavier(format!("block{b}.sched.w2"), SCHED_HIDDEN, 1, rng));
            params.push(zeros(format!("block{b}.sched.b2"), 1));
        }
        params.push(ones("final.ln.gain".into(), cfg.d_model));
        params.push(zeros("final.ln.shift".into(), cfg.d_model));
        params.push(xavier("head.w".into(), cfg.d_model, cfg.n_classes, rng));
        params.push(zeros("head.b".into(), cfg.n_classes));

        EncoderState { params, tau: cfg.tau_start, step: 0 }
    }

    pub fn save(&self, prefix: &std::path::Path) -> Result<()> {
        let mut extras = BTreeMap::new();
        extras.insert("tau".to_string(), self.tau);
        extras.insert("step".to_string(), self.step as f64);
        crate::checkpoint::save(prefix, &self.params, &extras)
    }

    pub fn load(prefix: &std::path::Path) -> Result<Self> {
        let (params, extras) = crate::checkpoint::load(prefix)?;
        let tau = *extras
            .get("tau")
            .ok_or_else(|| Error::Data("checkpoint missing tau".into()))?;
        let step = *extras
            .get("step")
            .ok_or_else(|| Error::Data("checkpoint missing step".into()))? as u64;
        Ok(EncoderState { params, tau, step })
    }
}

/// Parameter leaves registered on a tape, resolvable by name.
pub struct ParamVars {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl ParamVars {
    pub fn register(tape: &Tape, params: &[Param]) -> Self {
        ParamVars {
            names: params.iter().map(|p| p.name.clone()).collect(),
            vars: params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }
}

/// Everything the losses and metrics need from one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Per-layer mask variables (leaves for static families).
    pub masks: Vec<Var>,
    /// Per-layer scheduler centers (empty for static families).
    pub centers: Vec<Var>,
}

/// Curve centers for one layer: `sigmoid(relu-FFN(h)) * (K + epsilon)`,
/// as a `T x 1` matrix.
fn scheduler_offsets(tape: &Tape, pv: &ParamVars, block: usize, h: Var, cfg: &EncoderConfig) -> Var {
    let a = tape.relu(tape.add(
        tape.matmul(h, pv.get(&format!("block{block}.sched.w1"))),
        pv.get(&format!("block{block}.sched.b1")),
    ));
    let z = tape.add(
        tape.matmul(a, pv.get(&format!("block{block}.sched.w2"))),
        pv.get(&format!("block{block}.sched.b2")),
    );
    tape.scale(tape.sigmoid(z), cfg.k as f64 + cfg.epsilon)
}

/// One pre-norm block: `h + MHSA(LN(h), mask)`, then `+ FFN(LN(.))`.
fn block_forward(
    tape: &Tape,
    pv: &ParamVars,
    block: usize,
    h: Var,
    mask: Var,
    cfg: &EncoderConfig,
) -> Var {
    let d_head = cfg.d_model / cfg.n_heads;
    let n1 = tape.layer_norm(
        h,
        pv.get(&format!("block{block}.ln1.gain")),
        pv.get(&format!("block{block}.ln1.shift")),
    );
    let q = tape.matmul(n1, pv.get(&format!("block{block}.attn.wq")));
    let k = tape.matmul(n1, pv.get(&format!("block{block}.attn.wk")));
    let v = tape.matmul(n1, pv.get(&format!("block{block}.attn.wv")));
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hh in 0..cfg.n_heads {
        let (lo, hi) = (hh * d_head, (hh + 1) * d_head);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / (d_head as f64).sqrt());
        let scores = tape.rel_pos_bias(scores, pv.get(&format!("block{block}.attn.rp{hh}")));
        let attn = tape.masked_softmax(scores, mask);
        heads.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&heads);
    let attn_out = tape.matmul(cat, pv.get(&format!("block{block}.attn.wo")));
    let h2 = tape.add(h, attn_out);
    let n2 = tape.layer_norm(
        h2,
        pv.get(&format!("block{block}.ln2.gain")),
        pv.get(&format!("block{block}.ln2.shift")),
    );
    let mid = tape.relu(tape.add(
        tape.matmul(n2, pv.get(&format!("block{block}.ffn.w1"))),
        pv.get(&format!("block{block}.ffn.b1")),
    ));
    let ffn = tape.add(
        tape.matmul(mid, pv.get(&format!("block{block}.ffn.w2"))),
        pv.get(&format!("block{block}.ffn.b2")),
    );
    tape.add(h2, ffn)
}

/// Static mask tensor for one utterance length, or `None` in adaptive mode.
pub fn static_mask(cfg: &EncoderConfig, t: usize) -> Option<Tensor> {
    match cfg.mask_mode {
        MaskMode::Adaptive => None,
        MaskMode::Causal => Some(causal_mask(t)),
        MaskMode::Layerwise => Some(layerwise_mask(t, cfg.k)),
        MaskMode::Chunked(c) => Some(chunked_mask(t, c)),
        MaskMode::Full => Some(full_mask(t)),
    }
}

/// Full forward pass. In adaptive mode each block's mask is built by its
/// scheduler from the previous block's output; otherwise the static family
/// mask is a constant leaf.
pub fn encoder_forward(
    tape: &Tape,
    pv: &ParamVars,
    cfg: &EncoderConfig,
    x: &Tensor,
    tau: f64,
) -> Forward {
    let t = x.rows();
    let xv = tape.leaf(x.clone());
    let mut h = tape.add(tape.matmul(xv, pv.get("input.proj")), pv.get("input.bias"));
    let static_m = static_mask(cfg, t).map(|m| tape.leaf(m));
    let mut masks = Vec::with_capacity(cfg.layers);
    let mut centers = Vec::new();
    for b in 0..cfg.layers {
        let mask = match static_m {
            Some(m) => m,
            None => {
                let o = scheduler_offsets(tape, pv, b, h, cfg);
                centers.push(o);
                tape.scheduler_mask(o, cfg.k, tau)
            }
        };
        masks.push(mask);
        h = block_forward(tape, pv, b, h, mask, cfg);
    }
    let hn = tape.layer_norm(h, pv.get("final.ln.gain"), pv.get("final.ln.shift"));
    let logits = tape.add(tape.matmul(hn, pv.get("head.w")), pv.get("head.b"));
    Forward { logits, masks, centers }
}

/// Forward pass with externally supplied masks (e.g. binarized), bypassing
/// the schedulers.
pub fn encoder_forward_fixed_masks(
    tape: &Tape,
    pv: &ParamVars,
    cfg: &EncoderConfig,
    x: &Tensor,
    masks: &MaskStack,
) -> Forward {
    assert_eq!(masks.n_layers(), cfg.layers, "mask stack depth mismatch");
    let xv = tape.leaf(x.clone());
    let mut h = tape.add(tape.matmul(xv, pv.get("input.proj")), pv.get("input.bias"));
    let mut mask_vars = Vec::with_capacity(cfg.layers);
    for b in 0..cfg.layers {
        let m = tape.leaf(masks.layers[b].clone());
        mask_vars.push(m);
        h = block_forward(tape, pv, b, h, m, cfg);
    }
    let hn = tape.layer_norm(h, pv.get("final.ln.gain"), pv.get("final.ln.shift"));
    let logits = tape.add(tape.matmul(hn, pv.get("head.w")), pv.get("head.b"));
    Forward { logits, masks: mask_vars, centers: Vec::new() }
}

/// Scheduler regularizer for one utterance's masks, per the configured
/// kind.
pub fn sched_loss(tape: &Tape, cfg: &EncoderConfig, masks: &[Var], t: usize) -> Var {
    let span = cfg.layer_span(t);
    match cfg.sched_loss_kind {
        SchedLossKind::None => tape.scalar(0.0),
        SchedLossKind::L1 => l1_loss(tape, masks),
        SchedLossKind::AlgLat => {
            let deps = dependency_dp(tape, masks, span);
            let f = tape.last_dep_density(deps[deps.len() - 1]);
            alg_latency_loss(tape, f)
        }
        SchedLossKind::Upl => {
            let deps = dependency_dp(tape, masks, span);
            let f: Vec<Var> = deps.iter().map(|&d| tape.last_dep_density(d)).collect();
            upl_loss(tape, &f, cfg.mu, cfg.rho, cfg.backlog_include_current)
        }
    }
}

/// Scalar losses for one utterance: `(total, task, sched)`. The sched term
/// joins the total only when `lambda > 0` and a kind is configured.
pub fn utterance_loss(
    tape: &Tape,
    pv: &ParamVars,
    cfg: &EncoderConfig,
    sample: &UtteranceSample,
    tau: f64,
) -> (Var, Var, Var, Forward) {
    let fwd = encoder_forward(tape, pv, cfg, &sample.features, tau);
    let task = tape.cross_entropy(fwd.logits, &sample.labels);
    let sched = sched_loss(tape, cfg, &fwd.masks, sample.t());
    let total = if cfg.lambda > 0.0 && cfg.sched_loss_kind != SchedLossKind::None {
        tape.add(task, tape.scale(sched, cfg.lambda))
    } else {
        task
    };
    (total, task, sched, fwd)
}

/// Per-step training metrics.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: u64,
    pub tau: f64,
    pub task_loss: f64,
    pub sched_loss: f64,
    pub soft_latency_frames: f64,
}

/// One Adam step over a batch. The batch loss is the mean of per-utterance
/// totals; the soft algorithmic latency is always reported as a metric even
/// when another (or no) regularizer is trained.
pub fn train_step(
    state: &mut EncoderState,
    opt: &mut Adam,
    cfg: &EncoderConfig,
    batch: &[UtteranceSample],
) -> StepMetrics {
    assert!(!batch.is_empty(), "train_step: empty batch");
    let tau = anneal_temperature(state.step, cfg);
    let mut cfg_eff = cfg.clone();
    if state.step < cfg.lambda_warmup_steps() {
        cfg_eff.lambda = 0.0;
    }
    let tape = Tape::new();
    let pv = ParamVars::register(&tape, &state.params);
    let mut total: Option<Var> = None;
    let mut task_sum = 0.0;
    let mut sched_sum = 0.0;
    let mut soft_sum = 0.0;
    for sample in batch {
        let (loss, task, sched, fwd) = utterance_loss(&tape, &pv, &cfg_eff, sample, tau);
        task_sum += tape.item(task);
        sched_sum += tape.item(sched);
        soft_sum += soft_latency_frames(&tape, cfg, &fwd, sample.t());
        total = Some(match total {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    let n = batch.len() as f64;
    let root = tape.scale(total.expect("nonempty batch"), 1.0 / n);
    let grads = tape.backward(root);
    let grad_tensors: Vec<Tensor> = pv.vars.iter().map(|&v| grads.get(v)).collect();
    opt.step(&mut state.params, &grad_tensors);
    state.step += 1;
    state.tau = tau;
    StepMetrics {
        step: state.step,
        tau,
        task_loss: task_sum / n,
        sched_loss: sched_sum / n,
        soft_latency_frames: soft_sum / n,
    }
}

/// Mean expected delay (frames) of one forward pass's fractional masks,
/// computed off-tape.
pub fn soft_latency_frames(tape: &Tape, cfg: &EncoderConfig, fwd: &Forward, t: usize) -> f64 {
    let stack = MaskStack { layers: fwd.masks.iter().map(|&m| tape.value(m)).collect() };
    let deps = dependency_forward(&stack, cfg.layer_span(t));
    let f = density_kernel(&deps[deps.len() - 1]);
    let (frames, _) = frame_delays(&f, cfg.frame_ms);
    frames.iter().sum::<f64>() / t as f64
}
