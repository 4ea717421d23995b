//! Synthetic streaming sequence-labeling task.
//!
//! Each frame carries a symbol and a required-lookahead indicator `r`; the
//! label is `(symbol_i + symbol_{min(i+r_i, T-1)}) mod V`. Because `r_i` is
//! readable from the frame itself, an oracle scheduler exists, so the ideal
//! mean lookahead and the accuracy ceiling of a purely causal model are both
//! analytic.

use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Task shape: vocabulary, utterance length range, and the distribution of
/// the per-frame required lookahead `r` (index = r, entries sum to 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_t_min")]
    pub t_min: usize,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_lookahead_probs")]
    pub lookahead_probs: Vec<f64>,
    #[serde(default)]
    pub label_noise: f64,
}

fn default_vocab() -> usize {
    16
}
fn default_t_min() -> usize {
    18
}
fn default_t_max() -> usize {
    30
}
fn default_lookahead_probs() -> Vec<f64> {
    vec![0.7, 0.0, 0.0, 0.0, 0.3]
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab: default_vocab(),
            t_min: default_t_min(),
            t_max: default_t_max(),
            lookahead_probs: default_lookahead_probs(),
            label_noise: 0.0,
        }
    }
}

impl TaskConfig {
    /// Largest representable lookahead `R`.
    pub fn max_lookahead(&self) -> usize {
        self.lookahead_probs.len() - 1
    }

    /// Feature width: symbol one-hot plus lookahead one-hot over `{0..R}`.
    pub fn d_in(&self) -> usize {
        self.vocab + self.lookahead_probs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if self.t_min < 1 || self.t_min > self.t_max {
            return Err(Error::Config("need 1 <= t_min <= t_max".into()));
        }
        if self.lookahead_probs.is_empty() {
            return Err(Error::Config("lookahead_probs must be nonempty".into()));
        }
        let s: f64 = self.lookahead_probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.lookahead_probs.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("lookahead_probs must be a distribution".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One generated utterance. `lookahead[i]` is the clipped per-frame
/// requirement actually used to build the label.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceSample {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub lookahead: Vec<usize>,
}

impl UtteranceSample {
    pub fn t(&self) -> usize {
        self.labels.len()
    }

    /// Mean required lookahead, used for difficulty bucketing.
    pub fn difficulty(&self) -> f64 {
        self.lookahead.iter().sum::<usize>() as f64 / self.lookahead.len() as f64
    }

    /// Decodes the symbol one-hot of frame `i` (the first `vocab` columns).
    pub fn symbol(&self, i: usize, vocab: usize) -> usize {
        let row = self.features.row(i);
        (0..vocab).find(|&s| row[s] == 1.0).expect("frame has no symbol one-hot")
    }
}

/// Deterministic single-utterance generator.
pub fn generate_utterance(cfg: &TaskConfig, seed: u64) -> UtteranceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(cfg.t_min..=cfg.t_max);
    let v = cfg.vocab;
    let r_dim = cfg.lookahead_probs.len();
    let symbols: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let raw_r: Vec<usize> = (0..t).map(|_| sample_categorical(&mut rng, &cfg.lookahead_probs)).collect();
    let mut features = Tensor::zeros(vec![t, v + r_dim]);
    let mut labels = Vec::with_capacity(t);
    let mut lookahead = Vec::with_capacity(t);
    for i in 0..t {
        let r = raw_r[i].min(t - 1 - i);
        let partner = i + r;
        let mut y = (symbols[i] + symbols[partner]) % v;
        if cfg.label_noise > 0.0 && rng.gen::<f64>() < cfg.label_noise {
            y = rng.gen_range(0..v);
        }
        *features.at_mut(i, symbols[i]) = 1.0;
        *features.at_mut(i, v + r) = 1.0;
        labels.push(y);
        lookahead.push(r);
    }
    UtteranceSample { features, labels, lookahead }
}

/// Generates `n` utterances; per-utterance seeds are drawn from the given
/// RNG so datasets reproduce from a single stream seed.
pub fn generate_dataset(cfg: &TaskConfig, rng: &mut ChaCha8Rng, n: usize) -> Vec<UtteranceSample> {
    (0..n).map(|_| generate_utterance(cfg, rng.gen())).collect()
}

/// Accuracy ceiling of a strictly causal model and the oracle scheduler's
/// mean lookahead.
pub fn analytic_bounds(cfg: &TaskConfig) -> (f64, f64) {
    let p0 = cfg.lookahead_probs[0];
    let ceiling = p0 + (1.0 - p0) / cfg.vocab as f64;
    let ideal: f64 = cfg
        .lookahead_probs
        .iter()
        .enumerate()
        .map(|(r, &p)| r as f64 * p)
        .sum();
    (ceiling, ideal)
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Serialize, Deserialize)]
struct JsonUtterance {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    lookahead: Vec<usize>,
}

/// Writes a dataset as JSON lines, one utterance per line.
pub fn write_jsonl(path: &Path, data: &[UtteranceSample]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for u in data {
        let rows = (0..u.t()).map(|i| u.features.row(i).to_vec()).collect();
        let j = JsonUtterance {
            features: rows,
            labels: u.labels.clone(),
            lookahead: u.lookahead.clone(),
        };
        serde_json::to_writer(&mut f, &j)?;
        writeln!(f)?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_jsonl`].
pub fn read_jsonl(path: &Path) -> Result<Vec<UtteranceSample>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonUtterance = serde_json::from_str(&line)?;
        if j.features.len() != j.labels.len() || j.features.len() != j.lookahead.len() {
            return Err(Error::Data("utterance field lengths disagree".into()));
        }
        if j.features.is_empty() {
            return Err(Error::Data("empty utterance".into()));
        }
        out.push(UtteranceSample {
            features: Tensor::from_rows(&j.features),
            labels: j.labels,
            lookahead: j.lookahead,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_the_pairing_function() {
        let cfg = TaskConfig { vocab: 4, lookahead_probs: vec![0.5, 0.5], ..Default::default() };
        for seed in 0..20 {
            let u = generate_utterance(&cfg, seed);
            for i in 0..u.t() {
                let s_i = u.symbol(i, cfg.vocab);
                let s_p = u.symbol(i + u.lookahead[i], cfg.vocab);
                assert_eq!(u.labels[i], (s_i + s_p) % cfg.vocab);
                // lookahead one-hot readable from the frame
                assert_eq!(u.features.at(i, cfg.vocab + u.lookahead[i]), 1.0);
            }
        }
    }

    #[test]
    fn pairing_hand_value() {
        // V=4, symbols 1 and 3 one frame apart: (1 + 3) mod 4 = 0
        assert_eq!((1 + 3) % 4, 0);
        // find it realized in generated data
        let cfg = TaskConfig { vocab: 4, lookahead_probs: vec![0.0, 1.0], ..Default::default() };
        let mut found = false;
        for seed in 0..200 {
            let u = generate_utterance(&cfg, seed);
            for i in 0..u.t() - 1 {
                if u.symbol(i, 4) == 1 && u.symbol(i + 1, 4) == 3 && u.lookahead[i] == 1 {
                    assert_eq!(u.labels[i], 0);
                    found = true;
                }
            }
        }
        assert!(found, "hand case never sampled");
    }

    #[test]
    fn zero_lookahead_task_is_causal() {
        let cfg = TaskConfig { vocab: 6, lookahead_probs: vec![1.0], ..Default::default() };
        let u = generate_utterance(&cfg, 3);
        assert!(u.lookahead.iter().all(|&r| r == 0));
        for i in 0..u.t() {
            assert_eq!(u.labels[i], (2 * u.symbol(i, 6)) % 6);
        }
    }

    #[test]
    fn lookahead_clips_at_the_boundary() {
        let cfg = TaskConfig {
            t_min: 5,
            t_max: 5,
            lookahead_probs: vec![0.0, 0.0, 0.0, 0.0, 1.0],
            ..Default::default()
        };
        let u = generate_utterance(&cfg, 1);
        assert_eq!(u.lookahead, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn empirical_mean_lookahead_matches_expectation() {
        let cfg = TaskConfig::default(); // p = (0.7, 0, 0, 0, 0.3)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // long utterances so boundary clipping is negligible
        let cfg = TaskConfig { t_min: 200, t_max: 200, ..cfg };
        let data = generate_dataset(&cfg, &mut rng, 50);
        let mut sum = 0.0;
        let mut n = 0usize;
        for u in &data {
            sum += u.lookahead.iter().sum::<usize>() as f64;
            n += u.t();
        }
        let mean = sum / n as f64;
        assert!(n >= 10_000);
        assert!((mean - 1.2).abs() < 0.05, "mean r {mean}");
    }

    #[test]
    fn analytic_bounds_hand_values() {
        let mut cfg = TaskConfig { vocab: 4, ..Default::default() };
        let (ceiling, ideal) = analytic_bounds(&cfg);
        assert!((ceiling - 0.775).abs() < 1e-12);
        assert!((ideal - 1.2).abs() < 1e-12);
        cfg.vocab = 16;
        let (ceiling16, _) = analytic_bounds(&cfg);
        assert!((ceiling16 - 0.71875).abs() < 1e-12);
        let causal = TaskConfig { lookahead_probs: vec![1.0], ..Default::default() };
        assert_eq!(analytic_bounds(&causal), (1.0, 0.0));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = TaskConfig::default();
        assert_eq!(generate_utterance(&cfg, 5), generate_utterance(&cfg, 5));
        assert_ne!(generate_utterance(&cfg, 5), generate_utterance(&cfg, 6));
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = TaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = generate_dataset(&cfg, &mut rng, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_jsonl(&path, &data).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn config_validation_catches_bad_distributions() {
        let bad = TaskConfig { lookahead_probs: vec![0.5, 0.6], ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TaskConfig::default().validate().is_ok());
    }
}
