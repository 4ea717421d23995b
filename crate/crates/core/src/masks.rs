//! Attention mask families.
//!
//! A mask is a `T x T` matrix with entries in `[0, 1]`; `M[i][j]` scales how
//! much frame `i` may attend to frame `j`. All families keep the past fully
//! open (`M[i][j] = 1` for `j <= i`) and differ only in how far forward they
//! reach. Static families are binary; the learned scheduler produces
//! fractional masks that sharpen as the temperature anneals.

use std::io::Write as _;
use std::path::Path;

use crate::tape::sigmoid;
use crate::tensor::Tensor;
use crate::Result;

/// Lower-triangular ones: no lookahead at all.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in 0..=i {
            *m.at_mut(i, j) = 1.0;
        }
    }
    m
}

/// Every frame sees `k` frames ahead (per layer).
pub fn layerwise_mask(t: usize, k: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in 0..=(i + k).min(t - 1) {
            *m.at_mut(i, j) = 1.0;
        }
    }
    m
}

/// Last frame index of the chunk containing frame `i`, for chunk size `c`.
pub fn chunk_end(i: usize, c: usize, t: usize) -> usize {
    ((i / c + 1) * c - 1).min(t - 1)
}

/// Frames attend anywhere up to the end of their own chunk.
pub fn chunked_mask(t: usize, c: usize) -> Tensor {
    assert!(c >= 1, "chunked_mask: chunk size must be at least 1");
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in 0..=chunk_end(i, c, t) {
            *m.at_mut(i, j) = 1.0;
        }
    }
    m
}

/// Unrestricted attention (offline upper bound).
pub fn full_mask(t: usize) -> Tensor {
    Tensor::full(vec![t, t], 1.0)
}

/// Fractional scheduler mask from per-frame curve centers.
///
/// Row `i` is 1 over the past and diagonal, follows
/// `1 - sigmoid((offset - centers[i]) / tau)` for forward offsets up to
/// `max_span`, and is exactly 0 beyond.
pub fn scheduler_mask_values(centers: &[f64], max_span: usize, tau: f64) -> Tensor {
    let t = centers.len();
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in 0..=i {
            *m.at_mut(i, j) = 1.0;
        }
        let hi = (i + max_span).min(t - 1);
        for j in (i + 1)..=hi {
            let z = ((j - i) as f64 - centers[i]) / tau;
            *m.at_mut(i, j) = 1.0 - sigmoid(z);
        }
    }
    m
}

/// Random fractional mask stack for property tests and oracle sweeps.
/// Rows come from scheduler curves (random centers and temperatures), so
/// each row is monotone over its forward band — the shape real schedulers
/// produce.
pub fn random_scheduler_stack(
    rng: &mut rand_chacha::ChaCha8Rng,
    t: usize,
    n_layers: usize,
    span: usize,
) -> MaskStack {
    use rand::Rng as _;
    let layers = (0..n_layers)
        .map(|_| {
            let centers: Vec<f64> =
                (0..t).map(|_| rng.gen_range(0.0..(span as f64 + 0.5))).collect();
            let tau = rng.gen_range(0.05..2.0);
            scheduler_mask_values(&centers, span, tau)
        })
        .collect();
    MaskStack { layers }
}

/// Thresholds a fractional mask into a binary one: entries strictly above
/// `theta` become 1, the rest 0.
pub fn binarize_mask(m: &Tensor, theta: f64) -> Tensor {
    let data = m.data().iter().map(|&v| if v > theta { 1.0 } else { 0.0 }).collect();
    Tensor::new(m.shape().to_vec(), data)
}

/// A per-layer stack of masks for one utterance. `layers[0]` gates the
/// first encoder layer.
#[derive(Clone, Debug)]
pub struct MaskStack {
    pub layers: Vec<Tensor>,
}

impl MaskStack {
    pub fn uniform(mask: Tensor, n_layers: usize) -> Self {
        MaskStack { layers: vec![mask; n_layers] }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn t(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn binarize(&self, theta: f64) -> MaskStack {
        MaskStack { layers: self.layers.iter().map(|m| binarize_mask(m, theta)).collect() }
    }
}

/// Writes a mask as CSV, one row per line, values formatted with `{}`.
pub fn write_mask_csv(path: &Path, m: &Tensor) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a mask as a binary PGM (P5) image, one pixel per entry, value
/// `round(255 * M[i][j])`.
pub fn write_mask_pgm(path: &Path, m: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", m.cols(), m.rows())?;
    let pixels: Vec<u8> = m.data().iter().map(|&v| (255.0 * v).round() as u8).collect();
    f.write_all(&pixels)?;
    Ok(())
}
