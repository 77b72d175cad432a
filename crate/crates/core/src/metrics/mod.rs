//! Sample-quality metrics: Fréchet distance and k-NN precision, recall,
//! density and coverage over feature vectors, token-law KL against a
//! reference distribution, and forward-pass speedup.
//!
//! Image features here are raw pixels plus an average-pool pyramid, so
//! absolute values are only comparable between runs of this crate.

mod frechet;
mod kl;
mod knn;

pub use frechet::frechet_distance;
pub use kl::{token_histogram_kl, ClassFactors, ReferenceDistribution, PSEUDO_COUNT};
pub use knn::{knn_density_coverage, knn_precision_recall, knn_radii2};

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Real,
    Generated,
}

/// `n×d` row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
    pub source: Source,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>, source: Source) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(FeatureSet { dim, data, source })
    }

    pub fn from_rows(rows: &[Vec<f64>], source: Source) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("feature rows of unequal length".into()));
        }
        Self::new(dim, rows.concat(), source)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            m.iter_mut().zip(self.row(i)).for_each(|(a, &b)| *a += b);
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Metric(format!("non-finite feature at row {}", i / self.dim))),
            None => Ok(()),
        }
    }
}

/// Flattened pixels followed by 2×2 and 4×4 average pools, for an `h×w×c`
/// image in row-major HWC order.
pub fn image_features(pixels: &[f32], height: usize, width: usize, channels: usize) -> Result<Vec<f64>> {
    if pixels.len() != height * width * channels {
        return Err(Error::Dimension {
            op: "image_features",
            left: vec![pixels.len()],
            right: vec![height, width, channels],
        });
    }
    if height % 4 != 0 || width % 4 != 0 {
        return Err(Error::Shape(format!("image {height}×{width} not divisible by 4")));
    }
    let mut out: Vec<f64> = pixels.iter().map(|&v| v as f64).collect();
    for f in [2usize, 4] {
        let area = (f * f) as f64;
        for y in 0..height / f {
            for x in 0..width / f {
                for ch in 0..channels {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += pixels[((y * f + dy) * width + x * f + dx) * channels + ch] as f64;
                        }
                    }
                    out.push(s / area);
                }
            }
        }
    }
    Ok(out)
}

/// Normalised token histogram of one grid, the per-sample feature behind
/// token-space coverage.
pub fn token_histogram(tokens: &[usize], codebook_size: usize) -> Vec<f64> {
    let mut h = vec![0.0; codebook_size];
    for &t in tokens {
        if t < codebook_size {
            h[t] += 1.0;
        }
    }
    let n = tokens.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Autoregressive over parallel forward passes.
pub fn speedup_ratio(parallel_forwards: usize, baseline_forwards: usize) -> Result<f64> {
    if parallel_forwards == 0 || baseline_forwards == 0 {
        return Err(Error::InvalidParameter("forward counts must be at least 1".into()));
    }
    Ok(baseline_forwards as f64 / parallel_forwards as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupRow {
    pub steps: usize,
    pub cfg_weight: f32,
    pub forwards_parallel: usize,
    pub forwards_autoregressive: usize,
    pub ratio: f64,
    pub wall_ms: f64,
}

pub const SPEEDUP_HEADER: &str = "steps,cfg,forwards_parallel,forwards_autoregressive,ratio,wall_ms";

impl SpeedupRow {
    pub fn new(steps: usize, cfg_weight: f32, parallel: usize, baseline: usize, wall_ms: f64) -> Result<Self> {
        Ok(SpeedupRow {
            steps,
            cfg_weight,
            forwards_parallel: parallel,
            forwards_autoregressive: baseline,
            ratio: speedup_ratio(parallel, baseline)?,
            wall_ms,
        })
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.steps, self.cfg_weight, self.forwards_parallel, self.forwards_autoregressive, self.ratio, self.wall_ms
        )
    }
}
