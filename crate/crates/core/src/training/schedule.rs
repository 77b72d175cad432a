use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps progress `r ∈ [0,1]` to the fraction of positions still masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSchedule {
    Root,
    Linear,
    Square,
    Cosine,
    Arccos,
}

impl MaskSchedule {
    pub const ALL: [MaskSchedule; 5] = [
        MaskSchedule::Root,
        MaskSchedule::Linear,
        MaskSchedule::Square,
        MaskSchedule::Cosine,
        MaskSchedule::Arccos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskSchedule::Root => "root",
            MaskSchedule::Linear => "linear",
            MaskSchedule::Square => "square",
            MaskSchedule::Cosine => "cosine",
            MaskSchedule::Arccos => "arccos",
        }
    }

    pub fn gamma(self, r: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Domain(format!("schedule progress {r} outside [0,1]")));
        }
        Ok(match self {
            MaskSchedule::Root => 1.0 - r.sqrt(),
            MaskSchedule::Linear => 1.0 - r,
            MaskSchedule::Square => 1.0 - r * r,
            MaskSchedule::Cosine if r == 1.0 => 0.0,
            MaskSchedule::Cosine => (PI * r / 2.0).cos(),
            MaskSchedule::Arccos => r.acos() / (PI / 2.0),
        })
    }

    /// `∫₀¹ γ(r) dr`, the mean masked fraction under uniform `r`.
    pub fn integral(self) -> f64 {
        match self {
            MaskSchedule::Root => 1.0 / 3.0,
            MaskSchedule::Linear => 0.5,
            MaskSchedule::Square => 2.0 / 3.0,
            MaskSchedule::Cosine => 2.0 / PI,
            MaskSchedule::Arccos => 2.0 / PI,
        }
    }
}

impl fmt::Display for MaskSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskSchedule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule `{s}` (expected root, linear, square, cosine or arccos)")))
    }
}

/// `clamp(round(γ(r)·n), 1, n)`.
pub fn masked_count(schedule: MaskSchedule, r: f64, n: usize) -> Result<usize> {
    let g = schedule.gamma(r)?;
    Ok(((g * n as f64).round() as usize).clamp(1, n))
}

/// Draws `r ~ U(0,1)` and masks `clamp(round(γ(r)·n), 1, n)` positions
/// chosen uniformly without replacement.
pub fn sample_training_mask<R: Rng + ?Sized>(n: usize, schedule: MaskSchedule, rng: &mut R) -> Result<(Vec<bool>, f64)> {
    if n == 0 {
        return Err(Error::Contract("cannot mask an empty grid".into()));
    }
    let r: f64 = rng.random();
    let m = masked_count(schedule, r, n)?;
    let mut mask = vec![false; n];
    for i in sample(rng, n, m) {
        mask[i] = true;
    }
    Ok((mask, r))
}
