//! Synthetic class-conditional token corpus with a known law.
//!
//! Each grid is a Markov chain in raster order: the first token comes from
//! the class marginal `q_c`, every next token repeats its predecessor with
//! probability `coupling` and is otherwise a fresh draw from `q_c`. `q_c`
//! is the chain's stationary law, so every position has marginal `q_c` and
//! every horizontal pair follows the transition law exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ClassFactors, ReferenceDistribution};
use crate::training::Example;

/// Share of each class marginal spread uniformly over all tokens.
const FLOOR_MASS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpus {
    pub codebook_size: usize,
    pub num_classes: usize,
    pub coupling: f64,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            codebook_size: 16,
            num_classes: 2,
            coupling: 0.9,
            grid_height: 8,
            grid_width: 8,
        }
    }
}

impl SyntheticCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.codebook_size < self.num_classes.max(2) {
            return Err(Error::Config(format!(
                "synthetic corpus needs K >= max(2, classes), got K = {} with {} classes",
                self.codebook_size, self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.coupling) {
            return Err(Error::Config(format!("coupling {} outside [0,1)", self.coupling)));
        }
        if self.grid_height == 0 || self.grid_width == 0 {
            return Err(Error::Config("grid dims must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// `q_c`: class `c` favours the tokens `j` with `j mod C = c`.
    pub fn class_marginal(&self, class: usize) -> Vec<f64> {
        let (k, c) = (self.codebook_size, self.num_classes);
        let favoured = (0..k).filter(|j| j % c == class).count() as f64;
        (0..k)
            .map(|j| {
                let peak = if j % c == class { (1.0 - FLOOR_MASS) / favoured } else { 0.0 };
                peak + FLOOR_MASS / k as f64
            })
            .collect()
    }

    /// Row-major `K×K` law of a token given its left neighbour.
    pub fn transition(&self, class: usize) -> Vec<f64> {
        let k = self.codebook_size;
        let q = self.class_marginal(class);
        let mut t = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                t[a * k + b] = (1.0 - self.coupling) * q[b] + if a == b { self.coupling } else { 0.0 };
            }
        }
        t
    }

    pub fn sample_grid<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<usize> {
        let q = self.class_marginal(class);
        let draw = |rng: &mut R| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, &p) in q.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            q.len() - 1
        };
        let mut grid = Vec::with_capacity(self.grid_len());
        grid.push(draw(rng));
        for _ in 1..self.grid_len() {
            let prev = *grid.last().unwrap();
            let next = if rng.random::<f64>() < self.coupling { prev } else { draw(rng) };
            grid.push(next);
        }
        grid
    }

    /// `n` grids with labels cycling through the classes.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<Example>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|i| {
                let label = i % self.num_classes;
                Example {
                    tokens: self.sample_grid(label, &mut rng),
                    label,
                }
            })
            .collect())
    }

    pub fn reference(&self) -> Result<ReferenceDistribution> {
        self.validate()?;
        let classes = (0..self.num_classes)
            .map(|c| ClassFactors {
                unigram: self.class_marginal(c),
                transition: self.transition(c),
            })
            .collect();
        ReferenceDistribution::new(self.codebook_size, self.grid_width, classes)
    }
}
