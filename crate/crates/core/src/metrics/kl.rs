use crate::error::{Error, Result};
use crate::training::Example;

pub const PSEUDO_COUNT: f64 = 0.5;

/// Per-class token law: a unigram marginal and the conditional law of a
/// token given its left neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFactors {
    pub unigram: Vec<f64>,
    /// Row-major `K×K`, row `a` = law of the right neighbour of `a`.
    pub transition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution {
    pub codebook_size: usize,
    pub grid_width: usize,
    pub classes: Vec<ClassFactors>,
}

impl ReferenceDistribution {
    pub fn new(codebook_size: usize, grid_width: usize, classes: Vec<ClassFactors>) -> Result<Self> {
        let k = codebook_size;
        for (c, f) in classes.iter().enumerate() {
            if f.unigram.len() != k || f.transition.len() != k * k {
                return Err(Error::Dimension {
                    op: "reference_distribution",
                    left: vec![f.unigram.len(), f.transition.len()],
                    right: vec![k, k * k],
                });
            }
            let rows = std::iter::once(&f.unigram[..]).chain(f.transition.chunks_exact(k));
            for row in rows {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(p > 0.0)) {
                    return Err(Error::Metric(format!(
                        "class {c}: factor rows must be strictly positive and sum to 1 (sum {s})"
                    )));
                }
            }
        }
        Ok(ReferenceDistribution {
            codebook_size,
            grid_width,
            classes,
        })
    }

    /// Smoothed empirical factors of a corpus, for data without a known
    /// generating law.
    pub fn empirical(data: &[Example], codebook_size: usize, grid_width: usize, num_classes: usize) -> Result<Self> {
        let classes = (0..num_classes)
            .map(|c| {
                let counts = Counts::tally(data.iter().filter(|e| e.label == c), codebook_size, grid_width)?;
                Ok(counts.smoothed())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(codebook_size, grid_width, classes)
    }
}

struct Counts {
    k: usize,
    unigram: Vec<f64>,
    pairs: Vec<f64>,
}

impl Counts {
    fn tally<'a>(grids: impl Iterator<Item = &'a Example>, k: usize, width: usize) -> Result<Self> {
        let mut c = Counts {
            k,
            unigram: vec![0.0; k],
            pairs: vec![0.0; k * k],
        };
        for ex in grids {
            if width == 0 || ex.tokens.len() % width != 0 {
                return Err(Error::Shape(format!("{} tokens do not tile rows of {width}", ex.tokens.len())));
            }
            if let Some(&t) = ex.tokens.iter().find(|&&t| t >= k) {
                return Err(Error::InvalidToken(format!("token {t} outside [0, {k})")));
            }
            for row in ex.tokens.chunks_exact(width) {
                for &t in row {
                    c.unigram[t] += 1.0;
                }
                for w in row.windows(2) {
                    c.pairs[w[0] * k + w[1]] += 1.0;
                }
            }
        }
        Ok(c)
    }

    fn smoothed(&self) -> ClassFactors {
        let k = self.k;
        let norm = |row: &[f64]| {
            let total: f64 = row.iter().sum::<f64>() + PSEUDO_COUNT * k as f64;
            row.iter().map(|&x| (x + PSEUDO_COUNT) / total).collect::<Vec<_>>()
        };
        ClassFactors {
            unigram: norm(&self.unigram),
            transition: self.pairs.chunks_exact(k).flat_map(norm).collect(),
        }
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

/// Sum over factors of `KL(empirical ‖ reference)`, averaged over the
/// classes present in `generated`.
///
/// Factors are the unigram marginal and the left-to-right transition law;
/// the latter contributes the expected conditional KL, weighted by how
/// often each left token occurs. Empirical laws use a 0.5 pseudo-count.
pub fn token_histogram_kl(generated: &[Example], reference: &ReferenceDistribution) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Metric("no generated grids".into()));
    }
    if let Some(e) = generated.iter().find(|e| e.label >= reference.classes.len()) {
        return Err(Error::Index(format!("class {} without a reference", e.label)));
    }
    let k = reference.codebook_size;
    let mut total = 0.0;
    let mut present = 0usize;
    for (c, rf) in reference.classes.iter().enumerate() {
        let mut it = generated.iter().filter(|e| e.label == c).peekable();
        if it.peek().is_none() {
            continue;
        }
        let counts = Counts::tally(it, k, reference.grid_width)?;
        let emp = counts.smoothed();
        let mut sum = kl(&emp.unigram, &rf.unigram);
        let n_pairs: f64 = counts.pairs.iter().sum();
        if n_pairs > 0.0 {
            for a in 0..k {
                let weight = counts.pairs[a * k..(a + 1) * k].iter().sum::<f64>() / n_pairs;
                if weight > 0.0 {
                    sum += weight * kl(&emp.transition[a * k..(a + 1) * k], &rf.transition[a * k..(a + 1) * k]);
                }
            }
        }
        total += sum;
        present += 1;
    }
    Ok(total / present as f64)
}
