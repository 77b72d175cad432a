use super::FeatureSet;
use crate::error::{Error, Result};

/// Squared Euclidean distance, summed in index order.
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest neighbour in the
/// same set, the point itself excluded.
pub fn knn_radii2(set: &FeatureSet, k: usize) -> Vec<f64> {
    let n = set.len();
    let mut d = Vec::with_capacity(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            d.clear();
            d.extend((0..n).filter(|&j| j != i).map(|j| dist2(set.row(i), set.row(j))));
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

/// `cross[i][j]` = squared distance from `a[i]` to `b[j]`.
fn cross2(a: &FeatureSet, b: &FeatureSet) -> Vec<Vec<f64>> {
    (0..a.len())
        .map(|i| (0..b.len()).map(|j| dist2(a.row(i), b.row(j))).collect())
        .collect()
}

fn check(real: &FeatureSet, gen: &FeatureSet, k: usize, need_gen: bool) -> Result<()> {
    if real.dim() != gen.dim() {
        return Err(Error::Dimension {
            op: "knn",
            left: vec![real.len(), real.dim()],
            right: vec![gen.len(), gen.dim()],
        });
    }
    let limit = if need_gen { real.len().min(gen.len()) } else { real.len() };
    if k == 0 || k >= limit {
        return Err(Error::InvalidParameter(format!(
            "k = {k} must lie in [1, {limit}) for sets of {} real and {} generated points",
            real.len(),
            gen.len()
        )));
    }
    if gen.is_empty() {
        return Err(Error::InvalidParameter("no generated points".into()));
    }
    real.check_finite()?;
    gen.check_finite()
}

/// Precision: share of generated points inside some real k-NN ball.
/// Recall: share of real points inside some generated k-NN ball. Ball
/// membership is strict (`d < radius`).
pub fn knn_precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    check(real, gen, k, true)?;
    let rr = knn_radii2(real, k);
    let rg = knn_radii2(gen, k);
    let d = cross2(real, gen);
    let precision = (0..gen.len())
        .filter(|&j| (0..real.len()).any(|i| d[i][j] < rr[i]))
        .count() as f64
        / gen.len() as f64;
    let recall = (0..real.len())
        .filter(|&i| (0..gen.len()).any(|j| d[i][j] < rg[j]))
        .count() as f64
        / real.len() as f64;
    Ok((precision, recall))
}

/// Density: mean number of real k-NN balls holding a generated point,
/// divided by `k`. Coverage: share of real balls holding at least one
/// generated point.
pub fn knn_density_coverage(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    check(real, gen, k, false)?;
    let rr = knn_radii2(real, k);
    let d = cross2(real, gen);
    let hits: usize = (0..gen.len())
        .map(|j| (0..real.len()).filter(|&i| d[i][j] < rr[i]).count())
        .sum();
    let density = hits as f64 / (k * gen.len()) as f64;
    let coverage = (0..real.len())
        .filter(|&i| d[i].iter().any(|&x| x < rr[i]))
        .count() as f64
        / real.len() as f64;
    Ok((density, coverage))
}
