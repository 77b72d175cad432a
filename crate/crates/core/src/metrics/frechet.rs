use nalgebra::{DMatrix, SymmetricEigen};

use super::FeatureSet;
use crate::error::{Error, Result};

/// Eigenvalues this far below zero (relative to the largest magnitude) are
/// treated as a broken covariance rather than round-off.
const NEG_EIG_TOL: f64 = 1e-8;
/// Eigenvalues below this (relative) are round-off in a rank-deficient
/// product and count as zero; their square roots would otherwise leak in.
const ZERO_EIG_TOL: f64 = 1e-12;

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2})` with unbiased covariances.
///
/// The trace of the matrix square root is the sum of square roots of the
/// eigenvalues of `Σa^{1/2} Σb Σa^{1/2}`. When the feature dimension exceeds
/// the sample count the same spectrum is read off the much smaller
/// sample-space matrix `(Xa Xbᵀ)(Xb Xaᵀ)` of the centred data.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            op: "frechet_distance",
            left: vec![a.len(), a.dim()],
            right: vec![b.len(), b.dim()],
        });
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric(format!(
            "Fréchet distance needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    a.check_finite()?;
    b.check_finite()?;
    let (ma, xa) = centred(a);
    let (mb, xb) = centred(b);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = ((a.len() - 1) as f64, (b.len() - 1) as f64);
    let tr_a = xa.norm_squared() / sa;
    let tr_b = xb.norm_squared() / sb;
    let d = a.dim();
    let cross = if d <= a.len().max(b.len()) {
        let cov_a = xa.transpose() * &xa / sa;
        let cov_b = xb.transpose() * &xb / sb;
        let root_a = psd_sqrt(&cov_a)?;
        let m = &root_a * cov_b * &root_a;
        trace_sqrt(&m)?
    } else {
        let c = &xa * xb.transpose();
        let m = &c * c.transpose() / (sa * sb);
        trace_sqrt(&m)?
    };
    Ok((mean_term + tr_a + tr_b - 2.0 * cross).max(0.0))
}

fn centred(f: &FeatureSet) -> (Vec<f64>, DMatrix<f64>) {
    let mean = f.mean();
    let x = DMatrix::from_fn(f.len(), f.dim(), |i, j| f.row(i)[j] - mean[j]);
    (mean, x)
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    check_spectrum(eig.eigenvalues.as_slice())?;
    Ok(clip(eig.eigenvalues.as_slice()))
}

fn check_spectrum(vals: &[f64]) -> Result<()> {
    let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    match vals.iter().find(|&&l| l < -NEG_EIG_TOL * scale) {
        Some(l) => Err(Error::Metric(format!("covariance product has eigenvalue {l:e}, not PSD"))),
        None if vals.iter().any(|v| !v.is_finite()) => Err(Error::Metric("non-finite eigenvalue".into())),
        None => Ok(()),
    }
}

fn clip(vals: &[f64]) -> Vec<f64> {
    let floor = ZERO_EIG_TOL * vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    vals.iter().map(|&l| if l <= floor { 0.0 } else { l }).collect()
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    check_spectrum(eig.eigenvalues.as_slice())?;
    let roots = nalgebra::DVector::from_vec(clip(eig.eigenvalues.as_slice())).map(f64::sqrt);
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

fn trace_sqrt(m: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?.iter().map(|l| l.sqrt()).sum())
}
