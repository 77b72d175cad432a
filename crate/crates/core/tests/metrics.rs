use maskgen::corpus::SyntheticCorpus;
use maskgen::metrics::{
    frechet_distance, image_features, knn_density_coverage, knn_precision_recall, speedup_ratio, token_histogram,
    token_histogram_kl, ClassFactors, FeatureSet, ReferenceDistribution, Source, SpeedupRow, SPEEDUP_HEADER,
};
use maskgen::training::Example;
use maskgen::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Box–Muller draw from N(mean, 1).
fn normal<R: Rng>(rng: &mut R, mean: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    mean + (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn set(rows: &[Vec<f64>], source: Source) -> FeatureSet {
    FeatureSet::from_rows(rows, source).unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, lattice: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| if lattice { rng.random_range(0..4) as f64 } else { rng.random_range(-1.0..1.0) })
                .collect()
        })
        .collect()
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-th smallest squared distance to the other points of `rows`, by full
/// sort.
fn brute_radius(rows: &[Vec<f64>], i: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = (0..rows.len()).filter(|&j| j != i).map(|j| d2(&rows[i], &rows[j])).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[k - 1]
}

fn brute_metrics(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> (f64, f64, f64, f64) {
    let rr: Vec<f64> = (0..real.len()).map(|i| brute_radius(real, i, k)).collect();
    let rg: Vec<f64> = (0..gen.len()).map(|i| brute_radius(gen, i, k)).collect();
    let mut prec = 0;
    let mut hits = 0;
    for g in gen {
        let inside = real.iter().zip(&rr).filter(|(r, &rad)| d2(r, g) < rad).count();
        hits += inside;
        if inside > 0 {
            prec += 1;
        }
    }
    let mut rec = 0;
    let mut cov = 0;
    for (r, &rad) in real.iter().zip(&rr) {
        if gen.iter().zip(&rg).any(|(g, &gr)| d2(r, g) < gr) {
            rec += 1;
        }
        if gen.iter().any(|g| d2(r, g) < rad) {
            cov += 1;
        }
    }
    (
        prec as f64 / gen.len() as f64,
        rec as f64 / real.len() as f64,
        hits as f64 / (k * gen.len()) as f64,
        cov as f64 / real.len() as f64,
    )
}

#[test]
fn frechet_of_a_set_with_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = random_rows(&mut rng, 60, 5, false);
    let a = set(&rows, Source::Real);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
}

#[test]
fn frechet_unit_gaussian_shift_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let a: Vec<f64> = (0..n).map(|_| normal(&mut rng, 0.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| normal(&mut rng, 1.0)).collect();
    let fa = FeatureSet::new(1, a, Source::Real).unwrap();
    let fb = FeatureSet::new(1, b, Source::Generated).unwrap();
    let f = frechet_distance(&fa, &fb).unwrap();
    assert!((f - 1.0).abs() < 0.05, "{f}");
}

#[test]
fn frechet_isotropic_2d_shift_is_squared_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<Vec<f64>> = (0..20_000).map(|_| vec![normal(&mut rng, 0.0), normal(&mut rng, 0.0)]).collect();
    let b: Vec<Vec<f64>> = (0..20_000).map(|_| vec![normal(&mut rng, 3.0), normal(&mut rng, 4.0)]).collect();
    let f = frechet_distance(&set(&a, Source::Real), &set(&b, Source::Generated)).unwrap();
    assert!((f - 25.0).abs() < 1.0, "{f}");
}

#[test]
fn frechet_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, d) in [(40, 3), (30, 8), (10, 40)] {
        let a = set(&random_rows(&mut rng, n, d, false), Source::Real);
        let b = set(&random_rows(&mut rng, n + 5, d, false), Source::Generated);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        assert!(ab >= 0.0);
    }
}

#[test]
fn frechet_wide_features_agree_with_direct_covariances() {
    // d > n takes the sample-space route; compare with an explicit
    // covariance computation through nalgebra.
    use nalgebra::{DMatrix, SymmetricEigen};
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (12, 20);
    let ra = random_rows(&mut rng, n, d, false);
    let rb = random_rows(&mut rng, n, d, false);
    let cov = |rows: &[Vec<f64>]| {
        let m: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - m[j]);
        (m, x.transpose() * &x / (n - 1) as f64)
    };
    let (ma, ca) = cov(&ra);
    let (mb, cb) = cov(&rb);
    let ea = SymmetricEigen::new(ca.clone());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues.map(|v| v.max(0.0).sqrt())) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &cb * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let expected = mean + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    let got = frechet_distance(&set(&ra, Source::Real), &set(&rb, Source::Generated)).unwrap();
    assert!((got - expected).abs() < 1e-8 * expected.abs().max(1.0), "{got} vs {expected}");
}

#[test]
fn frechet_rejects_degenerate_input() {
    let one = set(&[vec![1.0, 2.0]], Source::Real);
    let two = set(&[vec![1.0, 2.0], vec![0.0, 1.0]], Source::Generated);
    assert!(matches!(frechet_distance(&one, &two), Err(Error::Metric(_))));
    let bad = set(&[vec![f64::NAN, 2.0], vec![0.0, 1.0]], Source::Generated);
    assert!(frechet_distance(&two, &bad).is_err());
}

#[test]
fn identical_sets_give_perfect_knn_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows = random_rows(&mut rng, 30, 4, false);
    let real = set(&rows, Source::Real);
    let gen = set(&rows, Source::Generated);
    assert_eq!(knn_precision_recall(&real, &gen, 3).unwrap(), (1.0, 1.0));
    let (density, coverage) = knn_density_coverage(&real, &gen, 1).unwrap();
    assert_eq!(coverage, 1.0);
    assert_eq!(density, 1.0);
}

#[test]
fn distant_sets_score_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows = random_rows(&mut rng, 25, 3, false);
    let far: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + 1e6).collect()).collect();
    let real = set(&rows, Source::Real);
    let gen = set(&far, Source::Generated);
    assert_eq!(knn_precision_recall(&real, &gen, 3).unwrap(), (0.0, 0.0));
    assert_eq!(knn_density_coverage(&real, &gen, 3).unwrap(), (0.0, 0.0));
}

#[test]
fn planted_twenty_point_instance() {
    // Real: a 4×5 lattice. Generated: half on lattice sites, half far away.
    let real: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 5) as f64, (i / 5) as f64]).collect();
    let gen: Vec<Vec<f64>> = (0..20)
        .map(|i| if i < 10 { vec![(i % 5) as f64 + 0.1, (i / 5) as f64] } else { vec![100.0 + i as f64, 0.0] })
        .collect();
    let (r, g) = (set(&real, Source::Real), set(&gen, Source::Generated));
    let (p, rc) = knn_precision_recall(&r, &g, 3).unwrap();
    let (dn, cv) = knn_density_coverage(&r, &g, 3).unwrap();
    assert_eq!((p, rc, dn, cv), brute_metrics(&real, &gen, 3));
    assert_eq!(p, 0.5);
}

#[test]
fn k_out_of_range_is_rejected() {
    let a = set(&[vec![0.0], vec![1.0], vec![2.0]], Source::Real);
    let b = set(&[vec![0.0], vec![1.0]], Source::Generated);
    assert!(matches!(knn_precision_recall(&a, &b, 2), Err(Error::InvalidParameter(_))));
    assert!(matches!(knn_precision_recall(&a, &b, 0), Err(Error::InvalidParameter(_))));
    assert!(knn_density_coverage(&a, &b, 2).is_ok());
    assert!(matches!(knn_density_coverage(&a, &b, 3), Err(Error::InvalidParameter(_))));
}

#[test]
fn knn_metrics_equal_brute_force_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let nr = rng.random_range(4..=50);
        let ng = rng.random_range(4..=50);
        let d = rng.random_range(1..=6);
        let k = rng.random_range(1..nr.min(ng));
        let lattice = case % 2 == 0;
        let real = random_rows(&mut rng, nr, d, lattice);
        let gen = random_rows(&mut rng, ng, d, lattice);
        let (r, g) = (set(&real, Source::Real), set(&gen, Source::Generated));
        let (p, rc) = knn_precision_recall(&r, &g, k).unwrap();
        let (dn, cv) = knn_density_coverage(&r, &g, k).unwrap();
        assert_eq!((p, rc, dn, cv), brute_metrics(&real, &gen, k), "case {case}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn knn_metrics_stay_in_range(seed in any::<u64>(), nr in 3usize..30, ng in 3usize..30, k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, g) = (set(&random_rows(&mut rng, nr, 3, false), Source::Real), set(&random_rows(&mut rng, ng, 3, false), Source::Generated));
        let (p, rc) = knn_precision_recall(&r, &g, k).unwrap();
        let (dn, cv) = knn_density_coverage(&r, &g, k).unwrap();
        for v in [p, rc, cv] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(dn >= 0.0);
    }
}

fn uniform_reference(k: usize, width: usize) -> ReferenceDistribution {
    let u = vec![1.0 / k as f64; k];
    ReferenceDistribution::new(
        k,
        width,
        vec![ClassFactors {
            unigram: u.clone(),
            transition: u.repeat(k),
        }],
    )
    .unwrap()
}

#[test]
fn exact_samples_have_near_zero_kl() {
    let corpus = SyntheticCorpus::default();
    let reference = corpus.reference().unwrap();
    // 1600 grids × 64 tokens ≈ 10⁵ tokens.
    let data = corpus.generate(1600, 9).unwrap();
    let kl = token_histogram_kl(&data, &reference).unwrap();
    assert!((0.0..0.01).contains(&kl), "{kl}");
}

#[test]
fn single_token_generations_against_uniform_cost_ln_k_per_factor() {
    let k = 4;
    let reference = uniform_reference(k, 8);
    let gen: Vec<Example> = (0..2000)
        .map(|_| Example {
            tokens: vec![2; 64],
            label: 0,
        })
        .collect();
    let kl = token_histogram_kl(&gen, &reference).unwrap();
    let per_factor = (k as f64).ln();
    assert!((kl - 2.0 * per_factor).abs() < 0.01, "{kl}");
}

#[test]
fn kl_rejects_empty_and_unknown_classes() {
    let reference = uniform_reference(4, 2);
    assert!(matches!(token_histogram_kl(&[], &reference), Err(Error::Metric(_))));
    let e = Example {
        tokens: vec![0; 4],
        label: 1,
    };
    assert!(matches!(token_histogram_kl(&[e], &reference), Err(Error::Index(_))));
    let e = Example {
        tokens: vec![0, 4, 0, 0],
        label: 0,
    };
    assert!(matches!(token_histogram_kl(&[e], &reference), Err(Error::InvalidToken(_))));
}

#[test]
fn reference_rows_must_be_distributions() {
    let bad = ClassFactors {
        unigram: vec![0.5, 0.6],
        transition: vec![0.5; 4],
    };
    assert!(matches!(ReferenceDistribution::new(2, 2, vec![bad]), Err(Error::Metric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = SyntheticCorpus { codebook_size: 6, num_classes: 2, coupling: 0.5, grid_height: 3, grid_width: 3 };
        let gen: Vec<Example> = (0..n)
            .map(|i| Example { tokens: (0..9).map(|_| rng.random_range(0..6)).collect(), label: i % 2 })
            .collect();
        prop_assert!(token_histogram_kl(&gen, &corpus.reference().unwrap()).unwrap() >= 0.0);
    }
}

#[test]
fn speedup_arithmetic() {
    assert_eq!(speedup_ratio(8, 64).unwrap(), 8.0);
    assert_eq!(speedup_ratio(16, 1024).unwrap(), 64.0);
    assert_eq!(speedup_ratio(5, 5).unwrap(), 1.0);
    assert!(speedup_ratio(0, 5).is_err());
    let row = SpeedupRow::new(16, 0.0, 16, 1024, 1.5).unwrap();
    assert_eq!(row.ratio, 64.0);
    assert_eq!(row.csv().split(',').count(), SPEEDUP_HEADER.split(',').count());
}

#[test]
fn image_features_append_two_pool_levels() {
    let pixels: Vec<f32> = (0..16).map(|v| v as f32).collect();
    let f = image_features(&pixels, 4, 4, 1).unwrap();
    assert_eq!(f.len(), 16 + 4 + 1);
    assert_eq!(&f[16..20], &[2.5, 4.5, 10.5, 12.5]);
    assert_eq!(f[20], 7.5);
}

#[test]
fn token_histogram_is_normalised() {
    assert_eq!(token_histogram(&[0, 1, 1, 3], 4), vec![0.25, 0.5, 0.0, 0.25]);
}
