use maskgen::corpus::SyntheticCorpus;
use maskgen::metrics::token_histogram_kl;
use maskgen::numerics::Tape;
use maskgen::sampler::{decode_batch, SamplerConfig};
use maskgen::training::{
    curve_csv, masked_count, masked_token_loss, sample_training_mask, training_step, Checkpoint, Example, MaskSchedule,
    TrainConfig, Trainer, CURVE_HEADER, VERSION,
};
use maskgen::numerics::Tensor;
use maskgen::transformer::{Transformer, TransformerConfig};
use maskgen::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(k: usize) -> TransformerConfig {
    TransformerConfig {
        hidden_dim: 32,
        depth: 2,
        heads: 2,
        mlp_dim: 64,
        codebook_size: k,
        ..TransformerConfig::default()
    }
}

fn corpus() -> SyntheticCorpus {
    SyntheticCorpus {
        coupling: 0.9,
        ..SyntheticCorpus::default()
    }
}

fn params_of(m: &Transformer) -> Vec<Vec<f32>> {
    m.params().iter().map(|(_, _, t)| t.data.clone()).collect()
}

#[test]
fn every_schedule_hits_both_endpoints() {
    for s in MaskSchedule::ALL {
        assert_eq!(s.gamma(0.0).unwrap(), 1.0, "{s}");
        assert!(s.gamma(1.0).unwrap().abs() < 1e-15, "{s}");
    }
}

#[test]
fn schedule_closed_forms() {
    assert!((MaskSchedule::Arccos.gamma(0.5).unwrap() - 2.0 / 3.0).abs() < 1e-9);
    assert!((MaskSchedule::Cosine.gamma(0.5).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    assert_eq!(MaskSchedule::Linear.gamma(0.25).unwrap(), 0.75);
    assert_eq!(MaskSchedule::Square.gamma(0.5).unwrap(), 0.75);
    assert_eq!(MaskSchedule::Root.gamma(0.25).unwrap(), 0.5);
}

#[test]
fn schedules_strictly_decrease_on_a_fine_grid() {
    for s in MaskSchedule::ALL {
        let g: Vec<f64> = (0..=1000).map(|i| s.gamma(i as f64 / 1000.0).unwrap()).collect();
        assert!(g.windows(2).all(|w| w[0] > w[1]), "{s}");
    }
}

#[test]
fn progress_outside_unit_interval_is_a_domain_error() {
    for r in [-0.01, 1.01, f64::NAN] {
        assert!(matches!(MaskSchedule::Linear.gamma(r), Err(Error::Domain(_))));
    }
}

#[test]
fn schedule_names_round_trip() {
    for s in MaskSchedule::ALL {
        assert_eq!(s.name().parse::<MaskSchedule>().unwrap(), s);
    }
    assert!(matches!("zigzag".parse::<MaskSchedule>(), Err(Error::Config(_))));
}

#[test]
fn start_of_schedule_masks_everything() {
    for s in MaskSchedule::ALL {
        assert_eq!(masked_count(s, 0.0, 64).unwrap(), 64);
        assert_eq!(masked_count(s, 1.0, 64).unwrap(), 1);
    }
}

#[test]
fn sampled_masks_never_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let (m, r) = sample_training_mask(16, MaskSchedule::Square, &mut rng).unwrap();
        assert!((0.0..1.0).contains(&r));
        assert!(m.iter().filter(|&&b| b).count() >= 1);
    }
}

#[test]
fn mean_masked_fraction_tracks_the_integral() {
    // Closed-form integrals of each γ over [0,1].
    let expected = [
        (MaskSchedule::Root, 1.0 / 3.0),
        (MaskSchedule::Linear, 0.5),
        (MaskSchedule::Square, 2.0 / 3.0),
        (MaskSchedule::Cosine, 2.0 / std::f64::consts::PI),
        (MaskSchedule::Arccos, 2.0 / std::f64::consts::PI),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (s, integral) in expected {
        assert!((s.integral() - integral).abs() < 1e-12);
        let mean = (0..100_000)
            .map(|_| sample_training_mask(64, s, &mut rng).unwrap().0.iter().filter(|&&b| b).count() as f64 / 64.0)
            .sum::<f64>()
            / 1e5;
        assert!((mean - integral).abs() < 0.01, "{s}: {mean} vs {integral}");
    }
}

#[test]
fn mask_positions_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = [0usize; 8];
    for _ in 0..40_000 {
        let (m, _) = sample_training_mask(8, MaskSchedule::Linear, &mut rng).unwrap();
        for (h, &b) in hits.iter_mut().zip(&m) {
            *h += b as usize;
        }
    }
    let mean = hits.iter().sum::<usize>() as f64 / 8.0;
    assert!(hits.iter().all(|&h| (h as f64 - mean).abs() < 0.03 * mean), "{hits:?}");
}

#[test]
fn loss_ignores_unmasked_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (rows, k) = (6, 5);
    let logits: Vec<f32> = (0..rows * k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets = [0, 4, 2, 2, 1, 3];
    let mask = [true, false, true, false, false, true];
    let value = |l: Vec<f32>| {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(vec![rows, k], l, true).unwrap();
        let loss = masked_token_loss(&mut tape, x, &targets, &mask, 0.1).unwrap();
        tape.scalar(loss)
    };
    let base = value(logits.clone());
    let mut zeroed = logits;
    for r in (0..rows).filter(|&r| !mask[r]) {
        zeroed[r * k..(r + 1) * k].iter_mut().for_each(|v| *v = 0.0);
    }
    assert_eq!(base, value(zeroed));
}

#[test]
fn initial_loss_is_near_ln_k() {
    let k = 64;
    let model = Transformer::new(small_model(k), 5).unwrap();
    let c = SyntheticCorpus {
        codebook_size: k,
        ..corpus()
    };
    let data = c.generate(32, 6).unwrap();
    let mut tr = Trainer::new(model, TrainConfig::default()).unwrap();
    let loss = tr.step(&data).unwrap().loss as f64;
    let ln_k = (k as f64).ln();
    assert!((loss - ln_k).abs() < 0.1 * ln_k, "{loss} vs {ln_k}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut model = Transformer::new(small_model(16), 7).unwrap();
    let before = params_of(&model);
    let cfg = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = maskgen::numerics::AdamW::new(cfg.adamw(), model.params()).unwrap();
    let data = corpus().generate(8, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let report = training_step(&mut model, &mut opt, &data, &cfg, &mut rng).unwrap();
    assert!(report.loss.is_finite() && report.loss > 0.0);
    assert_eq!(params_of(&model), before);
}

#[test]
fn empty_batch_is_a_contract_error() {
    let mut model = Transformer::new(small_model(16), 7).unwrap();
    let cfg = TrainConfig::default();
    let mut opt = maskgen::numerics::AdamW::new(cfg.adamw(), model.params()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert!(matches!(training_step(&mut model, &mut opt, &[], &cfg, &mut rng), Err(Error::Contract(_))));
}

#[test]
fn mask_tokens_in_training_grids_are_rejected() {
    let mut model = Transformer::new(small_model(16), 7).unwrap();
    let cfg = TrainConfig::default();
    let mut opt = maskgen::numerics::AdamW::new(cfg.adamw(), model.params()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bad = Example {
        tokens: vec![16; 64],
        label: 0,
    };
    assert!(matches!(
        training_step(&mut model, &mut opt, &[bad], &cfg, &mut rng),
        Err(Error::InvalidToken(_))
    ));
}

#[test]
fn full_condition_dropout_trains_unconditionally() {
    let mut model = Transformer::new(small_model(16), 10).unwrap();
    let data = corpus().generate(16, 11).unwrap();
    for (p, all_null) in [(1.0, true), (0.0, false)] {
        let cfg = TrainConfig {
            cond_drop_prob: p,
            ..TrainConfig::default()
        };
        let mut opt = maskgen::numerics::AdamW::new(cfg.adamw(), model.params()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = training_step(&mut model, &mut opt, &data, &cfg, &mut rng).unwrap();
        assert_eq!(r.labels_used.len(), 16);
        if all_null {
            assert!(r.labels_used.iter().all(Option::is_none));
        } else {
            assert!(r.labels_used.iter().zip(&data).all(|(l, e)| *l == Some(e.label)));
        }
    }
}

#[test]
fn fixed_seed_gives_identical_loss_sequences() {
    let data = corpus().generate(96, 13).unwrap();
    let run = || {
        let mut tr = Trainer::new(Transformer::new(small_model(16), 14).unwrap(), TrainConfig::default()).unwrap();
        (0..5).map(|_| tr.step(&data).unwrap().loss).collect::<Vec<f32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn two_thousand_steps_halve_the_loss() {
    let data = corpus().generate(4096, 15).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let model = TransformerConfig {
        hidden_dim: 64,
        mlp_dim: 128,
        ..small_model(16)
    };
    let mut tr = Trainer::new(Transformer::new(model, 16).unwrap(), cfg).unwrap();
    let mut losses = Vec::with_capacity(2000);
    for _ in 0..2000 {
        losses.push(tr.step(&data).unwrap().loss as f64);
    }
    let initial = losses[0];
    let last: f64 = losses[1900..].iter().sum::<f64>() / 100.0;
    assert!(last < 0.5 * initial, "initial {initial}, final {last}");
}

#[test]
fn train_emits_a_finite_reproducible_curve_with_falling_kl() {
    let c = corpus();
    let data = c.generate(1024, 17).unwrap();
    let reference = c.reference().unwrap();
    let labels: Vec<Option<usize>> = (0..64).map(|i| Some(i % 2)).collect();
    let run = || {
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 4,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(Transformer::new(small_model(16), 18).unwrap(), cfg).unwrap();
        let eval = |m: &Transformer, _epoch: usize| {
            let sc = SamplerConfig {
                cfg_weight: 0.0,
                ..SamplerConfig::default()
            };
            let gen: Vec<Example> = decode_batch(m, &labels, &sc)?
                .into_iter()
                .map(|t| Example {
                    label: t.label.unwrap(),
                    tokens: t.tokens,
                })
                .collect();
            Ok((token_histogram_kl(&gen, &reference)?, 0.0))
        };
        let mut seen = 0;
        let recs = tr
            .train(&data, eval, |_, _| {
                seen += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(seen, 4);
        recs
    };
    let a = run();
    let csv = curve_csv(&a);
    assert!(csv.starts_with(CURVE_HEADER));
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv, curve_csv(&run()));
    assert!(a.iter().all(|r| r.loss.is_finite() && r.kl.is_finite()));
    assert_eq!(a.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(a[3].kl < a[0].kl, "{a:?}");
}

fn sample_checkpoint() -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let t = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1e3..1e3)).collect()).unwrap()
    };
    Checkpoint {
        config: "[train]\nlr = 0.0001\n".into(),
        tensors: vec![
            ("a".into(), t(vec![3, 4], &mut rng)),
            ("b.c".into(), t(vec![7], &mut rng)),
            ("special".into(), Tensor::new(vec![4], vec![f32::MIN_POSITIVE, -0.0, f32::MAX, 1e-42]).unwrap()),
        ],
    }
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let ck = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mgdc");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.config, ck.config);
    for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape, tb.shape);
        assert!(ta.data.iter().zip(&tb.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn flipped_magic_is_a_format_error() {
    let mut bytes = sample_checkpoint().to_bytes();
    bytes[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn newer_version_is_a_version_error() {
    let mut bytes = sample_checkpoint().to_bytes();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::Version { found, supported }) => assert_eq!((found, supported), (VERSION + 1, VERSION)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_truncation_is_reported_not_a_crash() {
    let bytes = sample_checkpoint().to_bytes();
    for cut in 0..bytes.len() {
        let r = Checkpoint::from_bytes(&bytes[..cut]);
        assert!(matches!(r, Err(Error::Corrupt { .. }) | Err(Error::Format(_))), "cut {cut}: {r:?}");
    }
    let r = Checkpoint::from_bytes(&bytes[..bytes.len() - 10]);
    assert!(matches!(r, Err(Error::Corrupt { offset, .. }) if offset <= bytes.len()));
}

#[test]
fn flipped_payload_bit_fails_the_checksum() {
    let mut bytes = sample_checkpoint().to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt { .. })));
}

#[test]
fn missing_file_error_names_the_path() {
    let err = Checkpoint::load(std::path::Path::new("/nonexistent/dir/x.mgdc")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/dir/x.mgdc"), "{err}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = corpus().generate(80, 20).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: 3,
        ..TrainConfig::default()
    };
    let fresh = || Trainer::new(Transformer::new(small_model(16), 21).unwrap(), cfg).unwrap();

    let mut straight = fresh();
    for _ in 0..13 {
        straight.step(&data).unwrap();
    }

    let mut first = fresh();
    for _ in 0..7 {
        first.step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.mgdc");
    first.save(&path, &toml::Table::new()).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.global_step, 7);
    for _ in 7..13 {
        resumed.step(&data).unwrap();
    }
    assert_eq!(params_of(&resumed.model), params_of(&straight.model));
    assert_eq!(resumed.opt.state, straight.opt.state);
}
