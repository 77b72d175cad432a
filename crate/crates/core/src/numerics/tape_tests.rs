use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng).with_grad()
}

fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect()
}

/// Builds the graph in f64 on fresh leaves, reduces the output with a fixed
/// projection and compares every input's gradient to central differences.
fn fd_check<F>(inputs: &[Tensor], build: F, tol: f64)
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let points: Vec<Vec<f64>> = inputs.iter().map(|t| t.data.iter().map(|&v| v as f64).collect()).collect();
    let eval = |vals: &[Vec<f64>], want: Option<usize>| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(inputs)
            .map(|(v, t)| tape.input(t.shape.clone(), v.clone(), t.requires_grad).unwrap())
            .collect();
        let out = build(&mut tape, &vars).expect("forward");
        let w = projection(tape.value(out).len());
        let loss: f64 = tape.value(out).iter().zip(&w).map(|(&o, &w)| o * w).sum();
        let grad = want.map(|i| {
            let wt = tape.constant(tape.shape(out).to_vec(), w.clone()).unwrap();
            let prod = tape.mul(out, wt).unwrap();
            let l = tape.sum(prod);
            tape.backward(l).unwrap();
            tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; vals[i].len()])
        });
        (loss, grad)
    };
    for i in 0..inputs.len() {
        if !inputs[i].requires_grad {
            continue;
        }
        let analytic = eval(&points, Some(i)).1.unwrap();
        let report = finite_difference_check(
            |x| {
                let mut vals = points.clone();
                vals[i] = x.to_vec();
                eval(&vals, None).0
            },
            &points[i],
            &analytic,
            1e-3,
            tol,
        );
        assert!(report.passed(), "input {i}: max rel err {} ({:?})", report.max_rel_err, report.errors);
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f32>::new();
    let i2 = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let p = tape.matmul(i2, i2).unwrap();
    assert_eq!(tape.value(p), &[1.0, 0.0, 0.0, 1.0]);
    let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = tape.constant(vec![2, 1], vec![0.0, 1.0]).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[2.0, 4.0]);
    assert_eq!(tape.shape(c), &[2, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradients() {
    fd_check(&[rand_tensor(&[5, 7], 1), rand_tensor(&[7, 3], 2)], |t, v| t.matmul(v[0], v[1]), 1e-3);
    fd_check(&[rand_tensor(&[5, 7], 3), rand_tensor(&[3, 7], 4)], |t, v| t.matmul_nt(v[0], v[1]), 1e-3);
}

#[test]
fn elementwise_gradients() {
    for seed in 0..10 {
        let a = rand_tensor(&[3, 4], 10 + seed);
        let b = rand_tensor(&[3, 4], 20 + seed);
        let bias = rand_tensor(&[4], 30 + seed);
        fd_check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 1e-3);
        fd_check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 1e-3);
        fd_check(&[a.clone(), bias.clone()], |t, v| t.add_bias(v[0], v[1]), 1e-3);
        fd_check(&[a.clone(), bias.clone()], |t, v| t.add_tiled(v[0], v[1]), 1e-3);
        fd_check(std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7)), 1e-3);
        fd_check(std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])), 1e-3);
        fd_check(std::slice::from_ref(&a), |t, v| Ok(t.gelu(v[0])), 1e-3);
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut x = rand_tensor(&[20], 5);
    x.data.iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });
    fd_check(&[x], |t, v| Ok(t.relu(v[0])), 1e-3);
}

#[test]
fn layer_norm_gradients_at_random_points() {
    for seed in 0..10 {
        let x = rand_tensor(&[4, 8], 100 + seed);
        let g = rand_tensor(&[8], 200 + seed);
        let b = rand_tensor(&[8], 300 + seed);
        fd_check(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]), 1e-3);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f32>::new();
    let g = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let c = tape.constant(vec![1, 2], vec![3.0, 3.0]).unwrap();
    let y = tape.layer_norm(c, g, b).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0]);
    let x = tape.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-4 && (tape.value(y)[1] + 1.0).abs() < 1e-4);
}

#[test]
fn softmax_gradient() {
    for seed in 0..10 {
        fd_check(&[rand_tensor(&[3, 5], 400 + seed)], |t, v| t.softmax(v[0], 1.3), 1e-3);
    }
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    fd_check(
        &[rand_tensor(&[6, 4], 7)],
        |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            Ok(t.dropout(v[0], 0.3, &mut rng))
        },
        1e-3,
    );
}

#[test]
fn attention_gradients() {
    let dims = AttentionDims {
        batch: 2,
        seq: 3,
        heads: 2,
        hidden: 4,
    };
    for seed in 0..5 {
        let q = rand_tensor(&[6, 4], 500 + seed);
        let k = rand_tensor(&[6, 4], 600 + seed);
        let v = rand_tensor(&[6, 4], 700 + seed);
        fd_check(
            &[q.clone(), k.clone(), v.clone()],
            |t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                t.attention(x[0], x[1], x[2], dims, 0.0, &mut rng)
            },
            1e-3,
        );
        fd_check(
            &[q, k, v],
            |t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                t.attention(x[0], x[1], x[2], dims, 0.25, &mut rng)
            },
            1e-3,
        );
    }
}

#[test]
fn attention_rows_are_distributions() {
    let dims = AttentionDims {
        batch: 1,
        seq: 5,
        heads: 2,
        hidden: 6,
    };
    let mut tape = Tape::<f32>::new();
    let q = tape.leaf(rand_tensor(&[5, 6], 1));
    let k = tape.leaf(rand_tensor(&[5, 6], 2));
    let v = tape.leaf(rand_tensor(&[5, 6], 3));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let o = tape.attention(q, k, v, dims, 0.0, &mut rng).unwrap();
    for row in tape.attention_weights(o).unwrap().chunks(5) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn indexing_gradients() {
    let table = rand_tensor(&[5, 3], 8);
    fd_check(std::slice::from_ref(&table), |t, v| t.gather(v[0], &[4, 0, 4, 2]), 1e-3);
    fd_check(std::slice::from_ref(&table), |t, v| t.select_rows(v[0], &[1, 3]), 1e-3);
    fd_check(std::slice::from_ref(&table), |t, v| t.slice_cols(v[0], 1, 3), 1e-3);
    let mut tape = Tape::<f32>::new();
    let tv = tape.leaf(table);
    assert!(matches!(tape.gather(tv, &[5]), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_gradient_and_errors() {
    for seed in 0..10 {
        fd_check(&[rand_tensor(&[4, 6], 800 + seed)], |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2], 0.1), 1e-3);
    }
    let mut tape = Tape::<f32>::new();
    let l = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
    assert!(matches!(tape.cross_entropy(l, &[3], 0.1), Err(Error::Index(_))));
}

/// Independent f64 evaluation of `-Σ q log softmax(z)`.
fn smoothed_ce_oracle(z: &[f64], target: usize, eps: f64) -> f64 {
    let k = z.len() as f64;
    let max = z.iter().cloned().fold(f64::MIN, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter()
        .enumerate()
        .map(|(j, &v)| {
            let q = if j == target { 1.0 - eps + eps / k } else { eps / k };
            -q * (v - lse)
        })
        .sum()
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f32>::new();
    let u = tape.constant(vec![1, 4], vec![0.3; 4]).unwrap();
    let l = tape.cross_entropy(u, &[1], 0.1).unwrap();
    assert!((tape.scalar(l) - 4f32.ln()).abs() < 1e-5);

    let p = tape.constant(vec![1, 3], vec![0.0, 100.0, 0.0]).unwrap();
    let l = tape.cross_entropy(p, &[1], 0.0).unwrap();
    assert!(tape.scalar(l).abs() < 1e-6);

    let z = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let l = tape.cross_entropy(z, &[2], 0.1).unwrap();
    let want = smoothed_ce_oracle(&[1.0, 2.0, 3.0], 2, 0.1);
    assert!((want - 0.5076).abs() < 1e-4, "oracle {want}");
    assert!((tape.scalar(l) as f64 - want).abs() < 1e-3);
}

#[test]
fn mse_and_conv_gradients() {
    fd_check(&[rand_tensor(&[2, 5], 9), rand_tensor(&[2, 5], 10)], |t, v| t.mse(v[0], v[1]), 1e-3);
    let geo = ConvGeometry {
        batch: 2,
        in_ch: 2,
        out_ch: 3,
        height: 6,
        width: 6,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    fd_check(
        &[rand_tensor(&[2, 2, 6, 6], 11), rand_tensor(&[3, 32], 12), rand_tensor(&[3], 13)],
        |t, v| t.conv2d(v[0], v[1], v[2], geo),
        1e-3,
    );
    let geo3 = ConvGeometry {
        kernel: 3,
        stride: 1,
        ..geo
    };
    fd_check(
        &[rand_tensor(&[2, 2, 6, 6], 14), rand_tensor(&[3, 18], 15), rand_tensor(&[3], 16)],
        |t, v| t.conv2d(v[0], v[1], v[2], geo3),
        1e-3,
    );
    fd_check(&[rand_tensor(&[1, 2, 3, 3], 17)], |t, v| t.upsample2(v[0]), 1e-3);
    fd_check(&[rand_tensor(&[2, 3, 4], 18)], |t, v| t.transpose(v[0], 2, 3, 4, vec![2, 4, 3]), 1e-3);
}

#[test]
fn conv_matches_direct_convolution() {
    let geo = ConvGeometry {
        batch: 1,
        in_ch: 1,
        out_ch: 1,
        height: 3,
        width: 3,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
    let w = tape.constant(vec![1, 9], vec![1.0; 9]).unwrap();
    let b = tape.constant(vec![1], vec![0.5]).unwrap();
    let y = tape.conv2d(x, w, b, geo).unwrap();
    // box sum with zero padding
    let want = [12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0].map(|v: f32| v + 0.5);
    assert_eq!(tape.value(y), &want);
}

#[test]
fn straight_through_copies_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(rand_tensor(&[4], 1));
    let q = tape.straight_through(x, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(tape.value(q), &[1.0, 2.0, 3.0, 4.0]);
    let sq = tape.mul(q, q).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap().with_grad());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    // second call accumulates
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);

    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn two_layer_mlp_gradients() {
    let inputs = [
        Tensor::new(vec![4, 3], rand_tensor(&[12], 1).data).unwrap(),
        rand_tensor(&[3, 8], 2),
        rand_tensor(&[8], 3),
        rand_tensor(&[8, 5], 4),
        rand_tensor(&[5], 5),
    ];
    fd_check(
        &inputs,
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_bias(h, v[2])?;
            let h = t.gelu(h);
            let o = t.matmul(h, v[3])?;
            let o = t.add_bias(o, v[4])?;
            t.cross_entropy(o, &[0, 4, 1, 3], 0.1)
        },
        1e-3,
    );
}

#[test]
fn param_grads_flow_back_by_id() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
    for _ in 0..2 {
        let mut tape = Tape::<f32>::new();
        let wv = tape.param(&ps, w);
        let sq = tape.mul(wv, wv).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        let grads: Vec<f32> = tape.grad(wv).unwrap().to_vec();
        drop(tape);
        let g = ps.get_mut(w).grad.as_mut().unwrap();
        g.iter_mut().zip(&grads).for_each(|(a, b)| *a += b);
    }
    assert_eq!(ps.get(w).grad.as_ref().unwrap(), &vec![4.0, -12.0]);
    ps.zero_grad();
    assert_eq!(ps.get(w).grad.as_ref().unwrap(), &vec![0.0, 0.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(rand_tensor(&[6, 8], 1));
        let b = tape.leaf(rand_tensor(&[8, 8], 2));
        let g = tape.leaf(rand_tensor(&[8], 3));
        let m = tape.matmul(a, b).unwrap();
        let n = tape.layer_norm(m, g, g).unwrap();
        let s = tape.gelu(n);
        let l = tape.cross_entropy(s, &[0, 1, 2, 3, 4, 5], 0.1).unwrap();
        tape.backward(l).unwrap();
        let bits: Vec<u32> = tape.value(s).iter().chain(tape.grad(b).unwrap()).map(|v| v.to_bits()).collect();
        bits
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_normalised_and_shift_invariant(
        logits in prop::collection::vec(-20f32..20.0, 1..40),
        shift in -50f32..50.0,
        tau in 0.1f32..5.0,
    ) {
        let k = logits.len();
        let p = softmax_with_temperature(&logits, k, tau).unwrap();
        prop_assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
        let q = softmax_with_temperature(&shifted, k, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn smoothed_ce_bounded_by_target_entropy(
        logits in prop::collection::vec(-10f32..10.0, 2..20),
        eps in 0f32..0.99,
        tsel in 0usize..1000,
    ) {
        let k = logits.len();
        let target = tsel % k;
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(vec![1, k], logits).unwrap();
        let l = tape.cross_entropy(z, &[target], eps).unwrap();
        let off = eps as f64 / k as f64;
        let on = 1.0 - eps as f64 + off;
        let mut h = -on * on.ln();
        if off > 0.0 {
            h -= (k as f64 - 1.0) * off * off.ln();
        }
        prop_assert!(tape.scalar(l) as f64 >= h - 1e-4, "{} < {}", tape.scalar(l), h);
    }
}
