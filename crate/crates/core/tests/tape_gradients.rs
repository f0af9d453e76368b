//! Central finite differences against tape gradients for every op.

use emaformer::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Norm-wise relative error between two gradient buffers.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Returns the worst relative error over all inputs.
fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.value(y).shape(), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    let err = check(&inputs, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.sum(y)
    });
    assert!(err < 1e-6, "matmul rel err {err}");
}

#[test]
fn batch_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&[2, 3, 4], &mut rng), random(&[2, 4, 5], &mut rng), random(&[2, 5, 4], &mut rng)];
    let err = check(&inputs, |t, v| {
        let y = t.batch_matmul(v[0], v[1], false)?;
        let z = t.batch_matmul(v[0], v[2], true)?;
        let a = weighted_sum(t, y, 10)?;
        let b = weighted_sum(t, z, 11)?;
        t.add(a, b)
    });
    assert!(err < 1e-6, "batch_matmul rel err {err}");
}

#[test]
fn softmax_jacobian_vector_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&[4, 6], &mut rng)];
    let err = check(&inputs, |t, v| {
        let y = t.softmax(v[0])?;
        weighted_sum(t, y, 12)
    });
    assert!(err < 1e-6, "softmax rel err {err}");
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&[5, 8], &mut rng), random(&[8], &mut rng), random(&[8], &mut rng)];
    let err = check(&inputs, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(t, y, 13)
    });
    assert!(err < 1e-5, "layer_norm rel err {err}");
}

#[test]
fn gather_scatter_add_matches_one_hot_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = random(&[4, 3], &mut rng);
    let indices = [2usize, 0, 2, 3];
    let upstream = random(&[4, 3], &mut rng);

    let mut tape = Tape::new();
    let tv = tape.leaf(table.clone(), true);
    let g = tape.gather_rows(tv, &indices).unwrap();
    let w = tape.constant(upstream.clone());
    let p = tape.mul(g, w).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    let scatter = tape.grad(tv).unwrap();

    // Oracle: gather == OneHot · table, so d(table) = OneHotᵀ · upstream.
    let mut one_hot = Tensor::zeros(&[indices.len(), 4]);
    for (r, &ix) in indices.iter().enumerate() {
        one_hot.data_mut()[r * 4 + ix] = 1.0;
    }
    let dense = one_hot.transpose().unwrap().matmul(&upstream).unwrap();
    assert!(scatter.max_abs_diff(&dense) < 1e-15);
    // Row 1 was never gathered.
    assert!(scatter.row(1).iter().all(|&x| x == 0.0));
}

#[test]
fn elementwise_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng), random(&[4], &mut rng)];
    let err = check(&inputs, |t, v| {
        let a = t.add(v[0], v[1])?;
        let m = t.mul(a, v[1])?;
        let s = t.sub(m, v[0])?;
        let r = t.add_row(s, v[2])?;
        let g = t.gelu(r)?;
        let p = t.permute(g, &[1, 0, 2])?;
        let q = t.reshape(p, &[6, 4])?;
        let tr = t.transpose(q)?;
        let sc = t.scale(tr, 0.7)?;
        let c = t.concat(&[sc, tr], 1)?;
        let c0 = t.concat(&[c, c], 0)?;
        weighted_sum(t, c0, 14)
    });
    assert!(err < 1e-6, "composite rel err {err}");
}

#[test]
fn relu_row_affine_mean_and_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&[3, 5], &mut rng)];
    let target = random(&[3, 5], &mut rng);
    let err = check(&inputs, |t, v| {
        let r = t.relu(v[0])?;
        let a = t.row_affine(r, &[0.5, -2.0, 1.5], &[0.1, 0.2, -0.3])?;
        let l = t.l1_loss(a, &target)?;
        let m = t.mean(v[0])?;
        t.add(l, m)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let y = tape.add(x, x).unwrap();
    let z = tape.mul(y, x).unwrap();
    let loss = tape.sum(z).unwrap();
    tape.backward(loss).unwrap();
    // d/dx sum(2x·x) = 4x
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -8.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng).map(|v| v * scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
            prop_assert!(h <= (cols as f64).log2() + 1e-12);
        }
    }

    #[test]
    fn random_ops_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[3, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)];
        let err = check(&inputs, |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let n = t.layer_norm(h, v[2], v[3])?;
            let s = t.softmax(n)?;
            let g = t.gelu(s)?;
            weighted_sum(t, g, seed)
        });
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..10_000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let a = tape.leaf(random(&[5, 7], &mut rng), true);
            let b = tape.leaf(random(&[7, 3], &mut rng), true);
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax(c).unwrap();
            let l = tape.sum(s).unwrap();
            tape.backward(l).unwrap();
            (tape.value(s).clone(), tape.grad(a).unwrap())
        };
        let (x1, g1) = run();
        let (x2, g2) = run();
        prop_assert!(x1.data().iter().zip(x2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(g1.data().iter().zip(g2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
