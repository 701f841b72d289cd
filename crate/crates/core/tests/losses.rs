use fedgtea::gaussian::{estimate_gaussian, w2_squared};
use fedgtea::losses::*;
use numkit::gradcheck::check;
use numkit::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

fn probs(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
    let raw: Vec<f64> = (0..n * m).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![n, m], softmax_rows(&raw, m)).unwrap()
}

fn scalar(tape: &Tape, v: numkit::Var) -> f64 {
    tape.value(v).data()[0]
}

#[test]
fn bce_matches_fd_and_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for target in [0.0, 1.0] {
        let x = randn(&mut rng, &[6, 1]);
        let gc = check(&[x.clone()], H, |t, v| {
            Ok(bce_const(t, v[0], target).unwrap())
        })
        .unwrap();
        assert!(gc.relative_error() <= TOL);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        let l = bce_const(&mut tape, v, target).unwrap();
        let want = x
            .data()
            .iter()
            .map(|&z| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 6.0;
        assert!((scalar(&tape, l) - want).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[5, 4]);
    let gc = check(&[x.clone()], H, |t, v| {
        Ok(cross_entropy(t, v[0], &[0, 3, 1, 1, 2]).unwrap())
    })
    .unwrap();
    assert!(gc.relative_error() <= TOL);
    let gc = check(&[x], H, |t, v| {
        Ok(masked_cross_entropy(t, v[0], &[2, 0, 0, 2, 2], &[0, 2]).unwrap())
    })
    .unwrap();
    assert!(gc.relative_error() <= TOL);
}

#[test]
fn kd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = randn(&mut rng, &[4, 3]);
    let p = Tensor::new(vec![4, 3], softmax_rows(logits.data(), 3)).unwrap();
    let mut tape = Tape::new();
    let s = tape.constant(logits).unwrap();
    let l = kd_loss(&mut tape, s, &p).unwrap();
    assert!(scalar(&tape, l).abs() < 1e-12);

    let u = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let mut tape = Tape::new();
    let s = tape
        .constant(Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap())
        .unwrap();
    let l = kd_loss(&mut tape, s, &u).unwrap();
    let q1 = 1.0 / (1.0 + (-10f64).exp());
    let q = [q1, 1.0 - q1];
    let want: f64 = q.iter().map(|qi| 0.5 * (0.5 / qi).ln()).sum();
    assert!((scalar(&tape, l) - want).abs() < 1e-12);

    for _ in 0..3 {
        let x = randn(&mut rng, &[5, 4]);
        let p = probs(&mut rng, 5, 4);
        let gc = check(&[x], H, |t, v| Ok(kd_loss(t, v[0], &p).unwrap())).unwrap();
        assert!(gc.relative_error() <= TOL);
    }
}

#[test]
fn anchor_examples() {
    let anchor = vec![0.0; 5];
    let mut tape = Tape::new();
    let v = tape
        .constant(Tensor::vector(vec![3.0, 4.0, 0.0, 0.0, 0.0]))
        .unwrap();
    let l = anchor_loss(&mut tape, &[v], &[&anchor]).unwrap();
    assert!((scalar(&tape, l) - 5.0).abs() < 1e-12);

    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![0.0; 5])).unwrap();
    let l = anchor_loss(&mut tape, &[v], &[&anchor]).unwrap();
    assert!(scalar(&tape, l) < 1e-5);

    let theta = Tensor::vector(vec![0.6, 0.0, -0.8, 0.0, 0.0]);
    let gc = check(&[theta.clone()], H, |t, v| {
        Ok(anchor_loss(t, &[v[0]], &[&anchor]).unwrap())
    })
    .unwrap();
    assert!(gc.relative_error() <= TOL);
    for (g, want) in gc.analytic[0].iter().zip(theta.data()) {
        assert!((g - want).abs() < 1e-9);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = randn(&mut rng, &[3, 2]);
    let b = randn(&mut rng, &[4]);
    let (ra, rb) = (randn(&mut rng, &[3, 2]), randn(&mut rng, &[4]));
    let gc = check(&[a, b], H, |t, v| {
        Ok(anchor_loss(t, &[v[0], v[1]], &[ra.data(), rb.data()]).unwrap())
    })
    .unwrap();
    assert!(gc.relative_error() <= TOL);
}

#[test]
fn wasserstein_gradient_matches_fd_on_one_dimensional_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..4 {
        let blocks: Vec<Tensor> = (0..3)
            .map(|t| {
                let mut b = randn(&mut rng, &[6, 1]);
                b.data_mut().iter_mut().for_each(|v| *v += t as f64);
                b
            })
            .collect();
        let gc = check(&blocks, H, |t, v| Ok(wasserstein_loss(t, v).unwrap().loss)).unwrap();
        assert!(gc.relative_error() <= TOL, "{}", gc.relative_error());
    }
}

#[test]
fn wasserstein_pairwise_sum_matches_geometry_module() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let blocks: Vec<Tensor> = (0..3).map(|_| randn(&mut rng, &[8, 4])).collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = blocks
        .iter()
        .map(|b| tape.constant(b.clone()).unwrap())
        .collect();
    let term = wasserstein_loss(&mut tape, &vars).unwrap();
    let gs: Vec<_> = blocks
        .iter()
        .map(|b| {
            estimate_gaussian(&b.data().chunks(4).map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    let mut want = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            want += w2_squared(&gs[i], &gs[j]).unwrap();
        }
    }
    assert!((term.pairwise_sum - want).abs() <= 1e-6);
    assert!((scalar(&tape, term.loss) - 1.0 / want).abs() <= 1e-9 / want);
}

#[test]
fn wasserstein_edge_cases() {
    let mut tape = Tape::new();
    let one = tape
        .constant(Tensor::new(vec![4, 2], vec![0.0; 8]).unwrap())
        .unwrap();
    let t = wasserstein_loss(&mut tape, &[one]).unwrap();
    assert_eq!(scalar(&tape, t.loss), 0.0);
    let same = Tensor::new(vec![3, 2], vec![1.0, 2.0, 0.5, 0.1, -1.0, 0.3]).unwrap();
    let a = tape.constant(same.clone()).unwrap();
    let b = tape.constant(same).unwrap();
    let t = wasserstein_loss(&mut tape, &[a, b]).unwrap();
    assert!(t.pairwise_sum < 1e-12);
    assert_eq!(scalar(&tape, t.loss), 1.0 / WASSERSTEIN_FLOOR);
    let tiny = tape
        .constant(Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap())
        .unwrap();
    assert!(wasserstein_loss(&mut tape, &[a, tiny]).is_err());
}

proptest! {
    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000, n in 1usize..6, m in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[n, m]);
        let p = probs(&mut rng, n, m);
        let mut tape = Tape::new();
        let s = tape.constant(x.clone()).unwrap();
        let kd = kd_loss(&mut tape, s, &p).unwrap();
        prop_assert!(scalar(&tape, kd) >= -1e-12);
        let r = randn(&mut rng, &[n, m]);
        let an = anchor_loss(&mut tape, &[s], &[r.data()]).unwrap();
        prop_assert!(scalar(&tape, an) >= 0.0);
        let b1 = tape.constant(randn(&mut rng, &[3, m])).unwrap();
        let b2 = tape.constant(randn(&mut rng, &[4, m])).unwrap();
        let w = wasserstein_loss(&mut tape, &[b1, b2]).unwrap();
        prop_assert!(scalar(&tape, w.loss) > 0.0);
    }
}
