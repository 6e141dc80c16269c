mod common;

use autotcl::augment::HardConcreteParams;
use autotcl::objectives::{
    global_contrast_loss, local_contrast_loss, pri_loss_from_embeddings, temporal_triplet_loss, to_f64, Triplet,
};
use candle_core::{Device, Tensor};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LAW: ConcreteLaw = ConcreteLaw {
    tau: 0.5,
    gamma: -0.1,
    zeta: 1.1,
};

fn t(flat: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(flat.to_vec(), shape, &Device::Cpu).unwrap()
}

fn global(zx: &[f64], zv: &[f64], b: usize, d: usize, temp: f64) -> f64 {
    to_f64(&global_contrast_loss(&t(zx, &[b, d]), &t(zv, &[b, d]), temp).unwrap()).unwrap()
}

fn local(z: &[f64], b: usize, tt: usize, d: usize, l: usize, temp: f64) -> f64 {
    to_f64(&local_contrast_loss(&t(z, &[b, tt, d]), l, temp).unwrap()).unwrap()
}

fn to_views(z: &[f64], tt: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    z.chunks(tt * d).map(|v| rows(v, d)).collect()
}

#[test]
fn global_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for b in 1..=4 {
        for d in 1..=4 {
            let zx = random_vec(b * d, &mut rng);
            let zv = random_vec(b * d, &mut rng);
            for temp in [0.2, 1.0] {
                let got = global(&zx, &zv, b, d, temp);
                let want = global_infonce(&rows(&zx, d), &rows(&zv, d), temp);
                assert!((got - want).abs() < 1e-9, "b={b} d={d}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn local_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (b, tt, d, l) in [(1, 9, 2, 3), (2, 12, 4, 4), (4, 12, 3, 3), (3, 11, 1, 2), (2, 12, 2, 1)] {
        let z = random_vec(b * tt * d, &mut rng);
        let got = local(&z, b, tt, d, l, 0.5);
        let want = local_contrast(&to_views(&z, tt, d), l, 0.5);
        assert!((got - want).abs() < 1e-9, "{b} {tt} {d} {l}: {got} vs {want}");
    }
}

#[test]
fn triplet_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, tt) = (4, 12);
    let h = random_vec(b * tt, &mut rng);
    let idx = [(0, 1, 7), (5, 4, 11), (11, 10, 2), (6, 7, 0)];
    let triplets: Vec<Triplet> = idx
        .iter()
        .map(|&(anchor, positive, negative)| Triplet {
            anchor,
            positive,
            negative,
        })
        .collect();
    let got = to_f64(&temporal_triplet_loss(&t(&h, &[b, tt]), &triplets).unwrap()).unwrap();
    assert!((got - triplet(&rows(&h, tt), &idx)).abs() < 1e-12);
}

#[test]
fn pri_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, tt, d) = (3, 10, 4);
    let zx = random_vec(b * d, &mut rng);
    let zv = random_vec(b * d, &mut rng);
    let alpha: Vec<f64> = random_vec(b * tt, &mut rng).iter().map(|a| 3.0 * a).collect();
    for beta in [0.0, 0.1, 0.3] {
        let got = pri_loss_from_embeddings(&t(&zx, &[b, d]), &t(&zv, &[b, d]), &t(&alpha, &[b, tt]), beta, &HardConcreteParams::default())
            .and_then(|l| to_f64(&l))
            .unwrap();
        let want = pri(&rows(&zx, d), &rows(&zv, d), &rows(&alpha, tt), beta, &LAW);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn global_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, d) = (4, 3);
    let zx = random_vec(b * d, &mut rng);
    let zv = random_vec(b * d, &mut rng);
    let (vx, vv) = (var(&zx, &[b, d]), var(&zv, &[b, d]));
    let grads = global_contrast_loss(vx.as_tensor(), vv.as_tensor(), 0.5).unwrap().backward().unwrap();
    let num_x = numeric_grad(&zx, 1e-6, |p| global_infonce(&rows(p, d), &rows(&zv, d), 0.5));
    let num_v = numeric_grad(&zv, 1e-6, |p| global_infonce(&rows(&zx, d), &rows(p, d), 0.5));
    assert!(max_rel_err(&flat(grads.get(&vx).unwrap()), &num_x, 1e-4) < 1e-3);
    assert!(max_rel_err(&flat(grads.get(&vv).unwrap()), &num_v, 1e-4) < 1e-3);
}

#[test]
fn local_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, tt, d, l) = (2, 12, 3, 4);
    let z = random_vec(b * tt * d, &mut rng);
    let v = var(&z, &[b, tt, d]);
    let grads = local_contrast_loss(v.as_tensor(), l, 1.0).unwrap().backward().unwrap();
    let num = numeric_grad(&z, 1e-6, |p| local_contrast(&to_views(p, tt, d), l, 1.0));
    assert!(max_rel_err(&flat(grads.get(&v).unwrap()), &num, 1e-4) < 1e-3);
}

#[test]
fn triplet_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, tt) = (3, 12);
    let h = random_vec(b * tt, &mut rng);
    let idx = [(2, 3, 9), (8, 7, 0), (11, 10, 4)];
    let triplets: Vec<Triplet> = idx
        .iter()
        .map(|&(anchor, positive, negative)| Triplet {
            anchor,
            positive,
            negative,
        })
        .collect();
    let v = var(&h, &[b, tt]);
    let grads = temporal_triplet_loss(v.as_tensor(), &triplets).unwrap().backward().unwrap();
    let num = numeric_grad(&h, 1e-6, |p| triplet(&rows(p, tt), &idx));
    let analytic = flat(grads.get(&v).unwrap());
    for (a, n) in analytic.iter().zip(&num) {
        assert!((a - n).abs() < 1e-6, "{a} vs {n}");
    }
}

#[test]
fn pri_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, tt, d) = (4, 8, 3);
    let zx = random_vec(b * d, &mut rng);
    let zv = random_vec(b * d, &mut rng);
    let alpha = random_vec(b * tt, &mut rng);
    let (vx, vv, va) = (var(&zx, &[b, d]), var(&zv, &[b, d]), var(&alpha, &[b, tt]));
    let loss = pri_loss_from_embeddings(vx.as_tensor(), vv.as_tensor(), va.as_tensor(), 0.2, &HardConcreteParams::default()).unwrap();
    let grads = loss.backward().unwrap();
    let f = |x: &[f64], v: &[f64], a: &[f64]| pri(&rows(x, d), &rows(v, d), &rows(a, tt), 0.2, &LAW);
    let nx = numeric_grad(&zx, 1e-6, |p| f(p, &zv, &alpha));
    let nv = numeric_grad(&zv, 1e-6, |p| f(&zx, p, &alpha));
    let na = numeric_grad(&alpha, 1e-6, |p| f(&zx, &zv, p));
    assert!(max_rel_err(&flat(grads.get(&vx).unwrap()), &nx, 1e-4) < 1e-3);
    assert!(max_rel_err(&flat(grads.get(&vv).unwrap()), &nv, 1e-4) < 1e-3);
    assert!(max_rel_err(&flat(grads.get(&va).unwrap()), &na, 1e-4) < 1e-3);
}

#[test]
fn pri_strictly_increasing_in_each_pi() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, tt, d) = (2, 6, 2);
    let zx = random_vec(b * d, &mut rng);
    let zv = random_vec(b * d, &mut rng);
    let pi: Vec<f64> = (0..b * tt).map(|i| 0.05 + 0.9 * (i as f64) / (b * tt) as f64).collect();
    let loss = |pi: &[f64]| {
        let alpha: Vec<f64> = pi.iter().map(|&p| logit(p)).collect();
        pri_loss_from_embeddings(&t(&zx, &[b, d]), &t(&zv, &[b, d]), &t(&alpha, &[b, tt]), 0.1, &HardConcreteParams::default())
            .and_then(|l| to_f64(&l))
            .unwrap()
    };
    for g in numeric_grad(&pi, 1e-5, loss) {
        assert!(g > 0.0);
    }
}

#[test]
fn uniform_similarity_gives_log_b() {
    for b in [2usize, 4, 8] {
        let ones = vec![1.0; b * 3];
        assert!((global(&ones, &ones, b, 3, 1.0) - (b as f64).ln()).abs() < 1e-9);
    }
    assert!(global(&[0.3, -0.2], &[0.9, 0.1], 1, 2, 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn global_is_non_negative(seed in any::<u64>(), b in 1usize..6, d in 1usize..5, temp in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zx = random_vec(b * d, &mut rng);
        let zv = random_vec(b * d, &mut rng);
        prop_assert!(global(&zx, &zv, b, d, temp) >= -1e-12);
    }

    #[test]
    fn global_is_log_b_under_permutation_uniform_similarity(b in 1usize..9, d in 1usize..5, c in 0.1f64..10.0) {
        let row: Vec<f64> = (0..d).map(|i| 1.0 + i as f64).collect();
        let zx: Vec<f64> = (0..b).flat_map(|_| row.clone()).collect();
        let zv: Vec<f64> = zx.iter().map(|v| v * c).collect();
        prop_assert!((global(&zx, &zv, b, d, 0.7) - (b as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cosine_losses_are_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, tt, d) = (3, 9, 3);
        let zx = random_vec(b * d, &mut rng);
        let zv = random_vec(b * d, &mut rng);
        let scale = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        prop_assert!((global(&zx, &zv, b, d, 1.0) - global(&scale(&zx), &scale(&zv), b, d, 1.0)).abs() < 1e-6);
        let z = random_vec(b * tt * d, &mut rng);
        prop_assert!((local(&z, b, tt, d, 3, 1.0) - local(&scale(&z), b, tt, d, 3, 1.0)).abs() < 1e-6);
    }

    #[test]
    fn local_matches_oracle_on_random_shapes(seed in any::<u64>(), b in 1usize..4, l in 1usize..4, k in 3usize..5, extra in 0usize..2, d in 1usize..4) {
        let tt = l * k + extra.min(l - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_vec(b * tt * d, &mut rng);
        let got = local(&z, b, tt, d, l, 1.0);
        prop_assert!((got - local_contrast(&to_views(&z, tt, d), l, 1.0)).abs() < 1e-9);
    }
}
