use ndarray::{array, Array2};
use proptest::prelude::*;

use super::*;
use crate::diffcore::{Mode, ParamStore};

/// Exact OT for equal-size uniform marginals: the best permutation, found by
/// enumerating all of them.
fn assignment_cost(cost: &Array2<f64>) -> f64 {
    fn go(row: usize, used: &mut Vec<bool>, cost: &Array2<f64>, acc: f64, best: &mut f64) {
        let n = cost.nrows();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(row + 1, used, cost, acc + cost[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, &mut vec![false; cost.nrows()], cost, 0.0, &mut best);
    best / cost.nrows() as f64
}

fn random_points(rng: &mut RngStream, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.normal(0.0, 1.0))
}

fn oracle_cfg() -> SinkhornConfig {
    SinkhornConfig {
        epsilon: 1e-3,
        max_iters: 50_000,
        tol: 1e-9,
    }
}

#[test]
fn init_is_seeded_with_scaled_variance() {
    let a = init_codebook(150, 16, 3).unwrap();
    assert_eq!(a, init_codebook(150, 16, 3).unwrap());
    assert_ne!(a, init_codebook(150, 16, 4).unwrap());
    let big = init_codebook(400, 25, 1).unwrap();
    let var = big.centroids.mapv(|x| x * x).mean().unwrap();
    assert!((var - 1.0 / 25.0).abs() < 0.004, "{var}");
    assert!(init_codebook(0, 4, 1).is_err());
}

#[test]
fn coincident_sets_cost_at_most_entropy_floor() {
    let mut rng = RngStream::new(5, 99);
    let pts = random_points(&mut rng, 5, 4) * 3.0;
    let cfg = oracle_cfg();
    let t = sinkhorn_distance(pts.view(), pts.view(), &cfg).unwrap();
    assert!(t.distance >= 0.0);
    assert!(t.distance <= cfg.epsilon * 5f64.ln() + 1e-9, "{}", t.distance);
    for i in 0..5 {
        assert!((t.plan[[i, i]] - 0.2).abs() < 1e-6);
    }
}

#[test]
fn single_pair_approaches_squared_distance() {
    let v = array![[1.0, 2.0]];
    let c = array![[0.0, 0.5]];
    let t = sinkhorn_distance(v.view(), c.view(), &oracle_cfg()).unwrap();
    assert!((t.distance - 3.25).abs() < 1e-9);
}

#[test]
fn matches_assignment_oracle_on_random_sets() {
    let mut rng = RngStream::new(11, 99);
    for _ in 0..20 {
        let m = 5;
        let v = random_points(&mut rng, m, 3);
        let c = random_points(&mut rng, m, 3);
        let exact = assignment_cost(&squared_distances(v.view(), c.view()));
        let t = sinkhorn_distance(v.view(), c.view(), &oracle_cfg()).unwrap();
        assert!(((t.distance - exact) / exact).abs() < 0.01, "{} vs {exact}", t.distance);
        assert!(t.marginal_error < 1e-6);
    }
}

#[test]
fn envelope_gradient_matches_finite_differences() {
    let mut rng = RngStream::new(2, 99);
    let v = random_points(&mut rng, 3, 2);
    let c = random_points(&mut rng, 4, 2);
    let cfg = SinkhornConfig {
        epsilon: 0.5,
        max_iters: 10_000,
        tol: 1e-13,
    };
    let t = sinkhorn_distance(v.view(), c.view(), &cfg).unwrap();
    let (gv, gc) = transport_gradients(v.view(), c.view(), t.plan.view());
    let h = 1e-5;
    let numeric = |v: &Array2<f64>, c: &Array2<f64>| sinkhorn_distance(v.view(), c.view(), &cfg).unwrap().distance;
    for i in 0..3 {
        for d in 0..2 {
            let (mut up, mut down) = (v.clone(), v.clone());
            up[[i, d]] += h;
            down[[i, d]] -= h;
            let fd = (numeric(&up, &c) - numeric(&down, &c)) / (2.0 * h);
            assert!((fd - gv[[i, d]]).abs() < 1e-6, "v {fd} {}", gv[[i, d]]);
        }
    }
    for j in 0..4 {
        for d in 0..2 {
            let (mut up, mut down) = (c.clone(), c.clone());
            up[[j, d]] += h;
            down[[j, d]] -= h;
            let fd = (numeric(&v, &up) - numeric(&v, &down)) / (2.0 * h);
            assert!((fd - gc[[j, d]]).abs() < 1e-6, "c {fd} {}", gc[[j, d]]);
        }
    }
}

#[test]
fn tape_wrapper_reproduces_value_and_gradients() {
    let mut rng = RngStream::new(8, 99);
    let mut store = ParamStore::new();
    let vid = store.add("v", random_points(&mut rng, 3, 2));
    let cid = store.add("c", random_points(&mut rng, 2, 2));
    let cfg = SinkhornConfig::default();
    let mut tape = Tape::new(&store, Mode::Eval);
    let v = tape.param(vid);
    let c = tape.param(cid);
    let (loss, t) = sinkhorn_on_tape(&mut tape, v, c, &cfg).unwrap();
    assert!((tape.scalar(loss) - t.distance).abs() < 1e-12);
    let grads = tape.backward(loss).unwrap();
    let (gv, gc) = transport_gradients(store.get(vid).view(), store.get(cid).view(), t.plan.view());
    assert!((grads.get(vid).unwrap() - &gv).iter().all(|x| x.abs() < 1e-12));
    assert!((grads.get(cid).unwrap() - &gc).iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn non_finite_input_is_numeric_error() {
    let v = array![[f64::NAN, 0.0]];
    let c = array![[0.0, 0.0]];
    assert!(matches!(
        sinkhorn_distance(v.view(), c.view(), &SinkhornConfig::default()),
        Err(Error::Numeric(_))
    ));
    let bad = SinkhornConfig {
        epsilon: 0.0,
        ..SinkhornConfig::default()
    };
    assert!(sinkhorn_distance(c.view(), c.view(), &bad).is_err());
}

fn identity_weights(h: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    (Array2::eye(h), Array2::eye(h), Array2::eye(h))
}

#[test]
fn selection_prefers_dominant_dot_product() {
    let (q, k, v) = identity_weights(5);
    let w = SelectionWeights {
        w_q: &q,
        w_k: &k,
        w_v: &v,
    };
    let book = Codebook::new(Array2::eye(5)).unwrap();
    let mut x = Array2::zeros((1, 5));
    x[[0, 3]] = 2.0;
    let sel = select_centroid(x.view(), &book, w, None).unwrap();
    assert_eq!(sel.index, 3);
    assert!((sel.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(sel.attended.dim(), (1, 5));
}

#[test]
fn selection_ties_go_to_lowest_index() {
    let (q, k, v) = identity_weights(2);
    let w = SelectionWeights {
        w_q: &q,
        w_k: &k,
        w_v: &v,
    };
    let book = Codebook::new(array![[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
    let sel = select_centroid(array![[3.0, 0.0]].view(), &book, w, None).unwrap();
    assert_eq!(sel.index, 1);
}

#[test]
fn selection_without_dropout_is_repeatable() {
    let mut rng = RngStream::new(1, 99);
    let (q, k, v) = (random_points(&mut rng, 4, 4), random_points(&mut rng, 4, 4), random_points(&mut rng, 4, 4));
    let w = SelectionWeights {
        w_q: &q,
        w_k: &k,
        w_v: &v,
    };
    let book = init_codebook(6, 4, 2).unwrap();
    let x = random_points(&mut rng, 1, 4);
    let a = select_centroid(x.view(), &book, w, None).unwrap();
    let b = select_centroid(x.view(), &book, w, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn straight_through_contract() {
    let mut store = ParamStore::new();
    let vid = store.add("v", array![[0.3, -0.2]]);
    let wid = store.add("w", array![[1.0, 2.0], [3.0, 4.0]]);
    let book = Codebook::new(array![[1.0, 1.0], [-1.0, 2.0]]).unwrap();
    let mut tape = Tape::new(&store, Mode::Eval);
    let v = tape.param(vid);
    let q = straight_through(&mut tape, v, book.centroid(1)).unwrap();
    assert_eq!(tape.value(q), &array![[-1.0, 2.0]]);
    let w = tape.param(wid);
    let out = tape.matmul(q, w).unwrap();
    let loss = tape.sum(out).unwrap();
    let grads = tape.backward(loss).unwrap();
    // d loss / d q = row sums of w.
    assert_eq!(grads.get(vid).unwrap(), &array![[3.0, 7.0]]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn plan_marginals_and_nonnegativity(seed in 0u64..10_000, m in 1usize..6, k in 1usize..6) {
        let mut rng = RngStream::new(seed, 99);
        let v = random_points(&mut rng, m, 3);
        let c = random_points(&mut rng, k, 3);
        let cfg = SinkhornConfig { epsilon: 0.05, max_iters: 5000, tol: 1e-9 };
        let t = sinkhorn_distance(v.view(), c.view(), &cfg).unwrap();
        prop_assert!(t.distance >= 0.0);
        if t.converged {
            for r in t.plan.sum_axis(ndarray::Axis(1)).iter() {
                prop_assert!((r - 1.0 / m as f64).abs() < 1e-6);
            }
            for s in t.plan.sum_axis(ndarray::Axis(0)).iter() {
                prop_assert!((s - 1.0 / k as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn argmax_is_scale_invariant(seed in 0u64..10_000, scale in 0.01f64..50.0) {
        let mut rng = RngStream::new(seed, 99);
        let (q, kk, vv) = (random_points(&mut rng, 3, 3), random_points(&mut rng, 3, 3), random_points(&mut rng, 3, 3));
        let w = SelectionWeights { w_q: &q, w_k: &kk, w_v: &vv };
        let book = init_codebook(5, 3, seed).unwrap();
        let x = random_points(&mut rng, 1, 3);
        let a = select_centroid(x.view(), &book, w, None).unwrap().index;
        let b = select_centroid((&x * scale).view(), &book, w, None).unwrap().index;
        prop_assert_eq!(a, b);
    }
}
