use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapnet::autodiff::{finite_difference_check, GradError, Graph, ParamStore, Var};
use sapnet::checks::{op_suite, sap_path_check, OP_TOL, PATH_TOL};
use sapnet::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[2, 3]));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(GradError::NonScalarLoss(s)) if s == vec![2]));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

fn upstream_through(lambda: Option<f64>, x0: &Tensor, c: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let y = match lambda {
        Some(l) => g.grad_reverse(x, l).unwrap(),
        None => x,
    };
    let cv = g.input(c.clone());
    let prod = g.mul(y, cv).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    (g.value(y).clone(), grads.get(x).unwrap().clone())
}

#[test]
fn grad_reverse_forward_identity_and_exact_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &lambda in &[0.0, 0.1, 1.0, 2.5] {
        let x = rand_tensor(&mut rng, &[3, 4, 5]);
        let c = rand_tensor(&mut rng, &[3, 4, 5]);
        let (y, gx) = upstream_through(Some(lambda), &x, &c);
        assert_eq!(y, x);
        for (a, b) in gx.data().iter().zip(c.data()) {
            assert_eq!(a.to_bits(), (-lambda * b).to_bits());
        }
    }
}

#[test]
fn grad_reverse_composition_cancels_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let l1: f64 = rng.gen_range(0.0..3.0);
        let l2: f64 = rng.gen_range(0.0..3.0);
        let mut g = Graph::new();
        let x = g.variable(rand_tensor(&mut rng, &[7]));
        let a = g.grad_reverse(x, l1).unwrap();
        let b = g.grad_reverse(a, l2).unwrap();
        let loss = g.sum(b);
        let grads = g.backward(loss).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert_eq!(v, l1 * l2);
        }
    }
}

#[test]
fn negative_lambda_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[1]));
    assert!(g.grad_reverse(x, -0.5).is_err());
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_tensor(&mut rng, &[2, 9, 9]);
    let w0 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b0 = rand_tensor(&mut rng, &[3]);
    let run = || {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let w = g.variable(w0.clone());
        let b = g.variable(b0.clone());
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let r = g.relu(y);
        let p = g.avg_pool2d(r, 3).unwrap();
        let s = g.softmax_axis0(p).unwrap();
        let loss = g.cross_entropy(s, &[1usize; 49]).unwrap();
        let grads = g.backward(loss).unwrap();
        [x, w, b].map(|v| {
            grads
                .get(v)
                .unwrap()
                .data()
                .iter()
                .map(|f| f.to_bits())
                .collect::<Vec<_>>()
        })
    };
    assert_eq!(run(), run());
}

fn linear_store(rng: &mut ChaCha8Rng) -> (ParamStore, sapnet::autodiff::ParamId, Tensor) {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(rng, &[4, 6]));
    let x = Tensor::from_fn(&[6], |_| rng.gen_range(0.5..1.5));
    (store, w, x)
}

#[test]
fn linear_model_difference_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut store, w, x) = linear_store(&mut rng);
    for &eps in &[1e-3, 1e-5] {
        let report = finite_difference_check(
            &mut store,
            |g: &mut Graph, s: &ParamStore| -> Result<Var, GradError> {
                let wv = g.param(s, w);
                let xv = g.input(x.clone());
                let y = g.linear(xv, wv, None)?;
                Ok(g.sum(y))
            },
            eps,
            1e-10,
            usize::MAX,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 24);
    }
}

#[test]
fn checked_gradient_through_grl_is_negated_and_scaled() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (store, w, x) = linear_store(&mut rng);
    let grad_of = |lambda: Option<f64>| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.param(&store, w);
        let y = g.linear(xv, wv, None).unwrap();
        let y = match lambda {
            Some(l) => g.grad_reverse(y, l).unwrap(),
            None => y,
        };
        let s = g.sigmoid(y);
        let loss = g.sum(s);
        g.backward(loss).unwrap().get(wv).unwrap().clone()
    };
    let plain = grad_of(None);
    for &lambda in &[0.1, 1.0] {
        let rev = grad_of(Some(lambda));
        for (r, p) in rev.data().iter().zip(plain.data()) {
            // the factor is applied before the linear backward, so the
            // products round in a different order
            assert!((r + lambda * p).abs() <= 1e-12, "{r} vs {}", -lambda * p);
        }
    }
}

#[test]
fn kink_crossings_are_skipped_not_compared() {
    let mut store = ParamStore::new();
    // second element sits within ε of the relu kink
    let x = store.add("x", Tensor::from_vec(vec![0.5, 3e-6, -0.7]));
    let report = finite_difference_check(
        &mut store,
        |g: &mut Graph, s: &ParamStore| -> Result<Var, GradError> {
            let v = g.param(s, x);
            let r = g.relu(v);
            let sq = g.mul(r, r)?;
            Ok(g.sum(sq))
        },
        1e-5,
        1e-8,
        usize::MAX,
    )
    .unwrap();
    assert_eq!(report.skipped, 1);
    assert_eq!(report.checked, 2);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn tolerance_violations_are_reported() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::from_vec(vec![1.0, 2.0]));
    // a deliberately wrong backward: detach hides the dependence
    let report = finite_difference_check(
        &mut store,
        |g: &mut Graph, s: &ParamStore| -> Result<Var, GradError> {
            let v = g.param(s, x);
            let d = g.detach(v);
            let m = g.mul(v, d)?;
            Ok(g.sum(m))
        },
        1e-5,
        1e-6,
        usize::MAX,
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failing, vec!["x".to_string()]);
    assert!((report.max_rel_err - 0.5).abs() < 1e-6);
}

#[test]
fn op_suite_matches_finite_differences() {
    let outcomes = op_suite(0).unwrap();
    assert!(outcomes.len() >= 25);
    for o in &outcomes {
        assert_eq!(o.tol, OP_TOL);
        assert!(o.passed(), "{}", o.line());
        assert!(o.report.checked > 0, "{}", o.line());
    }
}

#[test]
fn sap_path_matches_finite_differences_across_seeds() {
    for seed in 0..4 {
        let o = sap_path_check(seed).unwrap();
        assert_eq!(o.tol, PATH_TOL);
        assert!(o.passed(), "seed {seed}: {}", o.line());
        // kink skipping must leave the bulk of the sample in place
        assert!(o.report.skipped * 5 < o.report.checked, "{}", o.line());
    }
}
