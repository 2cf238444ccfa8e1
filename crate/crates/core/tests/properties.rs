//! Property tests for invariants that the unit tests only sample at a few
//! points.

use cfrl::baselines::{DynamicsModel, Variant};
use cfrl::cluster::matched_agreement;
use cfrl::env::{initial_state, step_with_noise, EnvConfig, NoiseDraw};
use cfrl::numerics::{Activation, MonotonicMlp};
use cfrl::policy::tabular::{value_iteration, FiniteMdp};
use cfrl::policy::DuelingHead;
use cfrl::rng::seeded;
use cfrl::scm::cartpole::CartPoleScm;
use cfrl::scm::learned::{Normalization, Standardizer};
use cfrl::scm::quantile::{empirical_cdf, empirical_quantile};
use cfrl::scm::synthetic::{Additive, Multiplicative, NonlinearMonotone};
use cfrl::scm::{abduct, counterfactual, AbductionMethod, CounterfactualQuery, StructuralModel};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 64, ..ProptestConfig::default() }
}

fn synthetic(kind: usize, d: usize) -> Box<dyn StructuralModel> {
    match kind {
        0 => Box::new(Additive::new(d)),
        1 => Box::new(Multiplicative::new(d)),
        _ => Box::new(NonlinearMonotone::new(d)),
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn standardizer_round_trips(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..20)) {
        let x = Array2::from_shape_fn((rows.len(), 3), |(r, c)| rows[r][c]);
        let s = Standardizer::fit(&x).unwrap();
        let back = s.invert(&s.apply(&x));
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn bisection_recovers_the_noise(
        kind in 0usize..3,
        state in prop::collection::vec(-2.0f64..2.0, 2),
        action in 0.0f64..1.0,
        u in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let m = synthetic(kind, 2);
        let next = m.mechanism(&row(&state), &Array2::from_elem((1, 1), action), None, &row(&u)).unwrap();
        let got = abduct(m.as_ref(), &state, action, None, next.row(0).as_slice().unwrap(), AbductionMethod::Bisection).unwrap();
        for (g, t) in got.iter().zip(&u) {
            prop_assert!((g - t).abs() < 1e-6, "recovered {g} for {t}");
        }
        let q = CounterfactualQuery { state, action, next_state: next.row(0).to_vec(), cf_action: action, theta: None };
        let factual = counterfactual(m.as_ref(), &q, AbductionMethod::default()).unwrap();
        for (f, y) in factual.iter().zip(next.iter()) {
            prop_assert!((f - y).abs() <= 1e-8 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn counterfactuals_preserve_outcome_rank(
        kind in 0usize..3,
        s in -2.0f64..2.0,
        action in 0.0f64..1.0,
        cf_action in 0.0f64..1.0,
        u in -3.0f64..3.0,
        du in 0.01f64..2.0,
    ) {
        let m = synthetic(kind, 1);
        let a = Array2::from_elem((1, 1), action);
        let lo = m.mechanism(&row(&[s]), &a, None, &row(&[u])).unwrap()[[0, 0]];
        let hi = m.mechanism(&row(&[s]), &a, None, &row(&[u + du])).unwrap()[[0, 0]];
        let cf = |y: f64| {
            let q = CounterfactualQuery { state: vec![s], action, next_state: vec![y], cf_action, theta: None };
            counterfactual(m.as_ref(), &q, AbductionMethod::Bisection).unwrap()[0]
        };
        prop_assert!(cf(hi) > cf(lo));
    }

    #[test]
    fn cartpole_scm_replays_the_simulator(seed in any::<u64>(), action in 0usize..2) {
        let cfg = EnvConfig::default();
        let mut rng = seeded(seed);
        let state = initial_state(&cfg, &mut rng);
        let noise = NoiseDraw::sample(cfg.noise_frac, &mut rng);
        let a = action as f64;
        let next = step_with_noise(&state, a, &cfg, &noise).unwrap().next.to_array();
        let scm = CartPoleScm::new(cfg.clone()).unwrap();
        let theta = vec![cfg.gravity, noise.to_vec()[0]];
        let q = CounterfactualQuery { state: state.to_array().to_vec(), action: a, next_state: next.to_vec(), cf_action: a, theta: Some(theta.clone()) };
        let factual = counterfactual(&scm, &q, AbductionMethod::default()).unwrap();
        for (f, y) in factual.iter().zip(next.iter()) {
            prop_assert!((f - y).abs() <= 1e-9);
        }
        // the other action replays the simulator under the same noise
        let other = 1.0 - a;
        let truth = step_with_noise(&state, other, &cfg, &noise).unwrap().next.to_array();
        let cf = counterfactual(&scm, &CounterfactualQuery { cf_action: other, ..q }, AbductionMethod::default()).unwrap();
        for (c, t) in cf.iter().zip(truth.iter()) {
            prop_assert!((c - t).abs() <= 1e-9);
        }
    }

    #[test]
    fn dueling_value_is_the_mean_q(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..10), shift in -5.0f64..5.0) {
        let va = Array2::from_shape_fn((rows.len(), 4), |(r, c)| rows[r][c]);
        let q = DuelingHead::aggregate(&va);
        let mut shifted = va.clone();
        shifted.slice_mut(ndarray::s![.., 1..]).mapv_inplace(|v| v + shift);
        let q2 = DuelingHead::aggregate(&shifted);
        for r in 0..va.nrows() {
            prop_assert!((q.row(r).mean().unwrap() - va[[r, 0]]).abs() < 1e-12);
            for j in 0..3 {
                prop_assert!((q[[r, j]] - q2[[r, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monotonic_mlp_is_nondecreasing(seed in any::<u64>(), col in 0usize..3, step in 1e-3f64..2.0) {
        let mut rng = seeded(seed);
        let net = MonotonicMlp::new(&[3, 8, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let mut y = x.clone();
        y.column_mut(col).mapv_inplace(|v| v + step);
        let (a, b) = (net.infer(&x), net.infer(&y));
        for (lo, hi) in a.iter().zip(b.iter()) {
            prop_assert!(hi >= lo);
        }
    }

    #[test]
    fn mixture_weights_sum_to_one(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = seeded(seed);
        let model = DynamicsModel::new(Variant::M, k, 2, &[8], Normalization::identity(2), &mut rng).unwrap();
        let states = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-3.0..3.0));
        let actions = Array2::from_shape_fn((6, 1), |_| rng.gen_range(0.0..1.0));
        let p = model.predict(&states, &actions);
        for r in p.weights.rows() {
            prop_assert!((r.sum() - 1.0).abs() <= 1e-9);
        }
        for v in &p.variances {
            prop_assert!(v.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn agreement_is_relabelling_invariant(truth in prop::collection::vec(0usize..4, 1..40), perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle()) {
        let relabelled: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        prop_assert!((matched_agreement(&relabelled, &truth) - 1.0).abs() < 1e-12);
        let constant = vec![0; truth.len()];
        let a = matched_agreement(&constant, &truth);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn value_iteration_reaches_a_fixed_point(seed in any::<u64>(), ns in 2usize..8, na in 2usize..4, gamma in 0.1f64..0.95) {
        let mdp = FiniteMdp::random(ns, na, gamma, &mut seeded(seed)).unwrap();
        let q = value_iteration(&mdp, 1e-10).unwrap();
        prop_assert!(mdp.bellman_residual(&q) <= 1e-9);
    }

    #[test]
    fn empirical_quantile_inverts_the_cdf(mut xs in prop::collection::vec(-100.0f64..100.0, 5..200), level in 0.0f64..1.0) {
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let n = xs.len() as f64;
        let alpha = 0.5 / n + level * (1.0 - 1.0 / n);
        let y = empirical_quantile(&xs, alpha);
        prop_assert!((empirical_cdf(&xs, y) - alpha).abs() <= 1.0 / n);
    }
}
