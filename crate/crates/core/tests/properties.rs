use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

use scaleinv::linear_model::{normalized_error, normalized_hessian, scale_invariant_solution, OverdeterminedSystem};
use scaleinv::mdp_sim::{
    random_mrp, sample_trajectory, stationary_distribution, true_value, expected_one_step_reward, FeatureMap, Start,
};
use scaleinv::rng::seeded;
use scaleinv::tensor_ops::{
    mode_p_multiply, mode_p_vector, permute, slice_contract_product, slice_transform_product, IndexPermutation,
    Tensor3,
};
use scaleinv::total_projections::{
    curvature_step, delta_tp, step, tp_update, IterateState, Mode, RowBatch, SolverConfig, StepRule,
};
use scaleinv::value_estimators::{
    first_visit_mc_targets, inverse_distance_matrix, mc_fixed_point, mc_induced_system, td0_fixed_point_bruteforce,
    td0_fixed_point_tensor, td0_normal_equations,
};

fn system(seed: u64, m: usize, n: usize) -> OverdeterminedSystem {
    let mut rng = seeded(seed);
    let d = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
    let phi = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..=1.0));
    let v = DVector::from_fn(m, |_, _| rng.random_range(-1.0..=1.0));
    OverdeterminedSystem::new(phi, v, Some(d)).unwrap()
}

fn point(seed: u64, n: usize) -> DVector<f64> {
    let mut rng = seeded(seed ^ 0x5eed);
    DVector::from_fn(n, |_, _| rng.random_range(-3.0..=3.0))
}

fn close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * (1.0 + a.amax().max(b.amax()))
}

fn sizes() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=5).prop_flat_map(|n| (n..=n + 10, Just(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_and_objective_ignore_row_scale(seed in any::<u64>(), (m, n) in sizes(), c in prop_oneof![0.01..0.5f64, 2.0..100.0f64, -100.0..-0.01f64], row in 0usize..20) {
        let sys = system(seed, m, n);
        let w = point(seed, n);
        let i = row % m;
        let scaled = sys.rescale_row(i, c).unwrap();
        let (a, b) = (sys.hyperplane_distance(&w, i), scaled.hyperplane_distance(&w, i));
        prop_assert!((a.abs() - b.abs()).abs() <= 1e-12 * (1.0 + a.abs()));
        let (g0, g1) = (normalized_error(&sys, &w), normalized_error(&scaled, &w));
        prop_assert!((g0 - g1).abs() <= 1e-12 * (1.0 + g0));
    }

    #[test]
    fn solution_ignores_row_scale(seed in any::<u64>(), (m, n) in sizes(), c in 0.05..20.0f64, row in 0usize..20) {
        let sys = system(seed, m, n);
        prop_assume!(scale_invariant_solution(&sys).is_ok());
        let w = scale_invariant_solution(&sys).unwrap();
        let ws = scale_invariant_solution(&sys.rescale_row(row % m, c).unwrap()).unwrap();
        prop_assert!(close(&w, &ws, 1e-8));
    }

    #[test]
    fn full_update_is_the_gradient(seed in any::<u64>(), (m, n) in sizes()) {
        let sys = system(seed, m, n);
        let w = point(seed, n);
        let tp = tp_update(&RowBatch::full(&sys), &w);
        let h = 0.5;
        // G is quadratic, so central differences are exact up to rounding
        let fd = DVector::from_fn(n, |j, _| {
            let mut up = w.clone();
            let mut down = w.clone();
            up[j] += h;
            down[j] -= h;
            (normalized_error(&sys, &up) - normalized_error(&sys, &down)) / (2.0 * h)
        });
        prop_assert!(close(&tp, &fd, 1e-10));
    }

    #[test]
    fn second_difference_is_linear_map_of_update(seed in any::<u64>(), (m, n) in sizes()) {
        let sys = system(seed, m, n);
        let batch = RowBatch::full(&sys);
        let w = point(seed, n);
        let expected = -(batch.projection_operator() * tp_update(&batch, &w));
        prop_assert!(close(&delta_tp(&batch, &w), &expected, 1e-12));
    }

    #[test]
    fn hessian_spectrum_in_unit_interval(seed in any::<u64>(), (m, n) in sizes()) {
        let sys = system(seed, m, n);
        let eig = SymmetricEigen::new(normalized_hessian(&sys)).eigenvalues;
        prop_assert!(eig.max() <= 1.0 + 1e-12);
        prop_assert!(eig.min() >= -1e-12);
        if scale_invariant_solution(&sys).is_ok() {
            prop_assert!(eig.min() > 0.0);
        }
    }

    #[test]
    fn curvature_step_at_least_learning_rate(seed in any::<u64>(), (m, n) in sizes(), tau in 1usize..=8) {
        let sys = system(seed, m, n);
        let w = point(seed, n);
        let rows: Vec<_> = (0..tau.min(m)).map(|i| sys.row(i)).collect();
        let targets: Vec<_> = (0..tau.min(m)).map(|i| sys.targets()[i]).collect();
        let batch = RowBatch::new(rows, targets).unwrap();
        let cfg = SolverConfig { p: 0.51, beta: 0.0, epsilon_guard: 1e-12, ..SolverConfig::default() };
        if let Ok(theta) = curvature_step(&batch, &w, cfg.epsilon_guard) {
            let (_, info) = step(&IterateState::new(w.clone()), &batch, &cfg);
            let alpha = theta / tp_update(&batch, &w).norm();
            prop_assert!(alpha >= 1.0 - 1e-9);
            prop_assert!(info.alpha >= cfg.eta(1) * (1.0 - 1e-9));
        }
    }

    #[test]
    fn unit_step_never_increases_objective(seed in any::<u64>(), (m, n) in sizes()) {
        let sys = system(seed, m, n);
        let cfg = SolverConfig { beta: 0.0, mode: Mode::Batch, step_rule: StepRule::FixedAlpha(1.0), ..SolverConfig::default() };
        let batch = RowBatch::full(&sys);
        let mut state = IterateState::new(point(seed, n));
        for _ in 0..20 {
            let before = normalized_error(&sys, &state.w);
            state = step(&state, &batch, &cfg).0;
            prop_assert!(normalized_error(&sys, &state.w) <= before + 1e-12 * (1.0 + before));
        }
    }

    #[test]
    fn tensor_products_match_loops(seed in any::<u64>(), i in 1usize..=4, j in 1usize..=4, k in 1usize..=4, l in 1usize..=4) {
        let mut rng = seeded(seed);
        let a = Tensor3::from_fn([i, j, k], |_, _, _| rng.random_range(-1.0..1.0));
        let t = Tensor3::from_fn([i, k, l], |_, _, _| rng.random_range(-1.0..1.0));
        let mat = DMatrix::from_fn(i, k, |_, _| rng.random_range(-1.0..1.0));
        let d = DMatrix::from_fn(i, i, |_, _| rng.random_range(-1.0..1.0));
        let v = DVector::from_fn(i, |_, _| rng.random_range(-1.0..1.0));

        let st = slice_transform_product(&a, &t).unwrap();
        let sc = slice_contract_product(&a, &mat).unwrap();
        let mp = mode_p_multiply(&a, &d, 1).unwrap();
        let mv = mode_p_vector(&a, &v, 1).unwrap();
        for x in 0..i {
            for y in 0..j {
                for z in 0..l {
                    let e: f64 = (0..k).map(|q| a[(x, y, q)] * t[(x, q, z)]).sum();
                    prop_assert!((st[(x, y, z)] - e).abs() < 1e-12);
                }
                let e: f64 = (0..k).map(|q| a[(x, y, q)] * mat[(x, q)]).sum();
                prop_assert!((sc[(x, y)] - e).abs() < 1e-12);
                for z in 0..k {
                    let e: f64 = (0..i).map(|q| d[(x, q)] * a[(q, y, z)]).sum();
                    prop_assert!((mp[(x, y, z)] - e).abs() < 1e-12);
                }
            }
        }
        for y in 0..j {
            for z in 0..k {
                let e: f64 = (0..i).map(|q| v[q] * a[(q, y, z)]).sum();
                prop_assert!((mv[(y, z)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_round_trip(seed in any::<u64>(), dims in prop::array::uniform3(1usize..=4), swaps in prop::collection::vec((1usize..=3, 1usize..=3), 0..4)) {
        let mut rng = seeded(seed);
        let a = Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0));
        let mut perm = IndexPermutation::identity();
        for (x, y) in swaps {
            perm = perm.then(x, y).unwrap();
        }
        let back = permute(&permute(&a, &perm), &perm.inverse());
        prop_assert_eq!(back, a);
    }

    #[test]
    fn chain_identities(seed in any::<u64>(), m in 2usize..=8, gamma in 0.0..0.95f64) {
        let mut rng = seeded(seed);
        let mrp = random_mrp(m, gamma, &mut rng).unwrap();
        let pi = stationary_distribution(mrp.p()).unwrap();
        let pi = pi.pi();
        prop_assert!((pi.sum() - 1.0).abs() < 1e-12);
        prop_assert!(close(&(mrp.p().transpose() * pi), pi, 1e-10));
        let v = true_value(&mrp).unwrap();
        let bellman = expected_one_step_reward(&mrp) + mrp.p() * &v * gamma;
        prop_assert!(close(&v, &bellman, 1e-10));
        prop_assert!(v.amax() <= mrp.r_max() / (1.0 - gamma) + 1e-12);
    }

    #[test]
    fn trajectories_follow_the_chain(seed in any::<u64>(), m in 2usize..=6, t in 2usize..=40) {
        let mut rng = seeded(seed);
        let mrp = random_mrp(m, 0.7, &mut rng).unwrap();
        let traj = sample_trajectory(&mrp, Start::State(0), t, &mut rng).unwrap();
        prop_assert_eq!(traj.len(), t);
        prop_assert_eq!(traj.states[0], 0);
        for (s, s2, r) in traj.transitions() {
            prop_assert!(mrp.p()[(s, s2)] > 0.0);
            prop_assert_eq!(r, mrp.r()[(s, s2)]);
        }
        let bound = mrp.r_max() / (1.0 - mrp.gamma());
        for (_, g) in first_visit_mc_targets(&traj, mrp.gamma()) {
            prop_assert!(g.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn fixed_points_agree_and_satisfy_their_equations(seed in any::<u64>(), m in 2usize..=8, n in 1usize..=4, gamma in 0.0..0.95f64) {
        let n = n.min(m);
        let mut rng = seeded(seed);
        let mrp = random_mrp(m, gamma, &mut rng).unwrap();
        let f = FeatureMap::random_uniform(m, n, &mut rng).unwrap();
        prop_assume!(inverse_distance_matrix(&mrp, &f).is_ok());
        let wt = td0_fixed_point_tensor(&mrp, &f).unwrap();
        let wb = td0_fixed_point_bruteforce(&mrp, &f).unwrap();
        prop_assert!(close(&wt, &wb, 1e-9));

        let pi = stationary_distribution(mrp.p()).unwrap();
        let (a, b) = td0_normal_equations(&mrp, &f, pi.pi()).unwrap();
        prop_assert!(close(&(&a * &wb), &b, 1e-10));

        let w_m = mc_fixed_point(&mrp, &f).unwrap();
        let sys = mc_induced_system(&mrp, &f).unwrap();
        prop_assert!(tp_update(&RowBatch::full(&sys), &w_m).amax() <= 1e-10 * (1.0 + w_m.amax()));
    }

    #[test]
    fn mc_fixed_point_ignores_feature_scale(seed in any::<u64>(), m in 2usize..=8, n in 1usize..=3, c in 0.1..10.0f64, row in 0usize..8) {
        let n = n.min(m);
        let mut rng = seeded(seed);
        let mrp = random_mrp(m, 0.5, &mut rng).unwrap();
        let f = FeatureMap::random_uniform(m, n, &mut rng).unwrap();
        let sys = mc_induced_system(&mrp, &f).unwrap();
        let w = scale_invariant_solution(&sys).unwrap();
        let ws = scale_invariant_solution(&sys.rescale_row(row % m, c).unwrap()).unwrap();
        prop_assert!(close(&w, &ws, 1e-9));
    }

    #[test]
    fn normalized_pair_directions_are_unit(seed in any::<u64>(), m in 2usize..=8, n in 1usize..=4) {
        let n = n.min(m);
        let mut rng = seeded(seed);
        let mrp = random_mrp(m, 0.6, &mut rng).unwrap();
        let f = FeatureMap::random_uniform(m, n, &mut rng).unwrap();
        let (l, _) = scaleinv::value_estimators::td0_tensors(&mrp, &f).unwrap();
        for s in 0..m {
            for s2 in 0..m {
                prop_assert!((l.fiber(s, s2).norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
