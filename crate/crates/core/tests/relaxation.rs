use kms_core::datagen::{generate, Dataset, DatasetSpec};
use kms_core::kernels::{assemble, GramAssembly, Kernel, KernelSpec, PointCloud};
use kms_core::kms::Projector;
use kms_core::ot::{solve_exact, InnerSolver};
use kms_core::rankred::{
    find_binding, null_direction, rank_bound, reduce, ReductionMode, RANK_TOL,
};
use kms_core::rng::{stream, Stream};
use kms_core::sdr::{
    costs, mirror_step, objective_exact, rank1_value, solve_sdr, supgradient, SolverConfig,
    SpectrahedronPoint,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_cloud(n: usize, d: usize, rng: &mut impl Rng) -> PointCloud {
    PointCloud::new(
        (0..n * d).map(|_| rng.sample(StandardNormal)).collect(),
        n,
        d,
    )
    .unwrap()
}

fn instance(n: usize, seed: u64) -> (PointCloud, PointCloud, GramAssembly) {
    let mut rng = stream(seed, Stream::Datagen);
    let x = random_cloud(n, 3, &mut rng);
    let y = random_cloud(n, 3, &mut rng);
    let ga = assemble(&Kernel::gaussian(1.3).unwrap(), &x, &y).unwrap();
    (x, y, ga)
}

fn random_spectrahedron(dim: usize, rank: usize, rng: &mut impl Rng) -> SpectrahedronPoint {
    let g = DMatrix::from_fn(dim, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = &g * g.transpose();
    let tr = s.trace();
    SpectrahedronPoint::new(s / tr).unwrap()
}

fn eigenvalues(s: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(s.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// `M'_ij` against direct kernel sums: entry `k` is
    /// `K(z_k, x_i) - K(z_k, y_j)` with a sign flip for the `y` half.
    #[test]
    fn difference_vectors_match_kernel_evaluations(n in 1usize..6, seed in any::<u64>()) {
        let (x, y, ga) = instance(n, seed);
        let k = ga.kernel();
        for i in 0..n {
            for j in 0..n {
                let m = ga.m_prime(i, j);
                for r in 0..n {
                    let want = k.eval(x.row(r), x.row(i)).unwrap() - k.eval(x.row(r), y.row(j)).unwrap();
                    prop_assert!((m[r] - want).abs() < 1e-12 + ga.jitter());
                    let want = -k.eval(y.row(r), x.row(i)).unwrap() + k.eval(y.row(r), y.row(j)).unwrap();
                    prop_assert!((m[n + r] - want).abs() < 1e-12 + ga.jitter());
                }
            }
        }
    }

    /// `<w, M_ij>` is the projected difference `f(x_i) - f(y_j)` of the unit
    /// norm function built from `w`.
    #[test]
    fn projection_identity_and_unit_norm(n in 1usize..6, seed in any::<u64>()) {
        let (x, y, ga) = instance(n, seed);
        let mut rng = stream(seed, Stream::Sampling);
        let w = DVector::from_fn(ga.dim(), |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let f = Projector::from_direction(&ga, &w, &x, &y);
        prop_assert!((f.rkhs_norm_sq() - 1.0).abs() < 1e-6);
        for i in 0..n {
            for j in 0..n {
                let direct = f.eval(x.row(i)).unwrap() - f.eval(y.row(j)).unwrap();
                let via_m = ga.m(i, j).dot(&w);
                prop_assert!((direct - via_m).abs() < 1e-7, "{direct} vs {via_m}");
            }
        }
    }

    #[test]
    fn costs_agree_two_ways(n in 1usize..6, seed in any::<u64>()) {
        let (_, _, ga) = instance(n, seed);
        let mut rng = stream(seed, Stream::Sampling);
        let s = random_spectrahedron(ga.dim(), 3, &mut rng);
        let c = costs(&ga, s.matrix());
        for i in 0..n {
            for j in 0..n {
                let m = ga.m(i, j);
                let outer = (&m * m.transpose()).dot(s.matrix());
                prop_assert!((c.get(i, j) - outer).abs() < 1e-10);
            }
        }
    }

    /// Exact supgradients: `<v(S), S> = F(S)` and `tr v(S) <= C`.
    #[test]
    fn supgradient_properties(n in 1usize..7, seed in any::<u64>()) {
        let (_, _, ga) = instance(n, seed);
        let mut rng = stream(seed, Stream::Sampling);
        let s = random_spectrahedron(ga.dim(), 2, &mut rng);
        let (v, value) = supgradient(&ga, &s, 0.0, &InnerSolver::default(), &mut rng).unwrap();
        let (f, _) = objective_exact(&ga, s.matrix());
        prop_assert!((v.dot(s.matrix()) - f).abs() < 1e-10);
        prop_assert!((value - f).abs() < 1e-12);
        prop_assert!(v.trace() <= ga.c_bound() * (1.0 + 1e-12));
    }

    #[test]
    fn mirror_step_stays_on_the_spectrahedron(dim in 1usize..8, seed in any::<u64>(), gamma in 0.01f64..50.0) {
        let mut rng = stream(seed, Stream::Sampling);
        let s = random_spectrahedron(dim, dim, &mut rng);
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = &g + g.transpose();
        let next = mirror_step(&s, &v, gamma).unwrap();
        prop_assert!((next.matrix().trace() - 1.0).abs() < 1e-12);
        // large steps can underflow the smallest weights to zero
        prop_assert!(eigenvalues(next.matrix()).iter().all(|&l| l >= -1e-15));
    }

    #[test]
    fn rank_bound_is_the_largest_feasible_rank(n in 1usize..100_000) {
        let k = rank_bound(n);
        prop_assert!(k * (k + 1) / 2 <= n + 1);
        prop_assert!((k + 1) * (k + 2) / 2 > n + 1);
    }
}

#[test]
fn supgradient_for_a_single_pair() {
    let (_, _, ga) = instance(1, 5);
    let m = ga.m(0, 0);
    let mut rng = stream(0, Stream::Solver);
    let s = SpectrahedronPoint::center(2);
    let (v, _) = supgradient(&ga, &s, 0.0, &InnerSolver::default(), &mut rng).unwrap();
    assert!((v - &m * m.transpose()).amax() < 1e-12);
    let (f, _) = objective_exact(&ga, s.matrix());
    assert!((f - m.norm_squared() / 2.0).abs() < 1e-12);
}

#[test]
fn supgradient_lies_in_the_permutation_hull_at_n3() {
    let (_, _, ga) = instance(3, 17);
    let mut rng = stream(17, Stream::Sampling);
    let s = random_spectrahedron(ga.dim(), 2, &mut rng);
    let (v, _) = supgradient(&ga, &s, 0.0, &InnerSolver::default(), &mut rng).unwrap();
    let sigma = solve_exact(&costs(&ga, s.matrix())).assignment.sigma;
    let mut want = DMatrix::zeros(ga.dim(), ga.dim());
    for (i, &j) in sigma.iter().enumerate() {
        let m = ga.m(i, j);
        want += &m * m.transpose() / 3.0;
    }
    assert!((v - want).amax() < 1e-12);
}

#[test]
fn sdr_single_pair_reaches_the_analytic_optimum() {
    let (_, _, ga) = instance(1, 2);
    let opt = ga.m(0, 0).norm_squared();
    // capped run: the certificate still brackets the optimum
    let capped = solve_sdr(&ga, &SolverConfig::default()).unwrap();
    assert!(capped.value <= opt + 1e-12 && capped.upper_bound >= opt - 1e-12);
    let cfg = SolverConfig {
        max_iterations: None,
        ..SolverConfig::default()
    };
    let sol = solve_sdr(&ga, &cfg).unwrap();
    assert!(
        opt - sol.value <= sol.params.delta,
        "{} vs {opt}",
        sol.value
    );
    assert!(sol.upper_bound >= opt - 1e-12);
}

/// Random rank-one points stay below the certified upper bound, and so does
/// the averaged iterate.
#[test]
fn sandwich_on_small_instances() {
    for seed in 0..5 {
        let (_, _, ga) = instance(5, 100 + seed);
        let sol = solve_sdr(&ga, &SolverConfig::default().with_seed(seed)).unwrap();
        let mut rng = stream(seed, Stream::Sampling);
        for _ in 0..10_000 {
            let w =
                DVector::from_fn(ga.dim(), |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            assert!(rank1_value(&ga, &w) <= sol.upper_bound * (1.0 + 1e-9));
        }
        assert!(sol.value <= sol.upper_bound);
    }
}

#[test]
fn running_average_objective_trends_upward() {
    let (_, _, ga) = instance(8, 3);
    let cfg = SolverConfig {
        check_every: 0,
        ..SolverConfig::default()
    };
    let sol = solve_sdr(&ga, &cfg).unwrap();
    let log = &sol.trace_log;
    let mean = |w: &[kms_core::sdr::TraceEntry]| {
        w.iter().map(|e| e.inexact_value).sum::<f64>() / w.len() as f64
    };
    let q = log.len() / 4;
    assert!(mean(&log[3 * q..]) + 1e-12 >= mean(&log[..q]));
}

#[test]
fn binding_pairs_are_tight_and_duals_feasible() {
    let (_, _, ga) = instance(4, 21);
    let mut rng = stream(21, Stream::Sampling);
    let s = random_spectrahedron(ga.dim(), 3, &mut rng);
    let b = find_binding(&s, &ga).unwrap();
    let c = costs(&ga, s.matrix());
    let (f, g) = (&b.assignment.dual_f, &b.assignment.dual_g);
    for (i, &j) in b.sigma().iter().enumerate() {
        assert!((c.get(i, j) - f[i] - g[j]).abs() < 1e-8);
    }
    for i in 0..4 {
        for j in 0..4 {
            assert!(f[i] + g[j] <= c.get(i, j) + 1e-8);
        }
    }
}

#[test]
fn tie_breaking_is_deterministic() {
    let c = kms_core::ot::CostMatrix::new(DMatrix::from_element(4, 4, 2.0)).unwrap();
    let a = solve_exact(&c).assignment.sigma;
    let b = solve_exact(&c).assignment.sigma;
    assert_eq!(a, b);
}

#[test]
fn null_direction_keeps_the_constraints() {
    let (_, _, ga) = instance(3, 8);
    let mut rng = stream(8, Stream::Sampling);
    let s = random_spectrahedron(ga.dim(), ga.dim(), &mut rng);
    let b = find_binding(&s, &ga).unwrap();
    let y = null_direction(&s, &b, &ga)
        .unwrap()
        .expect("r(r+1)/2 > n + 1 leaves room");
    assert!(y.norm() > 0.5);
    assert!(y.trace().abs() < 1e-10);
    for (i, &j) in b.sigma().iter().enumerate() {
        let m = ga.m(i, j);
        assert!((m.transpose() * &y * &m)[(0, 0)].abs() < 1e-10);
    }
}

#[test]
fn reduction_of_a_rank_one_input_is_a_no_op() {
    let (_, _, ga) = instance(4, 9);
    let w = DVector::from_fn(ga.dim(), |i, _| (i as f64 + 1.0).sin()).normalize();
    let s = SpectrahedronPoint::rank_one(&w).unwrap();
    let red = reduce(&s, &ga, ReductionMode::Fixed).unwrap();
    assert_eq!(red.loops, 0);
    assert_eq!(red.rank, 1);
    assert!((red.s.matrix() - s.matrix()).amax() < 1e-12);
}

#[test]
fn reduction_reaches_the_bound_and_guarded_mode_keeps_the_value() {
    let spec = DatasetSpec::new(
        Dataset::GaussMixture {
            d: 5,
            rho: 0.0,
            shift: 0.5,
        },
        15,
        4,
    );
    let (x, y) = generate(&spec).unwrap();
    let k = KernelSpec::gaussian_median().resolve(&x, &y).unwrap();
    let ga = assemble(&k, &x, &y).unwrap();
    let sol = solve_sdr(&ga, &SolverConfig::default()).unwrap();

    let fixed = reduce(&sol.s_avg, &ga, ReductionMode::Fixed).unwrap();
    assert!(fixed.rank <= rank_bound(15));
    assert!(fixed.binding_residual < 1e-9);
    // every step strictly lowers the rank
    let mut prev = usize::MAX;
    for step in &fixed.history {
        assert!(step.support < prev);
        prev = step.support;
    }
    let ev = eigenvalues(fixed.s.matrix());
    assert_eq!(ev.iter().filter(|&&l| l > RANK_TOL).count(), fixed.rank);

    let guarded = reduce(&sol.s_avg, &ga, ReductionMode::Guarded).unwrap();
    assert!((guarded.value - guarded.value_before).abs() <= 1e-6 * guarded.value_before);
    assert!(guarded.loops <= 30);
    assert!(guarded.rank < guarded.rank_before);
    assert!(guarded.dual_violation < 1e-9);
}
