use kms_core::datagen::{circulant_instance, generate, Dataset, DatasetSpec};
use kms_core::kernels::{Kernel, KernelSpec, PointCloud};
use kms_core::kms::{kms2, kms2_pipeline, ms2, projected_wasserstein_p, KmsConfig};
use kms_core::ot::solve_exact;
use kms_core::rng::{stream, Stream};
use kms_core::stats::{
    critical_value, theorem_test, two_sample_test, CriticalValueParams, PermutationTestConfig,
};
use kms_core::KmsError;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn cloud(rng: &mut impl Rng, n: usize, d: usize, shift: f64) -> PointCloud {
    PointCloud::new(
        (0..n * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) + shift)
            .collect(),
        n,
        d,
    )
    .unwrap()
}

#[test]
fn single_pair_is_exact_for_both_kernels() {
    let x = PointCloud::from_rows(&[vec![0.5, 1.0, -2.0]]).unwrap();
    let y = PointCloud::from_rows(&[vec![-1.0, 0.0, 0.5]]).unwrap();
    let d2: f64 = 1.5f64.powi(2) + 1.0 + 2.5f64.powi(2);
    let k = Kernel::gaussian(2.0).unwrap();
    let r = kms2(&x, &y, &k, &KmsConfig::default()).unwrap();
    // |M_11|^2 = K(x,x) + K(y,y) - 2 K(x,y)
    let want = 2.0 - 2.0 * (-d2 / 8.0).exp();
    assert!((r.value - want).abs() <= 1e-9 * want);
    assert_eq!(r.rank, 1);
    let r = ms2(&x, &y, &KmsConfig::default()).unwrap();
    assert!((r.value - d2).abs() <= 1e-9 * d2);
}

#[test]
fn nearly_identical_samples_have_near_zero_distance() {
    let mut rng = stream(3, Stream::Datagen);
    let x = cloud(&mut rng, 15, 2, 0.0);
    let y = PointCloud::new(x.as_slice().iter().map(|v| v + 1e-9).collect(), 15, 2).unwrap();
    let k = KernelSpec::gaussian_median().resolve(&x, &y).unwrap();
    let r = kms2(&x, &y, &k, &KmsConfig::default()).unwrap();
    assert!(r.distance < 1e-3, "{}", r.distance);
}

#[test]
fn duplicate_points_are_rejected() {
    let x = PointCloud::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let err = kms2(
        &x,
        &x,
        &Kernel::gaussian(1.0).unwrap(),
        &KmsConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, KmsError::DuplicatePoints { .. }));
    let y = PointCloud::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
    assert!(matches!(
        kms2(
            &x,
            &y,
            &Kernel::gaussian(1.0).unwrap(),
            &KmsConfig::default()
        ),
        Err(KmsError::SampleSizeMismatch { .. })
    ));
}

/// In one dimension the only unit directions are `+-1`, so the linear
/// distance is the classical one of the raw samples.
#[test]
fn one_dimensional_linear_distance_is_classical() {
    let mut rng = stream(4, Stream::Datagen);
    let x = cloud(&mut rng, 25, 1, 0.0);
    let y = cloud(&mut rng, 25, 1, 0.7);
    let r = ms2(&x, &y, &KmsConfig::default()).unwrap();
    let w2 = projected_wasserstein_p(x.as_slice(), y.as_slice(), 2.0).unwrap();
    assert!((r.value - w2 * w2).abs() < 1e-9 * w2 * w2);
}

#[test]
fn fitted_projector_reproduces_the_value() {
    let mut rng = stream(5, Stream::Datagen);
    let x = cloud(&mut rng, 12, 3, 0.0);
    let y = cloud(&mut rng, 12, 3, 0.4);
    let k = KernelSpec::gaussian_median().resolve(&x, &y).unwrap();
    let p = kms2_pipeline(&x, &y, &k, &KmsConfig::default()).unwrap();
    let r = &p.result;
    let fx = r.projector.project(&x).unwrap();
    let fy = r.projector.project(&y).unwrap();
    let w2 = projected_wasserstein_p(&fx, &fy, 2.0).unwrap();
    assert!((w2 * w2 - r.value).abs() < 1e-8);
    let (ax, ay) = r.projected(&p.assembly);
    for (a, b) in ax.iter().zip(&fx).chain(ay.iter().zip(&fy)) {
        assert!((a - b).abs() < 1e-8);
    }
    assert!((r.projector.rkhs_norm_sq() - 1.0).abs() < 1e-6);
    // extracted value <= certified relaxation bound
    assert!(r.value <= r.diagnostics.sdr_upper_bound * (1.0 + 1e-9));
}

/// Swapping the samples leaves the problem unchanged; each run's estimate
/// lies below the other's certificate.
#[test]
fn swapping_samples_is_consistent() {
    let mut rng = stream(6, Stream::Datagen);
    let x = cloud(&mut rng, 10, 2, 0.0);
    let y = cloud(&mut rng, 10, 2, 0.5);
    let k = Kernel::gaussian(1.0).unwrap();
    let a = kms2(&x, &y, &k, &KmsConfig::default()).unwrap();
    let b = kms2(&y, &x, &k, &KmsConfig::default()).unwrap();
    assert!(a.value <= b.diagnostics.sdr_upper_bound * (1.0 + 1e-9));
    assert!(b.value <= a.diagnostics.sdr_upper_bound * (1.0 + 1e-9));
}

#[test]
fn linear_and_gaussian_estimates_differ_on_covariance_shift() {
    let spec = DatasetSpec::new(Dataset::GaussCovShift { d: 20, rho: 0.5 }, 30, 2);
    let (x, y) = generate(&spec).unwrap();
    let lin = ms2(&x, &y, &KmsConfig::default()).unwrap();
    let k = KernelSpec::gaussian_median().resolve(&x, &y).unwrap();
    let gau = kms2(&x, &y, &k, &KmsConfig::default()).unwrap();
    assert!(lin.value >= 0.0 && gau.value >= 0.0);
    assert!((lin.value - gau.value).abs() > 1e-6);
}

#[test]
fn same_seed_same_result() {
    let spec = DatasetSpec::new(
        Dataset::Circle {
            r_in: 1.0,
            r_out: 2.0,
            noise: 0.1,
        },
        20,
        9,
    );
    let (x, y) = generate(&spec).unwrap();
    let k = KernelSpec::gaussian_median().resolve(&x, &y).unwrap();
    let cfg = KmsConfig::default().with_seed(4);
    let a = kms2(&x, &y, &k, &cfg).unwrap();
    let b = kms2(&x, &y, &k, &cfg).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.direction, b.direction);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Every permutation averages entries of the circulant family, and the
    /// cyclic shifts attain each single entry, so the optimum is the
    /// smallest one.
    #[test]
    fn circulant_optimum_is_the_smallest_entry(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::Datagen);
        let a: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let inst = circulant_instance(&a).unwrap();
        let w = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let value = solve_exact(&inst.costs(&w).unwrap()).value;
        let smallest = a.iter().map(|v| DVector::from_column_slice(v).dot(&w).powi(2)).fold(f64::INFINITY, f64::min);
        prop_assert!((value - smallest).abs() < 1e-10);
    }

    #[test]
    fn datagen_is_deterministic(seed in any::<u64>(), n in 1usize..20) {
        let spec = DatasetSpec::new(Dataset::GaussMixture { d: 4, rho: 0.2, shift: 0.5 }, n, seed);
        prop_assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn critical_value_is_monotone(n in 1usize..10_000, alpha in 0.01f64..0.5, p in 1.0f64..5.0) {
        let base = CriticalValueParams::new(1.0, p, alpha);
        let v = critical_value(n, &base).unwrap();
        prop_assert!(critical_value(n + 1, &base).unwrap() < v);
        prop_assert!(critical_value(n, &CriticalValueParams::new(1.0, p, alpha / 2.0)).unwrap() > v);
        prop_assert!(critical_value(n, &CriticalValueParams::new(2.0, p, alpha)).unwrap() > v);
    }
}

#[test]
fn critical_value_at_n_10000() {
    let v = critical_value(10_000, &CriticalValueParams::new(1.0, 2.0, 0.05)).unwrap();
    // 4 (1 + 4 sqrt(ln 40))^(1/2) / 10, with ln 40 = 3.6888794541139363
    let want = 0.4 * (1.0 + 4.0 * 3.688_879_454_113_936_3f64.sqrt()).sqrt();
    assert!((v - want).abs() < 1e-12);
}

#[test]
fn datagen_shapes_and_laws() {
    let spec = DatasetSpec::new(Dataset::TwoPoint1d, 1000, 12);
    let (x, y) = generate(&spec).unwrap();
    for c in [&x, &y] {
        assert!(c.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        let mean = c.as_slice().iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    let spec = DatasetSpec::new(
        Dataset::Circle {
            r_in: 1.0,
            r_out: 2.0,
            noise: 0.1,
        },
        200,
        13,
    );
    let (x, y) = generate(&spec).unwrap();
    assert_eq!((x.n(), x.d(), y.n(), y.d()), (200, 2, 200, 2));
    let radius = |r: &[f64]| (r[0] * r[0] + r[1] * r[1]).sqrt();
    assert!(x.rows().all(|r| (0.5..=1.5).contains(&radius(r))));
    assert!(y.rows().all(|r| (1.5..=2.5).contains(&radius(r))));

    // rho = 0: both samples standard normal, so second moments agree
    let spec = DatasetSpec::new(Dataset::GaussCovShift { d: 50, rho: 0.0 }, 400, 14);
    let (x, y) = generate(&spec).unwrap();
    let msq =
        |c: &PointCloud| c.as_slice().iter().map(|v| v * v).sum::<f64>() / (c.n() * c.d()) as f64;
    assert!((msq(&x) - 1.0).abs() < 0.03 && (msq(&y) - 1.0).abs() < 0.03);
    assert_ne!(x, y);

    // rho > 0 adds rho to every covariance entry
    let spec = DatasetSpec::new(Dataset::GaussCovShift { d: 10, rho: 0.5 }, 4000, 15);
    let (_, y) = generate(&spec).unwrap();
    let cov01 = y.rows().map(|r| r[0] * r[1]).sum::<f64>() / 4000.0;
    assert!((cov01 - 0.5).abs() < 0.08, "{cov01}");
}

#[test]
fn permutation_test_separates_the_circles() {
    let cfg = PermutationTestConfig {
        permutations: 200,
        ..PermutationTestConfig::default()
    };
    for seed in 0..20 {
        let spec = DatasetSpec::new(
            Dataset::Circle {
                r_in: 1.0,
                r_out: 2.0,
                noise: 0.1,
            },
            100,
            seed,
        );
        let (x, y) = generate(&spec).unwrap();
        let out = two_sample_test(&x, &y, &KernelSpec::gaussian_median(), &cfg, seed).unwrap();
        assert!(out.result.reject, "seed {seed}: {:?}", out.result.p_value);
        assert_eq!(out.result.permutation_stats.len(), 200);
    }
}

#[test]
fn critical_value_test_keeps_tiny_samples() {
    let spec = DatasetSpec::new(
        Dataset::GaussMixture {
            d: 3,
            rho: 0.0,
            shift: 0.5,
        },
        4,
        1,
    );
    let (x, y) = generate(&spec).unwrap();
    let k = KernelSpec::gaussian_median().resolve(&x, &y).unwrap();
    let params = CriticalValueParams::new(k.bound(&[&x, &y]), 2.0, 0.05);
    let out = theorem_test(&x, &y, &k, &params, &KmsConfig::default()).unwrap();
    assert!(!out.result.reject);
    assert!(out.result.threshold > out.result.statistic);
}

#[test]
fn two_point_statistic_approaches_the_classical_distance() {
    // identical laws: the analytic W1 of the samples shrinks with n
    let w = |n: usize| {
        let (x, y) = generate(&DatasetSpec::new(Dataset::TwoPoint1d, n, 7)).unwrap();
        projected_wasserstein_p(x.as_slice(), y.as_slice(), 1.0).unwrap()
    };
    let (x, y) = generate(&DatasetSpec::new(Dataset::TwoPoint1d, 4000, 7)).unwrap();
    let r = ms2(
        &x.select(&(0..200).collect::<Vec<_>>()).unwrap(),
        &y.select(&(0..200).collect::<Vec<_>>()).unwrap(),
        &KmsConfig::default(),
    )
    .unwrap();
    let raw = projected_wasserstein_p(&x.as_slice()[..200], &y.as_slice()[..200], 2.0).unwrap();
    assert!((r.value - raw * raw).abs() < 1e-9);
    assert!(w(4000) < 0.05);
}
