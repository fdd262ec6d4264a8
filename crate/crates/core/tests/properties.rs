use proptest::prelude::*;

use subemb::complexity::{estimate_complexity, estimate_width, sup_samples};
use subemb::ensembles::{column_norms, sample_matrix, EnsembleSpec};
use subemb::isometry::{empirical_psi2, Psi2Method};
use subemb::oracles::{binom_central_moments, enumerate_exact_sparse, exact_sparse_count};
use subemb::rng::{gaussian_vector, SeedPath};
use subemb::testsets::{SetSpec, TestSet};
use subemb::Column;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

fn arb_points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n), 1..12)
}

fn arb_sparse_spec() -> impl Strategy<Value = EnsembleSpec> {
    (4usize..40, 1usize..8, 1usize..6, any::<bool>()).prop_map(|(m, n, s, exact)| {
        let s = s.min(m);
        if exact {
            EnsembleSpec::exact_sparse(m, n, s)
        } else {
            EnsembleSpec::approx_sparse(m, n, s)
        }
    })
}

fn negate(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points.iter().map(|p| p.iter().map(|v| -v).collect()).collect()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn exact_sparse_columns_have_s_entries(m in 1usize..60, s in 1usize..12, seed: u64) {
        let s = s.min(m);
        let a = sample_matrix(&EnsembleSpec::exact_sparse(m, 6, s), SeedPath::new(seed, 0, 0)).unwrap();
        for col in a.columns() {
            prop_assert_eq!(col.nnz(), s);
            prop_assert_eq!(col.norm(), (s as f64).sqrt());
        }
    }

    #[test]
    fn sampling_is_deterministic(spec in arb_sparse_spec(), seed: u64, trial in 0u64..100) {
        let path = SeedPath::new(seed, trial, 0);
        let a = sample_matrix(&spec, path).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| sample_matrix(&spec, path)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn negated_matrix_has_same_support_and_distortion(spec in arb_sparse_spec(), seed: u64, points in arb_points(6)) {
        let spec = spec.with_n(6);
        let a = sample_matrix(&spec, SeedPath::new(seed, 0, 0)).unwrap();
        let neg = a.negated();
        for (c, d) in a.columns().iter().zip(neg.columns()) {
            match (c, d) {
                (Column::Sparse { entries: x, .. }, Column::Sparse { entries: y, .. }) => {
                    prop_assert!(x.iter().zip(y).all(|(p, q)| p.0 == q.0 && p.1 == -q.1));
                }
                _ => prop_assert!(false, "sparse ensembles give sparse columns"),
            }
        }
        let mut sym = points.clone();
        sym.extend(negate(&points));
        let set = TestSet::finite(6, sym).unwrap();
        let lambda = spec.default_lambda();
        prop_assert_eq!(
            set.distortion_sup(&a, lambda).unwrap().delta,
            set.distortion_sup(&neg, lambda).unwrap().delta
        );
    }

    #[test]
    fn normalized_columns_hit_target(m in 5usize..80, s in 1usize..5, target in 0.2f64..5.0, seed: u64) {
        let s = s.min(m);
        let spec = EnsembleSpec::column_normalized(EnsembleSpec::approx_sparse(m, 8, s), target)
            .with_min_norm_fraction(0.3);
        let a = sample_matrix(&spec, SeedPath::new(seed, 1, 0)).unwrap();
        for norm in column_norms(&a) {
            prop_assert!(((norm - target) / target).abs() <= 1e-12);
        }
    }

    #[test]
    fn signed_sup_is_sup_over_symmetrized_set(points in arb_points(5), seed: u64) {
        let g = gaussian_vector(SeedPath::new(seed, 0, 0), 5);
        let set = TestSet::finite(5, points.clone()).unwrap();
        let mut sym = points.clone();
        sym.extend(negate(&points));
        let sym = TestSet::finite(5, sym).unwrap();
        prop_assert_eq!(
            set.sup_linear(&g, true).unwrap().0,
            sym.sup_linear(&g, false).unwrap().0
        );
    }

    #[test]
    fn distortion_is_permutation_invariant(points in arb_points(4), seed: u64, rot in 0usize..12) {
        let a = sample_matrix(&EnsembleSpec::dense_gaussian(7, 4), SeedPath::new(seed, 0, 0)).unwrap();
        let mut shuffled = points.clone();
        shuffled.rotate_left(rot % points.len());
        shuffled.reverse();
        let x = TestSet::finite(4, points).unwrap().distortion_sup(&a, 1.0).unwrap().delta;
        let y = TestSet::finite(4, shuffled).unwrap().distortion_sup(&a, 1.0).unwrap().delta;
        prop_assert_eq!(x, y);
    }

    #[test]
    fn sup_linear_witness_is_feasible(seed: u64, which in 0usize..5) {
        let spec = match which {
            0 => SetSpec::Basis { n: 7 },
            1 => SetSpec::PairDifferences { n: 7 },
            2 => SetSpec::KSparse { n: 7, k: 3 },
            3 => SetSpec::Subspace { n: 7, d: 3, seed: 5 },
            _ => SetSpec::SphereSample { n: 7, count: 20, seed: 9 },
        };
        let set = TestSet::build(&spec).unwrap();
        let g = gaussian_vector(SeedPath::new(seed, 0, 0), 7);
        for signed in [false, true] {
            let (value, w) = set.sup_linear(&g, signed).unwrap();
            prop_assert!(set.contains(&w, 1e-10) || set.contains(&w.iter().map(|v| -v).collect::<Vec<_>>(), 1e-10));
            let dot: f64 = g.iter().zip(&w).map(|(a, b)| a * b).sum();
            let dot = if signed { dot.abs() } else { dot };
            prop_assert!((dot - value).abs() <= 1e-10, "{} vs {}", dot, value);
        }
    }

    #[test]
    fn sup_linear_scales(points in arb_points(3), c in 0.01f64..20.0, seed: u64) {
        let set = TestSet::finite(3, points).unwrap();
        let g = gaussian_vector(SeedPath::new(seed, 0, 0), 3);
        let base = set.sup_linear(&g, false).unwrap().0;
        let scaled = set.scaled(c).unwrap().sup_linear(&g, false).unwrap().0;
        prop_assert!((scaled - c * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
    }

    #[test]
    fn width_is_monotone_in_the_set(points in arb_points(4), extra in arb_points(4), seed: u64) {
        let small = TestSet::finite(4, points.clone()).unwrap();
        let mut all = points;
        all.extend(extra);
        let big = TestSet::finite(4, all).unwrap();
        let a = sup_samples(&small, 200, seed, false).unwrap();
        let b = sup_samples(&big, 200, seed, false).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
    }

    #[test]
    fn psi2_fits_scale_linearly(c in 0.05f64..50.0, seed: u64) {
        let z = gaussian_vector(SeedPath::new(seed, 0, 0), 400);
        let cz: Vec<f64> = z.iter().map(|v| c * v).collect();
        for method in [Psi2Method::MgfRoot, Psi2Method::MomentSup] {
            let a = empirical_psi2(&z, method).unwrap().value;
            let b = empirical_psi2(&cz, method).unwrap().value;
            prop_assert!((b - c * a).abs() <= 1e-6 * c * a);
        }
    }

    #[test]
    fn binomial_variance_identity(m in 2usize..5000, s in 1usize..200) {
        let s = s.min(m);
        let p = s as f64 / m as f64;
        let (second, _) = binom_central_moments(m, s).unwrap();
        let exact = m as f64 * p * (1.0 - p);
        prop_assert!((second - exact).abs() <= 1e-10 * exact.max(1e-300));
        if 2 * s <= m {
            prop_assert!(second >= s as f64 / 2.0 - 1e-12);
        }
    }
}

#[test]
fn enumeration_size_and_norms() {
    for (m, s) in [(4, 1), (5, 2), (6, 3), (7, 7)] {
        let cols = enumerate_exact_sparse(m, s).unwrap();
        assert_eq!(cols.len() as u64, exact_sparse_count(m, s).unwrap());
        assert_eq!(cols.len() as u64, (1u64 << s) * binom(m as u64, s as u64));
        assert!(cols.iter().all(|c| c.norm() == (s as f64).sqrt()));
    }
}

fn binom(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn equivalence_band_over_corpus() {
    let corpus = [
        SetSpec::Singleton { n: 3 },
        SetSpec::Basis { n: 10 },
        SetSpec::Difference { n: 12 },
        SetSpec::PairDifferences { n: 8 },
        SetSpec::KSparse { n: 20, k: 3 },
        SetSpec::Subspace { n: 15, d: 4, seed: 2 },
        SetSpec::SphereSample { n: 6, count: 30, seed: 4 },
    ];
    for spec in corpus {
        let set = TestSet::build(&spec).unwrap();
        let w = estimate_width(&set, 20_000, 31).unwrap();
        let g = estimate_complexity(&set, 20_000, 31).unwrap();
        let se = (w.stderr.powi(2) + g.stderr.powi(2)).sqrt();
        assert!(g.value <= w.value + set.rad() + 3.0 * se, "{spec:?}: {g:?} {w:?}");
        assert!(w.value <= g.value + 3.0 * se, "{spec:?}: {g:?} {w:?}");
    }
}

#[test]
fn psi2_consistency_on_exact_laws() {
    use rand::Rng;
    use subemb::oracles::{scalar_psi2_closed_form, ScalarLaw};
    let mut rng = SeedPath::new(77, 0, 0).rng();
    let rad: Vec<f64> = (0..100_000).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let (m, s) = (10usize, 2usize);
    let p = s as f64 / (2 * m) as f64;
    let sparse: Vec<f64> = (0..100_000)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < p {
                1.0
            } else if u < 2.0 * p {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    for (z, law) in [(rad, ScalarLaw::Rademacher), (sparse, ScalarLaw::SparseSign { m, s })] {
        let fit = empirical_psi2(&z, Psi2Method::MgfRoot).unwrap().value;
        let exact = scalar_psi2_closed_form(law).unwrap().value;
        assert!(((fit - exact) / exact).abs() <= 0.05, "{law:?}: {fit} vs {exact}");
    }
}
