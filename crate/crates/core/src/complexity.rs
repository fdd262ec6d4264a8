//! Monte Carlo Gaussian width `w(T) = E sup <g,x>` and Gaussian complexity
//! `gamma(T) = E sup |<g,x>|`.
//!
//! Sample `i` uses the Gaussian vector drawn from `SeedPath(seed, i, 0)`, so
//! width and complexity estimated with the same seed see the same `g`'s.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles;
use crate::rng::{gaussian_vector, SeedPath};
use crate::stats;
use crate::testsets::{SetKind, TestSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthKind {
    Width,
    Complexity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub kind: WidthKind,
    pub closed_form: bool,
}

/// Per-sample suprema `sup_{x in T} <g_i, x>` (absolute values when `signed`).
pub fn sup_samples(set: &TestSet, samples: usize, seed: u64, signed: bool) -> Result<Vec<f64>> {
    let n = set.dim();
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let g = gaussian_vector(SeedPath::new(seed, i as u64, 0), n);
            set.sup_linear_value(&g, signed)
        })
        .collect()
}

fn estimate(set: &TestSet, samples: usize, seed: u64, kind: WidthKind) -> Result<WidthEstimate> {
    if samples < 2 {
        return Err(Error::param("width estimation needs at least 2 samples"));
    }
    let values = sup_samples(set, samples, seed, kind == WidthKind::Complexity)?;
    Ok(WidthEstimate {
        value: stats::mean(&values),
        stderr: stats::stderr(&values),
        samples,
        kind,
        closed_form: false,
    })
}

pub fn estimate_width(set: &TestSet, samples: usize, seed: u64) -> Result<WidthEstimate> {
    estimate(set, samples, seed, WidthKind::Width)
}

pub fn estimate_complexity(set: &TestSet, samples: usize, seed: u64) -> Result<WidthEstimate> {
    estimate(set, samples, seed, WidthKind::Complexity)
}

/// Exact values where a formula is registered: the complexity of a singleton
/// `{x}` is `||x|| sqrt(2/pi)`; the width of a `d`-dimensional subspace ball
/// is the chi mean with `d` degrees of freedom.
pub fn closed_form_complexity(set: &TestSet) -> Option<WidthEstimate> {
    let exact = |value, kind| WidthEstimate {
        value,
        stderr: 0.0,
        samples: 0,
        kind,
        closed_form: true,
    };
    match set.kind() {
        SetKind::Finite => {
            let pts = set.points()?;
            if pts.len() != 1 {
                return None;
            }
            let norm = pts[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            Some(exact(
                norm * (2.0 / std::f64::consts::PI).sqrt(),
                WidthKind::Complexity,
            ))
        }
        SetKind::SubspaceBall => {
            let d = set.subspace_basis()?.ncols();
            Some(exact(oracles::chi_mean_closed_form(d), WidthKind::Width))
        }
        SetKind::KSparseUnit | SetKind::SphereSample => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{quadrature, QuadratureExpr};
    use crate::testsets::SetSpec;

    fn within(est: &WidthEstimate, target: f64, k: f64) -> bool {
        (est.value - target).abs() <= k * est.stderr
    }

    #[test]
    fn singleton_width_is_zero_mean() {
        let t = TestSet::finite(3, vec![vec![0.3, -1.2, 2.0]]).unwrap();
        let w = estimate_width(&t, 20_000, 5).unwrap();
        assert!(within(&w, 0.0, 3.0), "{w:?}");
    }

    #[test]
    fn symmetric_pair_width_and_complexity() {
        let t = TestSet::finite(1, vec![vec![1.0], vec![-1.0]]).unwrap();
        let w = estimate_width(&t, 100_000, 11).unwrap();
        let c = estimate_complexity(&t, 100_000, 11).unwrap();
        let exact = quadrature(QuadratureExpr::AbsGaussian).value;
        assert!(within(&w, exact, 3.0), "{w:?}");
        assert_eq!(w.value, c.value);
        assert_eq!(w.stderr, c.stderr);
    }

    #[test]
    fn basis_pair_complexity_matches_quadrature() {
        let t = TestSet::build(&SetSpec::Basis { n: 2 }).unwrap();
        let c = estimate_complexity(&t, 100_000, 2).unwrap();
        let exact = quadrature(QuadratureExpr::MaxAbsGaussianPair).value;
        assert!(within(&c, exact, 3.0), "{c:?} vs {exact}");
    }

    #[test]
    fn scaling_is_exact_under_shared_seed() {
        let t = TestSet::build(&SetSpec::PairDifferences { n: 6 }).unwrap();
        let t2 = t.scaled(2.0).unwrap();
        let a = estimate_width(&t, 1000, 9).unwrap();
        let b = estimate_width(&t2, 1000, 9).unwrap();
        assert_eq!(b.value, 2.0 * a.value);
    }

    #[test]
    fn too_few_samples() {
        let t = TestSet::build(&SetSpec::Basis { n: 2 }).unwrap();
        assert!(estimate_width(&t, 1, 0).is_err());
    }

    #[test]
    fn closed_forms() {
        let t = TestSet::finite(2, vec![vec![0.0, 2.0]]).unwrap();
        let c = closed_form_complexity(&t).unwrap();
        let quad = quadrature(QuadratureExpr::AbsGaussian).value;
        assert!((c.value - 2.0 * quad).abs() < 1e-9);
        assert!(c.closed_form && c.stderr == 0.0);

        let sub = TestSet::build(&SetSpec::Subspace { n: 4, d: 1, seed: 0 }).unwrap();
        let w = closed_form_complexity(&sub).unwrap();
        assert!((w.value - quad).abs() < 1e-9);

        let three = TestSet::finite(2, vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.1]]).unwrap();
        assert!(closed_form_complexity(&three).is_none());
    }

    #[test]
    fn subspace_width_matches_chi_mean() {
        let sub = TestSet::build(&SetSpec::Subspace { n: 10, d: 3, seed: 4 }).unwrap();
        let w = estimate_width(&sub, 40_000, 1).unwrap();
        let exact = closed_form_complexity(&sub).unwrap().value;
        assert!(within(&w, exact, 4.0), "{w:?} vs {exact}");
    }
}
