//! Distortion trials, increment samples and empirical subgaussian norms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::{sample_matrix, ColumnMatrix, EnsembleSpec, ImageBuffer};
use crate::error::{Error, Result};
use crate::rng::SeedPath;
use crate::stats;
use crate::testsets::TestSet;

/// Summary of `sup_{x in T} | ||Ax|| - lambda ||x|| |` over independent draws of `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub spec: EnsembleSpec,
    pub set_id: String,
    pub lambda: f64,
    pub trials: usize,
    pub mean: f64,
    pub stderr: f64,
    pub min: f64,
    pub max: f64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub lower_bound: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_trial: Option<Vec<f64>>,
}

impl DistortionReport {
    pub fn from_values(
        spec: EnsembleSpec,
        set_id: impl Into<String>,
        lambda: f64,
        values: Vec<f64>,
        lower_bound: bool,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("a distortion report needs at least one trial"));
        }
        let sorted = stats::sorted(&values);
        Ok(DistortionReport {
            spec,
            set_id: set_id.into(),
            lambda,
            trials: values.len(),
            mean: stats::mean(&values),
            stderr: stats::stderr(&values),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            q50: stats::nearest_rank(&sorted, 0.5),
            q90: stats::nearest_rank(&sorted, 0.9),
            q99: stats::nearest_rank(&sorted, 0.99),
            lower_bound,
            per_trial: Some(values),
        })
    }

    pub fn without_trials(mut self) -> Self {
        self.per_trial = None;
        self
    }

    pub const CSV_HEADER: [&'static str; 12] = [
        "ensemble", "set", "lambda", "trials", "mean", "stderr", "min", "max", "q50", "q90", "q99",
        "lower_bound",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.spec.label(),
            self.set_id.clone(),
            format!("{:?}", self.lambda),
            self.trials.to_string(),
            format!("{:?}", self.mean),
            format!("{:?}", self.stderr),
            format!("{:?}", self.min),
            format!("{:?}", self.max),
            format!("{:?}", self.q50),
            format!("{:?}", self.q90),
            format!("{:?}", self.q99),
            self.lower_bound.to_string(),
        ]
    }
}

/// Distortion of each of `trials` independent matrices; trial `t` samples
/// from `SeedPath(seed, t, .)`. Returns the values and whether they are lower
/// bounds.
pub fn trial_distortions(
    spec: &EnsembleSpec,
    set: &TestSet,
    lambda: f64,
    trials: usize,
    seed: u64,
) -> Result<(Vec<f64>, bool)> {
    spec.validate()?;
    if spec.n != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            got: spec.n,
        });
    }
    let out: Vec<(f64, bool)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let a = sample_matrix(spec, SeedPath::new(seed, t as u64, 0))?;
            let d = set.distortion_sup(&a, lambda)?;
            Ok((d.delta, d.lower_bound))
        })
        .collect::<Result<_>>()?;
    let lower = out.iter().any(|(_, lb)| *lb);
    Ok((out.into_iter().map(|(d, _)| d).collect(), lower))
}

pub fn isometry_trials(
    spec: &EnsembleSpec,
    set: &TestSet,
    lambda: f64,
    trials: usize,
    seed: u64,
) -> Result<DistortionReport> {
    if trials == 0 {
        return Err(Error::param("trials must be at least 1"));
    }
    let (values, lower) = trial_distortions(spec, set, lambda, trials, seed)?;
    DistortionReport::from_values(spec.clone(), set.id(), lambda, values, lower)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increment {
    /// `(Z_x - Z_y) / ||x - y||` with `Z_x = ||Ax|| - lambda ||x||`.
    pub ratio: f64,
    /// `(||Ax||^2 - ||Ay||^2) / ||x - y||`.
    pub squared_ratio: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

pub fn increment_sample(a: &ColumnMatrix, x: &[f64], y: &[f64], lambda: f64) -> Result<Increment> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let gap = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    if gap == 0.0 {
        return Err(Error::Degenerate("increment needs x != y".into()));
    }
    let mut buf = ImageBuffer::new(a.rows());
    let ax2 = buf.norm_sq(a, x, None)?;
    let ay2 = buf.norm_sq(a, y, None)?;
    let zx = ax2.sqrt() - lambda * norm(x);
    let zy = ay2.sqrt() - lambda * norm(y);
    Ok(Increment {
        ratio: (zx - zy) / gap,
        squared_ratio: (ax2 - ay2) / gap,
    })
}

/// The off-diagonal expansion `sum_{i != j} <A_i, A_j> u_i v_j / ||v||` with
/// `u = x + y`, `v = x - y`. Equals the squared increment whenever all columns
/// share one norm and `||x|| = ||y||`, since the diagonal part is then
/// `c^2 (||x||^2 - ||y||^2) = 0`.
pub fn squared_ratio_expanded(a: &ColumnMatrix, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != a.cols() || y.len() != a.cols() {
        return Err(Error::DimensionMismatch {
            expected: a.cols(),
            got: x.len().min(y.len()),
        });
    }
    let u: Vec<f64> = x.iter().zip(y).map(|(p, q)| p + q).collect();
    let v: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
    let vn = norm(&v);
    if vn == 0.0 {
        return Err(Error::Degenerate("increment needs x != y".into()));
    }
    let su: Vec<usize> = (0..u.len()).filter(|&i| u[i] != 0.0).collect();
    let sv: Vec<usize> = (0..v.len()).filter(|&j| v[j] != 0.0).collect();
    let mut total = 0.0;
    for &i in &su {
        let mut row = 0.0;
        for &j in &sv {
            if i != j {
                row += a.column_inner(i, j) * v[j];
            }
        }
        total += u[i] * row;
    }
    Ok(total / vn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psi2Method {
    /// Root in `t` of `mean exp(Z^2/t^2) = 2`.
    MgfRoot,
    /// `max_{p = 2,4,...,16} p^{-1/2} (mean |Z|^p)^{1/p}`.
    MomentSup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psi2Fit {
    pub value: f64,
    pub method: Psi2Method,
    pub samples: usize,
}

/// Minimum sample size for the mgf root.
pub const MGF_ROOT_MIN_SAMPLES: usize = 100;
/// Roots above this are reported as overflow.
pub const MGF_ROOT_CEILING: f64 = 1e6;

/// `log(mean exp(z^2 / t^2))`, computed without overflow.
fn log_mean_exp_sq(z: &[f64], t: f64) -> f64 {
    let inv = 1.0 / (t * t);
    let top = z.iter().map(|v| v * v * inv).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v * v * inv - top).exp()).sum();
    top + (sum / z.len() as f64).ln()
}

pub fn empirical_psi2(samples: &[f64], method: Psi2Method) -> Result<Psi2Fit> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("psi2 samples must be finite"));
    }
    if samples.is_empty() {
        return Err(Error::param("psi2 needs samples"));
    }
    let zmax = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let fit = |value| Psi2Fit {
        value,
        method,
        samples: samples.len(),
    };
    match method {
        Psi2Method::MgfRoot => {
            if samples.len() < MGF_ROOT_MIN_SAMPLES {
                return Err(Error::param(format!(
                    "mgf_root needs at least {MGF_ROOT_MIN_SAMPLES} samples, got {}",
                    samples.len()
                )));
            }
            if zmax == 0.0 {
                return Ok(fit(0.0));
            }
            let ln2 = std::f64::consts::LN_2;
            let n = samples.len() as f64;
            // mean >= exp(zmax^2/t^2)/n  and  mean <= exp(zmax^2/t^2)
            let mut lo = zmax / (2.0 * n).ln().sqrt();
            let mut hi = zmax / ln2.sqrt();
            if lo > MGF_ROOT_CEILING {
                return Err(Error::Overflow(format!(
                    "empirical mgf has no root below {MGF_ROOT_CEILING:e}"
                )));
            }
            for _ in 0..200 {
                if hi - lo <= 1e-13 * hi {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if log_mean_exp_sq(samples, mid) > ln2 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            if root > MGF_ROOT_CEILING {
                return Err(Error::Overflow(format!(
                    "empirical mgf has no root below {MGF_ROOT_CEILING:e}"
                )));
            }
            Ok(fit(root))
        }
        Psi2Method::MomentSup => {
            if zmax == 0.0 {
                return Ok(fit(0.0));
            }
            let best = (1..=8)
                .map(|k| {
                    let p = 2 * k;
                    let scaled: Vec<f64> = samples.iter().map(|v| (v.abs() / zmax).powi(p)).collect();
                    let moment = stats::mean(&scaled).powf(1.0 / p as f64) * zmax;
                    moment / (p as f64).sqrt()
                })
                .fold(0.0, f64::max);
            Ok(fit(best))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{binom_sqrt_deviation, scalar_psi2_closed_form, ScalarLaw};
    use crate::testsets::SetSpec;

    #[test]
    fn exact_sparse_singleton_has_zero_distortion() {
        let spec = EnsembleSpec::exact_sparse(30, 1, 4);
        let set = TestSet::build(&SetSpec::Singleton { n: 1 }).unwrap();
        let r = isometry_trials(&spec, &set, 2.0, 500, 1).unwrap();
        assert_eq!((r.mean, r.max), (0.0, 0.0));
    }

    #[test]
    fn single_trial_report() {
        let spec = EnsembleSpec::dense_gaussian(5, 3);
        let set = TestSet::build(&SetSpec::PairDifferences { n: 3 }).unwrap();
        let r = isometry_trials(&spec, &set, 1.0, 1, 42).unwrap();
        assert_eq!(r.min, r.max);
        assert_eq!(r.q50, r.min);
        assert_eq!(r.stderr, 0.0);
        assert_eq!(r.per_trial.as_deref(), Some(&[r.min][..]));
        assert!(isometry_trials(&spec, &set, 1.0, 0, 42).is_err());
    }

    #[test]
    fn approx_sparse_matches_oracle() {
        let (m, s) = (50, 5);
        let spec = EnsembleSpec::approx_sparse(m, 1, s);
        let set = TestSet::build(&SetSpec::Singleton { n: 1 }).unwrap();
        let r = isometry_trials(&spec, &set, (s as f64).sqrt(), 50_000, 3).unwrap();
        let exact = binom_sqrt_deviation(m, s).unwrap().value;
        assert!((r.mean - exact).abs() <= 3.0 * r.stderr, "{} vs {exact}", r.mean);
        assert!(r.min <= r.q50 && r.q50 <= r.q90 && r.q90 <= r.q99 && r.q99 <= r.max);
    }

    #[test]
    fn report_json_round_trip() {
        let spec = EnsembleSpec::exact_sparse(10, 4, 2);
        let set = TestSet::build(&SetSpec::Basis { n: 4 }).unwrap();
        let r = isometry_trials(&spec, &set, 2f64.sqrt(), 20, 8).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: DistortionReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn increments_along_a_ray() {
        let a = sample_matrix(&EnsembleSpec::dense_gaussian(6, 4), SeedPath::new(2, 0, 0)).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let lambda = 1.3;
        let inc = increment_sample(&a, &x, &y, lambda).unwrap();
        let zx = crate::ensembles::image_norm(&a, &x).unwrap() - lambda * norm(&x);
        assert!((inc.ratio + zx / norm(&x)).abs() < 1e-12);
    }

    #[test]
    fn identity_has_zero_increment() {
        let a = ColumnMatrix::identity(3);
        let inc = increment_sample(&a, &[1.0, 2.0, 0.0], &[0.0, -1.0, 4.0], 1.0).unwrap();
        assert!(inc.ratio.abs() < 1e-15);
        assert!(increment_sample(&a, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn squared_process_identity() {
        let spec = EnsembleSpec::exact_sparse(16, 8, 3);
        for t in 0..20 {
            let a = sample_matrix(&spec, SeedPath::new(10, t, 0)).unwrap();
            let mut g = crate::rng::PolarNormal::new(SeedPath::new(11, t, 0).rng());
            let mut unit = || {
                let v = g.vector(8);
                let nv = norm(&v);
                v.into_iter().map(|c| c / nv).collect::<Vec<_>>()
            };
            let (x, y) = (unit(), unit());
            let direct = increment_sample(&a, &x, &y, 3f64.sqrt()).unwrap().squared_ratio;
            let expanded = squared_ratio_expanded(&a, &x, &y).unwrap();
            assert!((direct - expanded).abs() < 1e-10, "{direct} vs {expanded}");
        }
    }

    #[test]
    fn psi2_rademacher_and_zero() {
        let z: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let fit = empirical_psi2(&z, Psi2Method::MgfRoot).unwrap();
        let exact = scalar_psi2_closed_form(ScalarLaw::Rademacher).unwrap().value;
        assert!((fit.value - exact).abs() < 1e-9 * exact);
        assert!((fit.value - 1.20112).abs() < 1e-5);

        let zeros = vec![0.0; 200];
        assert_eq!(empirical_psi2(&zeros, Psi2Method::MgfRoot).unwrap().value, 0.0);
        assert_eq!(empirical_psi2(&zeros, Psi2Method::MomentSup).unwrap().value, 0.0);
        assert!(empirical_psi2(&z[..50], Psi2Method::MgfRoot).is_err());
        assert!(empirical_psi2(&[f64::NAN; 200], Psi2Method::MomentSup).is_err());
    }

    #[test]
    fn psi2_sparse_sign_exact_law() {
        // m=4, s=1: +-1 with probability 1/8 each, 0 with probability 3/4
        let mut z = vec![0.0; 600];
        z.extend(std::iter::repeat_n(1.0, 100));
        z.extend(std::iter::repeat_n(-1.0, 100));
        let fit = empirical_psi2(&z, Psi2Method::MgfRoot).unwrap();
        assert!((fit.value - 1.0 / 5f64.ln().sqrt()).abs() < 1e-9);
        assert!((fit.value - 0.788_248).abs() < 1e-6);
    }

    #[test]
    fn psi2_overflow() {
        let mut z = vec![0.0; 199];
        z.push(1e9);
        assert!(matches!(empirical_psi2(&z, Psi2Method::MgfRoot), Err(Error::Overflow(_))));
    }

    #[test]
    fn psi2_moment_sup_rademacher() {
        let z: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let fit = empirical_psi2(&z, Psi2Method::MomentSup).unwrap();
        assert!((fit.value - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
