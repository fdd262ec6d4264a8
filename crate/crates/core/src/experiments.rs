//! End-to-end sweeps over `(m, s, n)` grids and report emission.
//!
//! Every cell derives its randomness from `mix_seed(seed, cell)`, cells and
//! trials run on the rayon pool, and results are collected in grid order, so
//! a report depends only on its configuration.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::{estimate_complexity, estimate_width};
use crate::ensembles::{
    column_norms, normalize_columns_conditional, sample_matrix, sample_support, Column, ColumnMatrix,
    EnsembleSpec, ImageBuffer, Variant,
};
use crate::error::{Error, Result};
use crate::isometry::{empirical_psi2, trial_distortions, DistortionReport, Psi2Method};
use crate::oracles::{
    any_collision_probability, binom_sqrt_deviation, choose_n_for_lower_bound, scalar_psi2_closed_form,
    ScalarLaw,
};
use crate::rng::{mix_seed, SeedPath};
use crate::stats;
use crate::testsets::{SetSpec, TestSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Divergence,
    LowerBoundExactSparse,
    Normalization,
    Psi2Scaling,
    TailProfile,
    ConjectureDiag,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Divergence,
        ExperimentKind::LowerBoundExactSparse,
        ExperimentKind::Normalization,
        ExperimentKind::Psi2Scaling,
        ExperimentKind::TailProfile,
        ExperimentKind::ConjectureDiag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Divergence => "divergence",
            ExperimentKind::LowerBoundExactSparse => "lower_bound_exact_sparse",
            ExperimentKind::Normalization => "normalization",
            ExperimentKind::Psi2Scaling => "psi2_scaling",
            ExperimentKind::TailProfile => "tail_profile",
            ExperimentKind::ConjectureDiag => "conjecture_diag",
        }
    }

    /// Which of the `m`, `s`, `n` grid axes the kind reads.
    fn axes(self, ensemble: Variant) -> (bool, bool, bool) {
        match self {
            ExperimentKind::Divergence | ExperimentKind::Normalization => (true, true, true),
            ExperimentKind::LowerBoundExactSparse => (true, true, false),
            ExperimentKind::Psi2Scaling => (true, ensemble.is_sparse(), false),
            ExperimentKind::TailProfile | ExperimentKind::ConjectureDiag => {
                (true, ensemble.is_sparse(), true)
            }
        }
    }

    fn default_ensemble(self) -> Variant {
        match self {
            ExperimentKind::TailProfile => Variant::DenseGaussian,
            ExperimentKind::LowerBoundExactSparse => Variant::ExactSparse,
            _ => Variant::ApproxSparse,
        }
    }

    /// Statistic columns, in CSV order.
    pub fn stat_columns(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::Divergence => &[],
            ExperimentKind::LowerBoundExactSparse => &[
                "columns",
                "collision_freq",
                "collision_stderr",
                "gamma",
                "gamma_stderr",
                "ratio",
            ],
            ExperimentKind::Normalization => &["paired_diff_mean", "paired_diff_stderr", "clean_fraction"],
            ExperimentKind::Psi2Scaling => &["psi2_mgf_root", "psi2_moment_sup", "closed_form", "ratio"],
            ExperimentKind::TailProfile => &[
                "fitted_a",
                "width",
                "width_stderr",
                "rad",
                "exceed_u1",
                "exceed_u2",
                "exceed_u3",
                "bound_u1",
                "bound_u2",
                "bound_u3",
            ],
            ExperimentKind::ConjectureDiag => &["diag_mean", "diag_stderr", "gamma", "gamma_stderr"],
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == text)
            .ok_or_else(|| Error::UnknownDescriptor(format!("experiment kind `{text}`")))
    }
}

/// Arms of the divergence sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceArm {
    /// ApproxSparse on `{e_1}`.
    ApproxSingleton,
    /// ExactSparse on pair differences.
    ExactPairs,
    /// ColumnNormalized(ApproxSparse) on pair differences.
    NormalizedPairs,
    /// Square `m x m` matrix with exactly `s` nonzeros per row, on `{e_1}`.
    RowExactControl,
}

impl DivergenceArm {
    pub fn name(self) -> &'static str {
        match self {
            DivergenceArm::ApproxSingleton => "approx_singleton",
            DivergenceArm::ExactPairs => "exact_pairs",
            DivergenceArm::NormalizedPairs => "normalized_pairs",
            DivergenceArm::RowExactControl => "row_exact_control",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

fn default_divergence_arms() -> Vec<DivergenceArm> {
    vec![
        DivergenceArm::ApproxSingleton,
        DivergenceArm::ExactPairs,
        DivergenceArm::NormalizedPairs,
    ]
}

fn default_mc_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub m: Vec<usize>,
    #[serde(default)]
    pub s: Vec<usize>,
    #[serde(default)]
    pub n: Vec<usize>,
    pub trials: usize,
    /// Monte Carlo samples for width / complexity estimates.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub retain_trials: bool,
    /// Base ensemble where the kind allows a choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<Variant>,
    /// Divergence arms; defaults to all but the row control.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<Vec<DivergenceArm>>,
}

/// Largest column count the lower-bound sweep will sample.
pub const LOWER_BOUND_MAX_COLUMNS: u64 = 2_000_000;

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, m: Vec<usize>, s: Vec<usize>, n: Vec<usize>, trials: usize, seed: u64) -> Self {
        ExperimentConfig {
            kind,
            m,
            s,
            n,
            trials,
            mc_samples: default_mc_samples(),
            seed,
            output: None,
            retain_trials: false,
            ensemble: None,
            arms: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ensemble(&self) -> Variant {
        self.ensemble.unwrap_or(self.kind.default_ensemble())
    }

    pub fn divergence_arms(&self) -> Vec<DivergenceArm> {
        self.arms.clone().unwrap_or_else(default_divergence_arms)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        let ens = self.ensemble();
        let allowed = match self.kind {
            ExperimentKind::Divergence | ExperimentKind::LowerBoundExactSparse => self.ensemble.is_none(),
            ExperimentKind::Psi2Scaling => matches!(
                ens,
                Variant::ApproxSparse | Variant::ExactSparse | Variant::DenseRademacherScaled
            ),
            _ => ens != Variant::ColumnNormalized,
        };
        if !allowed {
            return bad(format!("ensemble {} is not available for {}", ens.name(), self.kind.name()));
        }
        if self.arms.is_some() && self.kind != ExperimentKind::Divergence {
            return bad("arms only apply to divergence".into());
        }
        if self.arms.as_ref().is_some_and(|a| a.is_empty()) {
            return bad("arms must not be empty".into());
        }
        let (use_m, use_s, use_n) = self.kind.axes(ens);
        for (name, used, values) in [("m", use_m, &self.m), ("s", use_s, &self.s), ("n", use_n, &self.n)] {
            if used && values.is_empty() {
                return bad(format!("{} needs a nonempty `{name}` list", self.kind.name()));
            }
            if !used && !values.is_empty() {
                return bad(format!("`{name}` is not used by {}", self.kind.name()));
            }
            if values.contains(&0) {
                return bad(format!("`{name}` values must be positive"));
            }
        }
        for &m in &self.m {
            for &s in &self.s {
                if s > m {
                    return bad(format!("s = {s} exceeds m = {m}"));
                }
            }
        }
        if self.kind == ExperimentKind::LowerBoundExactSparse
            && (self.s.iter().any(|&s| s > 2) || self.m.iter().any(|&m| m > 8))
        {
            return bad("lower_bound_exact_sparse is limited to s <= 2 and m <= 8".into());
        }
        let needs_width = matches!(
            self.kind,
            ExperimentKind::LowerBoundExactSparse | ExperimentKind::TailProfile | ExperimentKind::ConjectureDiag
        );
        if needs_width && self.mc_samples < 2 {
            return bad("mc_samples must be at least 2".into());
        }
        let needs_pairs = matches!(
            self.kind,
            ExperimentKind::Normalization | ExperimentKind::TailProfile | ExperimentKind::ConjectureDiag
        ) || (self.kind == ExperimentKind::Divergence
            && self
                .divergence_arms()
                .iter()
                .any(|a| matches!(a, DivergenceArm::ExactPairs | DivergenceArm::NormalizedPairs)));
        if needs_pairs && self.n.iter().any(|&n| n < 2) {
            return bad("pair_differences needs n >= 2".into());
        }
        if self.kind == ExperimentKind::Psi2Scaling && self.trials < crate::isometry::MGF_ROOT_MIN_SAMPLES {
            return bad(format!(
                "psi2_scaling uses trials as the sample count and needs at least {}",
                crate::isometry::MGF_ROOT_MIN_SAMPLES
            ));
        }
        Ok(())
    }

    /// Grid cells in report order: `s` outermost, then `n`, then `m`.
    /// Unused axes are reported as 0.
    pub fn cells(&self) -> Vec<Cell> {
        let axis = |v: &Vec<usize>| if v.is_empty() { vec![0] } else { v.clone() };
        let mut out = Vec::new();
        for &s in &axis(&self.s) {
            for &n in &axis(&self.n) {
                for &m in &axis(&self.m) {
                    out.push(Cell { index: out.len(), m, s, n });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub index: usize,
    pub m: usize,
    pub s: usize,
    pub n: usize,
}

impl Cell {
    pub fn seed(&self, master: u64) -> u64 {
        mix_seed(master, self.index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub report: DistortionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: usize,
    pub m: usize,
    pub s: usize,
    pub n: usize,
    pub arms: Vec<ArmSummary>,
    pub stats: BTreeMap<String, f64>,
    pub oracle: Option<f64>,
}

impl ReportRow {
    pub fn arm(&self, name: &str) -> Option<&DistortionReport> {
        self.arms.iter().find(|a| a.name == name).map(|a| &a.report)
    }

    pub fn stat(&self, name: &str) -> Option<f64> {
        self.stats.get(name).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub provenance: Provenance,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let rows = config
        .cells()
        .into_par_iter()
        .map(|cell| {
            run_cell(config, cell).map_err(|e| Error::Cell {
                cell: cell.index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        config: config.clone(),
        rows,
        provenance: Provenance {
            version: format!("subemb {}", env!("CARGO_PKG_VERSION")),
            seed: config.seed,
        },
    })
}

fn run_cell(cfg: &ExperimentConfig, cell: Cell) -> Result<ReportRow> {
    let mut row = ReportRow {
        cell: cell.index,
        m: cell.m,
        s: cell.s,
        n: cell.n,
        arms: Vec::new(),
        stats: BTreeMap::new(),
        oracle: None,
    };
    let seed = cell.seed(cfg.seed);
    match cfg.kind {
        ExperimentKind::Divergence => divergence_cell(cfg, cell, seed, &mut row)?,
        ExperimentKind::LowerBoundExactSparse => lower_bound_cell(cfg, cell, seed, &mut row)?,
        ExperimentKind::Normalization => normalization_cell(cfg, cell, seed, &mut row)?,
        ExperimentKind::Psi2Scaling => psi2_cell(cfg, cell, seed, &mut row)?,
        ExperimentKind::TailProfile => tail_cell(cfg, cell, seed, &mut row)?,
        ExperimentKind::ConjectureDiag => conjecture_cell(cfg, cell, seed, &mut row)?,
    }
    Ok(row)
}

fn base_spec(variant: Variant, m: usize, n: usize, s: usize) -> EnsembleSpec {
    match variant {
        Variant::ApproxSparse => EnsembleSpec::approx_sparse(m, n, s),
        Variant::ExactSparse => EnsembleSpec::exact_sparse(m, n, s),
        Variant::DenseGaussian => EnsembleSpec::dense_gaussian(m, n),
        Variant::DenseRademacherScaled => EnsembleSpec::dense_rademacher(m, n),
        Variant::ColumnNormalized => unreachable!("rejected by validate"),
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    name: &str,
    spec: &EnsembleSpec,
    set: &TestSet,
    lambda: f64,
    values: Vec<f64>,
    lower_bound: bool,
) -> Result<ArmSummary> {
    let report = DistortionReport::from_values(spec.clone(), set.id(), lambda, values, lower_bound)?;
    Ok(ArmSummary {
        name: name.to_string(),
        report: if cfg.retain_trials { report } else { report.without_trials() },
    })
}

fn arm_trials(
    cfg: &ExperimentConfig,
    name: &str,
    spec: &EnsembleSpec,
    set: &TestSet,
    lambda: f64,
    seed: u64,
) -> Result<ArmSummary> {
    let (values, lower) = trial_distortions(spec, set, lambda, cfg.trials, seed)?;
    summarize(cfg, name, spec, set, lambda, values, lower)
}

/// Square matrix whose rows each carry exactly `s` nonzero signs.
pub fn sample_row_exact_sparse(m: usize, s: usize, seed: SeedPath) -> Result<ColumnMatrix> {
    use rand::Rng;
    if s == 0 || s > m {
        return Err(Error::param(format!("row sparsity needs 1 <= s <= m, got s = {s}, m = {m}")));
    }
    let mut cols: Vec<Vec<(u32, i8)>> = vec![Vec::new(); m];
    for r in 0..m {
        let mut rng = seed.with_column(r as u64).rng();
        for j in sample_support(&mut rng, m, s) {
            let sign = if rng.gen::<bool>() { 1 } else { -1 };
            cols[j as usize].push((r as u32, sign));
        }
    }
    ColumnMatrix::from_columns(m, cols.into_iter().map(Column::sparse).collect())
}

fn divergence_cell(cfg: &ExperimentConfig, cell: Cell, seed: u64, row: &mut ReportRow) -> Result<()> {
    let Cell { m, s, n, .. } = cell;
    let lambda = (s as f64).sqrt();
    for arm in cfg.divergence_arms() {
        let arm_seed = mix_seed(seed, arm.tag());
        let summary = match arm {
            DivergenceArm::ApproxSingleton => {
                let set = TestSet::build(&SetSpec::Singleton { n: 1 })?;
                arm_trials(cfg, arm.name(), &EnsembleSpec::approx_sparse(m, 1, s), &set, lambda, arm_seed)?
            }
            DivergenceArm::ExactPairs => {
                let set = TestSet::build(&SetSpec::PairDifferences { n })?;
                arm_trials(cfg, arm.name(), &EnsembleSpec::exact_sparse(m, n, s), &set, lambda, arm_seed)?
            }
            DivergenceArm::NormalizedPairs => {
                let set = TestSet::build(&SetSpec::PairDifferences { n })?;
                let spec = EnsembleSpec::column_normalized(EnsembleSpec::approx_sparse(m, n, s), lambda);
                arm_trials(cfg, arm.name(), &spec, &set, lambda, arm_seed)?
            }
            DivergenceArm::RowExactControl => {
                let set = TestSet::build(&SetSpec::Singleton { n: m })?;
                let values = (0..cfg.trials)
                    .into_par_iter()
                    .map(|t| {
                        let a = sample_row_exact_sparse(m, s, SeedPath::new(arm_seed, t as u64, 0))?;
                        Ok(set.distortion_sup(&a, lambda)?.delta)
                    })
                    .collect::<Result<Vec<_>>>()?;
                // labelled by the column law it induces on e_1
                let spec = EnsembleSpec::exact_sparse(m, m, s);
                summarize(cfg, arm.name(), &spec, &set, lambda, values, false)?
            }
        };
        row.arms.push(summary);
    }
    row.oracle = Some(binom_sqrt_deviation(m, s)?.value);
    Ok(())
}

fn lower_bound_cell(cfg: &ExperimentConfig, cell: Cell, seed: u64, row: &mut ReportRow) -> Result<()> {
    let Cell { m, s, .. } = cell;
    let columns = choose_n_for_lower_bound(m, s)?;
    if columns > LOWER_BOUND_MAX_COLUMNS {
        return Err(Error::Budget(format!(
            "(m, s) = ({m}, {s}) needs {columns} columns, above the cap {LOWER_BOUND_MAX_COLUMNS}"
        )));
    }
    let n = columns as usize;
    row.n = n;
    let spec = EnsembleSpec::exact_sparse(m, n, s);
    let set = TestSet::build(&SetSpec::Difference { n })?;
    let lambda = (s as f64).sqrt();
    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let a = sample_matrix(&spec, SeedPath::new(seed, t as u64, 0))?;
            let first = a.column(0);
            let hit = a.columns()[1..].iter().any(|c| c == first);
            Ok((set.distortion_sup(&a, lambda)?.delta, if hit { 1.0 } else { 0.0 }))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (deltas, hits): (Vec<f64>, Vec<f64>) = per_trial.into_iter().unzip();
    let gamma = estimate_complexity(&set, cfg.mc_samples, mix_seed(seed, WIDTH_TAG))?;
    let arm = summarize(cfg, "exact_difference", &spec, &set, lambda, deltas, false)?;
    let scale = (2.0 * m as f64 / s as f64).ln().sqrt();
    row.stats.insert("columns".into(), columns as f64);
    row.stats.insert("collision_freq".into(), stats::mean(&hits));
    row.stats.insert("collision_stderr".into(), stats::stderr(&hits));
    row.stats.insert("gamma".into(), gamma.value);
    row.stats.insert("gamma_stderr".into(), gamma.stderr);
    row.stats.insert("ratio".into(), arm.report.mean / (gamma.value * scale));
    row.arms.push(arm);
    row.oracle = Some(any_collision_probability(m, s, columns)?);
    Ok(())
}

const WIDTH_TAG: u64 = 0x0057_6964_7468;

fn normalization_cell(cfg: &ExperimentConfig, cell: Cell, seed: u64, row: &mut ReportRow) -> Result<()> {
    let Cell { m, s, n, .. } = cell;
    let base = base_spec(cfg.ensemble(), m, n, s);
    let lambda = base.default_lambda();
    let normalized = EnsembleSpec::column_normalized(base.clone(), lambda);
    let set = TestSet::build(&SetSpec::PairDifferences { n })?;
    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            // both arms read the same per-column streams
            let path = SeedPath::new(seed, t as u64, 0);
            let a = sample_matrix(&base, path)?;
            let (b, rejected) = normalize_columns_conditional(&normalized, path)?;
            let clean = rejected.iter().filter(|&&r| r == 0).count();
            Ok((
                set.distortion_sup(&a, lambda)?.delta,
                set.distortion_sup(&b, lambda)?.delta,
                clean,
            ))
        })
        .collect::<Result<Vec<(f64, f64, usize)>>>()?;
    let raw: Vec<f64> = per_trial.iter().map(|t| t.0).collect();
    let norm: Vec<f64> = per_trial.iter().map(|t| t.1).collect();
    let diff: Vec<f64> = per_trial.iter().map(|t| t.0 - t.1).collect();
    let clean: usize = per_trial.iter().map(|t| t.2).sum();
    row.stats.insert("paired_diff_mean".into(), stats::mean(&diff));
    row.stats.insert("paired_diff_stderr".into(), stats::stderr(&diff));
    row.stats
        .insert("clean_fraction".into(), clean as f64 / (n * cfg.trials) as f64);
    row.arms.push(summarize(cfg, "unnormalized", &base, &set, lambda, raw, false)?);
    row.arms.push(summarize(cfg, "normalized", &normalized, &set, lambda, norm, false)?);
    Ok(())
}

/// `<A_1, u>` for `u` the normalized all-ones vector.
fn ones_projection(column: &Column, m: usize) -> f64 {
    let sum = match column {
        Column::Sparse { entries, scale } => scale * entries.iter().map(|&(_, sg)| f64::from(sg)).sum::<f64>(),
        Column::Dense(v) => stats::pairwise_sum(v),
    };
    sum / (m as f64).sqrt()
}

fn psi2_cell(cfg: &ExperimentConfig, cell: Cell, seed: u64, row: &mut ReportRow) -> Result<()> {
    let Cell { m, s, .. } = cell;
    let variant = cfg.ensemble();
    let spec = base_spec(variant, m, 1, s);
    let samples = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let a = sample_matrix(&spec, SeedPath::new(seed, t as u64, 0))?;
            Ok(ones_projection(a.column(0), m))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mgf = empirical_psi2(&samples, Psi2Method::MgfRoot)?.value;
    let moments = empirical_psi2(&samples, Psi2Method::MomentSup)?.value;
    let law = if variant.is_sparse() {
        ScalarLaw::SparseSign { m, s }
    } else {
        ScalarLaw::Rademacher
    };
    let closed = scalar_psi2_closed_form(law)?.value;
    row.stats.insert("psi2_mgf_root".into(), mgf);
    row.stats.insert("psi2_moment_sup".into(), moments);
    row.stats.insert("closed_form".into(), closed);
    row.stats.insert("ratio".into(), mgf / closed);
    row.oracle = Some(closed);
    Ok(())
}

/// Levels `u` at which the tail profile is fitted.
pub const TAIL_FIT_LEVELS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Least-squares `a` for `q_u ~ a (width + u rad)`, where `q_u` is the
/// empirical quantile of `deltas` at level `1 - exp(-u^2)`.
pub fn fit_tail_constant(deltas: &[f64], width: f64, rad: f64, levels: &[f64]) -> f64 {
    let sorted = stats::sorted(deltas);
    let (mut num, mut den) = (0.0, 0.0);
    for &u in levels {
        let q = stats::nearest_rank(&sorted, 1.0 - (-u * u).exp());
        let f = width + u * rad;
        num += q * f;
        den += f * f;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn tail_cell(cfg: &ExperimentConfig, cell: Cell, seed: u64, row: &mut ReportRow) -> Result<()> {
    let Cell { m, s, n, .. } = cell;
    let spec = base_spec(cfg.ensemble(), m, n, s);
    let lambda = spec.default_lambda();
    let set = TestSet::build(&SetSpec::PairDifferences { n })?;
    let (deltas, _) = trial_distortions(&spec, &set, lambda, cfg.trials, seed)?;
    let width = estimate_width(&set, cfg.mc_samples, mix_seed(seed, WIDTH_TAG))?;
    let rad = set.rad();
    let a = fit_tail_constant(&deltas, width.value, rad, &TAIL_FIT_LEVELS);
    row.stats.insert("fitted_a".into(), a);
    row.stats.insert("width".into(), width.value);
    row.stats.insert("width_stderr".into(), width.stderr);
    row.stats.insert("rad".into(), rad);
    for u in 1..=3 {
        let level = a * (width.value + u as f64 * rad);
        let exceed = deltas.iter().filter(|&&d| d > level).count() as f64 / deltas.len() as f64;
        row.stats.insert(format!("exceed_u{u}"), exceed);
        row.stats.insert(format!("bound_u{u}"), 3.0 * (-((u * u) as f64)).exp());
    }
    row.arms.push(summarize(cfg, "dense", &spec, &set, lambda, deltas, false)?);
    Ok(())
}

/// `sup_{x in T} | ||Ax|| - ||Dx|| |` with `D` the diagonal of column norms.
pub fn diagonal_deviation(a: &ColumnMatrix, set: &TestSet) -> Result<f64> {
    let points = set
        .points()
        .ok_or_else(|| Error::param("diagonal deviation needs a finite set"))?;
    let norms = column_norms(a);
    let supports = set.supports();
    let mut buf = ImageBuffer::new(a.rows());
    let mut best = 0.0f64;
    for (k, x) in points.iter().enumerate() {
        let support = supports.map(|s| s[k].as_slice());
        let ax = buf.norm(a, x, support)?;
        let dx = x
            .iter()
            .zip(&norms)
            .map(|(xi, c)| (xi * c) * (xi * c))
            .sum::<f64>()
            .sqrt();
        best = best.max((ax - dx).abs());
    }
    Ok(best)
}

fn conjecture_cell(cfg: &ExperimentConfig, cell: Cell, seed: u64, row: &mut ReportRow) -> Result<()> {
    let Cell { m, s, n, .. } = cell;
    let spec = base_spec(cfg.ensemble(), m, n, s);
    let lambda = spec.default_lambda();
    let set = TestSet::build(&SetSpec::PairDifferences { n })?;
    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let a = sample_matrix(&spec, SeedPath::new(seed, t as u64, 0))?;
            Ok((set.distortion_sup(&a, lambda)?.delta, diagonal_deviation(&a, &set)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (deltas, diag): (Vec<f64>, Vec<f64>) = per_trial.into_iter().unzip();
    let gamma = estimate_complexity(&set, cfg.mc_samples, mix_seed(seed, WIDTH_TAG))?;
    row.stats.insert("diag_mean".into(), stats::mean(&diag));
    row.stats.insert("diag_stderr".into(), stats::stderr(&diag));
    row.stats.insert("gamma".into(), gamma.value);
    row.stats.insert("gamma_stderr".into(), gamma.stderr);
    row.arms.push(summarize(cfg, "distortion", &spec, &set, lambda, deltas, false)?);
    Ok(())
}

// ---- report emission ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// From a file extension; anything but `.csv` is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        match text {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::UnknownDescriptor(format!("report format `{text}`"))),
        }
    }
}

/// Per-arm CSV fields, appended to the arm name.
pub const ARM_FIELDS: [&str; 5] = ["mean", "stderr", "q50", "q90", "q99"];

/// Arm names for the kind, in CSV order.
pub fn arm_names(config: &ExperimentConfig) -> Vec<&'static str> {
    match config.kind {
        ExperimentKind::Divergence => config.divergence_arms().into_iter().map(|a| a.name()).collect(),
        ExperimentKind::LowerBoundExactSparse => vec!["exact_difference"],
        ExperimentKind::Normalization => vec!["unnormalized", "normalized"],
        ExperimentKind::Psi2Scaling => vec![],
        ExperimentKind::TailProfile => vec!["dense"],
        ExperimentKind::ConjectureDiag => vec!["distortion"],
    }
}

/// CSV header: `kind, cell, m, s, n`, then `<arm>_<field>` for each arm, then
/// the kind's statistics, then `oracle`.
pub fn csv_header(config: &ExperimentConfig) -> Vec<String> {
    let mut h: Vec<String> = ["kind", "cell", "m", "s", "n"].iter().map(|s| s.to_string()).collect();
    for arm in arm_names(config) {
        h.extend(ARM_FIELDS.iter().map(|f| format!("{arm}_{f}")));
    }
    h.extend(config.kind.stat_columns().iter().map(|s| s.to_string()));
    h.push("oracle".into());
    h
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(&report.config))?;
    let arms = arm_names(&report.config);
    for row in &report.rows {
        let mut rec = vec![
            report.config.kind.name().to_string(),
            row.cell.to_string(),
            row.m.to_string(),
            row.s.to_string(),
            row.n.to_string(),
        ];
        for name in &arms {
            match row.arm(name) {
                Some(r) => rec.extend([r.mean, r.stderr, r.q50, r.q90, r.q99].map(fmt_f64)),
                None => rec.extend(ARM_FIELDS.iter().map(|_| String::new())),
            }
        }
        for stat in report.config.kind.stat_columns() {
            rec.push(row.stat(stat).map(fmt_f64).unwrap_or_default());
        }
        rec.push(row.oracle.map(fmt_f64).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, report)?;
    Ok(())
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Csv => write_csv(report, &mut out)?,
        ReportFormat::Json => {
            write_json(report, &mut out)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_json_report(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Worker count from `SUBEMB_THREADS`; `None` when unset or empty.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("SUBEMB_THREADS") {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::Config(format!("SUBEMB_THREADS must be a positive integer, got `{v}`"))),
            Ok(k) => Ok(Some(k)),
        },
        Err(_) => Ok(None),
    }
}

/// A rayon pool with `threads` workers, or hardware parallelism when `None`.
pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_is_a_config_error() {
        let cfg = ExperimentConfig::new(ExperimentKind::Divergence, vec![50], vec![5], vec![4], 0, 1);
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_axes() {
        let ok = r#"{"kind":"divergence","m":[50],"s":[5],"n":[4],"trials":10}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
        let extra = r#"{"kind":"divergence","m":[50],"s":[5],"n":[4],"trials":10,"bogus":1}"#;
        assert!(matches!(ExperimentConfig::from_json(extra), Err(Error::Config(_))));
        let empty = r#"{"kind":"divergence","m":[],"s":[5],"n":[4],"trials":10}"#;
        assert!(ExperimentConfig::from_json(empty).is_err());
        let unused = r#"{"kind":"psi2_scaling","m":[64],"s":[4],"n":[3],"trials":200}"#;
        assert!(ExperimentConfig::from_json(unused).is_err());
        let big = r#"{"kind":"lower_bound_exact_sparse","m":[16],"s":[1],"trials":10}"#;
        assert!(ExperimentConfig::from_json(big).is_err());
    }

    #[test]
    fn cells_follow_grid_order() {
        let cfg = ExperimentConfig::new(ExperimentKind::Divergence, vec![10, 20], vec![1, 2], vec![3], 1, 0);
        let cells: Vec<(usize, usize)> = cfg.cells().iter().map(|c| (c.m, c.s)).collect();
        assert_eq!(cells, vec![(10, 1), (20, 1), (10, 2), (20, 2)]);
    }

    #[test]
    fn divergence_singleton_arm_matches_oracle() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::Divergence, vec![50], vec![5], vec![4], 20_000, 17);
        cfg.arms = Some(vec![DivergenceArm::ApproxSingleton]);
        let report = run_experiment(&cfg).unwrap();
        let row = &report.rows[0];
        let arm = row.arm("approx_singleton").unwrap();
        let oracle = row.oracle.unwrap();
        assert!((arm.mean - oracle).abs() <= 3.0 * arm.stderr, "{} vs {oracle}", arm.mean);
    }

    #[test]
    fn row_control_matches_column_law_on_e1() {
        // the first column of a row-exact matrix has Binom(m, s/m) nonzeros
        let mut cfg = ExperimentConfig::new(ExperimentKind::Divergence, vec![40], vec![4], vec![2], 6000, 3);
        cfg.arms = Some(vec![DivergenceArm::RowExactControl]);
        let report = run_experiment(&cfg).unwrap();
        let row = &report.rows[0];
        let arm = row.arm("row_exact_control").unwrap();
        let oracle = row.oracle.unwrap();
        assert!((arm.mean - oracle).abs() <= 4.0 * arm.stderr, "{} vs {oracle}", arm.mean);
    }

    #[test]
    fn row_exact_rows_have_s_entries() {
        let a = sample_row_exact_sparse(12, 3, SeedPath::new(1, 0, 0)).unwrap();
        let mut per_row = [0; 12];
        for c in a.columns() {
            if let Column::Sparse { entries, .. } = c {
                for &(r, _) in entries {
                    per_row[r as usize] += 1;
                }
            }
        }
        assert!(per_row.iter().all(|&k| k == 3));
    }

    #[test]
    fn normalization_arms_share_base_streams() {
        let base = EnsembleSpec::approx_sparse(30, 6, 3);
        let normalized = EnsembleSpec::column_normalized(base.clone(), 3f64.sqrt());
        let path = SeedPath::new(mix_seed(5, 0), 7, 0);
        let a = sample_matrix(&base, path).unwrap();
        let (b, rejected) = normalize_columns_conditional(&normalized, path).unwrap();
        let mut shared = 0;
        for j in 0..6 {
            if rejected[j] == 0 {
                let expect = crate::ensembles::rescale_column(a.column(j).clone(), 3f64.sqrt()).unwrap();
                assert_eq!(b.column(j), &expect);
                shared += 1;
            }
        }
        assert!(shared > 0);
    }

    #[test]
    fn tail_fit_recovers_exact_profile() {
        // deltas whose quantiles at 1 - exp(-u^2) equal 2 (1 + u)
        let levels = [0.5, 1.0];
        let deltas: Vec<f64> = (1..=100000).map(|i| i as f64 / 100000.0).collect();
        let q = |u: f64| stats::nearest_rank(&deltas, 1.0 - (-u * u).exp());
        let a = fit_tail_constant(&deltas, 1.0, 1.0, &levels);
        let num = q(0.5) * 1.5 + q(1.0) * 2.0;
        assert!((a - num / (1.5f64 * 1.5 + 4.0)).abs() < 1e-15);
    }

    #[test]
    fn diagonal_deviation_of_identity_is_zero() {
        let set = TestSet::build(&SetSpec::PairDifferences { n: 4 }).unwrap();
        assert_eq!(diagonal_deviation(&ColumnMatrix::identity(4), &set).unwrap(), 0.0);
    }

    #[test]
    fn lower_bound_budget_error_names_cell() {
        let cfg = ExperimentConfig::new(ExperimentKind::LowerBoundExactSparse, vec![8], vec![2], vec![], 1, 0);
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Cell { cell: 0, .. }), "{err}");
        assert!(matches!(err.root(), Error::Budget(_)));
    }

    #[test]
    fn format_from_path() {
        assert_eq!(ReportFormat::from_path(Path::new("a/b.CSV")), ReportFormat::Csv);
        assert_eq!(ReportFormat::from_path(Path::new("a/b.json")), ReportFormat::Json);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
