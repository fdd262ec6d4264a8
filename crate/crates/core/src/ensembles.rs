//! Random matrix ensembles stored column by column.
//!
//! Sparse columns keep only `(row, sign)` pairs plus a common scale factor, so
//! an exactly `s`-sparse column has Euclidean norm `sqrt(s)` by construction
//! and a normalized approximately sparse column stays sparse.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{PolarNormal, SeedPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// i.i.d. `N(0, 1/m)` entries.
    DenseGaussian,
    /// i.i.d. `+-1/sqrt(m)` entries.
    DenseRademacherScaled,
    /// i.i.d. entries, `+-1` with probability `s/2m` each, else 0.
    ApproxSparse,
    /// Uniform `s`-subset support with i.i.d. uniform signs.
    ExactSparse,
    /// Base ensemble conditioned on a column-norm floor, then rescaled.
    ColumnNormalized,
}

impl Variant {
    pub fn is_sparse(self) -> bool {
        matches!(self, Variant::ApproxSparse | Variant::ExactSparse)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::DenseGaussian => "dense_gaussian",
            Variant::DenseRademacherScaled => "dense_rademacher_scaled",
            Variant::ApproxSparse => "approx_sparse",
            Variant::ExactSparse => "exact_sparse",
            Variant::ColumnNormalized => "column_normalized",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "dense_gaussian" | "gaussian" => Variant::DenseGaussian,
            "dense_rademacher_scaled" | "rademacher" => Variant::DenseRademacherScaled,
            "approx_sparse" => Variant::ApproxSparse,
            "exact_sparse" => Variant::ExactSparse,
            "column_normalized" | "normalized" => Variant::ColumnNormalized,
            _ => return Err(Error::UnknownDescriptor(format!("ensemble variant `{s}`"))),
        })
    }
}

fn default_min_norm_fraction() -> f64 {
    0.5
}

fn default_max_resamples() -> u32 {
    1000
}

/// Declarative description of a random matrix distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub variant: Variant,
    pub m: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_norm: Option<f64>,
    #[serde(default = "default_min_norm_fraction")]
    pub min_norm_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Box<EnsembleSpec>>,
    #[serde(default = "default_max_resamples")]
    pub max_resamples: u32,
}

impl EnsembleSpec {
    fn plain(variant: Variant, m: usize, n: usize, s: Option<usize>) -> Self {
        EnsembleSpec {
            variant,
            m,
            n,
            s,
            target_norm: None,
            min_norm_fraction: default_min_norm_fraction(),
            base: None,
            max_resamples: default_max_resamples(),
        }
    }

    pub fn dense_gaussian(m: usize, n: usize) -> Self {
        Self::plain(Variant::DenseGaussian, m, n, None)
    }

    pub fn dense_rademacher(m: usize, n: usize) -> Self {
        Self::plain(Variant::DenseRademacherScaled, m, n, None)
    }

    pub fn approx_sparse(m: usize, n: usize, s: usize) -> Self {
        Self::plain(Variant::ApproxSparse, m, n, Some(s))
    }

    pub fn exact_sparse(m: usize, n: usize, s: usize) -> Self {
        Self::plain(Variant::ExactSparse, m, n, Some(s))
    }

    /// Wraps `base`, rescaling every column to `target_norm` after resampling
    /// columns whose norm falls below `min_norm_fraction * target_norm`.
    pub fn column_normalized(base: EnsembleSpec, target_norm: f64) -> Self {
        EnsembleSpec {
            variant: Variant::ColumnNormalized,
            m: base.m,
            n: base.n,
            s: base.s,
            target_norm: Some(target_norm),
            min_norm_fraction: default_min_norm_fraction(),
            base: Some(Box::new(base)),
            max_resamples: default_max_resamples(),
        }
    }

    pub fn with_min_norm_fraction(mut self, theta: f64) -> Self {
        self.min_norm_fraction = theta;
        self
    }

    pub fn with_max_resamples(mut self, cap: u32) -> Self {
        self.max_resamples = cap;
        self
    }

    /// Same distribution with a different column count.
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        if let Some(base) = self.base.take() {
            self.base = Some(Box::new(base.with_n(n)));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::param(format!(
                "dimensions must be positive (m={}, n={})",
                self.m, self.n
            )));
        }
        match self.variant {
            Variant::ApproxSparse | Variant::ExactSparse => {
                let s = self
                    .s
                    .ok_or_else(|| Error::param("sparse ensembles require s"))?;
                if s == 0 || s > self.m {
                    return Err(Error::param(format!(
                        "sparsity must satisfy 1 <= s <= m (s={s}, m={})",
                        self.m
                    )));
                }
            }
            Variant::ColumnNormalized => {
                let base = self
                    .base
                    .as_deref()
                    .ok_or_else(|| Error::param("column_normalized requires a base ensemble"))?;
                if base.variant == Variant::ColumnNormalized {
                    return Err(Error::param("base ensemble cannot itself be column_normalized"));
                }
                base.validate()?;
                if base.m != self.m || base.n != self.n {
                    return Err(Error::param("base ensemble dimensions differ from the wrapper"));
                }
                match self.target_norm {
                    Some(t) if t.is_finite() && t > 0.0 => {}
                    _ => return Err(Error::param("column_normalized requires target_norm > 0")),
                }
                if !(self.min_norm_fraction > 0.0 && self.min_norm_fraction < 1.0) {
                    return Err(Error::param(format!(
                        "min_norm_fraction must lie in (0,1), got {}",
                        self.min_norm_fraction
                    )));
                }
            }
            Variant::DenseGaussian | Variant::DenseRademacherScaled => {}
        }
        Ok(())
    }

    /// The centering `lambda` each ensemble is compared against: 1 for dense,
    /// `sqrt(s)` for sparse, the target norm for normalized ensembles.
    pub fn default_lambda(&self) -> f64 {
        match self.variant {
            Variant::DenseGaussian | Variant::DenseRademacherScaled => 1.0,
            Variant::ApproxSparse | Variant::ExactSparse => (self.s.unwrap_or(1) as f64).sqrt(),
            Variant::ColumnNormalized => self.target_norm.unwrap_or(1.0),
        }
    }

    pub fn label(&self) -> String {
        match (self.variant, self.base.as_deref()) {
            (Variant::ColumnNormalized, Some(b)) => {
                format!("column_normalized({})", b.label())
            }
            (v, _) => match self.s {
                Some(s) if v.is_sparse() => format!("{}(m={},n={},s={})", v.name(), self.m, self.n, s),
                _ => format!("{}(m={},n={})", v.name(), self.m, self.n),
            },
        }
    }
}

/// One column of a [`ColumnMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    /// Entries `scale * sign` at strictly increasing row indices.
    Sparse { entries: Vec<(u32, i8)>, scale: f64 },
    Dense(Vec<f64>),
}

impl Column {
    pub fn sparse(entries: Vec<(u32, i8)>) -> Self {
        Column::Sparse {
            entries,
            scale: 1.0,
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            Column::Sparse { entries, scale } => scale.abs() * (entries.len() as f64).sqrt(),
            Column::Dense(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn nnz(&self) -> usize {
        match self {
            Column::Sparse { entries, .. } => entries.len(),
            Column::Dense(v) => v.iter().filter(|x| **x != 0.0).count(),
        }
    }

    pub fn to_dense(&self, m: usize) -> Vec<f64> {
        match self {
            Column::Sparse { entries, scale } => {
                let mut v = vec![0.0; m];
                for &(i, sg) in entries {
                    v[i as usize] = scale * f64::from(sg);
                }
                v
            }
            Column::Dense(v) => v.clone(),
        }
    }

    pub fn dot(&self, other: &Column) -> f64 {
        match (self, other) {
            (
                Column::Sparse { entries: a, scale: sa },
                Column::Sparse { entries: b, scale: sb },
            ) => {
                let (mut i, mut j, mut acc) = (0, 0, 0i64);
                while i < a.len() && j < b.len() {
                    match a[i].0.cmp(&b[j].0) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            acc += i64::from(a[i].1) * i64::from(b[j].1);
                            i += 1;
                            j += 1;
                        }
                    }
                }
                sa * sb * acc as f64
            }
            (Column::Sparse { entries, scale }, Column::Dense(v))
            | (Column::Dense(v), Column::Sparse { entries, scale }) => {
                scale * entries.iter().map(|&(i, sg)| f64::from(sg) * v[i as usize]).sum::<f64>()
            }
            (Column::Dense(a), Column::Dense(b)) => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }

    pub fn negated(&self) -> Column {
        match self {
            Column::Sparse { entries, scale } => Column::Sparse {
                entries: entries.iter().map(|&(i, sg)| (i, -sg)).collect(),
                scale: *scale,
            },
            Column::Dense(v) => Column::Dense(v.iter().map(|x| -x).collect()),
        }
    }

    fn check(&self, m: usize) -> Result<()> {
        match self {
            Column::Sparse { entries, scale } => {
                if !scale.is_finite() {
                    return Err(Error::param("sparse column scale must be finite"));
                }
                let mut prev: Option<u32> = None;
                for &(i, sg) in entries {
                    if i as usize >= m {
                        return Err(Error::param(format!("row index {i} out of range for m={m}")));
                    }
                    if sg != 1 && sg != -1 {
                        return Err(Error::param(format!("sign must be +-1, got {sg}")));
                    }
                    if prev.is_some_and(|p| p >= i) {
                        return Err(Error::param("sparse row indices must be strictly increasing"));
                    }
                    prev = Some(i);
                }
                Ok(())
            }
            Column::Dense(v) if v.len() != m => Err(Error::DimensionMismatch {
                expected: m,
                got: v.len(),
            }),
            Column::Dense(_) => Ok(()),
        }
    }
}

/// Rescales a column to Euclidean norm `target`. Zero columns are rejected.
pub fn rescale_column(column: Column, target: f64) -> Result<Column> {
    let norm = column.norm();
    if norm == 0.0 {
        return Err(Error::Degenerate("cannot rescale a zero column".into()));
    }
    let factor = target / norm;
    Ok(match column {
        Column::Sparse { entries, scale } => Column::Sparse {
            entries,
            scale: scale * factor,
        },
        Column::Dense(v) if factor == 1.0 => Column::Dense(v),
        Column::Dense(v) => Column::Dense(v.into_iter().map(|x| x * factor).collect()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    Sparse,
    Dense,
    Mixed,
}

/// An `m x n` matrix held as a list of columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMatrix {
    m: usize,
    n: usize,
    columns: Vec<Column>,
}

impl ColumnMatrix {
    pub fn from_columns(m: usize, columns: Vec<Column>) -> Result<Self> {
        for c in &columns {
            c.check(m)?;
        }
        Ok(ColumnMatrix {
            m,
            n: columns.len(),
            columns,
        })
    }

    /// Builds a dense matrix from column vectors.
    pub fn from_dense_columns(m: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_columns(m, columns.into_iter().map(Column::Dense).collect())
    }

    pub fn identity(n: usize) -> Self {
        let columns = (0..n).map(|j| Column::sparse(vec![(j as u32, 1)])).collect();
        ColumnMatrix { m: n, n, columns }
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn storage(&self) -> Storage {
        let sparse = self.columns.iter().filter(|c| matches!(c, Column::Sparse { .. })).count();
        if sparse == self.columns.len() {
            Storage::Sparse
        } else if sparse == 0 {
            Storage::Dense
        } else {
            Storage::Mixed
        }
    }

    /// `<A_i, A_j>`.
    pub fn column_inner(&self, i: usize, j: usize) -> f64 {
        self.columns[i].dot(&self.columns[j])
    }

    /// The matrix with every entry negated; supports are unchanged.
    pub fn negated(&self) -> ColumnMatrix {
        ColumnMatrix {
            m: self.m,
            n: self.n,
            columns: self.columns.iter().map(Column::negated).collect(),
        }
    }

    pub fn dump(&self) -> String {
        self.to_string()
    }
}

/// Column norms `||A_i||_2`, in column order.
pub fn column_norms(a: &ColumnMatrix) -> Vec<f64> {
    a.columns.iter().map(Column::norm).collect()
}

/// `Ax` as a dense vector.
pub fn matvec(a: &ColumnMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.n {
        return Err(Error::DimensionMismatch {
            expected: a.n,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; a.m];
    for (col, &xj) in a.columns.iter().zip(x) {
        if xj == 0.0 {
            continue;
        }
        match col {
            Column::Sparse { entries, scale } => {
                let w = xj * scale;
                for &(i, sg) in entries {
                    out[i as usize] += w * f64::from(sg);
                }
            }
            Column::Dense(v) => {
                for (o, vi) in out.iter_mut().zip(v) {
                    *o += xj * vi;
                }
            }
        }
    }
    Ok(out)
}

/// Scratch space for repeated `||Ax||_2` evaluations.
///
/// Sparse columns only touch the rows they store, so evaluating a vector `x`
/// with few nonzeros costs `O(sum of touched column nnz)` rather than `O(m)`.
#[derive(Debug, Clone)]
pub struct ImageBuffer {
    acc: Vec<f64>,
    touched: Vec<u32>,
    marked: Vec<bool>,
}

impl ImageBuffer {
    pub fn new(m: usize) -> Self {
        ImageBuffer {
            acc: vec![0.0; m],
            touched: Vec::new(),
            marked: vec![false; m],
        }
    }

    /// `||Ax||_2^2`, visiting only the coordinates listed in `support`
    /// (or all of `x` when `None`).
    pub fn norm_sq(&mut self, a: &ColumnMatrix, x: &[f64], support: Option<&[usize]>) -> Result<f64> {
        if x.len() != a.n {
            return Err(Error::DimensionMismatch {
                expected: a.n,
                got: x.len(),
            });
        }
        if self.acc.len() != a.m {
            *self = ImageBuffer::new(a.m);
        }
        let mut dense_used = false;
        let mut visit = |j: usize, this: &mut ImageBuffer| {
            let xj = x[j];
            if xj == 0.0 {
                return;
            }
            match &a.columns[j] {
                Column::Sparse { entries, scale } => {
                    let w = xj * scale;
                    for &(i, sg) in entries {
                        let iu = i as usize;
                        if !this.marked[iu] {
                            this.marked[iu] = true;
                            this.touched.push(i);
                        }
                        this.acc[iu] += w * f64::from(sg);
                    }
                }
                Column::Dense(v) => {
                    dense_used = true;
                    for (o, vi) in this.acc.iter_mut().zip(v) {
                        *o += xj * vi;
                    }
                }
            }
        };
        match support {
            Some(idx) => {
                for &j in idx {
                    visit(j, self);
                }
            }
            None => {
                for j in 0..x.len() {
                    visit(j, self);
                }
            }
        }
        let total = if dense_used {
            let t = self.acc.iter().map(|v| v * v).sum();
            self.acc.iter_mut().for_each(|v| *v = 0.0);
            for &i in &self.touched {
                self.marked[i as usize] = false;
            }
            t
        } else {
            let mut t = 0.0;
            for &i in &self.touched {
                let iu = i as usize;
                t += self.acc[iu] * self.acc[iu];
                self.acc[iu] = 0.0;
                self.marked[iu] = false;
            }
            t
        };
        self.touched.clear();
        Ok(total)
    }

    pub fn norm(&mut self, a: &ColumnMatrix, x: &[f64], support: Option<&[usize]>) -> Result<f64> {
        self.norm_sq(a, x, support).map(f64::sqrt)
    }
}

/// `||Ax||_2`.
pub fn image_norm(a: &ColumnMatrix, x: &[f64]) -> Result<f64> {
    ImageBuffer::new(a.m).norm(a, x, None)
}

/// Approximately sparse column, one uniform draw per entry.
pub fn sample_approx_column_per_entry<R: Rng + ?Sized>(rng: &mut R, m: usize, s: usize) -> Column {
    let p = s as f64 / m as f64;
    let half = 0.5 * p;
    let mut entries = Vec::new();
    for i in 0..m {
        let u: f64 = rng.gen();
        if u < half {
            entries.push((i as u32, 1));
        } else if u < p {
            entries.push((i as u32, -1));
        }
    }
    Column::sparse(entries)
}

/// Approximately sparse column generated by geometric skips between
/// nonzeros; same law as [`sample_approx_column_per_entry`], different stream.
pub fn sample_approx_column_skip<R: Rng + ?Sized>(rng: &mut R, m: usize, s: usize) -> Column {
    let p = s as f64 / m as f64;
    if p >= 1.0 {
        return Column::sparse((0..m as u32).map(|i| (i, if rng.gen::<bool>() { 1 } else { -1 })).collect());
    }
    let log_q = (-p).ln_1p();
    let mut entries = Vec::new();
    let mut pos = 0usize;
    loop {
        let u: f64 = rng.gen();
        let gap = ((-u).ln_1p() / log_q).floor();
        if gap >= (m - pos) as f64 {
            break;
        }
        pos += gap as usize;
        let sign = if rng.gen::<bool>() { 1 } else { -1 };
        entries.push((pos as u32, sign));
        pos += 1;
        if pos >= m {
            break;
        }
    }
    Column::sparse(entries)
}

/// Skip sampling takes over below this density.
pub const SKIP_SAMPLING_DENSITY: f64 = 0.1;

pub fn sample_approx_column<R: Rng + ?Sized>(rng: &mut R, m: usize, s: usize) -> Column {
    if (s as f64) < SKIP_SAMPLING_DENSITY * m as f64 {
        sample_approx_column_skip(rng, m, s)
    } else {
        sample_approx_column_per_entry(rng, m, s)
    }
}

/// Uniformly random `s`-subset of `0..m`, sorted, by a partial Fisher-Yates
/// shuffle over a virtual index pool.
pub fn sample_support<R: Rng + ?Sized>(rng: &mut R, m: usize, s: usize) -> Vec<u32> {
    debug_assert!(s <= m);
    let mut chosen = Vec::with_capacity(s);
    if s > 32 {
        let mut pool: Vec<u32> = (0..m as u32).collect();
        for j in 0..s {
            let r = rng.gen_range(j..m);
            pool.swap(j, r);
            chosen.push(pool[j]);
        }
    } else {
        // positions displaced so far: (position, value currently there)
        let mut moved: Vec<(usize, u32)> = Vec::with_capacity(2 * s);
        let lookup = |moved: &[(usize, u32)], pos: usize| {
            moved.iter().rev().find(|(p, _)| *p == pos).map_or(pos as u32, |&(_, v)| v)
        };
        for j in 0..s {
            let r = rng.gen_range(j..m);
            let at_r = lookup(&moved, r);
            let at_j = lookup(&moved, j);
            moved.push((r, at_j));
            moved.push((j, at_r));
            chosen.push(at_r);
        }
    }
    chosen.sort_unstable();
    chosen
}

pub fn sample_exact_column<R: Rng + ?Sized>(rng: &mut R, m: usize, s: usize) -> Column {
    let support = sample_support(rng, m, s);
    let entries = support
        .into_iter()
        .map(|i| (i, if rng.gen::<bool>() { 1 } else { -1 }))
        .collect();
    Column::sparse(entries)
}

fn sample_base_column<R: Rng>(spec: &EnsembleSpec, rng: &mut R) -> Column {
    let m = spec.m;
    match spec.variant {
        Variant::ApproxSparse => sample_approx_column(rng, m, spec.s.unwrap_or(1)),
        Variant::ExactSparse => sample_exact_column(rng, m, spec.s.unwrap_or(1)),
        Variant::DenseRademacherScaled => {
            let v = 1.0 / (m as f64).sqrt();
            Column::Dense((0..m).map(|_| if rng.gen::<bool>() { v } else { -v }).collect())
        }
        Variant::DenseGaussian => {
            let scale = 1.0 / (m as f64).sqrt();
            let mut normal = PolarNormal::new(rng);
            Column::Dense((0..m).map(|_| scale * normal.sample()).collect())
        }
        Variant::ColumnNormalized => unreachable!("normalized ensembles are sampled via their base"),
    }
}

/// Draws a matrix; column `j` uses the stream `seed.with_column(j)`.
pub fn sample_matrix(spec: &EnsembleSpec, seed: SeedPath) -> Result<ColumnMatrix> {
    spec.validate()?;
    if spec.variant == Variant::ColumnNormalized {
        return normalize_columns_conditional(spec, seed).map(|(a, _)| a);
    }
    let columns = (0..spec.n)
        .map(|j| {
            let mut rng = seed.with_column(j as u64).rng();
            sample_base_column(spec, &mut rng)
        })
        .collect();
    Ok(ColumnMatrix {
        m: spec.m,
        n: spec.n,
        columns,
    })
}

/// Samples a column-normalized matrix and the number of rejected draws per
/// column.
///
/// Column `j` repeatedly draws from the base ensemble on stream
/// `seed.with_column(j)` until its norm reaches `min_norm_fraction *
/// target_norm`, then is rescaled to `target_norm`. The first draw is the same
/// column [`sample_matrix`] would return for the base spec.
pub fn normalize_columns_conditional(spec: &EnsembleSpec, seed: SeedPath) -> Result<(ColumnMatrix, Vec<u32>)> {
    spec.validate()?;
    if spec.variant != Variant::ColumnNormalized {
        return Err(Error::param("normalize_columns_conditional requires a column_normalized spec"));
    }
    let base = spec.base.as_deref().expect("validated");
    let target = spec.target_norm.expect("validated");
    let floor = spec.min_norm_fraction * target;
    let mut columns = Vec::with_capacity(spec.n);
    let mut resamples = Vec::with_capacity(spec.n);
    for j in 0..spec.n {
        let mut rng = seed.with_column(j as u64).rng();
        let mut rejected = 0u32;
        let col = loop {
            let col = sample_base_column(base, &mut rng);
            let norm = col.norm();
            if norm > 0.0 && norm >= floor {
                break col;
            }
            rejected += 1;
            if rejected > spec.max_resamples {
                return Err(Error::ResampleExhausted {
                    column: j,
                    attempts: spec.max_resamples,
                });
            }
        };
        columns.push(rescale_column(col, target)?);
        resamples.push(rejected);
    }
    Ok((
        ColumnMatrix {
            m: spec.m,
            n: spec.n,
            columns,
        },
        resamples,
    ))
}

// Text dump:
//   m n
//   col <j> : <idx>:<sign> ...            sparse, unit scale
//   col <j> scale <v> : <idx>:<sign> ...  sparse, scaled
//   col <j> dense : v0 v1 ...
impl fmt::Display for ColumnMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.m, self.n)?;
        for (j, col) in self.columns.iter().enumerate() {
            match col {
                Column::Sparse { entries, scale } => {
                    if *scale == 1.0 {
                        write!(f, "col {j} :")?;
                    } else {
                        write!(f, "col {j} scale {scale:?} :")?;
                    }
                    for &(i, sg) in entries {
                        write!(f, " {i}:{}", if sg > 0 { "+1" } else { "-1" })?;
                    }
                }
                Column::Dense(v) => {
                    write!(f, "col {j} dense :")?;
                    for x in v {
                        write!(f, " {x:?}")?;
                    }
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for ColumnMatrix {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let perr = |msg: String| Error::Parse(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| perr("empty matrix dump".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr(format!("bad dimension `{t}`"))))
            .collect::<Result<_>>()?;
        let [m, n] = dims[..] else {
            return Err(perr(format!("expected `m n`, got `{header}`")));
        };
        let mut columns = Vec::with_capacity(n);
        for line in lines {
            let (head, body) = line
                .split_once(':')
                .ok_or_else(|| perr(format!("missing `:` in `{line}`")))?;
            let head: Vec<&str> = head.split_whitespace().collect();
            if head.first() != Some(&"col") || head.len() < 2 {
                return Err(perr(format!("expected `col <j>`, got `{line}`")));
            }
            let j: usize = head[1].parse().map_err(|_| perr(format!("bad column index in `{line}`")))?;
            if j != columns.len() {
                return Err(perr(format!("column {j} out of order")));
            }
            let col = match &head[2..] {
                [] | ["scale", _] => {
                    let scale = match &head[2..] {
                        ["scale", v] => v.parse().map_err(|_| perr(format!("bad scale `{v}`")))?,
                        _ => 1.0,
                    };
                    let entries = body
                        .split_whitespace()
                        .map(|tok| {
                            let (i, sg) = tok
                                .split_once(':')
                                .ok_or_else(|| perr(format!("bad sparse entry `{tok}`")))?;
                            let i: u32 = i.parse().map_err(|_| perr(format!("bad row `{i}`")))?;
                            let sg: i8 = sg.parse().map_err(|_| perr(format!("bad sign `{sg}`")))?;
                            Ok((i, sg))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Column::Sparse { entries, scale }
                }
                ["dense"] => Column::Dense(
                    body.split_whitespace()
                        .map(|t| t.parse().map_err(|_| perr(format!("bad value `{t}`"))))
                        .collect::<Result<_>>()?,
                ),
                _ => return Err(perr(format!("unrecognized column header in `{line}`"))),
            };
            columns.push(col);
        }
        if columns.len() != n {
            return Err(perr(format!("expected {n} columns, found {}", columns.len())));
        }
        ColumnMatrix::from_columns(m, columns)
    }
}
