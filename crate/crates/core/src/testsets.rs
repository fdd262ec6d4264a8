//! Test sets `T` and the two oracles every estimator needs:
//! `sup_{x in T} <g, x>` and `sup_{x in T} | ||Ax|| - lambda ||x|| |`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensembles::{matvec, ColumnMatrix, ImageBuffer};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vector, SeedPath};

/// Declarative set description, as used in configs and on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetSpec {
    /// `{e_1}`.
    Singleton { n: usize },
    /// `{e_1, ..., e_n}`.
    Basis { n: usize },
    /// `{e_1 - e_i : i = 2..n}`.
    Difference { n: usize },
    /// `{(e_i - e_j)/sqrt 2 : i < j}`.
    PairDifferences { n: usize },
    /// Unit vectors with at most `k` nonzeros.
    KSparse { n: usize, k: usize },
    /// Unit ball of a random `d`-dimensional subspace.
    Subspace { n: usize, d: usize, seed: u64 },
    /// `count` uniform points on the sphere.
    SphereSample { n: usize, count: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetKind {
    Finite,
    KSparseUnit,
    SubspaceBall,
    SphereSample,
}

#[derive(Debug, Clone)]
struct FinitePoints {
    points: Vec<Vec<f64>>,
    supports: Vec<Vec<usize>>,
    norms: Vec<f64>,
}

impl FinitePoints {
    fn new(n: usize, points: Vec<Vec<f64>>) -> Result<Self> {
        for p in &points {
            if p.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("test set points must be finite"));
            }
        }
        let supports = points
            .iter()
            .map(|p| (0..n).filter(|&i| p[i] != 0.0).collect())
            .collect();
        let norms = points
            .iter()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(FinitePoints {
            points,
            supports,
            norms,
        })
    }

    fn dot(&self, i: usize, g: &[f64]) -> f64 {
        let p = &self.points[i];
        self.supports[i].iter().map(|&j| p[j] * g[j]).sum()
    }

    fn sup_linear(&self, g: &[f64], signed: bool) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..self.points.len() {
            let mut v = self.dot(i, g);
            if signed {
                v = v.abs();
            }
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, i));
            }
        }
        best
    }

    fn distortion(&self, a: &ColumnMatrix, lambda: f64) -> Result<Option<(f64, usize)>> {
        let mut buf = ImageBuffer::new(a.rows());
        let mut best: Option<(f64, usize)> = None;
        for i in 0..self.points.len() {
            let image = buf.norm(a, &self.points[i], Some(&self.supports[i]))?;
            let d = (image - lambda * self.norms[i]).abs();
            if best.is_none_or(|(b, _)| d > b) {
                best = Some((d, i));
            }
        }
        Ok(best)
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.points[i], &self.points[j]);
        let (sa, sb) = (&self.supports[i], &self.supports[j]);
        let (mut x, mut y, mut acc) = (0, 0, 0.0);
        while x < sa.len() || y < sb.len() {
            let ia = sa.get(x).copied().unwrap_or(usize::MAX);
            let ib = sb.get(y).copied().unwrap_or(usize::MAX);
            let d = if ia == ib {
                x += 1;
                y += 1;
                a[ia] - b[ib]
            } else if ia < ib {
                x += 1;
                a[ia]
            } else {
                y += 1;
                -b[ib]
            };
            acc += d * d;
        }
        acc.sqrt()
    }

    fn rad_diam(&self) -> (f64, f64) {
        let rad = self.norms.iter().copied().fold(0.0, f64::max);
        let mut diam: f64 = 0.0;
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                diam = diam.max(self.distance(i, j));
            }
        }
        (rad, diam)
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Finite(FinitePoints),
    KSparseUnit(usize),
    SubspaceBall(DMatrix<f64>),
    SphereSample { seed: u64, sample: FinitePoints },
}

/// A set `T` in `R^n`.
#[derive(Debug, Clone)]
pub struct TestSet {
    n: usize,
    id: String,
    shape: Shape,
}

/// Result of a distortion evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Distortion {
    pub delta: f64,
    pub witness: Vec<f64>,
    /// `true` when `delta` is a maximum over candidate points of an infinite
    /// set, hence only a lower bound on the supremum.
    pub lower_bound: bool,
}

/// Candidate budget for k-sparse distortion lower bounds.
const KSPARSE_PAIR_CAP: usize = 50_000;
const KSPARSE_RANDOM_CANDIDATES: u64 = 256;

impl TestSet {
    pub fn finite(n: usize, points: Vec<Vec<f64>>) -> Result<Self> {
        Self::finite_with_id(n, points, format!("finite(n={n})"))
    }

    fn finite_with_id(n: usize, points: Vec<Vec<f64>>, id: String) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("ambient dimension must be positive"));
        }
        if points.is_empty() {
            return Err(Error::param("finite test set must be nonempty"));
        }
        Ok(TestSet {
            n,
            id,
            shape: Shape::Finite(FinitePoints::new(n, points)?),
        })
    }

    pub fn build(spec: &SetSpec) -> Result<Self> {
        let unit = |n: usize, i: usize| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        };
        match *spec {
            SetSpec::Singleton { n } => {
                if n == 0 {
                    return Err(Error::param("singleton needs n >= 1"));
                }
                Self::finite_with_id(n, vec![unit(n, 0)], format!("singleton(n={n})"))
            }
            SetSpec::Basis { n } => Self::finite_with_id(
                n,
                (0..n).map(|i| unit(n, i)).collect(),
                format!("basis(n={n})"),
            ),
            SetSpec::Difference { n } => {
                if n < 2 {
                    return Err(Error::param("difference set needs n >= 2"));
                }
                let pts = (1..n)
                    .map(|i| {
                        let mut v = unit(n, 0);
                        v[i] = -1.0;
                        v
                    })
                    .collect();
                Self::finite_with_id(n, pts, format!("difference(n={n})"))
            }
            SetSpec::PairDifferences { n } => {
                if n < 2 {
                    return Err(Error::param("pair_differences needs n >= 2"));
                }
                let r = std::f64::consts::FRAC_1_SQRT_2;
                let mut pts = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        let mut v = vec![0.0; n];
                        v[i] = r;
                        v[j] = -r;
                        pts.push(v);
                    }
                }
                Self::finite_with_id(n, pts, format!("pair_differences(n={n})"))
            }
            SetSpec::KSparse { n, k } => {
                if k == 0 || k > n {
                    return Err(Error::param(format!("k-sparse set needs 1 <= k <= n (k={k}, n={n})")));
                }
                Ok(TestSet {
                    n,
                    id: format!("k_sparse(n={n},k={k})"),
                    shape: Shape::KSparseUnit(k),
                })
            }
            SetSpec::Subspace { n, d, seed } => {
                if d == 0 || d > n {
                    return Err(Error::param(format!("subspace needs 1 <= d <= n (d={d}, n={n})")));
                }
                let cols: Vec<f64> = (0..d)
                    .flat_map(|j| gaussian_vector(SeedPath::new(seed, 0, j as u64), n))
                    .collect();
                let q = DMatrix::from_column_slice(n, d, &cols).qr().q();
                let mut set = Self::subspace_ball(q)?;
                set.id = format!("subspace(n={n},d={d},seed={seed})");
                Ok(set)
            }
            SetSpec::SphereSample { n, count, seed } => {
                if n == 0 || count == 0 {
                    return Err(Error::param("sphere sample needs n >= 1 and count >= 1"));
                }
                let pts = (0..count)
                    .map(|i| {
                        // a zero Gaussian vector has probability zero; the
                        // retry keeps the point on the sphere regardless
                        let mut attempt = 0u64;
                        loop {
                            let g = gaussian_vector(SeedPath::new(seed, i as u64, attempt), n);
                            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if norm > 0.0 {
                                break g.into_iter().map(|v| v / norm).collect::<Vec<_>>();
                            }
                            attempt += 1;
                        }
                    })
                    .collect();
                Ok(TestSet {
                    n,
                    id: format!("sphere_sample(n={n},count={count},seed={seed})"),
                    shape: Shape::SphereSample {
                        seed,
                        sample: FinitePoints::new(n, pts)?,
                    },
                })
            }
        }
    }

    /// Unit ball of the span of `basis` (columns must be orthonormal).
    pub fn subspace_ball(basis: DMatrix<f64>) -> Result<Self> {
        let (n, d) = basis.shape();
        if n == 0 || d == 0 || d > n {
            return Err(Error::param("subspace basis must be n x d with 1 <= d <= n"));
        }
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::identity(d, d)).abs().max();
        if err > 1e-10 {
            return Err(Error::param(format!("basis columns are not orthonormal (error {err:e})")));
        }
        Ok(TestSet {
            n,
            id: format!("subspace(n={n},d={d})"),
            shape: Shape::SubspaceBall(basis),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> SetKind {
        match self.shape {
            Shape::Finite(_) => SetKind::Finite,
            Shape::KSparseUnit(_) => SetKind::KSparseUnit,
            Shape::SubspaceBall(_) => SetKind::SubspaceBall,
            Shape::SphereSample { .. } => SetKind::SphereSample,
        }
    }

    /// The explicit points of a finite set or sphere sample.
    pub fn points(&self) -> Option<&[Vec<f64>]> {
        match &self.shape {
            Shape::Finite(f) | Shape::SphereSample { sample: f, .. } => Some(&f.points),
            _ => None,
        }
    }

    /// Sorted nonzero coordinates of each explicit point.
    pub fn supports(&self) -> Option<&[Vec<usize>]> {
        match &self.shape {
            Shape::Finite(f) | Shape::SphereSample { sample: f, .. } => Some(&f.supports),
            _ => None,
        }
    }

    pub fn subspace_basis(&self) -> Option<&DMatrix<f64>> {
        match &self.shape {
            Shape::SubspaceBall(b) => Some(b),
            _ => None,
        }
    }

    /// The finite set `cT` (finite sets only).
    pub fn scaled(&self, c: f64) -> Result<Self> {
        match &self.shape {
            Shape::Finite(f) => {
                let pts = f.points.iter().map(|p| p.iter().map(|v| c * v).collect()).collect();
                Self::finite_with_id(self.n, pts, format!("{c}*{}", self.id))
            }
            _ => Err(Error::param("scaling is only defined for finite sets")),
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }

    /// `sup_{x in T} <g,x>` (or `|<g,x>|` when `signed`), with an attaining
    /// point. Ties go to the lowest index.
    pub fn sup_linear(&self, g: &[f64], signed: bool) -> Result<(f64, Vec<f64>)> {
        self.check_dim(g.len())?;
        Ok(match &self.shape {
            Shape::Finite(f) | Shape::SphereSample { sample: f, .. } => {
                let (v, i) = f.sup_linear(g, signed).expect("nonempty");
                (v, f.points[i].clone())
            }
            Shape::KSparseUnit(k) => {
                let mut order: Vec<usize> = (0..self.n).collect();
                order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
                let top = &order[..*k];
                let norm = top.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt();
                let mut w = vec![0.0; self.n];
                if norm > 0.0 {
                    for &i in top {
                        w[i] = g[i] / norm;
                    }
                } else {
                    w[0] = 1.0;
                }
                (norm, w)
            }
            Shape::SubspaceBall(b) => {
                let coef = b.transpose() * DVector::from_column_slice(g);
                let norm = coef.norm();
                let w = if norm > 0.0 {
                    (b * (coef / norm)).as_slice().to_vec()
                } else {
                    vec![0.0; self.n]
                };
                (norm, w)
            }
        })
    }

    /// Value-only variant of [`TestSet::sup_linear`] for hot loops.
    pub fn sup_linear_value(&self, g: &[f64], signed: bool) -> Result<f64> {
        self.check_dim(g.len())?;
        match &self.shape {
            Shape::Finite(f) | Shape::SphereSample { sample: f, .. } => {
                Ok(f.sup_linear(g, signed).expect("nonempty").0)
            }
            _ => self.sup_linear(g, signed).map(|(v, _)| v),
        }
    }

    /// `sup_{x in T} | ||Ax||_2 - lambda ||x||_2 |`.
    ///
    /// Exact for finite sets and subspace balls (via the extreme singular
    /// values of `AB`); a flagged lower bound for k-sparse sets and sphere
    /// samples.
    pub fn distortion_sup(&self, a: &ColumnMatrix, lambda: f64) -> Result<Distortion> {
        self.check_dim(a.cols())?;
        match &self.shape {
            Shape::Finite(f) => {
                let (delta, i) = f.distortion(a, lambda)?.expect("nonempty");
                Ok(Distortion {
                    delta,
                    witness: f.points[i].clone(),
                    lower_bound: false,
                })
            }
            Shape::SphereSample { sample, .. } => {
                let (delta, i) = sample.distortion(a, lambda)?.expect("nonempty");
                Ok(Distortion {
                    delta,
                    witness: sample.points[i].clone(),
                    lower_bound: true,
                })
            }
            Shape::KSparseUnit(k) => self.ksparse_distortion(*k, a, lambda),
            Shape::SubspaceBall(b) => subspace_distortion(b, a, lambda),
        }
    }

    fn ksparse_distortion(&self, k: usize, a: &ColumnMatrix, lambda: f64) -> Result<Distortion> {
        let n = self.n;
        let mut buf = ImageBuffer::new(a.rows());
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut consider = |x: Vec<f64>, support: &[usize], buf: &mut ImageBuffer| -> Result<()> {
            let d = (buf.norm(a, &x, Some(support))? - lambda).abs();
            if d > best.0 {
                best = (d, x);
            }
            Ok(())
        };
        for i in 0..n {
            let mut x = vec![0.0; n];
            x[i] = 1.0;
            consider(x, &[i], &mut buf)?;
        }
        if k >= 2 && n * (n - 1) / 2 <= KSPARSE_PAIR_CAP {
            let r = std::f64::consts::FRAC_1_SQRT_2;
            for i in 0..n {
                for j in i + 1..n {
                    for sj in [r, -r] {
                        let mut x = vec![0.0; n];
                        x[i] = r;
                        x[j] = sj;
                        consider(x, &[i, j], &mut buf)?;
                    }
                }
            }
        }
        if k >= 2 {
            let mut rng = SeedPath::new(n as u64, k as u64, u64::MAX).rng();
            let scale = 1.0 / (k as f64).sqrt();
            for _ in 0..KSPARSE_RANDOM_CANDIDATES {
                let support: Vec<usize> = crate::ensembles::sample_support(&mut rng, n, k)
                    .into_iter()
                    .map(|i| i as usize)
                    .collect();
                let mut x = vec![0.0; n];
                for &i in &support {
                    x[i] = if rng.gen::<bool>() { scale } else { -scale };
                }
                consider(x, &support, &mut buf)?;
            }
        }
        Ok(Distortion {
            delta: best.0,
            witness: best.1,
            lower_bound: true,
        })
    }

    /// `(sup ||x||, sup ||x - y||)` over the set (over the sample for sphere
    /// samples).
    pub fn rad_diam(&self) -> (f64, f64) {
        match &self.shape {
            Shape::Finite(f) | Shape::SphereSample { sample: f, .. } => f.rad_diam(),
            Shape::KSparseUnit(_) | Shape::SubspaceBall(_) => (1.0, 2.0),
        }
    }

    pub fn rad(&self) -> f64 {
        match &self.shape {
            Shape::Finite(f) | Shape::SphereSample { sample: f, .. } => {
                f.norms.iter().copied().fold(0.0, f64::max)
            }
            _ => 1.0,
        }
    }

    /// Whether `x` belongs to the set, up to `tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        if x.len() != self.n {
            return false;
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        match &self.shape {
            Shape::Finite(f) | Shape::SphereSample { sample: f, .. } => f
                .points
                .iter()
                .any(|p| p.iter().zip(x).all(|(a, b)| (a - b).abs() <= tol)),
            Shape::KSparseUnit(k) => {
                x.iter().filter(|v| v.abs() > tol).count() <= *k && (norm - 1.0).abs() <= tol
            }
            Shape::SubspaceBall(b) => {
                let xv = DVector::from_column_slice(x);
                let proj = b * (b.transpose() * &xv);
                (xv - proj).norm() <= tol && norm <= 1.0 + tol
            }
        }
    }

    /// Seed of a sphere sample.
    pub fn sample_seed(&self) -> Option<u64> {
        match self.shape {
            Shape::SphereSample { seed, .. } => Some(seed),
            _ => None,
        }
    }

    /// Writes a finite set as CSV: a `dim=<n>` header line, then one point per row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let points = self
            .points()
            .ok_or_else(|| Error::param("only explicit point sets can be written as CSV"))?;
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record([format!("dim={}", self.n)])?;
        for p in points {
            w.write_record(p.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut records = r.records();
        let header = records
            .next()
            .ok_or_else(|| Error::Parse("empty test-set CSV".into()))??;
        let n: usize = header
            .get(0)
            .and_then(|h| h.strip_prefix("dim="))
            .and_then(|v| v.parse().ok())
            .filter(|_| header.len() == 1)
            .ok_or_else(|| Error::Parse("test-set CSV must start with `dim=<n>`".into()))?;
        let mut points = Vec::new();
        for rec in records {
            let rec = rec?;
            let p = rec
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad value `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            points.push(p);
        }
        Self::finite(n, points)
    }
}

fn subspace_distortion(b: &DMatrix<f64>, a: &ColumnMatrix, lambda: f64) -> Result<Distortion> {
    let (n, d) = b.shape();
    let m = a.rows();
    let mut ab = DMatrix::zeros(m, d);
    for k in 0..d {
        let col = matvec(a, b.column(k).as_slice())?;
        ab.column_mut(k).copy_from_slice(&col);
    }
    // right singular vectors, ordered with their singular values
    let (sigmas, vecs): (Vec<f64>, DMatrix<f64>) = if d <= m {
        let svd = ab.svd(false, true);
        let vt = svd.v_t.expect("requested");
        (svd.singular_values.as_slice().to_vec(), vt.transpose())
    } else {
        // rank-deficient: some unit direction is annihilated, sigma_min = 0
        let eig = SymmetricEigen::new(ab.transpose() * &ab);
        (
            eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect(),
            eig.eigenvectors,
        )
    };
    let (imax, imin) = extreme_indices(&sigmas);
    let (smax, smin) = (sigmas[imax], if d > m { 0.0 } else { sigmas[imin] });
    let (delta, idx) = if smax - lambda >= lambda - smin {
        (smax - lambda, imax)
    } else {
        (lambda - smin, imin)
    };
    let v = vecs.column(idx).into_owned();
    let witness = (b * v).as_slice().to_vec();
    debug_assert_eq!(witness.len(), n);
    Ok(Distortion {
        delta,
        witness,
        lower_bound: false,
    })
}

fn extreme_indices(v: &[f64]) -> (usize, usize) {
    let mut imax = 0;
    let mut imin = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[imax] {
            imax = i;
        }
        if x < v[imin] {
            imin = i;
        }
    }
    (imax, imin)
}
