//! Localization matrices and the dense matrix utilities the filter needs:
//! taper construction, Schur products, diagonal inverses, and norms.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Switch-over dimension between the exact symmetric eigensolve and power
/// iteration when computing the operator norm.
const OP_NORM_EXACT_LIMIT: usize = 64;
const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_MAX: usize = 10_000;

/// Symmetric taper with unit diagonal and nonnegative entries, vanishing
/// beyond twice the decorrelation length.
#[derive(Debug, Clone)]
pub struct LocalizationMatrix {
    n: usize,
    entries: DMatrix<f64>,
    radius_l: f64,
}

impl LocalizationMatrix {
    /// Identity taper (kills all off-diagonal covariance entries).
    pub fn identity(n: usize) -> Self {
        LocalizationMatrix {
            n,
            entries: DMatrix::identity(n, n),
            radius_l: f64::INFINITY,
        }
    }

    /// All-ones taper (localization disabled).
    pub fn all_ones(n: usize) -> Self {
        LocalizationMatrix {
            n,
            entries: DMatrix::from_element(n, n, 1.0),
            radius_l: f64::INFINITY,
        }
    }

    /// Build a taper from raw entries. Validates the type invariants:
    /// symmetry, unit diagonal, nonnegativity.
    pub fn from_entries(entries: DMatrix<f64>, radius_l: f64) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "localization matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        for i in 0..n {
            if entries[(i, i)] != 1.0 {
                return Err(Error::Domain(format!(
                    "localization diagonal entry ({i},{i}) = {} != 1",
                    entries[(i, i)]
                )));
            }
            for j in 0..n {
                let v = entries[(i, j)];
                if v < 0.0 {
                    return Err(Error::Domain(format!(
                        "negative localization entry ({i},{j}) = {v}"
                    )));
                }
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(Error::Domain(format!(
                        "localization matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(LocalizationMatrix { n, entries, radius_l })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> f64 {
        self.radius_l
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }
}

/// Row-sum statistics of a taper: `c_phi` is the largest row sum, `q` the
/// largest off-diagonal row sum, and `diag_dominant` records `q < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationStats {
    pub c_phi: f64,
    pub q: f64,
    pub diag_dominant: bool,
}

/// Dense symmetric covariance matrix. Construction symmetrizes explicitly,
/// so the stored entries are symmetric up to representation.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    entries: DMatrix<f64>,
}

impl CovMatrix {
    /// Wrap a matrix, symmetrizing as `(A + A^T) / 2`.
    pub fn from_matrix(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let sym = (&a + a.transpose()) * 0.5;
        Ok(CovMatrix { entries: sym })
    }

    pub fn zeros(n: usize) -> Self {
        CovMatrix {
            entries: DMatrix::zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Largest diagonal entry. For PSD matrices this equals the max-abs norm.
    pub fn max_diag(&self) -> f64 {
        (0..self.n()).fold(f64::NEG_INFINITY, |m, i| m.max(self.entries[(i, i)]))
    }

    /// Smallest diagonal entry (not a norm, but the collapse monitor).
    pub fn min_diag(&self) -> f64 {
        (0..self.n()).fold(f64::INFINITY, |m, i| m.min(self.entries[(i, i)]))
    }
}

/// The four matrix statistics used by the stability analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBundle {
    /// Largest absolute entry.
    pub max_abs: f64,
    /// Largest absolute column sum.
    pub one_norm: f64,
    /// Smallest diagonal entry.
    pub min_diag: f64,
    /// l2 operator norm, sqrt of the largest eigenvalue of `A^T A`.
    pub op_norm: f64,
}

/// Fifth-order piecewise-rational taper function: 1 at 0, compactly
/// supported on [0, 2).
pub fn gaspari_cohn(x: f64) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::Domain(format!("gaspari_cohn needs x >= 0, got {x}")));
    }
    let v = if x <= 1.0 {
        -0.25 * x.powi(5) + 0.5 * x.powi(4) + 0.625 * x.powi(3) - (5.0 / 3.0) * x * x + 1.0
    } else if x < 2.0 {
        (1.0 / 12.0) * x.powi(5) - 0.5 * x.powi(4) + 0.625 * x.powi(3) + (5.0 / 3.0) * x * x
            - 5.0 * x
            + 4.0
            - 2.0 / (3.0 * x)
    } else {
        0.0
    };
    // Clamp the tiny negative excursions of the second branch near x = 2.
    Ok(v.clamp(0.0, 1.0))
}

/// Circular (periodic) index distance for 1-based indices in `1..=n`.
pub fn circ_distance(i: usize, j: usize, n: usize) -> Result<usize> {
    if i < 1 || i > n || j < 1 || j > n {
        return Err(Error::IndexOutOfRange(format!(
            "indices ({i},{j}) not in 1..={n}"
        )));
    }
    let a = i.abs_diff(j);
    let b = i + n - j;
    let c = j + n - i;
    Ok(a.min(b).min(c))
}

/// Build a taper with entries `rho(d(i,j) / l)` for a 1-based distance
/// function `dist`.
pub fn build_localization<D>(n: usize, l: f64, dist: D) -> Result<LocalizationMatrix>
where
    D: Fn(usize, usize) -> Result<usize>,
{
    if n < 1 {
        return Err(Error::Validation("localization needs n >= 1".into()));
    }
    if !(l > 0.0) {
        return Err(Error::Validation(format!("localization radius must be > 0, got {l}")));
    }
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        entries[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let d = dist(i + 1, j + 1)? as f64;
            let v = gaspari_cohn(d / l)?;
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(LocalizationMatrix { n, entries, radius_l: l })
}

/// Build the standard circular taper used for the periodic lattice models.
pub fn build_localization_circular(n: usize, l: f64) -> Result<LocalizationMatrix> {
    build_localization(n, l, |i, j| circ_distance(i, j, n))
}

/// Row-sum statistics of a taper.
pub fn localization_stats(phi: &LocalizationMatrix) -> LocalizationStats {
    let n = phi.n;
    let mut c_phi = f64::NEG_INFINITY;
    let mut q = f64::NEG_INFINITY;
    for i in 0..n {
        let mut row = 0.0;
        let mut off = 0.0;
        for j in 0..n {
            row += phi.entries[(i, j)];
            if j != i {
                off += phi.entries[(i, j)];
            }
        }
        c_phi = c_phi.max(row);
        q = q.max(off);
    }
    LocalizationStats {
        c_phi,
        q,
        diag_dominant: q < 1.0,
    }
}

/// Entrywise (Schur) product of a covariance with a taper. Unit-diagonal
/// tapers leave the diagonal of `p` untouched.
pub fn schur_localize(p: &CovMatrix, phi: &LocalizationMatrix) -> Result<CovMatrix> {
    if p.n() != phi.n {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}x{} but taper is {}x{}",
            p.n(),
            p.n(),
            phi.n,
            phi.n
        )));
    }
    let entries = p.entries.component_mul(&phi.entries);
    Ok(CovMatrix { entries })
}

/// Diagonal matrix of reciprocal diagonal entries of `p`.
///
/// Any diagonal entry at or below `floor` is reported as a singular
/// covariance (ensemble collapse) with the offending index.
pub fn diag_inverse(p: &CovMatrix, floor: f64) -> Result<CovMatrix> {
    let n = p.n();
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        let d = p.entries[(i, i)];
        if !(d > floor) {
            return Err(Error::SingularCovariance {
                index: i,
                value: d,
                floor,
            });
        }
        entries[(i, i)] = 1.0 / d;
    }
    Ok(CovMatrix { entries })
}

/// Default collapse floor for a given covariance: relative to its largest
/// entry so the detection works across scales.
pub fn default_diag_floor(p: &CovMatrix) -> f64 {
    let max_abs = p.entries.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1e-12 * max_abs.max(1.0)
}

/// Compute the norm bundle of a square matrix.
pub fn norms(a: &DMatrix<f64>) -> Result<NormBundle> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "norms needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let max_abs = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let one_norm = one_norm(a);
    let min_diag = (0..n).fold(f64::INFINITY, |m, i| m.min(a[(i, i)]));
    let op_norm = op_norm(a);
    Ok(NormBundle {
        max_abs,
        one_norm,
        min_diag,
        op_norm,
    })
}

/// Largest absolute column sum.
pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let mut s = 0.0;
        for i in 0..a.nrows() {
            s += a[(i, j)].abs();
        }
        best = best.max(s);
    }
    best
}

/// l2 operator norm: exact dense symmetric eigensolve of `A^T A` for small
/// matrices, power iteration above the switch-over dimension.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let ata = a.transpose() * a;
    if n <= OP_NORM_EXACT_LIMIT {
        let eig = ata.symmetric_eigen();
        eig.eigenvalues
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.max(0.0)))
            .sqrt()
    } else {
        power_iteration_largest(&ata).max(0.0).sqrt()
    }
}

/// Smallest eigenvalue of a symmetric matrix (test and monitor helper).
pub fn min_eigenvalue_sym(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v))
}

fn power_iteration_largest(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let mut x = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda_old = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let y = s * &x;
        let lambda = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        x = y / norm;
        if (lambda - lambda_old).abs() <= POWER_ITER_TOL * lambda.abs().max(1.0) {
            return lambda;
        }
        lambda_old = lambda;
    }
    lambda_old
}
