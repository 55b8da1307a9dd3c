//! Cholesky factorization with a fixed jitter ladder, and multivariate normal draws.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};

/// Relative jitter levels tried in order, scaled by the mean diagonal.
pub const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JitterPolicy {
    /// Fail unless the matrix factors as given.
    #[default]
    Exact,
    /// Walk [`JITTER_LADDER`] until the factorization succeeds.
    Escalate,
}

/// Lower Cholesky factor `L` of a symmetric positive definite `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    log_det: f64,
    jitter: Option<f64>,
}

impl CholeskyFactor {
    /// Wrap an existing lower-triangular factor. Rejects non-positive diagonals.
    pub fn from_lower(lower: DMatrix<f64>) -> Result<Self> {
        if !lower.is_square() {
            return Err(dim_mismatch("cholesky factor columns", lower.nrows(), lower.ncols()));
        }
        let mut log_det = 0.0;
        for i in 0..lower.nrows() {
            let d = lower[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite(format!(
                    ": factor diagonal {i} is {d}"
                )));
            }
            log_det += 2.0 * d.ln();
        }
        Ok(CholeskyFactor {
            lower: lower.lower_triangle(),
            log_det,
            jitter: None,
        })
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Log-determinant of the factored matrix (including any jitter).
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Relative jitter `δ` that was added, if any.
    pub fn jitter(&self) -> Option<f64> {
        self.jitter
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("factor has positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("factor has positive diagonal")
    }

    /// Solve `A X = B` for a matrix right-hand side.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("factor has positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("factor has positive diagonal")
    }

    /// `A⁻¹`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let inv = self.solve_matrix(&DMatrix::identity(n, n));
        symmetrize(inv)
    }

    /// `L · eps`.
    pub fn mul_lower(&self, eps: &DVector<f64>) -> DVector<f64> {
        &self.lower * eps
    }
}

pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let scale = a.amax().max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs() / scale);
        }
    }
    worst
}

fn try_factor(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = Cholesky::new(a.clone())?;
    let l = chol.unpack();
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        // Pivots this small relative to the input diagonal mean numerical rank loss.
        if !(d > 0.0) || !d.is_finite() || d * d <= 1e-15 * a[(i, i)].abs() {
            return None;
        }
    }
    Some(l)
}

/// Factor a symmetric matrix, optionally escalating diagonal jitter.
pub fn cholesky(cov: &DMatrix<f64>, policy: JitterPolicy) -> Result<CholeskyFactor> {
    if !cov.is_square() {
        return Err(dim_mismatch("covariance columns", cov.nrows(), cov.ncols()));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix".into()));
    }
    let asym = max_asymmetry(cov);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    if let Some(l) = try_factor(cov) {
        return CholeskyFactor::from_lower(l);
    }
    if policy == JitterPolicy::Exact {
        return Err(Error::NotPositiveDefinite(String::new()));
    }
    let n = cov.nrows();
    let mean_diag = cov.diagonal().sum() / n as f64;
    if !(mean_diag > 0.0) {
        return Err(Error::NotPositiveDefinite(": non-positive mean diagonal".into()));
    }
    for &delta in JITTER_LADDER.iter() {
        let mut jittered = cov.clone();
        for i in 0..n {
            jittered[(i, i)] += delta * mean_diag;
        }
        if let Some(l) = try_factor(&jittered) {
            let mut f = CholeskyFactor::from_lower(l)?;
            f.jitter = Some(delta);
            return Ok(f);
        }
    }
    Err(Error::NotPositiveDefinite(format!(
        " after maximum jitter {:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

/// `mean + L·eps` for a supplied standard normal vector.
pub fn mvn_transform(
    mean: &DVector<f64>,
    chol: &CholeskyFactor,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    if mean.len() != chol.dim() {
        return Err(dim_mismatch("mean length", chol.dim(), mean.len()));
    }
    if eps.len() != chol.dim() {
        return Err(dim_mismatch("noise length", chol.dim(), eps.len()));
    }
    Ok(mean + chol.mul_lower(eps))
}

/// One draw from MVN(mean, L Lᵀ).
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &CholeskyFactor,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let eps = DVector::from_fn(chol.dim(), |_, _| StandardNormal.sample(rng));
    mvn_transform(mean, chol, &eps)
}

/// `count` draws as rows of a `count × n` matrix, filled row by row.
pub fn mvn_sample_rows<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &CholeskyFactor,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = chol.dim();
    if mean.len() != n {
        return Err(dim_mismatch("mean length", n, mean.len()));
    }
    // Row-major fill so draw s depends only on the first s rows of noise.
    let eps: DMatrix<f64> = DMatrix::from_row_iterator(
        count,
        n,
        (0..count * n).map(|_| StandardNormal.sample(rng)),
    );
    let mut out = eps * chol.lower().transpose();
    for mut row in out.row_iter_mut() {
        row += mean.transpose();
    }
    Ok(out)
}

/// `var · [(1 − rho) I + rho 11ᵀ]`.
pub fn equicorrelation(n: usize, var: f64, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { var } else { var * rho })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;

    #[test]
    fn identity_and_diagonal() {
        let f = cholesky(&DMatrix::identity(2, 2), JitterPolicy::Exact).unwrap();
        assert_eq!(f.lower(), &DMatrix::identity(2, 2));
        assert_eq!(f.log_det(), 0.0);

        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let f = cholesky(&a, JitterPolicy::Exact).unwrap();
        assert_eq!(f.lower(), &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));
        assert!((f.log_det() - 36f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn rank_one_needs_jitter() {
        let a = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            cholesky(&a, JitterPolicy::Exact),
            Err(Error::NotPositiveDefinite(_))
        ));
        let f = cholesky(&a, JitterPolicy::Escalate).unwrap();
        assert!(f.jitter().unwrap() > 0.0);
    }

    #[test]
    fn indefinite_fails_even_with_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky(&a, JitterPolicy::Escalate).is_err());
    }

    #[test]
    fn asymmetric_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(cholesky(&a, JitterPolicy::Exact), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn transform_with_identity_factor() {
        let f = CholeskyFactor::from_lower(DMatrix::identity(2, 2)).unwrap();
        let x = mvn_transform(
            &DVector::zeros(2),
            &f,
            &DVector::from_vec(vec![0.3, -1.1]),
        )
        .unwrap();
        assert_eq!(x.as_slice(), &[0.3, -1.1]);
    }

    #[test]
    fn zero_factor_rejected() {
        assert!(CholeskyFactor::from_lower(DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let f = CholeskyFactor::from_lower(DMatrix::identity(2, 2)).unwrap();
        let mut rng = SeededStream::new(0, 0);
        assert!(matches!(
            mvn_sample(&DVector::zeros(3), &f, &mut rng),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn sample_covariance_matches_target() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let f = cholesky(&cov, JitterPolicy::Exact).unwrap();
        let mut rng = SeededStream::new(3, 0);
        let draws = mvn_sample_rows(&DVector::zeros(2), &f, 100_000, &mut rng).unwrap();
        let n = draws.nrows() as f64;
        let mut s = [[0.0; 2]; 2];
        for row in draws.row_iter() {
            for i in 0..2 {
                for j in 0..2 {
                    s[i][j] += row[i] * row[j] / n;
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((s[i][j] - cov[(i, j)]).abs() < 0.02, "{i}{j}: {}", s[i][j]);
            }
        }
    }

    #[test]
    fn random_spd_round_trip() {
        let mut rng = SeededStream::new(42, 0);
        for trial in 0..1000 {
            let n = 1 + trial % 20;
            let b = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
            let a = &b * b.transpose() + DMatrix::identity(n, n) * 0.1;
            let f = cholesky(&a, JitterPolicy::Exact).unwrap();
            let rec = f.lower() * f.lower().transpose();
            let rel = (&rec - &a).norm() / a.norm();
            assert!(rel < 1e-8, "trial {trial}: {rel}");
            assert!((0..n).all(|i| f.lower()[(i, i)] > 0.0));
        }
    }

    #[test]
    fn solve_and_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = cholesky(&a, JitterPolicy::Exact).unwrap();
        let inv = f.inverse();
        let id = &a * &inv;
        assert!((id - DMatrix::identity(3, 3)).amax() < 1e-12);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!((&a * f.solve(&b) - b).amax() < 1e-12);
    }
}
