//! Gaussian algebra and linear-Gaussian state-space primitives.
//!
//! States are `[px, py, vx, vy]` in a sensor's local frame; measurements are
//! positions. Every density is evaluated in the log domain.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SYMMETRY_TOL: f64 = 1e-9;
/// Relative diagonal jitter used when a factorization fails.
pub const JITTER: f64 = 1e-9;

/// Adds `JITTER * trace / d` to the diagonal.
pub fn regularize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let mut out = m.clone();
    if d == 0 {
        return out;
    }
    let eps = JITTER * (m.trace() / d as f64).abs();
    for i in 0..d {
        out[(i, i)] += eps;
    }
    out
}

/// Cholesky factor of the symmetrized matrix, retried once with jitter.
pub fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok(c);
    }
    Cholesky::new(regularize(&sym)).ok_or(Error::NotPositiveDefinite(what))
}

/// `log |m|` for a symmetric positive-definite matrix.
pub fn log_det(m: &DMatrix<f64>, what: &'static str) -> Result<f64> {
    let chol = cholesky(m, what)?;
    Ok(chol_log_det(&chol))
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Multivariate normal density parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: cov.nrows() });
        }
        let scale = cov.amax().max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotPositiveDefinite("covariance is not symmetric"));
                }
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn from_slices(mean: &[f64], cov_row_major: &[f64]) -> Result<Self> {
        let d = mean.len();
        if cov_row_major.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, found: cov_row_major.len() });
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(d, d, cov_row_major),
        )
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: DVector::zeros(d), cov: DMatrix::identity(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal over the given coordinates.
    pub fn marginal(&self, idx: &[usize]) -> Gaussian {
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.cov[(idx[r], idx[c])]);
        Gaussian { mean, cov }
    }

    /// Image under the linear map `x -> a x`.
    pub fn linear_map(&self, a: &DMatrix<f64>) -> Gaussian {
        Gaussian { mean: a * &self.mean, cov: a * &self.cov * a.transpose() }
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        gaussian_logpdf(x, self)
    }
}

/// `log N(x; g.mean, g.cov)`.
pub fn gaussian_logpdf(x: &DVector<f64>, g: &Gaussian) -> Result<f64> {
    let d = g.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: x.len() });
    }
    let chol = cholesky(&g.cov, "gaussian_logpdf")?;
    let r = x - &g.mean;
    let sol = chol.l_dirty().solve_lower_triangular(&r).ok_or(Error::Singular("gaussian_logpdf"))?;
    Ok(-0.5 * (d as f64 * LN_2PI + chol_log_det(&chol) + sol.norm_squared()))
}

/// Constant-velocity motion with unknown acceleration.
///
/// `F = [[I, dt I], [0, I]]`, `Q = sigma2 [[q1 I, q2 I], [q2 I, q3 I]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    pub dt: f64,
    pub sigma2: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl MotionModel {
    /// Errors unless `q1, q3 > 0` and `Q` is positive semi-definite.
    pub fn new(dt: f64, sigma2: f64, q1: f64, q2: f64, q3: f64) -> Result<Self> {
        if !(dt > 0.0 && sigma2 >= 0.0 && q1 > 0.0 && q3 > 0.0 && q2 >= 0.0) {
            return Err(Error::Config(format!(
                "motion model requires dt > 0, sigma2 >= 0, q1, q3 > 0 (got dt={dt}, sigma2={sigma2}, q=({q1}, {q2}, {q3}))"
            )));
        }
        if q1 * q3 - q2 * q2 < -1e-12 {
            return Err(Error::Config(format!(
                "process noise is indefinite: q1*q3 - q2^2 = {} < 0",
                q1 * q3 - q2 * q2
            )));
        }
        let mut f = DMatrix::identity(4, 4);
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;
        let mut q = DMatrix::zeros(4, 4);
        for a in 0..2 {
            q[(a, a)] = sigma2 * q1;
            q[(a, a + 2)] = sigma2 * q2;
            q[(a + 2, a)] = sigma2 * q2;
            q[(a + 2, a + 2)] = sigma2 * q3;
        }
        Ok(Self { dt, sigma2, q1, q2, q3, f, q })
    }

    /// `sigma = 0.5`, `q = (1/4, 1/2, 1)`, `dt = 1`.
    pub fn reference() -> Self {
        Self::new(1.0, 0.25, 0.25, 0.5, 1.0).expect("reference motion model is valid")
    }
}

/// Linear position sensor `z = H x + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl SensorModel {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
            return Err(Error::DimensionMismatch { expected: h.nrows(), found: r.nrows() });
        }
        cholesky(&r, "measurement noise")?;
        Ok(Self { h, r })
    }

    /// `H = [I, 0]`, `R = sigma_n^2 I`.
    pub fn position(sigma_n: f64) -> Result<Self> {
        if sigma_n.is_nan() || sigma_n <= 0.0 {
            return Err(Error::Config(format!("sigma_n must be positive, got {sigma_n}")));
        }
        let mut h = DMatrix::zeros(2, 4);
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        Ok(Self { h, r: DMatrix::identity(2, 2) * sigma_n * sigma_n })
    }

    pub fn meas_dim(&self) -> usize {
        self.h.nrows()
    }
}

/// Sensor position offset; maps global positions to the sensor frame by `x - theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetTransform {
    pub theta: Vector2<f64>,
}

impl OffsetTransform {
    pub fn new(x: f64, y: f64) -> Self {
        Self { theta: Vector2::new(x, y) }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0)
    }

    /// Shift that re-expresses a position from the `from` frame in the `to` frame.
    pub fn shift(from: &OffsetTransform, to: &OffsetTransform) -> Vector2<f64> {
        from.theta - to.theta
    }
}

/// Types carrying a position in their first two coordinates.
pub trait ApplyOffset: Sized {
    fn apply_offset(&self, from: &OffsetTransform, to: &OffsetTransform) -> Self;
}

impl ApplyOffset for Vector2<f64> {
    fn apply_offset(&self, from: &OffsetTransform, to: &OffsetTransform) -> Self {
        self + OffsetTransform::shift(from, to)
    }
}

impl ApplyOffset for DVector<f64> {
    fn apply_offset(&self, from: &OffsetTransform, to: &OffsetTransform) -> Self {
        let s = OffsetTransform::shift(from, to);
        let mut out = self.clone();
        out[0] += s.x;
        out[1] += s.y;
        out
    }
}

/// Translation leaves covariances untouched.
impl ApplyOffset for Gaussian {
    fn apply_offset(&self, from: &OffsetTransform, to: &OffsetTransform) -> Self {
        Gaussian { mean: self.mean.apply_offset(from, to), cov: self.cov.clone() }
    }
}

/// Generic entry point mirroring the trait.
pub fn apply_offset<T: ApplyOffset>(value: &T, from: &OffsetTransform, to: &OffsetTransform) -> T {
    value.apply_offset(from, to)
}

pub fn kf_predict(track: &Gaussian, m: &MotionModel) -> Result<Gaussian> {
    if track.dim() != m.f.nrows() {
        return Err(Error::DimensionMismatch { expected: m.f.nrows(), found: track.dim() });
    }
    let mean = &m.f * &track.mean;
    let cov = &m.f * &track.cov * m.f.transpose() + &m.q;
    Ok(Gaussian { mean, cov: symmetrize(cov) })
}

/// Kalman measurement update.
#[derive(Debug, Clone)]
pub struct KfUpdate {
    pub posterior: Gaussian,
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
}

pub fn kf_update(track: &Gaussian, z: &DVector<f64>, s: &SensorModel) -> Result<KfUpdate> {
    if track.dim() != s.h.ncols() {
        return Err(Error::DimensionMismatch { expected: s.h.ncols(), found: track.dim() });
    }
    if z.len() != s.meas_dim() {
        return Err(Error::DimensionMismatch { expected: s.meas_dim(), found: z.len() });
    }
    let innovation = z - &s.h * &track.mean;
    let pht = &track.cov * s.h.transpose();
    let innovation_cov = symmetrize(&s.r + &s.h * &pht);
    let chol = cholesky(&innovation_cov, "innovation covariance").map_err(|_| Error::Singular("innovation covariance"))?;
    // K = P H^T S^-1
    let gain = chol.solve(&pht.transpose()).transpose();
    let mean = &track.mean + &gain * &innovation;
    let d = track.dim();
    let cov = (DMatrix::identity(d, d) - &gain * &s.h) * &track.cov;
    Ok(KfUpdate { posterior: Gaussian { mean, cov: symmetrize(cov) }, innovation, innovation_cov })
}

/// Measurement-space predictive `N(H mean, R + H P H^T)`.
pub fn predict_measurement(track: &Gaussian, s: &SensorModel) -> Gaussian {
    let mean = &s.h * &track.mean;
    let cov = symmetrize(&s.r + &s.h * &track.cov * s.h.transpose());
    Gaussian { mean, cov }
}

/// Normalized product of Gaussian densities (information-form sum).
pub fn gaussian_product(gs: &[Gaussian]) -> Result<Gaussian> {
    let first = gs.first().ok_or(Error::Config("empty Gaussian product".into()))?;
    let d = first.dim();
    let mut info = DMatrix::zeros(d, d);
    let mut info_mean = DVector::zeros(d);
    for g in gs {
        if g.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: g.dim() });
        }
        let chol = cholesky(&g.cov, "gaussian_product factor")?;
        let prec = chol.inverse();
        info_mean += &prec * &g.mean;
        info += prec;
    }
    let chol = cholesky(&info, "summed precision").map_err(|_| Error::Singular("summed precision"))?;
    let cov = symmetrize(chol.inverse());
    let mean = chol.solve(&info_mean);
    Ok(Gaussian { mean, cov })
}

/// `log ∫ sqrt(N1 N2)` via the averaged-covariance form.
pub fn log_bhattacharyya(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::DimensionMismatch { expected: g1.dim(), found: g2.dim() });
    }
    let avg = (&g1.cov + &g2.cov) * 0.5;
    let chol = cholesky(&avg, "averaged covariance").map_err(|_| Error::Singular("averaged covariance"))?;
    let dm = &g1.mean - &g2.mean;
    let maha = dm.dot(&chol.solve(&dm));
    let ld1 = log_det(&g1.cov, "bhattacharyya g1")?;
    let ld2 = log_det(&g2.cov, "bhattacharyya g2")?;
    Ok(-0.125 * maha + 0.25 * (ld1 + ld2) - 0.5 * chol_log_det(&chol))
}

/// Same coefficient through the precision-form expression (separate route, used as a cross-check).
pub fn log_bhattacharyya_precision_form(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::DimensionMismatch { expected: g1.dim(), found: g2.dim() });
    }
    let p1 = cholesky(&g1.cov, "bhattacharyya g1")?.inverse();
    let p2 = cholesky(&g2.cov, "bhattacharyya g2")?.inverse();
    let sum = &p1 + &p2;
    let half = &sum * 0.5;
    let ld_p1 = log_det(&p1, "precision 1")?;
    let ld_p2 = log_det(&p2, "precision 2")?;
    let ld_half = log_det(&half, "averaged precision")?;
    let a1 = &p1 * &g1.mean;
    let a2 = &p2 * &g2.mean;
    let quad = g1.mean.dot(&a1) + g2.mean.dot(&a2);
    let b = &a1 + &a2;
    let sum_chol = cholesky(&sum, "summed precision").map_err(|_| Error::Singular("summed precision"))?;
    let cross = b.dot(&sum_chol.solve(&b));
    Ok(0.25 * (ld_p1 + ld_p2) - 0.5 * ld_half - 0.25 * quad + 0.25 * cross)
}

/// Bhattacharyya coefficient in `(0, 1]`.
pub fn bhattacharyya_coefficient(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    Ok(log_bhattacharyya(g1, g2)?.exp())
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}
