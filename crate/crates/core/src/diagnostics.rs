//! Information measures for the single-object, two-sensor linear-Gaussian case.
//!
//! Every density of interest is a conditional of one joint Gaussian over the
//! states and both measurement histories, so divergences, mutual information
//! and entropies are all closed form. Divergences are averaged over the
//! histories: their covariances are data-independent and their means are
//! linear in the conditioning data.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgss::{cholesky, chol_log_det, kf_predict, kf_update, log_det, symmetrize, Gaussian, MotionModel, SensorModel};

const LN_2PI_E: f64 = 2.837_877_066_409_345_5;

/// Slack used by the report flags.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// `D(g1 ‖ g2)` in nats.
pub fn gaussian_kld(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::DimensionMismatch { expected: g1.dim(), found: g2.dim() });
    }
    let c2 = cholesky(&g2.cov, "kld reference covariance")?;
    let dm = &g1.mean - &g2.mean;
    let tr = (c2.solve(&g1.cov)).trace();
    let ld1 = log_det(&g1.cov, "kld covariance")?;
    Ok(0.5 * (tr - g1.dim() as f64 + chol_log_det(&c2) - ld1 + dm.dot(&c2.solve(&dm))))
}

/// Differential entropy `½ log((2πe)^d |Σ|)`; `-inf` for a singular `Σ`.
pub fn gaussian_entropy(g: &Gaussian) -> f64 {
    cov_entropy(&g.cov)
}

fn cov_entropy(cov: &DMatrix<f64>) -> f64 {
    let d = cov.nrows() as f64;
    let ld = match nalgebra::Cholesky::new(symmetrize(cov.clone())) {
        Some(c) => chol_log_det(&c),
        None => cov.determinant().ln(),
    };
    0.5 * (d * LN_2PI_E + ld)
}

/// One object observed by two sensors, `zˢ_k = H_s (x_k - θ_s) + v`.
///
/// `prior` is the state before step 1, so `x_1 = F x_0 + w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseJointModel {
    pub motion: MotionModel,
    pub sensor_i: SensorModel,
    pub sensor_j: SensorModel,
    pub theta_i: DVector<f64>,
    pub theta_j: DVector<f64>,
    pub prior: Gaussian,
    pub horizon: usize,
}

/// Gaussian conditional `A | B` with mean `E[A] + gain (b - E[B])`.
struct Conditional {
    cov: DMatrix<f64>,
    gain: DMatrix<f64>,
}

impl PairwiseJointModel {
    pub fn new(
        motion: MotionModel,
        sensor_i: SensorModel,
        sensor_j: SensorModel,
        theta_i: DVector<f64>,
        theta_j: DVector<f64>,
        prior: Gaussian,
        horizon: usize,
    ) -> Result<Self> {
        let nx = motion.f.nrows();
        for n in [motion.f.ncols(), motion.q.nrows(), sensor_i.h.ncols(), sensor_j.h.ncols(), theta_i.len(), theta_j.len(), prior.dim()] {
            if n != nx {
                return Err(Error::DimensionMismatch { expected: nx, found: n });
            }
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(Self { motion, sensor_i, sensor_j, theta_i, theta_j, prior, horizon })
    }

    fn nx(&self) -> usize {
        self.motion.f.nrows()
    }

    /// Indices of `x_k` in the joint vector (`k` from 1).
    pub fn x_idx(&self, k: usize) -> Vec<usize> {
        let nx = self.nx();
        ((k - 1) * nx..k * nx).collect()
    }

    pub fn zi_idx(&self, k: usize) -> Vec<usize> {
        let (nx, ni) = (self.nx(), self.sensor_i.meas_dim());
        let base = self.horizon * nx;
        (base + (k - 1) * ni..base + k * ni).collect()
    }

    pub fn zj_idx(&self, k: usize) -> Vec<usize> {
        let (nx, ni, nj) = (self.nx(), self.sensor_i.meas_dim(), self.sensor_j.meas_dim());
        let base = self.horizon * (nx + ni);
        (base + (k - 1) * nj..base + k * nj).collect()
    }

    fn hist_i(&self, k: usize) -> Vec<usize> {
        (1..k).flat_map(|a| self.zi_idx(a)).collect()
    }

    fn hist_j(&self, k: usize) -> Vec<usize> {
        (1..k).flat_map(|a| self.zj_idx(a)).collect()
    }

    /// Joint Gaussian of `(x_1..x_K, zⁱ_1..zⁱ_K, zʲ_1..zʲ_K)`.
    pub fn joint(&self) -> Gaussian {
        let (nx, k_max) = (self.nx(), self.horizon);
        let (f, q) = (&self.motion.f, &self.motion.q);
        let mut means = Vec::with_capacity(k_max);
        let mut covs = Vec::with_capacity(k_max);
        let (mut m, mut p) = (self.prior.mean.clone(), self.prior.cov.clone());
        for _ in 0..k_max {
            m = f * &m;
            p = symmetrize(f * &p * f.transpose() + q);
            means.push(m.clone());
            covs.push(p.clone());
        }
        // state_cross[b][a] = Cov(x_b, x_a) = F^(b-a) P_a for a <= b.
        let n = k_max * (nx + self.sensor_i.meas_dim() + self.sensor_j.meas_dim());
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        let mut state_cross = vec![vec![DMatrix::zeros(nx, nx); k_max]; k_max];
        for a in 0..k_max {
            let mut c = covs[a].clone();
            for b in a..k_max {
                if b > a {
                    c = f * &c;
                }
                state_cross[b][a] = c.clone();
                state_cross[a][b] = c.transpose();
            }
        }
        let blocks: Vec<(Box<dyn Fn(usize) -> Vec<usize> + '_>, DMatrix<f64>, Option<(&SensorModel, &DVector<f64>)>)> = vec![
            (Box::new(|k| self.x_idx(k)), DMatrix::identity(nx, nx), None),
            (Box::new(|k| self.zi_idx(k)), self.sensor_i.h.clone(), Some((&self.sensor_i, &self.theta_i))),
            (Box::new(|k| self.zj_idx(k)), self.sensor_j.h.clone(), Some((&self.sensor_j, &self.theta_j))),
        ];
        for (bi, (idx_a, h_a, s_a)) in blocks.iter().enumerate() {
            for a in 0..k_max {
                let ia = idx_a(a + 1);
                let mu = match s_a {
                    Some((s, th)) => &s.h * (&means[a] - *th),
                    None => means[a].clone(),
                };
                for (r, &row) in ia.iter().enumerate() {
                    mean[row] = mu[r];
                }
                for (bj, (idx_b, h_b, _)) in blocks.iter().enumerate() {
                    for b in 0..k_max {
                        let ib = idx_b(b + 1);
                        let mut blk = h_a * &state_cross[a][b] * h_b.transpose();
                        if bi == bj && a == b {
                            if let Some((s, _)) = s_a {
                                blk += &s.r;
                            }
                        }
                        for (r, &row) in ia.iter().enumerate() {
                            for (c, &col) in ib.iter().enumerate() {
                                cov[(row, col)] = blk[(r, c)];
                            }
                        }
                    }
                }
            }
        }
        Gaussian { mean, cov: symmetrize(cov) }
    }

    fn conditional(cov: &DMatrix<f64>, a: &[usize], b: &[usize]) -> Result<Conditional> {
        let saa = cov.select_rows(a).select_columns(a);
        if b.is_empty() {
            return Ok(Conditional { cov: saa, gain: DMatrix::zeros(a.len(), 0) });
        }
        let sab = cov.select_rows(a).select_columns(b);
        let sbb = cov.select_rows(b).select_columns(b);
        let chol = cholesky(&sbb, "conditioning covariance")?;
        let gain = chol.solve(&sab.transpose()).transpose();
        let c = symmetrize(&saa - &gain * sab.transpose());
        Ok(Conditional { cov: c, gain })
    }

    /// Conditional of `a` given `b`, with its gain spread over the columns of `universe`.
    fn conditional_on(cov: &DMatrix<f64>, a: &[usize], b: &[usize], universe: &[usize]) -> Result<Conditional> {
        let c = Self::conditional(cov, a, b)?;
        let mut gain = DMatrix::zeros(a.len(), universe.len());
        for (col, bi) in b.iter().enumerate() {
            let pos = universe.iter().position(|u| u == bi).expect("conditioning set inside universe");
            gain.set_column(pos, &c.gain.column(col));
        }
        Ok(Conditional { cov: c.cov, gain })
    }

    fn entropy_given(cov: &DMatrix<f64>, a: &[usize], b: &[usize]) -> Result<f64> {
        Ok(cov_entropy(&Self::conditional(cov, a, b)?.cov))
    }
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().chain(b).copied().collect()
}

/// Joint predictive density of `(zⁱ_k, zʲ_k)` from both measured histories,
/// by Kalman filtering the stacked measurements.
pub fn centralized_pair_update(model: &PairwiseJointModel, zi: &[DVector<f64>], zj: &[DVector<f64>], k: usize) -> Result<Gaussian> {
    if k == 0 || k > model.horizon || zi.len() + 1 < k || zj.len() + 1 < k {
        return Err(Error::WindowOutOfRange { start: 1, end: k, len: zi.len().min(zj.len()) + 1 });
    }
    let h = stack_rows(&model.sensor_i.h, &model.sensor_j.h);
    let (ni, nj) = (model.sensor_i.meas_dim(), model.sensor_j.meas_dim());
    let mut r = DMatrix::zeros(ni + nj, ni + nj);
    r.view_mut((0, 0), (ni, ni)).copy_from(&model.sensor_i.r);
    r.view_mut((ni, ni), (nj, nj)).copy_from(&model.sensor_j.r);
    let stacked = SensorModel::new(h.clone(), r)?;
    let shift = stack_vec(&(&model.sensor_i.h * &model.theta_i), &(&model.sensor_j.h * &model.theta_j));
    let mut track = model.prior.clone();
    for a in 0..k - 1 {
        track = kf_predict(&track, &model.motion)?;
        let z = stack_vec(&zi[a], &zj[a]) + &shift;
        track = kf_update(&track, &z, &stacked)?.posterior;
    }
    let pred = kf_predict(&track, &model.motion)?;
    Ok(Gaussian { mean: &h * &pred.mean - shift, cov: symmetrize(&h * &pred.cov * h.transpose() + &stacked.r) })
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.rows_mut(0, a.nrows()).copy_from(a);
    m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    m
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// History-averaged divergences and bounds at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KldReport {
    pub step: usize,
    /// `E D(p ‖ q)`: centralized update against the quad-term update.
    pub d_pq: f64,
    /// `E D(p ‖ u)`: centralized update against the dual-term update.
    pub d_pu: f64,
    /// Average of the two history mutual-information terms.
    pub mi_bound: f64,
    /// Weighted state-entropy reductions bounding the quad term.
    pub entropy_bound: f64,
    /// The corresponding entropy bound of the dual term.
    pub dual_entropy_bound: f64,
    /// `E log κ_k`.
    pub expected_log_kappa: f64,
}

impl KldReport {
    pub fn pq_within_mi_bound(&self) -> bool {
        self.d_pq <= self.mi_bound + BOUND_TOLERANCE
    }

    pub fn mi_within_entropy_bound(&self) -> bool {
        self.mi_bound <= self.entropy_bound + BOUND_TOLERANCE
    }

    pub fn quad_below_dual(&self) -> bool {
        self.d_pq < self.d_pu
    }

    pub fn quad_bound_below_dual_bound(&self) -> bool {
        self.entropy_bound <= self.dual_entropy_bound + BOUND_TOLERANCE
    }
}

/// `E_h D(N(A_p h, Σ_p) ‖ N(A_t h, Σ_t))` for zero-mean-deviation history `h ~ N(·, Σ_h)`.
fn expected_kld(p: &Conditional, t: &Conditional, cov_h: &DMatrix<f64>) -> Result<f64> {
    let ct = cholesky(&t.cov, "divergence reference covariance")?;
    let d = p.cov.nrows() as f64;
    let diff = &p.gain - &t.gain;
    let spread = &diff * cov_h * diff.transpose();
    let tr = ct.solve(&(&p.cov + spread)).trace();
    Ok(0.5 * (tr - d + chol_log_det(&ct) - log_det(&p.cov, "divergence covariance")?))
}

/// Normalized geometric mean of two Gaussians, as a conditional on a shared universe.
fn geometric_mean(a: &Conditional, b: &Conditional) -> Result<Conditional> {
    let pa = cholesky(&a.cov, "geometric mean factor")?.inverse();
    let pb = cholesky(&b.cov, "geometric mean factor")?.inverse();
    let info = (&pa + &pb) * 0.5;
    let cov = symmetrize(cholesky(&info, "geometric mean precision")?.inverse());
    let gain = &cov * (&pa * &a.gain + &pb * &b.gain) * 0.5;
    Ok(Conditional { cov, gain })
}

/// Divergences, bounds and `E log κ` at step `k` (from 1).
pub fn quad_dual_kld_report(model: &PairwiseJointModel, k: usize) -> Result<KldReport> {
    if k == 0 || k > model.horizon {
        return Err(Error::WindowOutOfRange { start: 1, end: k, len: model.horizon });
    }
    let joint = model.joint();
    let cov = &joint.cov;
    let (hi, hj) = (model.hist_i(k), model.hist_j(k));
    let hall = union(&hi, &hj);
    let (zik, zjk) = (model.zi_idx(k), model.zj_idx(k));
    let zk = union(&zik, &zjk);
    let ni = zik.len();
    let cov_h = cov.select_rows(&hall).select_columns(&hall);
    let cond = |a: &[usize], b: &[usize]| PairwiseJointModel::conditional_on(cov, a, b, &hall);

    let p = cond(&zk, &hall)?;
    let g_i = cond(&zk, &hi)?;
    let g_j = cond(&zk, &hj)?;
    let q = geometric_mean(&g_i, &g_j)?;
    let ui = cond(&zik, &hj)?;
    let uj = cond(&zjk, &hi)?;
    let mut u_cov = DMatrix::zeros(zk.len(), zk.len());
    u_cov.view_mut((0, 0), (ni, ni)).copy_from(&ui.cov);
    u_cov.view_mut((ni, ni), (zjk.len(), zjk.len())).copy_from(&uj.cov);
    let u = Conditional { cov: u_cov, gain: stack_rows(&ui.gain, &uj.gain) };

    let d_pq = expected_kld(&p, &q, &cov_h)?;
    let d_pu = expected_kld(&p, &u, &cov_h)?;

    let h = |a: &[usize], b: &[usize]| PairwiseJointModel::entropy_given(cov, a, b);
    let mi_bound = 0.5 * (h(&zk, &hj)? - h(&zk, &hall)?) + 0.5 * (h(&zk, &hi)? - h(&zk, &hall)?);

    let xk = model.x_idx(k);
    let hj_now = union(&hj, &zjk);
    let hi_now = union(&hi, &zik);
    let h_all_x = h(&xk, &hall)?;
    let entropy_bound = 0.5 * ((h(&xk, &hj)? - h_all_x) + (h(&xk, &hi)? - h_all_x))
        + 0.5 * ((h(&xk, &hj_now)? - h(&xk, &union(&hj_now, &hi))?) + (h(&xk, &hi_now)? - h(&xk, &union(&hi_now, &hj))?));
    let dual_entropy_bound = h(&xk, &hj)? + h(&xk, &hi)? - h_all_x - h(&xk, &union(&hall, &zjk))?.max(h(&xk, &union(&hall, &zik))?);

    let avg = symmetrize((&g_i.cov + &g_j.cov) * 0.5);
    let c_avg = cholesky(&avg, "averaged covariance")?;
    let dg = &g_i.gain - &g_j.gain;
    let maha = c_avg.solve(&(&dg * &cov_h * dg.transpose())).trace();
    let expected_log_kappa = -0.125 * maha + 0.25 * (log_det(&g_i.cov, "kappa factor")? + log_det(&g_j.cov, "kappa factor")?)
        - 0.5 * chol_log_det(&c_avg);

    Ok(KldReport { step: k, d_pq, d_pu, mi_bound, entropy_bound, dual_entropy_bound, expected_log_kappa })
}

/// Random two-sensor instance with identical sensors and a constant-velocity model.
pub fn random_symmetric_instance(seed: u64) -> Result<PairwiseJointModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = rng.random_range(0.5..2.0);
    let sigma2 = rng.random_range(0.05..2.0);
    let q1: f64 = rng.random_range(0.1..1.0);
    let q3: f64 = rng.random_range(0.1..1.0);
    let q2 = rng.random_range(0.0..1.0) * (q1 * q3).sqrt();
    let motion = MotionModel::new(dt, sigma2, q1, q2, q3)?;
    let sensor = SensorModel::position(rng.random_range(1.0..20.0))?;
    let pos_var = rng.random_range(10.0..1e4);
    let vel_var = rng.random_range(1.0..100.0);
    let prior = Gaussian::new(DVector::zeros(4), DMatrix::from_diagonal(&DVector::from_vec(vec![pos_var, pos_var, vel_var, vel_var])))?;
    let theta = |rng: &mut ChaCha8Rng| DVector::from_vec(vec![rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), 0.0, 0.0]);
    let (ti, tj) = (theta(&mut rng), theta(&mut rng));
    let horizon = rng.random_range(2..=6);
    PairwiseJointModel::new(motion, sensor.clone(), sensor, ti, tj, prior, horizon)
}

/// One CSV line of a diagnostics sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KldRow {
    pub seed: u64,
    pub step: usize,
    pub d_pq: f64,
    pub d_pu: f64,
    pub mi_bound: f64,
    pub entropy_bound: f64,
    pub dual_entropy_bound: f64,
    pub expected_log_kappa: f64,
    pub pq_within_mi_bound: bool,
    pub mi_within_entropy_bound: bool,
    pub quad_below_dual: bool,
    pub quad_bound_below_dual_bound: bool,
}

impl KldRow {
    pub fn new(seed: u64, r: &KldReport) -> Self {
        Self {
            seed,
            step: r.step,
            d_pq: r.d_pq,
            d_pu: r.d_pu,
            mi_bound: r.mi_bound,
            entropy_bound: r.entropy_bound,
            dual_entropy_bound: r.dual_entropy_bound,
            expected_log_kappa: r.expected_log_kappa,
            pq_within_mi_bound: r.pq_within_mi_bound(),
            mi_within_entropy_bound: r.mi_within_entropy_bound(),
            quad_below_dual: r.quad_below_dual(),
            quad_bound_below_dual_bound: r.quad_bound_below_dual_bound(),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.pq_within_mi_bound && self.mi_within_entropy_bound && self.quad_below_dual && self.quad_bound_below_dual_bound
    }
}

/// Reports at the last step of `count` random instances starting from `first_seed`.
pub fn symmetric_sweep(first_seed: u64, count: usize) -> Result<Vec<KldRow>> {
    use rayon::prelude::*;
    (first_seed..first_seed + count as u64)
        .into_par_iter()
        .map(|seed| {
            let m = random_symmetric_instance(seed)?;
            Ok(KldRow::new(seed, &quad_dual_kld_report(&m, m.horizon)?))
        })
        .collect()
}

pub fn write_kld_csv(path: &Path, rows: &[KldRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_kld_csv(path: &Path) -> Result<Vec<KldRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
