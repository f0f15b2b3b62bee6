//! Pairwise offset likelihoods built from two sensors' local filtering outputs.
//!
//! The quad-term update at step `k` is
//! `log q_k = ½(log r_ij + log s_j) + ½(log r_ji + log s_i) - log κ_k`, where
//! `r_ij` scores sensor `i`'s measurements against sensor `j`'s posterior
//! tracks mapped into frame `i`, `s_i` is `i`'s own association scale and
//! `κ_k` is a product of Bhattacharyya coefficients. The dual-term baseline
//! keeps only the two cross-prediction terms.
//!
//! Offsets act as pure translations, so every covariance is independent of
//! `θ`. [`EdgeEvaluator`] exploits this by caching all inverses and
//! normalizers once per edge; the free functions are the direct reference.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::assignment::{auction_assign, auction_row_major, is_permutation};
use crate::error::{Error, Result};
use crate::lgss::{
    apply_offset, gaussian_logpdf, log_bhattacharyya, log_bhattacharyya_precision_form, predict_measurement, Gaussian,
    OffsetTransform, SensorModel,
};
use crate::tracker::{FilterOutput, FilterStep, TrackSet};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Slack on the `κ ≤ 1` sanity check.
pub const KAPPA_SLACK: f64 = 1e-8;

/// Object correspondence between two sensors' track lists at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceEstimate {
    pub step: usize,
    /// Track `m` of the measuring sensor -> track `gamma[m]` of the other.
    pub gamma: Vec<usize>,
    /// Optimal total of the cross cost matrix.
    pub assignment_logcost: f64,
}

/// `d(o, m) = log N(z_o; H x_m + shift, R + H P_m H^T)` with the other
/// sensor's tracks `x_m` mapped from frame `theta_other` into `theta_own`.
pub fn cross_cost_matrix(
    z_own: &[DVector<f64>],
    tracks_other: &TrackSet,
    sensor_own: &SensorModel,
    theta_own: &OffsetTransform,
    theta_other: &OffsetTransform,
) -> Result<DMatrix<f64>> {
    let m = tracks_other.len();
    if z_own.len() != m {
        return Err(Error::ClosedWorld { expected: m, found: z_own.len() });
    }
    let mut d = DMatrix::zeros(m, m);
    for (col, track) in tracks_other.tracks.iter().enumerate() {
        let mapped = apply_offset(track, theta_other, theta_own);
        let pz = predict_measurement(&mapped, sensor_own);
        for (row, z) in z_own.iter().enumerate() {
            d[(row, col)] = gaussian_logpdf(z, &pz)?;
        }
    }
    Ok(d)
}

/// ML correspondence from sensor `i`'s measurements to `j`'s posterior tracks.
pub fn estimate_correspondence(
    step_i: &FilterStep,
    post_j: &TrackSet,
    sensor_i: &SensorModel,
    theta_i: &OffsetTransform,
    theta_j: &OffsetTransform,
) -> Result<CorrespondenceEstimate> {
    let d = cross_cost_matrix(&step_i.measurements, post_j, sensor_i, theta_i, theta_j)?;
    let sol = auction_assign(&d)?;
    let gamma = step_i.rho.iter().map(|&o| sol.perm[o]).collect();
    Ok(CorrespondenceEstimate { step: step_i.step, gamma, assignment_logcost: sol.total_logcost })
}

fn check_gamma(gamma: &[usize], m: usize) -> Result<()> {
    if gamma.len() != m || !is_permutation(gamma) {
        return Err(Error::InvalidPermutation(format!("{gamma:?} on {m} objects")));
    }
    Ok(())
}

/// `log r_ij = Σ_o d(o, γ(τ_i(o)))`.
pub fn eval_r(
    step_i: &FilterStep,
    post_j: &TrackSet,
    sensor_i: &SensorModel,
    theta_i: &OffsetTransform,
    theta_j: &OffsetTransform,
    gamma: &[usize],
) -> Result<f64> {
    check_gamma(gamma, post_j.len())?;
    if step_i.tau.len() != gamma.len() {
        return Err(Error::InvalidPermutation(format!("association {:?} vs correspondence {gamma:?}", step_i.tau)));
    }
    let d = cross_cost_matrix(&step_i.measurements, post_j, sensor_i, theta_i, theta_j)?;
    Ok(step_i.tau.iter().enumerate().map(|(o, &m)| d[(o, gamma[m])]).sum())
}

/// Predicted and posterior tracks of one sensor at one step, with its frame.
#[derive(Debug, Clone, Copy)]
pub struct SensorMarginals<'a> {
    pub predicted: &'a TrackSet,
    pub posterior: &'a TrackSet,
    pub sensor: &'a SensorModel,
    pub theta: &'a OffsetTransform,
}

fn stack(a: &Gaussian, b: &Gaussian) -> Gaussian {
    let (da, db) = (a.dim(), b.dim());
    let mut mean = DVector::zeros(da + db);
    mean.rows_mut(0, da).copy_from(&a.mean);
    mean.rows_mut(da, db).copy_from(&b.mean);
    let mut cov = DMatrix::zeros(da + db, da + db);
    cov.view_mut((0, 0), (da, da)).copy_from(&a.cov);
    cov.view_mut((da, da), (db, db)).copy_from(&b.cov);
    Gaussian { mean, cov }
}

/// The two joint `(z_i, z_j)` predictive densities compared by `κ` for each
/// matched pair `(m, gamma[m])`: the first built from sensor `i`'s history,
/// the second from sensor `j`'s.
pub fn kappa_factor_densities(
    mi: &SensorMarginals<'_>,
    mj: &SensorMarginals<'_>,
    gamma: &[usize],
) -> Result<Vec<(Gaussian, Gaussian)>> {
    let m = mi.predicted.len();
    for ts in [mi.posterior, mj.predicted, mj.posterior] {
        if ts.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: ts.len() });
        }
    }
    check_gamma(gamma, m)?;
    Ok(gamma
        .iter()
        .enumerate()
        .map(|(a, &b)| {
            let own_i = predict_measurement(&mi.predicted.tracks[a], mi.sensor);
            let i_in_j = predict_measurement(&apply_offset(&mi.posterior.tracks[a], mi.theta, mj.theta), mj.sensor);
            let j_in_i = predict_measurement(&apply_offset(&mj.posterior.tracks[b], mj.theta, mi.theta), mi.sensor);
            let own_j = predict_measurement(&mj.predicted.tracks[b], mj.sensor);
            (stack(&own_i, &i_in_j), stack(&j_in_i, &own_j))
        })
        .collect())
}

/// Route used to evaluate each Bhattacharyya factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KappaForm {
    /// Averaged-covariance expression.
    Standard,
    /// Precision-weighted expression.
    Precision,
}

/// `log κ_k`; errors if it exceeds zero by more than [`KAPPA_SLACK`].
pub fn eval_kappa(mi: &SensorMarginals<'_>, mj: &SensorMarginals<'_>, gamma: &[usize], form: KappaForm) -> Result<f64> {
    let mut total = 0.0;
    for (g1, g2) in kappa_factor_densities(mi, mj, gamma)? {
        total += match form {
            KappaForm::Standard => log_bhattacharyya(&g1, &g2)?,
            KappaForm::Precision => log_bhattacharyya_precision_form(&g1, &g2)?,
        };
    }
    if total > KAPPA_SLACK {
        return Err(Error::Numerical(format!("log kappa = {total} exceeds zero")));
    }
    Ok(total)
}

/// All factors of one quad-term step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub step: usize,
    pub log_r_ij: f64,
    pub log_r_ji: f64,
    pub log_s_i: f64,
    pub log_s_j: f64,
    pub log_kappa: f64,
    /// Correspondence `i -> j` estimated at this step.
    pub gamma_ij: Vec<usize>,
    /// Correspondence `j -> i` estimated at this step.
    pub gamma_ji: Vec<usize>,
}

impl StepTerms {
    pub fn log_q(&self) -> f64 {
        quad_update(self.log_r_ij, self.log_s_j, self.log_r_ji, self.log_s_i, self.log_kappa)
    }

    /// The geometric mean of the two chain-rule products, before scaling.
    pub fn log_unscaled(&self) -> f64 {
        self.log_q() + self.log_kappa
    }
}

/// `log q_k = ½(log r_ij + log s_j) + ½(log r_ji + log s_i) - log κ_k`.
pub fn quad_update(log_r_ij: f64, log_s_j: f64, log_r_ji: f64, log_s_i: f64, log_kappa: f64) -> f64 {
    0.5 * (log_r_ij + log_s_j) + 0.5 * (log_r_ji + log_s_i) - log_kappa
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvaluation {
    pub theta_i: [f64; 2],
    pub theta_j: [f64; 2],
    pub log_quad: f64,
    pub steps: Vec<StepTerms>,
}

fn check_windows(out_i: &FilterOutput, out_j: &FilterOutput) -> Result<()> {
    if out_i.window_len() != out_j.window_len() || out_i.num_objects() != out_j.num_objects() {
        return Err(Error::WindowMismatch(format!(
            "{} steps x {} objects vs {} steps x {} objects",
            out_i.window_len(),
            out_i.num_objects(),
            out_j.window_len(),
            out_j.num_objects()
        )));
    }
    if out_i.steps.iter().zip(&out_j.steps).any(|(a, b)| a.step != b.step) {
        return Err(Error::WindowMismatch("step indices differ".into()));
    }
    Ok(())
}

/// Quad-term log-likelihood over the window, with per-step factors.
///
/// `κ_k` pairs tracks through the `i -> j` correspondence of step `k - 1`
/// (of step 1 itself on the first step).
pub fn quad_likelihood(
    out_i: &FilterOutput,
    out_j: &FilterOutput,
    sensor_i: &SensorModel,
    sensor_j: &SensorModel,
    theta_i: &OffsetTransform,
    theta_j: &OffsetTransform,
) -> Result<EdgeEvaluation> {
    check_windows(out_i, out_j)?;
    let mut steps: Vec<StepTerms> = Vec::with_capacity(out_i.window_len());
    for (si, sj) in out_i.steps.iter().zip(&out_j.steps) {
        let c_ij = estimate_correspondence(si, &sj.posterior, sensor_i, theta_i, theta_j)?;
        let c_ji = estimate_correspondence(sj, &si.posterior, sensor_j, theta_j, theta_i)?;
        let log_r_ij = eval_r(si, &sj.posterior, sensor_i, theta_i, theta_j, &c_ij.gamma)?;
        let log_r_ji = eval_r(sj, &si.posterior, sensor_j, theta_j, theta_i, &c_ji.gamma)?;
        let pairing = steps.last().map_or(&c_ij.gamma, |prev| &prev.gamma_ij);
        let mi = SensorMarginals { predicted: &si.predicted, posterior: &si.posterior, sensor: sensor_i, theta: theta_i };
        let mj = SensorMarginals { predicted: &sj.predicted, posterior: &sj.posterior, sensor: sensor_j, theta: theta_j };
        let log_kappa = eval_kappa(&mi, &mj, pairing, KappaForm::Standard)?;
        steps.push(StepTerms {
            step: si.step,
            log_r_ij,
            log_r_ji,
            log_s_i: si.log_s,
            log_s_j: sj.log_s,
            log_kappa,
            gamma_ij: c_ij.gamma,
            gamma_ji: c_ji.gamma,
        });
    }
    let log_quad = steps.iter().map(StepTerms::log_q).sum();
    Ok(EdgeEvaluation { theta_i: theta_i.theta.into(), theta_j: theta_j.theta.into(), log_quad, steps })
}

/// `log p(Z_i,k | Z_j,1:k-1, θ)`: sensor `i`'s measurements against `j`'s
/// predicted tracks, under the best assignment.
pub fn dual_cross_term(
    step_i: &FilterStep,
    pred_j: &TrackSet,
    sensor_i: &SensorModel,
    theta_i: &OffsetTransform,
    theta_j: &OffsetTransform,
) -> Result<f64> {
    let d = cross_cost_matrix(&step_i.measurements, pred_j, sensor_i, theta_i, theta_j)?;
    Ok(auction_assign(&d)?.total_logcost)
}

/// Dual-term log-likelihood over the window; carries no normalization term.
pub fn dual_likelihood(
    out_i: &FilterOutput,
    out_j: &FilterOutput,
    sensor_i: &SensorModel,
    sensor_j: &SensorModel,
    theta_i: &OffsetTransform,
    theta_j: &OffsetTransform,
) -> Result<f64> {
    check_windows(out_i, out_j)?;
    let mut total = 0.0;
    for (si, sj) in out_i.steps.iter().zip(&out_j.steps) {
        total += dual_cross_term(si, &sj.predicted, sensor_i, theta_i, theta_j)?;
        total += dual_cross_term(sj, &si.predicted, sensor_j, theta_j, theta_i)?;
    }
    Ok(total)
}

/// Which pairwise likelihood serves as the edge potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodVariant {
    #[default]
    Quad,
    Dual,
}

impl std::str::FromStr for LikelihoodVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quad" => Ok(Self::Quad),
            "dual" => Ok(Self::Dual),
            other => Err(Error::Config(format!("unknown likelihood variant '{other}' (expected quad or dual)"))),
        }
    }
}

impl std::fmt::Display for LikelihoodVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Quad => "quad",
            Self::Dual => "dual",
        })
    }
}

fn v2(v: &DVector<f64>) -> Vector2<f64> {
    Vector2::new(v[0], v[1])
}

fn m2(m: &DMatrix<f64>) -> Matrix2<f64> {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

fn inv_and_logdet(s: &Matrix2<f64>, what: &'static str) -> Result<(Matrix2<f64>, f64)> {
    let sym = (s + s.transpose()) * 0.5;
    let det = sym.determinant();
    if !(det > 0.0 && sym[(0, 0)] > 0.0) {
        return Err(Error::NotPositiveDefinite(what));
    }
    let inv = sym.try_inverse().ok_or(Error::Singular(what))?;
    Ok((inv, det.ln()))
}

/// Own measurements against the other sensor's tracks; only a translation
/// of the track means depends on the offsets.
#[derive(Debug, Clone)]
struct CrossBlock {
    z: Vec<Vector2<f64>>,
    mean: Vec<Vector2<f64>>,
    info: Vec<Matrix2<f64>>,
    log_norm: Vec<f64>,
}

impl CrossBlock {
    fn new(z: &[DVector<f64>], tracks: &TrackSet, sensor: &SensorModel) -> Result<Self> {
        let mut mean = Vec::with_capacity(tracks.len());
        let mut info = Vec::with_capacity(tracks.len());
        let mut log_norm = Vec::with_capacity(tracks.len());
        for t in &tracks.tracks {
            let pz = predict_measurement(t, sensor);
            let (inv, ld) = inv_and_logdet(&m2(&pz.cov), "cross innovation covariance")?;
            mean.push(v2(&pz.mean));
            info.push(inv);
            log_norm.push(-LN_2PI - 0.5 * ld);
        }
        Ok(Self { z: z.iter().map(v2).collect(), mean, info, log_norm })
    }

    /// Row-major `d(o, m)` with track means translated by `shift`.
    fn fill(&self, shift: &Vector2<f64>, out: &mut [f64]) {
        let n = self.mean.len();
        for (o, z) in self.z.iter().enumerate() {
            for m in 0..n {
                let r = z - self.mean[m] - shift;
                out[o * n + m] = self.log_norm[m] - 0.5 * r.dot(&(self.info[m] * r));
            }
        }
    }
}

/// Per-pair constants of the κ factors: `log BC = c - ⅛ Σ_b (a_b - δ)ᵀ W_b (a_b - δ)`.
#[derive(Debug, Clone)]
struct KappaBlock {
    n: usize,
    a1: Vec<Vector2<f64>>,
    a2: Vec<Vector2<f64>>,
    w1: Vec<Matrix2<f64>>,
    w2: Vec<Matrix2<f64>>,
    c: Vec<f64>,
}

impl KappaBlock {
    fn new(si: &FilterStep, sj: &FilterStep, sensor_i: &SensorModel, sensor_j: &SensorModel) -> Result<Self> {
        let n = si.predicted.len();
        let pz = |t: &Gaussian, s: &SensorModel| -> (Vector2<f64>, Matrix2<f64>) {
            let g = predict_measurement(t, s);
            (v2(&g.mean), m2(&g.cov))
        };
        let own_i: Vec<_> = si.predicted.tracks.iter().map(|t| pz(t, sensor_i)).collect();
        let i_in_j: Vec<_> = si.posterior.tracks.iter().map(|t| pz(t, sensor_j)).collect();
        let j_in_i: Vec<_> = sj.posterior.tracks.iter().map(|t| pz(t, sensor_i)).collect();
        let own_j: Vec<_> = sj.predicted.tracks.iter().map(|t| pz(t, sensor_j)).collect();
        let mut block = Self {
            n,
            a1: Vec::with_capacity(n * n),
            a2: Vec::with_capacity(n * n),
            w1: Vec::with_capacity(n * n),
            w2: Vec::with_capacity(n * n),
            c: Vec::with_capacity(n * n),
        };
        for a in 0..n {
            for b in 0..n {
                let (w1, ld_bar1) = inv_and_logdet(&((own_i[a].1 + j_in_i[b].1) * 0.5), "averaged kappa covariance")?;
                let (w2, ld_bar2) = inv_and_logdet(&((i_in_j[a].1 + own_j[b].1) * 0.5), "averaged kappa covariance")?;
                let ld1 = inv_and_logdet(&own_i[a].1, "kappa covariance")?.1 + inv_and_logdet(&i_in_j[a].1, "kappa covariance")?.1;
                let ld2 = inv_and_logdet(&j_in_i[b].1, "kappa covariance")?.1 + inv_and_logdet(&own_j[b].1, "kappa covariance")?.1;
                block.a1.push(own_i[a].0 - j_in_i[b].0);
                block.a2.push(i_in_j[a].0 - own_j[b].0);
                block.w1.push(w1);
                block.w2.push(w2);
                block.c.push(0.25 * (ld1 + ld2) - 0.5 * (ld_bar1 + ld_bar2));
            }
        }
        Ok(block)
    }

    fn log_factor(&self, a: usize, b: usize, delta: &Vector2<f64>) -> f64 {
        let idx = a * self.n + b;
        let d1 = self.a1[idx] - delta;
        let d2 = self.a2[idx] - delta;
        self.c[idx] - 0.125 * (d1.dot(&(self.w1[idx] * d1)) + d2.dot(&(self.w2[idx] * d2)))
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    step: usize,
    r_ij: CrossBlock,
    r_ji: CrossBlock,
    dual_ij: CrossBlock,
    dual_ji: CrossBlock,
    kappa: KappaBlock,
    rho_i: Vec<usize>,
    rho_j: Vec<usize>,
    log_s_i: f64,
    log_s_j: f64,
}

/// Wall-clock totals of potential evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    pub quad_evals: u64,
    pub quad_seconds: f64,
    pub dual_evals: u64,
    pub dual_seconds: f64,
}

impl EvalTiming {
    pub fn quad_ms_per_eval(&self) -> f64 {
        per_eval_ms(self.quad_seconds, self.quad_evals)
    }

    pub fn dual_ms_per_eval(&self) -> f64 {
        per_eval_ms(self.dual_seconds, self.dual_evals)
    }

    pub fn merge(&mut self, other: &EvalTiming) {
        self.quad_evals += other.quad_evals;
        self.quad_seconds += other.quad_seconds;
        self.dual_evals += other.dual_evals;
        self.dual_seconds += other.dual_seconds;
    }
}

fn per_eval_ms(seconds: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        1e3 * seconds / n as f64
    }
}

#[derive(Debug, Default)]
struct Counters {
    quad_evals: AtomicU64,
    quad_nanos: AtomicU64,
    dual_evals: AtomicU64,
    dual_nanos: AtomicU64,
}

/// Cached edge potential for one sensor pair over a fixed window.
///
/// Built once from the two local filter outputs; every evaluation after that
/// costs a handful of 2x2 quadratic forms and two small assignments per step.
#[derive(Debug)]
pub struct EdgeEvaluator {
    steps: Vec<StepCache>,
    m: usize,
    counters: Counters,
}

impl Clone for EdgeEvaluator {
    fn clone(&self) -> Self {
        Self { steps: self.steps.clone(), m: self.m, counters: Counters::default() }
    }
}

impl EdgeEvaluator {
    pub fn new(out_i: &FilterOutput, out_j: &FilterOutput, sensor_i: &SensorModel, sensor_j: &SensorModel) -> Result<Self> {
        check_windows(out_i, out_j)?;
        for s in [sensor_i, sensor_j] {
            if s.meas_dim() != 2 {
                return Err(Error::DimensionMismatch { expected: 2, found: s.meas_dim() });
            }
        }
        let steps = out_i
            .steps
            .iter()
            .zip(&out_j.steps)
            .map(|(si, sj)| {
                Ok(StepCache {
                    step: si.step,
                    r_ij: CrossBlock::new(&si.measurements, &sj.posterior, sensor_i)?,
                    r_ji: CrossBlock::new(&sj.measurements, &si.posterior, sensor_j)?,
                    dual_ij: CrossBlock::new(&si.measurements, &sj.predicted, sensor_i)?,
                    dual_ji: CrossBlock::new(&sj.measurements, &si.predicted, sensor_j)?,
                    kappa: KappaBlock::new(si, sj, sensor_i, sensor_j)?,
                    rho_i: si.rho.clone(),
                    rho_j: sj.rho.clone(),
                    log_s_i: si.log_s,
                    log_s_j: sj.log_s,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { steps, m: out_i.num_objects(), counters: Counters::default() })
    }

    pub fn window_len(&self) -> usize {
        self.steps.len()
    }

    /// Quad-term log-likelihood at `(θ_i, θ_j)`.
    pub fn log_quad(&self, theta_i: &Vector2<f64>, theta_j: &Vector2<f64>) -> f64 {
        let started = Instant::now();
        let value = self.quad_terms(theta_i, theta_j, None);
        self.record(&self.counters.quad_evals, &self.counters.quad_nanos, started);
        value
    }

    /// Dual-term log-likelihood at `(θ_i, θ_j)`.
    pub fn log_dual(&self, theta_i: &Vector2<f64>, theta_j: &Vector2<f64>) -> f64 {
        let started = Instant::now();
        let delta = theta_j - theta_i;
        let back = -delta;
        let mut buf = vec![0.0; self.m * self.m];
        let mut total = 0.0;
        for s in &self.steps {
            total += best_assignment(&s.dual_ij, &delta, self.m, &mut buf).1;
            total += best_assignment(&s.dual_ji, &back, self.m, &mut buf).1;
        }
        self.record(&self.counters.dual_evals, &self.counters.dual_nanos, started);
        total
    }

    pub fn log_potential(&self, variant: LikelihoodVariant, theta_i: &Vector2<f64>, theta_j: &Vector2<f64>) -> f64 {
        match variant {
            LikelihoodVariant::Quad => self.log_quad(theta_i, theta_j),
            LikelihoodVariant::Dual => self.log_dual(theta_i, theta_j),
        }
    }

    /// Quad-term evaluation with every per-step factor; not timed.
    pub fn evaluate_quad(&self, theta_i: &Vector2<f64>, theta_j: &Vector2<f64>) -> EdgeEvaluation {
        let mut steps = Vec::with_capacity(self.steps.len());
        let log_quad = self.quad_terms(theta_i, theta_j, Some(&mut steps));
        EdgeEvaluation { theta_i: (*theta_i).into(), theta_j: (*theta_j).into(), log_quad, steps }
    }

    fn quad_terms(&self, theta_i: &Vector2<f64>, theta_j: &Vector2<f64>, mut detail: Option<&mut Vec<StepTerms>>) -> f64 {
        let n = self.m;
        let delta = theta_j - theta_i;
        let back = -delta;
        let mut buf = vec![0.0; n * n];
        let mut prev_gamma: Option<Vec<usize>> = None;
        let mut total = 0.0;
        for s in &self.steps {
            let (perm_ij, log_r_ij) = best_assignment(&s.r_ij, &delta, n, &mut buf);
            let (perm_ji, log_r_ji) = best_assignment(&s.r_ji, &back, n, &mut buf);
            let gamma_ij: Vec<usize> = s.rho_i.iter().map(|&o| perm_ij[o]).collect();
            let pairing = prev_gamma.as_ref().unwrap_or(&gamma_ij);
            let log_kappa: f64 = pairing.iter().enumerate().map(|(a, &b)| s.kappa.log_factor(a, b, &delta)).sum();
            debug_assert!(log_kappa <= KAPPA_SLACK, "log kappa {log_kappa}");
            let log_q = quad_update(log_r_ij, s.log_s_j, log_r_ji, s.log_s_i, log_kappa);
            total += log_q;
            if let Some(out) = detail.as_deref_mut() {
                out.push(StepTerms {
                    step: s.step,
                    log_r_ij,
                    log_r_ji,
                    log_s_i: s.log_s_i,
                    log_s_j: s.log_s_j,
                    log_kappa,
                    gamma_ij: gamma_ij.clone(),
                    gamma_ji: s.rho_j.iter().map(|&o| perm_ji[o]).collect(),
                });
            }
            prev_gamma = Some(gamma_ij);
        }
        total
    }

    fn record(&self, count: &AtomicU64, nanos: &AtomicU64, started: Instant) {
        let elapsed = started.elapsed().as_nanos() as u64;
        count.fetch_add(1, Ordering::Relaxed);
        nanos.fetch_add(elapsed, Ordering::Relaxed);
    }

    pub fn timing(&self) -> EvalTiming {
        EvalTiming {
            quad_evals: self.counters.quad_evals.load(Ordering::Relaxed),
            quad_seconds: self.counters.quad_nanos.load(Ordering::Relaxed) as f64 * 1e-9,
            dual_evals: self.counters.dual_evals.load(Ordering::Relaxed),
            dual_seconds: self.counters.dual_nanos.load(Ordering::Relaxed) as f64 * 1e-9,
        }
    }
}

fn best_assignment(block: &CrossBlock, shift: &Vector2<f64>, n: usize, buf: &mut [f64]) -> (Vec<usize>, f64) {
    block.fill(shift, buf);
    if buf.iter().any(|c| !c.is_finite()) {
        return ((0..n).collect(), f64::NEG_INFINITY);
    }
    let perm = auction_row_major(buf, n);
    let total = perm.iter().enumerate().map(|(o, &m)| buf[o * n + m]).sum();
    (perm, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgss::MotionModel;
    use crate::scenario::{Scenario, ScenarioConfig};
    use crate::tracker::{filter_step, run_local_filter};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn origin() -> OffsetTransform {
        OffsetTransform::origin()
    }

    fn pair_outputs(seed: u64, i: usize, j: usize) -> (Scenario, FilterOutput, FilterOutput) {
        let cfg = ScenarioConfig { rows: 2, cols: 2, num_steps: 14, seed, ..Default::default() };
        let sc = Scenario::generate(&cfg).unwrap();
        let (motion, sensor) = (cfg.motion_model().unwrap(), cfg.sensor_model().unwrap());
        let oi = run_local_filter(&sc.sensor_measurements(i), 4, 10, &motion, &sensor).unwrap();
        let oj = run_local_filter(&sc.sensor_measurements(j), 4, 10, &motion, &sensor).unwrap();
        (sc, oi, oj)
    }

    fn offset(sc: &Scenario, i: usize) -> OffsetTransform {
        OffsetTransform { theta: sc.network.offset(i) }
    }

    /// Single-object filter step with a hand-placed measurement.
    fn one_object_step(mean: &[f64], var: f64, z: &[f64], sensor: &SensorModel) -> FilterStep {
        let prev = TrackSet { tracks: vec![Gaussian { mean: dv(mean), cov: DMatrix::identity(4, 4) * var }], step: 0 };
        filter_step(&prev, &[dv(z)], &MotionModel::reference(), sensor).unwrap()
    }

    #[test]
    fn single_object_r_at_mode() {
        let sensor = SensorModel::position(10.0).unwrap();
        let sj = one_object_step(&[100.0, 50.0, 2.0, 0.0], 20.0, &[101.0, 49.0], &sensor);
        let (ti, tj) = (OffsetTransform::new(30.0, -20.0), OffsetTransform::new(-5.0, 12.0));
        let mapped = apply_offset(&sj.posterior.tracks[0], &tj, &ti);
        let pz = predict_measurement(&mapped, &sensor);
        let mut si = one_object_step(&[0.0, 0.0, 0.0, 0.0], 20.0, &[0.0, 0.0], &sensor);
        si.measurements = vec![pz.mean.clone()];
        let c = estimate_correspondence(&si, &sj.posterior, &sensor, &ti, &tj).unwrap();
        assert_eq!(c.gamma, vec![0]);
        let r = eval_r(&si, &sj.posterior, &sensor, &ti, &tj, &c.gamma).unwrap();
        let expected = -(2.0 * std::f64::consts::PI * pz.cov.determinant().sqrt()).ln();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn correspondence_at_truth_matches_objects() {
        let cfg = ScenarioConfig { rows: 1, cols: 2, num_steps: 12, sigma_n: 1e-3, seed: 21, ..Default::default() };
        let sc = Scenario::generate(&cfg).unwrap();
        let (motion, sensor) = (cfg.motion_model().unwrap(), cfg.sensor_model().unwrap());
        let oi = run_local_filter(&sc.sensor_measurements(0), 2, 8, &motion, &sensor).unwrap();
        let oj = run_local_filter(&sc.sensor_measurements(1), 2, 8, &motion, &sensor).unwrap();
        // Track index = slot of the object at the seeding step.
        let (seed_i, seed_j) = (&sc.true_permutations[0][1], &sc.true_permutations[1][1]);
        let track_to_object_i = crate::assignment::invert(seed_i);
        let expected: Vec<usize> = track_to_object_i.iter().map(|&obj| seed_j[obj]).collect();
        for (si, sj) in oi.steps.iter().zip(&oj.steps) {
            let c = estimate_correspondence(si, &sj.posterior, &sensor, &offset(&sc, 0), &offset(&sc, 1)).unwrap();
            assert_eq!(c.gamma, expected);
        }
    }

    #[test]
    fn correspondence_follows_track_relabeling() {
        let (sc, oi, oj) = pair_outputs(4, 0, 1);
        let (ti, tj) = (offset(&sc, 0), offset(&sc, 1));
        let si = &oi.steps[3];
        let post = &oj.steps[3].posterior;
        let base = estimate_correspondence(si, post, &sc.config.sensor_model().unwrap(), &ti, &tj).unwrap();
        let swap = [1, 0, 3, 2];
        let relabeled = TrackSet { tracks: swap.iter().map(|&m| post.tracks[m].clone()).collect(), step: post.step };
        let c = estimate_correspondence(si, &relabeled, &sc.config.sensor_model().unwrap(), &ti, &tj).unwrap();
        // New index of old track g is swap^-1(g) = swap(g).
        let expected: Vec<usize> = base.gamma.iter().map(|&g| swap[g]).collect();
        assert_eq!(c.gamma, expected);
    }

    #[test]
    fn single_object_correspondence_is_trivial() {
        let sensor = SensorModel::position(10.0).unwrap();
        let s = one_object_step(&[0.0, 0.0, 1.0, 1.0], 10.0, &[3.0, 4.0], &sensor);
        let c = estimate_correspondence(&s, &s.posterior, &sensor, &origin(), &OffsetTransform::new(500.0, 0.0)).unwrap();
        assert_eq!(c.gamma, vec![0]);
    }

    #[test]
    fn eval_r_rejects_bad_gamma() {
        let sensor = SensorModel::position(10.0).unwrap();
        let s = one_object_step(&[0.0, 0.0, 1.0, 1.0], 10.0, &[3.0, 4.0], &sensor);
        assert!(matches!(eval_r(&s, &s.posterior, &sensor, &origin(), &origin(), &[1]), Err(Error::InvalidPermutation(_))));
    }

    /// `∫ N(z; x + shift, r) N(x; mu, p) dx` on a uniform grid.
    fn quadrature_1d(z: f64, shift: f64, r: f64, mu: f64, p: f64) -> f64 {
        let half = 12.0 * (p.sqrt() + r.sqrt());
        let n = 40_000;
        let h = 2.0 * half / n as f64;
        let norm = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        (0..=n)
            .map(|k| {
                let x = mu - half + k as f64 * h;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * norm(z, x + shift, r) * norm(x, mu, p)
            })
            .sum::<f64>()
            * h
    }

    fn diagonal_track(rng: &mut ChaCha8Rng) -> Gaussian {
        let mean = dv(&[rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), 1.0, -1.0]);
        let cov = DMatrix::from_diagonal(&dv(&[rng.random_range(5.0..60.0), rng.random_range(5.0..60.0), 3.0, 3.0]));
        Gaussian { mean, cov }
    }

    #[test]
    fn r_matches_axis_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sensor = SensorModel::position(4.0).unwrap();
        for _ in 0..5 {
            let post = TrackSet { tracks: vec![diagonal_track(&mut rng)], step: 1 };
            let (ti, tj) = (OffsetTransform::new(rng.random_range(-9.0..9.0), 3.0), OffsetTransform::new(-2.0, rng.random_range(-9.0..9.0)));
            let mut si = one_object_step(&[0.0; 4], 1.0, &[0.0, 0.0], &sensor);
            let z = dv(&[rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)]);
            si.measurements = vec![z.clone()];
            let r = eval_r(&si, &post, &sensor, &ti, &tj, &[0]).unwrap();
            let shift = OffsetTransform::shift(&tj, &ti);
            let g = &post.tracks[0];
            let oracle = quadrature_1d(z[0], shift.x, 16.0, g.mean[0], g.cov[(0, 0)])
                * quadrature_1d(z[1], shift.y, 16.0, g.mean[1], g.cov[(1, 1)]);
            assert!((r - oracle.ln()).abs() < 1e-4, "{r} vs {}", oracle.ln());
        }
    }

    #[test]
    fn dual_matches_axis_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sensor = SensorModel::position(6.0).unwrap();
        let pred_i = TrackSet { tracks: vec![diagonal_track(&mut rng)], step: 1 };
        let pred_j = TrackSet { tracks: vec![diagonal_track(&mut rng)], step: 1 };
        let (ti, tj) = (OffsetTransform::new(4.0, -7.0), OffsetTransform::new(-3.0, 5.0));
        let mut si = one_object_step(&[0.0; 4], 1.0, &[0.0, 0.0], &sensor);
        let mut sj = si.clone();
        si.measurements = vec![dv(&[12.0, -3.0])];
        si.predicted = pred_i.clone();
        sj.measurements = vec![dv(&[-20.0, 8.0])];
        sj.predicted = pred_j.clone();
        let oi = FilterOutput { initial: pred_i.clone(), steps: vec![si.clone()] };
        let oj = FilterOutput { initial: pred_j.clone(), steps: vec![sj.clone()] };
        let total = dual_likelihood(&oi, &oj, &sensor, &sensor, &ti, &tj).unwrap();
        let term = |z: &DVector<f64>, g: &Gaussian, shift: Vector2<f64>| {
            (quadrature_1d(z[0], shift.x, 36.0, g.mean[0], g.cov[(0, 0)]) * quadrature_1d(z[1], shift.y, 36.0, g.mean[1], g.cov[(1, 1)])).ln()
        };
        let oracle = term(&si.measurements[0], &pred_j.tracks[0], OffsetTransform::shift(&tj, &ti))
            + term(&sj.measurements[0], &pred_i.tracks[0], OffsetTransform::shift(&ti, &tj));
        assert!((total - oracle).abs() < 1e-4);
    }

    #[test]
    fn dual_peaks_at_predicted_mean() {
        let sensor = SensorModel::position(1e-3).unwrap();
        let s = one_object_step(&[10.0, 20.0, 1.0, 0.0], 1.0, &[11.0, 20.0], &sensor);
        let (ti, tj) = (origin(), OffsetTransform::new(100.0, 0.0));
        let mapped = apply_offset(&s.predicted.tracks[0], &tj, &ti);
        let peak = predict_measurement(&mapped, &sensor).mean;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in -20..=20 {
            let mut si = s.clone();
            si.measurements = vec![&peak + dv(&[k as f64 * 0.25, 0.0])];
            let v = dual_cross_term(&si, &s.predicted, &sensor, &ti, &tj).unwrap();
            if v > best.0 {
                best = (v, k as f64 * 0.25);
            }
        }
        assert_eq!(best.1, 0.0);
    }

    #[test]
    fn identical_histories_give_unit_kappa() {
        let sensor = SensorModel::position(10.0).unwrap();
        let s = one_object_step(&[0.0, 0.0, 1.0, 1.0], 10.0, &[3.0, 4.0], &sensor);
        let t = origin();
        let m = SensorMarginals { predicted: &s.predicted, posterior: &s.posterior, sensor: &sensor, theta: &t };
        // Identical predicted and posterior marginals make the two densities coincide.
        let same = SensorMarginals { predicted: &s.posterior, posterior: &s.posterior, sensor: &sensor, theta: &t };
        assert!(eval_kappa(&same, &same, &[0], KappaForm::Standard).unwrap().abs() < 1e-12);
        assert!(eval_kappa(&m, &m, &[0], KappaForm::Standard).unwrap() < 0.0);
    }

    #[test]
    fn kappa_forms_agree() {
        let (sc, oi, oj) = pair_outputs(8, 0, 3);
        let sensor = sc.config.sensor_model().unwrap();
        let (ti, tj) = (OffsetTransform::new(3.0, -40.0), offset(&sc, 3));
        for (si, sj) in oi.steps.iter().zip(&oj.steps) {
            let mi = SensorMarginals { predicted: &si.predicted, posterior: &si.posterior, sensor: &sensor, theta: &ti };
            let mj = SensorMarginals { predicted: &sj.predicted, posterior: &sj.posterior, sensor: &sensor, theta: &tj };
            let g = estimate_correspondence(si, &sj.posterior, &sensor, &ti, &tj).unwrap().gamma;
            let a = eval_kappa(&mi, &mj, &g, KappaForm::Standard).unwrap();
            let b = eval_kappa(&mi, &mj, &g, KappaForm::Precision).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn quad_update_is_scaled_geometric_mean() {
        assert_eq!(quad_update(-3.0, -5.0, -3.0, -5.0, 0.0), -8.0);
        assert_eq!(quad_update(-1.0, -2.0, -3.0, -4.0, -0.5), 0.5 * (-3.0) + 0.5 * (-7.0) + 0.5);
    }

    #[test]
    fn quad_window_of_one_reduces_to_update() {
        let (sc, mut oi, mut oj) = pair_outputs(2, 1, 3);
        oi.steps.truncate(1);
        oj.steps.truncate(1);
        let sensor = sc.config.sensor_model().unwrap();
        let e = quad_likelihood(&oi, &oj, &sensor, &sensor, &offset(&sc, 1), &offset(&sc, 3)).unwrap();
        assert_eq!(e.steps.len(), 1);
        assert_eq!(e.log_quad, e.steps[0].log_q());
    }

    #[test]
    fn mismatched_windows_rejected() {
        let (sc, oi, mut oj) = pair_outputs(2, 0, 1);
        oj.steps.pop();
        let sensor = sc.config.sensor_model().unwrap();
        assert!(matches!(
            quad_likelihood(&oi, &oj, &sensor, &sensor, &origin(), &origin()),
            Err(Error::WindowMismatch(_))
        ));
        assert!(EdgeEvaluator::new(&oi, &oj, &sensor, &sensor).is_err());
    }

    #[test]
    fn factors_stay_finite_over_offset_errors() {
        let cfg = ScenarioConfig { num_steps: 31, seed: 5, ..Default::default() };
        let sc = Scenario::generate(&cfg).unwrap();
        let (motion, sensor) = (cfg.motion_model().unwrap(), cfg.sensor_model().unwrap());
        let oi = run_local_filter(&sc.sensor_measurements(5), 20, 10, &motion, &sensor).unwrap();
        let oj = run_local_filter(&sc.sensor_measurements(6), 20, 10, &motion, &sensor).unwrap();
        let ti = offset(&sc, 5);
        for e in [-500.0, -120.0, 0.0, 37.0, 500.0] {
            let tj = OffsetTransform { theta: sc.network.offset(6) + Vector2::new(e, -e / 2.0) };
            let ev = quad_likelihood(&oi, &oj, &sensor, &sensor, &ti, &tj).unwrap();
            assert!(ev.log_quad.is_finite());
            for s in &ev.steps {
                assert!(s.log_r_ij.is_finite() && s.log_r_ji.is_finite() && s.log_kappa.is_finite());
                assert!(s.log_kappa <= KAPPA_SLACK);
            }
        }
    }

    #[test]
    fn fast_path_matches_reference() {
        for seed in 0..4 {
            let (sc, oi, oj) = pair_outputs(seed, 0, 1);
            let sensor = sc.config.sensor_model().unwrap();
            let ev = EdgeEvaluator::new(&oi, &oj, &sensor, &sensor).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..6 {
                let ti = Vector2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
                let tj = sc.network.offset(1) + Vector2::new(rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
                let reference = quad_likelihood(&oi, &oj, &sensor, &sensor, &OffsetTransform { theta: ti }, &OffsetTransform { theta: tj }).unwrap();
                let fast = ev.evaluate_quad(&ti, &tj);
                assert!((reference.log_quad - fast.log_quad).abs() < 1e-9 * reference.log_quad.abs().max(1.0));
                for (a, b) in reference.steps.iter().zip(&fast.steps) {
                    assert_eq!(a.gamma_ij, b.gamma_ij);
                    assert!((a.log_kappa - b.log_kappa).abs() < 1e-9);
                }
                let dual_ref = dual_likelihood(&oi, &oj, &sensor, &sensor, &OffsetTransform { theta: ti }, &OffsetTransform { theta: tj }).unwrap();
                assert!((dual_ref - ev.log_dual(&ti, &tj)).abs() < 1e-9 * dual_ref.abs().max(1.0));
            }
        }
    }

    #[test]
    fn timing_counters_accumulate() {
        let (sc, oi, oj) = pair_outputs(1, 0, 2);
        let sensor = sc.config.sensor_model().unwrap();
        let ev = EdgeEvaluator::new(&oi, &oj, &sensor, &sensor).unwrap();
        let (a, b) = (Vector2::zeros(), sc.network.offset(2));
        for _ in 0..3 {
            ev.log_quad(&a, &b);
        }
        ev.log_dual(&a, &b);
        let t = ev.timing();
        assert_eq!((t.quad_evals, t.dual_evals), (3, 1));
        assert!(t.quad_seconds > 0.0 && t.dual_seconds > 0.0);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("quad".parse::<LikelihoodVariant>().unwrap(), LikelihoodVariant::Quad);
        assert_eq!("DUAL".parse::<LikelihoodVariant>().unwrap(), LikelihoodVariant::Dual);
        assert!("triple".parse::<LikelihoodVariant>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn common_translation_leaves_potential_unchanged(
            seed in 0u64..6, cx in -2000.0f64..2000.0, cy in -2000.0f64..2000.0,
            ex in -80.0f64..80.0, ey in -80.0f64..80.0,
        ) {
            let (sc, oi, oj) = pair_outputs(seed, 0, 1);
            let sensor = sc.config.sensor_model().unwrap();
            let ti = Vector2::new(ex, ey);
            let tj = sc.network.offset(1);
            let c = Vector2::new(cx, cy);
            let base = quad_likelihood(&oi, &oj, &sensor, &sensor, &OffsetTransform { theta: ti }, &OffsetTransform { theta: tj }).unwrap();
            let moved = quad_likelihood(&oi, &oj, &sensor, &sensor, &OffsetTransform { theta: ti + c }, &OffsetTransform { theta: tj + c }).unwrap();
            prop_assert!((base.log_quad - moved.log_quad).abs() < 1e-8);
            let ev = EdgeEvaluator::new(&oi, &oj, &sensor, &sensor).unwrap();
            prop_assert!((ev.log_quad(&ti, &tj) - ev.log_quad(&(ti + c), &(tj + c))).abs() < 1e-8);
            prop_assert!((ev.log_dual(&ti, &tj) - ev.log_dual(&(ti + c), &(tj + c))).abs() < 1e-8);
        }

        #[test]
        fn kappa_never_exceeds_one(seed in 0u64..6, ex in -300.0f64..300.0, ey in -300.0f64..300.0) {
            let (sc, oi, oj) = pair_outputs(seed, 1, 2);
            let sensor = sc.config.sensor_model().unwrap();
            let ev = EdgeEvaluator::new(&oi, &oj, &sensor, &sensor).unwrap();
            let e = ev.evaluate_quad(&sc.network.offset(1), &(sc.network.offset(2) + Vector2::new(ex, ey)));
            for s in &e.steps {
                prop_assert!(s.log_kappa <= KAPPA_SLACK);
            }
        }

        #[test]
        fn potential_is_symmetric_under_swap(seed in 0u64..6, ex in -15.0f64..15.0, ey in -15.0f64..15.0) {
            let (sc, oi, oj) = pair_outputs(seed, 0, 1);
            let sensor = sc.config.sensor_model().unwrap();
            let ti = OffsetTransform { theta: Vector2::new(ex, ey) };
            let tj = offset(&sc, 1);
            let fwd = quad_likelihood(&oi, &oj, &sensor, &sensor, &ti, &tj).unwrap();
            let rev = quad_likelihood(&oj, &oi, &sensor, &sensor, &tj, &ti).unwrap();
            // Exact when the two directions find mutually inverse correspondences.
            let mutual = fwd.steps.iter().all(|s| crate::assignment::invert(&s.gamma_ij) == s.gamma_ji);
            prop_assume!(mutual);
            prop_assert!((fwd.log_quad - rev.log_quad).abs() < 1e-9 * fwd.log_quad.abs().max(1.0));
        }
    }
}
