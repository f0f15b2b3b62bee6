//! Single-sensor multi-object filtering with per-step ML data association.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assignment::{auction_assign, invert, is_permutation};
use crate::error::{Error, Result};
use crate::lgss::{cholesky, chol_log_det, kf_predict, kf_update, predict_measurement, Gaussian, MotionModel, SensorModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Prior standard deviation of seeded track velocities (m per step).
pub const SEED_VELOCITY_STD: f64 = 100.0;

/// One Gaussian per object in the sensor's local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub tracks: Vec<Gaussian>,
    pub step: usize,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Tracks at measured positions with zero velocity and covariance
    /// `diag(R, SEED_VELOCITY_STD^2 I)`.
    pub fn seed(z: &[DVector<f64>], sensor: &SensorModel, step: usize) -> Result<Self> {
        let dz = sensor.meas_dim();
        let d = sensor.h.ncols();
        let tracks = z
            .iter()
            .map(|zo| {
                if zo.len() != dz {
                    return Err(Error::DimensionMismatch { expected: dz, found: zo.len() });
                }
                let mut mean = DVector::zeros(d);
                mean.rows_mut(0, dz).copy_from(zo);
                let mut cov = DMatrix::identity(d, d) * SEED_VELOCITY_STD * SEED_VELOCITY_STD;
                cov.view_mut((0, 0), (dz, dz)).copy_from(&sensor.r);
                Ok(Gaussian { mean, cov })
            })
            .collect::<Result<_>>()?;
        Ok(Self { tracks, step })
    }
}

/// Artifacts of one filtering step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStep {
    pub step: usize,
    pub measurements: Vec<DVector<f64>>,
    pub predicted: TrackSet,
    pub posterior: TrackSet,
    /// Measurement slot `o` -> track `m`.
    pub tau: Vec<usize>,
    /// Track `m` -> measurement slot `o`.
    pub rho: Vec<usize>,
    /// Association scale factor `log s_k`.
    pub log_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    /// Tracks before the first window step.
    pub initial: TrackSet,
    pub steps: Vec<FilterStep>,
}

impl FilterOutput {
    pub fn window_len(&self) -> usize {
        self.steps.len()
    }

    pub fn num_objects(&self) -> usize {
        self.initial.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `c(o, m) = log N(z_o; H x_m, R + H P_m H^T)` over predicted tracks.
pub fn build_cost_matrix(pred: &TrackSet, z: &[DVector<f64>], sensor: &SensorModel) -> Result<DMatrix<f64>> {
    let m = pred.len();
    if z.len() != m {
        return Err(Error::ClosedWorld { expected: m, found: z.len() });
    }
    let mut cost = DMatrix::zeros(m, m);
    for (col, track) in pred.tracks.iter().enumerate() {
        let pz = predict_measurement(track, sensor);
        let chol = cholesky(&pz.cov, "innovation covariance")?;
        let norm = -0.5 * (pz.dim() as f64 * LN_2PI + chol_log_det(&chol));
        for (row, zo) in z.iter().enumerate() {
            if zo.len() != pz.dim() {
                return Err(Error::DimensionMismatch { expected: pz.dim(), found: zo.len() });
            }
            let r = zo - &pz.mean;
            cost[(row, col)] = norm - 0.5 * r.dot(&chol.solve(&r));
        }
    }
    Ok(cost)
}

/// Predict, associate by auction, update each track with its measurement.
pub fn filter_step(prev: &TrackSet, z: &[DVector<f64>], motion: &MotionModel, sensor: &SensorModel) -> Result<FilterStep> {
    step_with(prev, z, motion, sensor, None)
}

/// [`filter_step`] with the association `tau` (slot -> track) given.
pub fn filter_step_known(
    prev: &TrackSet,
    z: &[DVector<f64>],
    tau: &[usize],
    motion: &MotionModel,
    sensor: &SensorModel,
) -> Result<FilterStep> {
    step_with(prev, z, motion, sensor, Some(tau))
}

fn step_with(
    prev: &TrackSet,
    z: &[DVector<f64>],
    motion: &MotionModel,
    sensor: &SensorModel,
    known: Option<&[usize]>,
) -> Result<FilterStep> {
    if z.len() != prev.len() {
        return Err(Error::ClosedWorld { expected: prev.len(), found: z.len() });
    }
    let step = prev.step + 1;
    let tracks = prev.tracks.iter().map(|t| kf_predict(t, motion)).collect::<Result<Vec<_>>>()?;
    let predicted = TrackSet { tracks, step };
    let cost = build_cost_matrix(&predicted, z, sensor)?;
    let tau = match known {
        Some(t) if t.len() == z.len() && is_permutation(t) => t.to_vec(),
        Some(t) => return Err(Error::InvalidPermutation(format!("{t:?}"))),
        None => auction_assign(&cost)?.perm,
    };
    let log_s = tau.iter().enumerate().map(|(o, &m)| cost[(o, m)]).sum();
    let rho = invert(&tau);
    let tracks = predicted
        .tracks
        .iter()
        .zip(&rho)
        .map(|(t, &o)| kf_update(t, &z[o], sensor).map(|u| u.posterior))
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterStep { step, measurements: z.to_vec(), predicted, posterior: TrackSet { tracks, step }, tau, rho, log_s })
}

/// Filters steps `start .. start + t` of one sensor's measurement sequence.
///
/// Tracks are seeded from the measurements at `start - 1`, so `start >= 1`.
pub fn run_local_filter(
    measurements: &[Vec<DVector<f64>>],
    start: usize,
    t: usize,
    motion: &MotionModel,
    sensor: &SensorModel,
) -> Result<FilterOutput> {
    let end = start + t;
    if start == 0 || t == 0 || end > measurements.len() {
        return Err(Error::WindowOutOfRange { start, end, len: measurements.len() });
    }
    let initial = TrackSet::seed(&measurements[start - 1], sensor, start - 1)?;
    let mut steps = Vec::with_capacity(t);
    let mut prev = initial.clone();
    for z in &measurements[start..end] {
        let s = filter_step(&prev, z, motion, sensor)?;
        prev = s.posterior.clone();
        steps.push(s);
    }
    Ok(FilterOutput { initial, steps })
}
