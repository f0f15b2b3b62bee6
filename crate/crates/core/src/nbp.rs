//! Nonparametric loopy belief propagation over sensor offsets.
//!
//! Beliefs are equally weighted particle clouds; messages are weighted
//! Gaussian kernel mixtures. One round evaluates every edge potential at
//! equally indexed particle pairs, builds all messages from the current
//! beliefs, then updates every belief by weighted bootstrap.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{EdgeEvaluator, EvalTiming, LikelihoodVariant};
use crate::scenario::{NetworkGraph, Scenario};
use crate::tracker::{run_local_filter, FilterOutput};

type V2 = Vector2<f64>;
type M2 = Matrix2<f64>;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Variance (m²) added to every kernel bandwidth so it stays invertible.
pub const BANDWIDTH_FLOOR: f64 = 1e-9;

/// Equally or unequally weighted samples of one node's offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleBelief {
    pub samples: Vec<V2>,
    pub weights: Vec<f64>,
}

impl ParticleBelief {
    pub fn uniform(samples: Vec<V2>) -> Self {
        let w = 1.0 / samples.len() as f64;
        let weights = vec![w; samples.len()];
        Self { samples, weights }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> V2 {
        weighted_mean_cov(&self.samples, &self.weights).0
    }

    pub fn moments(&self) -> (V2, M2) {
        weighted_mean_cov(&self.samples, &self.weights)
    }
}

/// `m(θ) = Σ_l w_l N(θ; loc_l, Λ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMessage {
    pub locations: Vec<V2>,
    pub weights: Vec<f64>,
    pub bandwidth: M2,
    /// Set when every potential was non-finite and uniform weights were used.
    pub degenerate: bool,
}

impl KernelMessage {
    /// Mean and covariance of the mixture.
    pub fn moments(&self) -> (V2, M2) {
        let (m, c) = weighted_mean_cov(&self.locations, &self.weights);
        (m, c + self.bandwidth)
    }

    pub fn log_density(&self, theta: &V2) -> f64 {
        self.evaluator().log_density(theta)
    }

    fn evaluator(&self) -> MixtureEval<'_> {
        let chol = nalgebra::Cholesky::new(self.bandwidth).expect("kernel bandwidth is positive definite");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        MixtureEval {
            msg: self,
            info: chol.inverse(),
            log_norm: -LN_2PI - 0.5 * log_det,
            log_w: self.weights.iter().map(|w| w.ln()).collect(),
        }
    }
}

struct MixtureEval<'a> {
    msg: &'a KernelMessage,
    info: M2,
    log_norm: f64,
    log_w: Vec<f64>,
}

impl MixtureEval<'_> {
    fn log_density(&self, theta: &V2) -> f64 {
        let terms = self.msg.locations.iter().zip(&self.log_w).map(|(loc, lw)| {
            let r = theta - loc;
            lw + self.log_norm - 0.5 * r.dot(&(self.info * r))
        });
        log_sum_exp(terms)
    }
}

/// `log Σ exp(x)`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Node prior over its offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NodePrior {
    Dirac(V2),
    UniformBox { lo: V2, hi: V2 },
}

impl NodePrior {
    pub fn sample(&self, rng: &mut impl Rng) -> V2 {
        match self {
            NodePrior::Dirac(p) => *p,
            NodePrior::UniformBox { lo, hi } => V2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y)),
        }
    }

    /// Density for boxes; Dirac priors are handled by never moving the node.
    pub fn log_density(&self, theta: &V2) -> f64 {
        match self {
            NodePrior::Dirac(p) => {
                if theta == p {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            NodePrior::UniformBox { lo, hi } => {
                if theta.x >= lo.x && theta.x <= hi.x && theta.y >= lo.y && theta.y <= hi.y {
                    -((hi.x - lo.x) * (hi.y - lo.y)).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn is_dirac(&self) -> bool {
        matches!(self, NodePrior::Dirac(_))
    }
}

/// Box around the sensor hull, widened by `margin` times its largest extent.
pub fn region_prior(net: &NetworkGraph, margin: f64) -> NodePrior {
    let (lo, hi) = net.bounds();
    let pad = margin * (hi - lo).amax();
    NodePrior::UniformBox { lo: lo - V2::repeat(pad), hi: hi + V2::repeat(pad) }
}

/// Log edge potential `log ψ(θ_i, θ_j)` for an edge `(i, j)`.
pub trait EdgePotential: Sync {
    fn log_potential(&self, theta_i: &V2, theta_j: &V2) -> f64;
}

impl<F: Fn(&V2, &V2) -> f64 + Sync> EdgePotential for F {
    fn log_potential(&self, theta_i: &V2, theta_j: &V2) -> f64 {
        self(theta_i, theta_j)
    }
}

/// Cached likelihood evaluator used as a potential.
#[derive(Debug)]
pub struct LikelihoodPotential {
    pub evaluator: EdgeEvaluator,
    pub variant: LikelihoodVariant,
}

impl EdgePotential for LikelihoodPotential {
    fn log_potential(&self, theta_i: &V2, theta_j: &V2) -> f64 {
        self.evaluator.log_potential(self.variant, theta_i, theta_j)
    }
}

/// Pairwise MRF: one prior per node, one potential per graph edge `(a, b)`
/// evaluated as `ψ(θ_a, θ_b)`.
pub struct MrfModel<'a> {
    pub graph: NetworkGraph,
    pub priors: Vec<NodePrior>,
    pub potentials: Vec<&'a dyn EdgePotential>,
}

impl<'a> MrfModel<'a> {
    pub fn new(graph: NetworkGraph, priors: Vec<NodePrior>, potentials: Vec<&'a dyn EdgePotential>) -> Result<Self> {
        if priors.len() != graph.num_nodes() {
            return Err(Error::DimensionMismatch { expected: graph.num_nodes(), found: priors.len() });
        }
        if potentials.len() != graph.edges.len() {
            return Err(Error::DimensionMismatch { expected: graph.edges.len(), found: potentials.len() });
        }
        Ok(Self { graph, priors, potentials })
    }
}

/// Where message kernels are centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelLocationRule {
    /// `θ̄_j - θ_j + θ_i`: the sender sample moved by the pair's relative offset.
    #[default]
    Relative,
    /// `θ̄_j + θ_j - θ_i`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbpConfig {
    /// Particles per belief (L).
    pub particles: usize,
    /// LBP rounds (S).
    pub iterations: usize,
    /// Resample particle pairs by potential before pairing them with the
    /// sender samples; otherwise the potentials are used as kernel weights.
    pub resample_pairs: bool,
    /// Multiple of the unweighted candidate-location covariance added to each bandwidth.
    pub bandwidth_floor_ratio: f64,
    pub kernel_rule: KernelLocationRule,
    /// Prior box margin as a fraction of the hull's largest extent.
    pub prior_margin: f64,
    pub seed: u64,
    /// Evaluate edges and nodes on the rayon pool.
    pub parallel: bool,
    /// Keep every particle cloud in the snapshots.
    pub keep_beliefs: bool,
}

impl Default for NbpConfig {
    fn default() -> Self {
        Self {
            particles: 100,
            iterations: 16,
            resample_pairs: true,
            bandwidth_floor_ratio: 0.1,
            kernel_rule: KernelLocationRule::Relative,
            prior_margin: 0.25,
            seed: 0,
            parallel: true,
            keep_beliefs: true,
        }
    }
}

impl NbpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config(format!("particles must be at least 2, got {}", self.particles)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.bandwidth_floor_ratio >= 0.0 && self.prior_margin >= 0.0) {
            return Err(Error::Config("bandwidth_floor_ratio and prior_margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// `(4 / ((2d + 1) L))^(2 / (d + 4))`.
pub fn silverman_factor(d: usize, l: usize) -> f64 {
    (4.0 / ((2 * d + 1) as f64 * l as f64)).powf(2.0 / (d as f64 + 4.0))
}

/// Weighted mean and covariance `Σ w (x - m)(x - m)ᵀ`; weights are used as given.
pub fn weighted_mean_cov(xs: &[V2], w: &[f64]) -> (V2, M2) {
    let mean = xs.iter().zip(w).fold(V2::zeros(), |acc, (x, wi)| acc + x * *wi);
    let cov = xs.iter().zip(w).fold(M2::zeros(), |acc, (x, wi)| {
        let d = x - mean;
        acc + d * d.transpose() * *wi
    });
    (mean, (cov + cov.transpose()) * 0.5)
}

/// Rule-of-thumb kernel covariance `silverman_factor(2, L) · Ĉ`, floored.
pub fn rule_of_thumb_bandwidth(locations: &[V2], weights: &[f64]) -> Result<M2> {
    if locations.is_empty() || locations.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: locations.len(), found: weights.len() });
    }
    let (_, c) = weighted_mean_cov(locations, weights);
    Ok(c * silverman_factor(2, locations.len()) + M2::identity() * BANDWIDTH_FLOOR)
}

/// Normalized weights from log values; uniform (and `true`) when none is finite.
pub fn normalize_log_weights(log_w: &[f64]) -> (Vec<f64>, bool) {
    let lse = log_sum_exp(log_w.iter().copied().filter(|v| !v.is_nan()));
    if !lse.is_finite() {
        return (vec![1.0 / log_w.len() as f64; log_w.len()], true);
    }
    let w: Vec<f64> = log_w.iter().map(|v| if v.is_nan() { 0.0 } else { (v - lse).exp() }).collect();
    let s: f64 = w.iter().sum();
    (w.into_iter().map(|x| x / s).collect(), false)
}

/// Systematic resampling of `n` indices with one uniform offset `u0 ∈ [0, 1)`.
pub fn systematic_resample(weights: &[f64], n: usize, u0: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut idx = 0;
    for k in 0..n {
        let target = (k as f64 + u0) / n as f64 * total;
        while idx + 1 < weights.len() && cum + weights[idx] <= target {
            cum += weights[idx];
            idx += 1;
        }
        out.push(idx);
    }
    out
}

fn kernel_location(rule: KernelLocationRule, sender: &V2, theta_i: &V2, theta_j: &V2) -> V2 {
    match rule {
        KernelLocationRule::Relative => sender - theta_j + theta_i,
        KernelLocationRule::Literal => sender + theta_j - theta_i,
    }
}

/// Kernel message `j -> i`.
///
/// `sender` holds samples of node `j`'s belief without `i`'s message;
/// `pairs` the equally indexed `(θ_i, θ_j)` particles and `log_psi` their
/// potentials. With `resample_pairs` the pairs are first drawn by potential
/// (`u0` drives the systematic draw) and every kernel gets weight `1/L`.
#[allow(clippy::too_many_arguments)]
pub fn build_message(
    sender: &[V2],
    pairs_i: &[V2],
    pairs_j: &[V2],
    log_psi: &[f64],
    rule: KernelLocationRule,
    resample_pairs: bool,
    floor_ratio: f64,
    u0: f64,
) -> Result<KernelMessage> {
    let l = pairs_i.len();
    if pairs_j.len() != l || log_psi.len() != l || sender.len() != l || l == 0 {
        return Err(Error::DimensionMismatch { expected: l, found: log_psi.len() });
    }
    let (w, degenerate) = normalize_log_weights(log_psi);
    let candidates: Vec<V2> = (0..l).map(|k| kernel_location(rule, &sender[k], &pairs_i[k], &pairs_j[k])).collect();
    let (locations, weights) = if resample_pairs {
        let picks = systematic_resample(&w, l, u0);
        let locs = picks.iter().zip(sender).map(|(&p, s)| kernel_location(rule, s, &pairs_i[p], &pairs_j[p])).collect();
        (locs, vec![1.0 / l as f64; l])
    } else {
        (candidates.clone(), w)
    };
    let mut bandwidth = rule_of_thumb_bandwidth(&locations, &weights)?;
    if floor_ratio > 0.0 {
        let (_, spread) = weighted_mean_cov(&candidates, &vec![1.0 / l as f64; l]);
        bandwidth += spread * floor_ratio;
    }
    Ok(KernelMessage { locations, weights, bandwidth, degenerate })
}

fn sample_gaussian(mean: &V2, cov: &M2, rng: &mut impl Rng) -> Result<V2> {
    let chol = nalgebra::Cholesky::new((cov + cov.transpose()) * 0.5).ok_or(Error::NotPositiveDefinite("proposal covariance"))?;
    let e = V2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    Ok(mean + chol.l() * e)
}

fn log_gaussian_2d(x: &V2, mean: &V2, info: &M2, log_det: f64) -> f64 {
    let r = x - mean;
    -LN_2PI - 0.5 * log_det - 0.5 * r.dot(&(info * r))
}

/// Normalized product of 2-d Gaussians given as `(mean, cov)`.
fn gaussian_product_2d(factors: &[(V2, M2)]) -> Result<(V2, M2)> {
    let mut info = M2::zeros();
    let mut h = V2::zeros();
    for (m, c) in factors {
        let p = c.try_inverse().ok_or(Error::Singular("proposal factor"))?;
        info += p;
        h += p * m;
    }
    let cov = info.try_inverse().ok_or(Error::Singular("proposal precision"))?;
    Ok((cov * h, (cov + cov.transpose()) * 0.5))
}

/// Weighted bootstrap from `prior × Π messages`.
///
/// Proposals come from the product of `N(moments of current)` and the
/// moment-matched messages; weights are `prior × Π m / f`, followed by
/// systematic resampling to `l` equally weighted particles. Without messages
/// the prior is sampled directly.
pub fn sample_belief_product(
    prior: &NodePrior,
    current: &ParticleBelief,
    messages: &[&KernelMessage],
    l: usize,
    rng: &mut impl Rng,
) -> Result<ParticleBelief> {
    if let NodePrior::Dirac(p) = prior {
        return Ok(ParticleBelief::uniform(vec![*p; l]));
    }
    if messages.is_empty() {
        return Ok(ParticleBelief::uniform((0..l).map(|_| prior.sample(rng)).collect()));
    }
    let (cm, cc) = current.moments();
    let mut factors = vec![(cm, cc + M2::identity() * BANDWIDTH_FLOOR)];
    factors.extend(messages.iter().map(|m| m.moments()));
    let (fm, fc) = gaussian_product_2d(&factors)?;
    let f_info = fc.try_inverse().ok_or(Error::Singular("proposal covariance"))?;
    let f_logdet = fc.determinant().ln();
    let evals: Vec<_> = messages.iter().map(|m| m.evaluator()).collect();
    let mut proposals = Vec::with_capacity(l);
    let mut log_w = Vec::with_capacity(l);
    for _ in 0..l {
        let x = sample_gaussian(&fm, &fc, rng)?;
        let lp = prior.log_density(&x);
        let lw = if lp.is_finite() {
            lp + evals.iter().map(|e| e.log_density(&x)).sum::<f64>() - log_gaussian_2d(&x, &fm, &f_info, f_logdet)
        } else {
            f64::NEG_INFINITY
        };
        proposals.push(x);
        log_w.push(lw);
    }
    let (w, degenerate) = normalize_log_weights(&log_w);
    if degenerate {
        return Err(Error::Numerical("belief update has zero total importance weight".into()));
    }
    let picks = systematic_resample(&w, l, rng.random::<f64>());
    Ok(ParticleBelief::uniform(picks.into_iter().map(|k| proposals[k]).collect()))
}

/// Beliefs plus the messages of the last round, indexed by directed edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbpState {
    pub beliefs: Vec<ParticleBelief>,
    /// `messages[2e]` travels `a -> b` and `messages[2e + 1]` travels
    /// `b -> a` for graph edge `e = (a, b)`.
    pub messages: Vec<Option<KernelMessage>>,
}

/// Per-round bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub potential_evals: usize,
    pub degenerate_edges: usize,
}

fn task_rng(seed: u64, iteration: usize, kind: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 40) | (kind << 32) | index as u64);
    rng
}

const STREAM_PRIOR: u64 = 0;
const STREAM_SENDER: u64 = 1;
const STREAM_MESSAGE: u64 = 2;
const STREAM_BELIEF: u64 = 3;

/// Beliefs drawn from the priors.
pub fn initial_state(model: &MrfModel<'_>, cfg: &NbpConfig) -> LbpState {
    let beliefs = model
        .priors
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = task_rng(cfg.seed, 0, STREAM_PRIOR, i);
            ParticleBelief::uniform((0..cfg.particles).map(|_| p.sample(&mut rng)).collect())
        })
        .collect();
    LbpState { beliefs, messages: vec![None; 2 * model.graph.edges.len()] }
}

fn map_maybe_par<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, parallel: bool, f: F) -> Vec<T> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// One bulk-synchronous round (`iteration` counts from 1).
pub fn lbp_iterate(model: &MrfModel<'_>, state: &LbpState, iteration: usize, cfg: &NbpConfig) -> Result<(LbpState, RoundStats)> {
    let l = cfg.particles;
    let edges = &model.graph.edges;
    let adj = model.graph.adjacency();
    // Directed edge ids arriving at each node.
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); model.graph.num_nodes()];
    for (e, &(a, b)) in edges.iter().enumerate() {
        incoming[b].push(2 * e);
        incoming[a].push(2 * e + 1);
    }
    debug_assert!(incoming.iter().zip(&adj).all(|(inc, nb)| inc.len() == nb.len()));

    let log_psi: Vec<Vec<f64>> = map_maybe_par(edges.len(), cfg.parallel, |e| {
        let (a, b) = edges[e];
        let (ba, bb) = (&state.beliefs[a].samples, &state.beliefs[b].samples);
        (0..l).map(|k| model.potentials[e].log_potential(&ba[k], &bb[k])).collect()
    });

    let messages: Vec<Result<Option<KernelMessage>>> = map_maybe_par(2 * edges.len(), cfg.parallel, |d| {
        let (a, b) = edges[d / 2];
        let (from, to) = if d % 2 == 0 { (a, b) } else { (b, a) };
        if model.priors[to].is_dirac() {
            return Ok(None);
        }
        let reverse = d ^ 1;
        let others: Vec<&KernelMessage> = incoming[from]
            .iter()
            .filter(|&&m| m != reverse)
            .filter_map(|&m| state.messages[m].as_ref())
            .collect();
        let mut rng = task_rng(cfg.seed, iteration, STREAM_SENDER, d);
        let sender = sample_belief_product(&model.priors[from], &state.beliefs[from], &others, l, &mut rng)?;
        let u0 = task_rng(cfg.seed, iteration, STREAM_MESSAGE, d).random::<f64>();
        let (pairs_to, pairs_from) = (&state.beliefs[to].samples, &state.beliefs[from].samples);
        build_message(&sender.samples, pairs_to, pairs_from, &log_psi[d / 2], cfg.kernel_rule, cfg.resample_pairs, cfg.bandwidth_floor_ratio, u0)
            .map(Some)
    });
    let messages: Vec<Option<KernelMessage>> = messages.into_iter().collect::<Result<_>>()?;
    let degenerate_edges = (0..edges.len())
        .filter(|&e| messages[2 * e].iter().chain(&messages[2 * e + 1]).any(|m| m.degenerate))
        .count();

    let beliefs: Vec<Result<ParticleBelief>> = map_maybe_par(model.graph.num_nodes(), cfg.parallel, |i| {
        let inc: Vec<&KernelMessage> = incoming[i].iter().filter_map(|&d| messages[d].as_ref()).collect();
        if inc.is_empty() && !model.priors[i].is_dirac() {
            return Ok(state.beliefs[i].clone());
        }
        let mut rng = task_rng(cfg.seed, iteration, STREAM_BELIEF, i);
        sample_belief_product(&model.priors[i], &state.beliefs[i], &inc, l, &mut rng)
    });
    let beliefs = beliefs.into_iter().collect::<Result<_>>()?;
    Ok((LbpState { beliefs, messages }, RoundStats { potential_evals: edges.len() * l, degenerate_edges }))
}

/// Estimates (and optionally particles) after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSnapshot {
    pub iteration: usize,
    pub estimates: Vec<[f64; 2]>,
    pub beliefs: Option<Vec<ParticleBelief>>,
    pub degenerate_edges: usize,
}

/// Runs `cfg.iterations` rounds from the prior samples.
pub fn run_lbp(model: &MrfModel<'_>, cfg: &NbpConfig) -> Result<Vec<IterationSnapshot>> {
    cfg.validate()?;
    let mut state = initial_state(model, cfg);
    let mut snaps = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let (next, stats) = lbp_iterate(model, &state, it, cfg)?;
        state = next;
        snaps.push(IterationSnapshot {
            iteration: it,
            estimates: state.beliefs.iter().map(|b| b.mean().into()).collect(),
            beliefs: cfg.keep_beliefs.then(|| state.beliefs.clone()),
            degenerate_edges: stats.degenerate_edges,
        });
    }
    Ok(snaps)
}

/// Settings of one calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// First filtered step (0-based); tracks are seeded one step earlier.
    pub window_start: usize,
    /// Window length t.
    pub window_len: usize,
    pub variant: LikelihoodVariant,
    pub nbp: NbpConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { window_start: 20, window_len: 10, variant: LikelihoodVariant::Quad, nbp: NbpConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub snapshots: Vec<IterationSnapshot>,
    /// Number of local filters run; one per sensor.
    pub local_filter_runs: usize,
    pub timing: EvalTiming,
}

impl CalibrationReport {
    pub fn final_estimates(&self) -> &[[f64; 2]] {
        self.snapshots.last().map_or(&[], |s| &s.estimates)
    }
}

/// Local filtering of every sensor, counted.
pub fn run_local_filters(scenario: &Scenario, cfg: &CalibrationConfig, counter: &AtomicUsize) -> Result<Vec<FilterOutput>> {
    let motion = scenario.config.motion_model()?;
    let sensor = scenario.config.sensor_model()?;
    let outs: Vec<Result<FilterOutput>> = map_maybe_par(scenario.num_sensors(), cfg.nbp.parallel, |j| {
        counter.fetch_add(1, Ordering::Relaxed);
        run_local_filter(&scenario.sensor_measurements(j), cfg.window_start, cfg.window_len, &motion, &sensor)
    });
    outs.into_iter().collect()
}

/// Cached likelihood potentials for every graph edge.
pub fn build_potentials(scenario: &Scenario, outputs: &[FilterOutput], variant: LikelihoodVariant, parallel: bool) -> Result<Vec<LikelihoodPotential>> {
    let sensor = scenario.config.sensor_model()?;
    let edges = &scenario.network.edges;
    let pots: Vec<Result<LikelihoodPotential>> = map_maybe_par(edges.len(), parallel, |e| {
        let (a, b) = edges[e];
        Ok(LikelihoodPotential { evaluator: EdgeEvaluator::new(&outputs[a], &outputs[b], &sensor, &sensor)?, variant })
    });
    pots.into_iter().collect()
}

/// Local filtering once, then NBP over the network's pairwise MRF.
pub fn run_calibration(scenario: &Scenario, cfg: &CalibrationConfig) -> Result<CalibrationReport> {
    cfg.nbp.validate()?;
    let counter = AtomicUsize::new(0);
    let outputs = run_local_filters(scenario, cfg, &counter)?;
    let potentials = build_potentials(scenario, &outputs, cfg.variant, cfg.nbp.parallel)?;
    let net = scenario.network.clone();
    let region = region_prior(&net, cfg.nbp.prior_margin);
    let priors = (0..net.num_nodes()).map(|i| if i == net.anchor { NodePrior::Dirac(net.offset(i)) } else { region }).collect();
    let refs: Vec<&dyn EdgePotential> = potentials.iter().map(|p| p as &dyn EdgePotential).collect();
    let model = MrfModel::new(net, priors, refs)?;
    let snapshots = run_lbp(&model, &cfg.nbp)?;
    let mut timing = EvalTiming::default();
    for p in &potentials {
        timing.merge(&p.evaluator.timing());
    }
    Ok(CalibrationReport { snapshots, local_filter_runs: counter.load(Ordering::Relaxed), timing })
}

/// Particle clouds as `iteration,node,particle,x,y,weight`.
pub fn write_belief_csv(path: &Path, snapshots: &[IterationSnapshot]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "node", "particle", "x", "y", "weight"])?;
    for s in snapshots {
        for (node, b) in s.beliefs.iter().flatten().enumerate() {
            for (k, (x, wt)) in b.samples.iter().zip(&b.weights).enumerate() {
                w.write_record([s.iteration.to_string(), node.to_string(), k.to_string(), x.x.to_string(), x.y.to_string(), wt.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-iteration estimates as `iteration,node,x,y`.
pub fn write_estimates_csv(path: &Path, snapshots: &[IterationSnapshot]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["iteration", "node", "x", "y"])?;
    for s in snapshots {
        for (node, e) in s.estimates.iter().enumerate() {
            w.write_record([s.iteration.to_string(), node.to_string(), e[0].to_string(), e[1].to_string()])?;
        }
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
    Ok(())
}
