//! Monte Carlo batches: configuration, metrics tables and their summaries.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{EdgeEvaluator, EvalTiming, LikelihoodVariant};
use crate::nbp::{run_calibration, write_belief_csv, write_estimates_csv, CalibrationConfig, CalibrationReport, KernelLocationRule, NbpConfig};
use crate::scenario::{Scenario, ScenarioConfig};
use crate::tracker::run_local_filter;

/// Commented configuration file holding every default.
pub const DEFAULT_CONFIG_TOML: &str = r#"# Calibration experiment.

# First filtered step (0-based); local tracks are seeded one step earlier.
window_start = 20
# Window length t.
window_len = 10
# Particles per belief (L).
particles = 100
# LBP iterations (S).
iterations = 16
# Monte Carlo runs use seeds first_seed, first_seed + 1, ...
first_seed = 0
runs = 100
# Explicit seed list; overrides first_seed/runs when non-empty.
seeds = []
# Edge potential: "quad" or "dual".
variant = "quad"
# Output directory for metrics, timing, estimates and belief dumps.
output_dir = "out"
# Write per-run particle clouds.
write_beliefs = false
# Multiple of the unweighted candidate-location covariance added to message bandwidths.
bandwidth_floor_ratio = 0.1
# Resample particle pairs by potential when building messages.
resample_pairs = true
# Message kernel placement: "relative" or "literal".
kernel_rule = "relative"
# Prior box margin as a fraction of the sensor hull's largest extent.
prior_margin = 0.25

[scenario]
rows = 4
cols = 4
# Grid spacing (m); node r * cols + c sits at (c, r) * spacing, node 0 is the anchor.
spacing = 1000.0
num_objects = 4
num_steps = 60
dt = 1.0
# Process noise: Q = sigma^2 [[q1 I, q2 I], [q2 I, q3 I]].
sigma = 0.5
q1 = 0.25
q2 = 0.5
q3 = 1.0
# Measurement noise standard deviation (m).
sigma_n = 10.0
# Initial [px, py, vx, vy] per object; empty draws them from the seed.
initial_states = []
# Speed (m/step) of drawn initial states.
speed = 10.0
# Minimum pairwise distance (m) of drawn initial positions.
min_separation = 200.0
# Overwritten per run.
seed = 0
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub window_start: usize,
    pub window_len: usize,
    pub particles: usize,
    pub iterations: usize,
    pub first_seed: u64,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub variant: LikelihoodVariant,
    pub output_dir: PathBuf,
    pub write_beliefs: bool,
    pub bandwidth_floor_ratio: f64,
    pub resample_pairs: bool,
    pub kernel_rule: KernelLocationRule,
    pub prior_margin: f64,
    pub scenario: ScenarioConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let nbp = NbpConfig::default();
        Self {
            window_start: 20,
            window_len: 10,
            particles: nbp.particles,
            iterations: nbp.iterations,
            first_seed: 0,
            runs: 100,
            seeds: Vec::new(),
            variant: LikelihoodVariant::Quad,
            output_dir: PathBuf::from("out"),
            write_beliefs: false,
            bandwidth_floor_ratio: nbp.bandwidth_floor_ratio,
            resample_pairs: nbp.resample_pairs,
            kernel_rule: nbp.kernel_rule,
            prior_margin: nbp.prior_margin,
            scenario: ScenarioConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 1 {
            return Err(Error::Config("window_len (t) must be at least 1".into()));
        }
        if self.window_start < 1 {
            return Err(Error::Config("window_start must be at least 1 so tracks can be seeded".into()));
        }
        if self.window_start + self.window_len > self.scenario.num_steps {
            return Err(Error::Config(format!(
                "window {}..{} exceeds the {} simulated steps",
                self.window_start,
                self.window_start + self.window_len,
                self.scenario.num_steps
            )));
        }
        if self.seed_list().is_empty() {
            return Err(Error::Config("no runs requested".into()));
        }
        self.scenario.validate()?;
        self.calibration(0).nbp.validate()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (self.first_seed..self.first_seed + self.runs as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// NBP stream for a run, distinct from the scenario stream of the same seed.
    pub fn nbp_seed(seed: u64) -> u64 {
        seed ^ 0x9e37_79b9_7f4a_7c15
    }

    pub fn calibration(&self, seed: u64) -> CalibrationConfig {
        CalibrationConfig {
            window_start: self.window_start,
            window_len: self.window_len,
            variant: self.variant,
            nbp: NbpConfig {
                particles: self.particles,
                iterations: self.iterations,
                resample_pairs: self.resample_pairs,
                bandwidth_floor_ratio: self.bandwidth_floor_ratio,
                kernel_rule: self.kernel_rule,
                prior_margin: self.prior_margin,
                seed: Self::nbp_seed(seed),
                parallel: true,
                keep_beliefs: true,
            },
        }
    }

    pub fn scenario_for(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig { seed, ..self.scenario.clone() }
    }
}

/// Accuracy of one run after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: u64,
    pub iteration: usize,
    /// `Σ_i ‖θ̂_i - θ*_i‖²` over all nodes (m²).
    pub mse: f64,
    /// Miss-distance averaged over the non-anchor nodes (m).
    pub mean_miss: f64,
    /// Miss-distance of every node, anchor included (m).
    pub node_miss: Vec<f64>,
}

/// Edge-evaluation cost of one run, both variants timed on the same particle pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub run: u64,
    pub edges: usize,
    pub particles: usize,
    pub local_filter_runs: usize,
    pub quad_evals: u64,
    pub quad_ms_per_eval: f64,
    pub dual_evals: u64,
    pub dual_ms_per_eval: f64,
    pub run_seconds: f64,
}

/// Metrics rows of one calibration, one per iteration.
pub fn metrics_rows(run: u64, scenario: &Scenario, report: &CalibrationReport) -> Vec<MetricsRow> {
    let net = &scenario.network;
    report
        .snapshots
        .iter()
        .map(|s| {
            let node_miss: Vec<f64> = s
                .estimates
                .iter()
                .enumerate()
                .map(|(i, e)| (Vector2::from(*e) - net.offset(i)).norm())
                .collect();
            let mse = node_miss.iter().map(|d| d * d).sum();
            let others: Vec<f64> = node_miss.iter().enumerate().filter(|(i, _)| *i != net.anchor).map(|(_, d)| *d).collect();
            let mean_miss = if others.is_empty() { 0.0 } else { others.iter().sum::<f64>() / others.len() as f64 };
            MetricsRow { run, iteration: s.iteration, mse, mean_miss, node_miss }
        })
        .collect()
}

/// Times quad and dual evaluations at the final particle pairs of every edge.
pub fn timing_probe(scenario: &Scenario, cfg: &RunConfig, report: &CalibrationReport) -> Result<EvalTiming> {
    let motion = scenario.config.motion_model()?;
    let sensor = scenario.config.sensor_model()?;
    let outs: Vec<_> = (0..scenario.num_sensors())
        .map(|j| run_local_filter(&scenario.sensor_measurements(j), cfg.window_start, cfg.window_len, &motion, &sensor))
        .collect::<Result<_>>()?;
    let beliefs = report
        .snapshots
        .last()
        .and_then(|s| s.beliefs.as_ref())
        .ok_or_else(|| Error::Config("timing probe needs the final particle clouds".into()))?;
    let mut timing = EvalTiming::default();
    for &(a, b) in &scenario.network.edges {
        let ev = EdgeEvaluator::new(&outs[a], &outs[b], &sensor, &sensor)?;
        for (ta, tb) in beliefs[a].samples.iter().zip(&beliefs[b].samples) {
            std::hint::black_box(ev.log_quad(ta, tb));
            std::hint::black_box(ev.log_dual(ta, tb));
        }
        timing.merge(&ev.timing());
    }
    Ok(timing)
}

/// Everything produced by one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub metrics: Vec<MetricsRow>,
    pub timing: Vec<TimingRow>,
    pub reports: Vec<(u64, CalibrationReport)>,
}

/// Runs every seed on the rayon pool; rows come back ordered by seed list position.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let seeds = cfg.seed_list();
    let runs: Vec<Result<(Vec<MetricsRow>, TimingRow, (u64, CalibrationReport))>> = seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let scenario = Scenario::generate(&cfg.scenario_for(seed))?;
            let report = run_calibration(&scenario, &cfg.calibration(seed))?;
            let run_seconds = start.elapsed().as_secs_f64();
            let probe = timing_probe(&scenario, cfg, &report)?;
            let rows = metrics_rows(seed, &scenario, &report);
            let timing = TimingRow {
                run: seed,
                edges: scenario.network.edges.len(),
                particles: cfg.particles,
                local_filter_runs: report.local_filter_runs,
                quad_evals: probe.quad_evals,
                quad_ms_per_eval: probe.quad_ms_per_eval(),
                dual_evals: probe.dual_evals,
                dual_ms_per_eval: probe.dual_ms_per_eval(),
                run_seconds,
            };
            Ok((rows, timing, (seed, report)))
        })
        .collect();
    let mut out = ExperimentResult { metrics: Vec::new(), timing: Vec::new(), reports: Vec::new() };
    for r in runs {
        let (rows, timing, report) = r?;
        out.metrics.extend(rows);
        out.timing.push(timing);
        out.reports.push(report);
    }
    Ok(out)
}

/// Writes `metrics.csv`, `timing.csv`, `summary.csv`, per-run estimates and,
/// optionally, particle clouds under `dir`.
pub fn write_outputs(dir: &Path, result: &ExperimentResult, beliefs: bool) -> Result<()> {
    fs::create_dir_all(dir.join("runs"))?;
    write_metrics_csv(&dir.join("metrics.csv"), &result.metrics)?;
    write_timing_csv(&dir.join("timing.csv"), &result.timing)?;
    write_summary_csv(&dir.join("summary.csv"), &summarize(&result.metrics)?)?;
    for (seed, rep) in &result.reports {
        write_estimates_csv(&dir.join("runs").join(format!("estimates_{seed}.csv")), &rep.snapshots)?;
        if beliefs {
            write_belief_csv(&dir.join("runs").join(format!("beliefs_{seed}.csv")), &rep.snapshots)?;
        }
    }
    Ok(())
}

/// `run,iteration,mse,mean_miss,miss_0,...,miss_{N-1}`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let nodes = rows.iter().map(|r| r.node_miss.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run".to_string(), "iteration".into(), "mse".into(), "mean_miss".into()];
    header.extend((0..nodes).map(|i| format!("miss_{i}")));
    w.write_record(&header)?;
    for r in rows {
        if r.node_miss.len() != nodes {
            return Err(Error::DimensionMismatch { expected: nodes, found: r.node_miss.len() });
        }
        let mut rec = vec![r.run.to_string(), r.iteration.to_string(), r.mse.to_string(), r.mean_miss.to_string()];
        rec.extend(r.node_miss.iter().map(|d| d.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("malformed metrics field {i} in {:?}", rec)))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let node_miss = (4..rec.len()).map(|i| field(&rec, i)).collect::<Result<_>>()?;
        rows.push(MetricsRow { run: field(&rec, 0)?, iteration: field(&rec, 1)?, mse: field(&rec, 2)?, mean_miss: field(&rec, 3)?, node_miss });
    }
    Ok(rows)
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timing_csv(path: &Path) -> Result<Vec<TimingRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Per-iteration aggregate over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iteration: usize,
    pub runs: usize,
    pub miss_min: f64,
    pub miss_q1: f64,
    pub miss_median: f64,
    pub miss_q3: f64,
    pub miss_max: f64,
    pub mse_mean: f64,
    pub mse_median: f64,
    pub log10_mse_mean: f64,
}

/// Quantile with linear interpolation between order statistics, `p ∈ [0, 1]`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(rows: &[MetricsRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Config("no metrics to summarize".into()));
    }
    let mut iterations: Vec<usize> = rows.iter().map(|r| r.iteration).collect();
    iterations.sort_unstable();
    iterations.dedup();
    Ok(iterations
        .into_iter()
        .map(|it| {
            let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.iteration == it).collect();
            let mut miss: Vec<f64> = sel.iter().map(|r| r.mean_miss).collect();
            let mut mse: Vec<f64> = sel.iter().map(|r| r.mse).collect();
            miss.sort_by(f64::total_cmp);
            mse.sort_by(f64::total_cmp);
            let mse_mean = mse.iter().sum::<f64>() / mse.len() as f64;
            SummaryRow {
                iteration: it,
                runs: sel.len(),
                miss_min: miss[0],
                miss_q1: quantile(&miss, 0.25),
                miss_median: quantile(&miss, 0.5),
                miss_q3: quantile(&miss, 0.75),
                miss_max: miss[miss.len() - 1],
                mse_mean,
                mse_median: quantile(&mse, 0.5),
                log10_mse_mean: mse_mean.log10(),
            }
        })
        .collect())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config() -> RunConfig {
        RunConfig {
            window_start: 3,
            window_len: 4,
            particles: 12,
            iterations: 2,
            runs: 2,
            scenario: ScenarioConfig { rows: 2, cols: 2, spacing: 200.0, num_objects: 2, num_steps: 10, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn documented_defaults_match() {
        let parsed: RunConfig = toml::from_str(DEFAULT_CONFIG_TOML).unwrap();
        assert_eq!(parsed, RunConfig::default());
        parsed.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            RunConfig { window_len: 0, ..Default::default() },
            RunConfig { particles: 1, ..Default::default() },
            RunConfig { iterations: 0, ..Default::default() },
            RunConfig { window_start: 55, ..Default::default() },
            RunConfig { runs: 0, ..Default::default() },
        ] {
            assert!(bad.validate().unwrap_err().is_config());
        }
        assert!(RunConfig::from_toml("particles = \"many\"").unwrap_err().is_config());
        assert!(RunConfig::from_toml("unknown_key = 1").unwrap_err().is_config());
    }

    #[test]
    fn seed_list_prefers_explicit_seeds() {
        let c = RunConfig { first_seed: 5, runs: 3, ..Default::default() };
        assert_eq!(c.seed_list(), vec![5, 6, 7]);
        let c = RunConfig { seeds: vec![9, 1], ..c };
        assert_eq!(c.seed_list(), vec![9, 1]);
    }

    #[test]
    fn one_iteration_gives_one_row_per_run() {
        let cfg = RunConfig { iterations: 1, ..small_config() };
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.metrics.len(), 2);
        assert_eq!(res.timing.len(), 2);
        for (row, t) in res.metrics.iter().zip(&res.timing) {
            assert_eq!(row.iteration, 1);
            assert_eq!(row.node_miss[0], 0.0);
            assert!(row.mse >= 0.0 && row.mean_miss >= 0.0);
            assert_eq!(t.local_filter_runs, 4);
            assert_eq!(t.quad_evals, (4 * cfg.particles) as u64);
            assert!(t.quad_ms_per_eval > 0.0 && t.dual_ms_per_eval > 0.0);
        }
    }

    #[test]
    fn identical_seeds_write_identical_files() {
        let cfg = small_config();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_outputs(a.path(), &run_experiment(&cfg).unwrap(), true).unwrap();
        write_outputs(b.path(), &run_experiment(&cfg).unwrap(), true).unwrap();
        for f in ["metrics.csv", "summary.csv", "runs/estimates_0.csv", "runs/beliefs_1.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let back = read_metrics_csv(&a.path().join("metrics.csv")).unwrap();
        assert_eq!(back, run_experiment(&cfg).unwrap().metrics);
        assert_eq!(read_timing_csv(&a.path().join("timing.csv")).unwrap().len(), 2);
    }

    #[test]
    fn single_run_quartiles_collapse() {
        let rows = vec![MetricsRow { run: 0, iteration: 1, mse: 4.0, mean_miss: 2.0, node_miss: vec![0.0, 2.0] }];
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 1);
        let r = s[0];
        assert_eq!([r.miss_min, r.miss_q1, r.miss_median, r.miss_q3, r.miss_max], [2.0; 5]);
        assert_eq!(r.mse_median, 4.0);
    }

    #[test]
    fn constant_metrics_give_flat_curves() {
        let rows: Vec<MetricsRow> = (0..5)
            .flat_map(|run| (1..=4).map(move |it| MetricsRow { run, iteration: it, mse: 9.0, mean_miss: 3.0, node_miss: vec![0.0, 3.0] }))
            .collect();
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|r| r.miss_median == 3.0 && r.mse_mean == 9.0 && r.log10_mse_mean == 9f64.log10()));
    }

    #[test]
    fn empty_summary_is_an_error() {
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summary_csv_roundtrip() {
        let rows: Vec<MetricsRow> =
            (0..7).map(|run| MetricsRow { run, iteration: 1, mse: run as f64 * 0.1, mean_miss: (run as f64).sqrt(), node_miss: vec![0.0] }).collect();
        let s = summarize(&rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_summary_csv(&p, &s).unwrap();
        assert_eq!(read_summary_csv(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn quartiles_match_order_statistics(values in prop::collection::vec(0.0f64..1e3, 1..60)) {
            let rows: Vec<MetricsRow> = values.iter().enumerate()
                .map(|(i, v)| MetricsRow { run: i as u64, iteration: 1, mse: v * v, mean_miss: *v, node_miss: vec![*v] })
                .collect();
            let s = summarize(&rows).unwrap()[0];
            // Independent oracle: rank-based interpolation on a freshly sorted copy.
            let mut v = values.clone();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle = |p: f64| {
                let pos = p * (v.len() as f64 - 1.0);
                let below = v[pos as usize];
                let above = v[(pos as usize + 1).min(v.len() - 1)];
                below + pos.fract() * (above - below)
            };
            prop_assert!((s.miss_q1 - oracle(0.25)).abs() < 1e-9);
            prop_assert!((s.miss_median - oracle(0.5)).abs() < 1e-9);
            prop_assert!((s.miss_q3 - oracle(0.75)).abs() < 1e-9);
            prop_assert_eq!(s.miss_min, v[0]);
            prop_assert_eq!(s.miss_max, v[v.len() - 1]);
        }

        #[test]
        fn metrics_csv_roundtrip(vals in prop::collection::vec((0.0f64..1e7, 0.0f64..1e4), 1..20)) {
            let rows: Vec<MetricsRow> = vals.iter().enumerate()
                .map(|(i, (m, d))| MetricsRow { run: i as u64, iteration: i % 3 + 1, mse: *m, mean_miss: *d, node_miss: vec![0.0, *d, d / 3.0] })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.csv");
            write_metrics_csv(&p, &rows).unwrap();
            prop_assert_eq!(read_metrics_csv(&p).unwrap(), rows);
        }
    }
}
