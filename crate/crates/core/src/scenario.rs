//! Ground-truth geometry, object trajectories and permuted sensor measurements.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgss::{cholesky, MotionModel, SensorModel};

/// Sensors with ground-truth offsets and undirected edges. Node ids are
/// `0..n`; the anchor defines the origin of the network frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub offsets: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
    pub anchor: usize,
}

impl NetworkGraph {
    pub fn new(offsets: Vec<[f64; 2]>, edges: Vec<(usize, usize)>, anchor: usize) -> Result<Self> {
        let n = offsets.len();
        if anchor >= n {
            return Err(Error::Config(format!("anchor {anchor} is not a node of a {n}-node graph")));
        }
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n || a == b) {
            return Err(Error::Config(format!("invalid edge ({a}, {b}) for {n} nodes")));
        }
        Ok(Self { offsets, edges, anchor })
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len()
    }

    pub fn offset(&self, i: usize) -> Vector2<f64> {
        Vector2::from(self.offsets[i])
    }

    /// Neighbour lists, each sorted ascending.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for nb in &mut adj {
            nb.sort_unstable();
            nb.dedup();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        if n == 0 {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Axis-aligned bounding box `(min, max)` of the sensor positions.
    pub fn bounds(&self) -> (Vector2<f64>, Vector2<f64>) {
        let mut lo = Vector2::repeat(f64::INFINITY);
        let mut hi = Vector2::repeat(f64::NEG_INFINITY);
        for o in &self.offsets {
            let p = Vector2::from(*o);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (lo, hi)
    }
}

/// Lattice of `rows x cols` sensors `spacing` metres apart with 4-neighbour
/// edges. Node `r * cols + c` sits at `(c * spacing, r * spacing)`; node 0 is
/// the anchor at the origin.
pub fn build_grid_network(rows: usize, cols: usize, spacing: f64) -> Result<NetworkGraph> {
    if rows * cols < 2 {
        return Err(Error::Config(format!("grid needs at least two nodes, got {rows}x{cols}")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::Config(format!("grid spacing must be positive, got {spacing}")));
    }
    let offsets = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| [c as f64 * spacing, r as f64 * spacing]))
        .collect();
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            if c + 1 < cols {
                edges.push((id, id + 1));
            }
            if r + 1 < rows {
                edges.push((id, id + cols));
            }
        }
    }
    NetworkGraph::new(offsets, edges, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub rows: usize,
    pub cols: usize,
    /// Distance between neighbouring sensors (m).
    pub spacing: f64,
    pub num_objects: usize,
    pub num_steps: usize,
    pub dt: f64,
    /// Process noise scale; `Q` is built from `sigma^2` and `q1..q3`.
    pub sigma: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    /// Measurement noise standard deviation (m).
    pub sigma_n: f64,
    /// Initial `[px, py, vx, vy]` per object; drawn from the seed when empty.
    pub initial_states: Vec<[f64; 4]>,
    /// Speed of randomly drawn initial states (m per step).
    pub speed: f64,
    /// Minimum initial distance between randomly drawn objects (m).
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            spacing: 1000.0,
            num_objects: 4,
            num_steps: 60,
            dt: 1.0,
            sigma: 0.5,
            q1: 0.25,
            q2: 0.5,
            q3: 1.0,
            sigma_n: 10.0,
            initial_states: Vec::new(),
            speed: 10.0,
            min_separation: 200.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn motion_model(&self) -> Result<MotionModel> {
        MotionModel::new(self.dt, self.sigma * self.sigma, self.q1, self.q2, self.q3)
    }

    pub fn sensor_model(&self) -> Result<SensorModel> {
        SensorModel::position(self.sigma_n)
    }

    pub fn network(&self) -> Result<NetworkGraph> {
        build_grid_network(self.rows, self.cols, self.spacing)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_objects == 0 {
            return Err(Error::Config("num_objects must be at least 1".into()));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if !self.initial_states.is_empty() && self.initial_states.len() != self.num_objects {
            return Err(Error::Config(format!(
                "{} initial states given for {} objects",
                self.initial_states.len(),
                self.num_objects
            )));
        }
        self.network()?;
        self.motion_model()?;
        self.sensor_model()?;
        Ok(())
    }
}

/// Symmetric square root `A` with `A A^T = m`; negative eigenvalues are clamped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn standard_normal(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Initial states inside the central part of the sensor hull, headings uniform.
fn draw_initial_states(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Vec<[f64; 4]> {
    let width = ((cfg.cols.max(1) - 1) as f64 * cfg.spacing).max(cfg.spacing);
    let height = ((cfg.rows.max(1) - 1) as f64 * cfg.spacing).max(cfg.spacing);
    let centre = [(cfg.cols.max(1) - 1) as f64 * cfg.spacing / 2.0, (cfg.rows.max(1) - 1) as f64 * cfg.spacing / 2.0];
    let mut states: Vec<[f64; 4]> = Vec::with_capacity(cfg.num_objects);
    let mut attempts = 0;
    while states.len() < cfg.num_objects {
        let px = centre[0] + width * rng.random_range(-0.3..0.3);
        let py = centre[1] + height * rng.random_range(-0.3..0.3);
        attempts += 1;
        let clear = states.iter().all(|s| (s[0] - px).hypot(s[1] - py) >= cfg.min_separation);
        if !clear && attempts < 10_000 {
            continue;
        }
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        states.push([px, py, cfg.speed * heading.cos(), cfg.speed * heading.sin()]);
    }
    states
}

/// Object states in the global frame, `[object][step]`.
pub fn simulate_trajectories(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Result<Vec<Vec<[f64; 4]>>> {
    cfg.validate()?;
    let motion = cfg.motion_model()?;
    let noise = psd_sqrt(&motion.q);
    let initial = if cfg.initial_states.is_empty() { draw_initial_states(cfg, rng) } else { cfg.initial_states.clone() };
    Ok(initial
        .into_iter()
        .map(|x0| {
            let mut x = DVector::from_row_slice(&x0);
            let mut path = Vec::with_capacity(cfg.num_steps);
            path.push(x0);
            for _ in 1..cfg.num_steps {
                x = &motion.f * &x + &noise * standard_normal(rng, 4);
                path.push([x[0], x[1], x[2], x[3]]);
            }
            path
        })
        .collect())
}

/// Per-sensor measurement sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    /// `[sensor][step][slot]`, positions in the sensor's local frame.
    pub measurements: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[sensor][step][object]` = slot holding that object's measurement.
    pub true_permutations: Vec<Vec<Vec<usize>>>,
}

/// `z = H (x - [theta_j; 0]) + v`, stored in uniformly shuffled order.
pub fn generate_measurements(
    trajectories: &[Vec<[f64; 4]>],
    net: &NetworkGraph,
    sensors: &[SensorModel],
    rng: &mut impl Rng,
) -> Result<MeasurementSet> {
    if sensors.len() != net.num_nodes() {
        return Err(Error::DimensionMismatch { expected: net.num_nodes(), found: sensors.len() });
    }
    let m = trajectories.len();
    let k_len = trajectories.first().map_or(0, Vec::len);
    let mut measurements = Vec::with_capacity(sensors.len());
    let mut true_permutations = Vec::with_capacity(sensors.len());
    for (j, sensor) in sensors.iter().enumerate() {
        let chol_r = cholesky(&sensor.r, "measurement noise")?;
        let l = chol_r.l();
        let theta = net.offset(j);
        let mut per_step = Vec::with_capacity(k_len);
        let mut perms = Vec::with_capacity(k_len);
        for k in 0..k_len {
            let mut slots = vec![Vec::new(); m];
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(rng);
            for (obj, path) in trajectories.iter().enumerate() {
                let mut x = DVector::from_row_slice(&path[k]);
                x[0] -= theta.x;
                x[1] -= theta.y;
                let z = &sensor.h * x + &l * standard_normal(rng, sensor.meas_dim());
                slots[perm[obj]] = z.iter().copied().collect();
            }
            per_step.push(slots);
            perms.push(perm);
        }
        measurements.push(per_step);
        true_permutations.push(perms);
    }
    Ok(MeasurementSet { measurements, true_permutations })
}

/// A replayable ground-truth world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub network: NetworkGraph,
    /// `[object][step]` states in the global frame.
    pub trajectories: Vec<Vec<[f64; 4]>>,
    /// `[sensor][step][slot]` local-frame positions.
    pub measurements: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[sensor][step][object]` = measurement slot.
    pub true_permutations: Vec<Vec<Vec<usize>>>,
    pub rng_seed: u64,
}

impl Scenario {
    /// Trajectories then measurements, both from one ChaCha8 stream seeded by `cfg.seed`.
    pub fn generate(cfg: &ScenarioConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let network = cfg.network()?;
        let trajectories = simulate_trajectories(cfg, &mut rng)?;
        let sensors = vec![cfg.sensor_model()?; network.num_nodes()];
        let set = generate_measurements(&trajectories, &network, &sensors, &mut rng)?;
        Ok(Self {
            config: cfg.clone(),
            network,
            trajectories,
            measurements: set.measurements,
            true_permutations: set.true_permutations,
            rng_seed: cfg.seed,
        })
    }

    pub fn num_sensors(&self) -> usize {
        self.measurements.len()
    }

    pub fn num_objects(&self) -> usize {
        self.trajectories.len()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    /// Measurements of sensor `j` at step `k` as vectors.
    pub fn measurement_vectors(&self, j: usize, k: usize) -> Vec<DVector<f64>> {
        self.measurements[j][k].iter().map(|z| DVector::from_row_slice(z)).collect()
    }

    /// All steps of sensor `j`.
    pub fn sensor_measurements(&self, j: usize) -> Vec<Vec<DVector<f64>>> {
        (0..self.num_steps()).map(|k| self.measurement_vectors(j, k)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::is_permutation;
    use proptest::prelude::*;

    #[test]
    fn grid_one_by_two() {
        let g = build_grid_network(1, 2, 1000.0).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.edges, vec![(0, 1)]);
        assert_eq!(g.offsets[1], [1000.0, 0.0]);
        assert_eq!(g.anchor, 0);
        assert_eq!(g.offsets[0], [0.0, 0.0]);
    }

    #[test]
    fn grid_four_by_four() {
        let g = build_grid_network(4, 4, 1000.0).unwrap();
        assert_eq!(g.num_nodes(), 16);
        assert_eq!(g.edges.len(), 24);
        assert!(g.is_connected());
    }

    #[test]
    fn grid_two_by_two_is_a_cycle() {
        let g = build_grid_network(2, 2, 1.0).unwrap();
        assert_eq!(g.edges.len(), 4);
        assert!(g.adjacency().iter().all(|nb| nb.len() == 2));
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(build_grid_network(0, 5, 1.0).is_err());
        assert!(build_grid_network(1, 1, 1.0).is_err());
        assert!(build_grid_network(2, 2, 0.0).is_err());
    }

    #[test]
    fn graph_rejects_bad_edges() {
        assert!(NetworkGraph::new(vec![[0.0; 2]; 2], vec![(0, 2)], 0).is_err());
        assert!(NetworkGraph::new(vec![[0.0; 2]; 2], vec![(0, 1)], 2).is_err());
    }

    #[test]
    fn zero_process_noise_is_constant_velocity() {
        let cfg = ScenarioConfig {
            sigma: 0.0,
            num_objects: 1,
            num_steps: 8,
            initial_states: vec![[0.0, 0.0, 1.0, 0.0]],
            ..Default::default()
        };
        let traj = simulate_trajectories(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (k, x) in traj[0].iter().enumerate() {
            assert_eq!(*x, [k as f64, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn process_noise_covariance_matches_q() {
        let cfg = ScenarioConfig { num_objects: 1, num_steps: 100_001, ..Default::default() };
        let traj = simulate_trajectories(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let motion = cfg.motion_model().unwrap();
        let mut acc = DMatrix::zeros(4, 4);
        let n = traj[0].len() - 1;
        for w in traj[0].windows(2) {
            let inc = DVector::from_row_slice(&w[1]) - &motion.f * DVector::from_row_slice(&w[0]);
            acc += &inc * inc.transpose();
        }
        let sample = acc / n as f64;
        let rel = (&sample - &motion.q).norm() / motion.q.norm();
        assert!(rel < 0.02, "relative Frobenius error {rel}");
    }

    #[test]
    fn same_seed_same_scenario() {
        let cfg = ScenarioConfig { seed: 42, num_steps: 10, ..Default::default() };
        assert_eq!(Scenario::generate(&cfg).unwrap(), Scenario::generate(&cfg).unwrap());
        let other = ScenarioConfig { seed: 43, ..cfg.clone() };
        assert_ne!(Scenario::generate(&cfg).unwrap().trajectories, Scenario::generate(&other).unwrap().trajectories);
    }

    #[test]
    fn noiseless_measurements_are_object_positions() {
        let cfg = ScenarioConfig { sigma_n: 1e-12, num_steps: 5, ..Default::default() };
        let sc = Scenario::generate(&cfg).unwrap();
        for j in 0..sc.num_sensors() {
            let theta = sc.network.offsets[j];
            for k in 0..sc.num_steps() {
                for m in 0..sc.num_objects() {
                    let z = &sc.measurements[j][k][sc.true_permutations[j][k][m]];
                    let x = sc.trajectories[m][k];
                    assert!((z[0] - (x[0] - theta[0])).abs() < 1e-9);
                    assert!((z[1] - (x[1] - theta[1])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn measurement_noise_std_is_sigma_n() {
        let traj = vec![vec![[5.0, -3.0, 0.0, 0.0]; 50_000]];
        let net = build_grid_network(1, 2, 100.0).unwrap();
        let sensors = vec![SensorModel::position(10.0).unwrap(); 2];
        let set = generate_measurements(&traj, &net, &sensors, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut ss = 0.0;
        let mut n = 0.0;
        for (j, steps) in set.measurements.iter().enumerate() {
            for slots in steps {
                let z = &slots[0];
                ss += (z[0] - (5.0 - net.offsets[j][0])).powi(2) + (z[1] - (-3.0 - net.offsets[j][1])).powi(2);
                n += 2.0;
            }
        }
        let std = (ss / n).sqrt();
        assert!((std - 10.0).abs() / 10.0 < 0.02, "std {std}");
    }

    #[test]
    fn permutations_are_uniform() {
        let traj = vec![vec![[0.0; 4]; 10_000]; 3];
        let net = build_grid_network(1, 2, 1.0).unwrap();
        let sensors = vec![SensorModel::position(1.0).unwrap(); 2];
        let set = generate_measurements(&traj, &net, &sensors, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mut counts = std::collections::HashMap::new();
        for p in &set.true_permutations[0] {
            *counts.entry(p.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let expected = 10_000.0 / 6.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 5 degrees of freedom.
        assert!(chi2 < 15.086, "chi2 {chi2}");
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let sc = Scenario::generate(&ScenarioConfig { num_steps: 6, seed: 9, ..Default::default() }).unwrap();
        assert_eq!(Scenario::from_json(&sc.to_json().unwrap()).unwrap(), sc);
    }

    #[test]
    fn psd_sqrt_of_singular_q() {
        let q = MotionModel::reference().q;
        let a = psd_sqrt(&q);
        assert!((&a * a.transpose() - &q).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn grids_are_connected(rows in 1usize..7, cols in 1usize..7, spacing in 1.0f64..5000.0) {
            prop_assume!(rows * cols >= 2);
            let g = build_grid_network(rows, cols, spacing).unwrap();
            prop_assert!(g.is_connected());
            prop_assert_eq!(g.edges.len(), rows * (cols - 1) + cols * (rows - 1));
        }

        #[test]
        fn depermuted_measurements_recover_positions(seed in 0u64..1000) {
            let cfg = ScenarioConfig { rows: 2, cols: 2, num_steps: 3, sigma_n: 1.0, seed, ..Default::default() };
            let sc = Scenario::generate(&cfg).unwrap();
            for j in 0..sc.num_sensors() {
                let theta = sc.network.offsets[j];
                for k in 0..sc.num_steps() {
                    prop_assert!(is_permutation(&sc.true_permutations[j][k]));
                    prop_assert_eq!(sc.measurements[j][k].len(), sc.num_objects());
                    for m in 0..sc.num_objects() {
                        let z = &sc.measurements[j][k][sc.true_permutations[j][k][m]];
                        let x = sc.trajectories[m][k];
                        // 8 sigma per coordinate.
                        prop_assert!((z[0] - (x[0] - theta[0])).abs() < 8.0);
                        prop_assert!((z[1] - (x[1] - theta[1])).abs() < 8.0);
                    }
                }
            }
        }
    }
}
