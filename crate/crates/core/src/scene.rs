//! Interactive scene-evolution prediction.
//!
//! Each situation owns a joint Gaussian mixture over `[state features |
//! actions]`. A rollout draws the situation once from the recognizer's
//! posterior, then alternates conditional action sampling with a
//! deterministic kinematic update. Accelerations are always re-derived from
//! consecutive velocities rather than sampled.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{self, BlockPartition, GmmDocument, GmmParams, GmmRegressor};
use crate::hmm::{FitConfig, FitReport};
use crate::linalg::{DataMatrix, COV_FLOOR};
use crate::random::{derive_seed, rng_from_seed, SeededRng};
use crate::scenario::{self, Event, Situation};

/// Leading vehicle columns carried in the real-data configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeadState {
    pub y: f64,
    pub vy: f64,
}

/// Kinematic state of the two interacting cars (m, m/s, m/s²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneState {
    pub y_main: f64,
    pub y_merge: f64,
    pub vy_main: f64,
    pub vy_merge: f64,
    pub ay_main: f64,
    pub ay_merge: f64,
    pub x_main: f64,
    pub x_merge: f64,
    pub lead: Option<LeadState>,
}

impl SceneState {
    /// Lateral distance between the two cars.
    pub fn d_lat(&self) -> f64 {
        (self.x_main - self.x_merge).abs()
    }

    /// State-feature vector in schema order.
    pub fn to_features(&self) -> Vec<f64> {
        let mut v = vec![
            self.y_main,
            self.y_merge,
            self.d_lat(),
            self.vy_main,
            self.vy_merge,
            self.ay_main,
            self.ay_merge,
        ];
        if let Some(l) = self.lead {
            v.push(l.y);
            v.push(l.vy);
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_features().iter().all(|v| v.is_finite())
            && self.x_main.is_finite()
            && self.x_merge.is_finite()
    }

    pub fn position(&self, agent: ScenarioAgent) -> (f64, f64) {
        match agent {
            ScenarioAgent::Main => (self.x_main, self.y_main),
            ScenarioAgent::Merge => (self.x_merge, self.y_merge),
        }
    }

    pub fn velocity(&self, agent: ScenarioAgent) -> f64 {
        match agent {
            ScenarioAgent::Main => self.vy_main,
            ScenarioAgent::Merge => self.vy_merge,
        }
    }
}

/// The two predicted agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioAgent {
    Main,
    Merge,
}

impl ScenarioAgent {
    pub const BOTH: [ScenarioAgent; 2] = [ScenarioAgent::Main, ScenarioAgent::Merge];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioAgent::Main => "main",
            ScenarioAgent::Merge => "merge",
        }
    }
}

/// One-step action labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneAction {
    pub dx_main: f64,
    pub dx_merge: f64,
    pub vy_main_next: f64,
    pub vy_merge_next: f64,
}

impl SceneAction {
    pub const DIM: usize = 4;

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.dx_main, self.dx_merge, self.vy_main_next, self.vy_merge_next]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::DIM {
            return Err(Error::DimensionMismatch {
                expected: Self::DIM,
                got: v.len(),
            });
        }
        Ok(Self {
            dx_main: v[0],
            dx_merge: v[1],
            vy_main_next: v[2],
            vy_merge_next: v[3],
        })
    }
}

/// Deterministic kinematic transition. The leading vehicle, when present,
/// keeps its velocity.
pub fn propagate(state: &SceneState, action: &SceneAction, dt: f64) -> SceneState {
    debug_assert!(dt > 0.0);
    SceneState {
        x_main: state.x_main + action.dx_main,
        x_merge: state.x_merge + action.dx_merge,
        y_main: state.y_main + 0.5 * (state.vy_main + action.vy_main_next) * dt,
        y_merge: state.y_merge + 0.5 * (state.vy_merge + action.vy_merge_next) * dt,
        ay_main: (action.vy_main_next - state.vy_main) / dt,
        ay_merge: (action.vy_merge_next - state.vy_merge) / dt,
        vy_main: action.vy_main_next,
        vy_merge: action.vy_merge_next,
        lead: state.lead.map(|l| LeadState {
            y: l.y + l.vy * dt,
            vy: l.vy,
        }),
    }
}

/// Settings for fitting the per-situation action models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneFitConfig {
    /// Fixed component count; `None` selects by BIC over `1..=max_components`.
    pub components: Option<usize>,
    pub max_components: usize,
    pub fit: FitConfig,
}

impl Default for SceneFitConfig {
    fn default() -> Self {
        Self {
            components: None,
            max_components: 10,
            fit: FitConfig::default(),
        }
    }
}

/// Joint state-action mixture for one situation.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub situation: Situation,
    pub schema: Vec<String>,
    pub partition: BlockPartition,
    pub gmm: GmmParams,
    regressor: GmmRegressor,
}

impl SceneModel {
    pub fn new(situation: Situation, schema: Vec<String>, partition: BlockPartition, gmm: GmmParams) -> Result<Self> {
        if schema.len() != gmm.dim() {
            return Err(Error::DimensionMismatch {
                expected: gmm.dim(),
                got: schema.len(),
            });
        }
        if partition.a_indices.len() != SceneAction::DIM {
            return Err(Error::invalid("action block must hold the four action labels"));
        }
        let regressor = GmmRegressor::new(&gmm, &partition, COV_FLOOR)?;
        Ok(Self {
            situation,
            schema,
            partition,
            gmm,
            regressor,
        })
    }

    /// Fits the mixture on `[SE | a]` rows.
    pub fn fit(
        situation: Situation,
        rows: &DataMatrix,
        schema: Vec<String>,
        config: &SceneFitConfig,
        seed: u64,
    ) -> Result<(Self, FitReport)> {
        let n_se = rows
            .ncols()
            .checked_sub(SceneAction::DIM)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid("rows too narrow for state and action blocks"))?;
        let k = match config.components {
            Some(k) => k,
            None => gmm::select_by_bic(rows, 1..=config.max_components, &config.fit, seed)?.0,
        };
        let (model, report) = gmm::em_fit(rows, k, &config.fit, seed)?;
        let me = Self::new(situation, schema, BlockPartition::leading(n_se, SceneAction::DIM), model)?;
        Ok((me, report))
    }

    pub fn regressor(&self) -> &GmmRegressor {
        &self.regressor
    }

    pub fn se_dim(&self) -> usize {
        self.partition.se_indices.len()
    }

    pub fn to_document(&self) -> SceneModelDocument {
        SceneModelDocument {
            situation: self.situation,
            mixture: GmmDocument {
                schema: self.schema.clone(),
                partition: Some(self.partition.clone()),
                model: self.gmm.clone(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: SceneModelDocument = serde_json::from_str(&text)?;
        let partition = doc
            .mixture
            .partition
            .ok_or_else(|| Error::invalid("scene model file lacks a block partition"))?;
        Self::new(doc.situation, doc.mixture.schema, partition, doc.mixture.model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneModelDocument {
    pub situation: Situation,
    pub mixture: GmmDocument,
}

/// One model per situation in [`Situation::ALL`] order, trained on the
/// extracted state/action pairs of `events`.
pub fn fit_scene_models(
    events: &[Event],
    config: &SceneFitConfig,
    seed: u64,
) -> Result<Vec<(SceneModel, FitReport)>> {
    Situation::ALL
        .par_iter()
        .enumerate()
        .map(|(i, &sit)| {
            let mut rows: Option<DataMatrix> = None;
            let mut with_lead = false;
            for ev in events.iter().filter(|e| e.situation == sit) {
                let f = scenario::extract_features(ev)?;
                with_lead = ev.lead.is_some();
                let r = f.joint_rows()?;
                match rows.as_mut() {
                    None => rows = Some(r),
                    Some(acc) => acc.extend(&r)?,
                }
            }
            let rows = rows.ok_or_else(|| Error::Roster {
                entry: format!("scene-{sit}"),
                reason: "no training events".into(),
            })?;
            let mut schema = scenario::state_feature_names(with_lead);
            schema.extend(scenario::action_names());
            SceneModel::fit(sit, &rows, schema, config, derive_seed(seed, 100 + i as u64))
        })
        .collect()
}

fn check_models(models: &[SceneModel], posterior: &[f64]) -> Result<()> {
    if models.is_empty() || models.len() != posterior.len() {
        return Err(Error::DimensionMismatch {
            expected: models.len(),
            got: posterior.len(),
        });
    }
    if posterior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("posterior has a negative or non-finite entry"));
    }
    let s: f64 = posterior.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("posterior sums to {s}")));
    }
    Ok(())
}

/// Draws a situation from `posterior`, then one action from that situation's
/// conditional action model.
pub fn sample_action_with(
    models: &[SceneModel],
    posterior: &[f64],
    state: &SceneState,
    rng: &mut SeededRng,
) -> Result<(SceneAction, usize)> {
    check_models(models, posterior)?;
    let idx = gmm::pick_index(posterior, rng);
    let action = draw_action(&models[idx], state, rng)?;
    Ok((action, idx))
}

pub fn sample_action(
    models: &[SceneModel],
    posterior: &[f64],
    state: &SceneState,
    seed: u64,
) -> Result<(SceneAction, usize)> {
    sample_action_with(models, posterior, state, &mut rng_from_seed(seed))
}

fn draw_action(model: &SceneModel, state: &SceneState, rng: &mut SeededRng) -> Result<SceneAction> {
    let se = state.to_features();
    if se.len() != model.se_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.se_dim(),
            got: se.len(),
        });
    }
    let (a, fell_back) = model.regressor.sample(&se, rng);
    if fell_back {
        log::debug!("{}: conditioning used prior weights", model.situation);
    }
    SceneAction::from_slice(&a)
}

/// Monte-Carlo rollout samples.
#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble {
    /// `samples[i][k]` is sample `i` at step `k`; step 0 is the initial state.
    pub samples: Vec<Vec<SceneState>>,
    pub situation_of_sample: Vec<usize>,
    /// Step at which a sample hit a non-finite state and was cut short.
    pub truncated_at: Vec<Option<usize>>,
    pub horizon: usize,
    pub dt: f64,
}

/// Mean and covariance of one agent's planar position at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionStats {
    pub mean: [f64; 2],
    /// `[[xx, xy], [xy, yy]]`
    pub cov: [[f64; 2]; 2],
    pub count: usize,
}

impl PositionStats {
    /// Squared Mahalanobis distance of `(x, y)`; a tiny ridge keeps degenerate
    /// ensembles well defined.
    pub fn mahalanobis_sq(&self, x: f64, y: f64) -> f64 {
        let ridge = 1e-12;
        let a = self.cov[0][0] + ridge;
        let b = self.cov[0][1];
        let c = self.cov[1][1] + ridge;
        let det = a * c - b * b;
        let dx = x - self.mean[0];
        let dy = y - self.mean[1];
        (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    }
}

impl TrajectoryEnsemble {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Statistics over all complete samples at `step`.
    pub fn position_stats(&self, step: usize, agent: ScenarioAgent) -> Option<PositionStats> {
        let pts: Vec<(f64, f64)> = self
            .samples
            .iter()
            .filter(|s| s.len() > step)
            .map(|s| s[step].position(agent))
            .collect();
        let n = pts.len();
        if n < 2 {
            return None;
        }
        let nf = n as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for (x, y) in &pts {
            xx += (x - mx) * (x - mx);
            xy += (x - mx) * (y - my);
            yy += (y - my) * (y - my);
        }
        let d = nf - 1.0;
        Some(PositionStats {
            mean: [mx, my],
            cov: [[xx / d, xy / d], [xy / d, yy / d]],
            count: n,
        })
    }

    /// For steps `1..=horizon`, whether both agents' true positions lie inside
    /// the ensemble's `k_sigma` ellipse. `truth[k]` pairs with step `k`.
    pub fn containment(&self, truth: &[SceneState], k_sigma: f64) -> Vec<bool> {
        (1..=self.horizon.min(truth.len().saturating_sub(1)))
            .map(|k| {
                ScenarioAgent::BOTH.iter().all(|&agent| {
                    let (x, y) = truth[k].position(agent);
                    self.position_stats(k, agent)
                        .is_some_and(|s| s.mahalanobis_sq(x, y) <= k_sigma * k_sigma)
                })
            })
            .collect()
    }

    /// CSV with columns `sample,step,agent,x,y,velocity`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sample", "step", "agent", "x", "y", "velocity"])?;
        for (i, s) in self.samples.iter().enumerate() {
            for (k, st) in s.iter().enumerate() {
                for agent in ScenarioAgent::BOTH {
                    let (x, y) = st.position(agent);
                    w.write_record([
                        i.to_string(),
                        k.to_string(),
                        agent.label().to_string(),
                        x.to_string(),
                        y.to_string(),
                        st.velocity(agent).to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("ensemble csv", e))?;
        Ok(())
    }
}

/// Samples `n_samples` trajectories of `horizon` steps. Sample `i` uses its
/// own stream derived from `seed`, so the result does not depend on thread
/// scheduling.
pub fn rollout(
    models: &[SceneModel],
    posterior: &[f64],
    initial: &SceneState,
    horizon: usize,
    n_samples: usize,
    dt: f64,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    check_models(models, posterior)?;
    if horizon == 0 || n_samples == 0 {
        return Err(Error::invalid("rollout needs horizon >= 1 and n_samples >= 1"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    if let Some(m) = models.iter().find(|m| m.se_dim() != initial.to_features().len()) {
        return Err(Error::DimensionMismatch {
            expected: m.se_dim(),
            got: initial.to_features().len(),
        });
    }
    let runs: Vec<(Vec<SceneState>, usize, Option<usize>)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            let situation = gmm::pick_index(posterior, &mut rng);
            let model = &models[situation];
            let mut traj = Vec::with_capacity(horizon + 1);
            traj.push(*initial);
            let mut cut = None;
            for k in 1..=horizon {
                let prev = traj[k - 1];
                let next = draw_action(model, &prev, &mut rng).map(|a| propagate(&prev, &a, dt));
                match next {
                    Ok(s) if s.is_finite() => traj.push(s),
                    _ => {
                        log::warn!("rollout sample {i} produced a non-finite state at step {k}; truncated");
                        cut = Some(k);
                        break;
                    }
                }
            }
            (traj, situation, cut)
        })
        .collect();
    let mut ens = TrajectoryEnsemble {
        samples: Vec::with_capacity(n_samples),
        situation_of_sample: Vec::with_capacity(n_samples),
        truncated_at: Vec::with_capacity(n_samples),
        horizon,
        dt,
    };
    for (traj, sit, cut) in runs {
        ens.samples.push(traj);
        ens.situation_of_sample.push(sit);
        ens.truncated_at.push(cut);
    }
    Ok(ens)
}

/// Raster extents and cell sizes (m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_x: f64,
    pub cell_y: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cell_x > 0.0
            && self.cell_y > 0.0
            && self.x_max > self.x_min
            && self.y_max > self.y_min
            && [self.x_min, self.x_max, self.y_min, self.y_max, self.cell_x, self.cell_y]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::invalid("grid needs positive cell sizes and non-empty extents"));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell_x).ceil() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell_y).ceil() as usize
    }

    /// Cell containing `(x, y)`, clamped into the grid; the flag reports
    /// whether clamping happened.
    pub fn cell_of(&self, x: f64, y: f64) -> ((usize, usize), bool) {
        let fx = ((x - self.x_min) / self.cell_x).floor();
        let fy = ((y - self.y_min) / self.cell_y).floor();
        let clamp = |f: f64, n: usize| -> (usize, bool) {
            if f < 0.0 || f.is_nan() {
                (0, true)
            } else if f >= n as f64 {
                (n - 1, true)
            } else {
                (f as usize, false)
            }
        };
        let (ix, cx) = clamp(fx, self.nx());
        let (iy, cy) = clamp(fy, self.ny());
        ((ix, iy), cx || cy)
    }

    /// Bounding box of an ensemble's positions, padded by one cell.
    pub fn covering(ens: &TrajectoryEnsemble, cell_x: f64, cell_y: f64) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &ens.samples {
            for st in s.iter().skip(1) {
                for agent in ScenarioAgent::BOTH {
                    let (x, y) = st.position(agent);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        Self {
            x_min: x0 - cell_x,
            x_max: x1 + cell_x,
            y_min: y0 - cell_y,
            y_max: y1 + cell_y,
            cell_x,
            cell_y,
        }
    }
}

/// Per-agent rasterized position counts, row-major with `y` rows and `x`
/// columns.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub nx: usize,
    pub ny: usize,
    /// Indexed like [`ScenarioAgent::BOTH`].
    pub cells: [Vec<f64>; 2],
    /// Deposits that fell outside the extents and were moved to the border.
    pub clamped: [usize; 2],
    pub normalized: bool,
}

impl OccupancyGrid {
    pub fn total(&self, agent: ScenarioAgent) -> f64 {
        self.cells[agent as usize].iter().sum()
    }

    pub fn at(&self, agent: ScenarioAgent, ix: usize, iy: usize) -> f64 {
        self.cells[agent as usize][iy * self.nx + ix]
    }

    /// Each agent's grid scaled to sum to one.
    pub fn normalize(&self) -> OccupancyGrid {
        let mut out = self.clone();
        for cells in out.cells.iter_mut() {
            let s: f64 = cells.iter().sum();
            if s > 0.0 {
                cells.iter_mut().for_each(|c| *c /= s);
            }
        }
        out.normalized = true;
        out
    }

    /// Grid spec row followed by `ny` rows of `nx` cell values.
    pub fn write_csv<W: Write>(&self, agent: ScenarioAgent, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
        w.write_record([
            "agent", "x_min", "x_max", "y_min", "y_max", "cell_x", "cell_y", "nx", "ny", "normalized", "clamped",
        ])?;
        let s = &self.spec;
        w.write_record([
            agent.label().to_string(),
            s.x_min.to_string(),
            s.x_max.to_string(),
            s.y_min.to_string(),
            s.y_max.to_string(),
            s.cell_x.to_string(),
            s.cell_y.to_string(),
            self.nx.to_string(),
            self.ny.to_string(),
            self.normalized.to_string(),
            self.clamped[agent as usize].to_string(),
        ])?;
        for row in self.cells[agent as usize].chunks(self.nx) {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("heatmap csv", e))?;
        Ok(())
    }
}

/// One deposit per agent per sample per predicted step (the initial state is
/// not counted).
pub fn occupancy_heatmap(ens: &TrajectoryEnsemble, spec: GridSpec) -> Result<OccupancyGrid> {
    spec.validate()?;
    let (nx, ny) = (spec.nx(), spec.ny());
    let mut grid = OccupancyGrid {
        spec,
        nx,
        ny,
        cells: [vec![0.0; nx * ny], vec![0.0; nx * ny]],
        clamped: [0, 0],
        normalized: false,
    };
    for s in &ens.samples {
        for st in s.iter().skip(1) {
            for agent in ScenarioAgent::BOTH {
                let (x, y) = st.position(agent);
                let ((ix, iy), clamped) = spec.cell_of(x, y);
                grid.cells[agent as usize][iy * nx + ix] += 1.0;
                if clamped {
                    grid.clamped[agent as usize] += 1;
                }
            }
        }
    }
    Ok(grid)
}
