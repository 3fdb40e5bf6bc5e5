//! Synthetic ramp-merging events, measurement noise, trajectory smoothing,
//! feature extraction and event CSV ingestion.
//!
//! Coordinates: `y` runs along the main lane, `x` is lateral. The main lane is
//! centred on `x = 0` and the ramp starts at `x = -lane_width`, joining the
//! main lane during the Merging stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::ObservationSequence;
use crate::linalg::DataMatrix;
use crate::random::{derive_seed, rng_from_seed, SeededRng};
use crate::scene::{SceneAction, SceneState};

/// High-level interaction outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Situation {
    /// The main-lane car lets the merging car in ahead of it.
    MainYields,
    /// The merging car slots in behind the main-lane car.
    MergeYields,
}

impl Situation {
    pub const ALL: [Situation; 2] = [Situation::MainYields, Situation::MergeYields];

    pub fn label(self) -> &'static str {
        match self {
            Situation::MainYields => "main_yields",
            Situation::MergeYields => "merge_yields",
        }
    }
}

impl fmt::Display for Situation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Situation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "main_yields" => Ok(Situation::MainYields),
            "merge_yields" => Ok(Situation::MergeYields),
            other => Err(Error::invalid(format!("unknown situation label {other:?}"))),
        }
    }
}

/// Low-level phase of a merging interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ambiguity,
    Preparation,
    Merging,
    CarFollowing,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Ambiguity,
        Stage::Preparation,
        Stage::Merging,
        Stage::CarFollowing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::Ambiguity => "ambiguity",
            Stage::Preparation => "preparation",
            Stage::Merging => "merging",
            Stage::CarFollowing => "car_following",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            return Stage::ALL
                .get(i)
                .copied()
                .ok_or_else(|| Error::invalid(format!("stage index {i} out of range")));
        }
        Stage::ALL
            .into_iter()
            .find(|st| st.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

/// Agent roles in a merging scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Agent {
    Main,
    Merge,
    Lead,
}

impl Agent {
    pub fn label(self) -> &'static str {
        match self {
            Agent::Main => "main",
            Agent::Merge => "merge",
            Agent::Lead => "lead",
        }
    }
}

/// Per-agent time series sampled on the event's clock.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AgentTrack {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub vy: Vec<f64>,
}

impl AgentTrack {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn is_consistent(&self) -> bool {
        self.x.len() == self.y.len() && self.vy.len() == self.y.len()
    }

    fn all_finite(&self) -> bool {
        self.x
            .iter()
            .chain(&self.y)
            .chain(&self.vy)
            .all(|v| v.is_finite())
    }
}

/// One recorded interaction episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub id: String,
    pub dt: f64,
    pub main: AgentTrack,
    pub merge: AgentTrack,
    pub lead: Option<AgentTrack>,
    pub situation: Situation,
    /// First step of Preparation, Merging and Car-following. `None` marks an
    /// inference-only event.
    pub stage_boundaries: Option<[usize; 3]>,
}

/// Situation implied by the final longitudinal order of the two cars.
pub fn outcome_of(main: &AgentTrack, merge: &AgentTrack) -> Situation {
    let last = main.len() - 1;
    if merge.y[last] > main.y[last] {
        Situation::MainYields
    } else {
        Situation::MergeYields
    }
}

impl Event {
    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    pub fn track(&self, agent: Agent) -> Option<&AgentTrack> {
        match agent {
            Agent::Main => Some(&self.main),
            Agent::Merge => Some(&self.merge),
            Agent::Lead => self.lead.as_ref(),
        }
    }

    /// Stage active at step `k`, when boundaries are known.
    pub fn stage_at(&self, k: usize) -> Option<Stage> {
        let b = self.stage_boundaries?;
        let idx = b.iter().filter(|&&s| k >= s).count();
        Some(Stage::ALL[idx])
    }

    /// Step range `[start, end)` covered by `stage`.
    pub fn stage_range(&self, stage: Stage) -> Option<(usize, usize)> {
        let b = self.stage_boundaries?;
        let edges = [0, b[0], b[1], b[2], self.len()];
        let i = stage.index();
        Some((edges[i], edges[i + 1]))
    }

    /// Checks series lengths, boundary ordering and label/outcome agreement.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n < 2 {
            return Err(Error::invalid(format!("event {}: fewer than 2 steps", self.id)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("event {}: bad dt {}", self.id, self.dt)));
        }
        let tracks = [Some(&self.main), Some(&self.merge), self.lead.as_ref()];
        for t in tracks.into_iter().flatten() {
            if !t.is_consistent() || t.len() != n {
                return Err(Error::invalid(format!("event {}: ragged agent series", self.id)));
            }
            if !t.all_finite() {
                return Err(Error::invalid(format!("event {}: non-finite sample", self.id)));
            }
        }
        if let Some(b) = self.stage_boundaries {
            if !(0 < b[0] && b[0] < b[1] && b[1] < b[2] && b[2] < n) {
                return Err(Error::invalid(format!(
                    "event {}: stage boundaries {b:?} not strictly increasing inside 0..{n}",
                    self.id
                )));
            }
        }
        if outcome_of(&self.main, &self.merge) != self.situation {
            return Err(Error::invalid(format!(
                "event {}: label {} contradicts final ordering",
                self.id, self.situation
            )));
        }
        Ok(())
    }
}

/// Parameters of the optional leading vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeadParams {
    /// Initial distance ahead of the front-most of the two interacting cars (m).
    pub gap_range: [f64; 2],
    /// Speed relative to the main-lane car's initial speed (m/s).
    pub speed_offset_range: [f64; 2],
}

impl Default for LeadParams {
    fn default() -> Self {
        Self {
            gap_range: [25.0, 40.0],
            speed_offset_range: [-1.0, 1.0],
        }
    }
}

/// Magnitudes for the synthetic merging generator. Ranges are `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub dt: f64,
    /// Initial main-lane speed (m/s).
    pub speed_range: [f64; 2],
    /// Initial merging-car speed relative to the main-lane car (m/s).
    pub speed_diff_range: [f64; 2],
    /// Initial `y_merge - y_main` (m).
    pub initial_gap_range: [f64; 2],
    pub ambiguity_duration: [f64; 2],
    pub preparation_duration: [f64; 2],
    pub merging_duration: [f64; 2],
    pub following_duration: [f64; 2],
    /// Deceleration of the yielding car during Preparation (m/s², positive).
    pub yield_decel_range: [f64; 2],
    /// Acceleration of the car that goes first during Preparation (m/s²).
    pub assert_accel_range: [f64; 2],
    /// Gap the follower settles at behind the new leader (m).
    pub target_gap_range: [f64; 2],
    /// Gap the prepared leader must hold when Merging starts (m).
    pub min_merge_gap: f64,
    /// Stationary std of the correlated acceleration perturbation (m/s²).
    pub accel_noise: f64,
    /// Stationary std of the lateral wobble (m).
    pub lateral_noise: f64,
    pub lane_width: f64,
    /// Longitudinal position where the ramp meets the main lane (m).
    pub merge_point_y: f64,
    pub lead: Option<LeadParams>,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            speed_range: [24.0, 30.0],
            speed_diff_range: [-1.0, 1.0],
            initial_gap_range: [-6.0, 6.0],
            ambiguity_duration: [2.5, 4.0],
            preparation_duration: [3.0, 4.5],
            merging_duration: [2.5, 3.5],
            following_duration: [3.0, 4.5],
            yield_decel_range: [1.0, 2.5],
            assert_accel_range: [0.0, 1.0],
            target_gap_range: [8.0, 14.0],
            min_merge_gap: 3.0,
            accel_noise: 0.15,
            lateral_noise: 0.03,
            lane_width: 3.5,
            merge_point_y: 0.0,
            lead: None,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(Error::invalid(format!("{name}: range {r:?} is empty")));
    }
    if positive && r[0] <= 0.0 {
        return Err(Error::invalid(format!("{name}: range {r:?} must be positive")));
    }
    Ok(())
}

impl GeneratorParams {
    /// Shifted domain used for transfer experiments: slower traffic, wider
    /// initial gaps, shorter following gaps and a leading vehicle.
    pub fn transfer_target() -> Self {
        Self {
            speed_range: [14.0, 20.0],
            speed_diff_range: [-1.5, 1.5],
            initial_gap_range: [-9.0, 9.0],
            target_gap_range: [6.0, 10.0],
            yield_decel_range: [0.8, 2.0],
            lead: Some(LeadParams::default()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        check_range("speed_range", self.speed_range, true)?;
        check_range("speed_diff_range", self.speed_diff_range, false)?;
        check_range("initial_gap_range", self.initial_gap_range, false)?;
        for (name, r) in [
            ("ambiguity_duration", self.ambiguity_duration),
            ("preparation_duration", self.preparation_duration),
            ("merging_duration", self.merging_duration),
            ("following_duration", self.following_duration),
        ] {
            check_range(name, r, true)?;
            if r[0] < 2.0 * self.dt {
                return Err(Error::invalid(format!("{name}: stages need at least two steps")));
            }
        }
        check_range("yield_decel_range", self.yield_decel_range, true)?;
        check_range("assert_accel_range", self.assert_accel_range, false)?;
        if self.assert_accel_range[0] < 0.0 {
            return Err(Error::invalid("assert_accel_range must be non-negative"));
        }
        check_range("target_gap_range", self.target_gap_range, true)?;
        if !(self.min_merge_gap > 0.0) {
            return Err(Error::invalid("min_merge_gap must be positive; the merge is infeasible"));
        }
        if self.accel_noise < 0.0 || self.lateral_noise < 0.0 || !(self.lane_width > 0.0) {
            return Err(Error::invalid("noise scales must be non-negative and lane width positive"));
        }
        if self.speed_range[0] + self.speed_diff_range[0] <= 0.0 {
            return Err(Error::invalid("merging car could start at a non-positive speed"));
        }
        if let Some(l) = &self.lead {
            check_range("lead.gap_range", l.gap_range, true)?;
            check_range("lead.speed_offset_range", l.speed_offset_range, false)?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut SeededRng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn steps(rng: &mut SeededRng, r: [f64; 2], dt: f64) -> usize {
    ((uniform(rng, r) / dt).round() as usize).max(2)
}

/// Stationary AR(1) perturbation with correlation `rho` per step.
struct Ar1 {
    state: f64,
    rho: f64,
    sigma: f64,
}

impl Ar1 {
    fn new(rng: &mut SeededRng, rho: f64, sigma: f64) -> Self {
        let state = sigma * rng.sample::<f64, _>(StandardNormal);
        Self { state, rho, sigma }
    }

    fn next(&mut self, rng: &mut SeededRng) -> f64 {
        let v = self.state;
        let innov: f64 = rng.sample(StandardNormal);
        self.state = self.rho * self.state + (1.0 - self.rho * self.rho).sqrt() * self.sigma * innov;
        v
    }
}

/// Linear ramp from 0 to 1 over `ramp` steps.
fn ramp(k: usize, ramp: usize) -> f64 {
    ((k as f64 + 1.0) / ramp as f64).min(1.0)
}

const MIN_SPEED: f64 = 0.5;

/// Generates one event for `situation`. Deterministic in `seed`.
pub fn generate_event(situation: Situation, params: &GeneratorParams, seed: u64) -> Result<Event> {
    params.validate()?;
    for attempt in 0..16u64 {
        let ev = try_generate(situation, params, derive_seed(seed, attempt))?;
        if ev.validate().is_ok() {
            return Ok(Event {
                id: format!("event_{seed:04}"),
                ..ev
            });
        }
        log::debug!("event seed {seed}: attempt {attempt} violated the outcome contract; retrying");
    }
    Err(Error::invalid(format!(
        "generator could not realize {situation} for seed {seed}; parameters make the merge infeasible"
    )))
}

fn try_generate(situation: Situation, p: &GeneratorParams, seed: u64) -> Result<Event> {
    let mut rng = rng_from_seed(seed);
    let dt = p.dt;
    let n_amb = steps(&mut rng, p.ambiguity_duration, dt);
    let n_prep = steps(&mut rng, p.preparation_duration, dt);
    let n_merge = steps(&mut rng, p.merging_duration, dt);
    let n_follow = steps(&mut rng, p.following_duration, dt);
    let b = [n_amb, n_amb + n_prep, n_amb + n_prep + n_merge];
    let n = b[2] + n_follow;

    let v_main0 = uniform(&mut rng, p.speed_range);
    let v_merge0 = v_main0 + uniform(&mut rng, p.speed_diff_range);
    let gap0 = uniform(&mut rng, p.initial_gap_range);
    let decel = uniform(&mut rng, p.yield_decel_range);
    let assert_acc = uniform(&mut rng, p.assert_accel_range);
    let target_gap = uniform(&mut rng, p.target_gap_range);

    // index 0 = main, 1 = merge
    let (leader, yielder) = match situation {
        Situation::MainYields => (1usize, 0usize),
        Situation::MergeYields => (0, 1),
    };
    let t_prep = n_prep as f64 * dt;
    let v0 = [v_main0, v_merge0];
    // signed gap leader - yielder at the start of Preparation, extrapolated
    let s0 = if leader == 1 { gap0 } else { -gap0 } + (v0[leader] - v0[yielder]) * n_amb as f64 * dt;
    let rel_v0 = v0[leader] - v0[yielder];
    // smallest relative acceleration that opens the gap to min_merge_gap by
    // the end of Preparation (ramping halves the effective duration)
    let needed = 2.0 * (p.min_merge_gap - s0 - rel_v0 * t_prep) / (t_prep * t_prep) * 1.5;
    let decel = decel.max(needed - assert_acc);

    let t_to_merge = (n_amb + n_prep) as f64 * dt;
    let y_main0 = p.merge_point_y - v_main0 * t_to_merge - gap0 / 2.0;
    let y0 = [y_main0, y_main0 + gap0];

    let mut acc_noise = [
        Ar1::new(&mut rng, 0.95, p.accel_noise),
        Ar1::new(&mut rng, 0.95, p.accel_noise),
    ];
    let mut lat_noise = [
        Ar1::new(&mut rng, 0.9, p.lateral_noise),
        Ar1::new(&mut rng, 0.9, p.lateral_noise),
    ];
    let ramp_steps = ((1.0 / dt).round() as usize).max(1);

    let mut tracks = [AgentTrack::default(), AgentTrack::default()];
    let mut y = y0;
    let mut v = v0;
    let mut a_prev = [0.0f64; 2];
    for k in 0..n {
        for i in 0..2 {
            tracks[i].y.push(y[i]);
            tracks[i].vy.push(v[i]);
        }
        let x_merge_nominal = if k < b[1] {
            -p.lane_width
        } else if k < b[2] {
            let u = (k - b[1]) as f64 / n_merge as f64;
            -p.lane_width * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
        } else {
            0.0
        };
        tracks[0].x.push(lat_noise[0].next(&mut rng));
        tracks[1].x.push(x_merge_nominal + lat_noise[1].next(&mut rng));

        let mut a = [0.0f64; 2];
        if k >= b[0] && k < b[1] {
            let r = ramp(k - b[0], ramp_steps);
            a[yielder] = -decel * r;
            a[leader] = assert_acc * r;
        } else if k >= b[1] {
            // leader relaxes to constant speed, yielder follows with a gap law
            a[leader] = a_prev[leader] * 0.9;
            let s = y[leader] - y[yielder];
            let law = 0.3 * (s - target_gap) + 0.8 * (v[leader] - v[yielder]);
            let blend = ramp(k - b[1], ramp_steps);
            a[yielder] = (blend * law + (1.0 - blend) * a_prev[yielder]).clamp(-4.0, 2.0);
        }
        for i in 0..2 {
            let a_total = a[i] + acc_noise[i].next(&mut rng);
            let v_next = (v[i] + a_total * dt).max(MIN_SPEED);
            y[i] += 0.5 * (v[i] + v_next) * dt;
            v[i] = v_next;
            a_prev[i] = a[i];
        }
    }

    let lead = match &p.lead {
        None => None,
        Some(lp) => {
            let gap = uniform(&mut rng, lp.gap_range);
            let mut vl = v_main0 + uniform(&mut rng, lp.speed_offset_range);
            vl = vl.max(MIN_SPEED);
            let mut yl = y0[0].max(y0[1]) + gap;
            let mut noise = Ar1::new(&mut rng, 0.95, p.accel_noise);
            let mut wobble = Ar1::new(&mut rng, 0.9, p.lateral_noise);
            let mut t = AgentTrack::default();
            for _ in 0..n {
                t.y.push(yl);
                t.vy.push(vl);
                t.x.push(wobble.next(&mut rng));
                let v_next = (vl + noise.next(&mut rng) * dt).max(MIN_SPEED);
                yl += 0.5 * (vl + v_next) * dt;
                vl = v_next;
            }
            Some(t)
        }
    };

    let [main, merge] = tracks;
    Ok(Event {
        id: String::new(),
        dt,
        main,
        merge,
        lead,
        situation,
        stage_boundaries: Some(b),
    })
}

/// `n` events with alternating labels (even index → main_yields); event `i`
/// uses seed `first_seed + i`.
pub fn generate_dataset(n: usize, params: &GeneratorParams, first_seed: u64) -> Result<Vec<Event>> {
    (0..n)
        .map(|i| {
            let situation = Situation::ALL[i % 2];
            generate_event(situation, params, first_seed + i as u64)
        })
        .collect()
}

/// I.i.d. Gaussian perturbation of every position and velocity sample.
pub fn add_noise(event: &Event, sigma_pos: f64, sigma_vel: f64, seed: u64) -> Result<Event> {
    if !(sigma_pos >= 0.0 && sigma_vel >= 0.0) {
        return Err(Error::invalid("noise standard deviations must be non-negative"));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = event.clone();
    let mut perturb = |t: &mut AgentTrack| {
        for v in t.x.iter_mut().chain(t.y.iter_mut()) {
            *v += sigma_pos * rng.sample::<f64, _>(StandardNormal);
        }
        for v in t.vy.iter_mut() {
            *v += sigma_vel * rng.sample::<f64, _>(StandardNormal);
        }
    };
    perturb(&mut out.main);
    perturb(&mut out.merge);
    if let Some(l) = out.lead.as_mut() {
        perturb(l);
    }
    Ok(out)
}

/// Noise settings for the constant-velocity smoother.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmootherConfig {
    /// White-acceleration spectral density along the lane (m²/s³).
    pub longitudinal_process_noise: f64,
    /// White-acceleration spectral density across the lane (m²/s³).
    pub lateral_process_noise: f64,
    /// Position measurement std (m).
    pub position_std: f64,
    /// Velocity measurement std (m/s).
    pub velocity_std: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            longitudinal_process_noise: 1.0,
            lateral_process_noise: 1.0,
            position_std: 0.3,
            velocity_std: 0.3,
        }
    }
}

/// Forward Kalman filter plus Rauch-Tung-Striebel backward pass for one axis
/// under a constant-velocity model. Measures position, and velocity when
/// `velocity` is given. Returns smoothed positions and velocities.
pub fn ekf_smooth(
    position: &[f64],
    velocity: Option<&[f64]>,
    dt: f64,
    process_noise: f64,
    position_std: f64,
    velocity_std: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = position.len();
    if n < 2 {
        return Err(Error::TooShort { min: 2, got: n });
    }
    if velocity.is_some_and(|v| v.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: velocity.map_or(0, <[f64]>::len),
        });
    }
    if !position.iter().chain(velocity.into_iter().flatten()).all(|v| v.is_finite()) {
        return Err(Error::invalid("smoother input contains a non-finite value"));
    }
    if !(dt > 0.0) || process_noise < 0.0 || !(position_std > 0.0) || !(velocity_std > 0.0) {
        return Err(Error::invalid("smoother noise settings must be positive"));
    }
    let f = Matrix2::new(1.0, dt, 0.0, 1.0);
    let q = Matrix2::new(dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt) * process_noise;
    let r_pos = position_std * position_std;
    let r_vel = velocity_std * velocity_std;

    let v0 = match velocity {
        Some(v) => v[0],
        None => (position[1] - position[0]) / dt,
    };
    let mut x = Vector2::new(position[0], v0);
    let mut p = Matrix2::new(
        r_pos,
        0.0,
        0.0,
        if velocity.is_some() { r_vel } else { 2.0 * r_pos / (dt * dt) },
    );
    let mut filtered = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            x = f * x;
            p = f * p * f.transpose() + q;
        }
        predicted.push((x, p));
        match velocity {
            Some(vel) => {
                let z = Vector2::new(position[k], vel[k]);
                let s = p + Matrix2::new(r_pos, 0.0, 0.0, r_vel);
                let s_inv = s
                    .try_inverse()
                    .ok_or_else(|| Error::Numerical("singular innovation covariance".into()))?;
                let gain = p * s_inv;
                x += gain * (z - x);
                p = (Matrix2::identity() - gain) * p;
            }
            None => {
                let s = p[(0, 0)] + r_pos;
                let gain = Vector2::new(p[(0, 0)], p[(1, 0)]) / s;
                let innov = position[k] - x[0];
                x += gain * innov;
                let h = nalgebra::RowVector2::new(1.0, 0.0);
                p = (Matrix2::identity() - gain * h) * p;
            }
        }
        p = (p + p.transpose()) * 0.5;
        filtered.push((x, p));
    }
    let mut smoothed = filtered.clone();
    for k in (0..n - 1).rev() {
        let (xf, pf) = filtered[k];
        let (xp, pp) = predicted[k + 1];
        let pp_inv = pp
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular predicted covariance".into()))?;
        let c = pf * f.transpose() * pp_inv;
        let (xs_next, ps_next) = smoothed[k + 1];
        let xs = xf + c * (xs_next - xp);
        let ps = pf + c * (ps_next - pp) * c.transpose();
        smoothed[k] = (xs, ps);
    }
    Ok((
        smoothed.iter().map(|(x, _)| x[0]).collect(),
        smoothed.iter().map(|(x, _)| x[1]).collect(),
    ))
}

/// Smooths every agent of an event: longitudinal axis with position and
/// velocity measurements, lateral axis with positions only.
pub fn smooth_event(event: &Event, cfg: &SmootherConfig) -> Result<Event> {
    let smooth_track = |t: &AgentTrack| -> Result<AgentTrack> {
        let (y, vy) = ekf_smooth(
            &t.y,
            Some(&t.vy),
            event.dt,
            cfg.longitudinal_process_noise,
            cfg.position_std,
            cfg.velocity_std,
        )?;
        let (x, _) = ekf_smooth(
            &t.x,
            None,
            event.dt,
            cfg.lateral_process_noise,
            cfg.position_std,
            cfg.velocity_std,
        )?;
        Ok(AgentTrack { x, y, vy })
    };
    let mut out = event.clone();
    out.main = smooth_track(&event.main)?;
    out.merge = smooth_track(&event.merge)?;
    out.lead = event.lead.as_ref().map(smooth_track).transpose()?;
    Ok(out)
}

/// Measurement noise applied before smoothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_pos: f64,
    pub sigma_vel: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_pos: 0.3,
            sigma_vel: 0.3,
        }
    }
}

/// Everything needed to rebuild a generated dataset and its split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_events: usize,
    /// Event `i` is generated from `seed + i`.
    pub seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub generator: GeneratorParams,
    /// Zero sigmas keep the exact simulator positions and velocities.
    pub noise: NoiseConfig,
    /// Run the smoother over every (noisy) event.
    pub smooth: bool,
    pub smoother: SmootherConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_events: 128,
            seed: 0,
            train_fraction: 0.8,
            split_seed: 7,
            generator: GeneratorParams::default(),
            noise: NoiseConfig::default(),
            smooth: true,
            smoother: SmootherConfig::default(),
        }
    }
}

impl DatasetConfig {
    /// Lower-speed, wider-gap domain with a leading vehicle, smaller than the
    /// default dataset.
    pub fn transfer_target() -> Self {
        Self {
            n_events: 100,
            seed: 50_000,
            generator: GeneratorParams::transfer_target(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if !(self.train_fraction >= 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::invalid(format!("train_fraction {} outside [0, 1]", self.train_fraction)));
        }
        let n = &self.noise;
        if !(n.sigma_pos >= 0.0 && n.sigma_vel >= 0.0) {
            return Err(Error::invalid("noise standard deviations must be non-negative"));
        }
        if self.smooth {
            let s = &self.smoother;
            let vals = [s.longitudinal_process_noise, s.lateral_process_noise, s.position_std, s.velocity_std];
            if !vals.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::invalid("smoother noise settings must be positive"));
            }
        }
        Ok(())
    }
}

/// Train/test sizes for `n` events. The train share is rounded to nearest,
/// with halves going to train.
pub fn split_counts(n: usize, train_fraction: f64) -> (usize, usize) {
    let n_train = ((n as f64 * train_fraction + 0.5).floor() as usize).min(n);
    (n_train, n - n_train)
}

/// Generated events plus the split. `events` is what models see; `clean` is
/// the noise-free simulator output.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub events: Vec<Event>,
    pub clean: Vec<Event>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn train_events(&self) -> Vec<Event> {
        self.train.iter().map(|&i| self.events[i].clone()).collect()
    }

    pub fn test_events(&self) -> Vec<Event> {
        self.test.iter().map(|&i| self.events[i].clone()).collect()
    }
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let clean = generate_dataset(cfg.n_events, &cfg.generator, cfg.seed)?;
    let n = &cfg.noise;
    let events = clean
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let noisy = add_noise(e, n.sigma_pos, n.sigma_vel, derive_seed(cfg.seed, i as u64))?;
            if cfg.smooth {
                smooth_event(&noisy, &cfg.smoother)
            } else {
                Ok(noisy)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.shuffle(&mut rng_from_seed(cfg.split_seed));
    let (n_train, _) = split_counts(events.len(), cfg.train_fraction);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Dataset {
        events,
        clean,
        train,
        test,
    })
}

/// Raw-feature names in column order (leading-vehicle columns last).
pub fn state_feature_names(with_lead: bool) -> Vec<String> {
    let mut names: Vec<String> = [
        "y_main", "y_merge", "d_lat", "vy_main", "vy_merge", "ay_main", "ay_merge",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if with_lead {
        names.push("y_lead".into());
        names.push("vy_lead".into());
    }
    names
}

pub fn action_names() -> Vec<String> {
    ["dx_main", "dx_merge", "vy_main_next", "vy_merge_next"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Central differences inside, one-sided at the ends.
pub(crate) fn finite_difference(v: &[f64], dt: f64) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|k| {
            if n < 2 {
                0.0
            } else if k == 0 {
                (v[1] - v[0]) / dt
            } else if k == n - 1 {
                (v[n - 1] - v[n - 2]) / dt
            } else {
                (v[k + 1] - v[k - 1]) / (2.0 * dt)
            }
        })
        .collect()
}

/// Per-step features of an event.
#[derive(Clone, Debug)]
pub struct EventFeatures {
    /// Raw recognition input, one row per step.
    pub raw: ObservationSequence,
    pub states: Vec<SceneState>,
    /// `actions[k]` moves `states[k]` to `states[k + 1]`.
    pub actions: Vec<SceneAction>,
}

impl EventFeatures {
    /// `[SE | a]` rows for mixture training.
    pub fn joint_rows(&self) -> Result<DataMatrix> {
        let width = self.states[0].to_features().len() + SceneAction::DIM;
        let mut m = DataMatrix::with_cols(width)?;
        for (s, a) in self.states.iter().zip(&self.actions) {
            let mut row = s.to_features();
            row.extend_from_slice(&a.to_vec());
            m.push_row(&row)?;
        }
        Ok(m)
    }
}

/// State features, scene states and action labels for every step.
pub fn extract_features(event: &Event) -> Result<EventFeatures> {
    let n = event.len();
    for (agent, track) in [(Agent::Main, &event.main), (Agent::Merge, &event.merge)] {
        if track.is_empty() {
            return Err(Error::invalid(format!(
                "event {}: missing {} agent",
                event.id,
                agent.label()
            )));
        }
    }
    event.validate()?;
    let acc_main = finite_difference(&event.main.vy, event.dt);
    let acc_merge = finite_difference(&event.merge.vy, event.dt);
    let mut states = Vec::with_capacity(n);
    for k in 0..n {
        states.push(SceneState {
            y_main: event.main.y[k],
            y_merge: event.merge.y[k],
            vy_main: event.main.vy[k],
            vy_merge: event.merge.vy[k],
            ay_main: acc_main[k],
            ay_merge: acc_merge[k],
            x_main: event.main.x[k],
            x_merge: event.merge.x[k],
            lead: event.lead.as_ref().map(|l| crate::scene::LeadState {
                y: l.y[k],
                vy: l.vy[k],
            }),
        });
    }
    let actions = (0..n - 1)
        .map(|k| SceneAction {
            dx_main: event.main.x[k + 1] - event.main.x[k],
            dx_merge: event.merge.x[k + 1] - event.merge.x[k],
            vy_main_next: event.main.vy[k + 1],
            vy_merge_next: event.merge.vy[k + 1],
        })
        .collect();
    let rows: Vec<Vec<f64>> = states.iter().map(SceneState::to_features).collect();
    let raw = ObservationSequence::from_rows(&rows, event.dt)?;
    Ok(EventFeatures {
        raw,
        states,
        actions,
    })
}

/// Column names used when reading an event CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub event_id: String,
    pub agent: String,
    pub frame: String,
    pub x: String,
    pub y: String,
    pub vy: Option<String>,
    pub situation: Option<String>,
    pub stage: Option<String>,
    pub main_agent: String,
    pub merge_agent: String,
    pub lead_agent: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            event_id: "event_id".into(),
            agent: "agent".into(),
            frame: "frame".into(),
            x: "x".into(),
            y: "y".into(),
            vy: Some("vy".into()),
            situation: Some("situation".into()),
            stage: Some("stage".into()),
            main_agent: "main".into(),
            merge_agent: "merge".into(),
            lead_agent: "lead".into(),
        }
    }
}

/// Why one event in a CSV file was rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub event_id: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event_id={} error={}", self.event_id, self.message)
    }
}

/// Events that loaded plus per-event rejections.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub events: Vec<Event>,
    pub diagnostics: Vec<Diagnostic>,
}

pub const EVENT_CSV_HEADER: [&str; 9] = [
    "event_id", "agent", "frame", "time_s", "x", "y", "vy", "situation", "stage",
];

/// Writes events in the documented schema: one row per agent per frame.
pub fn write_events_csv<W: std::io::Write>(events: &[Event], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVENT_CSV_HEADER)?;
    for ev in events {
        let agents = [
            (Agent::Main, Some(&ev.main)),
            (Agent::Merge, Some(&ev.merge)),
            (Agent::Lead, ev.lead.as_ref()),
        ];
        for (agent, track) in agents {
            let Some(track) = track else { continue };
            for k in 0..track.len() {
                let stage = ev.stage_at(k).map(|s| s.label()).unwrap_or("");
                w.write_record([
                    ev.id.as_str(),
                    agent.label(),
                    &k.to_string(),
                    &(k as f64 * ev.dt).to_string(),
                    &track.x[k].to_string(),
                    &track.y[k].to_string(),
                    &track.vy[k].to_string(),
                    ev.situation.label(),
                    stage,
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("csv writer", e))?;
    Ok(())
}

pub fn save_events_csv(events: &[Event], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_events_csv(events, std::io::BufWriter::new(file))
}

#[derive(Default)]
struct RawAgent {
    frames: Vec<i64>,
    x: Vec<f64>,
    y: Vec<f64>,
    vy: Vec<f64>,
    stages: Vec<Option<Stage>>,
}

#[derive(Default)]
struct RawEvent {
    agents: BTreeMap<String, RawAgent>,
    situation: Option<String>,
    error: Option<String>,
}

/// Reads events from CSV text. Missing required columns fail the whole file;
/// malformed events are reported in the diagnostics and skipped.
pub fn read_events_csv<R: std::io::Read>(reader: R, mapping: &ColumnMapping, dt: f64) -> Result<LoadReport> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("unknown column {name:?}")))
    };
    let optional = |name: &Option<String>| -> Option<usize> {
        name.as_ref().and_then(|n| headers.iter().position(|h| h == n))
    };
    let c_id = col(&mapping.event_id)?;
    let c_agent = col(&mapping.agent)?;
    let c_frame = col(&mapping.frame)?;
    let c_x = col(&mapping.x)?;
    let c_y = col(&mapping.y)?;
    let c_vy = optional(&mapping.vy);
    let c_sit = optional(&mapping.situation);
    let c_stage = optional(&mapping.stage);

    let mut order: Vec<String> = Vec::new();
    let mut raw: BTreeMap<String, RawEvent> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let id = record.get(c_id).unwrap_or("").to_string();
        let ev = raw.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawEvent::default()
        });
        if ev.error.is_some() {
            continue;
        }
        let parse = |c: usize| -> std::result::Result<f64, String> {
            let s = record.get(c).unwrap_or("");
            s.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad number {s:?} in column {}", &headers[c]))
        };
        let row = (|| -> std::result::Result<_, String> {
            let frame = record
                .get(c_frame)
                .unwrap_or("")
                .trim()
                .parse::<i64>()
                .map_err(|_| "bad frame number".to_string())?;
            let x = parse(c_x)?;
            let y = parse(c_y)?;
            let vy = c_vy.map(parse).transpose()?;
            let stage = match c_stage.and_then(|c| record.get(c)).map(str::trim) {
                None | Some("") => None,
                Some(s) => Some(s.parse::<Stage>().map_err(|e| e.to_string())?),
            };
            Ok((frame, x, y, vy, stage))
        })();
        let (frame, x, y, vy, stage) = match row {
            Ok(r) => r,
            Err(msg) => {
                ev.error = Some(msg);
                continue;
            }
        };
        if let Some(s) = c_sit.and_then(|c| record.get(c)).map(str::trim).filter(|s| !s.is_empty()) {
            match &ev.situation {
                Some(prev) if prev != s => {
                    ev.error = Some("situation label changes within the event".into());
                    continue;
                }
                _ => ev.situation = Some(s.to_string()),
            }
        }
        let agent = ev.agents.entry(record.get(c_agent).unwrap_or("").to_string()).or_default();
        if agent.frames.last().is_some_and(|&f| frame <= f) {
            ev.error = Some("frames are not strictly increasing".into());
            continue;
        }
        agent.frames.push(frame);
        agent.x.push(x);
        agent.y.push(y);
        agent.vy.push(vy.unwrap_or(f64::NAN));
        agent.stages.push(stage);
    }

    let mut report = LoadReport::default();
    for id in order {
        let ev = raw.remove(&id).expect("recorded id");
        match assemble_event(&id, ev, mapping, dt, c_vy.is_some()) {
            Ok(e) => report.events.push(e),
            Err(message) => {
                let d = Diagnostic {
                    event_id: id.clone(),
                    message,
                };
                log::warn!("{d}");
                report.diagnostics.push(d);
            }
        }
    }
    Ok(report)
}

fn assemble_event(
    id: &str,
    mut ev: RawEvent,
    mapping: &ColumnMapping,
    dt: f64,
    has_velocity: bool,
) -> std::result::Result<Event, String> {
    if let Some(e) = ev.error {
        return Err(e);
    }
    let known = [&mapping.main_agent, &mapping.merge_agent, &mapping.lead_agent];
    if let Some(unknown) = ev.agents.keys().find(|k| !known.contains(k)) {
        return Err(format!("unknown agent {unknown:?}"));
    }
    let mut take = |name: &str| ev.agents.remove(name);
    let main = take(&mapping.main_agent).ok_or_else(|| format!("missing agent {:?}", mapping.main_agent))?;
    let merge = take(&mapping.merge_agent).ok_or_else(|| format!("missing agent {:?}", mapping.merge_agent))?;
    let lead = take(&mapping.lead_agent);
    if merge.frames != main.frames || lead.as_ref().is_some_and(|l| l.frames != main.frames) {
        return Err("ragged agent series: frames differ between agents".into());
    }
    if main.frames.len() < 2 {
        return Err("fewer than 2 frames".into());
    }
    let stages = main.stages.clone();
    let to_track = |a: RawAgent| -> std::result::Result<AgentTrack, String> {
        let vy = if has_velocity {
            if a.vy.iter().any(|v| !v.is_finite()) {
                return Err("non-finite velocity".into());
            }
            a.vy
        } else {
            finite_difference(&a.y, dt)
        };
        Ok(AgentTrack { x: a.x, y: a.y, vy })
    };
    let main = to_track(main)?;
    let merge = to_track(merge)?;
    let lead = lead.map(to_track).transpose()?;

    let boundaries = if stages.iter().all(Option::is_none) {
        None
    } else {
        let st: Vec<Stage> = stages
            .iter()
            .map(|s| s.ok_or_else(|| "stage missing on some frames".to_string()))
            .collect::<std::result::Result<_, _>>()?;
        if st.windows(2).any(|w| w[1] < w[0]) {
            return Err("stage labels go backwards".into());
        }
        let first = |stage: Stage| st.iter().position(|&s| s >= stage);
        match (first(Stage::Preparation), first(Stage::Merging), first(Stage::CarFollowing)) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => return Err("not every stage is present".into()),
        }
    };
    let situation = match ev.situation.take() {
        Some(s) => s.parse::<Situation>().map_err(|e| e.to_string())?,
        None => outcome_of(&main, &merge),
    };
    let event = Event {
        id: id.to_string(),
        dt,
        main,
        merge,
        lead,
        situation,
        stage_boundaries: boundaries,
    };
    event.validate().map_err(|e| e.to_string())?;
    Ok(event)
}

pub fn load_events_csv(path: &Path, mapping: &ColumnMapping, dt: f64) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_events_csv(std::io::BufReader::new(file), mapping, dt)
}
