mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use tlhmm_scene::gmm::{BlockPartition, GmmParams};
use tlhmm_scene::linalg::Gaussian;
use tlhmm_scene::random::{derive_seed, rng_from_seed};
use tlhmm_scene::scenario::{self, Situation};
use tlhmm_scene::scene::{
    occupancy_heatmap, propagate, rollout, sample_action, GridSpec, LeadState, ScenarioAgent, SceneAction,
    SceneModel, SceneState,
};

const DT: f64 = 0.1;
const N_SE: usize = 7;

fn state() -> SceneState {
    SceneState {
        y_main: 0.0,
        y_merge: -5.0,
        vy_main: 20.0,
        vy_merge: 19.0,
        ay_main: 0.0,
        ay_merge: 0.0,
        x_main: 0.0,
        x_merge: -3.5,
        lead: None,
    }
}

fn schema() -> Vec<String> {
    let mut s = scenario::state_feature_names(false);
    s.extend(scenario::action_names());
    s
}

/// Single component whose action block is independent of the state block.
fn independent_model(sit: Situation, a_mean: [f64; 4], a_var: [f64; 4]) -> SceneModel {
    let mut mean = vec![0.0; N_SE];
    mean.extend(a_mean);
    let mut diag = vec![100.0; N_SE];
    diag.extend(a_var);
    let g = Gaussian::new(DVector::from_vec(mean), DMatrix::from_diagonal(&DVector::from_vec(diag))).unwrap();
    let gmm = GmmParams::new(vec![1.0], vec![g]).unwrap();
    SceneModel::new(sit, schema(), BlockPartition::leading(N_SE, 4), gmm).unwrap()
}

fn pair() -> Vec<SceneModel> {
    vec![
        independent_model(Situation::MainYields, [0.0, 0.05, 18.0, 21.0], [0.04, 0.04, 0.25, 0.25]),
        independent_model(Situation::MergeYields, [0.0, 0.05, 22.0, 17.0], [0.04, 0.04, 0.25, 0.25]),
    ]
}

#[test]
fn propagation_by_hand() {
    let s = SceneState {
        lead: Some(LeadState { y: 30.0, vy: 15.0 }),
        ..state()
    };
    let a = SceneAction {
        dx_main: 0.01,
        dx_merge: 0.2,
        vy_main_next: 22.0,
        vy_merge_next: 19.0,
    };
    let n = propagate(&s, &a, DT);
    assert!((n.y_main - 2.1).abs() < 1e-12);
    assert!((n.y_merge - (-5.0 + 1.9)).abs() < 1e-12);
    assert!((n.ay_main - 20.0).abs() < 1e-9);
    assert!(n.ay_merge.abs() < 1e-12);
    assert!((n.x_merge - (-3.3)).abs() < 1e-12);
    let lead = n.lead.unwrap();
    assert!((lead.y - 31.5).abs() < 1e-12 && lead.vy == 15.0);
}

proptest! {
    #[test]
    fn actions_are_recoverable_from_consecutive_states(
        dx in -1.0f64..1.0, dz in -1.0f64..1.0, v1 in 0.0f64..40.0, v2 in 0.0f64..40.0,
    ) {
        let s = state();
        let a = SceneAction { dx_main: dx, dx_merge: dz, vy_main_next: v1, vy_merge_next: v2 };
        let n = propagate(&s, &a, DT);
        prop_assert!((n.x_main - s.x_main - dx).abs() < 1e-12);
        prop_assert!((n.x_merge - s.x_merge - dz).abs() < 1e-12);
        prop_assert_eq!(n.vy_main, v1);
        prop_assert_eq!(n.vy_merge, v2);
        // the position update is the trapezoid of the two speeds
        let back = (n.y_main - s.y_main) / DT * 2.0 - s.vy_main;
        prop_assert!((back - v1).abs() < 1e-9);
    }
}

#[test]
fn certain_posterior_uses_one_model() {
    let models = pair();
    for (post, want) in [([1.0, 0.0], 0), ([0.0, 1.0], 1)] {
        let ens = rollout(&models, &post, &state(), 5, 200, DT, 1).unwrap();
        assert!(ens.situation_of_sample.iter().all(|&s| s == want));
    }
}

#[test]
fn mixed_posterior_splits_samples() {
    let ens = rollout(&pair(), &[0.3, 0.7], &state(), 1, 20_000, DT, 4).unwrap();
    let frac = ens.situation_of_sample.iter().filter(|&&s| s == 0).count() as f64 / 20_000.0;
    let se = (0.3f64 * 0.7 / 20_000.0).sqrt();
    assert!((frac - 0.3).abs() < 5.0 * se);
}

#[test]
fn one_step_mean_is_within_five_standard_errors() {
    let models = pair();
    let n = 4000;
    let ens = rollout(&models, &[1.0, 0.0], &state(), 1, n, DT, 9).unwrap();
    let s = ens.position_stats(1, ScenarioAgent::Merge).unwrap();
    let (mx, my) = (-3.5 + 0.05, -5.0 + 0.5 * (19.0 + 21.0) * DT);
    let se_x = (0.04 / n as f64).sqrt();
    let se_y = (0.25 * 0.25 * DT * DT / n as f64).sqrt();
    assert!((s.mean[0] - mx).abs() < 5.0 * se_x);
    assert!((s.mean[1] - my).abs() < 5.0 * se_y);
}

/// Random mixture over `[SE | a]` whose blocks are correlated, anchored so the
/// state used below lies in its bulk.
fn correlated_model(seed: u64) -> (SceneModel, SceneState) {
    let mut rng = rng_from_seed(seed);
    let gmm = random_gmm(&mut rng, 2, N_SE + 4);
    let m = SceneModel::new(Situation::MainYields, schema(), BlockPartition::leading(N_SE, 4), gmm).unwrap();
    let s = SceneState {
        y_main: 0.3,
        y_merge: -0.2,
        vy_main: 0.5,
        vy_merge: -0.4,
        ay_main: 0.1,
        ay_merge: 0.0,
        x_main: 0.4,
        x_merge: 0.0,
        lead: None,
    };
    (m, s)
}

#[test]
fn rollout_step_matches_direct_conditional_draws() {
    let (m, s) = correlated_model(13);
    let models = vec![m];
    let n = 50_000;
    let ens = rollout(&models, &[1.0], &s, 1, n, DT, 21).unwrap();
    let from_rollout: Vec<f64> = ens.samples.iter().map(|t| t[1].x_main - s.x_main).collect();
    let direct: Vec<f64> = (0..n)
        .map(|i| sample_action(&models, &[1.0], &s, derive_seed(777, i as u64)).unwrap().0.dx_main)
        .collect();
    let d = ks_two_sample(from_rollout, direct);
    assert!(d < 0.02, "ks {d}");
}

#[test]
fn horizon_one_has_two_states_per_sample() {
    let ens = rollout(&pair(), &[0.5, 0.5], &state(), 1, 50, DT, 0).unwrap();
    assert!(ens.samples.iter().all(|t| t.len() == 2 && t[0] == state()));
    assert!(ens.truncated_at.iter().all(Option::is_none));
}

#[test]
fn near_delta_model_follows_the_deterministic_path() {
    let a = [0.02, 0.1, 21.0, 18.0];
    let models = vec![independent_model(Situation::MainYields, a, [1e-6; 4])];
    let ens = rollout(&models, &[1.0], &state(), 10, 100, DT, 2).unwrap();
    let mut det = state();
    let action = SceneAction::from_slice(&a).unwrap();
    for k in 1..=10 {
        det = propagate(&det, &action, DT);
        let s = ens.position_stats(k, ScenarioAgent::Main).unwrap();
        assert!((s.mean[0] - det.x_main).abs() < 1e-2);
        assert!((s.mean[1] - det.y_main).abs() < 1e-2);
    }
}

#[test]
fn ensemble_means_converge_over_the_horizon() {
    let models = pair();
    let n = 5000;
    let h = 30;
    let ens = rollout(&models, &[0.0, 1.0], &state(), h, n, DT, 5).unwrap();
    for k in [1, 10, 30] {
        let s = ens.position_stats(k, ScenarioAgent::Main).unwrap();
        let kf = k as f64;
        let y_expect = 0.5 * DT * (20.0 + 22.0) + (kf - 1.0) * DT * 22.0;
        // Var y_k = dt²·σ²·(k - 3/4) for iid speeds with trapezoid weights
        let var_y = DT * DT * 0.25 * (kf - 0.75);
        assert!((s.mean[1] - y_expect).abs() < 5.0 * (var_y / n as f64).sqrt());
        assert!((s.mean[0]).abs() < 5.0 * (kf * 0.04 / n as f64).sqrt());
        assert!((s.cov[0][0] - kf * 0.04).abs() < 0.15 * kf * 0.04);
    }
}

#[test]
fn containment_of_the_ensemble_mean_is_total() {
    let ens = rollout(&pair(), &[0.5, 0.5], &state(), 8, 500, DT, 3).unwrap();
    let truth: Vec<SceneState> = (0..=8)
        .map(|k| {
            let main = ens.position_stats(k.max(1), ScenarioAgent::Main).unwrap();
            let merge = ens.position_stats(k.max(1), ScenarioAgent::Merge).unwrap();
            SceneState {
                x_main: main.mean[0],
                y_main: main.mean[1],
                x_merge: merge.mean[0],
                y_merge: merge.mean[1],
                ..state()
            }
        })
        .collect();
    let c = ens.containment(&truth, 2.0);
    assert_eq!(c.len(), 8);
    assert!(c.iter().all(|&b| b));
    // far away truth is never contained
    let far: Vec<SceneState> = truth.iter().map(|s| SceneState { y_main: s.y_main + 1e3, ..*s }).collect();
    assert!(ens.containment(&far, 2.0).iter().all(|&b| !b));
}

#[test]
fn heatmap_counts_every_sample_step_once() {
    let n = 300;
    let h = 12;
    let ens = rollout(&pair(), &[0.5, 0.5], &state(), h, n, DT, 8).unwrap();
    let spec = GridSpec::covering(&ens, 0.25, 1.0);
    let grid = occupancy_heatmap(&ens, spec).unwrap();
    for agent in ScenarioAgent::BOTH {
        assert_eq!(grid.total(agent), (n * h) as f64);
        assert_eq!(grid.clamped[agent as usize], 0);
    }
    let norm = grid.normalize();
    assert!(norm.normalized);
    for agent in ScenarioAgent::BOTH {
        assert!((norm.total(agent) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn one_step_cell_frequencies_match_gaussian_integrals() {
    let models = vec![independent_model(Situation::MainYields, [0.0, 0.0, 22.0, 19.0], [0.25, 0.25, 4.0, 4.0])];
    let n = 100_000;
    let ens = rollout(&models, &[1.0], &state(), 1, n, DT, 31).unwrap();
    let mx = 0.0;
    let my = 0.5 * DT * (20.0 + 22.0);
    let sx = 0.5;
    let sy = 0.5 * DT * 2.0;
    let spec = GridSpec {
        x_min: mx - 5.0 * sx,
        x_max: mx + 5.0 * sx,
        y_min: my - 5.0 * sy,
        y_max: my + 5.0 * sy,
        cell_x: 0.25,
        cell_y: 0.05,
    };
    let grid = occupancy_heatmap(&ens, spec).unwrap();
    let nx_dist = Normal::new(mx, sx).unwrap();
    let ny_dist = Normal::new(my, sy).unwrap();
    let mut worst = 0.0f64;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let x0 = spec.x_min + ix as f64 * spec.cell_x;
            let y0 = spec.y_min + iy as f64 * spec.cell_y;
            let p = (nx_dist.cdf(x0 + spec.cell_x) - nx_dist.cdf(x0)) * (ny_dist.cdf(y0 + spec.cell_y) - ny_dist.cdf(y0));
            let f = grid.at(ScenarioAgent::Main, ix, iy) / n as f64;
            worst = worst.max((f - p).abs());
        }
    }
    assert!(worst < 0.01, "worst cell {worst}");
}

#[test]
fn rollouts_are_reproducible() {
    let a = rollout(&pair(), &[0.4, 0.6], &state(), 6, 64, DT, 77).unwrap();
    let b = rollout(&pair(), &[0.4, 0.6], &state(), 6, 64, DT, 77).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.situation_of_sample, b.situation_of_sample);
    let c = rollout(&pair(), &[0.4, 0.6], &state(), 6, 64, DT, 78).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn bad_rollout_requests_fail() {
    let models = pair();
    assert!(rollout(&models, &[0.5, 0.6], &state(), 3, 10, DT, 0).is_err());
    assert!(rollout(&models, &[1.0], &state(), 3, 10, DT, 0).is_err());
    assert!(rollout(&models, &[0.5, 0.5], &state(), 0, 10, DT, 0).is_err());
    assert!(rollout(&models, &[0.5, 0.5], &state(), 3, 0, DT, 0).is_err());
    let with_lead = SceneState {
        lead: Some(LeadState { y: 1.0, vy: 1.0 }),
        ..state()
    };
    assert!(rollout(&models, &[0.5, 0.5], &with_lead, 3, 10, DT, 0).is_err());
}

#[test]
fn scene_models_round_trip() {
    let (m, _) = correlated_model(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    m.save(&path).unwrap();
    let back = SceneModel::load(&path).unwrap();
    assert_eq!(back.gmm, m.gmm);
    assert_eq!(back.schema, m.schema);
    assert_eq!(back.partition, m.partition);
    assert_eq!(back.situation, m.situation);
}
