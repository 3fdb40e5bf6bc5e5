//! Recognizes the situation up to the start of the merge, samples 1000 future
//! scenes over 3 s and compares them with what actually happened. Also writes
//! a normalized occupancy heatmap of the merging car.

use tlhmm_scene::scenario::{self, build_dataset, DatasetConfig, Stage};
use tlhmm_scene::scene::{self, GridSpec, SceneFitConfig, ScenarioAgent};
use tlhmm_scene::tlhmm::{self, Roster, TrainConfig};

fn main() -> tlhmm_scene::Result<()> {
    let ds = build_dataset(&DatasetConfig::default())?;
    let train = ds.train_events();
    let (recognizer, _) = tlhmm::train(&train, &Roster::merging(), &TrainConfig::default())?;
    let models: Vec<_> = scene::fit_scene_models(&train, &SceneFitConfig::default(), 11)?
        .into_iter()
        .map(|(m, _)| m)
        .collect();
    for m in &models {
        println!("{}: {} mixture components", m.situation, m.gmm.n_components());
    }

    let event = &ds.test_events()[1];
    let feats = scenario::extract_features(event)?;
    let k0 = event.stage_range(Stage::Merging).unwrap().0;
    let belief = recognizer.infer(&feats.raw.slice(0, k0 + 1)?)?;
    let p = belief.final_row().unwrap().to_vec();
    println!("\n{} (truth {}), start step {k0}, belief {p:.3?}", event.id, event.situation);

    let horizon = 30;
    let ens = scene::rollout(&models, &p, &feats.states[k0], horizon, 1000, event.dt, 99)?;
    println!("{:>4} {:>22} {:>22} {:>8}", "step", "merge car mean (x, y)", "truth", "sd y");
    for k in (5..=horizon).step_by(5) {
        let st = ens.position_stats(k, ScenarioAgent::Merge).unwrap();
        let (tx, ty) = feats.states[k0 + k].position(ScenarioAgent::Merge);
        println!(
            "{k:>4} {:>10.2} {:>10.2}  {tx:>10.2} {ty:>10.2} {:>8.2}",
            st.mean[0],
            st.mean[1],
            st.cov[1][1].sqrt()
        );
    }
    let inside = ens.containment(&feats.states[k0..=k0 + horizon], 2.0);
    println!("both cars inside the 2-sigma ellipse on {}/{} steps", inside.iter().filter(|&&c| c).count(), inside.len());

    let grid = scene::occupancy_heatmap(&ens, GridSpec::covering(&ens, 0.25, 1.0))?.normalize();
    let path = std::env::temp_dir().join("tlhmm_scene_heatmap_merge.csv");
    grid.write_csv(ScenarioAgent::Merge, std::fs::File::create(&path).map_err(|e| tlhmm_scene::Error::Io {
        path: path.display().to_string(),
        source: e,
    })?)?;
    println!("heatmap {}x{} cells written to {}", grid.nx, grid.ny, path.display());
    Ok(())
}
