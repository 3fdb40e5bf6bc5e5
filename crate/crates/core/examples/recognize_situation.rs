//! Trains the two-layer recognizer and prints how its belief evolves over one
//! held-out event, next to the true stage.

use tlhmm_scene::scenario::{self, build_dataset, DatasetConfig};
use tlhmm_scene::tlhmm::{self, Roster, TrainConfig};

fn main() -> tlhmm_scene::Result<()> {
    let ds = build_dataset(&DatasetConfig::default())?;
    let (model, report) = tlhmm::train(&ds.train_events(), &Roster::merging(), &TrainConfig::default())?;
    for r in report.layer1.iter().chain(&report.layer2) {
        println!("{:>8}: {} states, {:>3} iterations", r.label, r.n_states, r.fit.iterations);
    }

    let event = &ds.test_events()[0];
    let post = model.infer(&scenario::extract_features(event)?.raw)?;
    println!("\n{} (truth: {})", event.id, event.situation);
    println!("{:>5} {:>6} {:>14} {:>12}", "step", "time", "stage", post.labels[0]);
    for (i, &k) in post.steps.iter().enumerate().step_by(5) {
        let stage = event.stage_at(k).map(|s| s.label()).unwrap_or("-");
        println!("{k:>5} {:>6.1} {stage:>14} {:>12.3}", post.times[i], post.probabilities[i][0]);
    }
    Ok(())
}
