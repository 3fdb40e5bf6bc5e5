//! Trains the two-layer recognizer and both baselines on the default dataset
//! and prints their recognition metrics side by side.

use tlhmm_scene::baselines::{self, QdaClassifier, SingleHmmClassifier, DEFAULT_THETA};
use tlhmm_scene::scenario::{self, build_dataset, DatasetConfig, Situation};
use tlhmm_scene::tlhmm::{self, Roster, StateCount, TrainConfig};

fn main() -> tlhmm_scene::Result<()> {
    let ds = build_dataset(&DatasetConfig::default())?;
    let (train, test) = (ds.train_events(), ds.test_events());
    let config = TrainConfig::default();
    let (model, _) = tlhmm::train(&train, &Roster::merging(), &config)?;
    let window = model.min_length();
    let single = SingleHmmClassifier::fit(&train, &Situation::ALL, window, &StateCount::default(), &config.fit, 3)?;
    let qda = QdaClassifier::fit(&train, &Situation::ALL, window)?;

    let truth: Vec<Situation> = test.iter().map(|e| e.situation).collect();
    let mut runs = [Vec::new(), Vec::new(), Vec::new()];
    for e in &test {
        let raw = scenario::extract_features(e)?.raw;
        runs[0].push((e.id.clone(), model.infer(&raw)?));
        runs[1].push((e.id.clone(), single.infer(&raw)?));
        runs[2].push((e.id.clone(), qda.infer(&raw)?));
    }
    println!("{:>10} {:>9} {:>15} {:>12}", "model", "accuracy", "earliest step", "fluctuation");
    for (name, r) in ["tlhmm", "single_hmm", "qda"].iter().zip(&runs) {
        let m = baselines::evaluate(name, r, &truth, DEFAULT_THETA)?;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        println!(
            "{name:>10} {:>9.3} {:>15} {:>12}",
            m.final_accuracy,
            fmt(m.mean_earliest_step),
            fmt(m.mean_fluctuation)
        );
    }
    Ok(())
}
