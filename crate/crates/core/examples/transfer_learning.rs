//! Pretrains on the default merging domain, then moves to a slower domain with
//! a leading vehicle. Layer 1 is always retrained; layer 2 is either kept
//! (frozen), refined from the pretrained parameters (finetune) or refit
//! (scratch). Prints layer-2 EM iterations and test accuracy per setup.
//!
//! Replicates vary the training seed: `cargo run --example transfer_learning -- 5`

use tlhmm_scene::baselines::{self, DEFAULT_THETA};
use tlhmm_scene::random::derive_seed;
use tlhmm_scene::scenario::{build_dataset, DatasetConfig, Situation};
use tlhmm_scene::tlhmm::{self, raw_sequences, Roster, TrainConfig, TransferMode};

fn main() -> tlhmm_scene::Result<()> {
    let replicates: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let source = build_dataset(&DatasetConfig::default())?;
    let target = build_dataset(&DatasetConfig::transfer_target())?;
    let target_train = target.train_events();
    let target_test = target.test_events();
    let raw_test = raw_sequences(&target_test)?;
    let truth: Vec<Situation> = target_test.iter().map(|e| e.situation).collect();

    for r in 0..replicates {
        let config = TrainConfig {
            seed: derive_seed(17, r),
            ..TrainConfig::default()
        };
        let (pretrained, _) = tlhmm::train(&source.train_events(), &Roster::merging(), &config)?;
        print!("replicate {r}:");
        for mode in TransferMode::ALL {
            let (model, report) = tlhmm::transfer(&pretrained, &target_train, mode, &config)?;
            let runs = target_test
                .iter()
                .zip(&raw_test)
                .map(|(e, raw)| Ok((e.id.clone(), model.infer(raw)?)))
                .collect::<tlhmm_scene::Result<Vec<_>>>()?;
            let m = baselines::evaluate(mode.label(), &runs, &truth, DEFAULT_THETA)?;
            print!(
                "  {} iters {:>3} ({:>3} with init) acc {:.3}",
                mode.label(),
                report.layer2_iterations(),
                report.layer2_total_iterations(),
                m.final_accuracy
            );
        }
        println!();
    }
    Ok(())
}
