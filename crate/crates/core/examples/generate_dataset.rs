//! Generates the default merging dataset, summarizes stage durations per
//! situation and round-trips it through the event CSV format.

use tlhmm_scene::scenario::{self, build_dataset, ColumnMapping, DatasetConfig, Situation, Stage};

fn main() -> tlhmm_scene::Result<()> {
    let cfg = DatasetConfig::default();
    let ds = build_dataset(&cfg)?;
    println!("{} events, {} train / {} test", ds.events.len(), ds.train.len(), ds.test.len());
    for sit in Situation::ALL {
        let evs: Vec<_> = ds.events.iter().filter(|e| e.situation == sit).collect();
        print!("{:>13}: {:>3} events, mean stage seconds", sit.label(), evs.len());
        for stage in Stage::ALL {
            let total: f64 = evs
                .iter()
                .map(|e| {
                    let (a, b) = e.stage_range(stage).unwrap();
                    (b - a) as f64 * e.dt
                })
                .sum();
            print!("  {}={:.2}", stage.label(), total / evs.len() as f64);
        }
        println!();
    }

    let path = std::env::temp_dir().join("tlhmm_scene_events.csv");
    scenario::save_events_csv(&ds.events, &path)?;
    let back = scenario::load_events_csv(&path, &ColumnMapping::default(), cfg.generator.dt)?;
    let max_err = ds
        .events
        .iter()
        .zip(&back.events)
        .flat_map(|(a, b)| a.main.y.iter().zip(&b.main.y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max);
    println!(
        "reloaded {} events from {} ({} diagnostics, max |dy| {max_err:.1e})",
        back.events.len(),
        path.display(),
        back.diagnostics.len()
    );
    Ok(())
}
