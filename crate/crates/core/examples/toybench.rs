//! Runs the synthetic benchmark for one seed and prints the method scores.
//! Pass a directory to also save every checkpoint and the report.

use std::path::PathBuf;

use lotmerge::toybench::{run_experiment, save_experiment, ToyBenchConfig};

fn main() -> lotmerge::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (run, report) = run_experiment(&ToyBenchConfig::new(seed))?;

    println!("seed {seed}, {} exemplars per task", report.exemplars_per_task);
    println!("pretrained {:?}", report.pretrained_accuracy);
    println!("experts    {:?}", report.expert_accuracy);
    for s in [&report.lot, &report.ta_best, &report.weight_average, &report.regmean] {
        let lambda = s.lambda.map_or(String::new(), |l| format!("@{l}"));
        println!("{:>8}{lambda:<5} {:.4}", s.method.as_str(), s.mean_accuracy);
    }
    let worse = report.drift.iter().filter(|d| !d.lot_not_worse).count();
    println!("units where LOT drifts more than some TA scale: {worse}");

    if let Some(dir) = std::env::args().nth(2).map(PathBuf::from) {
        let manifest = save_experiment(&dir, &run, &report)?;
        println!("saved to {} ({} tasks)", dir.display(), manifest.tasks.len());
    }
    Ok(())
}
