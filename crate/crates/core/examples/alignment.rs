//! How much the tasks' input subspaces overlap at each mergeable unit.

use lotmerge::analysis::alignment_diagnostic;
use lotmerge::capture::collect_stats;
use lotmerge::tensor::DEFAULT_PINV_REL_TOL;
use lotmerge::toybench::{prepare, ToyBenchConfig};

fn main() -> lotmerge::Result<()> {
    // wider than the exemplar count, so each task spans a proper subspace
    let cfg = ToyBenchConfig {
        hidden_dim: 48,
        ..ToyBenchConfig::new(2)
    };
    let run = prepare(&cfg)?;
    let traces = run
        .task_vectors
        .iter()
        .zip(run.exemplars(12))
        .map(|(tv, ex)| Ok(collect_stats(&run.spec, &run.pretrained, tv, &ex, true)?.1.unwrap()))
        .collect::<lotmerge::Result<Vec<_>>>()?;
    let diag = alignment_diagnostic(&traces, DEFAULT_PINV_REL_TOL)?;
    for (unit, a) in &diag.units {
        println!("{unit}: ranks {:?}", a.ranks);
        for p in &a.overlaps {
            println!("  {} / {}: {:.3}", p.task_a, p.task_b, p.overlap);
        }
    }
    Ok(())
}
