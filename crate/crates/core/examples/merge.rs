//! Trains three experts on synthetic tasks and merges them layer by layer.

use lotmerge::merge_lot::{lot_merge, MergeConfig};
use lotmerge::toybench::{prepare, ToyBenchConfig};

fn main() -> lotmerge::Result<()> {
    let run = prepare(&ToyBenchConfig::new(3))?;
    let exemplars = run.exemplars(32);
    let (merged, outcome) = lot_merge(&run.spec, &run.pretrained, &run.task_vectors, &exemplars, &MergeConfig::default())?;

    for u in outcome.report() {
        let rank = u.rank_of_gram.map_or("-".to_string(), |r| r.to_string());
        println!("{:<10} {:<8} residual {:.4e}  rank {rank}", u.unit_id, u.kind.as_str(), u.residual);
    }
    let pre = run.accuracies(&run.pretrained)?;
    let acc = run.accuracies(&merged)?;
    for (k, task) in run.tasks.iter().enumerate() {
        let expert = run.accuracies(&run.experts[k])?[k];
        println!("{}: pretrained {:.3}  expert {:.3}  merged {:.3}", task.spec.task_id, pre[k], expert, acc[k]);
    }
    Ok(())
}
