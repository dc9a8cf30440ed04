//! Per-unit drift of a LOT merge and of task arithmetic, and the
//! Lipschitz bound on each task's loss change.

use lotmerge::analysis::{check_bound, drift_csv, measure_drift, LossKind};
use lotmerge::merge_lot::{lot_merge, MergeConfig};
use lotmerge::netspec;
use lotmerge::toybench::{prepare, ToyBenchConfig};

fn main() -> lotmerge::Result<()> {
    let run = prepare(&ToyBenchConfig::new(1))?;
    let exemplars = run.exemplars(32);
    let (_, outcome) = lot_merge(&run.spec, &run.pretrained, &run.task_vectors, &exemplars, &MergeConfig::default())?;
    let ta = netspec::scale_sum(&run.task_vectors, 0.4)?;

    for (name, merged_tv) in [("lot", &outcome.merged_tv), ("ta@0.4", &ta)] {
        let reports = run
            .task_vectors
            .iter()
            .zip(&exemplars)
            .map(|(tv, ex)| measure_drift(&run.spec, &run.pretrained, merged_tv, tv, ex))
            .collect::<lotmerge::Result<Vec<_>>>()?;
        println!("# {name}\n{}", drift_csv(&reports));

        for (k, tv) in run.task_vectors.iter().enumerate() {
            let b = check_bound(&run.spec, &run.pretrained, merged_tv, tv, &run.tasks[k].test, LossKind::CrossEntropyOnLinearHead)?;
            println!("{}: |ΔL| {:.4} ≤ bound {:.4}  ({})", b.task_id, b.delta_loss, b.bound_value, b.bound_satisfied);
        }
    }
    Ok(())
}
