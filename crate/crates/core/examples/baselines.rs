//! Compares the merge methods on one benchmark instance and splits a
//! direct parameter merge into its pretrained and task-vector parts.

use lotmerge::baselines::{decompose_direct_merge, merge_with, MergeMethod};
use lotmerge::capture::collect_stats;
use lotmerge::merge_lot::{collect_all, solve_matmul, MergeConfig};
use lotmerge::netspec::UnitKind;
use lotmerge::toybench::{prepare, ToyBenchConfig};
use lotmerge::Matrix;

fn main() -> lotmerge::Result<()> {
    let run = prepare(&ToyBenchConfig::new(5))?;
    let exemplars = run.exemplars(16);
    let stats = collect_all(&run.spec, &run.pretrained, &run.task_vectors, &exemplars)?;

    for method in [MergeMethod::Lot, MergeMethod::Regmean, MergeMethod::Avg, MergeMethod::Ta] {
        let cfg = MergeConfig::with_lambda(if method == MergeMethod::Ta { 0.4 } else { 1.0 });
        let (merged, _) = merge_with(method, &run.spec, &run.pretrained, &run.task_vectors, Some(&stats), &cfg)?;
        let acc = run.accuracies(&merged)?;
        println!("{:<8} mean accuracy {:.3}", method.as_str(), acc.iter().sum::<f64>() / acc.len() as f64);
    }

    // the first matmul unit, with traces to rebuild the per-task Grams
    let unit = run.spec.mergeable_units().find(|u| u.kind == UnitKind::MatMul).unwrap();
    let w_pre = run.pretrained.param(&unit.unit_id).unwrap();
    let mut g = Matrix::zeros(w_pre.rows(), w_pre.rows());
    let mut gt = Matrix::zeros(w_pre.rows(), w_pre.cols());
    let mut gw = Vec::new();
    for (k, ex) in exemplars.iter().enumerate() {
        let (_, trace) = collect_stats(&run.spec, &run.pretrained, &run.task_vectors[k], ex, true)?;
        let gk = trace.unwrap().inputs[&unit.unit_id].gram();
        let w_k = run.experts[k].param(&unit.unit_id).unwrap();
        g.axpy(1.0, &gk)?;
        gt.axpy(1.0, &gk.matmul(run.task_vectors[k].delta(&unit.unit_id).unwrap())?)?;
        gw.push(gk.matmul(w_k)?);
    }
    let cfg = MergeConfig::default();
    let refs: Vec<&Matrix> = gw.iter().collect();
    let (projected_pre, lot_term) = decompose_direct_merge(&g, &refs, w_pre, &cfg)?;
    let lot = solve_matmul(&g, &gt, &cfg)?;
    println!("unit {}:", unit.unit_id);
    println!("  |G†G W_pre − W_pre|_F = {:.4e}", projected_pre.sub(w_pre)?.frobenius_norm());
    println!("  |lot term − T*|_F     = {:.4e}", lot_term.sub(&lot)?.frobenius_norm());
    Ok(())
}
