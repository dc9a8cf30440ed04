//! Closed-form per-unit solvers and the end-to-end merge.
//!
//! For every mergeable unit the shared delta minimizes
//! `Σ_k ‖f(X_k; W_pre + T) − f(X_k; W_pre + T_k)‖²` over the exemplar
//! features `X_k` of each expert. Where the features carry no energy
//! (zero Gram directions, zero-variance dimensions) the solution is zero,
//! i.e. the pretrained weight is kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::{self, ExemplarSet, LayerStats, PooledStats, PooledUnit, UnitStats};
use crate::error::{Error, Result};
use crate::netspec::{self, Checkpoint, NetworkSpec, TaskVector, UnitKind, UnitSpec};
use crate::tensor::{self, Matrix, DEFAULT_PINV_REL_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Uniform scale on the merged task vector.
    pub lambda: f64,
    /// Relative singular-value cutoff for the Gram pseudoinverse.
    pub pinv_rel_tol: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            pinv_rel_tol: DEFAULT_PINV_REL_TOL,
        }
    }
}

impl MergeConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be finite, got {}", self.lambda)));
        }
        tensor::check_rel_tol(self.pinv_rel_tol)
    }
}

/// `(Σ_k X_kᵀX_k)† · Σ_k X_kᵀX_k T_k`, the minimum-norm minimizer.
pub fn solve_matmul(pooled_gram: &Matrix, pooled_gram_delta: &Matrix, cfg: &MergeConfig) -> Result<Matrix> {
    Ok(solve_matmul_ranked(pooled_gram, pooled_gram_delta, cfg)?.0)
}

fn solve_matmul_ranked(gram: &Matrix, gram_delta: &Matrix, cfg: &MergeConfig) -> Result<(Matrix, usize)> {
    cfg.validate()?;
    if gram.rows() != gram.cols() || gram_delta.rows() != gram.rows() {
        return Err(Error::shape(
            "solve_matmul",
            format!("gram {:?} with gram·delta {:?}", gram.shape(), gram_delta.shape()),
        ));
    }
    let f = tensor::svd(gram)?;
    let rank = f.rank(cfg.pinv_rel_tol);
    let g_pinv = tensor::pinv(gram, cfg.pinv_rel_tol)?;
    Ok((g_pinv.matmul(gram_delta)?, rank))
}

/// Per-dimension `Σ x[d]² T_k[d] / Σ x[d]²`; zero where the denominator is.
pub fn solve_scale(pooled_sq_sums: &Matrix, pooled_sq_sums_delta: &Matrix) -> Result<Matrix> {
    if pooled_sq_sums.shape() != pooled_sq_sums_delta.shape() || pooled_sq_sums.rows() != 1 {
        return Err(Error::shape(
            "solve_scale",
            format!("{:?} vs {:?}", pooled_sq_sums.shape(), pooled_sq_sums_delta.shape()),
        ));
    }
    if pooled_sq_sums.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("squared sums must be non-negative".into()));
    }
    let out = pooled_sq_sums
        .as_slice()
        .iter()
        .zip(pooled_sq_sums_delta.as_slice())
        .map(|(&den, &num)| if den > 0.0 { num / den } else { 0.0 })
        .collect();
    Ok(Matrix::from_raw(1, pooled_sq_sums.cols(), out))
}

/// Arithmetic mean of the per-task bias deltas.
pub fn solve_bias(deltas: &[&Matrix]) -> Result<Matrix> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::InvalidArgument("solve_bias needs at least one delta".into()))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for d in deltas {
        acc.axpy(1.0, d)?;
    }
    Ok(acc.scale(1.0 / deltas.len() as f64))
}

/// `Σ_k ‖X_k (candidate − T_k)‖²_F` expressed through the Grams.
pub fn matmul_objective(grams: &[&Matrix], deltas: &[&Matrix], candidate: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for (g, t) in grams.iter().zip(deltas) {
        let d = candidate.sub(t)?;
        let gd = g.matmul(&d)?;
        total += d.as_slice().iter().zip(gd.as_slice()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// `Σ_k Σ_d sq_k[d] (candidate[d] − T_k[d])²`.
pub fn scale_objective(sq_sums: &[&Matrix], deltas: &[&Matrix], candidate: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for (q, t) in sq_sums.iter().zip(deltas) {
        let d = candidate.sub(t)?;
        total += q.as_slice().iter().zip(d.as_slice()).map(|(w, e)| w * e * e).sum::<f64>();
    }
    Ok(total)
}

/// `Σ_k n_k ‖candidate − T_k‖²`.
pub fn bias_objective(counts: &[usize], deltas: &[&Matrix], candidate: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for (&n, t) in counts.iter().zip(deltas) {
        total += n as f64 * candidate.sub(t)?.frobenius_norm_sq();
    }
    Ok(total)
}

/// Summed squared feature drift of `candidate` at one unit, using the
/// per-task statistics and the task vectors they were collected with.
pub fn unit_objective(
    unit: &UnitSpec,
    stats: &[LayerStats],
    tvs: &[TaskVector],
    candidate: &Matrix,
) -> Result<f64> {
    let deltas: Vec<Matrix> = tvs.iter().map(|t| t.delta_or_zero(unit)).collect();
    let delta_refs: Vec<&Matrix> = deltas.iter().collect();
    let per_task: Vec<&UnitStats> = stats
        .iter()
        .map(|s| {
            s.units
                .get(&unit.unit_id)
                .ok_or_else(|| Error::Incompatible(format!("no statistics for `{}`", unit.unit_id)))
        })
        .collect::<Result<_>>()?;
    match unit.kind {
        UnitKind::MatMul => {
            let grams: Vec<&Matrix> = per_task
                .iter()
                .map(|s| match s {
                    UnitStats::MatMul { gram, .. } => Ok(gram),
                    _ => Err(kind_error(unit)),
                })
                .collect::<Result<_>>()?;
            matmul_objective(&grams, &delta_refs, candidate)
        }
        UnitKind::Scale => {
            let sq: Vec<&Matrix> = per_task
                .iter()
                .map(|s| match s {
                    UnitStats::Scale { sq_sums, .. } => Ok(sq_sums),
                    _ => Err(kind_error(unit)),
                })
                .collect::<Result<_>>()?;
            scale_objective(&sq, &delta_refs, candidate)
        }
        UnitKind::Bias => {
            let counts: Vec<usize> = per_task
                .iter()
                .map(|s| match s {
                    UnitStats::Bias { count, .. } => Ok(*count),
                    _ => Err(kind_error(unit)),
                })
                .collect::<Result<_>>()?;
            bias_objective(&counts, &delta_refs, candidate)
        }
        other => Err(Error::InvalidArgument(format!(
            "unit `{}` is {other}, which has no drift objective",
            unit.unit_id
        ))),
    }
}

fn kind_error(unit: &UnitSpec) -> Error {
    Error::Incompatible(format!("statistics for `{}` do not match its kind", unit.unit_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub unit_id: String,
    pub kind: UnitKind,
    /// Minimized objective value at this unit.
    pub residual: f64,
    /// Numerical rank of the pooled Gram (matmul units only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_of_gram: Option<usize>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    /// The merged delta before λ scaling.
    pub merged_tv: TaskVector,
    pub units: Vec<UnitReport>,
}

impl MergeOutcome {
    pub fn report(&self) -> &[UnitReport] {
        &self.units
    }
}

/// Solves every mergeable unit from pooled statistics alone.
pub fn solve_pooled(spec: &NetworkSpec, pooled: &PooledStats, cfg: &MergeConfig) -> Result<TaskVector> {
    Ok(solve_pooled_ranked(spec, pooled, cfg)?.0)
}

fn solve_pooled_ranked(
    spec: &NetworkSpec,
    pooled: &PooledStats,
    cfg: &MergeConfig,
) -> Result<(TaskVector, Vec<Option<usize>>)> {
    cfg.validate()?;
    if pooled.spec_hash != spec.hash() {
        return Err(Error::Incompatible("statistics were collected for a different spec".into()));
    }
    let units: Vec<&UnitSpec> = spec.mergeable_units().collect();
    let solved: Vec<(Matrix, Option<usize>)> = units
        .par_iter()
        .map(|u| {
            let p = pooled
                .units
                .get(&u.unit_id)
                .ok_or_else(|| Error::Incompatible(format!("no statistics for `{}`", u.unit_id)))?;
            match (u.kind, p) {
                (UnitKind::MatMul, PooledUnit::MatMul { gram, gram_times_delta }) => {
                    let (t, rank) = solve_matmul_ranked(gram, gram_times_delta, cfg).map_err(|e| match e {
                        Error::Numerical { detail, .. } => Error::Numerical {
                            context: format!("unit `{}`", u.unit_id),
                            detail,
                        },
                        other => other,
                    })?;
                    Ok((t, Some(rank)))
                }
                (UnitKind::Scale, PooledUnit::Scale { sq_sums, sq_sums_times_delta }) => {
                    Ok((solve_scale(sq_sums, sq_sums_times_delta)?, None))
                }
                (UnitKind::Bias, PooledUnit::Bias { deltas }) => {
                    let refs: Vec<&Matrix> = deltas.iter().map(|b| &b.delta).collect();
                    Ok((solve_bias(&refs)?, None))
                }
                _ => Err(kind_error(u)),
            }
        })
        .collect::<Result<_>>()?;
    let mut deltas = std::collections::BTreeMap::new();
    let mut ranks = Vec::new();
    for (u, (t, rank)) in units.iter().zip(solved) {
        deltas.insert(u.unit_id.clone(), t);
        ranks.push(rank);
    }
    Ok((TaskVector::new(spec, deltas)?, ranks))
}

/// Solves from per-task statistics and reports each unit's residual.
/// `stats[k]` must have been collected with `tvs[k]`.
pub fn merge_from_stats(
    spec: &NetworkSpec,
    stats: &[LayerStats],
    tvs: &[TaskVector],
    cfg: &MergeConfig,
) -> Result<MergeOutcome> {
    if stats.len() != tvs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} statistics sets for {} task vectors",
            stats.len(),
            tvs.len()
        )));
    }
    let pooled = capture::merge_stats(stats)?;
    let (merged_tv, ranks) = solve_pooled_ranked(spec, &pooled, cfg)?;
    let units = spec
        .mergeable_units()
        .zip(ranks)
        .map(|(u, rank)| {
            let t = merged_tv.delta_or_zero(u);
            Ok(UnitReport {
                unit_id: u.unit_id.clone(),
                kind: u.kind,
                residual: unit_objective(u, stats, tvs, &t)?.max(0.0),
                rank_of_gram: rank,
                n_samples: pooled.n_samples,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MergeOutcome { merged_tv, units })
}

/// Collects statistics for every task in parallel.
pub fn collect_all(
    spec: &NetworkSpec,
    pretrained: &Checkpoint,
    tvs: &[TaskVector],
    exemplars: &[ExemplarSet],
) -> Result<Vec<LayerStats>> {
    if tvs.is_empty() {
        return Err(Error::InvalidArgument("no task vectors to merge".into()));
    }
    if tvs.len() != exemplars.len() {
        return Err(Error::InvalidArgument(format!(
            "{} task vectors but {} exemplar sets",
            tvs.len(),
            exemplars.len()
        )));
    }
    tvs.par_iter()
        .zip(exemplars)
        .map(|(tv, ex)| capture::collect_stats(spec, pretrained, tv, ex, false).map(|(s, _)| s))
        .collect()
}

/// Full pipeline: collect features per expert, solve every unit, and
/// return `W_pre + λ·T*` with the per-unit report.
pub fn lot_merge(
    spec: &NetworkSpec,
    pretrained: &Checkpoint,
    tvs: &[TaskVector],
    exemplars: &[ExemplarSet],
    cfg: &MergeConfig,
) -> Result<(Checkpoint, MergeOutcome)> {
    cfg.validate()?;
    let stats = collect_all(spec, pretrained, tvs, exemplars)?;
    let outcome = merge_from_stats(spec, &stats, tvs, cfg)?;
    let merged = netspec::apply(pretrained, &outcome.merged_tv, cfg.lambda)?;
    Ok((merged, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::forward;
    use crate::netspec::{ActivationTag, UnitSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_task_full_rank_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_m(&mut rng, 10, 4);
        let t = rand_m(&mut rng, 4, 3);
        let g = x.gram();
        let got = solve_matmul(&g, &g.matmul(&t).unwrap(), &MergeConfig::default()).unwrap();
        assert!(got.max_abs_diff(&t) < 1e-9);
    }

    #[test]
    fn orthogonal_rows_select_task_rows() {
        let x1 = Matrix::from_rows(&[[1.0, 0.0]]);
        let x2 = Matrix::from_rows(&[[0.0, 1.0]]);
        let t1 = Matrix::from_rows(&[[2.0], [5.0]]);
        let t2 = Matrix::from_rows(&[[7.0], [3.0]]);
        let (g1, g2) = (x1.gram(), x2.gram());
        let g = g1.add(&g2).unwrap();
        let b = g1.matmul(&t1).unwrap().add(&g2.matmul(&t2).unwrap()).unwrap();
        let got = solve_matmul(&g, &b, &MergeConfig::default()).unwrap();
        assert!(got.max_abs_diff(&Matrix::from_rows(&[[2.0], [3.0]])) < 1e-12);
    }

    #[test]
    fn zero_gram_gives_zero_delta() {
        let got = solve_matmul(&Matrix::zeros(3, 3), &Matrix::zeros(3, 2), &MergeConfig::default()).unwrap();
        assert_eq!(got, Matrix::zeros(3, 2));
    }

    #[test]
    fn solve_matmul_shape_errors() {
        let cfg = MergeConfig::default();
        assert!(solve_matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 1), &cfg).is_err());
        assert!(solve_matmul(&Matrix::zeros(2, 2), &Matrix::zeros(3, 1), &cfg).is_err());
    }

    #[test]
    fn scale_hand_example() {
        // task1 x=[1,2], T1=[0.5,1.0]; task2 x=[3,1], T2=[1.5,-1.0]
        let sq = Matrix::row_vector(&[1.0 + 9.0, 4.0 + 1.0]);
        let sqd = Matrix::row_vector(&[1.0 * 0.5 + 9.0 * 1.5, 4.0 * 1.0 - 1.0]);
        let got = solve_scale(&sq, &sqd).unwrap();
        assert!((got[(0, 0)] - 1.4).abs() < 1e-12);
        assert!((got[(0, 1)] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn scale_degenerate_and_identical() {
        let got = solve_scale(&Matrix::row_vector(&[0.0, 2.0]), &Matrix::row_vector(&[0.0, 1.0])).unwrap();
        assert_eq!(got, Matrix::row_vector(&[0.0, 0.5]));
        let t = [0.3, -0.7];
        let sq = Matrix::row_vector(&[5.0, 2.0]);
        let got = solve_scale(&sq, &sq.hadamard(&Matrix::row_vector(&t)).unwrap()).unwrap();
        assert!(got.max_abs_diff(&Matrix::row_vector(&t)) < 1e-15);
        assert!(solve_scale(&Matrix::row_vector(&[1.0]), &Matrix::row_vector(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn bias_mean() {
        let a = Matrix::row_vector(&[1.0, 3.0]);
        let b = Matrix::row_vector(&[3.0, 5.0]);
        assert_eq!(solve_bias(&[&a, &b]).unwrap(), Matrix::row_vector(&[2.0, 4.0]));
        assert_eq!(solve_bias(&[&a]).unwrap(), a);
        assert!(solve_bias(&[]).is_err());
    }

    #[test]
    fn bias_mean_matches_fold_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds: Vec<Matrix> = (0..5).map(|_| rand_m(&mut rng, 1, 6)).collect();
        let refs: Vec<&Matrix> = ds.iter().collect();
        let mut fold = Matrix::zeros(1, 6);
        for d in &ds {
            fold = fold.add(d).unwrap();
        }
        assert!(solve_bias(&refs).unwrap().max_abs_diff(&fold.scale(0.2)) < 1e-12);
    }

    fn toy_spec() -> NetworkSpec {
        NetworkSpec::new(
            3,
            vec![
                UnitSpec::matmul("fc1", 3, 4),
                UnitSpec::bias("fc1.bias", 4),
                UnitSpec::activation("act", 4, ActivationTag::Relu),
                UnitSpec::scale("gain", 4),
                UnitSpec::matmul("fc2", 4, 2),
            ],
            vec![],
        )
        .unwrap()
    }

    fn rand_ckpt(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Checkpoint {
        let params = spec
            .all_units()
            .filter(|u| u.kind.has_params())
            .map(|u| (u.unit_id.clone(), rand_m(rng, u.shape[0], u.shape[1])))
            .collect();
        Checkpoint::new(spec, params).unwrap()
    }

    fn rand_tv(spec: &NetworkSpec, rng: &mut ChaCha8Rng, scale: f64) -> TaskVector {
        let deltas = spec
            .mergeable_units()
            .map(|u| (u.unit_id.clone(), rand_m(rng, u.shape[0], u.shape[1]).scale(scale)))
            .collect();
        TaskVector::new(spec, deltas).unwrap()
    }

    #[test]
    fn single_expert_merge_reproduces_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = toy_spec();
        let p = rand_ckpt(&spec, &mut rng);
        let tv = rand_tv(&spec, &mut rng, 0.3);
        let ex = ExemplarSet::new("a", rand_m(&mut rng, 40, 3), None).unwrap();
        let (merged, outcome) = lot_merge(&spec, &p, std::slice::from_ref(&tv), std::slice::from_ref(&ex), &MergeConfig::default()).unwrap();
        let expert = netspec::apply(&p, &tv, 1.0).unwrap();
        let a = forward(&spec, &merged, &ex.features).unwrap();
        let b = forward(&spec, &expert, &ex.features).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
        assert!(outcome.units.iter().all(|u| u.residual < 1e-16 * 1e6));
    }

    #[test]
    fn identical_experts_merge_to_that_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let spec = toy_spec();
        let p = rand_ckpt(&spec, &mut rng);
        let tv = rand_tv(&spec, &mut rng, 0.2);
        let tvs = vec![tv.clone(), tv.clone(), tv.clone()];
        let exs: Vec<ExemplarSet> = (0..3)
            .map(|k| ExemplarSet::new(format!("t{k}"), rand_m(&mut rng, 12, 3), None).unwrap())
            .collect();
        let (merged, _) = lot_merge(&spec, &p, &tvs, &exs, &MergeConfig::default()).unwrap();
        let expert = netspec::apply(&p, &tv, 1.0).unwrap();
        for (id, w) in &expert.params {
            assert!(merged.params[id].max_abs_diff(w) < 1e-10, "{id}");
        }
    }

    #[test]
    fn lot_beats_task_arithmetic_per_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = toy_spec();
        let p = rand_ckpt(&spec, &mut rng);
        let tvs: Vec<TaskVector> = (0..3).map(|_| rand_tv(&spec, &mut rng, 0.5)).collect();
        let exs: Vec<ExemplarSet> = (0..3)
            .map(|k| ExemplarSet::new(format!("t{k}"), rand_m(&mut rng, 8, 3), None).unwrap())
            .collect();
        let stats = collect_all(&spec, &p, &tvs, &exs).unwrap();
        let outcome = merge_from_stats(&spec, &stats, &tvs, &MergeConfig::default()).unwrap();
        for lambda in [0.1, 0.3, 0.5, 0.7, 1.0] {
            let ta = netspec::scale_sum(&tvs, lambda).unwrap();
            for u in spec.mergeable_units() {
                let lot = unit_objective(u, &stats, &tvs, &outcome.merged_tv.delta_or_zero(u)).unwrap();
                let ta_obj = unit_objective(u, &stats, &tvs, &ta.delta_or_zero(u)).unwrap();
                assert!(lot <= ta_obj * (1.0 + 1e-10) + 1e-12, "{} λ={lambda}: {lot} > {ta_obj}", u.unit_id);
            }
        }
    }

    #[test]
    fn task_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let spec = toy_spec();
        let p = rand_ckpt(&spec, &mut rng);
        let tvs: Vec<TaskVector> = (0..3).map(|_| rand_tv(&spec, &mut rng, 0.5)).collect();
        let exs: Vec<ExemplarSet> = (0..3)
            .map(|k| ExemplarSet::new(format!("t{k}"), rand_m(&mut rng, 6, 3), None).unwrap())
            .collect();
        let (a, _) = lot_merge(&spec, &p, &tvs, &exs, &MergeConfig::default()).unwrap();
        let rev_t: Vec<_> = tvs.iter().rev().cloned().collect();
        let rev_e: Vec<_> = exs.iter().rev().cloned().collect();
        let (b, _) = lot_merge(&spec, &p, &rev_t, &rev_e, &MergeConfig::default()).unwrap();
        for (id, w) in &a.params {
            assert!(b.params[id].max_abs_diff(w) < 1e-10, "{id}");
        }
    }

    #[test]
    fn count_mismatch_is_an_argument_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let spec = toy_spec();
        let p = rand_ckpt(&spec, &mut rng);
        let tvs = vec![rand_tv(&spec, &mut rng, 0.1); 2];
        let exs = vec![ExemplarSet::new("a", rand_m(&mut rng, 4, 3), None).unwrap()];
        assert!(matches!(
            lot_merge(&spec, &p, &tvs, &exs, &MergeConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(MergeConfig { lambda: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(MergeConfig { pinv_rel_tol: 1.5, ..Default::default() }.validate().is_err());
        assert!(MergeConfig::with_lambda(1.2).validate().is_ok());
    }
}
