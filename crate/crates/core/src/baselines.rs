//! Reference mergers: weight averaging, task arithmetic, and the direct
//! parameter (RegMean-style) solve together with its split into a
//! projected pretrained term and the LOT term.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::{LayerStats, UnitStats};
use crate::error::{Error, Result};
use crate::merge_lot::{self, MergeConfig, MergeOutcome};
use crate::netspec::{self, Checkpoint, NetworkSpec, TaskVector, UnitKind};
use crate::tensor::{self, Matrix};

/// Per-unit arithmetic mean of the experts' parameters.
pub fn weight_average(experts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = experts
        .first()
        .ok_or_else(|| Error::InvalidArgument("weight_average needs at least one expert".into()))?;
    for e in &experts[1..] {
        if e.spec_hash != first.spec_hash || e.params.len() != first.params.len() {
            return Err(Error::Incompatible("experts were built for different specs".into()));
        }
    }
    let k = experts.len() as f64;
    let mut params = BTreeMap::new();
    for (id, w) in &first.params {
        let mut acc = w.clone();
        for e in &experts[1..] {
            let other = e
                .params
                .get(id)
                .ok_or_else(|| Error::Incompatible(format!("expert lacks unit `{id}`")))?;
            acc.axpy(1.0, other)?;
        }
        params.insert(id.clone(), acc.scale(1.0 / k));
    }
    Ok(Checkpoint {
        spec_hash: first.spec_hash.clone(),
        params,
    })
}

/// `W_pre + λ Σ_k T_k`.
pub fn task_arithmetic(pretrained: &Checkpoint, tvs: &[TaskVector], lambda: f64) -> Result<Checkpoint> {
    let sum = netspec::scale_sum(tvs, lambda)?;
    netspec::apply(pretrained, &sum, 1.0)
}

/// Direct solve of one linear weight: `(Σ G_k)† Σ G_k W_k`.
pub fn regmean_unit(grams: &[&Matrix], weights: &[&Matrix], cfg: &MergeConfig) -> Result<Matrix> {
    cfg.validate()?;
    if grams.is_empty() || grams.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} grams for {} weights",
            grams.len(),
            weights.len()
        )));
    }
    let mut g = Matrix::zeros(grams[0].rows(), grams[0].cols());
    let mut b = Matrix::zeros(weights[0].rows(), weights[0].cols());
    for (gk, wk) in grams.iter().zip(weights) {
        g.axpy(1.0, gk)?;
        b.axpy(1.0, &gk.matmul(wk)?)?;
    }
    if g.rows() != g.cols() || b.rows() != g.rows() {
        return Err(Error::shape("regmean", format!("gram {:?} with weight {:?}", g.shape(), b.shape())));
    }
    tensor::pinv(&g, cfg.pinv_rel_tol)?.matmul(&b)
}

/// Direct parameter merge over every linear unit. Scale and bias units
/// fall back to the weight average; frozen units keep the pretrained value.
/// `stats[k]` holds the Grams gathered with expert `k`.
pub fn regmean_merge(
    spec: &NetworkSpec,
    pretrained: &Checkpoint,
    tvs: &[TaskVector],
    stats: &[LayerStats],
    cfg: &MergeConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    pretrained.ensure_spec(spec)?;
    if tvs.is_empty() || tvs.len() != stats.len() {
        return Err(Error::InvalidArgument(format!(
            "{} task vectors but {} statistics sets",
            tvs.len(),
            stats.len()
        )));
    }
    let hash = spec.hash();
    if stats.iter().any(|s| s.spec_hash != hash) {
        return Err(Error::Incompatible("statistics were collected for a different spec".into()));
    }
    let experts: Vec<Checkpoint> = tvs
        .iter()
        .map(|tv| netspec::apply(pretrained, tv, 1.0))
        .collect::<Result<_>>()?;
    let avg = weight_average(&experts)?;
    let solved: Vec<(String, Matrix)> = spec
        .mergeable_units()
        .filter(|u| u.kind == UnitKind::MatMul)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|u| {
            let grams = stats
                .iter()
                .map(|s| match s.units.get(&u.unit_id) {
                    Some(UnitStats::MatMul { gram, .. }) => Ok(gram),
                    _ => Err(Error::Incompatible(format!("no Gram statistics for `{}`", u.unit_id))),
                })
                .collect::<Result<Vec<_>>>()?;
            let weights: Vec<&Matrix> = experts.iter().map(|e| &e.params[&u.unit_id]).collect();
            Ok((u.unit_id.clone(), regmean_unit(&grams, &weights, cfg)?))
        })
        .collect::<Result<_>>()?;
    let mut params = avg.params;
    params.extend(solved);
    Checkpoint::new(spec, params)
}

/// Splits the direct merge of one linear unit into `G†G·W_pre` and
/// `G†·Σ G_k T_k`, where `T_k = W_k − W_pre` and `G = Σ G_k`.
/// `gram_times_weights[k]` is `G_k W_k`.
pub fn decompose_direct_merge(
    pooled_gram: &Matrix,
    gram_times_weights: &[&Matrix],
    w_pre: &Matrix,
    cfg: &MergeConfig,
) -> Result<(Matrix, Matrix)> {
    cfg.validate()?;
    if gram_times_weights.is_empty() {
        return Err(Error::InvalidArgument("no per-task terms to decompose".into()));
    }
    if pooled_gram.rows() != pooled_gram.cols() || w_pre.rows() != pooled_gram.rows() {
        return Err(Error::shape(
            "decompose_direct_merge",
            format!("gram {:?} with weight {:?}", pooled_gram.shape(), w_pre.shape()),
        ));
    }
    let g_pinv = tensor::pinv(pooled_gram, cfg.pinv_rel_tol)?;
    let gw_pre = pooled_gram.matmul(w_pre)?;
    let mut sum_gt = Matrix::zeros(w_pre.rows(), w_pre.cols());
    for gw in gram_times_weights {
        sum_gt.axpy(1.0, gw)?;
    }
    // Σ G_k T_k = Σ G_k W_k − G W_pre
    sum_gt.axpy(-1.0, &gw_pre)?;
    Ok((g_pinv.matmul(&gw_pre)?, g_pinv.matmul(&sum_gt)?))
}

/// Merge methods selectable from the command line and the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Lot,
    Ta,
    Avg,
    Regmean,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Lot => "lot",
            MergeMethod::Ta => "ta",
            MergeMethod::Avg => "avg",
            MergeMethod::Regmean => "regmean",
        }
    }

    pub fn needs_stats(self) -> bool {
        matches!(self, MergeMethod::Lot | MergeMethod::Regmean)
    }
}

/// Merges with `method`. `stats` must be present for `lot` and `regmean`;
/// the LOT report is returned when `method` is `lot`.
pub fn merge_with(
    method: MergeMethod,
    spec: &NetworkSpec,
    pretrained: &Checkpoint,
    tvs: &[TaskVector],
    stats: Option<&[LayerStats]>,
    cfg: &MergeConfig,
) -> Result<(Checkpoint, Option<MergeOutcome>)> {
    cfg.validate()?;
    let need = || {
        stats.ok_or_else(|| {
            Error::InvalidArgument(format!("method `{}` needs layer statistics for every task", method.as_str()))
        })
    };
    match method {
        MergeMethod::Lot => {
            let outcome = merge_lot::merge_from_stats(spec, need()?, tvs, cfg)?;
            let merged = netspec::apply(pretrained, &outcome.merged_tv, cfg.lambda)?;
            Ok((merged, Some(outcome)))
        }
        MergeMethod::Ta => Ok((task_arithmetic(pretrained, tvs, cfg.lambda)?, None)),
        MergeMethod::Avg => {
            let experts: Vec<Checkpoint> = tvs
                .iter()
                .map(|tv| netspec::apply(pretrained, tv, 1.0))
                .collect::<Result<_>>()?;
            Ok((weight_average(&experts)?, None))
        }
        MergeMethod::Regmean => Ok((regmean_merge(spec, pretrained, tvs, need()?, cfg)?, None)),
    }
}
