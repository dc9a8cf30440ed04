//! Drift, negative-transfer and bound diagnostics, plus the subspace
//! alignment check that places each unit between the orthogonal-task and
//! collinear-task regimes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::capture::{apply_unit, forward, forward_activations, ExemplarSet, FeatureTrace};
use crate::error::{Error, Result};
use crate::json::format_g17;
use crate::netspec::{self, ActivationTag, Checkpoint, NetworkSpec, TaskVector, UnitKind, NORMALIZE_EPS};
use crate::tensor::{self, Matrix};

/// Multiplier applied to empirically estimated Lipschitz constants.
pub const SAFETY_FACTOR: f64 = 1.5;
/// Global Lipschitz constant of the tanh-approximated GELU, rounded up.
pub const GELU_LIPSCHITZ: f64 = 1.13;

const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDrift {
    pub unit_id: String,
    pub kind: UnitKind,
    pub drift_fro: f64,
    pub drift_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub task_id: String,
    pub units: Vec<UnitDrift>,
    /// Mean per-sample cosine distance between fully merged and expert
    /// trunk outputs.
    pub last_layer_cosine: f64,
}

impl DriftReport {
    pub fn unit(&self, unit_id: &str) -> Option<&UnitDrift> {
        self.units.iter().find(|u| u.unit_id == unit_id)
    }

    /// True when relative drift never decreases from one mergeable unit to
    /// the next.
    pub fn relative_drift_nondecreasing(&self) -> bool {
        self.units.windows(2).all(|w| w[1].drift_rel >= w[0].drift_rel)
    }
}

pub const DRIFT_CSV_HEADER: &str = "task_id,unit_id,kind,drift_fro,drift_rel,last_layer_cosine";

pub fn drift_csv(reports: &[DriftReport]) -> String {
    let rows = reports.iter().flat_map(|r| {
        r.units.iter().map(move |u| {
            vec![
                r.task_id.clone(),
                u.unit_id.clone(),
                u.kind.to_string(),
                format_g17(u.drift_fro),
                format_g17(u.drift_rel),
                format_g17(r.last_layer_cosine),
            ]
        })
    });
    write_csv(&DRIFT_CSV_HEADER.split(',').collect::<Vec<_>>(), rows)
}

/// Header plus rows, quoted where needed.
pub(crate) fn write_csv<I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

/// Per-sample cosine distance `1 − cos(a_i, b_i)`, averaged over rows.
/// A zero row against a zero row counts as distance 0, against a nonzero
/// row as 1.
pub fn mean_cosine_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("cosine distance", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in 0..a.rows() {
        let (x, y) = (a.row(r), b.row(r));
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += match (nx > 0.0, ny > 0.0) {
            (false, false) => 0.0,
            // ‖x/|x| − y/|y|‖² / 2 equals 1 − cos without the cancellation
            (true, true) => {
                let d2: f64 = x.iter().zip(y).map(|(p, q)| (p / nx - q / ny).powi(2)).sum();
                (0.5 * d2).min(2.0)
            }
            _ => 1.0,
        };
    }
    Ok(total / a.rows() as f64)
}

/// Drift of every mergeable unit when only that unit is swapped from the
/// expert's parameters to `W_pre + merged_tv`, measured at the unit's output
/// on the expert's own inputs.
pub fn measure_drift(
    spec: &NetworkSpec,
    pretrained: &Checkpoint,
    merged_tv: &TaskVector,
    expert_tv: &TaskVector,
    exemplars: &ExemplarSet,
) -> Result<DriftReport> {
    let expert = netspec::apply(pretrained, expert_tv, 1.0)?;
    let merged = netspec::apply(pretrained, merged_tv, 1.0)?;
    let acts = forward_activations(spec, &expert, &exemplars.features)?;
    let mut units = Vec::new();
    for (i, u) in spec.units.iter().enumerate() {
        if !u.kind.is_mergeable() {
            continue;
        }
        let out = apply_unit(u, merged.param(&u.unit_id), &acts[i], None)?;
        let drift_fro = out.sub(&acts[i + 1])?.frobenius_norm();
        let base = acts[i + 1].frobenius_norm();
        units.push(UnitDrift {
            unit_id: u.unit_id.clone(),
            kind: u.kind,
            drift_fro,
            drift_rel: if base > 0.0 { drift_fro / base } else { 0.0 },
        });
    }
    let merged_out = forward(spec, &merged, &exemplars.features)?;
    Ok(DriftReport {
        task_id: exemplars.task_id.clone(),
        units,
        last_layer_cosine: mean_cosine_distance(&merged_out, &acts[spec.units.len()])?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy on the task's frozen head logits.
    CrossEntropyOnLinearHead,
    /// Squared error between the logits and the one-hot label.
    Mse,
}

impl LossKind {
    fn sample(self, z: &[f64], label: usize) -> f64 {
        match self {
            LossKind::CrossEntropyOnLinearHead => {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - z[label]
            }
            LossKind::Mse => z
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    let t = if c == label { 1.0 } else { 0.0 };
                    (v - t) * (v - t)
                })
                .sum(),
        }
    }

    /// Mean per-sample loss over a batch of logits.
    pub fn mean(self, logits: &Matrix, labels: &[u32]) -> Result<f64> {
        check_labels(logits, labels)?;
        if labels.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| self.sample(logits.row(i), y as usize))
            .sum();
        Ok(total / labels.len() as f64)
    }
}

fn check_labels(logits: &Matrix, labels: &[u32]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("loss", format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= logits.cols()) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {} classes", logits.cols())));
    }
    Ok(())
}

/// Head logits for a task, or the trunk output when the spec has no head
/// for it.
pub fn task_logits(spec: &NetworkSpec, ckpt: &Checkpoint, features: &Matrix, task: &str) -> Result<Matrix> {
    let out = forward(spec, ckpt, features)?;
    match spec.head_for_task(task) {
        Some(h) => apply_unit(h, ckpt.param(&h.unit_id), &out, None),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task_id: String,
    pub merged_loss: f64,
    pub expert_loss: f64,
    pub delta_loss: f64,
}

/// `L_k(merged) − L_k(expert_k)` on each task's labeled evaluation set.
pub fn measure_negative_transfer(
    spec: &NetworkSpec,
    merged: &Checkpoint,
    experts: &[Checkpoint],
    eval_sets: &[ExemplarSet],
    loss: LossKind,
) -> Result<Vec<TaskLoss>> {
    if experts.len() != eval_sets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} experts but {} evaluation sets",
            experts.len(),
            eval_sets.len()
        )));
    }
    experts
        .iter()
        .zip(eval_sets)
        .map(|(e, set)| {
            let labels = set.labels()?;
            let lm = loss.mean(&task_logits(spec, merged, &set.features, &set.task_id)?, labels)?;
            let le = loss.mean(&task_logits(spec, e, &set.features, &set.task_id)?, labels)?;
            Ok(TaskLoss {
                task_id: set.task_id.clone(),
                merged_loss: lm,
                expert_loss: le,
                delta_loss: lm - le,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitBoundTerm {
    pub unit_id: String,
    pub kind: UnitKind,
    /// Lipschitz estimate of the unit with respect to its input.
    pub gamma: f64,
    /// Drift at this unit (zero for units without merged parameters).
    pub drift_fro: f64,
    /// Amplification of this unit's drift up to the logits.
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBound {
    pub task_id: String,
    /// `|L(merged) − L(expert)|` on the evaluation set.
    pub delta_loss: f64,
    pub bound_value: f64,
    pub beta: f64,
    /// Lipschitz estimate of the task head (1 when the task has none).
    pub head_gamma: f64,
    pub units: Vec<UnitBoundTerm>,
    pub bound_satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub tasks: Vec<TaskBound>,
}

impl BoundReport {
    pub fn all_satisfied(&self) -> bool {
        self.tasks.iter().all(|t| t.bound_satisfied)
    }

    pub fn to_csv(&self) -> String {
        let rows = self.tasks.iter().map(|t| {
            vec![
                t.task_id.clone(),
                format_g17(t.delta_loss),
                format_g17(t.bound_value),
                format_g17(t.beta),
                t.bound_satisfied.to_string(),
            ]
        });
        write_csv(&["task_id", "delta_loss", "bound_value", "beta", "bound_satisfied"], rows)
    }
}

fn max_inv_std(x: &Matrix) -> f64 {
    let d = x.cols() as f64;
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            1.0 / (var + NORMALIZE_EPS).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Largest per-sample loss-gradient norm with respect to the logits,
/// probed by central differences at both endpoints and their midpoint.
fn max_loss_sensitivity(loss: LossKind, a: &Matrix, b: &Matrix, labels: &[u32]) -> f64 {
    let mut best: f64 = 0.0;
    let mut z = vec![0.0; a.cols()];
    for (i, &y) in labels.iter().enumerate() {
        let (ra, rb) = (a.row(i), b.row(i));
        for t in [0.0, 0.5, 1.0] {
            for (c, v) in z.iter_mut().enumerate() {
                *v = ra[c] + t * (rb[c] - ra[c]);
            }
            let mut g2 = 0.0;
            for c in 0..z.len() {
                let orig = z[c];
                z[c] = orig + FD_STEP;
                let up = loss.sample(&z, y as usize);
                z[c] = orig - FD_STEP;
                let down = loss.sample(&z, y as usize);
                z[c] = orig;
                let g = (up - down) / (2.0 * FD_STEP);
                g2 += g * g;
            }
            best = best.max(g2.sqrt());
        }
    }
    best
}

/// Checks `|ΔL_k| ≤ β Σ_l (Π_{m>l} γ_m) ‖Δf^l_k‖` for one task.
///
/// Drift and loss are both measured on `eval`. Errors are propagated
/// through the trunk as `e_out ≤ γ e_in + drift`, with residual units
/// adding the error carried by their branch.
pub fn check_bound(
    spec: &NetworkSpec,
    pretrained: &Checkpoint,
    merged_tv: &TaskVector,
    expert_tv: &TaskVector,
    eval: &ExemplarSet,
    loss: LossKind,
) -> Result<TaskBound> {
    let labels = eval.labels()?;
    let expert = netspec::apply(pretrained, expert_tv, 1.0)?;
    let merged = netspec::apply(pretrained, merged_tv, 1.0)?;
    let acts_e = forward_activations(spec, &expert, &eval.features)?;
    let acts_m = forward_activations(spec, &merged, &eval.features)?;
    let drift = measure_drift(spec, pretrained, merged_tv, expert_tv, eval)?;

    let n_units = spec.units.len();
    let index: BTreeMap<&str, usize> = spec.units.iter().enumerate().map(|(i, u)| (u.unit_id.as_str(), i)).collect();
    // coef[j][l]: weight of unit l's drift in the error bound on acts[j]
    let mut coef: Vec<Vec<f64>> = vec![vec![0.0; n_units]];
    let mut gammas = Vec::with_capacity(n_units);
    for (i, u) in spec.units.iter().enumerate() {
        let gamma = match u.kind {
            UnitKind::MatMul | UnitKind::Frozen => {
                let we = expert.param(&u.unit_id).expect("validated checkpoint").spectral_norm()?;
                let wm = merged.param(&u.unit_id).expect("validated checkpoint").spectral_norm()?;
                we.max(wm)
            }
            UnitKind::Scale => expert.params[&u.unit_id].max_abs().max(merged.params[&u.unit_id].max_abs()),
            UnitKind::Bias | UnitKind::Residual => 1.0,
            UnitKind::Activation => match u.activation {
                Some(ActivationTag::Relu) | Some(ActivationTag::Identity) => 1.0,
                Some(ActivationTag::Gelu) => GELU_LIPSCHITZ,
                None => {
                    return Err(Error::InvalidSpec(format!(
                        "activation `{}` has no known Lipschitz constant",
                        u.unit_id
                    )))
                }
            },
            UnitKind::Normalize => SAFETY_FACTOR * max_inv_std(&acts_e[i]).max(max_inv_std(&acts_m[i])),
        };
        let mut next: Vec<f64> = if u.kind == UnitKind::Residual {
            let src = index[u.source.as_deref().expect("validated spec")];
            coef[i].iter().zip(&coef[src]).map(|(a, b)| a + b).collect()
        } else {
            coef[i].iter().map(|c| gamma * c).collect()
        };
        if u.kind.is_mergeable() {
            next[i] += 1.0;
        }
        coef.push(next);
        gammas.push(gamma);
    }

    let logits_e = task_logits(spec, &expert, &eval.features, &eval.task_id)?;
    let logits_m = task_logits(spec, &merged, &eval.features, &eval.task_id)?;
    let head_gamma = match spec.head_for_task(&eval.task_id) {
        Some(h) => expert.params[&h.unit_id].spectral_norm()?,
        None => 1.0,
    };
    check_labels(&logits_e, labels)?;
    let delta_loss = (loss.mean(&logits_m, labels)? - loss.mean(&logits_e, labels)?).abs();
    let beta = if labels.is_empty() {
        0.0
    } else {
        SAFETY_FACTOR * max_loss_sensitivity(loss, &logits_e, &logits_m, labels) / (labels.len() as f64).sqrt()
    };

    let final_coef = &coef[n_units];
    let mut units = Vec::with_capacity(n_units);
    let mut sum = 0.0;
    for (i, u) in spec.units.iter().enumerate() {
        let d = drift.unit(&u.unit_id).map_or(0.0, |x| x.drift_fro);
        let c = head_gamma * final_coef[i];
        sum += c * d;
        units.push(UnitBoundTerm {
            unit_id: u.unit_id.clone(),
            kind: u.kind,
            gamma: gammas[i],
            drift_fro: d,
            coefficient: c,
        });
    }
    let bound_value = beta * sum;
    Ok(TaskBound {
        task_id: eval.task_id.clone(),
        delta_loss,
        bound_value,
        beta,
        head_gamma,
        units,
        bound_satisfied: delta_loss <= bound_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub task_a: String,
    pub task_b: String,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAlignment {
    pub ranks: BTreeMap<String, usize>,
    pub overlaps: Vec<PairOverlap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDiagnostic {
    pub units: BTreeMap<String, UnitAlignment>,
}

fn right_subspace(x: &Matrix, rel_tol: f64) -> Result<Matrix> {
    let f = tensor::svd(x)?;
    let r = f.rank(rel_tol);
    Ok(f.vt.slice_rows(0, r))
}

/// `‖V_aᵀV_b‖_F / √min(r_a, r_b)` for row-stacked orthonormal bases;
/// zero when either subspace is empty.
pub fn subspace_overlap(va: &Matrix, vb: &Matrix) -> Result<f64> {
    let r = va.rows().min(vb.rows());
    if r == 0 {
        return Ok(0.0);
    }
    Ok(va.matmul(&vb.transpose())?.frobenius_norm() / (r as f64).sqrt())
}

/// Pairwise overlap of the tasks' input-feature row spaces at every unit.
pub fn alignment_diagnostic(traces: &[FeatureTrace], rel_tol: f64) -> Result<AlignmentDiagnostic> {
    tensor::check_rel_tol(rel_tol)?;
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("alignment needs at least one feature trace".into()))?;
    let mut units = BTreeMap::new();
    for unit_id in first.inputs.keys() {
        let mut bases = Vec::with_capacity(traces.len());
        for t in traces {
            let x = t
                .inputs
                .get(unit_id)
                .ok_or_else(|| Error::Incompatible(format!("trace `{}` lacks unit `{unit_id}`", t.task_id)))?;
            bases.push((t.task_id.clone(), right_subspace(x, rel_tol)?));
        }
        let mut overlaps = Vec::new();
        for a in 0..bases.len() {
            for b in a + 1..bases.len() {
                overlaps.push(PairOverlap {
                    task_a: bases[a].0.clone(),
                    task_b: bases[b].0.clone(),
                    overlap: subspace_overlap(&bases[a].1, &bases[b].1)?,
                });
            }
        }
        let ranks = bases.iter().map(|(id, v)| (id.clone(), v.rows())).collect();
        units.insert(unit_id.clone(), UnitAlignment { ranks, overlaps });
    }
    Ok(AlignmentDiagnostic { units })
}

/// One scatter point relating final-feature drift to accuracy loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub task_id: String,
    pub last_layer_cosine: f64,
    pub accuracy_drop: f64,
}

pub fn plot_csv(rows: &[PlotRow]) -> String {
    let rows = rows
        .iter()
        .map(|r| vec![r.task_id.clone(), format_g17(r.last_layer_cosine), format_g17(r.accuracy_drop)]);
    write_csv(&["task_id", "last_layer_cosine", "accuracy_drop"], rows)
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
