//! Forward evaluation and per-unit input-feature statistics.
//!
//! Statistics are always collected from each expert's own forward pass
//! (`W_pre + T_k`): the features feeding unit `l` are the expert's
//! activations after unit `l − 1`. Grams are accumulated chunk by chunk so
//! exemplar sets never need a second copy of their activations.

pub mod io;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::netspec::{self, ActivationTag, Checkpoint, NetworkSpec, TaskVector, UnitKind, UnitSpec, NORMALIZE_EPS};
use crate::tensor::Matrix;

/// Rows processed per forward chunk while accumulating statistics.
pub const STATS_CHUNK_ROWS: usize = 256;

/// Default per-task exemplar budget.
pub const DEFAULT_EXEMPLARS_PER_TASK: usize = 64;

/// A batch of pre-extracted inputs for one task. Token-level inputs are
/// expected flattened into rows (one row per token).
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub task_id: String,
    pub features: Matrix,
    pub labels: Option<Vec<u32>>,
}

impl ExemplarSet {
    pub fn new(task_id: impl Into<String>, features: Matrix, labels: Option<Vec<u32>>) -> Result<Self> {
        let task_id = task_id.into();
        if features.rows() == 0 {
            return Err(Error::InvalidArgument(format!("exemplar set `{task_id}` is empty")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite(format!("exemplar set `{task_id}`")));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::shape(
                    format!("exemplar set `{task_id}`"),
                    format!("{} labels for {} rows", l.len(), features.rows()),
                ));
            }
        }
        Ok(Self {
            task_id,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn labels(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::MissingLabels(self.task_id.clone()))
    }

    /// First `n` rows (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> ExemplarSet {
        let n = n.min(self.len()).max(1);
        ExemplarSet {
            task_id: self.task_id.clone(),
            features: self.features.slice_rows(0, n),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }
}

pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn activate(tag: ActivationTag, x: f64) -> f64 {
    match tag {
        ActivationTag::Relu => relu(x),
        ActivationTag::Gelu => gelu(x),
        ActivationTag::Identity => x,
    }
}

/// Row-wise `(x − mean) / sqrt(var + eps)`, population variance.
pub(crate) fn normalize_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + NORMALIZE_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn broadcast_rows(x: &Matrix, p: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        for (v, &q) in out.row_mut(r).iter_mut().zip(p.as_slice()) {
            *v = f(*v, q);
        }
    }
    out
}

/// Evaluates a single unit. `param` is required for parameterized units,
/// `skip` for residual units.
pub fn apply_unit(unit: &UnitSpec, param: Option<&Matrix>, x: &Matrix, skip: Option<&Matrix>) -> Result<Matrix> {
    let ctx = || format!("unit `{}`", unit.unit_id);
    if x.cols() != unit.input_width() {
        return Err(Error::shape(
            ctx(),
            format!("expects width {}, got {}", unit.input_width(), x.cols()),
        ));
    }
    let need = || -> Result<&Matrix> {
        let p = param.ok_or_else(|| Error::Incompatible(format!("no parameter for `{}`", unit.unit_id)))?;
        if p.shape() != (unit.shape[0], unit.shape[1]) {
            return Err(Error::shape(ctx(), format!("parameter shape {:?}", p.shape())));
        }
        Ok(p)
    };
    Ok(match unit.kind {
        UnitKind::MatMul | UnitKind::Frozen => x.matmul(need()?)?,
        UnitKind::Scale => broadcast_rows(x, need()?, |a, s| a * s),
        UnitKind::Bias => broadcast_rows(x, need()?, |a, b| a + b),
        UnitKind::Normalize => normalize_rows(x),
        UnitKind::Activation => {
            let tag = unit.activation.expect("validated spec");
            x.map(|v| activate(tag, v))
        }
        UnitKind::Residual => {
            let s = skip.ok_or_else(|| Error::shape(ctx(), "missing residual branch"))?;
            x.add(s).map_err(|_| Error::shape(ctx(), "residual branch width"))?
        }
    })
}

/// Inputs to every trunk unit plus the final output: `acts[i]` enters unit
/// `i`, `acts[units.len()]` is the trunk output.
pub fn forward_activations(spec: &NetworkSpec, ckpt: &Checkpoint, batch: &Matrix) -> Result<Vec<Matrix>> {
    forward_with(spec, batch, |u| ckpt.param(&u.unit_id))
}

/// Forward pass with parameters supplied per unit by `param_of`.
pub(crate) fn forward_with<'a>(
    spec: &NetworkSpec,
    batch: &Matrix,
    param_of: impl Fn(&UnitSpec) -> Option<&'a Matrix>,
) -> Result<Vec<Matrix>> {
    if batch.cols() != spec.input_dim {
        return Err(Error::shape(
            "forward",
            format!("batch width {} != input_dim {}", batch.cols(), spec.input_dim),
        ));
    }
    let index: BTreeMap<&str, usize> = spec
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| (u.unit_id.as_str(), i))
        .collect();
    let mut acts = Vec::with_capacity(spec.units.len() + 1);
    acts.push(batch.clone());
    for (i, u) in spec.units.iter().enumerate() {
        let skip = u.source.as_ref().map(|s| &acts[index[s.as_str()]]);
        let out = apply_unit(u, param_of(u), &acts[i], skip)?;
        acts.push(out);
    }
    Ok(acts)
}

/// Trunk output features.
pub fn forward(spec: &NetworkSpec, ckpt: &Checkpoint, batch: &Matrix) -> Result<Matrix> {
    Ok(forward_activations(spec, ckpt, batch)?.pop().expect("non-empty"))
}

/// Applies the frozen head for `task` to trunk features.
pub fn head_logits(spec: &NetworkSpec, ckpt: &Checkpoint, features: &Matrix, task: &str) -> Result<Matrix> {
    let head = spec
        .head_for_task(task)
        .ok_or_else(|| Error::InvalidArgument(format!("spec has no head for task `{task}`")))?;
    apply_unit(head, ckpt.param(&head.unit_id), features, None)
}

/// Per-unit sufficient statistics for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitStats {
    MatMul { gram: Matrix, gram_times_delta: Matrix },
    Scale { sq_sums: Matrix, sq_sums_times_delta: Matrix },
    Bias { delta: Matrix, count: usize },
}

impl UnitStats {
    pub fn kind(&self) -> UnitKind {
        match self {
            UnitStats::MatMul { .. } => UnitKind::MatMul,
            UnitStats::Scale { .. } => UnitKind::Scale,
            UnitStats::Bias { .. } => UnitKind::Bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub task_id: String,
    pub spec_hash: String,
    pub n_samples: usize,
    pub units: BTreeMap<String, UnitStats>,
}

/// Raw inputs of every mergeable unit for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrace {
    pub task_id: String,
    pub inputs: BTreeMap<String, Matrix>,
}

enum Acc {
    MatMul(Matrix),
    Scale(Vec<f64>),
    Bias,
}

/// Runs the expert `pretrained + tv` over the exemplars and records the
/// statistics each closed-form solver needs.
pub fn collect_stats(
    spec: &NetworkSpec,
    pretrained: &Checkpoint,
    tv: &TaskVector,
    exemplars: &ExemplarSet,
    keep_traces: bool,
) -> Result<(LayerStats, Option<FeatureTrace>)> {
    pretrained.ensure_spec(spec)?;
    tv.ensure_spec(spec)?;
    if exemplars.is_empty() {
        return Err(Error::InvalidArgument("no exemplars".into()));
    }
    let expert = netspec::apply(pretrained, tv, 1.0)?;

    let mut accs: Vec<(usize, &UnitSpec, Acc)> = spec
        .units
        .iter()
        .enumerate()
        .filter(|(_, u)| u.kind.is_mergeable())
        .map(|(i, u)| {
            let acc = match u.kind {
                UnitKind::MatMul => Acc::MatMul(Matrix::zeros(u.shape[0], u.shape[0])),
                UnitKind::Scale => Acc::Scale(vec![0.0; u.shape[1]]),
                _ => Acc::Bias,
            };
            (i, u, acc)
        })
        .collect();
    let mut trace_parts: BTreeMap<String, Vec<Matrix>> = BTreeMap::new();

    let n = exemplars.len();
    let mut start = 0;
    while start < n {
        let end = (start + STATS_CHUNK_ROWS).min(n);
        let chunk = exemplars.features.slice_rows(start, end);
        let acts = forward_activations(spec, &expert, &chunk)?;
        for (i, u, acc) in accs.iter_mut() {
            let x = &acts[*i];
            match acc {
                Acc::MatMul(g) => g.axpy(1.0, &x.gram())?,
                Acc::Scale(sq) => {
                    for r in 0..x.rows() {
                        for (s, v) in sq.iter_mut().zip(x.row(r)) {
                            *s += v * v;
                        }
                    }
                }
                Acc::Bias => {}
            }
            if keep_traces {
                trace_parts.entry(u.unit_id.clone()).or_default().push(x.clone());
            }
        }
        start = end;
    }

    let mut units = BTreeMap::new();
    for (_, u, acc) in accs {
        let delta = tv.delta_or_zero(u);
        let stats = match acc {
            Acc::MatMul(gram) => {
                let gram_times_delta = gram.matmul(&delta)?;
                UnitStats::MatMul { gram, gram_times_delta }
            }
            Acc::Scale(sq) => {
                let sq_sums = Matrix::from_raw(1, sq.len(), sq);
                let sq_sums_times_delta = sq_sums.hadamard(&delta)?;
                UnitStats::Scale { sq_sums, sq_sums_times_delta }
            }
            Acc::Bias => UnitStats::Bias { delta, count: n },
        };
        units.insert(u.unit_id.clone(), stats);
    }
    let stats = LayerStats {
        task_id: exemplars.task_id.clone(),
        spec_hash: spec.hash(),
        n_samples: n,
        units,
    };
    let trace = keep_traces.then(|| FeatureTrace {
        task_id: exemplars.task_id.clone(),
        inputs: trace_parts
            .into_iter()
            .map(|(k, parts)| {
                let refs: Vec<&Matrix> = parts.iter().collect();
                (k, Matrix::vstack(&refs).expect("equal widths"))
            })
            .collect(),
    });
    Ok((stats, trace))
}

/// Per-task bias delta with the number of samples it was observed on.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBias {
    pub task_id: String,
    pub delta: Matrix,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PooledUnit {
    MatMul { gram: Matrix, gram_times_delta: Matrix },
    Scale { sq_sums: Matrix, sq_sums_times_delta: Matrix },
    Bias { deltas: Vec<TaskBias> },
}

/// Statistics summed across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStats {
    pub spec_hash: String,
    pub task_ids: Vec<String>,
    pub n_samples: usize,
    pub units: BTreeMap<String, PooledUnit>,
}

pub fn merge_stats(stats: &[LayerStats]) -> Result<PooledStats> {
    let first = stats
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge_stats needs at least one task".into()))?;
    let mut units: BTreeMap<String, PooledUnit> = BTreeMap::new();
    for s in stats {
        if s.spec_hash != first.spec_hash {
            return Err(Error::Incompatible(format!(
                "stats for `{}` come from a different spec",
                s.task_id
            )));
        }
        if s.units.len() != first.units.len() || !s.units.keys().eq(first.units.keys()) {
            return Err(Error::Incompatible(format!(
                "stats for `{}` cover different units",
                s.task_id
            )));
        }
        for (id, u) in &s.units {
            let slot = units.get_mut(id);
            match (u, slot) {
                (UnitStats::MatMul { gram, gram_times_delta }, None) => {
                    units.insert(
                        id.clone(),
                        PooledUnit::MatMul {
                            gram: gram.clone(),
                            gram_times_delta: gram_times_delta.clone(),
                        },
                    );
                }
                (
                    UnitStats::MatMul { gram, gram_times_delta },
                    Some(PooledUnit::MatMul { gram: g, gram_times_delta: gd }),
                ) => {
                    g.axpy(1.0, gram)?;
                    gd.axpy(1.0, gram_times_delta)?;
                }
                (UnitStats::Scale { sq_sums, sq_sums_times_delta }, None) => {
                    units.insert(
                        id.clone(),
                        PooledUnit::Scale {
                            sq_sums: sq_sums.clone(),
                            sq_sums_times_delta: sq_sums_times_delta.clone(),
                        },
                    );
                }
                (
                    UnitStats::Scale { sq_sums, sq_sums_times_delta },
                    Some(PooledUnit::Scale { sq_sums: q, sq_sums_times_delta: qd }),
                ) => {
                    q.axpy(1.0, sq_sums)?;
                    qd.axpy(1.0, sq_sums_times_delta)?;
                }
                (UnitStats::Bias { delta, count }, slot) => {
                    let entry = TaskBias {
                        task_id: s.task_id.clone(),
                        delta: delta.clone(),
                        count: *count,
                    };
                    match slot {
                        None => {
                            units.insert(id.clone(), PooledUnit::Bias { deltas: vec![entry] });
                        }
                        Some(PooledUnit::Bias { deltas }) => deltas.push(entry),
                        Some(_) => return Err(kind_clash(id)),
                    }
                }
                _ => return Err(kind_clash(id)),
            }
        }
    }
    Ok(PooledStats {
        spec_hash: first.spec_hash.clone(),
        task_ids: stats.iter().map(|s| s.task_id.clone()).collect(),
        n_samples: stats.iter().map(|s| s.n_samples).sum(),
        units,
    })
}

fn kind_clash(id: &str) -> Error {
    Error::Incompatible(format!("unit `{id}` has different statistic kinds across tasks"))
}
