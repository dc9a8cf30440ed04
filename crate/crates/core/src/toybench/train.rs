//! Minimal SGD trainer with an analytic backward pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{batch_indices, TaskData};
use crate::capture::{apply_unit, forward_activations, gelu_grad};
use crate::error::{Error, Result};
use crate::netspec::{ActivationTag, Checkpoint, NetworkSpec, UnitKind};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Fine-tuning steps per task.
    pub steps: usize,
    /// Steps on the pooled tasks before fine-tuning.
    pub pretrain_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            pretrain_steps: 50,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Random initial parameters: scaled Gaussian linear maps, zero biases,
/// unit scales.
pub fn init_checkpoint(spec: &NetworkSpec, seed: u64) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for u in spec.all_units() {
        let [r, c] = u.shape;
        let m = match u.kind {
            UnitKind::MatMul | UnitKind::Frozen => {
                let sd = (2.0 / r as f64).sqrt();
                let data: Vec<f64> = (0..r * c)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sd * z
                    })
                    .collect();
                Matrix::from_vec(r, c, data)?
            }
            UnitKind::Scale => Matrix::from_vec(1, c, vec![1.0; c])?,
            UnitKind::Bias => Matrix::zeros(1, c),
            _ => continue,
        };
        params.insert(u.unit_id.clone(), m);
    }
    Checkpoint::new(spec, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// Gradients of trainable trunk units (MatMul, Scale, Bias).
    pub params: BTreeMap<String, Matrix>,
    /// Gradient with respect to the input batch.
    pub input: Matrix,
}

fn softmax_ce(logits: &Matrix, labels: &[u32]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        loss += z.ln() - (logits.row(r)[y as usize] - m);
        for v in row.iter_mut() {
            *v /= z * n;
        }
        row[y as usize] -= 1.0 / n;
    }
    (loss / n, grad)
}

/// Mean cross-entropy of `task`'s head on the batch and its gradients.
pub fn loss_and_gradients(
    spec: &NetworkSpec,
    ckpt: &Checkpoint,
    batch: &Matrix,
    labels: &[u32],
    task: &str,
) -> Result<Gradients> {
    if batch.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("training batch", format!("{} rows for {} labels", batch.rows(), labels.len())));
    }
    let head = spec
        .head_for_task(task)
        .ok_or_else(|| Error::InvalidArgument(format!("spec has no head for task `{task}`")))?;
    let acts = forward_activations(spec, ckpt, batch)?;
    let n_units = spec.units.len();
    let h = ckpt.expect_param(&head.unit_id)?;
    let logits = apply_unit(head, Some(h), &acts[n_units], None)?;
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= logits.cols()) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for head `{}`", head.unit_id)));
    }
    let (loss, dlogits) = softmax_ce(&logits, labels);

    let index: BTreeMap<&str, usize> = spec.units.iter().enumerate().map(|(i, u)| (u.unit_id.as_str(), i)).collect();
    let mut grads: Vec<Option<Matrix>> = vec![None; n_units + 1];
    grads[n_units] = Some(dlogits.matmul(&h.transpose())?);
    let mut params = BTreeMap::new();
    for i in (0..n_units).rev() {
        let u = &spec.units[i];
        let g = match grads[i + 1].take() {
            Some(g) => g,
            None => Matrix::zeros(acts[i + 1].rows(), acts[i + 1].cols()),
        };
        let x = &acts[i];
        let gin = match u.kind {
            UnitKind::MatMul | UnitKind::Frozen => {
                let w = ckpt.expect_param(&u.unit_id)?;
                if u.kind == UnitKind::MatMul {
                    params.insert(u.unit_id.clone(), x.t_matmul(&g)?);
                }
                g.matmul(&w.transpose())?
            }
            UnitKind::Scale => {
                let s = ckpt.expect_param(&u.unit_id)?;
                let mut ds = vec![0.0; x.cols()];
                let mut gin = g.clone();
                for r in 0..x.rows() {
                    for (c, v) in gin.row_mut(r).iter_mut().enumerate() {
                        ds[c] += g.row(r)[c] * x.row(r)[c];
                        *v *= s.as_slice()[c];
                    }
                }
                params.insert(u.unit_id.clone(), Matrix::from_vec(1, x.cols(), ds)?);
                gin
            }
            UnitKind::Bias => {
                let mut db = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (c, v) in g.row(r).iter().enumerate() {
                        db[c] += v;
                    }
                }
                params.insert(u.unit_id.clone(), Matrix::from_vec(1, g.cols(), db)?);
                g
            }
            UnitKind::Normalize => {
                // dx = (g − mean(g) − y·mean(g∘y)) / s, s = sqrt(var + eps)
                let y = &acts[i + 1];
                let d = x.cols() as f64;
                let mut gin = g.clone();
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / d;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + crate::netspec::NORMALIZE_EPS).sqrt();
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().sum::<f64>() / d;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
                    for (c, v) in gin.row_mut(r).iter_mut().enumerate() {
                        *v = inv * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                gin
            }
            UnitKind::Activation => {
                let tag = u.activation.expect("validated spec");
                let mut gin = g;
                for (v, &xv) in gin.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *v *= match tag {
                        ActivationTag::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        ActivationTag::Gelu => gelu_grad(xv),
                        ActivationTag::Identity => 1.0,
                    };
                }
                gin
            }
            UnitKind::Residual => {
                let src = index[u.source.as_deref().expect("validated spec")];
                accumulate(&mut grads[src], &g)?;
                g
            }
        };
        accumulate(&mut grads[i], &gin)?;
    }
    let input = grads[0].take().unwrap_or_else(|| Matrix::zeros(batch.rows(), batch.cols()));
    Ok(Gradients { loss, params, input })
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(1.0, g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

fn sgd_step(ckpt: &mut Checkpoint, grads: &Gradients, lr: f64) -> Result<()> {
    for (id, g) in &grads.params {
        let w = ckpt
            .params
            .get_mut(id)
            .ok_or_else(|| Error::Incompatible(format!("no parameter for `{id}`")))?;
        w.axpy(-lr, g)?;
    }
    Ok(())
}

/// One SGD step on rows `idx` of `task`. Any non-finite loss, gradient or
/// updated parameter counts as divergence.
fn train_step(
    spec: &NetworkSpec,
    ckpt: &mut Checkpoint,
    task: &TaskData,
    idx: &[usize],
    lr: f64,
    (name, step): (&str, usize),
) -> Result<()> {
    let labels = task.train.labels()?;
    let y: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
    let diverged = |loss: f64| Error::Training {
        task: name.to_string(),
        step,
        loss,
    };
    let g = match loss_and_gradients(spec, ckpt, &task.train.features.select_rows(idx), &y, &task.spec.task_id) {
        Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
        r => r?,
    };
    if !g.loss.is_finite() {
        return Err(diverged(g.loss));
    }
    sgd_step(ckpt, &g, lr)?;
    if ckpt.params.values().any(|m| !m.is_finite()) {
        return Err(diverged(g.loss));
    }
    Ok(())
}

/// Mini-batch SGD on one task's training rows.
pub fn finetune(spec: &NetworkSpec, start: &Checkpoint, task: &TaskData, cfg: &TrainConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ckpt = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..cfg.steps {
        let idx = batch_indices(&mut rng, task.train.len(), cfg.batch_size);
        train_step(spec, &mut ckpt, task, &idx, cfg.learning_rate, (&task.spec.task_id, step))?;
    }
    Ok(ckpt)
}

/// Round-robin SGD over all tasks, each batch through its own head.
pub fn pretrain(spec: &NetworkSpec, init: &Checkpoint, tasks: &[TaskData], cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ckpt = init.clone();
    if tasks.is_empty() {
        return Ok(ckpt);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for step in 0..cfg.pretrain_steps {
        let task = &tasks[step % tasks.len()];
        let idx = batch_indices(&mut rng, task.train.len(), cfg.batch_size);
        train_step(spec, &mut ckpt, task, &idx, cfg.learning_rate, ("pretrain", step))?;
    }
    Ok(ckpt)
}

/// Pre-trains briefly on the pooled tasks, then fine-tunes one copy per
/// task in parallel.
pub fn pretrain_and_finetune(spec: &NetworkSpec, tasks: &[TaskData], cfg: &TrainConfig) -> Result<(Checkpoint, Vec<Checkpoint>)> {
    cfg.validate()?;
    let init = init_checkpoint(spec, cfg.seed)?;
    let pretrained = pretrain(spec, &init, tasks, cfg)?;
    let experts = tasks
        .par_iter()
        .enumerate()
        .map(|(k, t)| finetune(spec, &pretrained, t, cfg, cfg.seed.wrapping_add(1000 + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((pretrained, experts))
}
