//! Synthetic classification tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::capture::ExemplarSet;
use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Independent class means per task.
    GaussianClusters,
    /// Class means drawn once from `family_seed`, then rotated per task.
    RotatedSharedClusters { family_seed: u64 },
    /// Clusters confined to coordinate block `block` of `num_blocks`.
    DisjointSubspace { block: usize, num_blocks: usize },
}

impl Generator {
    pub fn tag(&self) -> &'static str {
        match self {
            Generator::GaussianClusters => "gaussian_clusters",
            Generator::RotatedSharedClusters { .. } => "rotated_shared_clusters",
            Generator::DisjointSubspace { .. } => "disjoint_subspace",
        }
    }
}

fn default_separation() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub seed: u64,
    pub input_dim: usize,
    pub num_classes: usize,
    pub n_train: usize,
    /// Exemplars are the first `n_exemplar` training rows.
    pub n_exemplar: usize,
    pub n_test: usize,
    pub generator: Generator,
    /// Standard deviation of the class means; samples add unit noise.
    #[serde(default = "default_separation")]
    pub separation: f64,
}

impl SyntheticTaskSpec {
    pub fn new(task_id: impl Into<String>, seed: u64, input_dim: usize, num_classes: usize, generator: Generator) -> Self {
        Self {
            task_id: task_id.into(),
            seed,
            input_dim,
            num_classes,
            n_train: 512,
            n_exemplar: 64,
            n_test: 512,
            generator,
            separation: default_separation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("task `{}`: {m}", self.task_id)));
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input_dim and num_classes must be at least 1".into());
        }
        if self.n_train == 0 || self.n_exemplar == 0 || self.n_test == 0 {
            return bad("sample counts must be at least 1".into());
        }
        if self.n_exemplar > self.n_train {
            return bad(format!("{} exemplars exceed {} training rows", self.n_exemplar, self.n_train));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return bad("separation must be positive".into());
        }
        if let Generator::DisjointSubspace { block, num_blocks } = self.generator {
            if num_blocks == 0 || block >= num_blocks || self.input_dim < num_blocks {
                return bad(format!("block {block} of {num_blocks} does not fit input_dim {}", self.input_dim));
            }
        }
        Ok(())
    }

    /// Coordinates the task's inputs may occupy.
    pub fn support(&self) -> std::ops::Range<usize> {
        match self.generator {
            Generator::DisjointSubspace { block, num_blocks } => {
                let w = self.input_dim / num_blocks;
                block * w..(block + 1) * w
            }
            _ => 0..self.input_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: SyntheticTaskSpec,
    pub train: ExemplarSet,
    pub exemplars: ExemplarSet,
    pub test: ExemplarSet,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).expect("finite samples")
}

/// Random orthogonal matrix as the polar factor of a Gaussian one.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Result<Matrix> {
    let f = tensor::svd(&gaussian_matrix(rng, d, d, 1.0))?;
    f.u.matmul(&f.vt)
}

/// Class means as rows of a `num_classes × input_dim` matrix.
pub fn class_means(spec: &SyntheticTaskSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, d) = (spec.num_classes, spec.input_dim);
    Ok(match spec.generator {
        Generator::GaussianClusters => gaussian_matrix(&mut rng, k, d, spec.separation),
        Generator::RotatedSharedClusters { family_seed } => {
            let mut family = ChaCha8Rng::seed_from_u64(family_seed);
            let shared = gaussian_matrix(&mut family, k, d, spec.separation);
            shared.matmul(&random_rotation(&mut rng, d)?)?
        }
        Generator::DisjointSubspace { .. } => {
            let support = spec.support();
            let local = gaussian_matrix(&mut rng, k, support.len(), spec.separation);
            let mut m = Matrix::zeros(k, d);
            for r in 0..k {
                m.row_mut(r)[support.clone()].copy_from_slice(local.row(r));
            }
            m
        }
    })
}

/// Deterministic train / exemplar / test split for one task. Labels are
/// balanced up to rounding and the rows shuffled.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    let means = class_means(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let support = spec.support();
    let mut sample = |n: usize| -> Result<ExemplarSet> {
        let mut labels: Vec<u32> = (0..n).map(|i| (i % spec.num_classes) as u32).collect();
        labels.shuffle(&mut rng);
        let mut x = Matrix::zeros(n, spec.input_dim);
        for (r, &y) in labels.iter().enumerate() {
            let mean = means.row(y as usize);
            let row = x.row_mut(r);
            for c in support.clone() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                row[c] = mean[c] + noise;
            }
        }
        ExemplarSet::new(spec.task_id.clone(), x, Some(labels))
    };
    let train = sample(spec.n_train)?;
    let test = sample(spec.n_test)?;
    let exemplars = train.take(spec.n_exemplar);
    Ok(TaskData {
        spec: spec.clone(),
        train,
        exemplars,
        test,
    })
}

pub fn generate_tasks(specs: &[SyntheticTaskSpec]) -> Result<Vec<TaskData>> {
    specs.iter().map(generate_task).collect()
}

/// Draws a fresh random index batch of size `min(batch, n)`.
pub(crate) fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch.min(n)).map(|_| rng.random_range(0..n)).collect()
}
