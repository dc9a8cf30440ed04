//! Desk-scale benchmark: synthetic tasks, genuinely fine-tuned experts and
//! accuracy evaluation of every merge method.

mod data;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{class_means, generate_task, generate_tasks, Generator, SyntheticTaskSpec, TaskData};
pub use train::{
    finetune, init_checkpoint, loss_and_gradients, pretrain, pretrain_and_finetune, Gradients, TrainConfig,
};

use crate::baselines::{merge_with, MergeMethod};
use crate::capture::{apply_unit, forward, io as capture_io, ExemplarSet};
use crate::error::{Error, Result};
use crate::json;
use crate::merge_lot::{self, MergeConfig, UnitReport};
use crate::netspec::{self, io as netspec_io, ActivationTag, Checkpoint, NetworkSpec, TaskVector, UnitSpec};
use crate::tensor::DEFAULT_PINV_REL_TOL;

/// `input → fc1 → fc1.bias → relu → norm → gain → shift → fc2 → res(+fc2
/// input) → relu`, then one frozen head per task.
pub fn default_spec(input_dim: usize, hidden_dim: usize, tasks: &[(String, usize)]) -> Result<NetworkSpec> {
    let h = hidden_dim;
    let units = vec![
        UnitSpec::matmul("fc1", input_dim, h),
        UnitSpec::bias("fc1.bias", h),
        UnitSpec::activation("act1", h, ActivationTag::Relu),
        UnitSpec::normalize("norm", h),
        UnitSpec::scale("gain", h),
        UnitSpec::bias("shift", h),
        UnitSpec::matmul("fc2", h, h),
        UnitSpec::residual("res", h, "fc2"),
        UnitSpec::activation("act2", h, ActivationTag::Relu),
    ];
    let heads = tasks
        .iter()
        .map(|(id, classes)| UnitSpec::head(&format!("head.{id}"), id, h, *classes))
        .collect();
    NetworkSpec::new(input_dim, units, heads)
}

/// Fraction of rows whose arg-max head logit (lowest index on ties) equals
/// the label.
pub fn evaluate(spec: &NetworkSpec, ckpt: &Checkpoint, test: &ExemplarSet, head_id: &str) -> Result<f64> {
    let labels = test.labels()?;
    let head = spec
        .heads
        .iter()
        .find(|h| h.unit_id == head_id)
        .ok_or_else(|| Error::InvalidArgument(format!("spec has no head `{head_id}`")))?;
    let logits = apply_unit(head, ckpt.param(head_id), &forward(spec, ckpt, &test.features)?, None)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            let row = logits.row(*r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == y as usize
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorTag {
    GaussianClusters,
    RotatedSharedClusters,
    DisjointSubspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBenchConfig {
    pub seed: u64,
    pub num_tasks: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_exemplar: usize,
    pub n_test: usize,
    pub generator: GeneratorTag,
    pub separation: f64,
    pub train: TrainConfig,
    pub lambda_grid: Vec<f64>,
    pub pinv_rel_tol: f64,
}

impl ToyBenchConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            num_tasks: 3,
            input_dim: 16,
            hidden_dim: 16,
            num_classes: 4,
            n_train: 512,
            n_exemplar: 64,
            n_test: 512,
            generator: GeneratorTag::GaussianClusters,
            separation: 2.0,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            lambda_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            pinv_rel_tol: DEFAULT_PINV_REL_TOL,
        }
    }

    pub fn task_specs(&self) -> Vec<SyntheticTaskSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let family_seed: u64 = rng.random();
        (0..self.num_tasks)
            .map(|k| {
                let generator = match self.generator {
                    GeneratorTag::GaussianClusters => Generator::GaussianClusters,
                    GeneratorTag::RotatedSharedClusters => Generator::RotatedSharedClusters { family_seed },
                    GeneratorTag::DisjointSubspace => Generator::DisjointSubspace {
                        block: k,
                        num_blocks: self.num_tasks,
                    },
                };
                SyntheticTaskSpec {
                    task_id: format!("task{k}"),
                    seed: rng.random(),
                    input_dim: self.input_dim,
                    num_classes: self.num_classes,
                    n_train: self.n_train,
                    n_exemplar: self.n_exemplar,
                    n_test: self.n_test,
                    generator,
                    separation: self.separation,
                }
            })
            .collect()
    }

    pub fn merge_config(&self, lambda: f64) -> MergeConfig {
        MergeConfig {
            lambda,
            pinv_rel_tol: self.pinv_rel_tol,
        }
    }
}

/// Data, pretrained model and experts of one benchmark instance.
#[derive(Debug, Clone)]
pub struct ToyBenchRun {
    pub config: ToyBenchConfig,
    pub spec: NetworkSpec,
    pub tasks: Vec<TaskData>,
    pub pretrained: Checkpoint,
    pub experts: Vec<Checkpoint>,
    pub task_vectors: Vec<TaskVector>,
}

impl ToyBenchRun {
    pub fn head_id(&self, k: usize) -> String {
        format!("head.{}", self.tasks[k].spec.task_id)
    }

    /// Per-task test accuracy of `ckpt`.
    pub fn accuracies(&self, ckpt: &Checkpoint) -> Result<Vec<f64>> {
        (0..self.tasks.len())
            .map(|k| evaluate(&self.spec, ckpt, &self.tasks[k].test, &self.head_id(k)))
            .collect()
    }

    /// The first `budget` exemplars of every task.
    pub fn exemplars(&self, budget: usize) -> Vec<ExemplarSet> {
        self.tasks.iter().map(|t| t.exemplars.take(budget.min(t.exemplars.len()))).collect()
    }
}

/// Generates the tasks and trains the pretrained model and experts.
pub fn prepare(cfg: &ToyBenchConfig) -> Result<ToyBenchRun> {
    if cfg.num_tasks == 0 || cfg.hidden_dim == 0 {
        return Err(Error::InvalidArgument("num_tasks and hidden_dim must be at least 1".into()));
    }
    let task_specs = cfg.task_specs();
    let tasks = generate_tasks(&task_specs)?;
    let heads: Vec<(String, usize)> = task_specs.iter().map(|t| (t.task_id.clone(), t.num_classes)).collect();
    let spec = default_spec(cfg.input_dim, cfg.hidden_dim, &heads)?;
    let (pretrained, experts) = pretrain_and_finetune(&spec, &tasks, &cfg.train)?;
    let task_vectors = experts
        .iter()
        .map(|e| netspec::task_vector(e, &pretrained, &spec))
        .collect::<Result<_>>()?;
    Ok(ToyBenchRun {
        config: cfg.clone(),
        spec,
        tasks,
        pretrained,
        experts,
        task_vectors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: MergeMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

impl MethodScore {
    fn new(method: MergeMethod, lambda: Option<f64>, accuracy: Vec<f64>) -> Self {
        Self {
            method,
            lambda,
            mean_accuracy: mean(&accuracy),
            accuracy,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Drift objective of the LOT delta and of every task-arithmetic delta on
/// the grid, on the same expert features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDriftComparison {
    pub unit_id: String,
    pub lot_objective: f64,
    pub ta_objectives: Vec<f64>,
    pub lot_not_worse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBenchReport {
    pub seed: u64,
    pub spec_hash: String,
    pub exemplars_per_task: usize,
    pub tasks: Vec<String>,
    pub pretrained_accuracy: Vec<f64>,
    pub expert_accuracy: Vec<f64>,
    pub lot: MethodScore,
    pub ta_grid: Vec<MethodScore>,
    pub ta_best: MethodScore,
    pub weight_average: MethodScore,
    pub regmean: MethodScore,
    pub lot_units: Vec<UnitReport>,
    pub drift: Vec<UnitDriftComparison>,
}

/// Relative slack for comparing two objective values that agree up to
/// rounding.
pub const OBJECTIVE_SLACK: f64 = 1e-10;

/// Merges with every method using `budget` exemplars per task and scores
/// each on the test sets.
pub fn evaluate_run(run: &ToyBenchRun, budget: usize) -> Result<ToyBenchReport> {
    let cfg = &run.config;
    if cfg.lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    let exemplars = run.exemplars(budget);
    let stats = merge_lot::collect_all(&run.spec, &run.pretrained, &run.task_vectors, &exemplars)?;
    let tvs = &run.task_vectors;
    let score = |method: MergeMethod, lambda: f64| -> Result<(MethodScore, Option<merge_lot::MergeOutcome>)> {
        let (merged, outcome) = merge_with(method, &run.spec, &run.pretrained, tvs, Some(&stats), &cfg.merge_config(lambda))?;
        let shown = matches!(method, MergeMethod::Lot | MergeMethod::Ta).then_some(lambda);
        Ok((MethodScore::new(method, shown, run.accuracies(&merged)?), outcome))
    };
    let (lot, outcome) = score(MergeMethod::Lot, 1.0)?;
    let outcome = outcome.expect("lot returns its report");
    let ta_grid = cfg
        .lambda_grid
        .iter()
        .map(|&l| score(MergeMethod::Ta, l).map(|s| s.0))
        .collect::<Result<Vec<_>>>()?;
    let ta_best = ta_grid
        .iter()
        .fold(None::<&MethodScore>, |best, s| match best {
            Some(b) if b.mean_accuracy >= s.mean_accuracy => Some(b),
            _ => Some(s),
        })
        .expect("non-empty grid")
        .clone();
    let weight_average = score(MergeMethod::Avg, 1.0)?.0;
    let regmean = score(MergeMethod::Regmean, 1.0)?.0;

    let ta_vectors = cfg
        .lambda_grid
        .iter()
        .map(|&l| netspec::scale_sum(tvs, l))
        .collect::<Result<Vec<_>>>()?;
    let drift = run
        .spec
        .mergeable_units()
        .map(|u| {
            let lot_objective = merge_lot::unit_objective(u, &stats, tvs, &outcome.merged_tv.delta_or_zero(u))?;
            let ta_objectives = ta_vectors
                .iter()
                .map(|t| merge_lot::unit_objective(u, &stats, tvs, &t.delta_or_zero(u)))
                .collect::<Result<Vec<_>>>()?;
            let lot_not_worse = ta_objectives
                .iter()
                .all(|&t| lot_objective <= t + OBJECTIVE_SLACK * t.abs().max(lot_objective.abs()));
            Ok(UnitDriftComparison {
                unit_id: u.unit_id.clone(),
                lot_objective,
                ta_objectives,
                lot_not_worse,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ToyBenchReport {
        seed: cfg.seed,
        spec_hash: run.spec.hash(),
        exemplars_per_task: exemplars.iter().map(ExemplarSet::len).min().unwrap_or(0),
        tasks: run.tasks.iter().map(|t| t.spec.task_id.clone()).collect(),
        pretrained_accuracy: run.accuracies(&run.pretrained)?,
        expert_accuracy: run
            .experts
            .iter()
            .enumerate()
            .map(|(k, e)| evaluate(&run.spec, e, &run.tasks[k].test, &run.head_id(k)))
            .collect::<Result<_>>()?,
        lot,
        ta_grid,
        ta_best,
        weight_average,
        regmean,
        lot_units: outcome.units,
        drift,
    })
}

/// Trains and scores one instance at the configured exemplar budget.
pub fn run_experiment(cfg: &ToyBenchConfig) -> Result<(ToyBenchRun, ToyBenchReport)> {
    let run = prepare(cfg)?;
    let report = evaluate_run(&run, cfg.n_exemplar)?;
    Ok((run, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPaths {
    pub expert: String,
    pub task_vector: String,
    pub exemplars: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config: ToyBenchConfig,
    pub spec_hash: String,
    pub pretrained: String,
    pub tasks: BTreeMap<String, TaskPaths>,
    pub report: String,
}

/// Writes the checkpoints, task vectors, exemplar and test sets, the report
/// and a manifest tying them together. Paths in the manifest are relative
/// to `dir`.
pub fn save_experiment(dir: &Path, run: &ToyBenchRun, report: &ToyBenchReport) -> Result<ExperimentManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    netspec_io::save_checkpoint(&dir.join("pretrained"), &run.spec, &run.pretrained)?;
    let mut tasks = BTreeMap::new();
    for (k, t) in run.tasks.iter().enumerate() {
        let id = &t.spec.task_id;
        let paths = TaskPaths {
            expert: format!("experts/{id}"),
            task_vector: format!("task_vectors/{id}"),
            exemplars: format!("exemplars/{id}"),
            test: format!("test/{id}"),
        };
        netspec_io::save_checkpoint(&dir.join(&paths.expert), &run.spec, &run.experts[k])?;
        netspec_io::save_task_vector(&dir.join(&paths.task_vector), &run.spec, &run.task_vectors[k])?;
        capture_io::save_exemplars(&dir.join(&paths.exemplars), &t.exemplars)?;
        capture_io::save_exemplars(&dir.join(&paths.test), &t.test)?;
        tasks.insert(id.clone(), paths);
    }
    let manifest = ExperimentManifest {
        config: run.config.clone(),
        spec_hash: run.spec.hash(),
        pretrained: "pretrained".into(),
        tasks,
        report: "report.json".into(),
    };
    json::write_canonical(&dir.join("report.json"), report)?;
    json::write_canonical(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
