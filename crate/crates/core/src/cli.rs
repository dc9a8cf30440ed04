//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 input format, 4 numerical failure.
//! `LOTMERGE_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{self, BoundReport, DriftReport, LossKind, PlotRow};
use crate::baselines::{self, MergeMethod};
use crate::capture::{self, io as capture_io, ExemplarSet, LayerStats};
use crate::error::{Error, Result};
use crate::json;
use crate::merge_lot::{MergeConfig, UnitReport};
use crate::netspec::{self, io as netspec_io, Checkpoint, NetworkSpec, TaskVector};
use crate::tensor::DEFAULT_PINV_REL_TOL;
use crate::toybench::{self, GeneratorTag, ToyBenchConfig, ToyBenchReport};

pub const THREADS_ENV: &str = "LOTMERGE_THREADS";
pub const USAGE_EXIT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lotmerge", version, about = "Layer-wise optimal task-vector merging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect per-unit feature statistics for one expert
    Capture(CaptureArgs),
    /// Merge task vectors into a single checkpoint
    Merge(MergeArgs),
    /// Per-unit feature drift of a merged model against each expert
    Drift(DriftArgs),
    /// Check the Lipschitz loss-change bound for each task
    Bound(BoundArgs),
    /// Train, merge and score one synthetic benchmark instance
    Toybench(ToyBenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct CaptureArgs {
    /// Pretrained checkpoint directory
    #[arg(long)]
    pub model: PathBuf,
    /// Task vector directory of the expert
    #[arg(long)]
    pub task_vector: PathBuf,
    /// Exemplar set directory
    #[arg(long)]
    pub exemplars: PathBuf,
    /// Directory to write the statistics into
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Pretrained checkpoint directory
    #[arg(long)]
    pub model: PathBuf,
    /// Task vector directory; repeat once per task
    #[arg(long = "task-vector", required = true)]
    pub task_vectors: Vec<PathBuf>,
    /// Statistics directory, in the same task order (lot and regmean only)
    #[arg(long = "stats")]
    pub stats: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MergeMethod::Lot)]
    pub method: MergeMethod,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Relative singular value cutoff of the pseudoinverse
    #[arg(long = "pinv-tol", default_value_t = DEFAULT_PINV_REL_TOL)]
    pub pinv_tol: f64,
    /// Directory to write the merged checkpoint into
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the JSON report (stdout when omitted)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DriftArgs {
    /// Pretrained checkpoint directory
    #[arg(long)]
    pub model: PathBuf,
    /// Merged checkpoint directory
    #[arg(long)]
    pub merged: PathBuf,
    /// Expert task vector directory; repeat once per task
    #[arg(long = "task-vector", required = true)]
    pub task_vectors: Vec<PathBuf>,
    /// Exemplar set directory, in the same task order
    #[arg(long = "exemplars", required = true)]
    pub exemplars: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Emit (last-layer cosine drift, accuracy drop) per task instead;
    /// needs labeled exemplars and a head per task
    #[arg(long)]
    pub plot_data: bool,
    /// Output file (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// Pretrained checkpoint directory
    #[arg(long)]
    pub model: PathBuf,
    /// Merged checkpoint directory
    #[arg(long)]
    pub merged: PathBuf,
    /// Expert task vector directory; repeat once per task
    #[arg(long = "task-vector", required = true)]
    pub task_vectors: Vec<PathBuf>,
    /// Labeled evaluation set directory, in the same task order
    #[arg(long = "eval", required = true)]
    pub eval: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = LossKind::CrossEntropyOnLinearHead)]
    pub loss: LossKind,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Output file (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Unset options keep the benchmark defaults.
#[derive(Debug, Args)]
pub struct ToyBenchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Exemplars per task
    #[arg(long)]
    pub exemplars: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Fine-tuning steps per expert
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorTag>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long = "pinv-tol")]
    pub pinv_tol: Option<f64>,
    /// Also write checkpoints, task vectors and data sets here
    #[arg(long)]
    pub save: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Output file (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ToyBenchArgs {
    pub fn config(&self) -> ToyBenchConfig {
        let mut c = ToyBenchConfig::new(self.seed);
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.num_tasks, self.tasks);
        set(&mut c.input_dim, self.input_dim);
        set(&mut c.hidden_dim, self.hidden_dim);
        set(&mut c.num_classes, self.classes);
        set(&mut c.n_exemplar, self.exemplars);
        set(&mut c.n_train, self.train_size);
        set(&mut c.n_test, self.test_size);
        set(&mut c.train.steps, self.steps);
        set(&mut c.train.pretrain_steps, self.pretrain_steps);
        if let Some(lr) = self.learning_rate {
            c.train.learning_rate = lr;
        }
        if let Some(g) = self.generator {
            c.generator = g;
        }
        if let Some(s) = self.separation {
            c.separation = s;
        }
        if let Some(t) = self.pinv_tol {
            c.pinv_rel_tol = t;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub method: MergeMethod,
    pub lambda: f64,
    pub pinv_rel_tol: f64,
    pub spec_hash: String,
    pub num_tasks: usize,
    /// Per-unit residuals; only the `lot` method fills these in.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub units: Vec<UnitReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftOutput {
    pub tasks: Vec<DriftReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotOutput {
    pub rows: Vec<PlotRow>,
    pub pearson: Option<f64>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { USAGE_EXIT } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lotmerge: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Capture(a) => cmd_capture(&a),
        Command::Merge(a) => cmd_merge(&a),
        Command::Drift(a) => cmd_drift(&a),
        Command::Bound(a) => cmd_bound(&a),
        Command::Toybench(a) => cmd_toybench(&a),
    })
}

fn thread_cap() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(Error::InvalidArgument(format!(
            "{THREADS_ENV} must be a positive integer, got `{raw}`"
        ))),
    }
}

pub fn cmd_capture(a: &CaptureArgs) -> Result<()> {
    let (spec, pretrained) = netspec_io::load_checkpoint(&a.model)?;
    let tv = load_task_vector_for(&a.task_vector, &spec)?;
    let exemplars = capture_io::load_exemplars(&a.exemplars)?;
    let (stats, _) = capture::collect_stats(&spec, &pretrained, &tv, &exemplars, false)?;
    capture_io::save_layer_stats(&a.out, &stats)?;
    eprintln!(
        "captured {} units over {} samples of `{}` into {}",
        stats.units.len(),
        stats.n_samples,
        stats.task_id,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_merge(a: &MergeArgs) -> Result<()> {
    let cfg = MergeConfig {
        lambda: a.lambda,
        pinv_rel_tol: a.pinv_tol,
    };
    cfg.validate()?;
    if !a.method.needs_stats() && !a.stats.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "method `{}` merges task vectors only; drop --stats",
            a.method.as_str()
        )));
    }
    if a.method.needs_stats() && a.stats.len() != a.task_vectors.len() {
        return Err(Error::InvalidArgument(format!(
            "method `{}` needs one --stats per --task-vector ({} given for {} tasks)",
            a.method.as_str(),
            a.stats.len(),
            a.task_vectors.len()
        )));
    }
    let (spec, pretrained) = netspec_io::load_checkpoint(&a.model)?;
    let tvs = load_task_vectors(&a.task_vectors, &spec)?;
    let stats = a
        .stats
        .iter()
        .map(|p| {
            let s = capture_io::load_layer_stats(p)?;
            check_stats_spec(&s, &spec, p)?;
            Ok(s)
        })
        .collect::<Result<Vec<LayerStats>>>()?;
    let stats = (!stats.is_empty()).then_some(stats.as_slice());
    let (merged, outcome) = baselines::merge_with(a.method, &spec, &pretrained, &tvs, stats, &cfg)?;
    netspec_io::save_checkpoint(&a.out, &spec, &merged)?;
    let report = MergeReport {
        method: a.method,
        lambda: cfg.lambda,
        pinv_rel_tol: cfg.pinv_rel_tol,
        spec_hash: spec.hash(),
        num_tasks: tvs.len(),
        units: outcome.map(|o| o.units).unwrap_or_default(),
    };
    emit(a.report.as_deref(), &canonical(&report))
}

pub fn cmd_drift(a: &DriftArgs) -> Result<()> {
    let ctx = Comparison::load(&a.model, &a.merged, &a.task_vectors, &a.exemplars)?;
    let reports = ctx
        .tasks
        .iter()
        .map(|(tv, ex)| analysis::measure_drift(&ctx.spec, &ctx.pretrained, &ctx.merged_tv, tv, ex))
        .collect::<Result<Vec<_>>>()?;
    if a.plot_data {
        let rows = ctx
            .tasks
            .iter()
            .zip(&reports)
            .map(|((tv, ex), r)| ctx.plot_row(tv, ex, r))
            .collect::<Result<Vec<_>>>()?;
        let text = match a.format {
            Format::Csv => analysis::plot_csv(&rows),
            Format::Json => {
                let xs: Vec<f64> = rows.iter().map(|r| r.last_layer_cosine).collect();
                let ys: Vec<f64> = rows.iter().map(|r| r.accuracy_drop).collect();
                canonical(&PlotOutput {
                    pearson: analysis::pearson(&xs, &ys),
                    rows,
                })
            }
        };
        return emit(a.out.as_deref(), &text);
    }
    let text = match a.format {
        Format::Csv => analysis::drift_csv(&reports),
        Format::Json => canonical(&DriftOutput { tasks: reports }),
    };
    emit(a.out.as_deref(), &text)
}

pub fn cmd_bound(a: &BoundArgs) -> Result<()> {
    let ctx = Comparison::load(&a.model, &a.merged, &a.task_vectors, &a.eval)?;
    let tasks = ctx
        .tasks
        .iter()
        .map(|(tv, ev)| analysis::check_bound(&ctx.spec, &ctx.pretrained, &ctx.merged_tv, tv, ev, a.loss))
        .collect::<Result<Vec<_>>>()?;
    let report = BoundReport { tasks };
    let text = match a.format {
        Format::Csv => report.to_csv(),
        Format::Json => canonical(&report),
    };
    emit(a.out.as_deref(), &text)
}

pub fn cmd_toybench(a: &ToyBenchArgs) -> Result<()> {
    let cfg = a.config();
    let (run, report) = toybench::run_experiment(&cfg)?;
    if let Some(dir) = &a.save {
        toybench::save_experiment(dir, &run, &report)?;
    }
    let text = match a.format {
        Format::Csv => toybench_csv(&report),
        Format::Json => canonical(&report),
    };
    emit(a.out.as_deref(), &text)
}

/// One row per (method, λ, task) accuracy.
pub fn toybench_csv(r: &ToyBenchReport) -> String {
    let mut rows = Vec::new();
    let mut push = |method: &str, lambda: Option<f64>, acc: &[f64]| {
        for (t, a) in r.tasks.iter().zip(acc) {
            rows.push(vec![
                method.to_string(),
                lambda.map(json::format_g17).unwrap_or_default(),
                t.clone(),
                json::format_g17(*a),
            ]);
        }
    };
    push("pretrained", None, &r.pretrained_accuracy);
    push("expert", None, &r.expert_accuracy);
    push(r.lot.method.as_str(), r.lot.lambda, &r.lot.accuracy);
    for s in &r.ta_grid {
        push(s.method.as_str(), s.lambda, &s.accuracy);
    }
    push(r.weight_average.method.as_str(), None, &r.weight_average.accuracy);
    push(r.regmean.method.as_str(), None, &r.regmean.accuracy);
    analysis::write_csv(&["method", "lambda", "task_id", "accuracy"], rows)
}

/// Pretrained and merged models plus `(expert task vector, data)` per task.
struct Comparison {
    spec: NetworkSpec,
    pretrained: Checkpoint,
    merged: Checkpoint,
    merged_tv: TaskVector,
    tasks: Vec<(TaskVector, ExemplarSet)>,
}

impl Comparison {
    fn load(model: &Path, merged_path: &Path, tvs: &[PathBuf], sets: &[PathBuf]) -> Result<Self> {
        if tvs.len() != sets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} task vectors but {} data sets; pass one of each per task",
                tvs.len(),
                sets.len()
            )));
        }
        let (spec, pretrained) = netspec_io::load_checkpoint(model)?;
        let (merged_spec, merged) = netspec_io::load_checkpoint(merged_path)?;
        if merged_spec.hash() != spec.hash() {
            return Err(Error::Incompatible(format!(
                "{} was built for a different network than {}",
                merged_path.display(),
                model.display()
            )));
        }
        let merged_tv = netspec::task_vector(&merged, &pretrained, &spec)?;
        let tvs = load_task_vectors(tvs, &spec)?;
        let sets = sets
            .iter()
            .map(|p| capture_io::load_exemplars(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            pretrained,
            merged,
            merged_tv,
            tasks: tvs.into_iter().zip(sets).collect(),
        })
    }

    fn plot_row(&self, tv: &TaskVector, set: &ExemplarSet, drift: &DriftReport) -> Result<PlotRow> {
        let head = self
            .spec
            .head_for_task(&set.task_id)
            .ok_or_else(|| Error::InvalidArgument(format!("--plot-data needs a head for task `{}`", set.task_id)))?;
        let expert = netspec::apply(&self.pretrained, tv, 1.0)?;
        let acc_expert = toybench::evaluate(&self.spec, &expert, set, &head.unit_id)?;
        let acc_merged = toybench::evaluate(&self.spec, &self.merged, set, &head.unit_id)?;
        Ok(PlotRow {
            task_id: set.task_id.clone(),
            last_layer_cosine: drift.last_layer_cosine,
            accuracy_drop: acc_expert - acc_merged,
        })
    }
}

fn load_task_vector_for(path: &Path, spec: &NetworkSpec) -> Result<TaskVector> {
    let (tv_spec, tv) = netspec_io::load_task_vector(path)?;
    if tv_spec.hash() != spec.hash() {
        return Err(Error::Incompatible(format!(
            "{}: task vector was built for spec {}, the model is {}",
            path.display(),
            tv_spec.hash(),
            spec.hash()
        )));
    }
    Ok(tv)
}

fn load_task_vectors(paths: &[PathBuf], spec: &NetworkSpec) -> Result<Vec<TaskVector>> {
    paths.iter().map(|p| load_task_vector_for(p, spec)).collect()
}

fn check_stats_spec(stats: &LayerStats, spec: &NetworkSpec, path: &Path) -> Result<()> {
    if stats.spec_hash != spec.hash() {
        return Err(Error::Incompatible(format!(
            "{}: statistics were captured for spec {}, the model is {}",
            path.display(),
            stats.spec_hash,
            spec.hash()
        )));
    }
    Ok(())
}

fn canonical<T: Serialize>(value: &T) -> String {
    json::to_canonical_string(value).expect("report types serialize")
}

/// Writes to `path`, or to stdout when there is none.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}
