mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{random_checkpoint, rng, uniform};
use lotmerge::capture::{forward, io as capture_io, ExemplarSet};
use lotmerge::netspec::{self, io as netspec_io, Checkpoint, NetworkSpec, TaskVector, UnitSpec};
use lotmerge::toybench;
use rand::Rng;
use tempfile::TempDir;

fn lotmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lotmerge"))
        .args(args)
        .env_remove("LOTMERGE_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct Fixture {
    dir: TempDir,
    spec: NetworkSpec,
    pretrained: Checkpoint,
    tvs: Vec<TaskVector>,
    sets: Vec<ExemplarSet>,
}

impl Fixture {
    fn new(spec: NetworkSpec, tasks: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let pretrained = random_checkpoint(&spec, &mut r);
        let dir = tempfile::tempdir().unwrap();
        netspec_io::save_checkpoint(&dir.path().join("pre"), &spec, &pretrained).unwrap();
        let mut tvs = Vec::new();
        let mut sets = Vec::new();
        for k in 0..tasks {
            let deltas = spec
                .mergeable_units()
                .map(|u| (u.unit_id.clone(), uniform(&mut r, u.shape[0], u.shape[1]).scale(0.3)))
                .collect();
            let tv = TaskVector::new(&spec, deltas).unwrap();
            let id = format!("task{k}");
            let classes = spec.head_for_task(&id).map_or(2, |h| h.shape[1]) as u32;
            let labels = (0..24).map(|_| r.random_range(0..classes)).collect();
            let set = ExemplarSet::new(id, uniform(&mut r, 24, spec.input_dim).scale(2.0), Some(labels)).unwrap();
            netspec_io::save_task_vector(&dir.path().join(format!("tv{k}")), &spec, &tv).unwrap();
            capture_io::save_exemplars(&dir.path().join(format!("ex{k}")), &set).unwrap();
            tvs.push(tv);
            sets.push(set);
        }
        Self {
            dir,
            spec,
            pretrained,
            tvs,
            sets,
        }
    }

    fn toy(tasks: usize, seed: u64) -> Self {
        let ids: Vec<(String, usize)> = (0..tasks).map(|k| (format!("task{k}"), 3)).collect();
        Self::new(toybench::default_spec(5, 6, &ids).unwrap(), tasks, seed)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn capture_all(&self) {
        for k in 0..self.tvs.len() {
            let out = lotmerge(&[
                "capture",
                "--model",
                &self.p("pre"),
                "--task-vector",
                &self.p(&format!("tv{k}")),
                "--exemplars",
                &self.p(&format!("ex{k}")),
                "--out",
                &self.p(&format!("stats{k}")),
            ]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        }
    }

    /// `--task-vector … [--<flag> …]` pairs for every task.
    fn per_task(&self, flag: &str, prefix: &str) -> Vec<String> {
        (0..self.tvs.len())
            .flat_map(|k| {
                let mut v = vec!["--task-vector".to_string(), self.p(&format!("tv{k}"))];
                if !flag.is_empty() {
                    v.push(flag.to_string());
                    v.push(self.p(&format!("{prefix}{k}")));
                }
                v
            })
            .collect()
    }

    fn merge(&self, extra: &[&str], out: &str) -> Output {
        let mut args = vec!["merge".to_string(), "--model".into(), self.p("pre"), "--out".into(), self.p(out)];
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        lotmerge(&refs)
    }
}

fn run_with(base: &[&str], rest: &[String]) -> Output {
    let mut args: Vec<&str> = base.to_vec();
    args.extend(rest.iter().map(|s| s.as_str()));
    lotmerge(&args)
}

#[test]
fn missing_flag_is_usage_error() {
    let f = Fixture::toy(1, 1);
    let out = lotmerge(&["capture", "--model", &f.p("pre"), "--task-vector", &f.p("tv0"), "--out", &f.p("s")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--exemplars"));
    assert_eq!(code(&lotmerge(&["merge", "--method", "nope"])), 2);
}

#[test]
fn corrupt_manifest_is_format_error() {
    let f = Fixture::toy(1, 2);
    std::fs::write(f.path("pre").join("manifest.json"), "{ not json").unwrap();
    let out = lotmerge(&[
        "capture",
        "--model",
        &f.p("pre"),
        "--task-vector",
        &f.p("tv0"),
        "--exemplars",
        &f.p("ex0"),
        "--out",
        &f.p("s"),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}

#[test]
fn truncated_blob_is_format_error() {
    let f = Fixture::toy(1, 3);
    let blob = f.path("tv0").join("fc1.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    let out = f.merge(&["--method", "ta", "--task-vector", &f.p("tv0")], "m");
    assert_eq!(code(&out), 3);
}

#[test]
fn capture_writes_every_mergeable_unit() {
    let f = Fixture::toy(1, 4);
    f.capture_all();
    let stats = capture_io::load_layer_stats(&f.path("stats0")).unwrap();
    let ids: Vec<&String> = stats.units.keys().collect();
    let mut want: Vec<&String> = f.spec.mergeable_units().map(|u| &u.unit_id).collect();
    want.sort();
    assert_eq!(ids, want);
    assert_eq!(stats.n_samples, 24);
}

#[test]
fn ta_with_zero_lambda_is_pretrained() {
    let f = Fixture::toy(2, 5);
    let mut extra = vec!["--method".to_string(), "ta".into(), "--lambda".into(), "0".into()];
    extra.extend(f.per_task("", ""));
    let refs: Vec<&str> = extra.iter().map(|s| s.as_str()).collect();
    let out = f.merge(&refs, "merged");
    assert_eq!(code(&out), 0);
    let (_, merged) = netspec_io::load_checkpoint(&f.path("merged")).unwrap();
    assert_eq!(merged, f.pretrained);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["method"], "ta");
    assert_eq!(report["num_tasks"], 2);
}

#[test]
fn lot_single_task_reproduces_expert() {
    let f = Fixture::toy(1, 6);
    f.capture_all();
    let report = f.path("report.json");
    let out = f.merge(
        &["--task-vector", &f.p("tv0"), "--stats", &f.p("stats0"), "--report", &report.to_string_lossy()],
        "merged",
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let (_, merged) = netspec_io::load_checkpoint(&f.path("merged")).unwrap();
    let expert = netspec::apply(&f.pretrained, &f.tvs[0], 1.0).unwrap();
    let x = &f.sets[0].features;
    let got = forward(&f.spec, &merged, x).unwrap();
    let want = forward(&f.spec, &expert, x).unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-8 * want.max_abs().max(1.0));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["units"].as_array().unwrap().len(), f.spec.mergeable_units().count());
}

#[test]
fn stats_required_for_lot_and_rejected_for_ta() {
    let f = Fixture::toy(2, 7);
    f.capture_all();
    let tvs = f.per_task("", "");
    let refs: Vec<&str> = tvs.iter().map(|s| s.as_str()).collect();
    let out = f.merge(&refs, "m1");
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--stats"));
    let mut with_stats = f.per_task("--stats", "stats");
    with_stats.extend(["--method".to_string(), "avg".into()]);
    let refs: Vec<&str> = with_stats.iter().map(|s| s.as_str()).collect();
    assert_eq!(code(&f.merge(&refs, "m2")), 2);
}

#[test]
fn every_method_runs() {
    let f = Fixture::toy(3, 8);
    f.capture_all();
    for method in ["lot", "ta", "avg", "regmean"] {
        let mut args = if matches!(method, "lot" | "regmean") {
            f.per_task("--stats", "stats")
        } else {
            f.per_task("", "")
        };
        args.extend(["--method".to_string(), method.into()]);
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        let out = f.merge(&refs, method);
        assert_eq!(code(&out), 0, "{method}: {}", String::from_utf8_lossy(&out.stderr));
        let (_, m) = netspec_io::load_checkpoint(&f.path(method)).unwrap();
        m.ensure_spec(&f.spec).unwrap();
    }
}

#[test]
fn drift_against_expert_is_zero() {
    let f = Fixture::toy(1, 9);
    let expert = netspec::apply(&f.pretrained, &f.tvs[0], 1.0).unwrap();
    netspec_io::save_checkpoint(&f.path("expert"), &f.spec, &expert).unwrap();
    let out = run_with(
        &["drift", "--model", &f.p("pre"), "--merged", &f.p("expert"), "--format", "csv"],
        &f.per_task("--exemplars", "ex"),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), lotmerge::analysis::DRIFT_CSV_HEADER);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), f.spec.mergeable_units().count());
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert!(cols[3..].iter().all(|c| c.parse::<f64>().unwrap() == 0.0), "{row}");
    }
}

#[test]
fn drift_plot_data() {
    let f = Fixture::toy(2, 10);
    let mut args = f.per_task("", "");
    args.extend(["--method".to_string(), "ta".into(), "--lambda".into(), "0.5".into()]);
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(code(&f.merge(&refs, "ta")), 0);
    let csv = f.path("plot.csv");
    let mut rest = f.per_task("--exemplars", "ex");
    rest.extend(["--out".to_string(), csv.to_string_lossy().into_owned()]);
    let out = run_with(
        &["drift", "--model", &f.p("pre"), "--merged", &f.p("ta"), "--plot-data", "--format", "csv"],
        &rest,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "task_id,last_layer_cosine,accuracy_drop");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn bound_holds_on_linear_net() {
    let ids = ["task0", "task1"];
    let spec = NetworkSpec::new(
        4,
        vec![UnitSpec::matmul("w1", 4, 5), UnitSpec::bias("b1", 5), UnitSpec::matmul("w2", 5, 3)],
        ids.iter().map(|t| UnitSpec::head(&format!("head.{t}"), t, 3, 2)).collect(),
    )
    .unwrap();
    let f = Fixture::new(spec, 2, 11);
    f.capture_all();
    let mut args = f.per_task("--stats", "stats");
    args.extend(["--lambda".to_string(), "1".into()]);
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(code(&f.merge(&refs, "lot")), 0);
    for loss in ["cross-entropy-on-linear-head", "mse"] {
        let out = run_with(
            &["bound", "--model", &f.p("pre"), "--merged", &f.p("lot"), "--loss", loss],
            &f.per_task("--eval", "ex"),
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let tasks = r["tasks"].as_array().unwrap();
        assert_eq!(tasks.len(), 2);
        assert!(tasks.iter().all(|t| t["bound_satisfied"] == true), "{loss}: {r}");
    }
}

#[test]
fn mismatched_pairs_are_rejected() {
    let f = Fixture::toy(2, 12);
    let out = lotmerge(&[
        "drift",
        "--model",
        &f.p("pre"),
        "--merged",
        &f.p("pre"),
        "--task-vector",
        &f.p("tv0"),
        "--task-vector",
        &f.p("tv1"),
        "--exemplars",
        &f.p("ex0"),
    ]);
    assert_eq!(code(&out), 2);
}

fn toybench_args(dir: &Path, name: &str) -> Vec<String> {
    ["toybench", "--seed", "7", "--train-size", "128", "--test-size", "128", "--out"]
        .iter()
        .map(|s| s.to_string())
        .chain([dir.join(name).to_string_lossy().into_owned()])
        .collect()
}

#[test]
fn toybench_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.json", "b.json"] {
        let args = toybench_args(dir.path(), name);
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_eq!(code(&lotmerge(&refs)), 0);
    }
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());
    let args = toybench_args(dir.path(), "c.json");
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let threaded = Command::new(env!("CARGO_BIN_EXE_lotmerge"))
        .args(&refs)
        .env("LOTMERGE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&threaded), 0);
    assert_eq!(a, std::fs::read(dir.path().join("c.json")).unwrap());
}

#[test]
fn toybench_csv_and_save() {
    let dir = tempfile::tempdir().unwrap();
    let save = dir.path().join("exp");
    let out = lotmerge(&[
        "toybench",
        "--seed",
        "1",
        "--train-size",
        "96",
        "--test-size",
        "64",
        "--format",
        "csv",
        "--save",
        &save.to_string_lossy(),
    ]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "method,lambda,task_id,accuracy");
    assert!(text.lines().any(|l| l.starts_with("lot,1,task0,")));
    assert!(save.join("manifest.json").is_file());
    netspec_io::load_checkpoint(&save.join("pretrained")).unwrap();
}

#[test]
fn bad_thread_cap_and_divergence_exit_codes() {
    let out = Command::new(env!("CARGO_BIN_EXE_lotmerge"))
        .args(["toybench", "--train-size", "64", "--test-size", "16"])
        .env("LOTMERGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = lotmerge(&["toybench", "--learning-rate", "1e6", "--steps", "50"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
