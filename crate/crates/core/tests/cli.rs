use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semadapt::cli::{ExperimentConfig, RESOLVED_CONFIG};
use semadapt::datagen::MANIFEST_FILE;
use semadapt::trainer::{read_metrics, TrainState, CHECKPOINT_FINAL, CHECKPOINT_LAST, METRICS_FILE};

const TINY: &str = r#"
[dataset]
height = 16
width = 16
n_source = 8
n_target_train = 6
labeled_budget = 2
n_target_val = 4

[model]
feature_channels = 8
generator_widths = [4, 8, 8]
global_widths = [4, 8]
semantic_hidden = 16

[training]
max_iterations = 8
eval_every = 4
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("tiny.toml");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_semadapt"));
        cmd.args(&args[..1]);
        if args[0] != "eval" {
            cmd.arg("--config").arg(&config);
        }
        cmd.args(&args[1..]).env("SEMADAPT_RUN_ROOT", self.path("runs"));
        cmd.output().unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_is_idempotent_and_guards_existing_output() {
    let sb = Sandbox::new();
    let out = sb.path("data").display().to_string();
    let first = sb.run(&["generate", "--out", &out]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let manifest = read(&sb.path("data").join(MANIFEST_FILE));
    assert!(sb.path("data").join(RESOLVED_CONFIG).exists());

    let again = sb.run(&["generate", "--out", &out]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));

    let forced = sb.run(&["generate", "--out", &out, "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(read(&sb.path("data").join(MANIFEST_FILE)), manifest);
}

#[test]
fn zero_budget_generates_no_labeled_samples() {
    let sb = Sandbox::new();
    let out = sb.path("data").display().to_string();
    assert_eq!(code(&sb.run(&["generate", "--out", &out, "--budget", "0"])), 0);
    let manifest = String::from_utf8(read(&sb.path("data").join(MANIFEST_FILE))).unwrap();
    assert!(!manifest.contains("\"target_labeled\""));
    assert!(manifest.contains("\"target_unlabeled\""));
}

#[test]
fn usage_errors_exit_with_one() {
    let sb = Sandbox::new();
    let out = sb.run(&["train", "--mode", "ga_csa", "--budget", "0"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("labeled"), "{}", stderr(&out));
    assert_eq!(code(&sb.run(&["train", "--mode", "bogus"])), 1);
    fs::write(sb.path("tiny.toml"), "[training]\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&sb.run(&["train"])), 1);
}

#[test]
fn ga_trains_without_labels_into_the_default_run_root() {
    let sb = Sandbox::new();
    let out = sb.run(&["train", "--mode", "ga", "--budget", "0", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = sb.path("runs/ga-b0-seed3");
    for f in [METRICS_FILE, CHECKPOINT_LAST, CHECKPOINT_FINAL, RESOLVED_CONFIG] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    assert_eq!(read_metrics(&dir.join(METRICS_FILE)).unwrap().len(), 2);
}

#[test]
fn resolved_snapshot_reproduces_the_run() {
    let sb = Sandbox::new();
    let a = sb.path("a").display().to_string();
    assert_eq!(code(&sb.run(&["train", "--out", &a])), 0);
    let snapshot = fs::read_to_string(sb.path("a").join(RESOLVED_CONFIG)).unwrap();
    let resolved = ExperimentConfig::from_toml(&snapshot).unwrap();
    assert_eq!(resolved.to_toml().unwrap(), snapshot);
    assert_eq!(resolved.training.weights.lambda_sadv, Some(0.01));

    fs::write(sb.path("tiny.toml"), &snapshot).unwrap();
    let b = sb.path("b").display().to_string();
    assert_eq!(code(&sb.run(&["train", "--out", &b])), 0);
    assert_eq!(read(&sb.path("a").join(METRICS_FILE)), read(&sb.path("b").join(METRICS_FILE)));
}

#[test]
fn resume_of_a_finished_run_keeps_its_log() {
    let sb = Sandbox::new();
    let a = sb.path("a").display().to_string();
    assert_eq!(code(&sb.run(&["train", "--out", &a])), 0);
    let log = read(&sb.path("a").join(METRICS_FILE));
    let out = sb.run(&["train", "--out", &a, "--resume"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read(&sb.path("a").join(METRICS_FILE)), log);
    assert_eq!(code(&sb.run(&["train", "--resume"])), 1);
}

#[test]
fn interrupted_run_resumes_bit_identically() {
    let sb = Sandbox::new();
    let a = sb.path("a").display().to_string();
    let b = sb.path("b").display().to_string();
    assert_eq!(code(&sb.run(&["train", "--out", &a])), 0);
    assert_eq!(code(&sb.run(&["train", "--out", &b])), 0);

    let cfg = ExperimentConfig::load(&sb.path("b").join(RESOLVED_CONFIG)).unwrap();
    let data = cfg.dataset.build().unwrap();
    let mut early = TrainState::<f32>::new(&cfg.training, &cfg.model).unwrap();
    early.run_until(&data, None, 4).unwrap();
    early.to_checkpoint().save(&sb.path("b").join(CHECKPOINT_LAST)).unwrap();

    let out = sb.run(&["train", "--out", &b, "--resume"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [METRICS_FILE, CHECKPOINT_FINAL] {
        assert_eq!(read(&sb.path("a").join(f)), read(&sb.path("b").join(f)), "{f}");
    }
}

#[test]
fn budget_sweep_fills_a_twelve_cell_table() {
    let sb = Sandbox::new();
    let out = sb.path("sweep").display().to_string();
    let run = sb.run(&[
        "sweep", "--out", &out, "--axis", "budget", "--values", "0,2,4,6", "--mode", "source_only,ga,ga_csa",
        "--iterations", "4",
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let summary = fs::read_to_string(sb.path("sweep/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "budget,source_only,ga,ga_csa");
    assert_eq!(lines.len(), 5);
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 4);
    }
    assert!(lines[1].ends_with(','), "ga_csa at budget 0 is not trainable: {}", lines[1]);

    let runs = fs::read_to_string(sb.path("sweep/runs.csv")).unwrap();
    for row in runs.lines().skip(1).filter(|r| !r.contains(",,")) {
        let cols: Vec<&str> = row.split(',').collect();
        let log = read_metrics(&PathBuf::from(cols[4]).join(METRICS_FILE)).unwrap();
        let last = log.last().unwrap().val_miou.unwrap();
        assert_eq!(format!("{last:.6}"), cols[3]);
    }
    assert!(sb.path("sweep/monotonicity.txt").exists());
}

#[test]
fn lambda_sweep_uses_one_directory_per_value() {
    let sb = Sandbox::new();
    let out = sb.path("sweep").display().to_string();
    let run = sb.run(&[
        "sweep", "--out", &out, "--axis", "lambda-sadv", "--values", "1,0.01", "--mode", "ga_csa", "--iterations",
        "2",
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!(sb.path("sweep/lambda_sadv=1/ga_csa-seed0").is_dir());
    assert!(sb.path("sweep/lambda_sadv=0.01/ga_csa-seed0").is_dir());
    let bad = sb.run(&["sweep", "--out", &out, "--force", "--axis", "budget", "--values", "2.5"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn eval_is_deterministic_and_exports_predictions() {
    let sb = Sandbox::new();
    let run = sb.path("run").display().to_string();
    assert_eq!(code(&sb.run(&["train", "--out", &run, "--mode", "oracle"])), 0);
    let preds = sb.path("preds").display().to_string();
    let first = sb.run(&["eval", "--run", &run, "--predictions", &preds]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let report = read(&sb.path("run/report.json"));
    assert_eq!(code(&sb.run(&["eval", "--run", &run])), 0);
    assert_eq!(read(&sb.path("run/report.json")), report);
    assert_eq!(fs::read_dir(sb.path("preds")).unwrap().count(), 4);

    let train = sb.run(&["eval", "--run", &run, "--split", "target_labeled", "--out", &sb.path("t.json").display().to_string()]);
    assert_eq!(code(&train), 0, "{}", stderr(&train));
    assert_eq!(code(&sb.run(&["eval", "--run", &run, "--split", "target_unlabeled"])), 1);
}

#[test]
fn malformed_checkpoint_is_a_clean_runtime_error() {
    let sb = Sandbox::new();
    let run = sb.path("run").display().to_string();
    assert_eq!(code(&sb.run(&["train", "--out", &run, "--iterations", "4"])), 0);
    let ck = sb.path("run").join(CHECKPOINT_FINAL);
    let bytes = read(&ck);
    fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let out = sb.run(&["eval", "--run", &run]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
    assert!(!stderr(&out).contains("panicked"));
}
