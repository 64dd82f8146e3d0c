use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vlfuse::checkpoint::param_bytes;
use vlfuse::harness::{load_model, Arm, Lab, Report};
use vlfuse_cli::config::resolve;
use vlfuse_cli::error::{EXIT_CONFIG, EXIT_DATA, EXIT_IO};

/// Small budgets so every command finishes in seconds.
const TINY: &[&str] = &[
    "seeds=[0]",
    "gradcheck_seeds=[0]",
    "removal_scenes=16",
    "ablations=['A4']",
    "recipe.eval_scenes=32",
    "recipe.eval_batch=16",
    "recipe.lm_pretrain.steps=20",
    "recipe.pretrain.steps=6",
    "recipe.caption_finetune.steps=4",
    "recipe.qa_finetune.steps=4",
    "recipe.ensemble_joint_steps=2",
];

fn overrides(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn vlfuse(out: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vlfuse"));
    c.arg("--out").arg(out);
    for o in overrides(extra) {
        c.arg("--set").arg(o);
    }
    c.args(args).output().expect("binary runs")
}

fn ok(o: &Output) -> String {
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(o.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&o.stderr));
    stdout
}

fn run_dir(out: &Path, extra: &[&str]) -> PathBuf {
    out.join(resolve(None, &overrides(extra)).unwrap().hash())
}

fn report(dir: &Path, name: &str) -> Report {
    let path = dir.join("reports").join(format!("{name}-{}.json", dir.file_name().unwrap().to_string_lossy()));
    Report::from_json(&std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn unknown_key_exits_with_config_code_and_suggestions() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vlfuse(tmp.path(), &["recipe.fusion.queries_per_encodr=4"], &["gen"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("recipe.fusion.queries_per_encoder"), "{err}");
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn gen_writes_scenes_and_histogram() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&vlfuse(tmp.path(), &[], &["gen"]));
    let dir = run_dir(tmp.path(), &[]);
    let r = report(&dir, "gen-s99");
    assert_eq!(r.metrics["scenes"], 32.0);
    let hist = &r.tables[0];
    assert_eq!(hist.rows.len(), 32);
    let total: usize = hist.rows.iter().map(|row| row[2].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 4 * 32);
    assert!(dir.join("config.toml").exists());
    assert!(!dir.join(".lock").exists());
}

#[test]
fn zero_step_pretrain_checkpoint_equals_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = ["recipe.pretrain.steps=0"];
    ok(&vlfuse(tmp.path(), &extra, &["pretrain"]));
    let dir = run_dir(tmp.path(), &extra);
    let (m, meta, seed) = load_model(&dir.join("checkpoints/pretrain-meq-s0")).unwrap();
    assert_eq!((seed, meta.config_hash.as_str()), (0, dir.file_name().unwrap().to_str().unwrap()));
    let cfg = resolve(None, &overrides(&extra)).unwrap();
    let fresh = Lab::new(cfg.recipe).unwrap().fresh(&Arm::Meq, 0).unwrap();
    assert_eq!(param_bytes(&m.store, ""), param_bytes(&fresh.store, ""));
    let r = report(&dir, "pretrain-meq-s0");
    assert_eq!(r.details["runs"][0]["steps"], 0);
}

#[test]
fn eval_twice_gives_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&vlfuse(tmp.path(), &[], &["finetune", "--task", "qa"]));
    let dir = run_dir(tmp.path(), &[]);
    let ckpt = dir.join("checkpoints/finetune-qa-meq-s0");
    let ckpt = ckpt.to_str().unwrap();
    let first = ok(&vlfuse(tmp.path(), &[], &["eval", "--checkpoint", ckpt]));
    let a = report(&dir, "eval-qa-meq-s0");
    ok(&vlfuse(tmp.path(), &[], &["eval", "--checkpoint", ckpt]));
    let b = report(&dir, "eval-qa-meq-s0");
    assert_eq!(a.stable_json(), b.stable_json());
    assert!(first.contains("accuracy"));
    let sum: f64 = ["e1", "e2", "e3"].iter().map(|e| a.metrics[&format!("s0.attribution.{e}")]).sum();
    assert!((sum - 1.0).abs() < 1e-6, "{sum}");
    assert!(a.metrics.contains_key("s0.qa_attribution.color_shape.e1"));
}

#[test]
fn checkpoint_of_another_shape_gives_a_shape_diff() {
    let tmp = tempfile::tempdir().unwrap();
    let other = ["recipe.fusion.queries_per_encoder=9"];
    ok(&vlfuse(tmp.path(), &other, &["pretrain"]));
    let ckpt = run_dir(tmp.path(), &other).join("checkpoints/pretrain-meq-s0");
    let o = vlfuse(tmp.path(), &[], &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("meq.queries") && err.contains("[27, 32]") && err.contains("[24, 32]"), "{err}");
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(tmp.path(), &[]);
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(".lock"), "1\n").unwrap();
    let o = vlfuse(tmp.path(), &[], &["gen"]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn artifacts_of_a_different_config_are_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(tmp.path(), &[]);
    std::fs::create_dir_all(&dir).unwrap();
    let foreign = resolve(None, &overrides(&["recipe.eval_seed=5"])).unwrap().to_toml();
    std::fs::write(dir.join("config.toml"), &foreign).unwrap();
    let o = vlfuse(tmp.path(), &[], &["gen"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert_eq!(std::fs::read_to_string(dir.join("config.toml")).unwrap(), foreign);
    assert!(!dir.join("reports").exists());
}

#[test]
fn gradcheck_passes_and_reports_every_module() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&vlfuse(tmp.path(), &[], &["gradcheck"]));
    let r = report(&run_dir(tmp.path(), &[]), "gradcheck-s0");
    let modules = r.metrics.keys().filter(|k| k.ends_with(".max_rel_error")).count();
    assert_eq!(modules, 13);
    assert_eq!(stdout.matches(" ok").count(), 13, "{stdout}");
    assert!(r.metrics.iter().filter(|(k, _)| k.ends_with(".max_rel_error")).all(|(_, v)| *v < 1e-4));
}

#[test]
fn run_all_produces_every_report_from_one_config() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&vlfuse(tmp.path(), &["plots=true"], &["run-all"]));
    let dir = run_dir(tmp.path(), &["plots=true"]);
    for name in [
        "gen-s99",
        "gradcheck-s0",
        "pretrain-meq-s0",
        "finetune-caption-meq-s0",
        "eval-caption-meq-s0",
        "finetune-qa-meq-s0",
        "eval-qa-meq-s0",
        "ablate-qa-s0",
        "compare-ensemble-s0",
    ] {
        let r = report(&dir, name);
        assert_eq!(r.config_hash, dir.file_name().unwrap().to_str().unwrap());
    }
    let ablate = report(&dir, "ablate-qa-s0");
    assert_eq!(ablate.metrics["s0.removal.mean_drop.m0"], 0.0);
    assert!(ablate.metrics.contains_key("grid.no-text-input.mean"));
    let plots: Vec<_> = std::fs::read_dir(dir.join("plots")).unwrap().collect();
    assert_eq!(plots.len(), 2);
    assert!(dir.join("tables").read_dir().unwrap().count() >= 5);
}
