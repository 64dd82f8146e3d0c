//! The experiment commands. Each one writes a Report (plus CSV tables and,
//! when enabled, SVG figures) into the run directory and returns it.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use vlfuse::fusion::{count_trainable_params, Bridge};
use vlfuse::harness::*;
use vlfuse::synth::{write_scenes, Attribute, ATTRIBUTES, VALUES};

use crate::artifacts::RunDir;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::plot;

/// One command invocation: resolved config, its run directory and a lab
/// that caches trained models across the stages of `run-all`.
pub struct Session {
    pub cfg: RunConfig,
    pub dir: RunDir,
    pub lab: Lab,
    /// Reports written so far, with their paths.
    pub written: Vec<PathBuf>,
}

fn f(x: f64) -> String {
    format!("{x:.6}")
}

pub fn parse_arm(s: &str) -> CliResult<Arm> {
    Ok(match s {
        "meq" => Arm::Meq,
        "ensemble" => Arm::Ensemble,
        "no-dropout" => Arm::NoDropout,
        "no-text-input" => Arm::NoTextInput,
        "small-lm" => Arm::SmallLm,
        _ => match s.strip_prefix("single-") {
            Some(id) if !id.is_empty() => Arm::Single(id.to_string()),
            _ => {
                return Err(CliError::Config(format!(
                    "unknown arm `{s}`; expected meq, ensemble, single-<encoder>, no-dropout, no-text-input or small-lm"
                )))
            }
        },
    })
}

pub fn parse_task(s: &str) -> CliResult<Task> {
    match s {
        "caption" => Ok(Task::Caption),
        "qa" => Ok(Task::Qa),
        _ => Err(CliError::Config(format!("unknown task `{s}`; expected caption or qa"))),
    }
}

/// `fusion-only`, `fusion-lm`, `lora` (rank 8) or `lora:<rank>`.
pub fn parse_trainable(s: &str) -> CliResult<TrainableSet> {
    match s {
        "fusion-only" => Ok(TrainableSet::FusionOnly),
        "fusion-lm" => Ok(TrainableSet::FusionLm),
        "lora" => Ok(TrainableSet::FusionLora { rank: LORA_RANK }),
        _ => s
            .strip_prefix("lora:")
            .and_then(|r| r.parse().ok())
            .map(|rank| TrainableSet::FusionLora { rank })
            .ok_or_else(|| CliError::Config(format!("unknown trainable set `{s}`"))),
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Caption => "caption",
        Task::Qa => "qa",
    }
}

impl Session {
    pub fn open(cfg: RunConfig, out_root: &Path) -> CliResult<Self> {
        let dir = RunDir::open(out_root, &cfg)?;
        let lab = Lab::new(cfg.recipe.clone())?;
        Ok(Self {
            cfg,
            dir,
            lab,
            written: Vec::new(),
        })
    }

    fn report(&self, experiment: &str, seeds: &[u64]) -> Report {
        let config = serde_json::to_value(&self.cfg).expect("config serializes");
        Report::new(experiment, config, &self.dir.hash, seeds)
    }

    fn finish(&mut self, mut r: Report, started: Instant) -> CliResult<Report> {
        r.wall_clock_s = started.elapsed().as_secs_f64();
        r.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let path = self.dir.write_report(&r)?;
        println!("report: {}", path.display());
        self.written.push(path);
        Ok(r)
    }

    fn plot(&self, name: &str, seeds: &[u64], svg: String) -> CliResult<()> {
        if self.cfg.plots {
            self.dir.write_text(&self.dir.plot_path(name, seeds), &svg)?;
        }
        Ok(())
    }

    fn runs_since(&self, start: usize) -> Vec<RunRecord> {
        self.lab.runs[start..].to_vec()
    }

    /// Load a checkpoint and check it against the arm's configuration.
    fn load_checked(&self, arm: &Arm, path: &Path) -> CliResult<(Model, u64)> {
        let (model, _, seed) = load_model(path)?;
        let (bridge, mut lm) = self.lab.arm_config(arm)?;
        lm.lora = model.lm.lora.clone();
        let reference = reference_store(&bridge, &lm, &self.cfg.recipe.encoders)?;
        vlfuse::checkpoint::check_shapes(&model.store, &reference)?;
        let specs: Vec<_> = model.encoders.iter().map(|e| e.spec.clone()).collect();
        if specs != self.cfg.recipe.encoders {
            return Err(vlfuse::Error::Checkpoint("checkpoint encoders differ from recipe.encoders".into()).into());
        }
        Ok((model, seed))
    }
}

fn loss_table(runs: &[RunRecord]) -> Table {
    Table {
        name: "losses".into(),
        header: ["run", "seed", "step", "loss"].map(String::from).to_vec(),
        rows: runs
            .iter()
            .flat_map(|r| {
                r.losses
                    .iter()
                    .enumerate()
                    .map(move |(i, l)| vec![r.label.clone(), r.seed.to_string(), i.to_string(), f(*l)])
            })
            .collect(),
    }
}

fn record_runs(r: &mut Report, runs: &[RunRecord]) -> CliResult<()> {
    let summary: Vec<serde_json::Value> = runs
        .iter()
        .map(|x| {
            serde_json::json!({
                "label": x.label, "seed": x.seed, "steps": x.steps,
                "first_loss": x.first_loss, "last_loss": x.last_loss,
                "trainable_params": x.trainable_params, "moved": x.moved,
            })
        })
        .collect();
    r.detail("runs", &summary)?;
    r.tables.push(loss_table(runs));
    Ok(())
}

/// Write the evaluation scenes and their value histogram.
pub fn gen(s: &mut Session) -> CliResult<Report> {
    let t = Instant::now();
    let seeds = [s.cfg.recipe.eval_seed];
    let mut r = s.report("gen", &seeds);
    let scenes = &s.lab.eval_set.scenes;
    let path = s.dir.root.join("data").join(format!("eval-scenes-{}.txt", s.dir.hash));
    let mut buf = Vec::new();
    write_scenes(&mut buf, scenes)?;
    s.dir.write_text(&path, std::str::from_utf8(&buf).expect("scene text is UTF-8"))?;
    let mut rows = Vec::new();
    for a in ATTRIBUTES {
        for v in 0..VALUES {
            let n = scenes.iter().filter(|sc| sc.value(a) == v).count();
            rows.push(vec![a.name().to_string(), v.to_string(), n.to_string()]);
        }
    }
    r.metric("scenes", scenes.len() as f64);
    r.detail("scene_file", &path.file_name().map(|n| n.to_string_lossy().to_string()))?;
    r.tables.push(Table {
        name: "histogram".into(),
        header: ["attribute", "value", "count"].map(String::from).to_vec(),
        rows,
    });
    println!("gen: {} scenes -> {}", scenes.len(), path.display());
    s.finish(r, t)
}

pub fn pretrain(s: &mut Session, arm: &Arm) -> CliResult<Report> {
    let t = Instant::now();
    let seeds = s.cfg.seeds.clone();
    let mut r = s.report(&format!("pretrain-{}", arm.label()), &seeds);
    let start = s.lab.runs.len();
    for &seed in &seeds {
        let m = s.lab.pretrained(arm, seed)?.clone();
        let dir = s.dir.save_model(&m, &format!("pretrain-{}", arm.label()), seed)?;
        r.param_tables.insert(format!("s{seed}"), count_trainable_params(&m.store));
        println!("pretrain {} seed {seed}: checkpoint {}", arm.label(), dir.display());
    }
    let runs = s.runs_since(start);
    for x in &runs {
        if let (Some(a), Some(b)) = (x.first_loss, x.last_loss) {
            r.metric(&format!("{}.s{}.first_loss", x.label, x.seed), a);
            r.metric(&format!("{}.s{}.last_loss", x.label, x.seed), b);
        }
    }
    record_runs(&mut r, &runs)?;
    s.finish(r, t)
}

pub fn finetune(
    s: &mut Session,
    arm: &Arm,
    task: Task,
    trainable: Option<TrainableSet>,
    checkpoint: Option<&Path>,
) -> CliResult<Report> {
    let t = Instant::now();
    let trainable = trainable.unwrap_or(match task {
        Task::Caption => s.cfg.recipe.caption_finetune.trainable,
        Task::Qa => s.cfg.recipe.qa_finetune.trainable,
    });
    let seeds = match checkpoint {
        Some(p) => {
            let (m, seed) = s.load_checked(arm, p)?;
            s.lab.insert_pretrained(arm, seed, m)?;
            vec![seed]
        }
        None => s.cfg.seeds.clone(),
    };
    let name = format!("finetune-{}-{}", task_name(task), arm.label());
    let mut r = s.report(&name, &seeds);
    r.detail("trainable_set", &trainable)?;
    let start = s.lab.runs.len();
    for &seed in &seeds {
        let m = s.lab.finetuned(arm, seed, task, trainable)?.clone();
        let dir = s.dir.save_model(&m, &name, seed)?;
        r.param_tables.insert(format!("s{seed}"), count_trainable_params(&m.store));
        println!("{name} seed {seed}: checkpoint {}", dir.display());
    }
    let runs = s.runs_since(start);
    for x in runs.iter().filter(|x| x.label.starts_with("finetune/")) {
        r.metric(&format!("s{}.last_loss", x.seed), x.last_loss.unwrap_or(f64::NAN));
        r.metric(&format!("s{}.moved_tensors", x.seed), x.moved.len() as f64);
        r.metric(&format!("s{}.trainable_params", x.seed), x.trainable_params as f64);
    }
    record_runs(&mut r, &runs)?;
    s.finish(r, t)
}

fn put_eval(r: &mut Report, prefix: &str, e: &EvalResult, ids: &[String]) {
    r.metric(&format!("{prefix}.accuracy"), e.accuracy);
    r.metric(&format!("{prefix}.loss"), e.loss);
    if let Some(x) = e.exact_match {
        r.metric(&format!("{prefix}.exact_match"), x);
    }
    for (k, v) in &e.per_attribute {
        r.metric(&format!("{prefix}.per_attribute.{k}"), *v);
    }
    if let Some(a) = &e.attribution {
        for (id, v) in ids.iter().zip(a) {
            r.metric(&format!("{prefix}.attribution.{id}"), *v);
        }
    }
}

pub fn eval(s: &mut Session, arm: &Arm, task: Task, checkpoint: Option<&Path>) -> CliResult<Report> {
    let t = Instant::now();
    let models: Vec<(u64, Model)> = match checkpoint {
        Some(p) => vec![{
            let (m, seed) = s.load_checked(arm, p)?;
            (seed, m)
        }],
        None => s
            .cfg
            .seeds
            .clone()
            .into_iter()
            .map(|seed| Ok((seed, s.lab.default_finetuned(arm, seed, task)?.clone())))
            .collect::<CliResult<_>>()?,
    };
    let seeds: Vec<u64> = models.iter().map(|(s, _)| *s).collect();
    let mut r = s.report(&format!("eval-{}-{}", task_name(task), arm.label()), &seeds);
    let ids = s.cfg.recipe.fusion.encoder_ids.clone();
    let multi = matches!(s.lab.arm_config(arm)?.0, Bridge::Meq { ref cfg, .. } if cfg.k() > 1);
    let mut attr_rows = Vec::new();
    for (seed, m) in &models {
        let opts = EvalOptions {
            attribution: multi,
            ..s.cfg.recipe.eval_options()
        };
        let e = evaluate(m, &s.lab.eval_set, task, &opts)?;
        put_eval(&mut r, &format!("s{seed}"), &e, &ids);
        println!("eval {} {} seed {seed}: accuracy {:.4}", arm.label(), task_name(task), e.accuracy);
        if multi {
            for (group, attrs) in [
                ("color_shape", vec![Attribute::Color, Attribute::Shape]),
                ("count_position", vec![Attribute::Count, Attribute::Position]),
            ] {
                let a = attribution_scores(
                    m,
                    &s.lab.eval_set,
                    Task::Qa,
                    &EvalOptions {
                        attributes: attrs,
                        ..s.cfg.recipe.eval_options()
                    },
                )?;
                for (id, v) in ids.iter().zip(&a) {
                    r.metric(&format!("s{seed}.qa_attribution.{group}.{id}"), *v);
                }
                let mut row = vec![seed.to_string(), group.to_string()];
                row.extend(a.iter().map(|x| f(*x)));
                attr_rows.push(row);
            }
        }
        r.param_tables.insert(format!("s{seed}"), count_trainable_params(&m.store));
        r.detail(&format!("s{seed}"), &e)?;
    }
    if multi {
        let mut header = vec!["seed".to_string(), "questions".into()];
        header.extend(ids.iter().cloned());
        let labels = ids.clone();
        let series: Vec<(String, Vec<f64>)> = attr_rows
            .iter()
            .map(|row| (format!("s{} {}", row[0], row[1]), row[2..].iter().map(|x| x.parse().unwrap_or(0.0)).collect()))
            .collect();
        s.plot(&format!("attribution-{}", arm.label()), &seeds, plot::bars("QA attribution per encoder", "attention mass", &labels, &series))?;
        r.tables.push(Table {
            name: "attribution".into(),
            header,
            rows: attr_rows,
        });
    }
    s.finish(r, t)
}

pub fn ablate(s: &mut Session, task: Task, checkpoint: Option<&Path>) -> CliResult<Report> {
    let t = Instant::now();
    let models: Vec<(u64, Model)> = match checkpoint {
        Some(p) => vec![{
            let (m, seed) = s.load_checked(&Arm::Meq, p)?;
            (seed, m)
        }],
        None => s
            .cfg
            .seeds
            .clone()
            .into_iter()
            .map(|seed| Ok((seed, s.lab.default_finetuned(&Arm::Meq, seed, task)?.clone())))
            .collect::<CliResult<_>>()?,
    };
    let seeds: Vec<u64> = models.iter().map(|(s, _)| *s).collect();
    let mut r = s.report(&format!("ablate-{}", task_name(task)), &seeds);
    let subset = EvalSet {
        scenes: s.lab.eval_set.scenes[..s.cfg.removal_scenes].to_vec(),
        noise_seed: s.lab.eval_set.noise_seed,
    };
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (seed, m) in &models {
        let c = removal_sweep(m, &subset, task, &s.cfg.recipe.eval_options())?;
        for (k, d) in c.mean_drop.iter().enumerate() {
            r.metric(&format!("s{seed}.removal.mean_drop.m{k}"), *d);
        }
        println!("removal sweep seed {seed}: mean drop {:?}", c.mean_drop);
        for row in &c.rows {
            rows.push(vec![
                seed.to_string(),
                row.removed.join("+"),
                row.removed.len().to_string(),
                f(row.accuracy),
                f(row.drop),
            ]);
        }
        series.push((format!("seed {seed}"), c.mean_drop.clone()));
        r.detail(&format!("s{seed}.removal"), &c)?;
    }
    r.tables.push(Table {
        name: "removal".into(),
        header: ["seed", "removed", "m", "accuracy", "drop"].map(String::from).to_vec(),
        rows,
    });
    s.plot("removal", &seeds, plot::lines("Mean metric drop by encoders removed", "drop", &series))?;
    if !s.cfg.ablations.is_empty() {
        let grid_seeds = s.cfg.seeds.clone();
        let ablations = s.cfg.ablations.clone();
        let g = ablation_grid(&mut s.lab, &grid_seeds, &ablations)?;
        r.metric("grid.base.mean", g.base.iter().sum::<f64>() / g.base.len() as f64);
        for row in &g.rows {
            for v in &row.variants {
                r.metric(&format!("grid.{}.mean", v.label), v.mean);
                r.metric(&format!("grid.{}.delta", v.label), v.delta_vs_base);
            }
        }
        println!("ablation grid:");
        for row in g.table().rows {
            println!("  {}", row.join(" | "));
        }
        r.tables.push(g.table());
        r.detail("grid", &g)?;
    }
    s.finish(r, t)
}

pub fn compare_ensemble(s: &mut Session) -> CliResult<Report> {
    let t = Instant::now();
    let seeds = s.cfg.seeds.clone();
    let mut r = s.report("compare-ensemble", &seeds);
    let spec = fusion_vs_specialists(&mut s.lab, &seeds)?;
    let ens = vlfuse::harness::compare_ensemble(&mut s.lab, &seeds)?;
    r.metric("specialists.min_margin", spec.min_margin);
    r.metric("ensemble.param_ratio", ens.param_ratio);
    r.metric("ensemble.meq_resampler_params", ens.meq_resampler_params as f64);
    r.metric("ensemble.ensemble_resampler_params", ens.ensemble_resampler_params as f64);
    for row in &ens.rows {
        r.metric(&format!("ensemble.s{}.meq", row.seed), row.meq);
        r.metric(&format!("ensemble.s{}.ensemble", row.seed), row.ensemble);
    }
    for row in &spec.rows {
        r.metric(&format!("specialists.s{}.fused", row.seed), row.fused);
        r.metric(&format!("specialists.s{}.best_single", row.seed), row.best_single);
    }
    println!(
        "fused vs best single: min margin {:.4}; MEQ/ensemble resampler params {} / {} = {:.3}",
        spec.min_margin, ens.meq_resampler_params, ens.ensemble_resampler_params, ens.param_ratio
    );
    r.tables.push(spec.table());
    r.tables.push(ens.table());
    r.detail("specialists", &spec)?;
    r.detail("ensemble", &ens)?;
    s.finish(r, t)
}

pub fn gradcheck(s: &mut Session) -> CliResult<Report> {
    let t = Instant::now();
    let seeds = s.cfg.gradcheck_seeds.clone();
    let mut r = s.report("gradcheck", &seeds);
    let rows = gradient_audit(&seeds)?;
    let mut table = Vec::new();
    let mut failed = Vec::new();
    let mut modules: Vec<String> = rows.iter().map(|x| x.module.clone()).collect();
    modules.dedup();
    for m in &modules {
        let worst = rows
            .iter()
            .filter(|x| &x.module == m)
            .map(|x| x.report.max_rel_error)
            .fold(0.0f64, f64::max);
        let pass = rows.iter().filter(|x| &x.module == m).all(|x| x.report.pass);
        println!("{m:<40} max rel err {worst:.3e} {}", if pass { "ok" } else { "FAIL" });
        r.metric(&format!("{m}.max_rel_error"), worst);
        if !pass {
            failed.push(m.clone());
        }
    }
    for x in &rows {
        table.push(vec![
            x.module.clone(),
            x.seed.to_string(),
            x.report.checked.to_string(),
            format!("{:.3e}", x.report.max_rel_error),
            x.report.pass.to_string(),
        ]);
    }
    r.metric("tolerance", AUDIT_TOL);
    r.metric("epsilon", AUDIT_EPS);
    r.tables.push(Table {
        name: "audit".into(),
        header: ["module", "seed", "checked", "max_rel_error", "pass"].map(String::from).to_vec(),
        rows: table,
    });
    let r = s.finish(r, t)?;
    if failed.is_empty() {
        Ok(r)
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Every stage from one config: data, training, evaluation, analyses.
pub fn run_all(s: &mut Session) -> CliResult<Vec<Report>> {
    let mut out = vec![gen(s)?, gradcheck(s)?, pretrain(s, &Arm::Meq)?];
    for task in [Task::Caption, Task::Qa] {
        out.push(finetune(s, &Arm::Meq, task, None, None)?);
        out.push(eval(s, &Arm::Meq, task, None)?);
    }
    out.push(ablate(s, Task::Qa, None)?);
    out.push(compare_ensemble(s)?);
    Ok(out)
}
