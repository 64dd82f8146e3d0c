//! Run directories. Everything a command writes lives under
//! `<out>/<config hash>/` and carries the hash in its name or manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use vlfuse::checkpoint::read_manifest;
use vlfuse::harness::{save_model, Model, ModelMeta, Report, Table};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.toml";

/// Removes the lock file when dropped.
#[derive(Debug)]
struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub hash: String,
    _lock: Lock,
}

pub fn seeds_tag(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join("-")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl RunDir {
    /// Create or reopen the directory of `cfg` and take its lock.
    pub fn open(out_root: &Path, cfg: &RunConfig) -> CliResult<Self> {
        let hash = cfg.hash();
        let root = out_root.join(&hash);
        fs::create_dir_all(&root)?;
        let lock_path = root.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Locked(format!(
                    "{} is locked by another run; delete the file if that run is gone",
                    lock_path.display()
                ))
            } else {
                CliError::Io(e)
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        let lock = Lock(lock_path);
        let config_path = root.join(CONFIG_FILE);
        if config_path.exists() {
            let existing = crate::config::resolve(Some(&fs::read_to_string(&config_path)?), &[])?;
            if existing.hash() != hash {
                return Err(CliError::Config(format!(
                    "{} holds config {} not {hash}; refusing to overwrite",
                    config_path.display(),
                    existing.hash()
                )));
            }
        } else {
            write_atomic(&config_path, cfg.to_toml().as_bytes())?;
        }
        Ok(Self { root, hash, _lock: lock })
    }

    pub fn report_path(&self, experiment: &str, seeds: &[u64]) -> PathBuf {
        self.root
            .join("reports")
            .join(format!("{experiment}-s{}-{}.json", seeds_tag(seeds), self.hash))
    }

    pub fn table_path(&self, experiment: &str, table: &str, seeds: &[u64]) -> PathBuf {
        self.root
            .join("tables")
            .join(format!("{experiment}-{table}-s{}-{}.csv", seeds_tag(seeds), self.hash))
    }

    pub fn plot_path(&self, name: &str, seeds: &[u64]) -> PathBuf {
        self.root
            .join("plots")
            .join(format!("{name}-s{}-{}.svg", seeds_tag(seeds), self.hash))
    }

    pub fn checkpoint_path(&self, name: &str, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}-s{seed}"))
    }

    /// Write the report and one CSV per table. An existing report from a
    /// different config is never replaced.
    pub fn write_report(&self, report: &Report) -> CliResult<PathBuf> {
        let path = self.report_path(&report.experiment, &report.seeds);
        if path.exists() {
            let old = Report::from_json(&fs::read_to_string(&path)?)?;
            if old.config_hash != report.config_hash {
                return Err(CliError::Config(format!(
                    "{} belongs to config {}; refusing to overwrite",
                    path.display(),
                    old.config_hash
                )));
            }
        }
        write_atomic(&path, (report.to_json() + "\n").as_bytes())?;
        for t in &report.tables {
            write_table(&self.table_path(&report.experiment, &t.name, &report.seeds), t)?;
        }
        Ok(path)
    }

    pub fn save_model(&self, model: &Model, name: &str, seed: u64) -> CliResult<PathBuf> {
        let dir = self.checkpoint_path(name, seed);
        if dir.exists() {
            let m = read_manifest(&dir)?;
            let meta: Option<ModelMeta> = serde_json::from_value(m.config).ok();
            if meta.map(|m| m.config_hash) != Some(self.hash.clone()) {
                return Err(CliError::Config(format!(
                    "{} holds a checkpoint of another config; refusing to overwrite",
                    dir.display()
                )));
            }
        }
        save_model(model, &dir, &self.hash, seed)?;
        Ok(dir)
    }

    pub fn write_text(&self, path: &Path, text: &str) -> CliResult<()> {
        write_atomic(path, text.as_bytes())
    }
}

pub fn write_table(path: &Path, t: &Table) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&t.header)?;
    for r in &t.rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}
