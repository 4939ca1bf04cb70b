//! Per-run log written next to the primary output as `<out>.log`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct RunLog {
    command: String,
    started: Instant,
    config: Vec<(&'static str, String)>,
    seed: u64,
    inputs: Vec<(String, String)>,
    notes: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

impl RunLog {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            config: cfg.entries(),
            seed: cfg.seed,
            inputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Records an input file with its digest.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.push((path.display().to_string(), digest));
        Ok(())
    }

    pub fn inputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
        for p in paths {
            self.input(p)?;
        }
        Ok(())
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command\t{}", self.command);
        let _ = writeln!(s, "seed\t{}", self.seed);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config\t{k}={v}");
        }
        let mut inputs = self.inputs.clone();
        inputs.sort();
        inputs.dedup();
        for (p, d) in &inputs {
            let _ = writeln!(s, "input\t{p}\tsha256={d}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        let _ = writeln!(s, "wall_time_s\t{:.3}", self.started.elapsed().as_secs_f64());
        s
    }

    pub fn finish(&self, out: &Path) -> Result<()> {
        let p = log_path(out);
        std::fs::write(&p, self.render()).with_context(|| format!("writing {}", p.display()))
    }
}
