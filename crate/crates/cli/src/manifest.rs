//! Run provenance, run-directory locking and stage logs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use maect::tuning::LogRow;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const CODE_VERSION: &str = concat!("maect-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_s: u64,
    pub elapsed_s: f64,
}

/// Everything needed to trace an artifact back to its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: String,
    pub config: Value,
    pub dataset_fingerprint: String,
    pub code_version: String,
    pub seed: u64,
    /// Run ids of the stages this one consumed.
    pub upstream: Vec<String>,
    pub timing: Timing,
}

/// Content hash of everything but the timing.
pub fn run_id(
    stage: &str,
    config: &Value,
    dataset_fingerprint: &str,
    seed: u64,
    upstream: &[String],
) -> String {
    let key = serde_json::json!({
        "stage": stage,
        "config": config,
        "dataset": dataset_fingerprint,
        "code": CODE_VERSION,
        "seed": seed,
        "upstream": upstream,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    hex::encode(&digest[..8])
}

impl RunManifest {
    pub fn new(
        stage: &str,
        config: Value,
        dataset_fingerprint: String,
        seed: u64,
        upstream: Vec<String>,
        clock: &Clock,
    ) -> Self {
        RunManifest {
            run_id: run_id(stage, &config, &dataset_fingerprint, seed, &upstream),
            stage: stage.to_string(),
            config,
            dataset_fingerprint,
            code_version: CODE_VERSION.to_string(),
            seed,
            upstream,
            timing: clock.timing(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        fs::write(Self::path(dir), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let p = Self::path(dir);
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The manifest minus wall-clock fields.
    pub fn without_timing(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("manifest serialises");
        v.as_object_mut().expect("object").remove("timing");
        v
    }
}

pub struct Clock {
    started_unix_s: u64,
    start: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Clock {
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            start: Instant::now(),
        }
    }

    pub fn timing(&self) -> Timing {
        Timing {
            started_unix_s: self.started_unix_s,
            elapsed_s: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "run directory {} is in use by another process (remove {} if it is stale)",
                out.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

const LOG_HEADER: &str = "epoch,step,lr,loss,queue_fill";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.step, r.lr, loss, r.queue_fill
        ));
    }
    s
}

pub fn parse_log_csv(text: &str) -> anyhow::Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        bail!("log does not start with `{LOG_HEADER}`");
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            bail!("log line {} has {} fields", i + 2, f.len());
        }
        let bad = |what: &str| anyhow::anyhow!("log line {}: bad {what}", i + 2);
        rows.push(LogRow {
            epoch: f[0].parse().map_err(|_| bad("epoch"))?,
            step: f[1].parse().map_err(|_| bad("step"))?,
            lr: f[2].parse().map_err(|_| bad("lr"))?,
            loss: if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse().map_err(|_| bad("loss"))?)
            },
            queue_fill: f[4].parse().map_err(|_| bad("queue_fill"))?,
        });
    }
    Ok(rows)
}
