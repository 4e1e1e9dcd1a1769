//! Metrics report and loss/lr curves assembled from a run directory.
//! Nothing time-dependent goes in, so re-exporting is byte-identical.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use maect::eval::Source;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::manifest::{parse_log_csv, RunManifest};
use crate::run::{source_of, Metrics, LOG, METRICS};

pub const REPORT: &str = "report.json";
pub const CURVES: &str = "curves.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub complete: bool,
    pub warnings: Vec<String>,
    pub run_id: String,
    pub from: String,
    pub source: Source,
    pub metrics: Metrics,
    pub config: Value,
    /// Manifests of every stage behind the metrics, oldest first, without
    /// timing.
    pub provenance: Vec<Value>,
}

/// Training stages behind a checkpoint stage, oldest first.
pub fn lineage(from: &str) -> anyhow::Result<Vec<&'static str>> {
    Ok(match from {
        "pretrain" => vec!["pretrain"],
        "ct" => vec!["pretrain", "head_init", "ct"],
        "ct_skip_init" => vec!["pretrain", "ct_skip_init"],
        other => bail!("no lineage for stage `{other}`"),
    })
}

fn expected_epochs(m: &RunManifest) -> Option<usize> {
    m.config
        .get("stage")?
        .get("epochs")?
        .as_u64()
        .map(|e| e as usize)
}

/// Writes `eval/<from>/report.json` and `curves.csv`. Missing or short
/// stage logs mark the report incomplete rather than failing.
pub fn export_report(out: &Path, from: &str) -> anyhow::Result<Report> {
    let edir = out.join("eval").join(from);
    let em = RunManifest::load(&edir)?;
    let mpath = edir.join(METRICS);
    let metrics: Metrics = serde_json::from_str(
        &fs::read_to_string(&mpath).with_context(|| format!("reading {}", mpath.display()))?,
    )?;
    let mut warnings = Vec::new();
    let mut provenance = Vec::new();
    let mut curves = String::from("stage,epoch,step,lr,loss,queue_fill\n");
    let mut ids = Vec::new();
    for stage in lineage(from)? {
        let dir = out.join(stage);
        let m = match RunManifest::load(&dir) {
            Ok(m) => m,
            Err(_) => {
                warnings.push(format!("stage `{stage}` has no manifest"));
                continue;
            }
        };
        for up in &m.upstream {
            if !ids.contains(up) {
                warnings.push(format!(
                    "stage `{stage}` consumed run {up}, which is not in this directory"
                ));
            }
        }
        ids.push(m.run_id.clone());
        match fs::read_to_string(dir.join(LOG))
            .map_err(anyhow::Error::from)
            .and_then(|t| parse_log_csv(&t))
        {
            Ok(rows) => {
                if let Some(e) = expected_epochs(&m) {
                    if rows.len() != e {
                        warnings.push(format!(
                            "stage `{stage}` log has {} of {e} epochs",
                            rows.len()
                        ));
                    }
                }
                for r in rows {
                    let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
                    curves.push_str(&format!(
                        "{stage},{},{},{},{loss},{}\n",
                        r.epoch, r.step, r.lr, r.queue_fill
                    ));
                }
            }
            Err(e) => warnings.push(format!("stage `{stage}` log unreadable: {e}")),
        }
        provenance.push(m.without_timing());
    }
    if em.upstream.last() != ids.last() {
        warnings.push(format!(
            "evaluation was computed on a different `{from}` run"
        ));
    }
    let absent: Vec<&str> = [
        ("knn_accuracy", metrics.knn_accuracy.is_none()),
        ("linear_probe", metrics.linear_probe.is_none()),
        ("lowshot", metrics.lowshot.is_none()),
        ("cluster", metrics.cluster.is_none()),
        (
            "effective_invariance",
            metrics.effective_invariance.is_none(),
        ),
        ("histogram_error", metrics.histogram_error.is_none()),
    ]
    .into_iter()
    .filter_map(|(k, missing)| missing.then_some(k))
    .collect();
    if !absent.is_empty() {
        warnings.push(format!("metrics missing: {}", absent.join(", ")));
    }
    provenance.push(em.without_timing());
    let report = Report {
        complete: warnings.is_empty(),
        warnings,
        run_id: em.run_id.clone(),
        from: from.to_string(),
        source: source_of(from),
        metrics,
        config: em.config.clone(),
        provenance,
    };
    fs::write(
        edir.join(REPORT),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    fs::write(edir.join(CURVES), curves)?;
    Ok(report)
}
