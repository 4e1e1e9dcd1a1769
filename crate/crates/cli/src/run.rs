//! One stage per invocation, reading and writing `<out>/<stage>/`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use maect::eval::{
    cluster_accuracy, color_histogram_target, encode_images, extract_embeddings, histogram_probe,
    kmeans, knn_classify, linear_probe, logistic_regression_lowshot, nmi_ami_ari,
    probe_effective_invariance, silhouette, standardize, EiTransform, EmbeddingSet, LinearProbe,
    Source,
};
use maect::io::{save_dataset, Checkpoint};
use maect::mae::mae_pretrain;
use maect::nnclr::Head;
use maect::tuning::{contrastive_tune, init_head, LogRow, StageConfig};
use maect::{Dataset, Params};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::manifest::{log_csv, Clock, RunLock, RunManifest};
use crate::report::export_report;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    HeadInit,
    Ct,
    Eval,
    ProbeHist,
    Cluster,
    Ei,
    Report,
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub skip_init: bool,
    pub mask_ratio: Option<f64>,
    pub combined: bool,
    pub lambda: Option<f64>,
    pub detached: bool,
    /// Checkpoint stage an evaluation reads.
    pub from: Option<String>,
    pub quiet: bool,
}

/// What a successful invocation produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub dir: PathBuf,
    pub run_id: String,
    pub warnings: Vec<String>,
}

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOG: &str = "log.csv";
pub const METRICS: &str = "metrics.json";
/// k-NN confusion matrix of the test split, rows are true classes.
pub const CONFUSION: &str = "confusion.csv";
pub const TRAIN_STAGES: [&str; 4] = ["pretrain", "head_init", "ct", "ct_skip_init"];

fn cli_name(stage: &str) -> String {
    stage.replace('_', "-")
}

/// Directory of a stage that must already have produced a checkpoint.
fn prerequisite(out: &Path, stage: &str, hint: &str) -> anyhow::Result<PathBuf> {
    let dir = out.join(stage);
    if !dir.join(CHECKPOINT).is_file() || !RunManifest::path(&dir).is_file() {
        bail!(
            "missing prerequisite stage `{}`: no checkpoint in {}; {hint}",
            cli_name(stage),
            dir.display()
        );
    }
    Ok(dir)
}

pub fn dataset_fingerprint(train: &Dataset, test: &Dataset) -> String {
    let d = Sha256::digest(format!("{}:{}", train.fingerprint(), test.fingerprint()).as_bytes());
    hex::encode(&d[..16])
}

fn stage_config(base: &StageConfig, args: &RunArgs, stage: &str) -> anyhow::Result<StageConfig> {
    let mut c = base.clone();
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(r) = args.mask_ratio {
        c.mask_ratio = r;
    }
    let pretrain_only = args.combined || args.lambda.is_some() || args.detached;
    if pretrain_only && stage != "pretrain" {
        bail!("--combined, --lambda and --detached apply to pretrain only");
    }
    if args.skip_init && stage != "ct" {
        bail!("--skip-init applies to ct only");
    }
    c.combined |= args.combined;
    c.detached |= args.detached;
    if let Some(l) = args.lambda {
        c.lambda = l;
    }
    c.skip_init |= args.skip_init;
    let problems = c.validate();
    if !problems.is_empty() {
        bail!("invalid {stage} settings:\n  - {}", problems.join("\n  - "));
    }
    Ok(c)
}

fn progress(quiet: bool, stage: &str) -> impl FnMut(&LogRow) + '_ {
    move |r: &LogRow| {
        if !quiet {
            match r.loss {
                Some(l) => eprintln!(
                    "[{stage}] epoch {} step {} lr {:.3e} loss {l:.5}",
                    r.epoch, r.step, r.lr
                ),
                None => eprintln!("[{stage}] epoch {} step {} queue warm-up", r.epoch, r.step),
            }
        }
    }
}

fn head_tensors(head: &Head, into: &mut Params) {
    into.merge_prefixed("head.", &head.params);
    into.merge_prefixed("head_buffers.", &head.buffers);
}

fn load_head(ckpt: &Checkpoint, cfg: &RunConfig) -> anyhow::Result<Head> {
    let params = ckpt.tensors.strip_prefix("head.");
    params.check_shapes(&cfg.head.param_shapes())?;
    let buffers = ckpt.tensors.strip_prefix("head_buffers.");
    Ok(Head {
        config: cfg.head.clone(),
        params,
        buffers,
    })
}

fn load_encoder(ckpt: &Checkpoint, cfg: &RunConfig) -> anyhow::Result<Params> {
    let enc = ckpt.tensors.strip_prefix("encoder.");
    enc.check_shapes(&cfg.model.param_shapes())
        .context("checkpoint encoder does not match [model]")?;
    Ok(enc)
}

struct Written {
    dir: PathBuf,
    manifest: RunManifest,
}

#[allow(clippy::too_many_arguments)]
fn write_stage(
    out: &Path,
    stage: &str,
    config: Value,
    fingerprint: String,
    seed: u64,
    upstream: Vec<String>,
    tensors: Params,
    log: &[LogRow],
    clock: &Clock,
) -> anyhow::Result<Written> {
    let dir = out.join(stage);
    fs::create_dir_all(&dir)?;
    let manifest = RunManifest::new(stage, config, fingerprint, seed, upstream, clock);
    let meta = json!({ "run_id": manifest.run_id });
    Checkpoint::new(stage, meta, tensors).save(&dir.join(CHECKPOINT))?;
    fs::write(dir.join(LOG), log_csv(log))?;
    manifest.save(&dir)?;
    Ok(Written { dir, manifest })
}

fn check_dataset(dir: &Path, fingerprint: &str) -> anyhow::Result<RunManifest> {
    let m = RunManifest::load(dir)?;
    if m.dataset_fingerprint != fingerprint {
        bail!(
            "stage `{}` was trained on dataset {} but the config resolves to {fingerprint}",
            cli_name(&m.stage),
            m.dataset_fingerprint
        );
    }
    Ok(m)
}

/// Runs one subcommand. Holds `<out>/.lock` throughout.
pub fn run(cmd: Command, args: &RunArgs) -> anyhow::Result<Outcome> {
    let cfg = RunConfig::load(&args.config)?;
    let _lock = RunLock::acquire(&args.out)?;
    let clock = Clock::start();
    let base = args.config.parent().map(Path::to_path_buf);
    let out = args.out.as_path();
    if cmd == Command::Report {
        let from = eval_source(out, args)?;
        let rep = export_report(out, &from)?;
        return Ok(Outcome {
            dir: out.join("eval").join(&from),
            run_id: rep.run_id,
            warnings: rep.warnings,
        });
    }
    let (train, test) = cfg.datasets(base.as_deref())?;
    let fp = dataset_fingerprint(&train, &test);
    match cmd {
        Command::GenData => {
            let dir = out.join("data");
            fs::create_dir_all(&dir)?;
            save_dataset(&dir.join("train.bin"), &train)?;
            save_dataset(&dir.join("test.bin"), &test)?;
            let m = RunManifest::new(
                "data",
                json!({ "data": cfg.data }),
                fp,
                cfg.data.toy_seed,
                vec![],
                &clock,
            );
            m.save(&dir)?;
            Ok(Outcome {
                dir,
                run_id: m.run_id,
                warnings: vec![],
            })
        }
        Command::Pretrain => {
            let sc = stage_config(&cfg.pretrain, args, "pretrain")?;
            let res = mae_pretrain(
                &cfg.model,
                &cfg.decoder,
                &cfg.head,
                &sc,
                &train,
                progress(args.quiet, "pretrain"),
            )?;
            let mut t = Params::new();
            t.merge_prefixed("encoder.", &res.encoder);
            t.merge_prefixed("decoder.", &res.decoder);
            if let Some(h) = &res.head {
                head_tensors(h, &mut t);
            }
            let config = json!({ "model": cfg.model, "decoder": cfg.decoder, "head": cfg.head, "stage": sc });
            let w = write_stage(
                out,
                "pretrain",
                config,
                fp,
                sc.seed,
                vec![],
                t,
                &res.log,
                &clock,
            )?;
            Ok(Outcome {
                dir: w.dir,
                run_id: w.manifest.run_id,
                warnings: vec![],
            })
        }
        Command::HeadInit => {
            let sc = stage_config(&cfg.head_init, args, "head_init")?;
            let pdir = prerequisite(out, "pretrain", "run `maect pretrain` first")?;
            let pm = check_dataset(&pdir, &fp)?;
            let encoder = load_encoder(&Checkpoint::load(&pdir.join(CHECKPOINT))?, &cfg)?;
            let (head, log) = init_head(
                &encoder,
                &cfg.model,
                &cfg.head,
                &sc,
                &train,
                progress(args.quiet, "head-init"),
            )?;
            let mut t = Params::new();
            head_tensors(&head, &mut t);
            let config = json!({ "model": cfg.model, "head": cfg.head, "stage": sc });
            let w = write_stage(
                out,
                "head_init",
                config,
                fp,
                sc.seed,
                vec![pm.run_id],
                t,
                &log,
                &clock,
            )?;
            Ok(Outcome {
                dir: w.dir,
                run_id: w.manifest.run_id,
                warnings: vec![],
            })
        }
        Command::Ct => {
            let sc = stage_config(&cfg.ct, args, "ct")?;
            let pdir = prerequisite(out, "pretrain", "run `maect pretrain` first")?;
            let pm = check_dataset(&pdir, &fp)?;
            let encoder = load_encoder(&Checkpoint::load(&pdir.join(CHECKPOINT))?, &cfg)?;
            let mut upstream = vec![pm.run_id];
            let head = if sc.skip_init {
                None
            } else {
                let hdir = prerequisite(
                    out,
                    "head_init",
                    "run `maect head-init` first or pass --skip-init",
                )?;
                let hm = check_dataset(&hdir, &fp)?;
                if hm.upstream.first() != upstream.first() {
                    bail!("head-init was trained on a different pretrain run; rerun `maect head-init`");
                }
                upstream.push(hm.run_id);
                Some(load_head(&Checkpoint::load(&hdir.join(CHECKPOINT))?, &cfg)?)
            };
            let stage = if sc.skip_init { "ct_skip_init" } else { "ct" };
            let res = contrastive_tune(
                &encoder,
                head.as_ref(),
                &cfg.model,
                &cfg.head,
                &sc,
                &train,
                progress(args.quiet, stage),
            )?;
            let mut t = Params::new();
            t.merge_prefixed("encoder.", &res.encoder);
            head_tensors(&res.head, &mut t);
            let config = json!({ "model": cfg.model, "head": cfg.head, "stage": sc });
            let w = write_stage(
                out, stage, config, fp, sc.seed, upstream, t, &res.log, &clock,
            )?;
            Ok(Outcome {
                dir: w.dir,
                run_id: w.manifest.run_id,
                warnings: vec![],
            })
        }
        Command::Eval | Command::ProbeHist | Command::Cluster | Command::Ei => {
            let from = eval_source(out, args)?;
            evaluate(cmd, &cfg, args, &from, &train, &test, fp, &clock)
        }
        Command::Report => unreachable!("handled above"),
    }
}

/// `--from`, defaulting to the most refined checkpoint present.
fn eval_source(out: &Path, args: &RunArgs) -> anyhow::Result<String> {
    if let Some(f) = &args.from {
        let f = f.replace('-', "_");
        if !TRAIN_STAGES.contains(&f.as_str()) || f == "head_init" {
            bail!("--from must be one of pretrain, ct, ct-skip-init");
        }
        return Ok(f);
    }
    for s in ["ct", "pretrain"] {
        if out.join(s).join(CHECKPOINT).is_file() {
            return Ok(s.to_string());
        }
    }
    bail!(
        "missing prerequisite stage `pretrain`: nothing to evaluate in {}",
        out.display()
    )
}

/// Source tag of the embeddings a checkpoint stage yields.
pub fn source_of(stage: &str) -> Source {
    if stage == "pretrain" {
        Source::RawEncoder
    } else {
        Source::EmaEncoder
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub best_lr: f64,
    pub per_lr: Vec<(f64, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowShotMetrics {
    pub shots: Option<usize>,
    pub mean: f64,
    pub std: f64,
    pub per_split: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub cluster_accuracy: f64,
    pub nmi: f64,
    pub ami: f64,
    pub ari: f64,
    /// Against the ground-truth labels, on standardised embeddings.
    pub silhouette: f64,
    pub inertia: f64,
    pub restart_inertias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EiMetrics {
    pub per_transform: Vec<(String, f64)>,
    pub mean_rotation: f64,
    pub mean_color: f64,
}

/// Raw measurements; absent entries were not requested.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub knn_accuracy: Option<f64>,
    pub linear_probe: Option<ProbeMetrics>,
    pub lowshot: Option<LowShotMetrics>,
    pub cluster: Option<ClusterMetrics>,
    pub effective_invariance: Option<EiMetrics>,
    pub histogram_error: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cmd: Command,
    cfg: &RunConfig,
    args: &RunArgs,
    from: &str,
    train: &Dataset,
    test: &Dataset,
    fp: String,
    clock: &Clock,
) -> anyhow::Result<Outcome> {
    let out = args.out.as_path();
    let sdir = prerequisite(out, from, &format!("run `maect {}` first", cli_name(from)))?;
    let sm = check_dataset(&sdir, &fp)?;
    let encoder = load_encoder(&Checkpoint::load(&sdir.join(CHECKPOINT))?, cfg)?;
    let mut ec = cfg.eval.clone();
    if let Some(s) = args.seed {
        ec.seed = s;
    }
    let source = source_of(from);
    let tr = extract_embeddings(&encoder, &cfg.model, train, source)?;
    let te = extract_embeddings(&encoder, &cfg.model, test, source)?;
    let mut m = Metrics::default();
    let all = cmd == Command::Eval;
    let mut confusion = None;
    if all {
        let knn = knn_classify(&tr, &te, ec.knn_k)?;
        m.knn_accuracy = knn.accuracy;
        confusion = Some(confusion_csv(
            &knn.predictions,
            &test.labels,
            test.n_classes,
        ));
        let lo = logistic_regression_lowshot(&tr, &te, &ec.lowshot)?;
        m.lowshot = Some(LowShotMetrics {
            shots: ec.lowshot.shots,
            mean: lo.mean,
            std: lo.std,
            per_split: lo.per_split,
        });
    }
    let mut probe: Option<LinearProbe> = None;
    if all || cmd == Command::Ei {
        let p = linear_probe(&tr, &te, &ec.probe, ec.seed)?;
        if all {
            m.linear_probe = Some(ProbeMetrics {
                accuracy: p.accuracy,
                best_lr: p.best_lr,
                per_lr: p.per_lr.clone(),
            });
        }
        probe = Some(p.probe);
    }
    if all || cmd == Command::Cluster {
        m.cluster = Some(cluster_metrics(&te, test, ec.kmeans_restarts, ec.seed)?);
    }
    if let Some(p) = &probe {
        m.effective_invariance = Some(ei_metrics(p, &encoder, cfg, test, &te)?);
    }
    if all || cmd == Command::ProbeHist {
        let targets = |d: &Dataset| -> anyhow::Result<Vec<Vec<f64>>> {
            Ok(d.images
                .iter()
                .map(|i| color_histogram_target(i, ec.hist.bins))
                .collect::<Result<_, _>>()?)
        };
        m.histogram_error = Some(histogram_probe(
            &tr.vectors,
            &targets(train)?,
            &te.vectors,
            &targets(test)?,
            &ec.hist,
            ec.seed,
        )?);
    }
    let name = match cmd {
        Command::Eval => "eval",
        Command::ProbeHist => "probe_hist",
        Command::Cluster => "cluster",
        Command::Ei => "ei",
        _ => unreachable!("not an evaluation"),
    };
    let dir = out.join(name).join(from);
    fs::create_dir_all(&dir)?;
    let config = json!({ "model": cfg.model, "eval": ec, "from": from, "source": source });
    let manifest = RunManifest::new(name, config, fp, ec.seed, vec![sm.run_id], clock);
    fs::write(dir.join(METRICS), serde_json::to_string_pretty(&m)? + "\n")?;
    if let Some(c) = confusion {
        fs::write(dir.join(CONFUSION), c)?;
    }
    manifest.save(&dir)?;
    let mut warnings = vec![];
    if all {
        let rep = export_report(out, from)?;
        warnings = rep.warnings;
    }
    Ok(Outcome {
        dir,
        run_id: manifest.run_id,
        warnings,
    })
}

fn confusion_csv(pred: &[usize], labels: &[usize], n_classes: usize) -> String {
    let n_classes = pred
        .iter()
        .chain(labels)
        .map(|&c| c + 1)
        .fold(n_classes, usize::max);
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in pred.iter().zip(labels) {
        m[l][p] += 1;
    }
    let mut out = String::from("class");
    for c in 0..n_classes {
        out.push_str(&format!(",pred_{c}"));
    }
    out.push('\n');
    for (c, row) in m.iter().enumerate() {
        out.push_str(&c.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn cluster_metrics(
    te: &EmbeddingSet,
    test: &Dataset,
    restarts: usize,
    seed: u64,
) -> anyhow::Result<ClusterMetrics> {
    let st = standardize(te);
    let km = kmeans(&st.vectors, test.n_classes, restarts, seed)?;
    let scores = nmi_ami_ari(&km.best.assignment, &test.labels)?;
    Ok(ClusterMetrics {
        cluster_accuracy: cluster_accuracy(&km.best.assignment, &test.labels)?,
        nmi: scores.nmi,
        ami: scores.ami,
        ari: scores.ari,
        silhouette: silhouette(&st.vectors, &test.labels)?,
        inertia: km.best.inertia,
        restart_inertias: km.restart_inertias,
    })
}

fn ei_metrics(
    probe: &LinearProbe,
    encoder: &Params,
    cfg: &RunConfig,
    test: &Dataset,
    te: &EmbeddingSet,
) -> anyhow::Result<EiMetrics> {
    let mut per = Vec::new();
    let (mut rot, mut col) = (Vec::new(), Vec::new());
    for t in EiTransform::ALL {
        let imgs: Vec<_> = test.images.iter().map(|i| t.apply(i)).collect();
        let x = encode_images(encoder, &cfg.model, &imgs)?;
        let ei = probe_effective_invariance(probe, &te.vectors, &x)?;
        if t.is_rotation() {
            rot.push(ei);
        } else {
            col.push(ei);
        }
        per.push((t.name().to_string(), ei));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EiMetrics {
        per_transform: per,
        mean_rotation: mean(&rot),
        mean_color: mean(&col),
    })
}
