//! Run configuration: one TOML file with a table per component. Every
//! table is optional and overlays the desk-scale defaults key by key.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use maect::data::{generate_toy, ToySpec};
use maect::eval::{HistProbeConfig, LowShotConfig, ProbeConfig};
use maect::mae::DecoderConfig;
use maect::nnclr::HeadConfig;
use maect::tuning::{Stage, StageConfig};
use maect::vit::Pooling;
use maect::{Dataset, ViTConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct DataConfig {
    /// Dataset containers; when both are absent the toy set is rendered.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub toy: ToySpec,
    pub toy_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub probe: ProbeConfig,
    pub lowshot: LowShotConfig,
    pub kmeans_restarts: usize,
    pub hist: HistProbeConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            knn_k: 20,
            probe: ProbeConfig::default(),
            lowshot: LowShotConfig::default(),
            kmeans_restarts: 10,
            hist: HistProbeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ViTConfig,
    pub decoder: DecoderConfig,
    pub head: HeadConfig,
    pub pretrain: StageConfig,
    pub head_init: StageConfig,
    pub ct: StageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Settings sized for one CPU core and the 10-class toy set.
    fn default() -> Self {
        let model = ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            pooling: Pooling::Cls,
            cls_pos_embed: false,
        };
        let mut pretrain = StageConfig::defaults(Stage::Pretrain);
        pretrain.epochs = 10;
        pretrain.batch_size = 128;
        pretrain.base_lr = 1.5e-3;
        pretrain.warmup_fraction = 0.1;
        let mut head_init = StageConfig::defaults(Stage::HeadInit);
        head_init.epochs = 3;
        head_init.batch_size = 128;
        head_init.base_lr = 1e-3;
        head_init.warmup_fraction = 0.1;
        let mut ct = StageConfig::defaults(Stage::Ct);
        ct.epochs = 9;
        ct.batch_size = 128;
        ct.base_lr = 2e-3;
        ct.warmup_fraction = 0.1;
        ct.frozen_blocks = 2;
        ct.layer_decay = 1.0;
        ct.encoder_ema = 0.99;
        RunConfig {
            data: DataConfig::default(),
            model,
            decoder: DecoderConfig::default(),
            head: HeadConfig::default(),
            pretrain,
            head_init,
            ct,
            eval: EvalConfig::default(),
        }
    }
}

const SECTIONS: [&str; 8] = [
    "data",
    "model",
    "decoder",
    "head",
    "pretrain",
    "head_init",
    "ct",
    "eval",
];

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Overlays `table` on `default`, reporting every bad key rather than
/// stopping at the first.
fn section<T: Clone + Serialize + DeserializeOwned>(
    name: &str,
    default: &T,
    table: Option<Value>,
    errors: &mut Vec<String>,
) -> Option<T> {
    let base = serde_json::to_value(default).expect("defaults serialise");
    let Some(table) = table else {
        return Some(default.clone());
    };
    let Value::Object(entries) = table else {
        errors.push(format!("[{name}] must be a table"));
        return None;
    };
    let mut ok = true;
    for (key, value) in &entries {
        if base.get(key).is_none() {
            errors.push(format!("[{name}] unknown key `{key}`"));
            ok = false;
            continue;
        }
        let mut single = base.clone();
        merge(
            &mut single,
            Value::Object([(key.clone(), value.clone())].into_iter().collect()),
        );
        if let Err(e) = serde_json::from_value::<T>(single) {
            errors.push(format!("[{name}] {key}: {e}"));
            ok = false;
        }
    }
    if !ok {
        return None;
    }
    let mut full = base;
    merge(&mut full, Value::Object(entries));
    match serde_json::from_value(full) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("[{name}] {e}"));
            None
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        let table: toml::Table = text.parse().context("config is not valid TOML")?;
        let mut json = serde_json::to_value(&table)?;
        let obj = json.as_object_mut().expect("a TOML document is a table");
        let mut errors = Vec::new();
        for key in obj.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                errors.push(format!("unknown section [{key}]"));
            }
        }
        let d = RunConfig::default();
        let data = section("data", &d.data, obj.remove("data"), &mut errors);
        let model = section("model", &d.model, obj.remove("model"), &mut errors);
        let decoder = section("decoder", &d.decoder, obj.remove("decoder"), &mut errors);
        let head = section("head", &d.head, obj.remove("head"), &mut errors);
        let pretrain = section("pretrain", &d.pretrain, obj.remove("pretrain"), &mut errors);
        let head_init = section(
            "head_init",
            &d.head_init,
            obj.remove("head_init"),
            &mut errors,
        );
        let ct = section("ct", &d.ct, obj.remove("ct"), &mut errors);
        let eval = section("eval", &d.eval, obj.remove("eval"), &mut errors);
        match (data, model, decoder, head, pretrain, head_init, ct, eval) {
            (
                Some(data),
                Some(model),
                Some(decoder),
                Some(head),
                Some(pretrain),
                Some(head_init),
                Some(ct),
                Some(eval),
            ) if errors.is_empty() => {
                let cfg = RunConfig {
                    data,
                    model,
                    decoder,
                    head,
                    pretrain,
                    head_init,
                    ct,
                    eval,
                };
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Err(validation_error(&errors)),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Every semantic problem at once.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.model.validate() {
            out.push(format!("[model] {e}"));
        }
        if let Err(e) = self.decoder.validate() {
            out.push(format!("[decoder] {e}"));
        }
        if self.head.input_dim != self.model.embed_dim {
            out.push(format!(
                "[head] input_dim {} must equal model.embed_dim {}",
                self.head.input_dim, self.model.embed_dim
            ));
        }
        for (name, cfg, stage) in [
            ("pretrain", &self.pretrain, Stage::Pretrain),
            ("head_init", &self.head_init, Stage::HeadInit),
            ("ct", &self.ct, Stage::Ct),
        ] {
            if cfg.stage != stage {
                out.push(format!("[{name}] stage must be `{}`", stage.name()));
            }
            let msgs = if self.model.validate().is_ok() {
                cfg.validate_against(&self.model)
            } else {
                cfg.validate()
            };
            out.extend(msgs.into_iter().map(|m| format!("[{name}] {m}")));
        }
        if self.data.train.is_some() != self.data.test.is_some() {
            out.push("[data] give both `train` and `test` containers or neither".into());
        }
        if self.data.train.is_none() && self.data.toy.image_size != self.model.image_size {
            out.push(format!(
                "[data] toy.image_size {} differs from model.image_size {}",
                self.data.toy.image_size, self.model.image_size
            ));
        }
        if self.eval.knn_k == 0 {
            out.push("[eval] knn_k must be at least 1".into());
        }
        if self.eval.kmeans_restarts == 0 {
            out.push("[eval] kmeans_restarts must be at least 1".into());
        }
        if self.eval.probe.lr_sweep.is_empty() {
            out.push("[eval] probe.lr_sweep is empty".into());
        }
        out
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(validation_error(&p))
        }
    }

    pub fn stage(&self, stage: Stage) -> anyhow::Result<&StageConfig> {
        Ok(match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::HeadInit => &self.head_init,
            Stage::Ct => &self.ct,
            Stage::Eval => bail!("eval has no training stage config"),
        })
    }

    /// Train and test splits, read from containers or rendered.
    pub fn datasets(&self, base: Option<&Path>) -> anyhow::Result<(Dataset, Dataset)> {
        match (&self.data.train, &self.data.test) {
            (Some(tr), Some(te)) => {
                let resolve = |p: &PathBuf| match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let (tr, te) = (resolve(tr), resolve(te));
                let train = maect::io::load_dataset(&tr)
                    .with_context(|| format!("loading {}", tr.display()))?;
                let test = maect::io::load_dataset(&te)
                    .with_context(|| format!("loading {}", te.display()))?;
                Ok((train, test))
            }
            _ => Ok(generate_toy(&self.data.toy, self.data.toy_seed)?),
        }
    }
}

fn validation_error(errors: &[String]) -> anyhow::Error {
    let mut msg = format!("{} configuration error(s):", errors.len());
    for e in errors {
        msg.push_str("\n  - ");
        msg.push_str(e);
    }
    anyhow::anyhow!(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn overlay_keeps_unset_fields() {
        let c = RunConfig::from_toml_str("[ct]\nk = 5\n[eval.probe]\nepochs = 3\n").unwrap();
        assert_eq!(c.ct.k, 5);
        assert_eq!(c.ct.tau, RunConfig::default().ct.tau);
        assert_eq!(c.eval.probe.epochs, 3);
        assert_eq!(c.eval.probe.batch_size, 256);
    }

    #[test]
    fn all_errors_are_listed() {
        let err =
            RunConfig::from_toml_str("[ct]\nk = \"x\"\nbogus = 1\n[model]\ndepth = -1\n[nope]\n")
                .unwrap_err()
                .to_string();
        assert!(err.starts_with("4 configuration error(s)"), "{err}");
        for needle in [
            "[ct] k:",
            "unknown key `bogus`",
            "[model] depth",
            "unknown section [nope]",
        ] {
            assert!(err.contains(needle), "{needle} missing from {err}");
        }
    }

    #[test]
    fn semantic_errors_are_listed_together() {
        let err = RunConfig::from_toml_str("[ct]\ntau = 0.0\nviews = 3\n[head]\ninput_dim = 8\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("[head] input_dim"), "{err}");
        assert!(err.contains("[ct]"), "{err}");
        assert!(err.matches("\n  - ").count() >= 3, "{err}");
    }
}
