use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nest_core::bench::ThroughputOptions;
use nest_core::data::SyntheticConfig;
use nest_core::eval::{NbrOptions, SetDecoder};
use nest_core::model::{Architecture, ModelConfig};
use nest_core::train::TrainConfig;
use nest_core::{NestError, Result};

pub const SEED_ENV: &str = "NEST_SEED";
pub const AUTO: &str = "auto";

/// Every accepted key with its default; `None` marks a required key.
const KEYS: &[(&str, Option<&str>)] = &[
    ("model.arch", Some("nest")),
    ("model.layers", Some("2")),
    ("model.d_model", None),
    ("model.d_ff", Some(AUTO)),
    ("model.n_heads", Some("2")),
    ("model.d_k", Some(AUTO)),
    ("model.vocab_size", Some(AUTO)),
    ("model.n", Some("8")),
    ("model.m", Some("8")),
    ("model.rope_base", Some("10000")),
    ("model.dropout", Some("0")),
    ("model.t2v_on_cls", Some("true")),
    ("model.time_scale", Some("1")),
    ("model.t2v_scale", Some("0.02")),
    ("model.probe_classes", Some("2")),
    ("train.lr", Some("0.001")),
    ("train.beta1", Some("0.9")),
    ("train.beta2", Some("0.999")),
    ("train.eps", Some("1e-8")),
    ("train.weight_decay", Some("0.01")),
    ("train.warmup_frac", Some("0.05")),
    ("train.batch_size", Some("16")),
    ("train.epochs", Some("10")),
    ("train.mlm_rate", Some("0.2")),
    ("train.msm_rate", Some("0.4")),
    ("train.mlm_weight", Some("1")),
    ("train.msm_weight", Some("1")),
    ("train.val_k", Some("10")),
    ("train.patience", Some("3")),
    ("train.decoder", Some("tied")),
    ("train.seed", Some("0")),
    ("train.threads", Some("1")),
    ("data.source", Some("synthetic")),
    ("data.path", Some("")),
    ("data.orders", Some("")),
    ("data.order_products", Some("")),
    ("data.sample_fraction", Some("0.01")),
    ("data.min_count", Some("1")),
    ("data.subjects", Some("200")),
    ("data.vocab_size", Some("84")),
    ("data.topics", Some("8")),
    ("data.stickiness", Some("0.8")),
    ("data.noise", Some("0.1")),
    ("data.min_sets", Some("8")),
    ("data.min_set_size", Some("7")),
    ("data.seed", Some("0")),
    ("eval.k", Some("10")),
    ("eval.decoder", Some("tied")),
    ("eval.query_masks", Some("1")),
    ("eval.fallback_gap", Some("1")),
    ("eval.checkpoint", Some("")),
    ("eval.split", Some("test")),
    ("bench.throughput", Some("false")),
    ("bench.trials", Some("30")),
    ("bench.warmup", Some("2")),
    ("bench.batch", Some("4")),
    ("bench.sweep_n", Some("")),
    ("bench.sweep_m", Some("")),
    ("bench.sweep_d", Some("")),
];

fn default_of(key: &str) -> Option<Option<&'static str>> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

fn config_err(msg: String) -> NestError {
    NestError::Config(msg)
}

/// Where a dataset comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Jsonl,
    Instacart,
}

impl FromStr for DataSource {
    type Err = NestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "jsonl" => Ok(DataSource::Jsonl),
            "instacart" => Ok(DataSource::Instacart),
            other => Err(config_err(format!("unknown data source {other:?}"))),
        }
    }
}

/// Fully resolved run configuration: every key carries a value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn parse_assignment(text: &str, what: &str) -> Result<(String, String)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| config_err(format!("{what}: expected key = value, got {text:?}")))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}

/// Parses sectioned `key = value` text into fully qualified keys.
pub fn parse_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let at = format!("{origin}:{}", i + 1);
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let (key, value) = parse_assignment(line, &at)?;
        let section = section.as_ref().ok_or_else(|| config_err(format!("{at}: key {key:?} outside a section")))?;
        let full = format!("{section}.{key}");
        if default_of(&full).is_none() {
            return Err(config_err(format!("{at}: unknown key {full}")));
        }
        if out.insert(full.clone(), value).is_some() {
            return Err(config_err(format!("{at}: duplicate key {full}")));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then the file, then the seed environment variable, then
    /// `section.key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string()))).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
            values.extend(parse_text(&text, &path.display().to_string())?);
        }
        if let Some(seed) = env_seed {
            values.insert("train.seed".into(), seed.trim().to_string());
        }
        for o in overrides {
            let (key, value) = parse_assignment(o, "--set")?;
            if default_of(&key).is_none() {
                return Err(config_err(format!("unknown key {key}")));
            }
            values.insert(key, value);
        }
        if let Some((key, _)) = KEYS.iter().find(|(k, d)| d.is_none() && !values.contains_key(*k)) {
            return Err(config_err(format!("missing required key {key}")));
        }
        let cfg = RunConfig { values };
        cfg.check()?;
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn parse_str(text: &str) -> Result<Self> {
        let values = parse_text(text, "config")?;
        if let Some((key, _)) = KEYS.iter().find(|(k, _)| !values.contains_key(*k)) {
            return Err(config_err(format!("missing required key {key}")));
        }
        let cfg = RunConfig { values };
        cfg.check()?;
        Ok(cfg)
    }

    /// Converts every key once so type errors surface before any work.
    fn check(&self) -> Result<()> {
        self.model_config(Some(NEUTRAL_VOCAB))?;
        self.arch()?;
        self.train_config()?;
        self.threads()?;
        self.source()?;
        self.synthetic_config()?;
        self.get::<f64>("data.sample_fraction")?;
        self.get::<usize>("data.min_count")?;
        self.nbr_options()?;
        self.split()?;
        self.throughput_options()?;
        self.get::<bool>("bench.throughput")?;
        for key in ["bench.sweep_n", "bench.sweep_m", "bench.sweep_d"] {
            self.list(key)?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    pub fn set(&mut self, key: &str, value: String) -> Result<()> {
        if default_of(key).is_none() {
            return Err(config_err(format!("unknown key {key}")));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse::<T>()
            .map_err(|_| config_err(format!("{key}: cannot parse {raw:?} as {}", std::any::type_name::<T>())))
    }

    fn get_or_auto(&self, key: &str, auto: usize) -> Result<usize> {
        if self.raw(key) == AUTO {
            Ok(auto)
        } else {
            self.get(key)
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| config_err(format!("{key}: cannot parse {s:?} as an integer"))))
            .collect()
    }

    pub fn arch(&self) -> Result<Architecture> {
        self.raw("model.arch").parse().map_err(|e: NestError| config_err(format!("model.arch: {e}")))
    }

    pub fn vocab_is_auto(&self) -> bool {
        self.raw("model.vocab_size") == AUTO
    }

    /// Model hyperparameters; an `auto` vocabulary size takes `data_vocab`.
    pub fn model_config(&self, data_vocab: Option<usize>) -> Result<ModelConfig> {
        let d_model: usize = self.get("model.d_model")?;
        let n_heads: usize = self.get("model.n_heads")?;
        let vocab_size = match data_vocab {
            Some(v) if self.vocab_is_auto() => v,
            _ if self.vocab_is_auto() => {
                return Err(config_err("model.vocab_size: auto needs a dataset; set it explicitly".into()))
            }
            _ => self.get("model.vocab_size")?,
        };
        let cfg = ModelConfig {
            layers: self.get("model.layers")?,
            d_model,
            d_ff: self.get_or_auto("model.d_ff", (8 * d_model).div_ceil(3))?,
            n_heads,
            d_k: self.get_or_auto("model.d_k", d_model / n_heads.max(1))?,
            vocab_size,
            n: self.get("model.n")?,
            m: self.get("model.m")?,
            rope_base: self.get("model.rope_base")?,
            dropout: self.get("model.dropout")?,
            seed: self.get("train.seed")?,
            t2v_on_cls: self.get("model.t2v_on_cls")?,
            time_scale: self.get("model.time_scale")?,
            t2v_scale: self.get("model.t2v_scale")?,
            probe_classes: self.get("model.probe_classes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.get("train.lr")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            eps: self.get("train.eps")?,
            weight_decay: self.get("train.weight_decay")?,
            warmup_frac: self.get("train.warmup_frac")?,
            batch_size: self.get("train.batch_size")?,
            epochs: self.get("train.epochs")?,
            mlm_rate: self.get("train.mlm_rate")?,
            msm_rate: self.get("train.msm_rate")?,
            mlm_weight: self.get("train.mlm_weight")?,
            msm_weight: self.get("train.msm_weight")?,
            val_k: self.get("train.val_k")?,
            patience: self.get("train.patience")?,
            decoder: self.decoder("train.decoder")?,
            seed: self.get("train.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn decoder(&self, key: &str) -> Result<SetDecoder> {
        self.raw(key).parse().map_err(|e: NestError| config_err(format!("{key}: {e}")))
    }

    pub fn threads(&self) -> Result<usize> {
        match self.get::<usize>("train.threads")? {
            1 => Ok(1),
            t => Err(config_err(format!("train.threads: only single-threaded runs are supported, got {t}"))),
        }
    }

    pub fn source(&self) -> Result<DataSource> {
        self.raw("data.source").parse().map_err(|e: NestError| config_err(format!("data.source: {e}")))
    }

    /// Generator settings; the grid shape comes from the model section.
    pub fn synthetic_config(&self) -> Result<SyntheticConfig> {
        Ok(SyntheticConfig {
            subjects: self.get("data.subjects")?,
            m: self.get("model.m")?,
            n: self.get("model.n")?,
            vocab_size: self.get("data.vocab_size")?,
            topics: self.get("data.topics")?,
            stickiness: self.get("data.stickiness")?,
            noise: self.get("data.noise")?,
            min_sets: self.get("data.min_sets")?,
            min_set_size: self.get("data.min_set_size")?,
            seed: self.get("data.seed")?,
        })
    }

    pub fn nbr_options(&self) -> Result<NbrOptions> {
        Ok(NbrOptions {
            k: self.get("eval.k")?,
            query_masks: self.get("eval.query_masks")?,
            fallback_gap: self.get("eval.fallback_gap")?,
            decoder: self.decoder("eval.decoder")?,
        })
    }

    pub fn split(&self) -> Result<nest_core::data::Split> {
        use nest_core::data::Split;
        match self.raw("eval.split") {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(config_err(format!("eval.split: unknown split {other:?}"))),
        }
    }

    pub fn throughput_options(&self) -> Result<ThroughputOptions> {
        Ok(ThroughputOptions {
            batch: self.get("bench.batch")?,
            trials: self.get("bench.trials")?,
            warmup: self.get("bench.warmup")?,
            seed: self.get("train.seed")?,
            ..ThroughputOptions::default()
        })
    }

    /// Sectioned `key = value` text that parses back to this configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in &self.values {
            let (section, name) = key.split_once('.').expect("qualified key");
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }
}

/// Stand-in vocabulary size used only to type-check an `auto` entry.
const NEUTRAL_VOCAB: usize = 5;
