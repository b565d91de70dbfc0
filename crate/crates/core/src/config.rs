//! Flat dotted-key run configuration.
//!
//! A run's configuration is a JSON object whose keys are dotted names such as
//! `train.lr`. Values are resolved as defaults, then a config file, then
//! command-line overrides. Unknown keys and ill-typed values are rejected
//! with the offending key named. The resolved object is what a run writes to
//! `resolved_config.json`, and loading that file reproduces the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::backbone::BackboneConfig;
use crate::datagen::DatagenParams;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, HttpVlmConfig, VLM_TOKEN_ENV};
use crate::flow::{SamplerConfig, Scheme};
use crate::lora::{AdapterConfig, Projection};
use crate::pipeline::{OptimizerKind, TrainConfig};
use crate::structure::CannyParams;

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Str,
    FloatList,
    /// Float or null.
    OptFloat,
}

pub struct KeySpec {
    pub key: &'static str,
    kind: Kind,
    pub doc: &'static str,
}

const fn spec(key: &'static str, kind: Kind, doc: &'static str) -> KeySpec {
    KeySpec { key, kind, doc }
}

pub const KEYS: &[KeySpec] = &[
    spec("backbone.image_size", Kind::Int, "image side in pixels"),
    spec("backbone.patch_size", Kind::Int, "patch side in pixels"),
    spec("backbone.channels", Kind::Int, "image channels"),
    spec("backbone.width", Kind::Int, "token width d"),
    spec("backbone.depth", Kind::Int, "number of blocks"),
    spec("backbone.heads", Kind::Int, "attention heads"),
    spec("backbone.text_vocab", Kind::Int, "prompt vocabulary size"),
    spec("backbone.max_text_len", Kind::Int, "maximum prompt length in tokens"),
    spec("backbone.seed", Kind::Int, "seed of the frozen backbone weights"),
    spec("lora.rank", Kind::Int, "adapter rank r"),
    spec(
        "lora.alpha",
        Kind::OptFloat,
        "adapter scale numerator; null means alpha = r",
    ),
    spec("lora.sites", Kind::Str, "comma-separated adapted projections"),
    spec("train.batch_size", Kind::Int, "examples per step"),
    spec("train.steps", Kind::Int, "optimizer steps per stage"),
    spec("train.lr", Kind::Float, "learning rate"),
    spec(
        "train.momentum",
        Kind::Float,
        "momentum (sgd) or first-moment decay (adam)",
    ),
    spec("train.optimizer", Kind::Str, "sgd or adam"),
    spec("train.mix", Kind::FloatList, "sampling ratio per --data directory"),
    spec(
        "train.seed",
        Kind::Int,
        "seed for adapter init, data order, noise and t",
    ),
    spec("train.grad_clip", Kind::Float, "global gradient-norm clip, 0 disables"),
    spec("sampler.steps", Kind::Int, "Euler steps per sample"),
    spec("sampler.seed", Kind::Int, "seed of the prior noise"),
    spec("canny.sigma", Kind::Float, "Gaussian smoothing sigma"),
    spec(
        "canny.low",
        Kind::Float,
        "low hysteresis threshold, fraction of max gradient",
    ),
    spec(
        "canny.high",
        Kind::Float,
        "high hysteresis threshold, fraction of max gradient",
    ),
    spec("data.image_size", Kind::Int, "rendered image side in pixels"),
    spec(
        "data.min_confidence",
        Kind::Float,
        "OCR confidence needed to accept a text pair",
    ),
    spec(
        "data.view_failure_rate",
        Kind::Float,
        "probability that a novel view corrupts a glyph",
    ),
    spec("eval.tolerance_px", Kind::Int, "edge matching radius (Chebyshev)"),
    spec("eval.grid_count", Kind::Int, "grid images written per report"),
    spec("eval.vlm", Kind::Str, "scoring client: mock or http"),
    spec("vlm.endpoint", Kind::Str, "HTTP scoring endpoint URL"),
    spec("vlm.model", Kind::Str, "model name sent to the endpoint"),
    spec(
        "vlm.token_env",
        Kind::Str,
        "environment variable holding the bearer token",
    ),
    spec("vlm.timeout_s", Kind::Float, "request timeout in seconds"),
    spec("vlm.max_concurrency", Kind::Int, "concurrent scoring requests"),
    spec("workers", Kind::Int, "worker threads, 0 uses every core"),
];

fn defaults() -> BTreeMap<String, Value> {
    let b = BackboneConfig::default();
    let t = TrainConfig::default();
    let s = SamplerConfig::default();
    let c = CannyParams::default();
    let d = DatagenParams::default();
    let e = EvalConfig::default();
    let v = HttpVlmConfig::default();
    let sites: Vec<&str> = Projection::ALL.iter().map(|p| p.name()).collect();
    let pairs: Vec<(&str, Value)> = vec![
        ("backbone.image_size", json!(b.image_size)),
        ("backbone.patch_size", json!(b.patch_size)),
        ("backbone.channels", json!(b.channels)),
        ("backbone.width", json!(b.width)),
        ("backbone.depth", json!(b.depth)),
        ("backbone.heads", json!(b.heads)),
        ("backbone.text_vocab", json!(b.text_vocab)),
        ("backbone.max_text_len", json!(b.max_text_len)),
        ("backbone.seed", json!(0)),
        ("lora.rank", json!(t.adapter.rank)),
        ("lora.alpha", Value::Null),
        ("lora.sites", json!(sites.join(","))),
        ("train.batch_size", json!(t.batch_size)),
        ("train.steps", json!(t.steps)),
        ("train.lr", json!(t.lr)),
        ("train.momentum", json!(t.momentum)),
        ("train.optimizer", json!(t.optimizer.name())),
        ("train.mix", json!(t.mix)),
        ("train.seed", json!(t.seed)),
        ("train.grad_clip", json!(t.grad_clip)),
        ("sampler.steps", json!(s.steps)),
        ("sampler.seed", json!(s.seed)),
        ("canny.sigma", json!(c.sigma)),
        ("canny.low", json!(c.low)),
        ("canny.high", json!(c.high)),
        ("data.image_size", json!(d.image_size)),
        ("data.min_confidence", json!(d.min_confidence)),
        ("data.view_failure_rate", json!(d.view_failure_rate)),
        ("eval.tolerance_px", json!(e.tolerance_px)),
        ("eval.grid_count", json!(e.grid_count)),
        ("eval.vlm", json!("mock")),
        ("vlm.endpoint", json!(v.endpoint)),
        ("vlm.model", json!(v.model)),
        ("vlm.token_env", json!(VLM_TOKEN_ENV)),
        ("vlm.timeout_s", json!(v.timeout_s)),
        ("vlm.max_concurrency", json!(e.vlm_max_concurrency)),
        ("workers", json!(e.workers)),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn key_spec(key: &str) -> Result<&'static KeySpec> {
    KEYS.iter()
        .find(|s| s.key == key)
        .ok_or_else(|| Error::config(key, "unknown configuration key"))
}

fn check_type(spec: &KeySpec, value: &Value) -> Result<()> {
    let ok = match spec.kind {
        Kind::Int => value.as_u64().is_some(),
        Kind::Float => value.as_f64().is_some(),
        Kind::Str => value.is_string(),
        Kind::FloatList => value.as_array().is_some_and(|a| a.iter().all(|x| x.as_f64().is_some())),
        Kind::OptFloat => value.is_null() || value.as_f64().is_some(),
    };
    if ok {
        Ok(())
    } else {
        let expected = match spec.kind {
            Kind::Int => "a nonnegative integer",
            Kind::Float => "a number",
            Kind::Str => "a string",
            Kind::FloatList => "a list of numbers",
            Kind::OptFloat => "a number or null",
        };
        Err(Error::config(spec.key, format!("expected {expected}, got {value}")))
    }
}

/// Parses a command-line value for `key` according to its type.
pub fn parse_flag_value(key: &str, raw: &str) -> Result<Value> {
    let spec = key_spec(key)?;
    let bad = || Error::config(key, format!("cannot parse {raw:?}"));
    let value = match spec.kind {
        Kind::Int => json!(raw.trim().parse::<u64>().map_err(|_| bad())?),
        Kind::Float => json!(raw.trim().parse::<f64>().map_err(|_| bad())?),
        Kind::Str => json!(raw),
        Kind::FloatList => json!(raw
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?),
        Kind::OptFloat if raw.trim() == "null" => Value::Null,
        Kind::OptFloat => json!(raw.trim().parse::<f64>().map_err(|_| bad())?),
    };
    check_type(spec, &value)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: defaults() }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` (already typed).
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config(path.display().to_string(), format!("not valid JSON: {e}")))?;
            let Value::Object(map) = parsed else {
                return Err(Error::config(path.display().to_string(), "expected a JSON object"));
            };
            for (k, v) in map {
                cfg.set(&k, v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v.clone())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        check_type(key_spec(key)?, &value)?;
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    pub fn values(&self) -> &BTreeMap<String, Value> {
        &self.values
    }

    fn usize(&self, key: &str) -> usize {
        self.values[key].as_u64().expect("type checked") as usize
    }

    fn u64(&self, key: &str) -> u64 {
        self.values[key].as_u64().expect("type checked")
    }

    fn f64(&self, key: &str) -> f64 {
        self.values[key].as_f64().expect("type checked")
    }

    fn str(&self, key: &str) -> &str {
        self.values[key].as_str().expect("type checked")
    }

    pub fn backbone_seed(&self) -> u64 {
        self.u64("backbone.seed")
    }

    pub fn workers(&self) -> usize {
        self.usize("workers")
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_size: self.usize("backbone.image_size"),
            patch_size: self.usize("backbone.patch_size"),
            channels: self.usize("backbone.channels"),
            width: self.usize("backbone.width"),
            depth: self.usize("backbone.depth"),
            heads: self.usize("backbone.heads"),
            text_vocab: self.usize("backbone.text_vocab"),
            max_text_len: self.usize("backbone.max_text_len"),
        }
    }

    pub fn adapter(&self) -> Result<AdapterConfig> {
        let rank = self.usize("lora.rank");
        let alpha = self.values["lora.alpha"].as_f64().unwrap_or(rank as f64);
        let projections = self
            .str("lora.sites")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Projection::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterConfig {
            rank,
            alpha,
            projections,
        })
    }

    pub fn mix(&self) -> Vec<f64> {
        self.values["train.mix"]
            .as_array()
            .expect("type checked")
            .iter()
            .map(|v| v.as_f64().expect("type checked"))
            .collect()
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.usize("train.batch_size"),
            steps: self.usize("train.steps"),
            lr: self.f64("train.lr"),
            momentum: self.f64("train.momentum"),
            optimizer: OptimizerKind::parse(self.str("train.optimizer"))?,
            adapter: self.adapter()?,
            mix: self.mix(),
            seed: self.u64("train.seed"),
            grad_clip: self.f64("train.grad_clip"),
            workers: self.workers(),
        })
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.usize("sampler.steps"),
            seed: self.u64("sampler.seed"),
            scheme: Scheme::Euler,
        }
    }

    pub fn canny(&self) -> CannyParams {
        CannyParams {
            sigma: self.f64("canny.sigma"),
            low: self.f64("canny.low"),
            high: self.f64("canny.high"),
        }
    }

    pub fn datagen(&self) -> DatagenParams {
        DatagenParams {
            image_size: self.usize("data.image_size"),
            canny: self.canny(),
            min_confidence: self.f64("data.min_confidence"),
            view_failure_rate: self.f64("data.view_failure_rate"),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            sampler: self.sampler(),
            canny: self.canny(),
            tolerance_px: self.usize("eval.tolerance_px"),
            grid_count: self.usize("eval.grid_count"),
            vlm_max_concurrency: self.usize("vlm.max_concurrency"),
            workers: self.workers(),
        }
    }

    pub fn vlm_client_name(&self) -> &str {
        self.str("eval.vlm")
    }

    pub fn http_vlm(&self) -> HttpVlmConfig {
        HttpVlmConfig {
            endpoint: self.str("vlm.endpoint").to_string(),
            model: self.str("vlm.model").to_string(),
            token_env: self.str("vlm.token_env").to_string(),
            timeout_s: self.f64("vlm.timeout_s"),
        }
    }

    /// Cross-field checks on top of the per-key type checks.
    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.adapter()?.validate()?;
        self.train()?;
        self.sampler().validate()?;
        self.canny().validate()?;
        let mix = self.mix();
        if mix.is_empty() {
            return Err(Error::config("train.mix", "needs at least one ratio"));
        }
        let total: f64 = mix.iter().sum();
        if mix.iter().any(|r| *r < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "train.mix",
                format!("ratios must be nonnegative and sum to 1, got {mix:?}"),
            ));
        }
        for key in [
            "train.batch_size",
            "sampler.steps",
            "data.image_size",
            "vlm.max_concurrency",
        ] {
            if self.usize(key) == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        let p = self.f64("data.min_confidence");
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("data.min_confidence", "must lie in [0, 1]"));
        }
        let p = self.f64("data.view_failure_rate");
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("data.view_failure_rate", "must lie in [0, 1]"));
        }
        if !matches!(self.vlm_client_name(), "mock" | "http") {
            return Err(Error::config("eval.vlm", "must be mock or http"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).expect("values serialize") + "\n"
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

/// One line per key: name, default and description.
pub fn describe_keys() -> String {
    let defaults = defaults();
    KEYS.iter()
        .map(|s| format!("  {:<24} {:<28} {}", s.key, defaults[s.key].to_string(), s.doc))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_has_a_default_and_back() {
        let d = defaults();
        assert_eq!(d.len(), KEYS.len());
        for s in KEYS {
            check_type(s, &d[s.key]).unwrap();
        }
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"train.lr": 0.5, "train.steps": 7}"#).unwrap();
        let flags = vec![("train.lr".to_string(), parse_flag_value("train.lr", "0.25").unwrap())];
        let cfg = RunConfig::resolve(Some(&file), &flags).unwrap();
        assert_eq!(cfg.train().unwrap().lr, 0.25);
        assert_eq!(cfg.train().unwrap().steps, 7);

        fs::write(&file, r#"{"train.learning_rate": 0.5}"#).unwrap();
        match RunConfig::resolve(Some(&file), &[]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.learning_rate"),
            other => panic!("{other:?}"),
        }
        fs::write(&file, r#"{"train.steps": "many"}"#).unwrap();
        assert!(RunConfig::resolve(Some(&file), &[]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let flags = vec![(
            "train.mix".to_string(),
            parse_flag_value("train.mix", "0.5,0.5").unwrap(),
        )];
        let cfg = RunConfig::resolve(None, &flags).unwrap();
        cfg.write_snapshot(dir.path()).unwrap();
        let again = RunConfig::resolve(Some(&dir.path().join(SNAPSHOT_FILE)), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.mix(), vec![0.5, 0.5]);
    }

    #[test]
    fn alpha_defaults_to_rank() {
        let flags = vec![("lora.rank".to_string(), json!(4))];
        let cfg = RunConfig::resolve(None, &flags).unwrap();
        assert_eq!(cfg.adapter().unwrap().alpha, 4.0);
    }
}
