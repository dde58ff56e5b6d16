//! Run configuration: one JSON tree with `model`, `stage`, `generation`,
//! `engine` and `eval` sections, merged from defaults, an optional file and
//! dotted `key=value` overrides.

use std::path::Path;

use duplex_latent::corpus::GenConfig;
use duplex_latent::evalsuite::EvalConfig;
use duplex_latent::model::ModelConfig;
use duplex_latent::training::{Stage, StageConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::fail::Fail;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub steps: u64,
    pub peak_lr: f32,
    pub warmup: u64,
}

impl Schedule {
    fn of(stage: Stage) -> Schedule {
        let c = StageConfig::new(stage);
        Schedule {
            steps: c.steps,
            peak_lr: c.peak_lr,
            warmup: c.warmup,
        }
    }
}

/// Hyperparameters shared by all stages plus one schedule per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub alpha: f32,
    pub beta: f32,
    pub bos_scale: f32,
    pub eos_scale: f32,
    pub batch_size: usize,
    pub grad_clip: f32,
    pub seed: u64,
    pub freeze_decoder: bool,
    pub noise: bool,
    pub log_every: u64,
    pub pretrain: Schedule,
    pub sft1: Schedule,
    pub sft2: Schedule,
    pub baseline: Schedule,
}

impl Default for StageSection {
    fn default() -> Self {
        let c = StageConfig::new(Stage::Pretrain);
        StageSection {
            alpha: c.alpha,
            beta: c.beta,
            bos_scale: c.bos_scale,
            eos_scale: c.eos_scale,
            batch_size: c.batch_size,
            grad_clip: c.grad_clip,
            seed: c.seed,
            freeze_decoder: c.freeze_decoder,
            noise: c.noise,
            log_every: c.log_every,
            pretrain: Schedule::of(Stage::Pretrain),
            sft1: Schedule::of(Stage::Sft1),
            sft2: Schedule::of(Stage::Sft2),
            baseline: Schedule::of(Stage::Baseline),
        }
    }
}

impl StageSection {
    pub fn stage_config(&self, stage: Stage) -> StageConfig {
        let s = match stage {
            Stage::Pretrain => self.pretrain,
            Stage::Sft1 => self.sft1,
            Stage::Sft2 => self.sft2,
            Stage::Baseline => self.baseline,
        };
        StageConfig {
            stage,
            alpha: self.alpha,
            beta: self.beta,
            bos_scale: self.bos_scale,
            eos_scale: self.eos_scale,
            batch_size: self.batch_size,
            steps: s.steps,
            peak_lr: s.peak_lr,
            warmup: s.warmup,
            grad_clip: self.grad_clip,
            seed: self.seed,
            freeze_decoder: self.freeze_decoder,
            noise: self.noise,
            log_every: self.log_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub frame_ms: u64,
    pub bind: String,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            frame_ms: duplex_server::DEFAULT_FRAME_MS,
            bind: "127.0.0.1:8765".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stage: StageSection,
    pub generation: GenConfig,
    pub engine: EngineSection,
    pub eval: EvalConfig,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c` to `value`, parsed as JSON when it parses and as a string
/// otherwise.
fn apply_override(tree: &mut Value, spec: &str) -> Result<(), Fail> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Fail::Usage(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Fail::Usage(format!("override {key:?}: {} is not a section", parts[..i].join("."))));
        };
        if !map.contains_key(*part) {
            return Err(Fail::Usage(format!("unknown config key {key:?}")));
        }
        node = map.get_mut(*part).expect("checked");
    }
    *node = value;
    Ok(())
}

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Fail> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Fail::Usage(format!("config {}: {e}", p.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Fail::Usage(format!("config {}: {e}", p.display())))?;
            if !patch.is_object() {
                return Err(Fail::Usage(format!("config {}: top level must be an object", p.display())));
            }
            merge(&mut tree, patch);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        serde_json::from_value(tree).map_err(|e| Fail::Usage(format!("config: {e}")))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved tree.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&sorted(self.to_json())).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn sorted(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<_> = m.into_iter().collect();
            keys.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(keys.into_iter().map(|(k, v)| (k, sorted(v))).collect::<Map<_, _>>())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sorted).collect()),
        other => other,
    }
}
