//! Line-oriented `key=value` config files and the global seed default.

use crate::error::{Error, Result};
use crate::model::PipelineConfig;
use crate::numerics::{AdamwHyper, ScheduleConfig, ScheduleShape};
use crate::trainer::{warmup_for_fraction, BatchSpec, Stage, StageConfig};
use std::collections::BTreeMap;
use std::path::Path;

pub const SEED_ENV: &str = "MIXPIPE_SEED";

/// Seed resolution order: explicit flag, then MIXPIPE_SEED, then 0.
pub fn resolve_seed(explicit: Option<u64>) -> u64 {
    explicit
        .or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

/// Parsed `key=value` file: one pair per line, `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::InvalidConfig(format!("missing config key {key}")))
    }

    pub fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Parse(format!("bad value for {key}: {raw}"))),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_as(key)?.unwrap_or(default))
    }

    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key)
            .map(|raw| raw.split(',').map(|s| s.trim().to_string()).collect())
    }
}

/// Builds the model variant named by `variant`, seeded by `model_seed`.
pub fn pipeline_from(kv: &KvConfig, fallback_seed: u64) -> Result<PipelineConfig> {
    let seed = kv.get_or("model_seed", fallback_seed)?;
    let variant = kv.get("variant").unwrap_or("toy");
    match variant {
        "toy" => Ok(PipelineConfig::toy(seed)),
        "toy-hires" => Ok(PipelineConfig::toy_hires(seed)),
        "toy-global" => {
            let mut cfg = PipelineConfig::toy_hires(seed);
            cfg.global_only = true;
            Ok(cfg)
        }
        other => Err(Error::InvalidConfig(format!("unknown variant {other}"))),
    }
}

/// Builds a stage config from the file, with the toy defaults filled in.
pub fn stage_from(kv: &KvConfig, stage: Stage, fallback_seed: u64) -> Result<StageConfig> {
    let steps: usize = kv
        .parse_as("steps")?
        .ok_or_else(|| Error::InvalidConfig("missing config key steps".into()))?;
    let seed = kv.get_or("seed", fallback_seed)?;

    let defaults = match stage {
        Stage::Pretrain => StageConfig::toy_pretrain(seed, steps),
        Stage::Finetune => StageConfig::toy_finetune(seed, steps),
    };
    let warmup_steps = match kv.parse_as::<f64>("warmup_fraction")? {
        Some(fraction) => warmup_for_fraction(fraction, steps),
        None => kv.get_or("warmup_steps", defaults.schedule.warmup_steps)?,
    };
    let schedule = ScheduleConfig {
        peak_lr: kv.get_or("peak_lr", defaults.schedule.peak_lr)?,
        final_lr: kv.get_or("final_lr", defaults.schedule.final_lr)?,
        warmup_steps,
        total_steps: steps,
        shape: if warmup_steps == 0 { ScheduleShape::Cosine } else { ScheduleShape::LinearWarmupCosine },
    };
    let batch = match stage {
        Stage::Pretrain => BatchSpec::Pretrain {
            caption_items: kv.get_or("caption_items", 4)?,
            text_tokens: kv.get_or("text_tokens", 128)?,
        },
        Stage::Finetune => BatchSpec::Finetune { samples: kv.get_or("batch_samples", 8)? },
    };
    let hyper = AdamwHyper {
        lr: 0.0, // per-step from the schedule
        beta1: kv.get_or("beta1", 0.9)?,
        beta2: kv.get_or("beta2", 0.95)?,
        eps: kv.get_or("adam_eps", 1e-8)?,
        weight_decay: kv.get_or("weight_decay", 0.1)?,
    };
    let trainable = kv
        .list("trainable")
        .unwrap_or_else(|| vec!["lm.".into(), "mix.".into()]);

    let cfg = StageConfig { stage, trainable, schedule, batch, hyper, seed };
    cfg.validate()?;
    Ok(cfg)
}
