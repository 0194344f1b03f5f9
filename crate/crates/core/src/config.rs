//! `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment. Keys are flat and unique.
//! Unknown keys and unparsable values are errors that name the line.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{LrSchedule, TrainConfig};

/// Parsed `(line, key, value)` triples in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    pub entries: Vec<(usize, String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            entries.push((i + 1, k.to_string(), v.to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.1 == key).map(|e| e.2.as_str())
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("line {line}: bad value {value:?} for {key}: {e}")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: bad boolean {value:?} for {key}"))),
    }
}

/// Model, training and decoding settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        };
        c.sync_schedule();
        c
    }
}

/// Every recognised key, for help output.
pub const KEYS: &[&str] = &[
    "architecture",
    "n_layers",
    "reorder_layers",
    "model_dim",
    "hidden_dim",
    "head_count",
    "dropout",
    "vocab_size",
    "temperature",
    "label_smoothing",
    "max_len_offset",
    "max_len",
    "seed",
    "mode",
    "batch_size",
    "max_steps",
    "lr_schedule",
    "lr_start",
    "lr_end",
    "lr",
    "warmup_steps",
    "lr_scale",
    "beta1",
    "beta2",
    "adam_eps",
    "max_grad_norm",
    "distill",
    "ndgd_gold_prefix",
    "strategy",
    "beam_size",
    "lpd_samples",
    "length_noise",
];

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut schedule = "linear".to_string();
        let (mut lr_start, mut lr_end, mut lr) = (3e-4, 1e-5, 3e-4);
        let (mut warmup, mut scale) = (4000u64, 1.0);
        for (line, key, value) in &kv.entries {
            let (line, key, v) = (*line, key.as_str(), value.as_str());
            match key {
                "architecture" => c.model.architecture = parse_value(line, key, v)?,
                "n_layers" => c.model.n_layers = parse_value(line, key, v)?,
                "reorder_layers" => c.model.reorder_layers = parse_value(line, key, v)?,
                "model_dim" => c.model.model_dim = parse_value(line, key, v)?,
                "hidden_dim" => c.model.hidden_dim = parse_value(line, key, v)?,
                "head_count" => c.model.head_count = parse_value(line, key, v)?,
                "dropout" => c.model.dropout_rate = parse_value(line, key, v)?,
                "vocab_size" => c.model.vocab_size = parse_value(line, key, v)?,
                "temperature" => {
                    c.model.temperature = parse_value(line, key, v)?;
                    c.decode.temperature = c.model.temperature;
                }
                "label_smoothing" => {
                    c.model.label_smoothing = parse_value(line, key, v)?;
                    c.train.label_smoothing = c.model.label_smoothing;
                }
                "max_len_offset" => c.model.max_len_offset = parse_value(line, key, v)?,
                "max_len" => {
                    c.model.max_len = parse_value(line, key, v)?;
                    c.decode.max_len = c.model.max_len;
                }
                "seed" => {
                    c.model.seed = parse_value(line, key, v)?;
                    c.train.seed = c.model.seed;
                }
                "mode" => c.train.mode = parse_value(line, key, v)?,
                "batch_size" => c.train.batch_size = parse_value(line, key, v)?,
                "max_steps" => c.train.max_steps = parse_value(line, key, v)?,
                "lr_schedule" => match v {
                    "linear" | "warmup" | "constant" => schedule = v.to_string(),
                    _ => return Err(Error::Config(format!("line {line}: unknown lr_schedule {v:?}"))),
                },
                "lr_start" => lr_start = parse_value(line, key, v)?,
                "lr_end" => lr_end = parse_value(line, key, v)?,
                "lr" => lr = parse_value(line, key, v)?,
                "warmup_steps" => warmup = parse_value(line, key, v)?,
                "lr_scale" => scale = parse_value(line, key, v)?,
                "beta1" => c.train.beta1 = parse_value(line, key, v)?,
                "beta2" => c.train.beta2 = parse_value(line, key, v)?,
                "adam_eps" => c.train.adam_eps = parse_value(line, key, v)?,
                "max_grad_norm" => c.train.max_grad_norm = Some(parse_value(line, key, v)?),
                "distill" => c.train.distill = parse_bool(line, key, v)?,
                "ndgd_gold_prefix" => c.train.ndgd_gold_prefix = parse_bool(line, key, v)?,
                "strategy" => c.decode.strategy = parse_value(line, key, v)?,
                "beam_size" => c.decode.beam_size = parse_value(line, key, v)?,
                "lpd_samples" => c.decode.lpd_samples = parse_value(line, key, v)?,
                "length_noise" => c.decode.length_noise = parse_value(line, key, v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
            }
        }
        c.train.schedule = match schedule.as_str() {
            "warmup" => LrSchedule::Warmup {
                warmup_steps: warmup,
                model_dim: c.model.model_dim,
                scale,
            },
            "constant" => LrSchedule::Constant(lr),
            _ => LrSchedule::Linear {
                start: lr_start,
                end: lr_end,
                total_steps: c.train.max_steps,
            },
        };
        c.train.validate()?;
        c.decode.validate()?;
        Ok(c)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    /// Points a linear schedule's horizon at `max_steps`.
    pub fn sync_schedule(&mut self) {
        if let LrSchedule::Linear { total_steps, .. } = &mut self.train.schedule {
            *total_steps = self.train.max_steps;
        }
    }
}

/// `key = value` lines that rebuild `cfg` through [`model_config_from_kv`].
pub fn model_config_to_kv(cfg: &ModelConfig) -> String {
    format!(
        "architecture = {}\nn_layers = {}\nreorder_layers = {}\nmodel_dim = {}\nhidden_dim = {}\nhead_count = {}\n\
         dropout = {:?}\nvocab_size = {}\ntemperature = {:?}\nlabel_smoothing = {:?}\nmax_len_offset = {}\n\
         max_len = {}\nseed = {}\n",
        cfg.architecture,
        cfg.n_layers,
        cfg.reorder_layers,
        cfg.model_dim,
        cfg.hidden_dim,
        cfg.head_count,
        cfg.dropout_rate,
        cfg.vocab_size,
        cfg.temperature,
        cfg.label_smoothing,
        cfg.max_len_offset,
        cfg.max_len,
        cfg.seed
    )
}

/// Reads only model keys; everything else in `kv` is ignored.
pub fn model_config_from_kv(kv: &KeyValues) -> Result<ModelConfig> {
    let model_keys: BTreeSet<&str> = KEYS[..13].iter().copied().collect();
    let only = KeyValues {
        entries: kv
            .entries
            .iter()
            .filter(|e| model_keys.contains(e.1.as_str()))
            .cloned()
            .collect(),
    };
    Ok(RunConfig::from_kv(&only)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::Strategy;
    use crate::model::{Architecture, ReorderKind};
    use crate::train::GuidingMode;

    #[test]
    fn defaults_without_keys() {
        let c = RunConfig::from_kv(&KeyValues::parse("# nothing\n\n").unwrap()).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.temperature, 0.2);
        assert_eq!(c.train.label_smoothing, 0.15);
        assert_eq!(c.model.max_len_offset, 20);
        assert_eq!((c.train.beta1, c.train.beta2, c.train.adam_eps), (0.9, 0.98, 1e-9));
    }

    #[test]
    fn typed_keys() {
        let text = "architecture = reorder-at\nmode = ndgd # fine-tune\nstrategy=beam\nlpd_samples = 5\n\
                    lr_schedule = warmup\nwarmup_steps = 10\nmodel_dim = 16\ndistill = yes\nmax_steps = 7";
        let c = RunConfig::from_kv(&KeyValues::parse(text).unwrap()).unwrap();
        assert_eq!(c.model.architecture, Architecture::ReorderNat(ReorderKind::At));
        assert_eq!(c.train.mode, GuidingMode::Ndgd);
        assert_eq!(c.decode.strategy, Strategy::AtBeam);
        assert_eq!(c.decode.lpd_samples, 5);
        assert!(c.train.distill);
        assert_eq!(
            c.train.schedule,
            LrSchedule::Warmup {
                warmup_steps: 10,
                model_dim: 16,
                scale: 1.0
            }
        );
    }

    #[test]
    fn errors_name_the_line() {
        for (text, needle) in [
            ("a = 1", "line 1: unknown key"),
            ("\nmodel_dim = x", "line 2: bad value"),
            ("seed 3", "line 1: expected"),
            ("seed = 1\nseed = 2", "line 2: duplicate"),
            ("lpd_samples = 4", "odd"),
        ] {
            let err = KeyValues::parse(text).and_then(|kv| RunConfig::from_kv(&kv)).unwrap_err();
            assert!(err.to_string().contains(needle), "{err}");
        }
    }

    #[test]
    fn model_config_round_trip() {
        let cfg = ModelConfig {
            architecture: Architecture::PlainNat,
            vocab_size: 77,
            temperature: 0.35,
            dropout_rate: 0.1,
            seed: 9,
            ..Default::default()
        };
        let back = model_config_from_kv(&KeyValues::parse(&model_config_to_kv(&cfg)).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
