//! Run configuration: TOML sections, every key optional with a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subrefine::corpus::{NoiseSpec, ToySpec};
use subrefine::dual_attention::DAConfig;
use subrefine::error_detection::DetectorConfig;
use subrefine::refinement::Heuristic;
use subrefine::single_attention::SAConfig;
use subrefine::training::TrainConfig;

/// A problem with the configuration or the command line; exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub paths: PathsSection,
    pub toy: ToySection,
    pub noise: NoiseSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub refine: RefineSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

/// Triple files; empty means `<out>/<split>.tsv`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub train: String,
    pub valid_selector: String,
    pub valid_choice: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub dictionary_noise: f64,
    pub reorder_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub substitution_rate: f64,
    pub confusion_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_size: usize,
    pub valid_selector_size: usize,
    pub valid_choice_size: usize,
    pub test_size: usize,
    pub min_count: usize,
    pub max_vocab: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub context_dim: usize,
    pub attention_dim: usize,
    pub hidden_dim: usize,
    pub k: usize,
    pub conv_width: usize,
    pub detector_hidden_dim: usize,
    pub detector_threshold: f64,
    pub selector_hidden_dim: usize,
    /// Initialize lookup tables from `embed.ckpt` (written by `embed-init`).
    pub hellinger_init: bool,
    pub cooccurrence_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Substitution models, whose loss sums over a sentence's positions.
    pub lr: f64,
    pub epochs: usize,
    /// The detector averages its loss over positions and takes larger steps.
    pub detector_lr: f64,
    pub patience: usize,
    pub selector_lr: f64,
    pub selector_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    /// `single` or `dual`.
    pub model: String,
    pub heuristic: String,
    pub threshold: f64,
    pub budget: usize,
    /// Split to refine, evaluate and run oracles on.
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub heuristics: Vec<String>,
    pub split: String,
    pub max_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection { seed: 1 },
            paths: PathsSection::default(),
            toy: ToySection {
                source_vocab_size: 100,
                target_vocab_size: 100,
                min_length: 4,
                max_length: 10,
                dictionary_noise: 0.1,
                reorder_window: 1,
            },
            noise: NoiseSection {
                substitution_rate: 0.32,
                confusion_size: 3,
            },
            data: DataSection {
                train_size: 2000,
                valid_selector_size: 200,
                valid_choice_size: 200,
                test_size: 200,
                min_count: 1,
                max_vocab: 100_000,
            },
            model: ModelSection {
                embed_dim: 32,
                context_dim: 32,
                attention_dim: 32,
                hidden_dim: 64,
                k: 4,
                conv_width: 5,
                detector_hidden_dim: 32,
                detector_threshold: 0.5,
                selector_hidden_dim: subrefine::refinement::SELECTOR_HIDDEN,
                hellinger_init: false,
                cooccurrence_window: 2,
            },
            train: TrainSection {
                lr: 0.01,
                epochs: 15,
                detector_lr: 0.03,
                patience: 2,
                selector_lr: 0.1,
                selector_epochs: 30,
            },
            refine: RefineSection {
                model: "dual".into(),
                heuristic: "pr".into(),
                threshold: 0.5,
                budget: 3,
                split: "test".into(),
            },
            sweep: SweepSection {
                heuristics: vec!["conf".into(), "pr".into(), "cl".into()],
                split: "valid_choice".into(),
                max_budget: 10,
            },
        }
    }
}

/// Section defaults come from the full default config.
macro_rules! section_default {
    ($($ty:ident => $field:ident),* $(,)?) => {$(
        impl Default for $ty {
            fn default() -> Self {
                RunConfig::default().$field
            }
        }
    )*};
}

section_default!(
    RunSection => run,
    ToySection => toy,
    NoiseSection => noise,
    DataSection => data,
    ModelSection => model,
    TrainSection => train,
    RefineSection => refine,
    SweepSection => sweep,
);

pub const SPLITS: [&str; 4] = ["train", "valid_selector", "valid_choice", "test"];
pub const MANIFEST_TABLE: &str = "manifest";

impl RunConfig {
    /// Reads a config file (a manifest is accepted too) and applies
    /// `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_error(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_error(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        table.remove(MANIFEST_TABLE);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let bad = |m: String| Err(config_error(m));
        if self.toy.min_length == 0 || self.toy.min_length > self.toy.max_length {
            return bad(format!(
                "toy.min_length {} and toy.max_length {} must satisfy 1 <= min <= max",
                self.toy.min_length, self.toy.max_length
            ));
        }
        if !(0.0..=1.0).contains(&self.noise.substitution_rate) {
            return bad("noise.substitution_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.refine.threshold) {
            return bad("refine.threshold must lie in [0, 1]".into());
        }
        if self.model.conv_width.is_multiple_of(2) {
            return bad("model.conv_width must be odd".into());
        }
        if !["single", "dual"].contains(&self.refine.model.as_str()) {
            return bad(format!("refine.model must be single or dual, not '{}'", self.refine.model));
        }
        for split in [&self.refine.split, &self.sweep.split] {
            if !SPLITS.contains(&split.as_str()) {
                return bad(format!("unknown split '{split}' (expected one of {SPLITS:?})"));
            }
        }
        self.heuristic()?;
        self.sweep_heuristics()?;
        Ok(())
    }

    pub fn heuristic(&self) -> anyhow::Result<Heuristic> {
        self.refine.heuristic.parse().map_err(|e: subrefine::Error| config_error(e.to_string()))
    }

    pub fn sweep_heuristics(&self) -> anyhow::Result<Vec<Heuristic>> {
        if self.sweep.heuristics.is_empty() {
            return Err(config_error("sweep.heuristics must not be empty"));
        }
        self.sweep
            .heuristics
            .iter()
            .map(|h| h.parse().map_err(|e: subrefine::Error| config_error(e.to_string())))
            .collect()
    }

    pub fn split_path(&self, out: &Path, split: &str) -> PathBuf {
        let configured = match split {
            "train" => &self.paths.train,
            "valid_selector" => &self.paths.valid_selector,
            "valid_choice" => &self.paths.valid_choice,
            _ => &self.paths.test,
        };
        if configured.is_empty() {
            out.join(format!("{split}.tsv"))
        } else {
            PathBuf::from(configured)
        }
    }

    pub fn toy_spec(&self) -> ToySpec {
        ToySpec {
            source_vocab_size: self.toy.source_vocab_size,
            target_vocab_size: self.toy.target_vocab_size,
            sentence_length_range: (self.toy.min_length, self.toy.max_length),
            dictionary_noise: self.toy.dictionary_noise,
            reorder_window: self.toy.reorder_window,
            seed: self.run.seed,
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            substitution_rate: self.noise.substitution_rate,
            confusion_size: self.noise.confusion_size,
            seed: self.run.seed.wrapping_add(1),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            seed: self.run.seed,
            patience: self.train.patience,
        }
    }

    pub fn detector_train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.detector_lr,
            ..self.train_config()
        }
    }

    pub fn selector_train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.selector_lr,
            epochs: self.train.selector_epochs,
            seed: self.run.seed,
            patience: self.train.patience,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.detector_hidden_dim,
            conv_width: self.model.conv_width,
        }
    }

    pub fn sa_config(&self, left_only: bool) -> SAConfig {
        SAConfig {
            embed_dim: self.model.embed_dim,
            context_dim: self.model.context_dim,
            hidden_dim: self.model.hidden_dim,
            k: self.model.k,
            source_conv_width: self.model.conv_width,
            left_only,
        }
    }

    pub fn da_config(&self) -> DAConfig {
        DAConfig {
            embed_dim: self.model.embed_dim,
            context_dim: self.model.context_dim,
            attention_dim: self.model.attention_dim,
            hidden_dim: self.model.hidden_dim,
            k: self.model.k,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_error(format!("override '{spec}' is not section.key=value")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| config_error(format!("override key '{key}' is not section.key")))?;
    let raw = raw.trim();
    // Bare words are taken as strings so `refine.model=single` works unquoted.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(config_error(format!("'{section}' is not a section")));
    };
    sec.insert(field.to_string(), value);
    Ok(())
}
