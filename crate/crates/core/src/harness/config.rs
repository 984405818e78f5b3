//! Experiment configuration: plain `key=value` lines with `#` comments,
//! overridable from the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::PoolPosition;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, ResidualStyle};
use crate::head::HeadKind;
use crate::model::ModelConfig;
use crate::prompter::LabelSource;

use super::synthetic::DataConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingType {
    Text,
    Image,
    Both,
}

impl FromStr for MissingType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "image" => Ok(Self::Image),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!(
                "missing_type must be text, image or both, got '{s}'"
            ))),
        }
    }
}

impl fmt::Display for MissingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Image => "image",
            Self::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub missing_type: MissingType,
    /// Test-set missing rate in percent.
    pub missing_rate: u32,
    /// Training-set missing rate; defaults to the test rate.
    pub train_missing_rate: Option<u32>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            missing_type: MissingType::Both,
            missing_rate: 70,
            train_missing_rate: None,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
            data: DataConfig::default(),
            model,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

impl ExperimentConfig {
    pub fn train_rate(&self) -> u32 {
        self.train_missing_rate.unwrap_or(self.missing_rate)
    }

    /// Sets one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, v) = (key.trim(), value.trim());
        let m = &mut self.model;
        let d = &mut self.data;
        match k {
            "missing_type" => self.missing_type = v.parse()?,
            "missing_rate" => self.missing_rate = parse(k, v)?,
            "train_missing_rate" => self.train_missing_rate = Some(parse(k, v)?),
            "epochs" => self.epochs = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "classes" => m.classes = parse(k, v)?,
            "n_train" => d.n_train = parse(k, v)?,
            "n_val" => d.n_val = parse(k, v)?,
            "n_test" => d.n_test = parse(k, v)?,
            "separation" => d.separation = parse(k, v)?,
            "noise_fraction" => d.noise_fraction = parse(k, v)?,
            "prototypes" => d.prototypes = parse(k, v)?,
            "topic_size" => d.topic_size = parse(k, v)?,
            "vocab" => m.vocab = parse(k, v)?,
            "patch_dim" => m.patch_dim = parse(k, v)?,
            "d" => m.d = parse(k, v)?,
            "n" => m.n = parse(k, v)?,
            "m" => m.m = parse(k, v)?,
            "layers" => m.layers = parse(k, v)?,
            "heads" => m.heads = parse(k, v)?,
            "b" | "insert_layer" => m.insert_layer = parse(k, v)?,
            "ffn_mult" => m.ffn_mult = parse(k, v)?,
            "k" | "K" => m.k = parse(k, v)?,
            "l" | "prompt_len" => m.prompt_len = parse(k, v)?,
            "variant" => m.variant = v.parse()?,
            "head" => {
                m.head = match v {
                    "softmax" => HeadKind::Softmax,
                    "sigmoid" => HeadKind::Sigmoid,
                    _ => return Err(Error::Config(format!("head must be softmax or sigmoid, got '{v}'"))),
                }
            }
            "label_source" => {
                m.label_source = match v {
                    "union" => LabelSource::Union,
                    "text" => LabelSource::Text,
                    "vision" => LabelSource::Vision,
                    _ => {
                        return Err(Error::Config(format!(
                            "label_source must be union, text or vision, got '{v}'"
                        )))
                    }
                }
            }
            "pool_position" => {
                m.pool_position = match v {
                    "first" => PoolPosition::First,
                    "first_after_prompts" => PoolPosition::FirstAfterPrompts,
                    _ => {
                        return Err(Error::Config(format!(
                            "pool_position must be first or first_after_prompts, got '{v}'"
                        )))
                    }
                }
            }
            "share_label_matrix" => m.share_label_matrix = parse_bool(k, v)?,
            "dropout" => m.generator.dropout = parse(k, v)?,
            "residual_style" => {
                m.generator.residual_style = match v {
                    "literal" => ResidualStyle::Literal,
                    "sublayer" => ResidualStyle::Sublayer,
                    _ => {
                        return Err(Error::Config(format!(
                            "residual_style must be literal or sublayer, got '{v}'"
                        )))
                    }
                }
            }
            "backbone_seed" => m.backbone_seed = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key '{k}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for rate in [self.missing_rate, self.train_rate()] {
            if rate > 100 {
                return Err(Error::Config(format!("missing rate {rate} exceeds 100")));
            }
            if self.missing_type == MissingType::Both && rate % 2 != 0 {
                return Err(Error::Config(format!(
                    "missing rate {rate} must be even for missing_type=both"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lr) || !ok(self.weight_decay) {
            return Err(Error::Config(
                "lr and weight_decay must be finite and non-negative".into(),
            ));
        }
        self.data.validate(&self.model)?;
        self.model.validate()
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model
        }
    }

    /// Every setting as text, for echoing into reports.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let d = &self.data;
        let g: &GeneratorConfig = &m.generator;
        let mut out = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        put("missing_type", self.missing_type.to_string());
        put("missing_rate", self.missing_rate.to_string());
        if let Some(r) = self.train_missing_rate {
            put("train_missing_rate", r.to_string());
        }
        put("epochs", self.epochs.to_string());
        put("lr", self.lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("classes", m.classes.to_string());
        put("n_train", d.n_train.to_string());
        put("n_val", d.n_val.to_string());
        put("n_test", d.n_test.to_string());
        put("separation", d.separation.to_string());
        put("noise_fraction", d.noise_fraction.to_string());
        put("prototypes", d.prototypes.to_string());
        put("topic_size", d.topic_size.to_string());
        put("vocab", m.vocab.to_string());
        put("patch_dim", m.patch_dim.to_string());
        put("d", m.d.to_string());
        put("n", m.n.to_string());
        put("m", m.m.to_string());
        put("layers", m.layers.to_string());
        put("heads", m.heads.to_string());
        put("insert_layer", m.insert_layer.to_string());
        put("ffn_mult", m.ffn_mult.to_string());
        put("k", m.k.to_string());
        put("prompt_len", m.prompt_len.to_string());
        put("variant", m.variant.to_string());
        put("head", format!("{:?}", m.head).to_lowercase());
        put("label_source", format!("{:?}", m.label_source).to_lowercase());
        put(
            "pool_position",
            match m.pool_position {
                PoolPosition::First => "first".into(),
                PoolPosition::FirstAfterPrompts => "first_after_prompts".into(),
            },
        );
        put("share_label_matrix", m.share_label_matrix.to_string());
        put("dropout", g.dropout.to_string());
        put("residual_style", format!("{:?}", g.residual_style).to_lowercase());
        put("backbone_seed", m.backbone_seed.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_text_with_comments() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "# header\nmissing_type = text\nmissing_rate=30 # trailing\n\nvariant=padding+static_prompt\nK=3\n",
        )
        .unwrap();
        assert_eq!(cfg.missing_type, MissingType::Text);
        assert_eq!(cfg.missing_rate, 30);
        assert_eq!(cfg.model.k, 3);
        assert_eq!(cfg.model.variant, "padding+static_prompt".parse().unwrap());
    }

    #[test]
    fn overrides_win_and_errors_are_config_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("epochs=5").unwrap();
        cfg.apply_overrides(&["epochs=7"]).unwrap();
        assert_eq!(cfg.epochs, 7);
        for bad in ["nonsense=1", "epochs=abc", "variant=bogus", "noequals"] {
            let err = cfg.apply_overrides(&[bad]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn odd_rate_rejected_for_both() {
        let mut cfg = ExperimentConfig {
            missing_rate: 35,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.missing_type = MissingType::Text;
        assert!(cfg.validate().is_ok());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&[
            "variant=no_label",
            "head=sigmoid",
            "pool_position=first_after_prompts",
            "seed=9",
        ])
        .unwrap();
        let mut again = ExperimentConfig::default();
        for (k, v) in cfg.to_pairs() {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(again, cfg);
    }
}
