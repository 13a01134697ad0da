use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::abstractor::{DEFAULT_CROP_SIZE, DEFAULT_MAX_CROPS, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, ScaleInit};
use crate::tensorcore::MaskMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Alignment objectives on pooled visual features only.
    #[default]
    Pretrain,
    /// Adds the language-model branch: alignment on hidden states plus next-token loss.
    TokenAlign,
    /// Next-token loss only; the alignment branch is off.
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub stage: Stage,
    pub enable_llm_alignment: bool,
    pub mask_mode: MaskMode,
    pub normalize_sig: bool,
    /// Treat pairs with the same token id as positives in the sigmoid loss.
    pub group_labels: bool,
    /// Pair the space token with the pooled background of each image.
    pub background_token: bool,

    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub embed_dim: usize,
    pub attention: bool,
    pub scale_init: ScaleInit,

    pub crop_size: usize,
    pub max_crops: usize,
    pub window: usize,
    pub llm_hidden: usize,
    pub llm_layers: usize,
    pub llm_tap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 8,
            lr: 3e-3,
            max_steps: None,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            stage: Stage::Pretrain,
            enable_llm_alignment: true,
            mask_mode: MaskMode::Threshold,
            normalize_sig: false,
            group_labels: true,
            background_token: true,
            patch_size: 14,
            encoder_dim: 32,
            encoder_layers: 2,
            embed_dim: 32,
            attention: false,
            scale_init: ScaleInit::Ln,
            crop_size: DEFAULT_CROP_SIZE,
            max_crops: DEFAULT_MAX_CROPS,
            window: DEFAULT_WINDOW,
            llm_hidden: 32,
            llm_layers: 2,
            llm_tap: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "max_steps" => self.max_steps = Some(parse(key, v)?),
            "optimizer" => {
                self.optimizer = match v {
                    "adamw" => OptimizerKind::AdamW,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
                }
            }
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "w_dis" => self.weights.dis = parse(key, v)?,
            "w_sim" => self.weights.sim = parse(key, v)?,
            "w_sig" => self.weights.sig = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "stage" => {
                self.stage = match v {
                    "pretrain" => Stage::Pretrain,
                    "token_align" => Stage::TokenAlign,
                    "finetune" => Stage::Finetune,
                    _ => return Err(Error::Config(format!("unknown stage {v:?}"))),
                }
            }
            "enable_llm_alignment" => self.enable_llm_alignment = parse_bool(key, v)?,
            "mask_mode" => {
                self.mask_mode = match v {
                    "threshold" => MaskMode::Threshold,
                    "soft" => MaskMode::Soft,
                    _ => return Err(Error::Config(format!("unknown mask_mode {v:?}"))),
                }
            }
            "normalize_sig" => self.normalize_sig = parse_bool(key, v)?,
            "group_labels" => self.group_labels = parse_bool(key, v)?,
            "background_token" => self.background_token = parse_bool(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "encoder_dim" => self.encoder_dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "attention" => self.attention = parse_bool(key, v)?,
            "scale_init" => {
                self.scale_init = match v {
                    "ln" => ScaleInit::Ln,
                    "log10" => ScaleInit::Log10,
                    _ => return Err(Error::Config(format!("unknown scale_init {v:?}"))),
                }
            }
            "crop_size" => self.crop_size = parse(key, v)?,
            "max_crops" => self.max_crops = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "llm_hidden" => self.llm_hidden = parse(key, v)?,
            "llm_layers" => self.llm_layers = parse(key, v)?,
            "llm_tap" => self.llm_tap = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks ranges and applies the finetune rule (alignment branch off).
    pub fn validate(&mut self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.stage == Stage::Finetune {
            self.enable_llm_alignment = false;
        }
        if self.stage != Stage::Finetune {
            self.weights.validate()?;
        }
        if self.stage != Stage::Pretrain {
            let side = 4 * self.crop_size / self.patch_size.max(1);
            if self.patch_size == 0 || !self.crop_size.is_multiple_of(self.patch_size) || self.window == 0 || !side.is_multiple_of(self.window) {
                return Err(Error::Config(format!(
                    "crop_size {} with patch {} and window {} does not tile",
                    self.crop_size, self.patch_size, self.window
                )));
            }
            if self.llm_tap > self.llm_layers {
                return Err(Error::Config("llm_tap must be <= llm_layers".into()));
            }
        }
        self.model_config(1).validate()
    }

    /// Whether hidden-state alignment runs in this configuration.
    pub fn llm_alignment_active(&self) -> bool {
        self.stage == Stage::TokenAlign && self.enable_llm_alignment
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            patch_size: self.patch_size,
            encoder_dim: self.encoder_dim,
            encoder_layers: self.encoder_layers,
            embed_dim: self.embed_dim,
            vocab_size,
            seed: self.seed,
            attention: self.attention,
            scale_init: self.scale_init,
        }
    }

    /// Serializes back to the `key = value` form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = |v: bool| if v { "true" } else { "false" };
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        if let Some(m) = self.max_steps {
            let _ = writeln!(s, "max_steps = {m}");
        }
        let opt = match self.optimizer {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        };
        let _ = writeln!(s, "optimizer = {opt}");
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "w_dis = {}", self.weights.dis);
        let _ = writeln!(s, "w_sim = {}", self.weights.sim);
        let _ = writeln!(s, "w_sig = {}", self.weights.sig);
        let _ = writeln!(s, "seed = {}", self.seed);
        let stage = match self.stage {
            Stage::Pretrain => "pretrain",
            Stage::TokenAlign => "token_align",
            Stage::Finetune => "finetune",
        };
        let _ = writeln!(s, "stage = {stage}");
        let _ = writeln!(s, "enable_llm_alignment = {}", b(self.enable_llm_alignment));
        let mm = match self.mask_mode {
            MaskMode::Threshold => "threshold",
            MaskMode::Soft => "soft",
        };
        let _ = writeln!(s, "mask_mode = {mm}");
        let _ = writeln!(s, "normalize_sig = {}", b(self.normalize_sig));
        let _ = writeln!(s, "group_labels = {}", b(self.group_labels));
        let _ = writeln!(s, "background_token = {}", b(self.background_token));
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "encoder_dim = {}", self.encoder_dim);
        let _ = writeln!(s, "encoder_layers = {}", self.encoder_layers);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "attention = {}", b(self.attention));
        let si = match self.scale_init {
            ScaleInit::Ln => "ln",
            ScaleInit::Log10 => "log10",
        };
        let _ = writeln!(s, "scale_init = {si}");
        let _ = writeln!(s, "crop_size = {}", self.crop_size);
        let _ = writeln!(s, "max_crops = {}", self.max_crops);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "llm_hidden = {}", self.llm_hidden);
        let _ = writeln!(s, "llm_layers = {}", self.llm_layers);
        let _ = writeln!(s, "llm_tap = {}", self.llm_tap);
        s
    }
}
