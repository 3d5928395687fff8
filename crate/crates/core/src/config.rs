//! Plain-text run configuration: `section.key = value` lines.
//!
//! One file (plus `--set` overrides) resolves every knob of the frontend, the
//! model, the training loop and the synthetic corpus. [`RunConfig::render`]
//! prints the fully resolved view in a fixed key order; parsing the rendered
//! text gives back the same config.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, MeanNorm};
use crate::model::{format_blocks, parse_blocks, ModelConfig, PoolingMode, Profile};
use crate::numerics::DType;

/// Which classes get the splice augmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MinorityClasses {
    /// Classes with fewer than half the examples of the largest one.
    Auto,
    Listed(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_epochs: usize,
    pub batch_size: usize,
    /// Epochs between dev evaluations.
    pub eval_every: usize,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop as soon as dev macro F1 reaches this value.
    pub target_f1: Option<f64>,
    pub augment: bool,
    pub augment_probability: f64,
    pub augment_segment_s: f64,
    pub minority_classes: MinorityClasses,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_grad_norm: Option<f64>,
    pub precision: DType,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            initial_lr: 0.001,
            lr_decay: 0.5,
            lr_decay_epochs: 7,
            batch_size: match profile {
                Profile::Full => 200,
                Profile::Toy => 16,
            },
            eval_every: 5,
            patience: 3,
            max_epochs: 60,
            seed: 0,
            target_f1: None,
            augment: true,
            augment_probability: 0.5,
            augment_segment_s: 5.0,
            minority_classes: MinorityClasses::Auto,
            clip_grad_norm: None,
            precision: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("train.lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        for (k, v) in [
            ("lr_decay_epochs", self.lr_decay_epochs),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return bad(format!("train.{k} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return bad(format!(
                "train.augment_probability must be in [0, 1], got {}",
                self.augment_probability
            ));
        }
        if !(self.augment_segment_s > 0.0) {
            return bad("train.augment_segment_s must be positive".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad(format!("train.clip_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Toy)
    }
}

/// Learning rate for a zero-based epoch: step decay.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_epochs) as i32)
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Toy)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "off" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn optional(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            features: FeatureConfig::default(),
            model: ModelConfig::for_profile(profile),
            train: TrainConfig::for_profile(profile),
            synth: SynthConfig::default(),
        }
    }

    /// Parses config text. A `model.profile` line resets model and batch-size
    /// defaults before any other key applies, wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&parse_lines(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` pairs in order, profile first.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let profile = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "model.profile")
            .map(|(_, v)| Profile::parse(v).ok_or_else(|| Error::Config(format!("model.profile: unknown profile {v:?}"))))
            .transpose()?
            .unwrap_or(Profile::Toy);
        let mut cfg = Self::for_profile(profile);
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies further `key=value` overrides on top of this config. Overriding
    /// `model.profile` restarts the model and train sections from that
    /// profile's defaults.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = parse_lines(&self.render())?;
        if overrides.iter().any(|(k, _)| k == "model.profile") {
            entries.retain(|(k, _)| !k.starts_with("model.") && !k.starts_with("train."));
        }
        entries.extend_from_slice(overrides);
        Self::from_entries(&entries)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.model.n_mels != self.features.n_mels {
            return Err(Error::Config("model and frontend disagree on n_mels".into()));
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let f = &mut self.features;
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "features.sample_rate" => f.sample_rate = parse_num(key, v)?,
            "features.window" => f.window = parse_num(key, v)?,
            "features.hop" => f.hop = parse_num(key, v)?,
            "features.n_mels" => {
                f.n_mels = parse_num(key, v)?;
                m.n_mels = f.n_mels;
            }
            "features.f_min" => f.f_min = parse_num(key, v)?,
            "features.f_max" => f.f_max = if v == "nyquist" { None } else { Some(parse_num(key, v)?) },
            "features.log_floor" => f.log_floor = parse_num(key, v)?,
            "features.mean_norm" => {
                f.mean_norm = MeanNorm::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown mode {v:?}")))?
            }

            // Applied up front by `from_entries`; only checked here.
            "model.profile" => {
                let p = Profile::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown profile {v:?}")))?;
                m.profile = p;
            }
            "model.blocks" => m.blocks = parse_blocks(v)?,
            "model.lstm_hidden" => m.lstm_hidden = parse_num(key, v)?,
            "model.heads" => m.heads = parse_num(key, v)?,
            "model.sigma" => m.temperature = parse_num(key, v)?,
            "model.classifier_hidden" => m.classifier_hidden = parse_list(key, v)?,
            "model.n_classes" => m.n_classes = parse_num(key, v)?,
            "model.dropout_pooled" => m.dropout_pooled = parse_num(key, v)?,
            "model.dropout_hidden" => m.dropout_hidden = parse_num(key, v)?,
            "model.pooling_mode" => {
                m.pooling = PoolingMode::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown mode {v:?}")))?
            }

            "train.lr" => t.initial_lr = parse_num(key, v)?,
            "train.lr_decay" => t.lr_decay = parse_num(key, v)?,
            "train.lr_decay_epochs" => t.lr_decay_epochs = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.eval_every" => t.eval_every = parse_num(key, v)?,
            "train.patience" => t.patience = parse_num(key, v)?,
            "train.max_epochs" => t.max_epochs = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.target_f1" => t.target_f1 = parse_optional(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.augment_probability" => t.augment_probability = parse_num(key, v)?,
            "train.augment_segment_s" => t.augment_segment_s = parse_num(key, v)?,
            "train.minority_classes" => {
                t.minority_classes = if v == "auto" {
                    MinorityClasses::Auto
                } else {
                    MinorityClasses::Listed(parse_list(key, v)?)
                }
            }
            "train.clip_grad_norm" => t.clip_grad_norm = parse_optional(key, v)?,
            "train.precision" => {
                t.precision = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("{key}: expected f32 or f64, got {v:?}"))),
                }
            }

            "synth.n_classes" => s.n_classes = parse_num(key, v)?,
            "synth.types_per_class" => s.types_per_class = parse_num(key, v)?,
            "synth.n_event_types" => s.n_event_types = parse_num(key, v)?,
            "synth.sample_rate" => s.sample_rate = parse_num(key, v)?,
            "synth.clip_s" => s.clip_s = parse_num(key, v)?,
            "synth.events_min" => s.events_min = parse_num(key, v)?,
            "synth.events_max" => s.events_max = parse_num(key, v)?,
            "synth.event_min_s" => s.event_min_s = parse_num(key, v)?,
            "synth.event_max_s" => s.event_max_s = parse_num(key, v)?,
            "synth.gap_s" => s.gap_s = parse_num(key, v)?,
            "synth.snr_min_db" => s.snr_min_db = parse_num(key, v)?,
            "synth.snr_max_db" => s.snr_max_db = parse_num(key, v)?,
            "synth.noise_min" => s.noise_min = parse_num(key, v)?,
            "synth.noise_max" => s.noise_max = parse_num(key, v)?,
            "synth.train_clips" => s.n_train = parse_num(key, v)?,
            "synth.dev_clips" => s.n_dev = parse_num(key, v)?,
            "synth.eval_clips" => s.n_eval = parse_num(key, v)?,
            "synth.seed" => s.seed = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn render(&self) -> String {
        let (f, m, t, s) = (&self.features, &self.model, &self.train, &self.synth);
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("features.sample_rate", f.sample_rate.to_string());
        put("features.window", f.window.to_string());
        put("features.hop", f.hop.to_string());
        put("features.n_mels", f.n_mels.to_string());
        put("features.f_min", f.f_min.to_string());
        put("features.f_max", f.f_max.map_or_else(|| "nyquist".into(), |x| x.to_string()));
        put("features.log_floor", f.log_floor.to_string());
        put("features.mean_norm", f.mean_norm.as_str().into());

        put("model.profile", m.profile.as_str().into());
        put("model.blocks", format_blocks(&m.blocks));
        put("model.lstm_hidden", m.lstm_hidden.to_string());
        put("model.heads", m.heads.to_string());
        put("model.sigma", m.temperature.to_string());
        put("model.classifier_hidden", join(&m.classifier_hidden));
        put("model.n_classes", m.n_classes.to_string());
        put("model.dropout_pooled", m.dropout_pooled.to_string());
        put("model.dropout_hidden", m.dropout_hidden.to_string());
        put("model.pooling_mode", m.pooling.as_str().into());

        put("train.lr", t.initial_lr.to_string());
        put("train.lr_decay", t.lr_decay.to_string());
        put("train.lr_decay_epochs", t.lr_decay_epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("train.patience", t.patience.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.seed", t.seed.to_string());
        put("train.target_f1", optional(t.target_f1));
        put("train.augment", t.augment.to_string());
        put("train.augment_probability", t.augment_probability.to_string());
        put("train.augment_segment_s", t.augment_segment_s.to_string());
        put(
            "train.minority_classes",
            match &t.minority_classes {
                MinorityClasses::Auto => "auto".into(),
                MinorityClasses::Listed(v) => join(v),
            },
        );
        put("train.clip_grad_norm", optional(t.clip_grad_norm));
        put(
            "train.precision",
            match t.precision {
                DType::F32 => "f32".into(),
                DType::F64 => "f64".into(),
            },
        );

        put("synth.n_classes", s.n_classes.to_string());
        put("synth.types_per_class", s.types_per_class.to_string());
        put("synth.n_event_types", s.n_event_types.to_string());
        put("synth.sample_rate", s.sample_rate.to_string());
        put("synth.clip_s", s.clip_s.to_string());
        put("synth.events_min", s.events_min.to_string());
        put("synth.events_max", s.events_max.to_string());
        put("synth.event_min_s", s.event_min_s.to_string());
        put("synth.event_max_s", s.event_max_s.to_string());
        put("synth.gap_s", s.gap_s.to_string());
        put("synth.snr_min_db", s.snr_min_db.to_string());
        put("synth.snr_max_db", s.snr_max_db.to_string());
        put("synth.noise_min", s.noise_min.to_string());
        put("synth.noise_max", s.noise_max.to_string());
        put("synth.train_clips", s.n_train.to_string());
        put("synth.dev_clips", s.n_dev.to_string());
        put("synth.eval_clips", s.n_eval.to_string());
        put("synth.seed", s.seed.to_string());
        out
    }
}

/// Splits config text into `(key, value)` pairs. `#` starts a comment.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`, got {raw:?}", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `section.key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form section.key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
