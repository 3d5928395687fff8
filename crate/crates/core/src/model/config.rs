use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    Attention,
    /// Global maximum over time instead of the attention heads.
    MaxPool,
}

impl PoolingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMode::Attention => "attention",
            PoolingMode::MaxPool => "maxpool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(PoolingMode::Attention),
            "maxpool" => Some(PoolingMode::MaxPool),
            _ => None,
        }
    }
}

/// A run of 3x3 conv + batchnorm + ReLU layers followed by one max-pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlock {
    /// Output channels of each conv layer.
    pub filters: Vec<usize>,
    /// Pool window and stride as (frequency, time).
    pub pool: (usize, usize),
}

impl ConvBlock {
    pub fn new(filters: usize, layers: usize, pool: (usize, usize)) -> Self {
        Self {
            filters: vec![filters; layers],
            pool,
        }
    }
}

/// Formats blocks as `64x2:2x2,128x2:2x2` (filters x layers : pool freq x time).
pub fn format_blocks(blocks: &[ConvBlock]) -> String {
    blocks
        .iter()
        .map(|b| {
            let uniform = b.filters.iter().all(|&f| f == b.filters[0]);
            let layers = if uniform {
                format!("{}x{}", b.filters[0], b.filters.len())
            } else {
                b.filters.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
            };
            format!("{layers}:{}x{}", b.pool.0, b.pool.1)
        })
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_blocks(s: &str) -> Result<Vec<ConvBlock>> {
    let bad = || Error::Config(format!("cannot parse conv blocks {s:?}; expected e.g. 64x2:2x2,128x2:2x1"));
    let pair = |t: &str| -> Result<(usize, usize)> {
        let (a, b) = t.split_once('x').ok_or_else(bad)?;
        Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    };
    let blocks = s
        .split(',')
        .map(|part| {
            let (layers, pool) = part.trim().split_once(':').ok_or_else(bad)?;
            let filters = if layers.contains('+') {
                layers
                    .split('+')
                    .map(|f| f.trim().parse().map_err(|_| bad()))
                    .collect::<Result<Vec<usize>>>()?
            } else {
                let (f, n) = pair(layers)?;
                vec![f; n]
            };
            Ok(ConvBlock {
                filters,
                pool: pair(pool)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if blocks.is_empty() {
        return Err(bad());
    }
    Ok(blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Full,
    Toy,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Profile::Full),
            "toy" => Some(Profile::Toy),
            _ => None,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub profile: Profile,
    pub n_mels: usize,
    pub blocks: Vec<ConvBlock>,
    /// Hidden units per LSTM direction; frame features have twice this width.
    pub lstm_hidden: usize,
    pub heads: usize,
    pub temperature: f64,
    pub classifier_hidden: Vec<usize>,
    pub n_classes: usize,
    /// Dropout on the pooled utterance vector.
    pub dropout_pooled: f64,
    /// Dropout after each classifier hidden layer.
    pub dropout_hidden: f64,
    pub pooling: PoolingMode,
}

impl ModelConfig {
    /// The paper-scale network.
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            n_mels: 64,
            blocks: vec![
                ConvBlock::new(64, 2, (2, 2)),
                ConvBlock::new(128, 2, (2, 2)),
                ConvBlock::new(256, 3, (2, 2)),
                ConvBlock::new(512, 3, (2, 1)),
                ConvBlock::new(512, 3, (2, 1)),
            ],
            lstm_hidden: 256,
            heads: 9,
            temperature: 0.2,
            classifier_hidden: vec![512, 512],
            n_classes: 9,
            dropout_pooled: 0.3,
            dropout_hidden: 0.3,
            pooling: PoolingMode::Attention,
        }
    }

    /// Small network that trains in minutes on one CPU.
    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            blocks: vec![ConvBlock::new(16, 1, (2, 2)), ConvBlock::new(32, 1, (2, 2))],
            lstm_hidden: 32,
            classifier_hidden: vec![64, 64],
            ..Self::full()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => Self::full(),
            Profile::Toy => Self::toy(),
        }
    }

    /// Width `p` of each frame feature after the BiLSTM.
    pub fn feature_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// Frequency bands left after all pools.
    pub fn pooled_bands(&self) -> usize {
        self.blocks.iter().fold(self.n_mels, |f, b| f / b.pool.0)
    }

    /// Sequence length after the conv stack for `frames` input frames.
    pub fn sequence_len(&self, frames: usize) -> usize {
        self.blocks.iter().fold(frames, |t, b| t / b.pool.1)
    }

    pub fn conv_channels(&self) -> usize {
        self.blocks
            .iter()
            .rev()
            .find_map(|b| b.filters.last().copied())
            .unwrap_or(1)
    }

    /// Input width of the BiLSTM: bands times channels.
    pub fn lstm_input(&self) -> usize {
        self.pooled_bands() * self.conv_channels()
    }

    /// Length of the pooled utterance vector fed to the classifier.
    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            PoolingMode::Attention => self.heads * self.feature_dim(),
            PoolingMode::MaxPool => self.feature_dim(),
        }
    }

    /// Fewest input frames the time pools accept.
    pub fn min_frames(&self) -> usize {
        self.blocks.iter().map(|b| b.pool.1).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 {
            return bad("model.heads must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("model.sigma must be positive, got {}", self.temperature));
        }
        if self.n_classes < 2 {
            return bad(format!("model.n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.lstm_hidden == 0 || self.n_mels == 0 {
            return bad("model.lstm_hidden and model.n_mels must be positive".into());
        }
        if self.blocks.is_empty()
            || self
                .blocks
                .iter()
                .any(|b| b.filters.is_empty() || b.filters.contains(&0) || b.pool.0 == 0 || b.pool.1 == 0)
        {
            return bad(format!("invalid conv blocks {}", format_blocks(&self.blocks)));
        }
        if self.pooled_bands() == 0 {
            return bad(format!(
                "{} mel bands do not survive the frequency pools of {}",
                self.n_mels,
                format_blocks(&self.blocks)
            ));
        }
        if self.classifier_hidden.contains(&0) {
            return bad("classifier hidden sizes must be positive".into());
        }
        for (k, r) in [("dropout_pooled", self.dropout_pooled), ("dropout_hidden", self.dropout_hidden)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("model.{k} must be in [0, 1), got {r}"));
            }
        }
        Ok(())
    }
}
