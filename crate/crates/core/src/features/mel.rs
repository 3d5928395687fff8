//! Log-Mel spectrogram frontend.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// How the per-utterance mean is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanNorm {
    /// Keep raw log energies.
    None,
    /// Subtract one scalar mean over the whole matrix.
    Global,
    /// Subtract each band's own mean.
    PerBand,
}

impl MeanNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            MeanNorm::None => "none",
            MeanNorm::Global => "global",
            MeanNorm::PerBand => "per_band",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(MeanNorm::None),
            "global" => Some(MeanNorm::Global),
            "per_band" => Some(MeanNorm::PerBand),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Analysis window in samples (16 ms at 16 kHz).
    pub window: usize,
    /// Frame advance in samples (8 ms at 16 kHz).
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper filterbank edge; Nyquist when `None`.
    pub f_max: Option<f64>,
    /// Power floor applied before the natural log.
    pub log_floor: f64,
    pub mean_norm: MeanNorm,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 256,
            hop: 128,
            n_mels: 64,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-10,
            mean_norm: MeanNorm::Global,
        }
    }
}

impl FeatureConfig {
    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or_else(|| self.nyquist())
    }

    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.hop == 0 || self.n_mels == 0 || self.sample_rate == 0 {
            return Err(Error::Config(format!("invalid feature framing {self:?}")));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max() && self.f_max() <= self.nyquist()) {
            return Err(Error::Config(format!(
                "mel range [{}, {}] must lie within [0, {}]",
                self.f_min,
                self.f_max(),
                self.nyquist()
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// Frames produced for `num_samples` samples: `ceil(num_samples / hop)`.
pub fn frame_count(num_samples: usize, hop: usize) -> usize {
    num_samples.div_ceil(hop)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(cfg: &FeatureConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max()));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// `(n_mels, n_bins)` triangular filterbank on the HTK mel scale, peak 1.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let edges = mel_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.window as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..cfg.n_bins())
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// `(n_mels, frames)` log-Mel matrix `X = [x_1 .. x_T']` plus its framing.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelFeatures<S> {
    pub data: Tensor<S>,
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
}

impl<S: Scalar> LogMelFeatures<S> {
    pub fn from_matrix(data: Tensor<S>, cfg: &FeatureConfig) -> Result<Self> {
        data.expect_rank("log_mel", 2)?;
        Ok(Self {
            data,
            sample_rate: cfg.sample_rate,
            hop: cfg.hop,
            window: cfg.window,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frame_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn cast<T: Scalar>(&self) -> LogMelFeatures<T> {
        LogMelFeatures {
            data: self.data.cast(),
            sample_rate: self.sample_rate,
            hop: self.hop,
            window: self.window,
        }
    }
}

/// Reusable analysis state: window, filterbank and FFT plan.
pub struct MelFrontend {
    cfg: FeatureConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontend {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.window);
        Ok(Self {
            window: hann(cfg.window),
            filters: mel_filterbank(&cfg),
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Power spectra `|X_k|^2`, one row of `n_bins` per frame. Frames start
    /// every `hop` samples on a signal reflect-padded by `window / 2` on each
    /// side, so frame `t` is centred on sample `t * hop`.
    pub fn power_spectrogram(&self, samples: &[f32]) -> Result<Vec<Vec<f64>>> {
        let (win, hop) = (self.cfg.window, self.cfg.hop);
        if samples.len() < win {
            return Err(Error::Input(format!(
                "clip of {} samples is shorter than one {win}-sample window",
                samples.len()
            )));
        }
        let pad = win / 2;
        let n = samples.len();
        // Reflection without repeating the edge sample.
        let at = |i: isize| -> f64 {
            let j = if i < 0 {
                -i
            } else if i >= n as isize {
                2 * (n as isize - 1) - i
            } else {
                i
            };
            samples[j as usize] as f64
        };
        let frames = frame_count(n, hop);
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = (t * hop) as isize - pad as isize;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(at(start + k as isize) * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.push(buf[..self.cfg.n_bins()].iter().map(|c| c.norm_sqr()).collect());
        }
        Ok(out)
    }

    /// Log-Mel matrix of one mono channel, with the configured mean removal.
    pub fn log_mel<S: Scalar>(&self, samples: &[f32]) -> Result<LogMelFeatures<S>> {
        let spec = self.power_spectrogram(samples)?;
        let frames = spec.len();
        let m = self.cfg.n_mels;
        let mut x = vec![0.0f64; m * frames];
        for (t, power) in spec.iter().enumerate() {
            for (b, filter) in self.filters.iter().enumerate() {
                let e: f64 = filter.iter().zip(power).map(|(w, p)| w * p).sum();
                x[b * frames + t] = e.max(self.cfg.log_floor).ln();
            }
        }
        match self.cfg.mean_norm {
            MeanNorm::None => {}
            MeanNorm::Global => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                x.iter_mut().for_each(|v| *v -= mean);
            }
            MeanNorm::PerBand => {
                for row in x.chunks_mut(frames) {
                    let mean = row.iter().sum::<f64>() / frames as f64;
                    row.iter_mut().for_each(|v| *v -= mean);
                }
            }
        }
        let data = Tensor::new(&[m, frames], x.into_iter().map(S::of).collect())?;
        data.check_finite("log_mel")?;
        LogMelFeatures::from_matrix(data, &self.cfg)
    }
}

/// One-shot convenience wrapper around [`MelFrontend::log_mel`].
pub fn log_mel<S: Scalar>(samples: &[f32], cfg: &FeatureConfig) -> Result<LogMelFeatures<S>> {
    MelFrontend::new(cfg.clone())?.log_mel(samples)
}
