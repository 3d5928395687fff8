//! 16-bit PCM WAV input and output.

use std::path::Path;

use crate::error::{Error, Result};

/// Multi-channel audio with samples in `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    /// One vector per channel, all the same length.
    pub channels: Vec<Vec<f32>>,
}

impl AudioClip {
    pub fn mono(sample_rate: u32, samples: Vec<f32>) -> Self {
        Self {
            sample_rate,
            channels: vec![samples],
        }
    }

    pub fn new(sample_rate: u32, channels: Vec<Vec<f32>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Input("audio clip needs at least one channel".into()));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Input("audio channels differ in length".into()));
        }
        Ok(Self {
            sample_rate,
            channels,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, index: usize) -> Result<&[f32]> {
        self.channels.get(index).map(Vec::as_slice).ok_or(Error::Index {
            what: "audio channel",
            index,
            len: self.channels.len(),
        })
    }
}

fn format_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Format {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

/// Reads a 16-bit signed PCM WAV with 1 to 4 channels.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| format_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "fmt chunk declares {:?} with {} bits per sample; only 16-bit integer PCM is supported",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    let n_channels = spec.channels as usize;
    if !(1..=4).contains(&n_channels) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("fmt chunk declares {n_channels} channels; 1 to 4 are supported"),
        });
    }
    let frames = reader.duration() as usize;
    let mut channels = vec![Vec::with_capacity(frames); n_channels];
    for (i, s) in reader.into_samples::<i16>().enumerate() {
        let s = s.map_err(|e| match e {
            hound::Error::IoError(source) => Error::io(path, source),
            other => Error::Format {
                path: path.to_path_buf(),
                detail: format!("data chunk: {other}"),
            },
        })?;
        channels[i % n_channels].push(s as f32 / 32768.0);
    }
    AudioClip::new(spec.sample_rate, channels)
}

/// Writes `clip` as 16-bit signed PCM, clamping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| format_error(path, e))?;
    for i in 0..clip.num_samples() {
        for ch in &clip.channels {
            let v = (ch[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| format_error(path, e))?;
        }
    }
    writer.finalize().map_err(|e| format_error(path, e))
}
