//! On-disk log-Mel cache (`AFC1` files) and the split manifests that index it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::mel::MelFrontend;
use super::wav::{read_wav, AudioClip};
use super::FeatureConfig;
use crate::data::manifest::{read_manifest, write_manifest, ManifestRow};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"AFC1";
pub const CACHE_EXTENSION: &str = "afc";

/// Serializes an `(n_mels, frames)` matrix.
pub fn encode_features(data: &Tensor<f32>) -> Result<Vec<u8>> {
    data.expect_rank("feature cache", 2)?;
    let (m, t) = (data.shape()[0], data.shape()[1]);
    let mut out = Vec::with_capacity(12 + 4 * data.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for v in data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("missing AFC1 magic".into()));
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let t = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if m == 0 || t == 0 || body.len() != 4 * m * t {
        return Err(bad(format!("header says {m}x{t} but {} data bytes follow", body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[m, t], data)
}

pub fn write_features(path: &Path, data: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_features(data)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(path, &bytes)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheSummary {
    pub written: usize,
    pub skipped: usize,
}

/// File name of the cache entry for one `(clip, channel)`.
pub fn cache_entry_name(clip_id: &str, channel: usize) -> String {
    format!("{clip_id}_ch{channel}.{CACHE_EXTENSION}")
}

/// Computes features for every manifest row of every split in `dataset_dir`
/// and writes them under `out_dir/feat`, with matching split manifests in
/// `out_dir`. Rows whose audio cannot be read are logged and left out.
/// Splits missing from the dataset get header-only manifests.
pub fn cache_features(dataset_dir: &Path, out_dir: &Path, cfg: &FeatureConfig) -> Result<CacheSummary> {
    let frontend = MelFrontend::new(cfg.clone())?;
    let feat_dir = out_dir.join("feat");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut summary = CacheSummary::default();
    for split in Split::ALL {
        let manifest = dataset_dir.join(split.manifest_name());
        let rows = if manifest.exists() {
            read_manifest(&manifest)?
        } else {
            Vec::new()
        };
        let mut audio: BTreeMap<PathBuf, Result<AudioClip>> = BTreeMap::new();
        let mut kept = Vec::new();
        for row in rows {
            let source = dataset_dir.join(&row.path);
            let clip = audio.entry(source.clone()).or_insert_with(|| read_wav(&source));
            let features = clip.as_ref().map_err(|e| e.to_string()).and_then(|clip| {
                if clip.sample_rate != cfg.sample_rate {
                    return Err(format!(
                        "sample rate {} differs from the configured {}",
                        clip.sample_rate, cfg.sample_rate
                    ));
                }
                let samples = clip.channel(row.channel).map_err(|e| e.to_string())?;
                frontend.log_mel::<f32>(samples).map_err(|e| e.to_string())
            });
            match features {
                Ok(f) => {
                    let name = cache_entry_name(&row.clip_id, row.channel);
                    write_features(&feat_dir.join(&name), &f.data)?;
                    kept.push(ManifestRow {
                        path: format!("feat/{name}"),
                        ..row
                    });
                    summary.written += 1;
                }
                Err(e) => {
                    log::warn!("skipping {} channel {}: {e}", row.clip_id, row.channel);
                    summary.skipped += 1;
                }
            }
        }
        write_manifest(out_dir.join(split.manifest_name()), &kept)?;
    }
    let events = dataset_dir.join("events.csv");
    if events.exists() {
        let dst = out_dir.join("events.csv");
        std::fs::copy(&events, &dst).map_err(|e| Error::io(&dst, e))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let t = Tensor::from_fn(&[3, 5], |i| i as f32 * 0.5 - 1.0);
        let bytes = encode_features(&t).unwrap();
        assert_eq!(&bytes[..4], b"AFC1");
        assert_eq!(bytes.len(), 12 + 60);
        assert_eq!(decode_features(Path::new("x"), &bytes).unwrap(), t);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let t = Tensor::from_fn(&[2, 2], |i| i as f32);
        let bytes = encode_features(&t).unwrap();
        assert!(matches!(
            decode_features(Path::new("x"), &bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn empty_dataset_gives_empty_manifests() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let s = cache_features(src.path(), dst.path(), &FeatureConfig::default()).unwrap();
        assert_eq!(s, CacheSummary::default());
        assert!(read_manifest(dst.path().join("train.csv")).unwrap().is_empty());
    }
}
