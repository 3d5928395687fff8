//! Feature loading and minibatch assembly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rayon::prelude::*;

use super::augment::augment_pair;
use super::index::{DatasetIndex, SceneExample};
use crate::error::{Error, Result};
use crate::features::{read_features, read_wav, FeatureConfig, MelFrontend, CACHE_EXTENSION};
use crate::numerics::{Scalar, Tensor};

/// Minority-class splice policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub classes: Vec<usize>,
    /// Chance that a sampled minority example is replaced by a splice.
    pub probability: f64,
    pub segment_s: f64,
}

/// Resolves examples to `(n_mels, frames)` matrices, from `.afc` cache files or
/// by running the frontend on WAVs. Loaded matrices are kept in memory.
pub struct FeatureStore<S> {
    frontend: MelFrontend,
    memo: Mutex<HashMap<(PathBuf, usize), Arc<Tensor<S>>>>,
}

impl<S: Scalar> FeatureStore<S> {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        Ok(Self {
            frontend: MelFrontend::new(cfg)?,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        self.frontend.config()
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.frontend
    }

    fn is_cached(path: &Path) -> bool {
        path.extension().is_some_and(|e| e == CACHE_EXTENSION)
    }

    fn compute(&self, ex: &SceneExample) -> Result<Tensor<S>> {
        if Self::is_cached(&ex.source) {
            if !ex.source.exists() {
                return Err(Error::Data(format!(
                    "missing cache entry {} for clip {:?} channel {}",
                    ex.source.display(),
                    ex.clip_id,
                    ex.channel
                )));
            }
            let data = read_features(&ex.source)?;
            if data.shape()[0] != self.config().n_mels {
                return Err(Error::Data(format!(
                    "cache entry for clip {:?} has {} mel bands, configured {}",
                    ex.clip_id,
                    data.shape()[0],
                    self.config().n_mels
                )));
            }
            return Ok(data.cast());
        }
        let samples = self.waveform(ex)?;
        Ok(self.frontend.log_mel::<S>(&samples)?.data)
    }

    /// Mono waveform of one example (WAV sources only).
    pub fn waveform(&self, ex: &SceneExample) -> Result<Vec<f32>> {
        if Self::is_cached(&ex.source) {
            return Err(Error::Data(format!(
                "clip {:?} is only available as cached features; waveform needed",
                ex.clip_id
            )));
        }
        let clip = read_wav(&ex.source)?;
        if clip.sample_rate != self.config().sample_rate {
            return Err(Error::Data(format!(
                "clip {:?} has sample rate {}, configured {}",
                ex.clip_id,
                clip.sample_rate,
                self.config().sample_rate
            )));
        }
        Ok(clip.channel(ex.channel)?.to_vec())
    }

    pub fn features(&self, ex: &SceneExample) -> Result<Arc<Tensor<S>>> {
        let key = (ex.source.clone(), ex.channel);
        if let Some(hit) = self.memo.lock().expect("feature memo poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let data = Arc::new(self.compute(ex)?);
        self.memo
            .lock()
            .expect("feature memo poisoned")
            .insert(key, data.clone());
        Ok(data)
    }

    /// Loads every example of `index` up front, in parallel.
    pub fn preload(&self, index: &DatasetIndex) -> Result<()> {
        index
            .examples
            .par_iter()
            .map(|ex| self.features(ex).map(|_| ()))
            .collect()
    }
}

/// Consecutive chunks of the epoch order; the last one may be short.
pub fn minibatches(epoch: &[usize], batch_size: usize) -> Result<Vec<&[usize]>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    Ok(epoch.chunks(batch_size).collect())
}

#[derive(Debug, Clone)]
pub struct Batch<S> {
    /// `(B, 1, n_mels, frames)`.
    pub features: Tensor<S>,
    pub labels: Vec<usize>,
    pub examples: Vec<usize>,
    pub augmented: usize,
}

/// Stacks the given examples into one batch. All matrices must share a
/// frame count. Under `augment`, minority examples are replaced by a splice
/// with a random same-class partner, drawn from `rng` in batch order.
pub fn assemble_batch<S: Scalar, R: Rng + ?Sized>(
    index: &DatasetIndex,
    ids: &[usize],
    store: &FeatureStore<S>,
    augment: Option<&AugmentPolicy>,
    rng: &mut R,
) -> Result<Batch<S>> {
    if ids.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut mats: Vec<Arc<Tensor<S>>> = Vec::with_capacity(ids.len());
    let mut augmented = 0;
    for &id in ids {
        let ex = index.examples.get(id).ok_or(Error::Index {
            what: "example",
            index: id,
            len: index.len(),
        })?;
        let splice = match augment {
            Some(p) if p.classes.contains(&ex.class_index) && rng.random::<f64>() < p.probability => {
                let peers = &index.by_class[ex.class_index];
                Some((peers[rng.random_range(0..peers.len())], p.segment_s))
            }
            _ => None,
        };
        match splice {
            Some((partner, segment_s)) => {
                let a = store.waveform(ex)?;
                let b = store.waveform(&index.examples[partner])?;
                let (wave, _) = augment_pair(&a, &b, store.config().sample_rate, segment_s, rng)?;
                mats.push(Arc::new(store.frontend().log_mel::<S>(&wave)?.data));
                augmented += 1;
            }
            None => mats.push(store.features(ex)?),
        }
    }
    let shape = mats[0].shape().to_vec();
    let mut data = Vec::with_capacity(ids.len() * mats[0].len());
    for (m, &id) in mats.iter().zip(ids) {
        if m.shape() != shape.as_slice() {
            return Err(Error::Dimension {
                op: "assemble_batch",
                detail: format!(
                    "clip {:?} has features {:?}, batch expects {:?}",
                    index.examples[id].clip_id,
                    m.shape(),
                    shape
                ),
            });
        }
        data.extend_from_slice(m.data());
    }
    Ok(Batch {
        features: Tensor::new(&[ids.len(), 1, shape[0], shape[1]], data)?,
        labels: ids.iter().map(|&i| index.examples[i].class_index).collect(),
        examples: ids.to_vec(),
        augmented,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_counts() {
        let epoch: Vec<usize> = (0..8748).collect();
        let b = minibatches(&epoch, 200).unwrap();
        assert_eq!(b.len(), 44);
        assert!(b[..43].iter().all(|c| c.len() == 200));
        assert_eq!(b[43].len(), 148);
        assert_eq!(minibatches(&epoch[..5], 1).unwrap().len(), 5);
        assert!(minibatches(&epoch, 0).is_err());
    }
}
