//! Clip-level inference with channel averaging, and split evaluation.

use rayon::prelude::*;

use super::metrics::{macro_f1, ConfusionMatrix, F1Report};
use crate::data::{DatasetIndex, FeatureStore};
use crate::error::{Error, Result};
use crate::model::{Inference, Prediction, SceneModel};
use crate::numerics::{Scalar, Tensor};

/// Examples per eval-mode forward pass.
pub const INFER_BATCH: usize = 8;

/// Arithmetic mean of per-channel probability vectors.
pub fn average_probs(channels: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = channels
        .first()
        .ok_or_else(|| Error::Input("no channel predictions to average".into()))?;
    if channels.iter().any(|c| c.len() != first.len()) {
        return Err(Error::dim("average_probs", "channel predictions differ in length"));
    }
    let k = channels.len() as f64;
    Ok((0..first.len())
        .map(|j| channels.iter().map(|c| c[j]).sum::<f64>() / k)
        .collect())
}

fn stack<S: Scalar>(mats: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let shape = mats[0].shape();
    let mut data = Vec::with_capacity(mats.len() * mats[0].len());
    for m in mats {
        if m.shape() != shape {
            return Err(Error::dim(
                "infer",
                format!("feature matrices {:?} and {:?} cannot share a batch", shape, m.shape()),
            ));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new(&[mats.len(), 1, shape[0], shape[1]], data)
}

/// Eval-mode inference on each matrix, batched.
pub fn infer_many<S: Scalar>(model: &SceneModel<S>, mats: &[&Tensor<S>]) -> Result<Vec<Inference>> {
    let chunks: Vec<Result<Vec<Inference>>> = mats
        .par_chunks(INFER_BATCH)
        .map(|chunk| model.infer_batch(stack(chunk)?))
        .collect();
    Ok(chunks.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Channel-averaged prediction for one clip given one feature matrix per
/// channel.
pub fn infer_clip<S: Scalar>(model: &SceneModel<S>, channels: &[&Tensor<S>]) -> Result<Prediction> {
    if channels.is_empty() {
        return Err(Error::Input("a clip needs at least one channel".into()));
    }
    let out = infer_many(model, channels)?;
    let probs: Vec<Vec<f64>> = out.into_iter().map(|i| i.prediction.probs).collect();
    Ok(Prediction::from_probs(average_probs(&probs)?))
}

#[derive(Debug, Clone)]
pub struct ClipResult {
    pub clip_id: String,
    pub label: usize,
    pub prediction: Prediction,
}

/// Clip-level predictions for every clip of `index`, in clip order.
pub fn predict_split<S: Scalar>(
    model: &SceneModel<S>,
    index: &DatasetIndex,
    store: &FeatureStore<S>,
) -> Result<Vec<ClipResult>> {
    let clips = index.clips();
    let ids: Vec<usize> = clips.iter().flat_map(|(_, ids)| ids.iter().copied()).collect();
    let feats = ids
        .par_iter()
        .map(|&i| store.features(&index.examples[i]))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<S>> = feats.iter().map(|f| f.as_ref()).collect();
    let out = infer_many(model, &refs)?;
    let mut it = out.into_iter();
    clips
        .into_iter()
        .map(|(clip_id, ids)| {
            let probs: Vec<Vec<f64>> = it.by_ref().take(ids.len()).map(|i| i.prediction.probs).collect();
            Ok(ClipResult {
                label: index.examples[ids[0]].class_index,
                prediction: Prediction::from_probs(average_probs(&probs)?),
                clip_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub scores: F1Report,
    pub clips: Vec<ClipResult>,
}

/// Confusion matrix and F1 table over the clips of a labeled split.
pub fn evaluate<S: Scalar>(model: &SceneModel<S>, index: &DatasetIndex, store: &FeatureStore<S>) -> Result<EvalReport> {
    if index.is_empty() {
        return Err(Error::Input(format!("the {} split has no examples", index.split)));
    }
    if index.n_classes != model.config.n_classes {
        return Err(Error::Consistency(format!(
            "split has {} classes, model predicts {}",
            index.n_classes, model.config.n_classes
        )));
    }
    let clips = predict_split(model, index, store)?;
    let mut confusion = ConfusionMatrix::new(index.n_classes);
    for c in &clips {
        confusion.add(c.label, c.prediction.class())?;
    }
    Ok(EvalReport {
        scores: macro_f1(&confusion),
        confusion,
        clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averaging_hand_example() {
        let avg = average_probs(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap();
        assert!((avg[0] - 0.4).abs() < 1e-12 && (avg[1] - 0.6).abs() < 1e-12);
        assert_eq!(Prediction::from_probs(avg).class(), 1);
    }

    #[test]
    fn averaging_disagreeing_channels_stays_normalized() {
        let u = vec![1.0 / 3.0; 3];
        let avg = average_probs(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], u.clone(), u]).unwrap();
        assert!((avg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(average_probs(&[]).is_err());
    }
}
