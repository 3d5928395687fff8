//! The scene classifier: conv stack, BiLSTM, pooling and the MLP head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::attention::{argmax, AttentionOutput};
use super::config::{ModelConfig, PoolingMode};
use crate::error::{Error, Result};
use crate::numerics::{
    conv2d_output_shape, softmax, Backward, BatchStats, Mode, ParamStore, RunningStats, Scalar, Tape,
    Tensor, Var, BN_MOMENTUM,
};

/// Class probabilities for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        let probs = softmax(&logits, 1.0)?;
        Ok(Self { logits, probs })
    }

    /// Wraps an already normalized distribution; logits are its logarithm.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let logits = probs.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
        Self { logits, probs }
    }

    pub fn class(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Eval-mode outputs for one clip.
#[derive(Debug, Clone)]
pub struct Inference {
    pub prediction: Prediction,
    /// Frame features `(T, p)`.
    pub sequence: Tensor<f64>,
    /// Present in attention mode.
    pub attention: Option<AttentionOutput>,
    /// The vector handed to the classifier.
    pub pooled: Vec<f64>,
}

/// Handles produced by one recorded forward pass.
pub struct ForwardPass {
    pub logits: Var,
    pub sequence: Var,
    pub pooled: Var,
    /// `(B, M, T)` attention scores in attention mode.
    pub scores: Option<Tensor<f64>>,
    /// Batch statistics of each batchnorm layer (train mode only).
    pub batch_stats: Vec<(String, BatchStats)>,
}

/// Result of a train-mode forward and backward pass.
pub struct Gradients<S> {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor<S>>,
    pub batch_stats: Vec<(String, BatchStats)>,
}

/// One row of the layer-by-layer shape listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub layer: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SceneModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    /// Running batchnorm statistics keyed by layer prefix.
    pub buffers: BTreeMap<String, RunningStats<S>>,
}

fn conv_prefix(block: usize, layer: usize) -> String {
    format!("conv.{block}.{layer}")
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl<S: Scalar> SceneModel<S> {
    /// Fresh parameters: uniform `+-1/sqrt(fan_in)` weights, LSTM forget bias 1,
    /// batchnorm scale 1 and shift 0, Gaussian head vectors with std
    /// `1/sqrt(p)` each drawn from its own stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = BTreeMap::new();
        let put = |params: &mut ParamStore<S>, name: String, t: Tensor<f64>| params.insert(&name, t.cast());

        let mut c_in = 1;
        for (bi, block) in config.blocks.iter().enumerate() {
            for (li, &c_out) in block.filters.iter().enumerate() {
                let prefix = conv_prefix(bi, li);
                let bound = 1.0 / ((c_in * 9) as f64).sqrt();
                put(&mut params, format!("{prefix}.weight"), uniform(&mut rng, &[c_out, c_in, 3, 3], bound))?;
                put(&mut params, format!("{prefix}.bn.gamma"), Tensor::full(&[c_out], 1.0))?;
                put(&mut params, format!("{prefix}.bn.beta"), Tensor::zeros(&[c_out]))?;
                buffers.insert(prefix, RunningStats::new(c_out));
                c_in = c_out;
            }
        }

        let (q, h) = (config.lstm_input(), config.lstm_hidden);
        for dir in ["fwd", "bwd"] {
            put(&mut params, format!("lstm.{dir}.w_ih"), uniform(&mut rng, &[4 * h, q], 1.0 / (q as f64).sqrt()))?;
            put(&mut params, format!("lstm.{dir}.w_hh"), uniform(&mut rng, &[4 * h, h], 1.0 / (h as f64).sqrt()))?;
            let mut bias = uniform(&mut rng, &[4 * h], 1.0 / (h as f64).sqrt());
            bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
            put(&mut params, format!("lstm.{dir}.bias"), bias)?;
        }

        let p = config.feature_dim();
        if config.pooling == PoolingMode::Attention {
            let normal = Normal::new(0.0, 1.0 / (p as f64).sqrt()).expect("positive std");
            let mut heads = Vec::with_capacity(config.heads * p);
            for i in 0..config.heads {
                let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
                head_rng.set_stream(1 + i as u64);
                heads.extend((0..p).map(|_| normal.sample(&mut head_rng)));
            }
            put(&mut params, "attention.heads".into(), Tensor::new(&[config.heads, p], heads)?)?;
        }

        let mut width = config.pooled_dim();
        let layers: Vec<(String, usize)> = config
            .classifier_hidden
            .iter()
            .enumerate()
            .map(|(i, &n)| (i.to_string(), n))
            .chain(std::iter::once(("out".to_string(), config.n_classes)))
            .collect();
        for (name, n) in layers {
            let bound = 1.0 / (width as f64).sqrt();
            put(&mut params, format!("classifier.{name}.weight"), uniform(&mut rng, &[n, width], bound))?;
            put(&mut params, format!("classifier.{name}.bias"), uniform(&mut rng, &[n], bound))?;
            width = n;
        }

        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    /// Assembles a model from stored tensors, checking every expected slot.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore<S>,
        buffers: BTreeMap<String, RunningStats<S>>,
    ) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        let expected: Vec<&str> = template.params.names().collect();
        let found: Vec<&str> = params.names().collect();
        if expected != found {
            return Err(Error::Consistency(format!(
                "parameter set does not match the configured model: expected {expected:?}, found {found:?}"
            )));
        }
        for (name, slot) in template.params.iter() {
            params.get(name)?.expect_shape("load parameters", slot.value.shape())?;
        }
        if template.buffers.keys().ne(buffers.keys()) {
            return Err(Error::Consistency("batchnorm buffers do not match the configured model".into()));
        }
        for (name, stats) in &template.buffers {
            buffers[name].mean.expect_shape("load buffers", stats.mean.shape())?;
            buffers[name].var.expect_shape("load buffers", stats.var.shape())?;
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    fn leaf(&self, tape: &mut Tape<S>, name: &str, trainable: bool) -> Result<Var> {
        let value = self.params.get(name)?.clone();
        Ok(if trainable {
            tape.param(name, value)
        } else {
            tape.input(value)
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = matches!(*shape, [_, 1, f, t] if f == self.config.n_mels && t >= self.config.min_frames());
        if !ok {
            return Err(Error::dim(
                "model input",
                format!(
                    "expected (B, 1, {}, T>={}), got {shape:?}",
                    self.config.n_mels,
                    self.config.min_frames()
                ),
            ));
        }
        Ok(())
    }

    /// Records the whole network on `tape` for a `(B, 1, n_mels, T')` batch.
    /// With `trainable`, parameters become gradient leaves.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        input: Tensor<S>,
        mode: Mode,
        trainable: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        self.check_input(input.shape())?;
        let cfg = &self.config;
        let mut x = tape.input(input);
        let mut batch_stats = Vec::new();
        for (bi, block) in cfg.blocks.iter().enumerate() {
            for li in 0..block.filters.len() {
                let prefix = conv_prefix(bi, li);
                let k = self.leaf(tape, &format!("{prefix}.weight"), trainable)?;
                x = tape.conv2d(x, k, (1, 1))?;
                let gamma = self.leaf(tape, &format!("{prefix}.bn.gamma"), trainable)?;
                let beta = self.leaf(tape, &format!("{prefix}.bn.beta"), trainable)?;
                let (y, stats) = tape.batchnorm_relu(x, gamma, beta, &self.buffers[&prefix], mode)?;
                if let Some(s) = stats {
                    batch_stats.push((prefix, s));
                }
                x = y;
            }
            x = tape.maxpool2d(x, block.pool, block.pool)?;
        }
        let seq = tape.to_sequence(x)?;

        let mut dirs = Vec::new();
        for (dir, reverse) in [("fwd", false), ("bwd", true)] {
            let w_ih = self.leaf(tape, &format!("lstm.{dir}.w_ih"), trainable)?;
            let w_hh = self.leaf(tape, &format!("lstm.{dir}.w_hh"), trainable)?;
            let bias = self.leaf(tape, &format!("lstm.{dir}.bias"), trainable)?;
            dirs.push(tape.lstm(seq, w_ih, w_hh, bias, reverse)?);
        }
        let sequence = tape.concat_last(dirs[0], dirs[1])?;

        let (pooled, scores) = match cfg.pooling {
            PoolingMode::Attention => {
                let heads = self.leaf(tape, "attention.heads", trainable)?;
                let (s, a) = tape.attention_pool(sequence, heads, cfg.temperature)?;
                (s, Some(a))
            }
            PoolingMode::MaxPool => (tape.time_max(sequence)?, None),
        };

        let mut z = tape.dropout(pooled, cfg.dropout_pooled, mode, rng)?;
        for i in 0..cfg.classifier_hidden.len() {
            let w = self.leaf(tape, &format!("classifier.{i}.weight"), trainable)?;
            let b = self.leaf(tape, &format!("classifier.{i}.bias"), trainable)?;
            z = tape.linear(z, w, b)?;
            z = tape.relu(z)?;
            z = tape.dropout(z, cfg.dropout_hidden, mode, rng)?;
        }
        let w = self.leaf(tape, "classifier.out.weight", trainable)?;
        let b = self.leaf(tape, "classifier.out.bias", trainable)?;
        let logits = tape.linear(z, w, b)?;
        Ok(ForwardPass {
            logits,
            sequence,
            pooled,
            scores,
            batch_stats,
        })
    }

    /// Mean cross-entropy of a train-mode pass and the gradient of every slot.
    pub fn gradients<R: Rng + ?Sized>(
        &self,
        input: Tensor<S>,
        labels: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Gradients<S>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, mode, true, rng)?;
        let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
        let grads = tape.backward(loss)?;
        Ok(Gradients {
            loss: tape.value(loss).data()[0].f64(),
            grads,
            batch_stats: pass.batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (name, s) in stats {
            let running = self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Consistency(format!("no batchnorm buffer {name:?}")))?;
            s.update(running, BN_MOMENTUM);
        }
        Ok(())
    }

    /// Eval-mode pass over a `(B, 1, n_mels, T')` batch.
    pub fn infer_batch(&self, input: Tensor<S>) -> Result<Vec<Inference>> {
        let b = input.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        // Dropout is inactive in eval mode; the generator is never drawn from.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut tape, input, Mode::Eval, false, &mut rng)?;
        let logits = tape.value(pass.logits);
        let seq = tape.value(pass.sequence);
        let pooled = tape.value(pass.pooled);
        let (t, p) = (seq.shape()[1], seq.shape()[2]);
        let n = logits.shape()[1];
        let width = pooled.shape()[1];
        (0..b)
            .map(|i| {
                let attention = match &pass.scores {
                    Some(a) => {
                        let m = a.shape()[1];
                        Some(AttentionOutput {
                            scores: Tensor::new(&[m, t], a.data()[i * m * t..(i + 1) * m * t].to_vec())?,
                            summaries: Tensor::new(
                                &[m, p],
                                pooled.data()[i * width..(i + 1) * width].iter().map(|v| v.f64()).collect(),
                            )?,
                        })
                    }
                    None => None,
                };
                Ok(Inference {
                    prediction: Prediction::from_logits(
                        logits.data()[i * n..(i + 1) * n].iter().map(|v| v.f64()).collect(),
                    )?,
                    sequence: Tensor::new(
                        &[t, p],
                        seq.data()[i * t * p..(i + 1) * t * p].iter().map(|v| v.f64()).collect(),
                    )?,
                    attention,
                    pooled: pooled.data()[i * width..(i + 1) * width].iter().map(|v| v.f64()).collect(),
                })
            })
            .collect()
    }

    /// Eval-mode pass over one `(n_mels, T')` feature matrix.
    pub fn infer(&self, features: &Tensor<S>) -> Result<Inference> {
        features.expect_rank("model input", 2)?;
        let shape = [1, 1, features.shape()[0], features.shape()[1]];
        let mut out = self.infer_batch(features.clone().reshape(&shape)?)?;
        Ok(out.remove(0))
    }

    /// Frame features `(T, p)` of one `(n_mels, T')` matrix, eval mode.
    pub fn extract_features(&self, features: &Tensor<S>) -> Result<Tensor<f64>> {
        Ok(self.infer(features)?.sequence)
    }

    /// Runs only the classifier on a pooled vector, eval mode.
    pub fn classify(&self, pooled: &[f64]) -> Result<Prediction> {
        if pooled.len() != self.config.pooled_dim() {
            return Err(Error::dim(
                "classify",
                format!("pooled vector of length {} for a classifier expecting {}", pooled.len(), self.config.pooled_dim()),
            ));
        }
        let mut tape = Tape::new();
        let mut z = tape.input(Tensor::new(&[1, pooled.len()], pooled.iter().map(|&v| S::of(v)).collect())?);
        for i in 0..self.config.classifier_hidden.len() {
            let w = self.leaf(&mut tape, &format!("classifier.{i}.weight"), false)?;
            let b = self.leaf(&mut tape, &format!("classifier.{i}.bias"), false)?;
            z = tape.linear(z, w, b)?;
            z = tape.relu(z)?;
        }
        let w = self.leaf(&mut tape, "classifier.out.weight", false)?;
        let b = self.leaf(&mut tape, "classifier.out.bias", false)?;
        let logits = tape.linear(z, w, b)?;
        Prediction::from_logits(tape.value(logits).data().iter().map(|v| v.f64()).collect())
    }

    /// Shapes through the network for a `(n_mels, frames)` input, computed
    /// without running it. Conv stack rows are `(frequency, time, channels)`.
    pub fn shape_trace(&self, frames: usize) -> Result<Vec<ShapeRow>> {
        shape_trace(&self.config, frames)
    }
}

/// See [`SceneModel::shape_trace`].
pub fn shape_trace(cfg: &ModelConfig, frames: usize) -> Result<Vec<ShapeRow>> {
    let row = |layer: String, shape: Vec<usize>| ShapeRow { layer, shape };
    let mut rows = vec![row("input".into(), vec![cfg.n_mels, frames])];
    let (mut c, mut f, mut t) = (1, cfg.n_mels, frames);
    for (bi, block) in cfg.blocks.iter().enumerate() {
        for (li, &out) in block.filters.iter().enumerate() {
            let [c2, f2, t2] = conv2d_output_shape([c, f, t], [out, c, 3, 3], (1, 1))?;
            (c, f, t) = (c2, f2, t2);
            rows.push(row(format!("{}.conv", conv_prefix(bi, li)), vec![f, t, c]));
        }
        if f < block.pool.0 || t < block.pool.1 {
            return Err(Error::dim(
                "shape_trace",
                format!("pool {:?} larger than ({f}, {t}) in block {bi}", block.pool),
            ));
        }
        (f, t) = (f / block.pool.0, t / block.pool.1);
        rows.push(row(format!("block.{bi}.maxpool"), vec![f, t, c]));
    }
    let p = cfg.feature_dim();
    rows.push(row("flatten".into(), vec![t, f * c]));
    rows.push(row("bilstm".into(), vec![t, p]));
    rows.push(row(format!("pool.{}", cfg.pooling.as_str()), vec![cfg.pooled_dim()]));
    for (i, &n) in cfg.classifier_hidden.iter().enumerate() {
        rows.push(row(format!("classifier.{i}"), vec![n]));
    }
    rows.push(row("classifier.out".into(), vec![cfg.n_classes]));
    Ok(rows)
}

/// `(B, C, F, T)` conv maps to `(B, T, F*C)` sequences, frequency-major.
struct ToSequenceRule;

fn to_sequence<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [b, c, f, t] = *x.shape() else {
        return Err(Error::dim("to_sequence", format!("expected (B,C,F,T), got {:?}", x.shape())));
    };
    let d = x.data();
    let mut out = vec![S::zero(); d.len()];
    for bi in 0..b {
        for ci in 0..c {
            for fi in 0..f {
                let src = ((bi * c + ci) * f + fi) * t;
                for ti in 0..t {
                    out[(bi * t + ti) * f * c + fi * c + ci] = d[src + ti];
                }
            }
        }
    }
    Tensor::new(&[b, t, f * c], out)
}

impl<S: Scalar> Backward<S> for ToSequenceRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let [b, c, f, t] = *inputs[0].shape() else {
            unreachable!("checked in forward")
        };
        let g = grad.data();
        let mut dx = vec![S::zero(); g.len()];
        for bi in 0..b {
            for ci in 0..c {
                for fi in 0..f {
                    let dst = ((bi * c + ci) * f + fi) * t;
                    for ti in 0..t {
                        dx[dst + ti] = g[(bi * t + ti) * f * c + fi * c + ci];
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), dx)?)])
    }

    fn name(&self) -> &'static str {
        "to_sequence"
    }
}

impl<S: Scalar> Tape<S> {
    pub fn to_sequence(&mut self, x: Var) -> Result<Var> {
        let y = to_sequence(self.value(x))?;
        self.push(y, &[x], Box::new(ToSequenceRule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_profile_trace_matches_reference_table() {
        let rows = shape_trace(&ModelConfig::full(), 1250).unwrap();
        let pools: Vec<Vec<usize>> = rows
            .iter()
            .filter(|r| r.layer.ends_with("maxpool"))
            .map(|r| r.shape.clone())
            .collect();
        assert_eq!(
            pools,
            vec![
                vec![32, 625, 64],
                vec![16, 312, 128],
                vec![8, 156, 256],
                vec![4, 156, 512],
                vec![2, 156, 512],
            ]
        );
        assert_eq!(rows[0].shape, vec![64, 1250]);
        let lstm = rows.iter().find(|r| r.layer == "bilstm").unwrap();
        assert_eq!(lstm.shape, vec![156, 512]);
    }

    #[test]
    fn sequence_flattening_is_frequency_major() {
        // x[b,c,f,t] = 1000b + 100c + 10f + t
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 2], |i| {
            let (c, f, t) = (i / 6, (i / 2) % 3, i % 2);
            (100 * c + 10 * f + t) as f64
        });
        let y = to_sequence(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6]);
        assert_eq!(y.row(0), &[0.0, 100.0, 10.0, 110.0, 20.0, 120.0]);
        assert_eq!(y.row(1), &[1.0, 101.0, 11.0, 111.0, 21.0, 121.0]);
    }

    #[test]
    fn zero_classifier_predicts_uniformly() {
        let mut m = SceneModel::<f64>::new(ModelConfig::toy(), 1).unwrap();
        for (name, slot) in m.params.iter_mut() {
            if name.starts_with("classifier") {
                slot.value = Tensor::zeros(slot.value.shape());
            }
        }
        let p = m.classify(&vec![0.3; m.config.pooled_dim()]).unwrap();
        assert!(p.probs.iter().all(|&q| (q - 1.0 / 9.0).abs() < 1e-15));
        let loss = -(p.probs[4]).ln();
        assert!((loss - 2.197_224_577_336_219_6).abs() < 1e-12);
    }

    #[test]
    fn toy_model_shapes() {
        let m = SceneModel::<f64>::new(ModelConfig::toy(), 7).unwrap();
        let x = Tensor::from_fn(&[64, 100], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let out = m.infer(&x).unwrap();
        assert_eq!(out.sequence.shape(), &[25, 64]);
        let att = out.attention.as_ref().unwrap();
        assert_eq!(att.scores.shape(), &[9, 25]);
        assert_eq!(out.pooled.len(), 9 * 64);
        assert!((out.prediction.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let again = m.infer(&x).unwrap();
        assert_eq!(again.prediction, out.prediction);

        let mut cfg = ModelConfig::toy();
        cfg.pooling = PoolingMode::MaxPool;
        let mp = SceneModel::<f64>::new(cfg, 7).unwrap();
        let out = mp.infer(&x).unwrap();
        assert!(out.attention.is_none());
        assert_eq!(out.pooled.len(), 64);
    }

    #[test]
    fn wrong_band_count_is_a_dimension_error() {
        let m = SceneModel::<f64>::new(ModelConfig::toy(), 7).unwrap();
        let x = Tensor::zeros(&[40, 100]);
        assert!(matches!(m.infer(&x), Err(Error::Dimension { .. })));
    }
}
