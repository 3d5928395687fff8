//! Binary checkpoints: `ASCK`, u32 version, length-prefixed UTF-8 config
//! text, u32 tensor count, the tensors, then a u64 FNV-1a checksum of every
//! preceding byte.
//!
//! The text blob is the rendered [`RunConfig`] followed by `state.*` lines
//! (epoch counters, optimizer scalars, generator position). Tensors are named
//! `param.*`, `buffer.*.mean|var` and `adam.m.*` / `adam.v.*`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::{parse_lines, RunConfig};
use crate::error::{Error, Result};
use crate::model::SceneModel;
use crate::numerics::{AdamState, DType, ParamStore, RunningStats, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue training bit for bit.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub config: RunConfig,
    pub model: SceneModel<S>,
    pub adam: AdamState<S>,
    /// Completed epochs; the next epoch to run has this zero-based index.
    pub epoch: usize,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Dev evaluations since the last improvement.
    pub stale_evals: usize,
    pub rng: ChaCha8Rng,
}

/// Stream of the training generator, kept apart from the init streams.
const TRAIN_STREAM: u64 = 0x7472_6169_6e;

impl<S: Scalar> TrainState<S> {
    /// Fresh parameters and optimizer, seeded from `train.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let model = SceneModel::new(config.model.clone(), seed)?;
        let adam = AdamState::for_params(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            best_f1: None,
            best_epoch: None,
            stale_evals: 0,
            rng,
        })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Parameter(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) -> Result<()> {
    put_str(out, name)?;
    out.push(S::DTYPE.code());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

fn optional<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

fn state_text<S: Scalar>(state: &TrainState<S>) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "state.{k} = {v}");
    };
    put("epoch", state.epoch.to_string());
    put("best_f1", optional(state.best_f1));
    put("best_epoch", optional(state.best_epoch));
    put("stale_evals", state.stale_evals.to_string());
    put("adam_step", state.adam.step.to_string());
    put("adam_beta1", state.adam.beta1.to_string());
    put("adam_beta2", state.adam.beta2.to_string());
    put("adam_epsilon", state.adam.epsilon.to_string());
    let seed: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    put("rng_seed", seed);
    put("rng_stream", state.rng.get_stream().to_string());
    put("rng_word_pos", state.rng.get_word_pos().to_string());
    out
}

pub fn encode_checkpoint<S: Scalar>(state: &TrainState<S>) -> Result<Vec<u8>> {
    if state.config.model != state.model.config {
        return Err(Error::Consistency("checkpoint config does not describe its model".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &(state.config.render() + &state_text(state)))?;

    let model = &state.model;
    let count = model.params.len() + 2 * model.buffers.len() + 2 * state.adam.moments.len();
    put_u32(&mut out, count)?;
    for (name, slot) in model.params.iter() {
        put_tensor(&mut out, &format!("param.{name}"), &slot.value)?;
    }
    for (name, stats) in &model.buffers {
        put_tensor(&mut out, &format!("buffer.{name}.mean"), &stats.mean)?;
        put_tensor(&mut out, &format!("buffer.{name}.var"), &stats.var)?;
    }
    for (name, (m, v)) in &state.adam.moments {
        put_tensor(&mut out, &format!("adam.m.{name}"), m)?;
        put_tensor(&mut out, &format!("adam.v.{name}"), v)?;
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A tensor as stored, before conversion to the working precision.
#[derive(Debug, Clone)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    data: Vec<u8>,
}

impl StoredTensor {
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let values: Vec<S> = match self.dtype {
            DType::F32 => self.data.chunks_exact(4).map(|c| S::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.data.chunks_exact(8).map(|c| S::of(f64::read_le(c))).collect(),
        };
        Tensor::new(&self.shape, values)
    }
}

/// Parsed but not yet typed checkpoint contents.
#[derive(Debug, Clone)]
pub struct CheckpointContents {
    pub text: String,
    pub config: RunConfig,
    pub state: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Integrity(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointContents> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let r_end = body.len();
    let mut r = Reader { bytes: body, pos: r.pos };
    let text = r.string("config text")?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Integrity(format!("tensor {name:?} has unknown dtype code {code}")))?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(dtype.width(), |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("tensor {name:?} has an impossible shape {shape:?}")))?;
        let data = r.take(len, "tensor data")?.to_vec();
        if tensors.insert(name.clone(), StoredTensor { dtype, shape, data }).is_some() {
            return Err(Error::Integrity(format!("tensor {name:?} stored twice")));
        }
    }
    if r.pos != r_end {
        return Err(Error::Integrity(format!("{} unexpected bytes before the checksum", r_end - r.pos)));
    }
    if fnv1a(body) != stored {
        return Err(Error::Integrity("checksum mismatch; the checkpoint is corrupt".into()));
    }

    let entries = parse_lines(&text)?;
    let (state, config): (Vec<_>, Vec<_>) = entries.into_iter().partition(|(k, _)| k.starts_with("state."));
    Ok(CheckpointContents {
        config: RunConfig::from_entries(&config)?,
        state: state
            .into_iter()
            .map(|(k, v)| (k["state.".len()..].to_string(), v))
            .collect(),
        text,
        tensors,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointContents> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn field<T: std::str::FromStr>(state: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = state
        .get(key)
        .ok_or_else(|| Error::Integrity(format!("checkpoint lacks state.{key}")))?;
    v.parse()
        .map_err(|_| Error::Integrity(format!("checkpoint state.{key} = {v:?} is malformed")))
}

fn optional_field<T: std::str::FromStr>(state: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match state.get(key).map(String::as_str) {
        Some("none") => Ok(None),
        _ => field(state, key).map(Some),
    }
}

impl CheckpointContents {
    fn take_tensor<S: Scalar>(&mut self, name: &str) -> Result<Tensor<S>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks tensor {name:?}")))?
            .to_tensor()
    }

    /// Builds the typed state; tensors stored in the other precision are cast.
    pub fn into_state<S: Scalar>(mut self) -> Result<TrainState<S>> {
        let template = SceneModel::<S>::new(self.config.model.clone(), 0)?;
        let mut params = ParamStore::new();
        for name in template.params.names() {
            params.insert(name, self.take_tensor(&format!("param.{name}"))?)?;
        }
        let mut buffers = BTreeMap::new();
        for name in template.buffers.keys() {
            let stats = RunningStats {
                mean: self.take_tensor(&format!("buffer.{name}.mean"))?,
                var: self.take_tensor(&format!("buffer.{name}.var"))?,
            };
            buffers.insert(name.clone(), stats);
        }
        let model = SceneModel::from_parts(self.config.model.clone(), params, buffers)?;

        let s = &self.state;
        let mut adam = AdamState::new(field(s, "adam_beta1")?, field(s, "adam_beta2")?, field(s, "adam_epsilon")?);
        adam.step = field(s, "adam_step")?;
        let hex: String = field(s, "rng_seed")?;
        let seed_bytes: Vec<u8> = (0..hex.len() / 2)
            .map(|i| u8::from_str_radix(hex.get(2 * i..2 * i + 2).unwrap_or(""), 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Integrity("malformed generator seed".into()))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::Integrity("generator seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(field(s, "rng_stream")?);
        rng.set_word_pos(field(s, "rng_word_pos")?);
        let (epoch, best_f1, best_epoch, stale_evals) = (
            field(s, "epoch")?,
            optional_field(s, "best_f1")?,
            optional_field(s, "best_epoch")?,
            field(s, "stale_evals")?,
        );

        for name in model.params.names() {
            let m = self.take_tensor(&format!("adam.m.{name}"))?;
            let v = self.take_tensor(&format!("adam.v.{name}"))?;
            adam.moments.insert(name.to_string(), (m, v));
        }
        if let Some(extra) = self.tensors.keys().next() {
            return Err(Error::Integrity(format!("checkpoint holds unexpected tensor {extra:?}")));
        }
        Ok(TrainState {
            config: self.config,
            model,
            adam,
            epoch,
            best_f1,
            best_epoch,
            stale_evals,
            rng,
        })
    }

    /// Element type of the stored parameters.
    pub fn precision(&self) -> DType {
        self.config.train.precision
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<TrainState<S>> {
    read_checkpoint(path)?.into_state()
}
