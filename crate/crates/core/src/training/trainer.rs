//! The training loop.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::checkpoint::{save_checkpoint, TrainState};
use crate::config::{lr_at, MinorityClasses, RunConfig};
use crate::data::{
    assemble_batch, check_disjoint, epoch_sampler, load_split, minibatches, minority_classes, AugmentPolicy,
    DatasetIndex, FeatureStore, Split,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::numerics::{adam_step, Mode, Scalar, Tensor};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,dev_macro_f1";

/// Train and dev splits plus the feature source they share.
pub struct TrainData<S> {
    pub train: DatasetIndex,
    pub dev: DatasetIndex,
    pub store: FeatureStore<S>,
}

impl<S: Scalar> TrainData<S> {
    pub fn load(dir: &Path, config: &RunConfig) -> Result<Self> {
        let n = config.model.n_classes;
        let train = load_split(dir, Split::Train, n)?;
        let dev = load_split(dir, Split::Dev, n)?;
        check_disjoint(&[&train, &dev])?;
        if dev.is_empty() {
            return Err(Error::Data(format!("dataset {} has an empty dev split", dir.display())));
        }
        let store = FeatureStore::new(config.features.clone())?;
        store.preload(&train)?;
        store.preload(&dev)?;
        Ok(Self { train, dev, store })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_macro_f1: Option<f64>,
    pub augmented: usize,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let f1 = self.dev_macro_f1.map_or_else(String::new, |f| f.to_string());
        format!("{},{},{},{}", self.epoch, self.lr, self.train_loss, f1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Dev macro F1 stopped improving.
    Patience,
    TargetReached,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub epochs: usize,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

/// Drives [`TrainState`] through epochs; with an output directory it keeps
/// `metrics.csv`, `last.ckpt` and `best.ckpt` there.
pub struct Trainer<'a, S> {
    pub state: TrainState<S>,
    data: &'a TrainData<S>,
    out_dir: Option<PathBuf>,
    augment: Option<AugmentPolicy>,
    /// Largest per-slot gradient norm of the last completed step.
    last_largest: Option<(String, f64)>,
}

fn global_norm<S: Scalar>(grads: &std::collections::BTreeMap<String, Tensor<S>>) -> f64 {
    grads.values().map(|g| g.norm().powi(2)).sum::<f64>().sqrt()
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(state: TrainState<S>, data: &'a TrainData<S>, out_dir: Option<&Path>) -> Result<Self> {
        let cfg = &state.config;
        if data.train.n_classes != cfg.model.n_classes {
            return Err(Error::Consistency("dataset and model disagree on the class count".into()));
        }
        let t = &cfg.train;
        let classes = match &t.minority_classes {
            MinorityClasses::Auto => minority_classes(&data.train.class_counts()),
            MinorityClasses::Listed(v) => {
                if let Some(&c) = v.iter().find(|&&c| c >= cfg.model.n_classes) {
                    return Err(Error::Config(format!("minority class {c} out of range")));
                }
                v.clone()
            }
        };
        let augment = (t.augment && !classes.is_empty() && t.augment_probability > 0.0).then(|| AugmentPolicy {
            classes,
            probability: t.augment_probability,
            segment_s: t.augment_segment_s,
        });
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join("config.txt");
            std::fs::write(&cfg_path, cfg.render()).map_err(|e| Error::io(&cfg_path, e))?;
            prepare_metrics(&dir.join("metrics.csv"), state.epoch)?;
        }
        Ok(Self {
            state,
            data,
            out_dir: out_dir.map(Path::to_path_buf),
            augment,
            last_largest: None,
        })
    }

    pub fn augment_policy(&self) -> Option<&AugmentPolicy> {
        self.augment.as_ref()
    }

    /// One optimizer step on the given train examples; returns the batch loss.
    pub fn step(&mut self, ids: &[usize], lr: f64, batch_no: usize) -> Result<(f64, usize)> {
        let st = &mut self.state;
        let epoch = st.epoch;
        let batch = assemble_batch(&self.data.train, ids, &self.data.store, self.augment.as_ref(), &mut st.rng)?;
        let context = |detail: String, last: &Option<(String, f64)>| {
            let culprit = match last {
                Some((slot, norm)) => format!("largest gradient norm in the previous step: {slot} ({norm:.3e})"),
                None => "no earlier step to blame".into(),
            };
            Error::NonFinite(format!(
                "training diverged at epoch {epoch} batch {batch_no}: {detail}; {culprit}"
            ))
        };
        let g = match st.model.gradients(batch.features, &batch.labels, Mode::Train, &mut st.rng) {
            Ok(g) => g,
            Err(Error::NonFinite(op)) => return Err(context(format!("non-finite value from {op}"), &self.last_largest)),
            Err(e) => return Err(e),
        };
        let largest = g
            .grads
            .iter()
            .map(|(n, t)| (n.clone(), t.norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if !g.loss.is_finite() {
            return Err(context(format!("loss {}", g.loss), &largest));
        }
        let mut grads = g.grads;
        if let Some(max) = st.config.train.clip_grad_norm {
            let norm = global_norm(&grads);
            if norm > max {
                let scale = S::of(max / norm);
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        st.model.params.accumulate(grads)?;
        adam_step(&mut st.model.params, &mut st.adam, lr)?;
        st.model.update_running_stats(&g.batch_stats)?;
        self.last_largest = largest;
        Ok((g.loss, batch.augmented))
    }

    fn eval_due(&self, epoch: usize) -> bool {
        let t = &self.state.config.train;
        (epoch + 1) % t.eval_every == 0 || epoch + 1 == t.max_epochs
    }

    /// Dev macro F1 of the current parameters.
    pub fn dev_f1(&self) -> Result<f64> {
        Ok(evaluate(&self.state.model, &self.data.dev, &self.data.store)?.scores.macro_f1)
    }

    /// Runs the next epoch, evaluates dev when due and writes the outputs.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        let lr = lr_at(epoch, &self.state.config.train);
        let order = epoch_sampler(&self.data.train, &mut self.state.rng)?;
        let batches: Vec<Vec<usize>> = minibatches(&order, self.state.config.train.batch_size)?
            .into_iter()
            .map(<[usize]>::to_vec)
            .collect();
        let (mut loss_sum, mut augmented) = (0.0, 0);
        for (b, ids) in batches.iter().enumerate() {
            let (loss, aug) = self.step(ids, lr, b)?;
            loss_sum += loss * ids.len() as f64;
            augmented += aug;
        }
        let train_loss = loss_sum / order.len() as f64;
        let dev_macro_f1 = if self.eval_due(epoch) {
            Some(self.dev_f1()?)
        } else {
            None
        };
        self.state.epoch += 1;
        let mut improved = false;
        if let Some(f1) = dev_macro_f1 {
            if self.state.best_f1.is_none_or(|b| f1 > b) {
                self.state.best_f1 = Some(f1);
                self.state.best_epoch = Some(epoch);
                self.state.stale_evals = 0;
                improved = true;
            } else {
                self.state.stale_evals += 1;
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            dev_macro_f1,
            augmented,
        };
        info!(
            "epoch {epoch}: lr {lr}, train loss {train_loss:.4}{}",
            dev_macro_f1.map_or_else(String::new, |f| format!(", dev macro F1 {f:.4}"))
        );
        if let Some(dir) = &self.out_dir {
            let path = dir.join("metrics.csv");
            let mut f = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", record.csv_row()).map_err(|e| Error::io(&path, e))?;
            if improved {
                save_checkpoint(&self.state, &dir.join("best.ckpt"))?;
            }
            save_checkpoint(&self.state, &dir.join("last.ckpt"))?;
        }
        Ok(record)
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        let t = &self.state.config.train;
        if let (Some(target), Some(best)) = (t.target_f1, self.state.best_f1) {
            if best >= target {
                return Some(StopReason::TargetReached);
            }
        }
        if self.state.stale_evals >= t.patience {
            return Some(StopReason::Patience);
        }
        (self.state.epoch >= t.max_epochs).then_some(StopReason::MaxEpochs)
    }

    /// Epochs until a stopping rule fires.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let mut records = Vec::new();
        let stop = loop {
            if let Some(reason) = self.stop_reason() {
                break reason;
            }
            records.push(self.run_epoch()?);
        };
        info!("stopped after {} epochs ({stop:?})", self.state.epoch);
        Ok(TrainOutcome {
            records,
            epochs: self.state.epoch,
            best_f1: self.state.best_f1,
            best_epoch: self.state.best_epoch,
            stop,
        })
    }
}

/// Starts a metrics file, or on resume drops rows from `from_epoch` onwards so
/// the continued run appends exactly what an uninterrupted one would.
fn prepare_metrics(path: &Path, from_epoch: usize) -> Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    if from_epoch > 0 {
        match std::fs::read_to_string(path) {
            Ok(old) => {
                for line in old.lines().skip(1) {
                    let keep = line
                        .split(',')
                        .next()
                        .and_then(|e| e.parse::<usize>().ok())
                        .is_some_and(|e| e < from_epoch);
                    if keep {
                        text.push_str(line);
                        text.push('\n');
                    }
                }
            }
            Err(_) => warn!("no earlier metrics at {}; starting a new file", path.display()),
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains from scratch on `<data_dir>/{train,dev}.csv`.
pub fn train<S: Scalar>(config: &RunConfig, data_dir: &Path, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let data = TrainData::<S>::load(data_dir, config)?;
    let state = TrainState::new(config.clone())?;
    Trainer::new(state, &data, out_dir)?.run()
}

/// Continues a run from a saved state.
pub fn resume<S: Scalar>(state: TrainState<S>, data_dir: &Path, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let data = TrainData::<S>::load(data_dir, &state.config)?;
    Trainer::new(state, &data, out_dir)?.run()
}
