#![allow(dead_code)]

use std::path::Path;

use asc_core::config::RunConfig;
use asc_core::data::synth_corpus;

/// Three classes, one event type each, 2 s clips and a very small network.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("model.blocks", "4x1:2x2"),
        ("model.lstm_hidden", "4"),
        ("model.heads", "2"),
        ("model.classifier_hidden", "8"),
        ("model.n_classes", "3"),
        ("synth.n_classes", "3"),
        ("synth.types_per_class", "1"),
        ("synth.n_event_types", "3"),
        ("synth.clip_s", "2"),
        ("synth.events_min", "1"),
        ("synth.events_max", "1"),
        ("synth.train_clips", "12"),
        ("synth.dev_clips", "6"),
        ("synth.eval_clips", "6"),
        ("train.batch_size", "6"),
        ("train.eval_every", "1"),
        ("train.max_epochs", "4"),
        ("train.patience", "3"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

pub fn write_corpus(cfg: &RunConfig, dir: &Path) {
    synth_corpus(&cfg.synth, dir).unwrap();
}
