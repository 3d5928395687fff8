mod common;

use asc_core::training::{load_checkpoint, resume, train, StopReason, TrainData, TrainState, Trainer};
use asc_core::Error;
use common::{tiny_config, write_corpus};

#[test]
fn repeated_steps_on_one_batch_lower_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.set("model.dropout_pooled", "0").unwrap();
    cfg.set("model.dropout_hidden", "0").unwrap();
    write_corpus(&cfg, dir.path());
    let data = TrainData::<f64>::load(dir.path(), &cfg).unwrap();
    let mut trainer = Trainer::new(TrainState::new(cfg).unwrap(), &data, None).unwrap();
    let ids: Vec<usize> = (0..6).collect();
    let losses: Vec<f64> = (0..20).map(|b| trainer.step(&ids, 1e-2, b).unwrap().0).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "loss rose {rises} times: {losses:?}");
    assert!(losses[19] < losses[0]);
}

#[test]
fn zero_step_size_leaves_parameters_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    write_corpus(&cfg, dir.path());
    let data = TrainData::<f64>::load(dir.path(), &cfg).unwrap();
    let mut trainer = Trainer::new(TrainState::new(cfg).unwrap(), &data, None).unwrap();
    let before = trainer.state.model.params.clone();
    for b in 0..3 {
        trainer.step(&[0, 4, 8], 0.0, b).unwrap();
    }
    for (name, slot) in trainer.state.model.params.iter() {
        assert_eq!(slot.value, before.get(name).unwrap().clone(), "{name} moved");
    }
}

#[test]
fn stalled_dev_score_triggers_patience() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.set("train.lr", "1e-12").unwrap();
    cfg.set("train.max_epochs", "40").unwrap();
    cfg.set("train.patience", "2").unwrap();
    write_corpus(&cfg, dir.path());
    let out = train::<f32>(&cfg, dir.path(), None).unwrap();
    assert_eq!(out.stop, StopReason::Patience);
    assert!(out.epochs < 40);
    let best = out.best_f1.unwrap();
    let tail: Vec<f64> = out.records.iter().rev().take(2).map(|r| r.dev_macro_f1.unwrap()).collect();
    assert!(tail.iter().all(|&f| f <= best));
    assert_eq!(out.best_epoch, Some(out.epochs - 3));
}

#[test]
fn target_score_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.set("train.target_f1", "0").unwrap();
    write_corpus(&cfg, dir.path());
    let out = train::<f32>(&cfg, dir.path(), None).unwrap();
    assert_eq!(out.stop, StopReason::TargetReached);
    assert_eq!(out.epochs, 1);
}

#[test]
fn same_seed_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    write_corpus(&cfg, dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = train::<f32>(&cfg, dir.path(), Some(&a)).unwrap();
    let rb = train::<f32>(&cfg, dir.path(), Some(&b)).unwrap();
    assert_eq!(ra.records, rb.records);
    assert_eq!(std::fs::read(a.join("last.ckpt")).unwrap(), std::fs::read(b.join("last.ckpt")).unwrap());

    let mut other = cfg.clone();
    other.set("train.seed", "1").unwrap();
    let rc = train::<f32>(&other, dir.path(), None).unwrap();
    assert_ne!(ra.records, rc.records);
}

#[test]
fn interrupted_run_resumes_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    write_corpus(&cfg, dir.path());
    let (whole, split) = (dir.path().join("whole"), dir.path().join("split"));
    train::<f32>(&cfg, dir.path(), Some(&whole)).unwrap();

    let data = TrainData::<f32>::load(dir.path(), &cfg).unwrap();
    let mut first = Trainer::new(TrainState::new(cfg.clone()).unwrap(), &data, Some(&split)).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    drop(first);
    // A half-written third epoch row must not survive the restart.
    let metrics = split.join("metrics.csv");
    let mut text = std::fs::read_to_string(&metrics).unwrap();
    text.push_str("2,0.001,9.9,\n");
    std::fs::write(&metrics, text).unwrap();

    let state = load_checkpoint::<f32>(&split.join("last.ckpt")).unwrap();
    assert_eq!(state.epoch, 2);
    resume(state, dir.path(), Some(&split)).unwrap();
    for file in ["metrics.csv", "last.ckpt", "best.ckpt"] {
        assert_eq!(
            std::fs::read(whole.join(file)).unwrap(),
            std::fs::read(split.join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn divergence_is_reported_with_its_location() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.set("train.lr", "1e30").unwrap();
    write_corpus(&cfg, dir.path());
    match train::<f32>(&cfg, dir.path(), None) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}
