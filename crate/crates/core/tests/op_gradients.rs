//! Every differentiable op checked against central finite differences.

use std::collections::BTreeMap;

use asc_core::numerics::{
    finite_diff_check, GradcheckConfig, Mode, ParamStore, RunningStats, Tape, Tensor, Var,
};
use asc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Builds the loss `sum(out * probe)` from a graph over the named params, then
/// checks every param slot.
fn check<F>(params: ParamStore<f64>, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let probe_rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(seed));
    let mut probe: Option<Tensor<f64>> = None;
    let run = |ps: &ParamStore<f64>, probe: &mut Option<Tensor<f64>>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars: BTreeMap<String, Var> = ps
            .iter()
            .map(|(n, s)| (n.to_string(), tape.param(n, s.value.clone())))
            .collect();
        let out = build(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = probe
            .get_or_insert_with(|| random(&mut probe_rng.borrow_mut(), &shape, 1.0))
            .clone();
        let loss = tape.weighted_sum(out, w)?;
        Ok((tape, loss))
    };
    let mut params = params;
    let (tape, loss) = run(&params, &mut probe).unwrap();
    params.accumulate(tape.backward(loss).unwrap()).unwrap();
    let report = finite_diff_check(
        &mut params,
        |ps| {
            let (tape, loss) = run(ps, &mut probe)?;
            Ok(tape.value(loss).data()[0])
        },
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "\n{report}");
    report.slots.iter().map(|s| s.max_rel_err).fold(0.0, f64::max)
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamStore::new();
    p.insert("x", random(&mut rng, &[2, 2, 5, 6], 1.0)).unwrap();
    p.insert("k", random(&mut rng, &[3, 2, 3, 3], 0.5)).unwrap();
    check(p, 10, |t, v| t.conv2d(v["x"], v["k"], (1, 1)));

    let mut p = ParamStore::new();
    p.insert("x", random(&mut rng, &[1, 5, 7], 1.0)).unwrap();
    p.insert("k", random(&mut rng, &[2, 1, 3, 3], 0.5)).unwrap();
    check(p, 11, |t, v| t.conv2d(v["x"], v["k"], (2, 1)));
}

#[test]
fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamStore::new();
    p.insert("x", random(&mut rng, &[2, 3, 6, 5], 1.0)).unwrap();
    check(p.clone(), 20, |t, v| t.maxpool2d(v["x"], (2, 2), (2, 2)));
    check(p, 21, |t, v| t.maxpool2d(v["x"], (2, 1), (2, 1)));
}

#[test]
fn batchnorm_gradients_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamStore::new();
    p.insert("x", random(&mut rng, &[2, 3, 4, 4], 2.0)).unwrap();
    p.insert("gamma", random(&mut rng, &[3], 1.5)).unwrap();
    p.insert("beta", random(&mut rng, &[3], 1.0)).unwrap();
    let running = RunningStats {
        mean: Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap(),
        var: Tensor::new(&[3], vec![0.5, 1.5, 2.0]).unwrap(),
    };
    for mode in [Mode::Train, Mode::Eval] {
        let err = check(p.clone(), 30, |t, v| {
            Ok(t.batchnorm(v["x"], v["gamma"], v["beta"], &running, mode)?.0)
        });
        assert!(err < 1e-4);
        check(p.clone(), 31, |t, v| {
            Ok(t.batchnorm_relu(v["x"], v["gamma"], v["beta"], &running, mode)?.0)
        });
    }
}

#[test]
fn bilstm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ParamStore::new();
    let (q, h) = (5, 4);
    p.insert("x", random(&mut rng, &[2, 3, q], 1.0)).unwrap();
    for dir in ["f", "b"] {
        p.insert(&format!("{dir}.w_ih"), random(&mut rng, &[4 * h, q], 0.6)).unwrap();
        p.insert(&format!("{dir}.w_hh"), random(&mut rng, &[4 * h, h], 0.6)).unwrap();
        p.insert(&format!("{dir}.bias"), random(&mut rng, &[4 * h], 0.6)).unwrap();
    }
    check(p, 40, |t, v| {
        let f = t.lstm(v["x"], v["f.w_ih"], v["f.w_hh"], v["f.bias"], false)?;
        let b = t.lstm(v["x"], v["b.w_ih"], v["b.w_hh"], v["b.bias"], true)?;
        t.concat_last(f, b)
    });
}

#[test]
fn dense_stack_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamStore::new();
    p.insert("x", random(&mut rng, &[3, 6], 1.0)).unwrap();
    p.insert("w1", random(&mut rng, &[5, 6], 0.8)).unwrap();
    p.insert("b1", random(&mut rng, &[5], 0.5)).unwrap();
    p.insert("w2", random(&mut rng, &[4, 5], 0.8)).unwrap();
    p.insert("b2", random(&mut rng, &[4], 0.5)).unwrap();
    check(p, 50, |t, v| {
        let h = t.linear(v["x"], v["w1"], v["b1"])?;
        let h = t.relu(h)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let h = t.dropout(h, 0.3, Mode::Train, &mut drop_rng)?;
        let logits = t.linear(h, v["w2"], v["b2"])?;
        t.softmax_cross_entropy(logits, &[0, 3, 1])
    });
}

#[test]
fn cross_entropy_gradient_is_probs_minus_onehot() {
    let logits = Tensor::new(&[1, 4], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let z = tape.param("z", logits.clone());
    let loss = tape.softmax_cross_entropy(z, &[1]).unwrap();
    let g = tape.backward(loss).unwrap().remove("z").unwrap();
    let p = asc_core::numerics::softmax(&[0.3, -1.2, 2.0, 0.5], 1.0).unwrap();
    for (k, (&gk, pk)) in g.data().iter().zip(p).enumerate() {
        let onehot = if k == 1 { 1.0 } else { 0.0 };
        assert!((gk - (pk - onehot)).abs() < 1e-15);
    }
}
