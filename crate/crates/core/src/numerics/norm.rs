//! Per-channel batch normalization for `(B, C, H, W)` / `(C, H, W)` activations.

use super::tape::{Backward, Tape, Var};
use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics. Fresh stats are mean 0, variance 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], S::one()),
        }
    }
}

/// Batch statistics observed by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    /// Folds these statistics into `running` with the given momentum; the
    /// variance is bias-corrected by `n / (n - 1)`.
    pub fn update<S: Scalar>(&self, running: &mut RunningStats<S>, momentum: f64) {
        let correction = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for (c, (m, v)) in running
            .mean
            .data_mut()
            .iter_mut()
            .zip(running.var.data_mut().iter_mut())
            .enumerate()
        {
            *m = S::of((1.0 - momentum) * m.f64() + momentum * self.mean[c]);
            *v = S::of((1.0 - momentum) * v.f64() + momentum * self.var[c] * correction);
        }
    }
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h * w)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::dim("batchnorm", format!("expected (C,H,W) or (B,C,H,W), got {shape:?}"))),
    }
}

struct Normalized<S> {
    output: Tensor<S>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    stats: Option<BatchStats>,
}

fn normalize<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &RunningStats<S>,
    mode: Mode,
    relu: bool,
) -> Result<Normalized<S>> {
    let (batch, channels, spatial) = layout(input.shape())?;
    for t in [gamma, beta, &running.mean, &running.var] {
        t.expect_shape("batchnorm", &[channels])?;
    }
    let x = input.data();
    let count = batch * spatial;
    let idx = |b: usize, c: usize| (b * channels + c) * spatial;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for b in 0..batch {
                    s += x[idx(b, c)..][..spatial].iter().map(|v| v.f64()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut q = 0.0;
                for b in 0..batch {
                    q += x[idx(b, c)..][..spatial]
                        .iter()
                        .map(|v| (v.f64() - m).powi(2))
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = q / count as f64;
            }
            (mean, var)
        }
        Mode::Eval => (
            running.mean.data().iter().map(|v| v.f64()).collect(),
            running.var.data().iter().map(|v| v.f64()).collect(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        for c in 0..channels {
            let (g, bt) = (gamma.data()[c].f64(), beta.data()[c].f64());
            let (m, is) = (mean[c], inv_std[c]);
            let o = idx(b, c);
            let (scale, shift) = (g * is, bt - g * m * is);
            if relu {
                out.extend(x[o..o + spatial].iter().map(|v| S::of((scale * v.f64() + shift).max(0.0))));
            } else {
                out.extend(x[o..o + spatial].iter().map(|v| S::of(scale * v.f64() + shift)));
            }
        }
    }
    let stats = (mode == Mode::Train).then(|| BatchStats {
        mean: mean.clone(),
        var,
        count,
    });
    Ok(Normalized {
        output: Tensor::new(input.shape(), out)?,
        mean,
        inv_std,
        stats,
    })
}

/// Normalizes `input` per channel. In train mode the batch statistics are
/// used and returned so the caller can fold them into the running stats; in
/// eval mode only `running` is read.
pub fn batchnorm<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &RunningStats<S>,
    mode: Mode,
) -> Result<(Tensor<S>, Option<BatchStats>)> {
    let n = normalize(input, gamma, beta, running, mode, false)?;
    Ok((n.output, n.stats))
}

/// Keeps the statistics used in the forward pass; normalized values are
/// recomputed from the input.
struct BatchNormRule {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
    /// Output went through a ReLU; zero outputs pass no gradient.
    relu: bool,
}

impl<S: Scalar> Backward<S> for BatchNormRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs: &[bool],
        output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (batch, channels, spatial) = layout(inputs[0].shape())?;
        let gamma = inputs[1].data();
        let x = inputs[0].data();
        let y = output.data();
        let relu = self.relu;
        let dy = |k: usize| if relu && y[k] <= S::zero() { 0.0 } else { grad.data()[k].f64() };
        let count = (batch * spatial) as f64;
        let idx = |b: usize, c: usize| (b * channels + c) * spatial;

        let mut dgamma = vec![0.0; channels];
        let mut dbeta = vec![0.0; channels];
        for b in 0..batch {
            for c in 0..channels {
                let o = idx(b, c);
                let (m, is) = (self.mean[c], self.inv_std[c]);
                let (mut sg, mut sb) = (0.0, 0.0);
                for k in o..o + spatial {
                    let g = dy(k);
                    sg += g * (x[k].f64() - m) * is;
                    sb += g;
                }
                dgamma[c] += sg;
                dbeta[c] += sb;
            }
        }

        let dx = needs[0].then(|| {
            let mut dx = Vec::with_capacity(x.len());
            for b in 0..batch {
                for c in 0..channels {
                    let o = idx(b, c);
                    let (m, is) = (self.mean[c], self.inv_std[c]);
                    let scale = gamma[c].f64() * is;
                    match self.mode {
                        // dx = g/sigma * (dy - mean(dy) - xhat * mean(dy * xhat))
                        Mode::Train => {
                            let (mb, mg) = (dbeta[c] / count, dgamma[c] / count);
                            dx.extend((o..o + spatial).map(|k| {
                                S::of(scale * (dy(k) - mb - (x[k].f64() - m) * is * mg))
                            }));
                        }
                        Mode::Eval => dx.extend((o..o + spatial).map(|k| S::of(scale * dy(k)))),
                    }
                }
            }
            Tensor::new(inputs[0].shape(), dx)
        });

        let to_tensor = |v: Vec<f64>| Tensor::new(&[channels], v.into_iter().map(S::of).collect());
        Ok(vec![
            dx.transpose()?,
            Some(to_tensor(dgamma)?),
            Some(to_tensor(dbeta)?),
        ])
    }

    fn name(&self) -> &'static str {
        "batchnorm"
    }
}

impl<S: Scalar> Tape<S> {
    /// Records a batch-norm node; returns the batch statistics in train mode.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<S>,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.batchnorm_impl(x, gamma, beta, running, mode, false)
    }

    /// Batch norm followed by ReLU as one node.
    pub fn batchnorm_relu(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<S>,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.batchnorm_impl(x, gamma, beta, running, mode, true)
    }

    fn batchnorm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<S>,
        mode: Mode,
        relu: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let n = normalize(self.value(x), self.value(gamma), self.value(beta), running, mode, relu)?;
        let rule = BatchNormRule {
            mean: n.mean,
            inv_std: n.inv_std,
            mode,
            relu,
        };
        let y = self.push(n.output, &[x, gamma, beta], Box::new(rule))?;
        Ok((y, n.stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(&[4, 3, 5, 5], |_| rng.random_range(-3.0..5.0));
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let (y, stats) =
            batchnorm(&x, &ones, &zeros, &RunningStats::new(3), Mode::Train).unwrap();
        assert!(stats.is_some());
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + c) * 25..][..25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
        }
    }

    #[test]
    fn eval_mode_with_fresh_stats_only_rescales() {
        let x = Tensor::from_fn(&[2, 2, 2], |i| i as f64 - 3.0);
        let (y, stats) = batchnorm(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &RunningStats::new(2),
            Mode::Eval,
        )
        .unwrap();
        assert!(stats.is_none());
        let s = (1.0f64 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut r = RunningStats::<f64>::new(1);
        let s = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        };
        s.update(&mut r, 0.1);
        assert!((r.mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((r.var.data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
