//! Fully connected layers, activations, dropout and the softmax losses.

use rand::Rng;

use super::tape::{Backward, Tape, Var};
use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// Numerically stable `softmax(logits / temperature)`, evaluated in 64-bit.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptySequence("softmax"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// `-ln p[label]` for a probability vector.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(Error::Index {
        what: "class label",
        index: label,
        len: probs.len(),
    })?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

/// `y = x W^T + b` for `x: (B, in)`, `W: (out, in)`, `b: (out)`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = match *x.shape() {
        [n] => (1, n),
        [r, n] => (r, n),
        ref s => return Err(Error::dim("linear", format!("input must be (B,in), got {s:?}"))),
    };
    let out = w.shape()[0];
    if w.shape() != [out, cols] || b.shape() != [out] {
        return Err(Error::dim(
            "linear",
            format!(
                "input {:?} incompatible with weight {:?} / bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    let mut y: Vec<S> = (0..rows).flat_map(|_| b.data().iter().copied()).collect();
    S::gemm(
        rows,
        cols,
        out,
        S::one(),
        x.data(),
        (cols as isize, 1),
        w.data(),
        (1, cols as isize),
        S::one(),
        &mut y,
        (out as isize, 1),
    );
    let shape: Vec<usize> = if x.rank() == 1 { vec![out] } else { vec![rows, out] };
    Tensor::new(&shape, y)
}

struct LinearRule;

impl<S: Scalar> Backward<S> for LinearRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (out, cols) = (w.shape()[0], w.shape()[1]);
        let rows = x.len() / cols;
        let mut dw = Tensor::zeros(w.shape());
        S::gemm(
            out,
            rows,
            cols,
            S::one(),
            grad.data(),
            (1, out as isize),
            x.data(),
            (cols as isize, 1),
            S::zero(),
            dw.data_mut(),
            (cols as isize, 1),
        );
        let mut db = vec![0.0; out];
        for row in grad.data().chunks(out) {
            for (a, g) in db.iter_mut().zip(row) {
                *a += g.f64();
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            S::gemm(
                rows,
                out,
                cols,
                S::one(),
                grad.data(),
                (out as isize, 1),
                w.data(),
                (cols as isize, 1),
                S::zero(),
                dx.data_mut(),
                (cols as isize, 1),
            );
            dx
        });
        Ok(vec![
            dx,
            Some(dw),
            Some(Tensor::new(&[out], db.into_iter().map(S::of).collect())?),
        ])
    }

    fn name(&self) -> &'static str {
        "linear"
    }
}

struct ReluRule;

impl<S: Scalar> Backward<S> for ReluRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let dx = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), dx)?)])
    }

    fn name(&self) -> &'static str {
        "relu"
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<S: Scalar, R: Rng + ?Sized>(
    len: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<S>> {
    check_rate(rate)?;
    let keep = S::of(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                S::zero()
            } else {
                keep
            }
        })
        .collect())
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")))
    }
}

/// Applies inverted dropout in train mode; identity in eval mode or at rate 0.
pub fn dropout<S: Scalar, R: Rng + ?Sized>(
    input: &Tensor<S>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<S>> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<S, R>(input.len(), rate, rng)?;
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Tensor::new(input.shape(), data)
}

struct MaskRule<S> {
    mask: Vec<S>,
}

impl<S: Scalar> Backward<S> for MaskRule<S> {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let dx = grad.data().iter().zip(&self.mask).map(|(&g, &m)| g * m).collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), dx)?)])
    }

    fn name(&self) -> &'static str {
        "dropout"
    }
}

/// Per-row softmax of `(B, N)` logits plus mean negative log-likelihood.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (rows, classes) = match *logits.shape() {
        [r, n] => (r, n),
        ref s => return Err(Error::dim("cross_entropy", format!("logits must be (B,N), got {s:?}"))),
    };
    if labels.len() != rows {
        return Err(Error::dim(
            "cross_entropy",
            format!("{rows} logit rows but {} labels", labels.len()),
        ));
    }
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(rows);
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Index {
                what: "class label",
                index: label,
                len: classes,
            });
        }
        let z: Vec<f64> = logits.row(r).iter().map(|v| v.f64()).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[label];
        probs.push(z.iter().map(|v| (v - lse).exp()).collect());
    }
    Ok((loss / rows as f64, probs))
}

struct SoftmaxXentRule {
    labels: Vec<usize>,
    probs: Vec<Vec<f64>>,
}

impl<S: Scalar> Backward<S> for SoftmaxXentRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let scale = grad.data()[0].f64() / self.labels.len() as f64;
        let mut d = Vec::with_capacity(inputs[0].len());
        for (p, &label) in self.probs.iter().zip(&self.labels) {
            for (k, &pk) in p.iter().enumerate() {
                let onehot = if k == label { 1.0 } else { 0.0 };
                d.push(S::of((pk - onehot) * scale));
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), d)?)])
    }

    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
}

struct WeightedSumRule<S> {
    weights: Tensor<S>,
}

impl<S: Scalar> Backward<S> for WeightedSumRule<S> {
    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        _needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let g = grad.data()[0];
        Ok(vec![Some(self.weights.map(|w| w * g))])
    }

    fn name(&self) -> &'static str {
        "weighted_sum"
    }
}

impl<S: Scalar> Tape<S> {
    /// `sum(x * weights)` as a single-element node.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<S>) -> Result<Var> {
        weights.expect_shape("weighted_sum", self.value(x).shape())?;
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.f64() * b.f64())
            .sum();
        self.push(Tensor::scalar(S::of(total)), &[x], Box::new(WeightedSumRule { weights }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = linear(self.value(x), self.value(w), self.value(b))?;
        self.push(y, &[x, w, b], Box::new(LinearRule))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(S::zero()));
        self.push(y, &[x], Box::new(ReluRule))
    }

    /// Inverted dropout; returns `x` unchanged in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        check_rate(rate)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask::<S, R>(self.value(x).len(), rate, rng)?;
        let input = self.value(x);
        let data = input.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let y = Tensor::new(input.shape(), data)?;
        self.push(y, &[x], Box::new(MaskRule { mask }))
    }

    /// Mean softmax cross-entropy over the batch; a single-element node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy(self.value(logits), labels)?;
        let rule = SoftmaxXentRule {
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(S::of(loss)), &[logits], Box::new(rule))
    }
}
