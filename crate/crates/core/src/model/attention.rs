//! Learned-query attention pooling and the global time-max baseline.

use crate::numerics::{softmax, Backward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-head scores over time, per-head summaries, and their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `(M, T)`; each row is a distribution over frames.
    pub scores: Tensor<f64>,
    /// `(M, p)`.
    pub summaries: Tensor<f64>,
}

impl AttentionOutput {
    pub fn heads(&self) -> usize {
        self.scores.shape()[0]
    }

    /// `[s^1; ...; s^M]` in head order, length `M * p`.
    pub fn utterance(&self) -> &[f64] {
        self.summaries.data()
    }

    /// Frame with the highest score for `head` (first one on ties).
    pub fn argmax(&self, head: usize) -> usize {
        argmax(self.scores.row(head))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sequence_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [0, ..] | [_, 0, _] => Err(Error::EmptySequence(op)),
        [t, p] => Ok((1, t, p)),
        [b, t, p] => Ok((b, t, p)),
        _ => Err(Error::dim(op, format!("expected (T,p) or (B,T,p), got {shape:?}"))),
    }
}

/// `a_t = softmax_t(h_t . v / temperature)` for a `(T, p)` sequence.
pub fn attention_scores<S: Scalar>(
    sequence: &Tensor<S>,
    head: &[S],
    temperature: f64,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "attention temperature must be positive, got {temperature}"
        )));
    }
    let (_, t, p) = sequence_dims(sequence.shape(), "attention_scores")?;
    if sequence.rank() != 2 || head.len() != p {
        return Err(Error::dim(
            "attention_scores",
            format!("sequence {:?} with head vector of length {}", sequence.shape(), head.len()),
        ));
    }
    let logits: Vec<f64> = (0..t)
        .map(|i| dot(sequence.row(i), head))
        .collect();
    softmax(&logits, temperature)
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

/// `s = sum_t a_t h_t` for a `(T, p)` sequence.
pub fn summarize_head<S: Scalar>(sequence: &Tensor<S>, scores: &[f64]) -> Result<Vec<f64>> {
    let (_, t, p) = sequence_dims(sequence.shape(), "summarize_head")?;
    if sequence.rank() != 2 || scores.len() != t {
        return Err(Error::dim(
            "summarize_head",
            format!("sequence {:?} with {} scores", sequence.shape(), scores.len()),
        ));
    }
    let mut out = vec![0.0; p];
    for (i, &a) in scores.iter().enumerate() {
        for (o, h) in out.iter_mut().zip(sequence.row(i)) {
            *o += a * h.f64();
        }
    }
    Ok(out)
}

/// Applies every row of `heads` (`(M, p)`) to one `(T, p)` sequence.
pub fn pool_attention<S: Scalar>(
    sequence: &Tensor<S>,
    heads: &Tensor<S>,
    temperature: f64,
) -> Result<AttentionOutput> {
    heads.expect_rank("pool_attention", 2)?;
    let m = heads.shape()[0];
    let t = sequence.shape()[0];
    let p = heads.shape()[1];
    let mut scores = Vec::with_capacity(m * t);
    let mut summaries = Vec::with_capacity(m * p);
    for i in 0..m {
        let a = attention_scores(sequence, heads.row(i), temperature)?;
        summaries.extend(summarize_head(sequence, &a)?);
        scores.extend(a);
    }
    Ok(AttentionOutput {
        scores: Tensor::new(&[m, t], scores)?,
        summaries: Tensor::new(&[m, p], summaries)?,
    })
}

/// Element-wise maximum over time of a `(T, p)` sequence.
pub fn pool_max<S: Scalar>(sequence: &Tensor<S>) -> Result<Vec<f64>> {
    let (_, t, p) = sequence_dims(sequence.shape(), "pool_max")?;
    if sequence.rank() != 2 {
        return Err(Error::dim("pool_max", format!("expected (T,p), got {:?}", sequence.shape())));
    }
    let mut out = vec![f64::NEG_INFINITY; p];
    for i in 0..t {
        for (o, h) in out.iter_mut().zip(sequence.row(i)) {
            *o = o.max(h.f64());
        }
    }
    Ok(out)
}

/// Batched forward shared by the tape op: `h (B,T,p)`, `heads (M,p)` ->
/// scores `(B,M,T)` and summaries `(B,M,p)`.
fn attend_batch<S: Scalar>(h: &Tensor<S>, heads: &Tensor<S>, temperature: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, t, p) = sequence_dims(h.shape(), "attention_pool")?;
    if heads.rank() != 2 || heads.shape()[1] != p {
        return Err(Error::dim(
            "attention_pool",
            format!("sequence {:?} with heads {:?}", h.shape(), heads.shape()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "attention temperature must be positive, got {temperature}"
        )));
    }
    let m = heads.shape()[0];
    let hd = h.data();
    let vd: Vec<f64> = heads.data().iter().map(|v| v.f64()).collect();
    let mut scores = vec![0.0; b * m * t];
    let mut summaries = vec![0.0; b * m * p];
    for bi in 0..b {
        let seq = &hd[bi * t * p..(bi + 1) * t * p];
        for i in 0..m {
            let v = &vd[i * p..(i + 1) * p];
            let logits: Vec<f64> = (0..t)
                .map(|ti| seq[ti * p..(ti + 1) * p].iter().zip(v).map(|(x, y)| x.f64() * y).sum())
                .collect();
            let a = softmax(&logits, temperature)?;
            let s = &mut summaries[(bi * m + i) * p..(bi * m + i + 1) * p];
            for (ti, &w) in a.iter().enumerate() {
                for (o, x) in s.iter_mut().zip(&seq[ti * p..(ti + 1) * p]) {
                    *o += w * x.f64();
                }
            }
            scores[(bi * m + i) * t..(bi * m + i + 1) * t].copy_from_slice(&a);
        }
    }
    Ok((scores, summaries))
}

struct AttentionRule {
    temperature: f64,
    /// `(B, M, T)`
    scores: Vec<f64>,
}

impl<S: Scalar> Backward<S> for AttentionRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (h, heads) = (inputs[0], inputs[1]);
        let (b, t, p) = sequence_dims(h.shape(), "attention_pool")?;
        let m = heads.shape()[0];
        let hd: Vec<f64> = h.data().iter().map(|x| x.f64()).collect();
        let vd: Vec<f64> = heads.data().iter().map(|x| x.f64()).collect();
        let gd: Vec<f64> = grad.data().iter().map(|x| x.f64()).collect();
        let mut dh = vec![0.0; b * t * p];
        let mut dv = vec![0.0; m * p];
        let inv_temp = 1.0 / self.temperature;
        for bi in 0..b {
            let seq = &hd[bi * t * p..(bi + 1) * t * p];
            for i in 0..m {
                let a = &self.scores[(bi * m + i) * t..(bi * m + i + 1) * t];
                let ds = &gd[(bi * m + i) * p..(bi * m + i + 1) * p];
                let v = &vd[i * p..(i + 1) * p];
                let da: Vec<f64> = (0..t)
                    .map(|ti| seq[ti * p..(ti + 1) * p].iter().zip(ds).map(|(x, y)| x * y).sum())
                    .collect();
                let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                for ti in 0..t {
                    let dz = a[ti] * (da[ti] - mean) * inv_temp;
                    let row = &seq[ti * p..(ti + 1) * p];
                    let dh_row = &mut dh[(bi * t + ti) * p..(bi * t + ti + 1) * p];
                    for k in 0..p {
                        dh_row[k] += a[ti] * ds[k] + dz * v[k];
                    }
                    for (g, x) in dv[i * p..(i + 1) * p].iter_mut().zip(row) {
                        *g += dz * x;
                    }
                }
            }
        }
        let wrap = |need: bool, shape: &[usize], d: Vec<f64>| -> Result<Option<Tensor<S>>> {
            if !need {
                return Ok(None);
            }
            Tensor::new(shape, d.into_iter().map(S::of).collect()).map(Some)
        };
        Ok(vec![wrap(needs[0], h.shape(), dh)?, wrap(needs[1], heads.shape(), dv)?])
    }

    fn name(&self) -> &'static str {
        "attention_pool"
    }
}

struct TimeMaxRule {
    /// Winning frame per `(batch, feature)`.
    argmax: Vec<usize>,
}

impl<S: Scalar> Backward<S> for TimeMaxRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (_, t, p) = sequence_dims(inputs[0].shape(), "time_max")?;
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (j, (&ti, &g)) in self.argmax.iter().zip(grad.data()).enumerate() {
            let (bi, k) = (j / p, j % p);
            d[(bi * t + ti) * p + k] += g;
        }
        Ok(vec![Some(dx)])
    }

    fn name(&self) -> &'static str {
        "time_max"
    }
}

impl<S: Scalar> Tape<S> {
    /// Attention pooling of `h (B,T,p)` with `heads (M,p)`. Returns the
    /// concatenated summaries `(B, M*p)` and the scores `(B, M, T)`.
    pub fn attention_pool(&mut self, h: Var, heads: Var, temperature: f64) -> Result<(Var, Tensor<f64>)> {
        let (b, t, p) = sequence_dims(self.value(h).shape(), "attention_pool")?;
        let m = self.value(heads).shape()[0];
        let (scores, summaries) = attend_batch(self.value(h), self.value(heads), temperature)?;
        let out = Tensor::new(&[b, m * p], summaries.into_iter().map(S::of).collect())?;
        let score_tensor = Tensor::new(&[b, m, t], scores.clone())?;
        let var = self.push(out, &[h, heads], Box::new(AttentionRule { temperature, scores }))?;
        Ok((var, score_tensor))
    }

    /// Maximum over time of `h (B,T,p)`, giving `(B, p)`; ties go to the
    /// earliest frame.
    pub fn time_max(&mut self, h: Var) -> Result<Var> {
        let x = self.value(h);
        let (b, t, p) = sequence_dims(x.shape(), "time_max")?;
        let mut out = Vec::with_capacity(b * p);
        let mut arg = Vec::with_capacity(b * p);
        for bi in 0..b {
            for k in 0..p {
                let mut best = 0;
                for ti in 1..t {
                    if x.data()[(bi * t + ti) * p + k] > x.data()[(bi * t + best) * p + k] {
                        best = ti;
                    }
                }
                out.push(x.data()[(bi * t + best) * p + k]);
                arg.push(best);
            }
        }
        let y = Tensor::new(&[b, p], out)?;
        self.push(y, &[h], Box::new(TimeMaxRule { argmax: arg }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f64]]) -> Tensor<f64> {
        let p = rows[0].len();
        Tensor::new(&[rows.len(), p], rows.concat()).unwrap()
    }

    #[test]
    fn two_frame_scores() {
        let h = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let sharp = attention_scores(&h, &[1.0, 0.0], 0.2).unwrap();
        assert!((sharp[0] - 0.993_307_149_075_715_1).abs() < 1e-12);
        assert!((sharp[1] - 0.006_692_850_924_284_856).abs() < 1e-12);
        let soft = attention_scores(&h, &[1.0, 0.0], 1.0).unwrap();
        assert!((soft[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((soft[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!(matches!(attention_scores(&h, &[1.0, 0.0], 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn identical_frames_get_uniform_scores() {
        let h = seq(&[&[0.3, -1.0], &[0.3, -1.0], &[0.3, -1.0]]);
        let a = attention_scores(&h, &[2.0, 5.0], 0.1).unwrap();
        assert!(a.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn summary_arithmetic() {
        let h = seq(&[&[2.0, 0.0], &[0.0, 4.0]]);
        assert_eq!(summarize_head(&h, &[0.25, 0.75]).unwrap(), vec![0.5, 3.0]);
        assert_eq!(summarize_head(&h, &[0.0, 1.0]).unwrap(), vec![0.0, 4.0]);
        assert!(summarize_head(&h, &[1.0]).is_err());
    }

    #[test]
    fn max_pooling() {
        let h = seq(&[&[1.0, 5.0], &[3.0, 2.0]]);
        assert_eq!(pool_max(&h).unwrap(), vec![3.0, 5.0]);
        assert_eq!(pool_max(&seq(&[&[1.5, -2.0]])).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn tape_op_matches_reference() {
        let h = Tensor::from_fn(&[2, 4, 3], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6);
        let heads = Tensor::from_fn(&[2, 3], |i| (i as f64 - 2.5) * 0.4);
        let mut tape = Tape::new();
        let hv = tape.input(h.clone());
        let vv = tape.input(heads.clone());
        let (s, scores) = tape.attention_pool(hv, vv, 0.2).unwrap();
        for b in 0..2 {
            let one = Tensor::new(&[4, 3], h.data()[b * 12..(b + 1) * 12].to_vec()).unwrap();
            let r = pool_attention(&one, &heads, 0.2).unwrap();
            let got = &tape.value(s).data()[b * 6..(b + 1) * 6];
            for (x, y) in got.iter().zip(r.utterance()) {
                assert!((x - y).abs() < 1e-14);
            }
            assert_eq!(&scores.data()[b * 8..(b + 1) * 8], r.scores.data());
        }
    }
}
