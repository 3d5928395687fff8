//! Unidirectional LSTM over whole sequences, and the bidirectional wrapper.
//!
//! Gate rows of the stacked weight matrices are ordered input, forget,
//! candidate, output (`[i; f; g; o]`, each `hidden` rows).

use rayon::prelude::*;

use super::tape::{Backward, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Weights of one LSTM direction.
#[derive(Debug, Clone)]
pub struct LstmWeights<S> {
    /// `(4h, q)`
    pub w_ih: Tensor<S>,
    /// `(4h, h)`
    pub w_hh: Tensor<S>,
    /// `(4h)`
    pub bias: Tensor<S>,
}

impl<S: Scalar> LstmWeights<S> {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    fn validate(&self, input_dim: usize) -> Result<usize> {
        let h = self.w_hh.shape().get(1).copied().unwrap_or(0);
        self.w_hh.expect_shape("lstm", &[4 * h, h])?;
        self.w_ih.expect_shape("lstm", &[4 * h, input_dim])?;
        self.bias.expect_shape("lstm", &[4 * h])?;
        Ok(h)
    }
}

/// Per-sequence activations kept for back-propagation.
struct Trace {
    /// Post-activation gates, `(T, 4h)`.
    gates: Vec<f64>,
    /// Cell states, `(T, h)`.
    cells: Vec<f64>,
    /// Hidden states, `(T, h)`.
    hidden: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sequence_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [0, ..] | [_, 0, _] => Err(Error::EmptySequence("lstm")),
        [t, q] => Ok((1, t, q)),
        [b, t, q] => Ok((b, t, q)),
        _ => Err(Error::dim("lstm", format!("expected (T,q) or (B,T,q), got {shape:?}"))),
    }
}

fn run_sequence<S: Scalar>(
    x: &[S],
    steps: usize,
    input_dim: usize,
    w: &LstmWeights<S>,
    reverse: bool,
) -> Trace {
    let h = w.hidden();
    let g4 = 4 * h;
    // Input projections for every step in one product: (T, q) x (q, 4h).
    let mut pre = vec![S::zero(); steps * g4];
    S::gemm(
        steps,
        input_dim,
        g4,
        S::one(),
        x,
        (input_dim as isize, 1),
        w.w_ih.data(),
        (1, input_dim as isize),
        S::zero(),
        &mut pre,
        (g4 as isize, 1),
    );

    let w_hh = w.w_hh.data();
    let bias = w.bias.data();
    let mut gates = vec![0.0; steps * g4];
    let mut cells = vec![0.0; steps * h];
    let mut hidden = vec![0.0; steps * h];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut z = vec![0.0; g4];

    for k in 0..steps {
        let t = if reverse { steps - 1 - k } else { k };
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &w_hh[r * h..(r + 1) * h];
            let rec: f64 = row.iter().zip(&h_prev).map(|(a, b)| a.f64() * b).sum();
            *zr = pre[t * g4 + r].f64() + bias[r].f64() + rec;
        }
        let gt = &mut gates[t * g4..(t + 1) * g4];
        for j in 0..h {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[h + j]);
            let g = z[2 * h + j].tanh();
            let o = sigmoid(z[3 * h + j]);
            gt[j] = i;
            gt[h + j] = f;
            gt[2 * h + j] = g;
            gt[3 * h + j] = o;
            let c = f * c_prev[j] + i * g;
            cells[t * h + j] = c;
            hidden[t * h + j] = o * c.tanh();
        }
        h_prev.copy_from_slice(&hidden[t * h..(t + 1) * h]);
        c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
    }
    Trace {
        gates,
        cells,
        hidden,
    }
}

struct SequenceGrads<S> {
    dx: Option<Vec<S>>,
    dw_ih: Vec<S>,
    dw_hh: Vec<f64>,
    dbias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backprop_sequence<S: Scalar>(
    x: &[S],
    steps: usize,
    input_dim: usize,
    w: &LstmWeights<S>,
    reverse: bool,
    trace: &Trace,
    dy: &[S],
    need_input: bool,
) -> SequenceGrads<S> {
    let h = w.hidden();
    let g4 = 4 * h;
    let w_hh = w.w_hh.data();
    let mut dz_all = vec![S::zero(); steps * g4];
    let mut dw_hh = vec![0.0; g4 * h];
    let mut dbias = vec![0.0; g4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; g4];

    for k in (0..steps).rev() {
        let t = if reverse { steps - 1 - k } else { k };
        // The step that ran before `t` in processing order.
        let prev = match (reverse, k) {
            (_, 0) => None,
            (false, _) => Some(t - 1),
            (true, _) => Some(t + 1),
        };
        let gt = &trace.gates[t * g4..(t + 1) * g4];
        for j in 0..h {
            let (i, f, g, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
            let c = trace.cells[t * h + j];
            let c_prev = prev.map_or(0.0, |p| trace.cells[p * h + j]);
            let tc = c.tanh();
            let dh = dy[t * h + j].f64() + dh_next[j];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dz[j] = dc * g * i * (1.0 - i);
            dz[h + j] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - g * g);
            dz[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        dh_next.fill(0.0);
        for r in 0..g4 {
            let d = dz[r];
            dbias[r] += d;
            dz_all[t * g4 + r] = S::of(d);
            if d == 0.0 {
                continue;
            }
            let row = &w_hh[r * h..(r + 1) * h];
            for j in 0..h {
                dh_next[j] += d * row[j].f64();
            }
            if let Some(p) = prev {
                let hp = &trace.hidden[p * h..(p + 1) * h];
                let drow = &mut dw_hh[r * h..(r + 1) * h];
                for j in 0..h {
                    drow[j] += d * hp[j];
                }
            }
        }
    }

    // dW_ih = dZ^T (4h, T) x X (T, q)
    let mut dw_ih = vec![S::zero(); g4 * input_dim];
    S::gemm(
        g4,
        steps,
        input_dim,
        S::one(),
        &dz_all,
        (1, g4 as isize),
        x,
        (input_dim as isize, 1),
        S::zero(),
        &mut dw_ih,
        (input_dim as isize, 1),
    );
    let dx = need_input.then(|| {
        // dX = dZ (T, 4h) x W_ih (4h, q)
        let mut dx = vec![S::zero(); steps * input_dim];
        S::gemm(
            steps,
            g4,
            input_dim,
            S::one(),
            &dz_all,
            (g4 as isize, 1),
            w.w_ih.data(),
            (input_dim as isize, 1),
            S::zero(),
            &mut dx,
            (input_dim as isize, 1),
        );
        dx
    });
    SequenceGrads {
        dx,
        dw_ih,
        dw_hh,
        dbias,
    }
}

/// Runs one LSTM direction over `(T, q)` or `(B, T, q)` input. Returns hidden
/// states of the same leading shape with trailing extent `h`; in `reverse`
/// mode the recurrence starts at the last step but outputs stay aligned with
/// their input step.
pub fn lstm<S: Scalar>(input: &Tensor<S>, w: &LstmWeights<S>, reverse: bool) -> Result<Tensor<S>> {
    let (out, _) = lstm_traced(input, w, reverse)?;
    Ok(out)
}

fn lstm_traced<S: Scalar>(
    input: &Tensor<S>,
    w: &LstmWeights<S>,
    reverse: bool,
) -> Result<(Tensor<S>, Vec<Trace>)> {
    let (_, steps, q) = sequence_dims(input.shape())?;
    let h = w.validate(q)?;
    let traces: Vec<Trace> = input
        .data()
        .par_chunks(steps * q)
        .map(|x| run_sequence(x, steps, q, w, reverse))
        .collect();
    let data: Vec<S> = traces
        .iter()
        .flat_map(|t| t.hidden.iter().map(|&v| S::of(v)))
        .collect();
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = h;
    Ok((Tensor::new(&shape, data)?, traces))
}

/// Bidirectional LSTM: forward and backward hidden states concatenated per
/// step, giving `p = 2h` features.
pub fn bilstm<S: Scalar>(
    input: &Tensor<S>,
    forward: &LstmWeights<S>,
    backward: &LstmWeights<S>,
) -> Result<Tensor<S>> {
    let f = lstm(input, forward, false)?;
    let b = lstm(input, backward, true)?;
    concat_last(&f, &b)
}

/// Concatenates two tensors of equal leading shape along the last axis.
pub fn concat_last<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::dim("concat", format!("{sa:?} vs {sb:?}")));
    }
    let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    let rows = a.len() / wa;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b.data()[r * wb..(r + 1) * wb]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().expect("nonempty") = wa + wb;
    Tensor::new(&shape, out)
}

struct LstmRule {
    reverse: bool,
    traces: Vec<Trace>,
}

impl<S: Scalar> Backward<S> for LstmRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let x = inputs[0];
        let w = LstmWeights {
            w_ih: inputs[1].clone(),
            w_hh: inputs[2].clone(),
            bias: inputs[3].clone(),
        };
        let (_, steps, q) = sequence_dims(x.shape())?;
        let h = w.hidden();
        let per_seq: Vec<SequenceGrads<S>> = x
            .data()
            .par_chunks(steps * q)
            .zip(grad.data().par_chunks(steps * h))
            .zip(self.traces.par_iter())
            .map(|((xs, dy), trace)| {
                backprop_sequence(xs, steps, q, &w, self.reverse, trace, dy, needs[0])
            })
            .collect();

        let mut dw_ih = Tensor::zeros(w.w_ih.shape());
        let mut dw_hh = vec![0.0; w.w_hh.len()];
        let mut dbias = vec![0.0; w.bias.len()];
        let mut dx = needs[0].then(|| Vec::with_capacity(x.len()));
        for g in per_seq {
            for (a, b) in dw_ih.data_mut().iter_mut().zip(g.dw_ih) {
                *a += b;
            }
            for (a, b) in dw_hh.iter_mut().zip(g.dw_hh) {
                *a += b;
            }
            for (a, b) in dbias.iter_mut().zip(g.dbias) {
                *a += b;
            }
            if let (Some(acc), Some(d)) = (dx.as_mut(), g.dx) {
                acc.extend(d);
            }
        }
        let dx = dx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
        let dw_hh = Tensor::new(w.w_hh.shape(), dw_hh.into_iter().map(S::of).collect())?;
        let dbias = Tensor::new(w.bias.shape(), dbias.into_iter().map(S::of).collect())?;
        Ok(vec![dx, Some(dw_ih), Some(dw_hh), Some(dbias)])
    }

    fn name(&self) -> &'static str {
        "lstm"
    }
}

struct ConcatRule {
    left: usize,
}

impl<S: Scalar> Backward<S> for ConcatRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _needs: &[bool],
        output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let width = output.shape()[output.rank() - 1];
        let right = width - self.left;
        let mut da = Vec::with_capacity(inputs[0].len());
        let mut db = Vec::with_capacity(inputs[1].len());
        for row in grad.data().chunks(width) {
            da.extend_from_slice(&row[..self.left]);
            db.extend_from_slice(&row[self.left..self.left + right]);
        }
        Ok(vec![
            Some(Tensor::new(inputs[0].shape(), da)?),
            Some(Tensor::new(inputs[1].shape(), db)?),
        ])
    }

    fn name(&self) -> &'static str {
        "concat"
    }
}

impl<S: Scalar> Tape<S> {
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let w = LstmWeights {
            w_ih: self.value(w_ih).clone(),
            w_hh: self.value(w_hh).clone(),
            bias: self.value(bias).clone(),
        };
        let (y, traces) = lstm_traced(self.value(x), &w, reverse)?;
        self.push(y, &[x, w_ih, w_hh, bias], Box::new(LstmRule { reverse, traces }))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = concat_last(self.value(a), self.value(b))?;
        let left = *self.value(a).shape().last().expect("nonempty");
        self.push(y, &[a, b], Box::new(ConcatRule { left }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights(q: usize, h: usize) -> LstmWeights<f64> {
        LstmWeights {
            w_ih: Tensor::zeros(&[4 * h, q]),
            w_hh: Tensor::zeros(&[4 * h, h]),
            bias: Tensor::zeros(&[4 * h]),
        }
    }

    fn ramp(q: usize, h: usize, scale: f64) -> LstmWeights<f64> {
        LstmWeights {
            w_ih: Tensor::from_fn(&[4 * h, q], |i| ((i * 7 % 5) as f64 - 2.0) * scale),
            w_hh: Tensor::from_fn(&[4 * h, h], |i| ((i * 3 % 7) as f64 - 3.0) * scale),
            bias: Tensor::from_fn(&[4 * h], |i| (i % 3) as f64 * scale),
        }
    }

    #[test]
    fn zero_cell_stays_at_zero() {
        let x = Tensor::from_fn(&[5, 3], |i| i as f64);
        let w = zero_weights(3, 4);
        let y = bilstm(&x, &w, &w).unwrap();
        assert_eq!(y.shape(), &[5, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_directions_agree() {
        let x = Tensor::new(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let w = ramp(3, 2, 0.1);
        let y = bilstm(&x, &w, &w).unwrap();
        assert_eq!(&y.data()[..2], &y.data()[2..]);
    }

    #[test]
    fn reverse_equals_forward_on_flipped_sequence() {
        let x = Tensor::from_fn(&[4, 3], |i| ((i * 5 % 7) as f64 - 3.0) / 4.0);
        let mut flipped = Vec::new();
        for t in (0..4).rev() {
            flipped.extend_from_slice(x.row(t));
        }
        let flipped = Tensor::new(&[4, 3], flipped).unwrap();
        let w = ramp(3, 2, 0.2);
        let rev = lstm(&x, &w, true).unwrap();
        let fwd = lstm(&flipped, &w, false).unwrap();
        for t in 0..4 {
            assert_eq!(rev.row(t), fwd.row(3 - t));
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let w = zero_weights(3, 2);
        let x = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(lstm(&x, &w, false).is_ok());
        assert!(matches!(
            sequence_dims(&[0, 3]),
            Err(Error::EmptySequence("lstm"))
        ));
    }
}
