use super::tape::{Backward, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Max pooling over the two trailing axes with floor-divided output extents.
///
/// Returns the pooled tensor and, per output element, the flat input index it
/// was taken from. Ties go to the first position in row-major window order.
pub fn maxpool2d<S: Scalar>(
    input: &Tensor<S>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<S>, Vec<usize>)> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::dim("maxpool2d", format!("need at least 2 axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Parameter(format!(
            "maxpool2d window {window:?} and stride {stride:?} must be positive"
        )));
    }
    if window.0 > h || window.1 > w {
        return Err(Error::dim(
            "maxpool2d",
            format!("window {window:?} larger than input {shape:?}"),
        ));
    }
    let oh = (h - window.0) / stride.0 + 1;
    let ow = (w - window.1) / stride.1 + 1;
    let planes: usize = shape[..shape.len() - 2].iter().product();

    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    let data = input.data();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride.0 * w + ox * stride.1;
                for i in 0..window.0 {
                    for j in 0..window.1 {
                        let idx = base + (oy * stride.0 + i) * w + ox * stride.1 + j;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let mut out_shape = shape[..shape.len() - 2].to_vec();
    out_shape.extend([oh, ow]);
    Ok((Tensor::new(&out_shape, out)?, argmax))
}

/// Routes each output gradient to the input position recorded in `argmax`.
pub fn maxpool2d_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}

struct MaxPoolRule {
    argmax: Vec<usize>,
}

impl<S: Scalar> Backward<S> for MaxPoolRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(maxpool2d_backward(inputs[0].shape(), &self.argmax, grad))])
    }

    fn name(&self) -> &'static str {
        "maxpool2d"
    }
}

impl<S: Scalar> Tape<S> {
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (y, argmax) = maxpool2d(self.value(x), window, stride)?;
        self.push(y, &[x], Box::new(MaxPoolRule { argmax }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_takes_max() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn floor_division_of_odd_extent() {
        let x = Tensor::<f64>::zeros(&[1, 32, 625]);
        let (y, _) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 16, 312]);
    }

    #[test]
    fn ties_route_gradient_to_first_element() {
        let x = Tensor::full(&[2, 4, 6], 0.5);
        let (y, arg) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        let g = Tensor::full(y.shape(), 1.0);
        let dx = maxpool2d_backward(x.shape(), &arg, &g);
        // Exhaustive per-window check: only the top-left cell of each window is hit.
        for p in 0..2 {
            for r in 0..4 {
                for c in 0..6 {
                    let v = dx.data()[(p * 4 + r) * 6 + c];
                    let first = r % 2 == 0 && c % 2 == 0;
                    assert_eq!(v, if first { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(matches!(maxpool2d(&x, (2, 2), (2, 2)), Err(Error::Dimension { .. })));
    }
}
