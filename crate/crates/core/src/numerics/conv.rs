//! 2-D convolution with zero padding of `(k - 1) / 2` on each side.

use rayon::prelude::*;

use super::tape::{Backward, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Output `(channels, height, width)` of a convolution over a `(C, H, W)` input.
pub fn conv2d_output_shape(
    input: [usize; 3],
    kernel: [usize; 4],
    stride: (usize, usize),
) -> Result<[usize; 3]> {
    let g = geometry(input, kernel, stride)?;
    Ok([kernel[0], g.out_h, g.out_w])
}

fn geometry(input: [usize; 3], kernel: [usize; 4], stride: (usize, usize)) -> Result<Geometry> {
    let [c, h, w] = input;
    let [_, kc, kh, kw] = kernel;
    if kc != c {
        return Err(Error::dim(
            "conv2d",
            format!("input {input:?} has {c} channels but kernel {kernel:?} expects {kc}"),
        ));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Parameter(format!("conv2d stride must be >= 1, got {stride:?}")));
    }
    let pad = ((kh - 1) / 2, (kw - 1) / 2);
    if kh > h + 2 * pad.0 || kw > w + 2 * pad.1 {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {kernel:?} exceeds padded input {input:?}"),
        ));
    }
    Ok(Geometry {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        pad,
        out_h: (h + 2 * pad.0 - kh) / stride.0 + 1,
        out_w: (w + 2 * pad.1 - kw) / stride.1 + 1,
    })
}

/// Positions per column tile, sized so one tile of the patch matrix stays in
/// cache.
fn tile_len(g: &Geometry) -> usize {
    (32_768 / g.patch()).clamp(64, 4096).min(g.cols())
}

/// For patch row `(i, j)` and output row `oy`, the output columns whose input
/// column is inside the image, as a half-open range (stride 1 only).
fn valid_columns(g: &Geometry, j: usize) -> (usize, usize) {
    let lo = g.pad.1.saturating_sub(j).min(g.out_w);
    let hi = (g.width + g.pad.1).saturating_sub(j).min(g.out_w);
    (lo, hi.max(lo))
}

/// Fills `col` (`patch x len`) with the patch matrix columns for output
/// positions `start..start + len`.
fn im2col<S: Scalar>(x: &[S], g: &Geometry, start: usize, len: usize, col: &mut [S]) {
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((c * g.kh + i) * g.kw + j) * len..][..len];
                let mut p = start;
                while p < start + len {
                    let (oy, ox0) = (p / g.out_w, p % g.out_w);
                    let ox1 = g.out_w.min(ox0 + start + len - p);
                    let dst = &mut row[p - start..p - start + ox1 - ox0];
                    p += ox1 - ox0;
                    let iy = (oy * g.stride.0 + i) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride.1 == 1 {
                        let (lo, hi) = valid_columns(g, j);
                        let (a, b) = (lo.clamp(ox0, ox1), hi.clamp(ox0, ox1));
                        dst[..a - ox0].fill(S::zero());
                        if b > a {
                            let ix = a + j - g.pad.1;
                            dst[a - ox0..b - ox0].copy_from_slice(&src[ix..ix + b - a]);
                        }
                        dst[b.max(a) - ox0..].fill(S::zero());
                    } else {
                        for (k, d) in dst.iter_mut().enumerate() {
                            let ix = ((ox0 + k) * g.stride.1 + j) as isize - g.pad.1 as isize;
                            *d = if ix < 0 || ix >= g.width as isize {
                                S::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adds the patch-matrix tile `col` back onto the image gradient `dx`.
fn col2im<S: Scalar>(col: &[S], g: &Geometry, start: usize, len: usize, dx: &mut [S]) {
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((c * g.kh + i) * g.kw + j) * len..][..len];
                let mut p = start;
                while p < start + len {
                    let (oy, ox0) = (p / g.out_w, p % g.out_w);
                    let ox1 = g.out_w.min(ox0 + start + len - p);
                    let src = &row[p - start..p - start + ox1 - ox0];
                    p += ox1 - ox0;
                    let iy = (oy * g.stride.0 + i) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride.1 == 1 {
                        let (lo, hi) = valid_columns(g, j);
                        let (a, b) = (lo.clamp(ox0, ox1), hi.clamp(ox0, ox1));
                        if b > a {
                            let ix = a + j - g.pad.1;
                            for (d, &v) in dst[ix..ix + b - a].iter_mut().zip(&src[a - ox0..b - ox0]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (k, &v) in src.iter().enumerate() {
                            let ix = ((ox0 + k) * g.stride.1 + j) as isize - g.pad.1 as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits a rank-3 `(C, H, W)` or rank-4 `(B, C, H, W)` shape into a batch size
/// and a per-example shape.
fn batched(shape: &[usize], op: &'static str) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((1, [c, h, w])),
        [b, c, h, w] => Ok((b, [c, h, w])),
        _ => Err(Error::dim(op, format!("expected (C,H,W) or (B,C,H,W), got {shape:?}"))),
    }
}

fn kernel_dims<S: Scalar>(kernel: &Tensor<S>) -> Result<[usize; 4]> {
    match *kernel.shape() {
        [o, c, kh, kw] => Ok([o, c, kh, kw]),
        ref s => Err(Error::dim("conv2d", format!("kernel must be (O,C,kh,kw), got {s:?}"))),
    }
}

/// Convolves `input` (`(C,H,W)` or `(B,C,H,W)`) with `kernel` `(O,C,kh,kw)`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: (usize, usize),
) -> Result<Tensor<S>> {
    let (batch, dims) = batched(input.shape(), "conv2d")?;
    let kdims = kernel_dims(kernel)?;
    let g = geometry(dims, kdims, stride)?;
    let out_ch = kdims[0];
    let in_len = dims.iter().product::<usize>();
    let out_len = out_ch * g.cols();

    let tile = tile_len(&g);
    let mut out = vec![S::zero(); batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each_init(
            || vec![S::zero(); g.patch() * tile],
            |col, (y, x)| {
                for start in (0..g.cols()).step_by(tile) {
                    let len = tile.min(g.cols() - start);
                    im2col(x, &g, start, len, col);
                    S::gemm(
                        out_ch,
                        g.patch(),
                        len,
                        S::one(),
                        kernel.data(),
                        (g.patch() as isize, 1),
                        col,
                        (len as isize, 1),
                        S::zero(),
                        &mut y[start..],
                        (g.cols() as isize, 1),
                    );
                }
            },
        );

    let shape: Vec<usize> = if input.rank() == 3 {
        vec![out_ch, g.out_h, g.out_w]
    } else {
        vec![batch, out_ch, g.out_h, g.out_w]
    };
    Tensor::new(&shape, out)
}

/// Gradients of [`conv2d`] w.r.t. input and kernel. The input gradient is only
/// computed when `need_input` is set.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: (usize, usize),
    grad_out: &Tensor<S>,
    need_input: bool,
) -> Result<(Option<Tensor<S>>, Tensor<S>)> {
    let (batch, dims) = batched(input.shape(), "conv2d")?;
    let kdims = kernel_dims(kernel)?;
    let g = geometry(dims, kdims, stride)?;
    let out_ch = kdims[0];
    let in_len = dims.iter().product::<usize>();
    let out_len = out_ch * g.cols();
    if grad_out.len() != batch * out_len {
        return Err(Error::dim(
            "conv2d_backward",
            format!("gradient {:?} does not match output size", grad_out.shape()),
        ));
    }

    let per_example: Vec<(Option<Vec<S>>, Vec<S>)> = input
        .data()
        .par_chunks(in_len)
        .zip(grad_out.data().par_chunks(out_len))
        .map(|(x, dy)| {
            let tile = tile_len(&g);
            let mut col = vec![S::zero(); g.patch() * tile];
            let mut dk = vec![S::zero(); kernel.len()];
            let mut dx = need_input.then(|| vec![S::zero(); in_len]);
            for start in (0..g.cols()).step_by(tile) {
                let len = tile.min(g.cols() - start);
                im2col(x, &g, start, len, &mut col);
                S::gemm(
                    out_ch,
                    len,
                    g.patch(),
                    S::one(),
                    &dy[start..],
                    (g.cols() as isize, 1),
                    &col,
                    (1, len as isize),
                    S::one(),
                    &mut dk,
                    (g.patch() as isize, 1),
                );
                if let Some(dx) = dx.as_mut() {
                    S::gemm(
                        g.patch(),
                        out_ch,
                        len,
                        S::one(),
                        kernel.data(),
                        (1, g.patch() as isize),
                        &dy[start..],
                        (g.cols() as isize, 1),
                        S::zero(),
                        &mut col,
                        (len as isize, 1),
                    );
                    col2im(&col, &g, start, len, dx);
                }
            }
            (dx, dk)
        })
        .collect();

    let mut dkernel = Tensor::zeros(kernel.shape());
    let mut dinput = need_input.then(|| Vec::with_capacity(input.len()));
    for (dx, dk) in per_example {
        for (a, b) in dkernel.data_mut().iter_mut().zip(dk) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    let dinput = dinput.map(|d| Tensor::new(input.shape(), d)).transpose()?;
    Ok((dinput, dkernel))
}

struct Conv2dRule {
    stride: (usize, usize),
}

impl<S: Scalar> Backward<S> for Conv2dRule {
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (dx, dk) = conv2d_backward(inputs[0], inputs[1], self.stride, grad, needs[0])?;
        Ok(vec![dx, Some(dk)])
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

impl<S: Scalar> Tape<S> {
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let y = conv2d(self.value(input), self.value(kernel), stride)?;
        self.push(y, &[input, kernel], Box::new(Conv2dRule { stride }))
    }
}
