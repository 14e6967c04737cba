//! Forward and backward kernels for the layer operations used by the CNN.
//!
//! Every kernel accumulates in a fixed loop order, so results are
//! bit-reproducible. Batch-level parallelism only splits work across samples;
//! reductions over the batch are always summed in sample order.

use rayon::prelude::*;

use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

/// Static attributes of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        if input.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "conv2d input must be rank 4 [N,C,H,W], got shape {input:?}"
            )));
        }
        if weight.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "conv2d weight must be rank 4 [O,C,K,K], got shape {weight:?}"
            )));
        }
        if weight[1] != input[1] {
            return Err(TensorError::Dimension(format!(
                "conv2d channel mismatch: input axis 1 (C) is {} but weight axis 1 is {}",
                input[1], weight[1]
            )));
        }
        if weight[2] != weight[3] {
            return Err(TensorError::Dimension(format!(
                "conv2d kernel must be square: weight axes 2 and 3 are {} and {}",
                weight[2], weight[3]
            )));
        }
        if bias != [weight[0]] {
            return Err(TensorError::Dimension(format!(
                "conv2d bias shape {bias:?} does not match weight axis 0 (O = {})",
                weight[0]
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be positive".into()));
        }
        let kernel = weight[2];
        let out = |size: usize, axis: &str| -> Result<usize, TensorError> {
            let span = size + 2 * padding;
            if span < kernel || !(span - kernel).is_multiple_of(stride) {
                return Err(TensorError::Config(format!(
                    "conv2d output {axis} is not a positive integer: ({size} + 2*{padding} - {kernel}) / {stride} + 1"
                )));
            }
            Ok((span - kernel) / stride + 1)
        };
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel,
            stride,
            padding,
            out_height: out(input[2], "height")?,
            out_width: out(input[3], "width")?,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Source index in a single input sample for patch row `r` at output
    /// position (`y`, `x`), or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, c: usize, i: usize, j: usize, y: usize, x: usize) -> Option<usize> {
        let iy = (y * self.stride + i) as isize - self.padding as isize;
        let ix = (x * self.stride + j) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            None
        } else {
            Some((c * self.height + iy as usize) * self.width + ix as usize)
        }
    }

    /// Patch matrix laid out `[patch_len][out_area]`.
    fn im2col<T: Real>(&self, sample: &[T], cols: &mut [T]) {
        let area = self.out_area();
        let k = self.kernel;
        for c in 0..self.in_channels {
            for i in 0..k {
                for j in 0..k {
                    let r = (c * k + i) * k + j;
                    let row = &mut cols[r * area..(r + 1) * area];
                    for y in 0..self.out_height {
                        for x in 0..self.out_width {
                            row[y * self.out_width + x] = match self.source(c, i, j, y, x) {
                                Some(s) => sample[s],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Patch matrix laid out `[out_area][patch_len]`.
    fn im2col_transposed<T: Real>(&self, sample: &[T], cols: &mut [T]) {
        let plen = self.patch_len();
        let k = self.kernel;
        for y in 0..self.out_height {
            for x in 0..self.out_width {
                let row = &mut cols[(y * self.out_width + x) * plen..][..plen];
                for c in 0..self.in_channels {
                    for i in 0..k {
                        for j in 0..k {
                            row[(c * k + i) * k + j] = match self.source(c, i, j, y, x) {
                                Some(s) => sample[s],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution with zero padding: `out[n,o,y,x] = bias[o] + sum input * weight`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let area = g.out_area();
    let plen = g.patch_len();
    let out_len = g.out_channels * area;
    let mut out = vec![T::zero(); g.batch * out_len];
    let w = weight.data();
    let b = bias.data();
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(g.in_sample_len()))
        .for_each_init(
            || vec![T::zero(); plen * area],
            |cols, (out, sample)| {
                g.im2col(sample, cols);
                for o in 0..g.out_channels {
                    let dst = &mut out[o * area..(o + 1) * area];
                    dst.iter_mut().for_each(|v| *v = b[o]);
                    for r in 0..plen {
                        let wv = w[o * plen + r];
                        let src = &cols[r * area..(r + 1) * area];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + wv * s;
                        }
                    }
                }
            },
        );
    Ok(Tensor::from_parts(
        vec![g.batch, g.out_channels, g.out_height, g.out_width],
        out,
    ))
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>, TensorError> {
    let bias_shape = [weight.dim(0)];
    let g = ConvGeometry::new(input.shape(), weight.shape(), &bias_shape, stride, padding)?;
    let area = g.out_area();
    let plen = g.patch_len();
    let out_len = g.out_channels * area;
    if grad_out.len() != g.batch * out_len {
        return Err(TensorError::Dimension(format!(
            "conv2d upstream gradient has {} elements, expected {}",
            grad_out.len(),
            g.batch * out_len
        )));
    }
    let w = weight.data();
    let in_len = g.in_sample_len();
    let k = g.kernel;

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_len)
        .zip(grad_out.par_chunks(out_len))
        .map(|(sample, gout)| {
            let mut cols_t = vec![T::zero(); area * plen];
            g.im2col_transposed(sample, &mut cols_t);

            let mut gw = vec![T::zero(); g.out_channels * plen];
            let mut gb = vec![T::zero(); g.out_channels];
            for o in 0..g.out_channels {
                let grow = &gout[o * area..(o + 1) * area];
                let wrow = &mut gw[o * plen..(o + 1) * plen];
                let mut bsum = T::zero();
                for (pos, &gv) in grow.iter().enumerate() {
                    bsum = bsum + gv;
                    let crow = &cols_t[pos * plen..(pos + 1) * plen];
                    for (d, &cv) in wrow.iter_mut().zip(crow) {
                        *d = *d + gv * cv;
                    }
                }
                gb[o] = bsum;
            }

            // Reuse the patch buffer for d(patches), then scatter back.
            let dcols = &mut cols_t;
            dcols.iter_mut().for_each(|v| *v = T::zero());
            for pos in 0..area {
                let drow = &mut dcols[pos * plen..(pos + 1) * plen];
                for o in 0..g.out_channels {
                    let gv = gout[o * area + pos];
                    let wrow = &w[o * plen..(o + 1) * plen];
                    for (d, &wv) in drow.iter_mut().zip(wrow) {
                        *d = *d + gv * wv;
                    }
                }
            }
            let mut gin = vec![T::zero(); in_len];
            for y in 0..g.out_height {
                for x in 0..g.out_width {
                    let drow = &dcols[(y * g.out_width + x) * plen..][..plen];
                    for c in 0..g.in_channels {
                        for i in 0..k {
                            for j in 0..k {
                                if let Some(s) = g.source(c, i, j, y, x) {
                                    gin[s] = gin[s] + drow[(c * k + i) * k + j];
                                }
                            }
                        }
                    }
                }
            }
            (gin, gw, gb)
        })
        .collect();

    let mut grads = ConvGrads {
        input: Vec::with_capacity(g.batch * in_len),
        weight: vec![T::zero(); g.out_channels * plen],
        bias: vec![T::zero(); g.out_channels],
    };
    for (gin, gw, gb) in per_sample {
        grads.input.extend_from_slice(&gin);
        add_assign(&mut grads.weight, &gw);
        add_assign(&mut grads.bias, &gb);
    }
    Ok(grads)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Passes the upstream gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

/// 2x2 non-overlapping max pooling.
///
/// Returns the pooled tensor and, per output cell, the flat input index of the
/// first maximum encountered in row-major window order.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(TensorError::Dimension(format!(
            "maxpool2 input must be rank 4 [N,C,H,W], got shape {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Dimension(format!(
            "maxpool2 needs even spatial axes, got H = {h} (axis 2), W = {w} (axis 3)"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

pub fn maxpool2_backward<T: Real>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gin = vec![T::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        gin[idx] = gin[idx] + g;
    }
    gin
}

/// Fully connected layer: `out = input . weight + bias`.
pub fn dense<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, f, u) = dense_dims(input.shape(), weight.shape(), bias.shape())?;
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * u);
    for row in x.chunks(f) {
        let mut acc = bias.data().to_vec();
        for (fi, &a) in row.iter().enumerate() {
            let wrow = &w[fi * u..(fi + 1) * u];
            for (d, &wv) in acc.iter_mut().zip(wrow) {
                *d = *d + a * wv;
            }
        }
        out.extend_from_slice(&acc);
    }
    Ok(Tensor::from_parts(vec![n, u], out))
}

fn dense_dims(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
) -> Result<(usize, usize, usize), TensorError> {
    if input.len() != 2 || weight.len() != 2 {
        return Err(TensorError::Dimension(format!(
            "dense expects rank-2 input [N,F] and weight [F,U], got {input:?} and {weight:?}"
        )));
    }
    if input[1] != weight[0] {
        return Err(TensorError::Dimension(format!(
            "dense inner dimensions disagree: input axis 1 is {} but weight axis 0 is {}",
            input[1], weight[0]
        )));
    }
    if bias != [weight[1]] {
        return Err(TensorError::Dimension(format!(
            "dense bias shape {bias:?} does not match weight axis 1 (U = {})",
            weight[1]
        )));
    }
    Ok((input[0], input[1], weight[1]))
}

pub struct DenseGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
) -> Result<DenseGrads<T>, TensorError> {
    let bias_shape = [weight.dim(weight.rank() - 1)];
    let (n, f, u) = dense_dims(input.shape(), weight.shape(), &bias_shape)?;
    if grad_out.len() != n * u {
        return Err(TensorError::Dimension(format!(
            "dense upstream gradient has {} elements, expected {}",
            grad_out.len(),
            n * u
        )));
    }
    let x = input.data();
    let w = weight.data();
    let mut gw = vec![T::zero(); f * u];
    let mut gb = vec![T::zero(); u];
    let mut gin = Vec::with_capacity(n * f);
    for (row, grow) in x.chunks(f).zip(grad_out.chunks(u)) {
        add_assign(&mut gb, grow);
        for (fi, &a) in row.iter().enumerate() {
            let wrow = &mut gw[fi * u..(fi + 1) * u];
            for (d, &g) in wrow.iter_mut().zip(grow) {
                *d = *d + a * g;
            }
        }
        for fi in 0..f {
            let wrow = &w[fi * u..(fi + 1) * u];
            let mut acc = T::zero();
            for (&wv, &g) in wrow.iter().zip(grow) {
                acc = acc + wv * g;
            }
            gin.push(acc);
        }
    }
    Ok(DenseGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if logits.rank() != 2 {
        return Err(TensorError::Dimension(format!(
            "softmax expects rank-2 logits [N,K], got {:?}",
            logits.shape()
        )));
    }
    let k = logits.dim(1);
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - m).exp()).collect();
        let total: T = exps.iter().copied().sum();
        probs.extend(exps.into_iter().map(|e| e / total));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), probs))
}

/// Mean softmax cross-entropy over the batch together with the probabilities.
pub fn softmax_xent<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), TensorError> {
    if logits.rank() != 2 {
        return Err(TensorError::Dimension(format!(
            "softmax_xent expects rank-2 logits [N,K], got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(TensorError::Dimension(format!(
            "softmax_xent got {} labels for {n} rows (axis 0)",
            labels.len()
        )));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(TensorError::Label {
            row,
            label,
            num_classes: k,
        });
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - m).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        // -ln p[label] = ln(sum) - (z_label - m)
        total = total + (sum.ln() - (row[label] - m));
        probs.extend(exps.into_iter().map(|e| e / sum));
    }
    let loss = total / T::from_f64(n as f64);
    Ok((loss, Tensor::from_parts(vec![n, k], probs)))
}

/// Gradient of the mean cross-entropy on the logits, scaled by `seed`.
pub fn softmax_xent_backward<T: Real>(probs: &Tensor<T>, labels: &[usize], seed: T) -> Vec<T> {
    let k = probs.dim(1);
    let scale = seed / T::from_f64(labels.len() as f64);
    let mut g = Vec::with_capacity(probs.len());
    for (row, &label) in probs.data().chunks(k).zip(labels) {
        for (c, &p) in row.iter().enumerate() {
            let onehot = if c == label { T::one() } else { T::zero() };
            g.push((p - onehot) * scale);
        }
    }
    g
}

pub(crate) fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
