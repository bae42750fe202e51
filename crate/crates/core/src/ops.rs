//! Differentiable kernels. Each forward has an explicit backward that maps an
//! upstream gradient onto the gradients of its inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op(a)` is `m×k`
/// and `op(b)` is `k×n`. A transposed operand is stored with swapped extents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm lhs extent");
    assert_eq!(b.len(), k * n, "gemm rhs extent");
    assert_eq!(c.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every operand's length to the extents and
    // strides handed to the kernel, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a convolution along one spatial axis.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn conv_geometry(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<([usize; 4], [usize; 4], ConvGeometry)> {
    let [n, c, h, w] = input.dims4("conv2d input")?;
    let [f, wc, kh, kw] = weight.dims4("conv2d weight")?;
    if wc != c {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "in_channels",
            expected: wc,
            actual: c,
        });
    }
    if stride == 0 {
        return Err(Error::Shape {
            op: "conv2d",
            reason: "stride must be at least 1".into(),
        });
    }
    let out_h = conv_out_extent(h, kh, stride, padding).ok_or(Error::Dimension {
        op: "conv2d",
        axis: "height",
        expected: kh,
        actual: h + 2 * padding,
    })?;
    let out_w = conv_out_extent(w, kw, stride, padding).ok_or(Error::Dimension {
        op: "conv2d",
        axis: "width",
        expected: kw,
        actual: w + 2 * padding,
    })?;
    Ok((
        [n, c, h, w],
        [f, wc, kh, kw],
        ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        },
    ))
}

fn im2col(image: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih as usize >= g.height {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw as usize >= g.width {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    let base = ih as usize * g.width;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && (iw as usize) < g.width {
                            plane[base + iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0
}

/// 2-D cross-correlation over an NCHW batch.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ([n, c, h, w], [f, ..], g) = conv_geometry(input, weight, stride, padding)?;
    if bias.len() != f {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: "bias",
            expected: f,
            actual: bias.len(),
        });
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; n * f * cols];
    let mut col = vec![0.0; if is_pointwise(&g) { 0 } else { rows * cols }];
    for i in 0..n {
        let image = &input.data()[i * c * h * w..(i + 1) * c * h * w];
        let dst = &mut out[i * f * cols..(i + 1) * f * cols];
        for (fi, plane) in dst.chunks_exact_mut(cols).enumerate() {
            plane.fill(bias.data()[fi]);
        }
        let src: &[f64] = if is_pointwise(&g) {
            image
        } else {
            im2col(image, &g, &mut col);
            &col
        };
        gemm(f, rows, cols, weight.data(), false, src, false, 1.0, dst);
    }
    Tensor::new(&[n, f, g.out_h, g.out_w], out)
}

#[derive(Debug, Clone, Default)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of [`conv2d`]. `want_input` / `want_params` skip work nobody needs.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads> {
    let ([n, c, h, w], [f, ..], g) = conv_geometry(input, weight, stride, padding)?;
    let expected = [n, f, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::Shape {
            op: "conv2d_backward",
            reason: format!("grad {:?}, expected {:?}", grad_out.shape(), expected),
        });
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut grads = ConvGrads::default();
    let mut d_weight = vec![0.0; if want_params { f * rows } else { 0 }];
    let mut d_bias = vec![0.0; if want_params { f } else { 0 }];
    let mut d_input = vec![0.0; if want_input { n * c * h * w } else { 0 }];
    let pointwise = is_pointwise(&g);
    let mut col = vec![0.0; rows * cols];
    for i in 0..n {
        let gout = &grad_out.data()[i * f * cols..(i + 1) * f * cols];
        let image = &input.data()[i * c * h * w..(i + 1) * c * h * w];
        if want_params {
            let src: &[f64] = if pointwise {
                image
            } else {
                im2col(image, &g, &mut col);
                &col
            };
            gemm(f, cols, rows, gout, false, src, true, 1.0, &mut d_weight);
            for (fi, plane) in gout.chunks_exact(cols).enumerate() {
                d_bias[fi] += plane.iter().sum::<f64>();
            }
        }
        if want_input {
            let dst = &mut d_input[i * c * h * w..(i + 1) * c * h * w];
            if pointwise {
                gemm(rows, f, cols, weight.data(), true, gout, false, 1.0, dst);
            } else {
                gemm(rows, f, cols, weight.data(), true, gout, false, 0.0, &mut col);
                col2im(&col, &g, dst);
            }
        }
    }
    if want_params {
        grads.weight = Some(d_weight);
        grads.bias = Some(d_bias);
    }
    if want_input {
        grads.input = Some(Tensor::new(&[n, c, h, w], d_input)?);
    }
    Ok(grads)
}

/// `input · weightᵀ + bias` for `input: [N, D]`, `weight: [O, D]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, d] = input.dims2("linear input")?;
    let [o, wd] = weight.dims2("linear weight")?;
    if wd != d {
        return Err(Error::Dimension {
            op: "linear",
            axis: "features",
            expected: wd,
            actual: d,
        });
    }
    if bias.len() != o {
        return Err(Error::Dimension {
            op: "linear",
            axis: "bias",
            expected: o,
            actual: bias.len(),
        });
    }
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, d, o, input.data(), false, weight.data(), true, 1.0, &mut out);
    Tensor::new(&[n, o], out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let [n, d] = input.dims2("linear input")?;
    let [o, _] = weight.dims2("linear weight")?;
    let [gn, go] = grad_out.dims2("linear grad")?;
    if gn != n || go != o {
        return Err(Error::Shape {
            op: "linear_backward",
            reason: format!("grad [{gn}, {go}], expected [{n}, {o}]"),
        });
    }
    let mut d_input = vec![0.0; n * d];
    gemm(n, o, d, grad_out.data(), false, weight.data(), false, 0.0, &mut d_input);
    let mut d_weight = vec![0.0; o * d];
    gemm(o, n, d, grad_out.data(), true, input.data(), false, 0.0, &mut d_weight);
    let mut d_bias = vec![0.0; o];
    for row in grad_out.data().chunks_exact(o) {
        d_bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    Ok(LinearGrads {
        input: Tensor::new(&[n, d], d_input)?,
        weight: d_weight,
        bias: d_bias,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.set_requires_grad(false);
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Masks `grad_out` by the positive entries of the forward *output*.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::Shape {
            op: "relu_backward",
            reason: format!("{:?} vs {:?}", output.shape(), grad_out.shape()),
        });
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(output.shape(), data)
}

/// Non-overlapping max pooling with window = stride = `size`; trailing rows and
/// columns that do not fill a window are dropped.
pub fn max_pool2d(input: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = input.dims4("max_pool2d")?;
    if size == 0 || size > h || size > w {
        return Err(Error::Shape {
            op: "max_pool2d",
            reason: format!("window {size} does not fit {h}x{w}"),
        });
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        let src = &input.data()[base..base + h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = i * size * w + j * size;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = (i * size + di) * w + j * size + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(base + best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Dimension {
            op: "max_pool2d_backward",
            axis: "grad",
            expected: argmax.len(),
            actual: grad_out.len(),
        });
    }
    let mut d = vec![0.0; input_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Tensor::new(input_shape, d)
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let area = (h * w) as f64;
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let area = (h * w) as f64;
    let mut d = Vec::with_capacity(input_shape.iter().product());
    for &g in grad_out.data() {
        d.extend(core::iter::repeat_n(g / area, h * w));
    }
    Tensor::new(input_shape, d)
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("upsample")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn upsample_nearest2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, oh, ow] = grad_out.dims4("upsample_backward")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Shape {
            op: "upsample_backward",
            reason: format!("odd gradient extent {oh}x{ow}"),
        });
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut d = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / 2) * w + j / 2] += src[i * ow + j];
            }
        }
    }
    Tensor::new(&[n, c, h, w], d)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, c] = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(logits.shape(), out)
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub probabilities: Tensor,
}

fn check_targets(targets: &[usize], n: usize, c: usize) -> Result<()> {
    if targets.len() != n {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            axis: "targets",
            expected: n,
            actual: targets.len(),
        });
    }
    match targets.iter().find(|&&t| t >= c) {
        Some(&index) => Err(Error::TargetOutOfRange { index, classes: c }),
        None => Ok(()),
    }
}

/// Mean negative log-likelihood of `targets` under the row softmax of `logits`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<CrossEntropy> {
    let [n, c] = logits.dims2("softmax_cross_entropy")?;
    check_targets(targets, n, c)?;
    let mut loss = 0.0;
    for (row, &t) in logits.data().chunks_exact(c).zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>()) + max;
        loss += log_sum - row[t];
    }
    Ok(CrossEntropy {
        loss: loss / n as f64,
        probabilities: softmax(logits)?,
    })
}

/// Gradient of the mean cross-entropy w.r.t. the logits: `(p - onehot) / N`.
pub fn softmax_cross_entropy_backward(probabilities: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let [n, c] = probabilities.dims2("softmax_cross_entropy_backward")?;
    check_targets(targets, n, c)?;
    let mut d = probabilities.data().to_vec();
    for (row, &t) in d.chunks_exact_mut(c).zip(targets) {
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Tensor::new(&[n, c], d)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
