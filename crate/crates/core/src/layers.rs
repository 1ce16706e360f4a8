//! Layer kernels with explicit forward and backward passes.
//!
//! The layer set is closed: dense, 2-D convolution, relu and global average
//! pooling. Each layer caches what its backward pass needs during
//! [`Layer::forward`]; [`Layer::infer`] evaluates the same map without
//! touching the cache so a network can be shared read-only.
//!
//! Convolution and dense layers lower to a single GEMM per call (im2col for
//! convolutions). Accumulation order inside the GEMM depends only on the
//! inner dimension, so results are independent of batch composition.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights, bias, their gradient accumulators and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
    pub vel_weights: Tensor,
    pub vel_bias: Tensor,
}

impl LayerParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Self {
        let grad_weights = Tensor::zeros(weights.shape());
        let grad_bias = Tensor::zeros(bias.shape());
        Self {
            vel_weights: grad_weights.clone(),
            vel_bias: grad_bias.clone(),
            grad_weights,
            grad_bias,
            weights,
            bias,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index touched by dgemm is bounded by the asserts above and
    // the three slices are distinct borrows.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `output[b][j] = sum_i input[b][i] * W[i][j] + bias[j]`.
pub fn dense_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let w = params.weights.shape();
    if input.rank() != 2 || w.len() != 2 || input.shape()[1] != w[0] {
        return Err(Error::Dimension {
            op: "dense_forward",
            left: input.shape().to_vec(),
            right: w.to_vec(),
        });
    }
    let (batch, m, n) = (input.shape()[0], w[0], w[1]);
    if params.bias.len() != n {
        return Err(Error::Dimension {
            op: "dense_forward bias",
            left: w.to_vec(),
            right: params.bias.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(batch * n);
    for _ in 0..batch {
        out.extend_from_slice(params.bias.data());
    }
    gemm(
        batch,
        m,
        n,
        input.data(),
        (m, 1),
        params.weights.data(),
        (n, 1),
        1.0,
        &mut out,
        (n, 1),
    );
    Ok(Tensor::from_parts(vec![batch, n], out))
}

/// One multiply-accumulate counts as 2 FLOPs; bias adds are free.
pub fn conv_flops(kernel: usize, c_in: usize, c_out: usize, out_h: usize, out_w: usize) -> u64 {
    (2 * kernel * kernel * c_in * c_out * out_h * out_w) as u64
}

pub fn dense_flops(inputs: usize, outputs: usize) -> u64 {
    (2 * inputs * outputs) as u64
}

/// Output spatial size of a convolution, or a configuration error when the
/// geometry does not tile exactly.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("convolution stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "convolution does not tile: input {input}, kernel {kernel}, stride {stride}, pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    height: usize,
    width: usize,
    c_out: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
    /// Kernel taps `(ki, kj)` that land inside the input for at least one
    /// output position; the others only ever see zero padding.
    taps: Vec<(usize, usize)>,
}

impl ConvGeometry {
    fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weights.len() != 4 || input[1] != weights[1] || weights[2] != weights[3]
        {
            return Err(Error::Dimension {
                op: "conv2d_forward",
                left: input.to_vec(),
                right: weights.to_vec(),
            });
        }
        let (batch, c_in, height, width) = (input[0], input[1], input[2], input[3]);
        let (c_out, kernel) = (weights[0], weights[2]);
        let out_h = conv_output_size(height, kernel, stride, pad)?;
        let out_w = conv_output_size(width, kernel, stride, pad)?;
        let live = |k: usize, out: usize, size: usize| {
            (0..out).any(|o| {
                let pos = (o * stride + k) as isize - pad as isize;
                pos >= 0 && (pos as usize) < size
            })
        };
        let mut taps = Vec::new();
        for ki in 0..kernel {
            for kj in 0..kernel {
                if live(ki, out_h, height) && live(kj, out_w, width) {
                    taps.push((ki, kj));
                }
            }
        }
        Ok(Self {
            batch,
            c_in,
            height,
            width,
            c_out,
            kernel,
            out_h,
            out_w,
            taps,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.taps.len()
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Output positions `o` along one axis for which `o * stride + k - pad`
    /// falls inside `0..size`.
    fn live_range(k: usize, out: usize, size: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if size + pad > k {
            ((size - 1 + pad - k) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(col_start, in_start, len)` for every run of column-matrix
    /// entries that read from inside the input; within a run the column index
    /// advances by 1 and the input index by `stride`.
    /// Column layout: row = ci * taps + t, col = b * P + p.
    fn for_each_run<F: FnMut(usize, usize, usize)>(&self, stride: usize, pad: usize, mut f: F) {
        let positions = self.out_h * self.out_w;
        let cols = self.cols();
        let plane = self.height * self.width;
        for ci in 0..self.c_in {
            for (t, &(ki, kj)) in self.taps.iter().enumerate() {
                let row = (ci * self.taps.len() + t) * cols;
                let (y0, y1) = Self::live_range(ki, self.out_h, self.height, stride, pad);
                let (x0, x1) = Self::live_range(kj, self.out_w, self.width, stride, pad);
                if x1 == x0 {
                    continue;
                }
                for b in 0..self.batch {
                    let in_base = (b * self.c_in + ci) * plane;
                    for oy in y0..y1 {
                        let iy = oy * stride + ki - pad;
                        let ix = x0 * stride + kj - pad;
                        f(
                            row + b * positions + oy * self.out_w + x0,
                            in_base + iy * self.width + ix,
                            x1 - x0,
                        );
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let mut col = vec![0.0; self.rows() * self.cols()];
        if stride == 1 {
            self.for_each_run(stride, pad, |c, i, n| {
                col[c..c + n].copy_from_slice(&input[i..i + n])
            });
        } else {
            self.for_each_run(stride, pad, |c, i, n| {
                for (dst, src) in col[c..c + n].iter_mut().zip(input[i..].iter().step_by(stride)) {
                    *dst = *src;
                }
            });
        }
        col
    }

    fn col2im(&self, dcol: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let mut dx = vec![0.0; self.batch * self.c_in * self.height * self.width];
        self.for_each_run(stride, pad, |c, i, n| {
            for (k, g) in dcol[c..c + n].iter().enumerate() {
                dx[i + k * stride] += g;
            }
        });
        dx
    }

    /// Kernel restricted to the live taps, as a `c_out x (c_in * taps)` matrix.
    fn gather_weights(&self, weights: &[f64]) -> Vec<f64> {
        let kk = self.kernel * self.kernel;
        let mut out = Vec::with_capacity(self.c_out * self.rows());
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                let base = (co * self.c_in + ci) * kk;
                for &(ki, kj) in &self.taps {
                    out.push(weights[base + ki * self.kernel + kj]);
                }
            }
        }
        out
    }

    fn scatter_weights(&self, packed: &[f64], target: &mut [f64]) {
        let kk = self.kernel * self.kernel;
        let mut it = packed.iter();
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                let base = (co * self.c_in + ci) * kk;
                for &(ki, kj) in &self.taps {
                    target[base + ki * self.kernel + kj] += it.next().unwrap();
                }
            }
        }
    }
}

/// Cross-correlation with zero padding plus per-channel bias.
/// Input `batch x C_in x H x W`, kernel `C_out x C_in x k x k`.
pub fn conv2d_forward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    Ok(conv_forward_impl(input, params, stride, pad)?.0)
}

fn conv_forward_impl(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeometry, Vec<f64>)> {
    let geo = ConvGeometry::new(input.shape(), params.weights.shape(), stride, pad)?;
    if params.bias.len() != geo.c_out {
        return Err(Error::Dimension {
            op: "conv2d_forward bias",
            left: params.weights.shape().to_vec(),
            right: params.bias.shape().to_vec(),
        });
    }
    let col = geo.im2col(input.data(), stride, pad);
    let w = geo.gather_weights(params.weights.data());
    let (rows, cols) = (geo.rows(), geo.cols());
    let mut prod = vec![0.0; geo.c_out * cols];
    gemm(
        geo.c_out,
        rows,
        cols,
        &w,
        (rows, 1),
        &col,
        (cols, 1),
        0.0,
        &mut prod,
        (cols, 1),
    );
    let positions = geo.out_h * geo.out_w;
    let mut out = vec![0.0; prod.len()];
    let bias = params.bias.data();
    for b in 0..geo.batch {
        for co in 0..geo.c_out {
            let src = &prod[co * cols + b * positions..co * cols + (b + 1) * positions];
            let dst = &mut out[(b * geo.c_out + co) * positions..][..positions];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[co];
            }
        }
    }
    let shape = vec![geo.batch, geo.c_out, geo.out_h, geo.out_w];
    Ok((Tensor::from_parts(shape, out), geo, col))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Global spatial mean per channel: `batch x C x H x W -> batch x C`.
pub fn avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::Dimension {
            op: "avg_pool",
            left: input.shape().to_vec(),
            right: vec![],
        });
    }
    let s = input.shape();
    let plane = s[2] * s[3];
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_parts(vec![s[0], s[1]], data))
}

/// Stable softmax of one row of logits.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a `batch x c` logit tensor, `c >= 2`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[1] < 2 {
        return Err(Error::Dimension {
            op: "softmax",
            left: logits.shape().to_vec(),
            right: vec![],
        });
    }
    let c = logits.shape()[1];
    let data = logits
        .data()
        .chunks_exact(c)
        .flat_map(softmax_row)
        .collect();
    Ok(Tensor::from_parts(logits.shape().to_vec(), data))
}

fn missing_forward(layer: &str) -> Error {
    Error::State(format!("{layer} backward called before forward"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub params: LayerParams,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(params: LayerParams) -> Self {
        Self {
            params,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.params.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.params.weights.shape()[1]
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let input = self.cache.as_ref().ok_or_else(|| missing_forward("dense"))?;
        let (batch, m, n) = (input.shape()[0], self.inputs(), self.outputs());
        if grad.shape() != [batch, n] {
            return Err(Error::Dimension {
                op: "dense_backward",
                left: grad.shape().to_vec(),
                right: vec![batch, n],
            });
        }
        // dW += x^T g
        gemm(
            m,
            batch,
            n,
            input.data(),
            (1, m),
            grad.data(),
            (n, 1),
            1.0,
            self.params.grad_weights.data_mut(),
            (n, 1),
        );
        let gb = self.params.grad_bias.data_mut();
        for row in grad.data().chunks_exact(n) {
            gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }
        // dx = g W^T
        let mut dx = vec![0.0; batch * m];
        gemm(
            batch,
            n,
            m,
            grad.data(),
            (n, 1),
            self.params.weights.data(),
            (1, n),
            0.0,
            &mut dx,
            (m, 1),
        );
        Ok(Tensor::from_parts(vec![batch, m], dx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub params: LayerParams,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(ConvGeometry, Vec<f64>)>,
}

impl Conv2d {
    pub fn new(params: LayerParams, stride: usize, pad: usize) -> Self {
        Self {
            params,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.params.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.params.weights.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.params.weights.shape()[2]
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (geo, col) = self.cache.as_ref().ok_or_else(|| missing_forward("conv2d"))?;
        let expected = [geo.batch, geo.c_out, geo.out_h, geo.out_w];
        if grad.shape() != expected {
            return Err(Error::Dimension {
                op: "conv2d_backward",
                left: grad.shape().to_vec(),
                right: expected.to_vec(),
            });
        }
        let positions = geo.out_h * geo.out_w;
        let (rows, cols) = (geo.rows(), geo.cols());
        // Rearrange the upstream gradient to c_out x (batch * positions).
        let mut g = vec![0.0; geo.c_out * cols];
        for b in 0..geo.batch {
            for co in 0..geo.c_out {
                let src = &grad.data()[(b * geo.c_out + co) * positions..][..positions];
                g[co * cols + b * positions..][..positions].copy_from_slice(src);
            }
        }
        let gb = self.params.grad_bias.data_mut();
        for co in 0..geo.c_out {
            gb[co] += g[co * cols..(co + 1) * cols].iter().sum::<f64>();
        }
        let mut gw = vec![0.0; geo.c_out * rows];
        gemm(
            geo.c_out,
            cols,
            rows,
            &g,
            (cols, 1),
            col,
            (1, cols),
            0.0,
            &mut gw,
            (rows, 1),
        );
        geo.scatter_weights(&gw, self.params.grad_weights.data_mut());
        let w = geo.gather_weights(self.params.weights.data());
        let mut dcol = vec![0.0; rows * cols];
        gemm(
            rows,
            geo.c_out,
            cols,
            &w,
            (1, rows),
            &g,
            (cols, 1),
            0.0,
            &mut dcol,
            (cols, 1),
        );
        let dx = geo.col2im(&dcol, self.stride, self.pad);
        let shape = vec![geo.batch, geo.c_in, geo.height, geo.width];
        Ok(Tensor::from_parts(shape, dx))
    }
}

/// One network layer. The set is closed; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    Relu { cache: Option<Tensor> },
    AvgPool { cache: Option<Vec<usize>> },
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu { cache: None }
    }

    pub fn avg_pool() -> Self {
        Layer::AvgPool { cache: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv2d",
            Layer::Relu { .. } => "relu",
            Layer::AvgPool { .. } => "avg_pool",
        }
    }

    /// Forward pass that records what backward needs.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => {
                let out = dense_forward(input, &d.params)?;
                d.cache = Some(input.clone());
                Ok(out)
            }
            Layer::Conv(c) => {
                let (out, geo, col) = conv_forward_impl(input, &c.params, c.stride, c.pad)?;
                c.cache = Some((geo, col));
                Ok(out)
            }
            Layer::Relu { cache } => {
                *cache = Some(input.clone());
                Ok(relu(input))
            }
            Layer::AvgPool { cache } => {
                let out = avg_pool(input)?;
                *cache = Some(input.shape().to_vec());
                Ok(out)
            }
        }
    }

    /// Forward pass without caching.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => dense_forward(input, &d.params),
            Layer::Conv(c) => conv2d_forward(input, &c.params, c.stride, c.pad),
            Layer::Relu { .. } => Ok(relu(input)),
            Layer::AvgPool { .. } => avg_pool(input),
        }
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => d.backward(grad),
            Layer::Conv(c) => c.backward(grad),
            Layer::Relu { cache } => {
                let input = cache.as_ref().ok_or_else(|| missing_forward("relu"))?;
                if input.shape() != grad.shape() {
                    return Err(Error::Dimension {
                        op: "relu_backward",
                        left: grad.shape().to_vec(),
                        right: input.shape().to_vec(),
                    });
                }
                let data = input
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok(Tensor::from_parts(input.shape().to_vec(), data))
            }
            Layer::AvgPool { cache } => {
                let shape = cache.as_ref().ok_or_else(|| missing_forward("avg_pool"))?;
                if grad.shape() != [shape[0], shape[1]] {
                    return Err(Error::Dimension {
                        op: "avg_pool_backward",
                        left: grad.shape().to_vec(),
                        right: shape[..2].to_vec(),
                    });
                }
                let plane = shape[2] * shape[3];
                let scale = 1.0 / plane as f64;
                let data = grad
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
                    .collect();
                Ok(Tensor::from_parts(shape.clone(), data))
            }
        }
    }

    pub fn params(&self) -> Option<&LayerParams> {
        match self {
            Layer::Dense(d) => Some(&d.params),
            Layer::Conv(c) => Some(&c.params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut LayerParams> {
        match self {
            Layer::Dense(d) => Some(&mut d.params),
            Layer::Conv(c) => Some(&mut c.params),
            _ => None,
        }
    }

    pub(crate) fn cached_batch(&self) -> Option<usize> {
        match self {
            Layer::Dense(Dense { cache: Some(x), .. }) | Layer::Relu { cache: Some(x) } => Some(x.batch()),
            Layer::Conv(Conv2d { cache: Some((geo, _)), .. }) => Some(geo.batch),
            Layer::AvgPool { cache: Some(shape) } => Some(shape[0]),
            _ => None,
        }
    }

    /// Keeps only the cached state of batch items `items` (indices into the
    /// cached batch), so the next backward takes a gradient for that
    /// sub-batch. Does nothing without a cache.
    pub(crate) fn restrict_cache(&mut self, items: &[usize]) {
        match self {
            Layer::Dense(Dense { cache: Some(x), .. }) | Layer::Relu { cache: Some(x) } => {
                *x = x.select(items)
            }
            Layer::Conv(Conv2d {
                cache: Some((geo, col)),
                ..
            }) => {
                let positions = geo.out_h * geo.out_w;
                let cols = geo.cols();
                let mut kept = Vec::with_capacity(geo.rows() * items.len() * positions);
                for row in col.chunks_exact(cols) {
                    for &b in items {
                        kept.extend_from_slice(&row[b * positions..(b + 1) * positions]);
                    }
                }
                geo.batch = items.len();
                *col = kept;
            }
            Layer::AvgPool { cache: Some(shape) } => shape[0] = items.len(),
            _ => {}
        }
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Dense(d) => d.cache = None,
            Layer::Conv(c) => c.cache = None,
            Layer::Relu { cache } => *cache = None,
            Layer::AvgPool { cache } => *cache = None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(w: Tensor, b: Tensor) -> LayerParams {
        LayerParams::new(w, b)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_examples() {
        let id = params(t(&[2, 2], &[1., 0., 0., 1.]), t(&[2], &[0., 0.]));
        assert_eq!(dense_forward(&t(&[1, 2], &[1., 2.]), &id).unwrap().data(), &[1., 2.]);

        let p = params(t(&[2, 2], &[2., 3., 4., 5.]), t(&[2], &[1., 1.]));
        assert_eq!(dense_forward(&t(&[1, 2], &[1., 1.]), &p).unwrap().data(), &[7., 9.]);

        let p = params(t(&[2, 2], &[7., -3., 0.5, 11.]), t(&[2], &[0.25, -4.]));
        assert_eq!(dense_forward(&t(&[1, 2], &[0., 0.]), &p).unwrap().data(), &[0.25, -4.]);
    }

    #[test]
    fn dense_shape_mismatch_names_both_shapes() {
        let p = params(Tensor::zeros(&[3, 2]), Tensor::zeros(&[2]));
        let err = dense_forward(&Tensor::zeros(&[1, 2]), &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn conv_examples() {
        let ones = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let k = params(Tensor::filled(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]));
        let out = conv2d_forward(&ones, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);

        let out = conv2d_forward(&ones, &k, 1, 1).unwrap();
        assert_eq!(out.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);

        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let kd = params(delta, Tensor::zeros(&[1]));
        let x = t(&[1, 1, 3, 3], &[1., -2., 3., 4., 5., -6., 7., 8., 9.]);
        assert_eq!(conv2d_forward(&x, &kd, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let k = params(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1]));
        let err = conv2d_forward(&Tensor::zeros(&[1, 1, 4, 4]), &k, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        // 1x2x5x5 input, 3 output channels, stride 2, pad 1.
        let x: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.75).collect();
        let b = [0.5, -1.0, 2.0];
        let p = params(t(&[3, 2, 3, 3], &w), t(&[3], &b));
        let out = conv2d_forward(&t(&[1, 2, 5, 5], &x), &p, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x[ci * 25 + iy as usize * 5 + ix as usize]
                                        * w[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    let got = out.data()[co * 9 + oy * 3 + ox];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        assert_eq!(relu(&t(&[2], &[-1., -3.])).data(), &[0., 0.]);
        assert_eq!(relu(&t(&[2], &[1., 3.])).data(), &[1., 3.]);
    }

    #[test]
    fn avg_pool_examples() {
        assert_eq!(avg_pool(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap().data(), &[2.5]);
        assert_eq!(
            avg_pool(&Tensor::filled(&[1, 2, 3, 3], 1.75)).unwrap().data(),
            &[1.75, 1.75]
        );
        assert_eq!(avg_pool(&t(&[1, 1, 1, 1], &[-3.5])).unwrap().data(), &[-3.5]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0., 0.]), vec![0.5, 0.5]);
        assert_eq!(softmax_row(&[1000., 1000.]), vec![0.5, 0.5]);
        let p = softmax_row(&[2f64.ln(), 0.]);
        assert!((p[0] - 2. / 3.).abs() < 1e-15 && (p[1] - 1. / 3.).abs() < 1e-15);
        assert!(softmax(&t(&[1, 1], &[0.])).is_err());
    }

    #[test]
    fn relu_backward_gates() {
        let mut l = Layer::relu();
        l.forward(&t(&[2], &[-1., 2.])).unwrap();
        assert_eq!(l.backward(&t(&[2], &[5., 5.])).unwrap().data(), &[0., 5.]);
    }

    #[test]
    fn dense_identity_backward_passes_gradient() {
        let mut l = Layer::Dense(Dense::new(params(
            t(&[2, 2], &[1., 0., 0., 1.]),
            Tensor::zeros(&[2]),
        )));
        l.forward(&t(&[1, 2], &[0.3, -0.7])).unwrap();
        let g = t(&[1, 2], &[1.5, -2.5]);
        assert_eq!(l.backward(&g).unwrap(), g);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut layers = [
            Layer::relu(),
            Layer::avg_pool(),
            Layer::Dense(Dense::new(params(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])))),
            Layer::Conv(Conv2d::new(
                params(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1])),
                1,
                1,
            )),
        ];
        for l in layers.iter_mut() {
            assert!(matches!(l.backward(&Tensor::zeros(&[1, 2])), Err(Error::State(_))));
        }
    }

    #[test]
    fn parameter_gradients_accumulate_until_zeroed() {
        let mut l = Layer::Dense(Dense::new(params(
            t(&[2, 1], &[0.5, -0.5]),
            Tensor::zeros(&[1]),
        )));
        let x = t(&[1, 2], &[1., 2.]);
        let g = t(&[1, 1], &[1.]);
        l.forward(&x).unwrap();
        l.backward(&g).unwrap();
        l.backward(&g).unwrap();
        let p = l.params_mut().unwrap();
        assert_eq!(p.grad_weights.data(), &[2., 4.]);
        assert_eq!(p.grad_bias.data(), &[2.]);
        p.zero_grad();
        assert_eq!(p.grad_weights.data(), &[0., 0.]);
    }
}
