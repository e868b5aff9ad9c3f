//! Batched forward and backward passes.
//!
//! Conv activations are stored channel-major across the batch,
//! `[channel][sample][row][col]`, so each convolution is one GEMM over an
//! im2col matrix covering the whole batch. The passes are generic over the
//! scalar type: the public API works in `f64`, training runs in `f32`.

use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Sub};

use super::{Activation, ArchitectureSpec, EstimatorError, Layout, ModelWeights, Result, TrainingSample, KERNEL};

const INFERENCE_CHUNK: usize = 64;

pub(crate) trait Real:
    Copy + Default + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + AddAssign + Sum + 'static
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn finite(self) -> bool;
    /// `c = a * b + beta * c`, see [`gemm`].
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const Self, rsa: isize, csa: isize, b: *const Self, rsb: isize, csb: isize, beta: Self, c: *mut Self, rsc: isize);
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const Self, rsa: isize, csa: isize, b: *const Self, rsb: isize, csb: isize, beta: Self, c: *mut Self, rsc: isize) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const Self, rsa: isize, csa: isize, b: *const Self, rsb: isize, csb: isize, beta: Self, c: *mut Self, rsc: isize) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product with explicit
/// strides on the operands; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], a_strides: (usize, usize), b: &[T], b_strides: (usize, usize), c: &mut [T], beta: T) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!(k == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

#[inline]
fn activate<T: Real>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu if x < T::ZERO => T::ZERO,
        _ => x,
    }
}

/// Borrowed view of a flat parameter vector in any precision.
#[derive(Clone, Copy)]
pub(crate) struct Net<'a, T> {
    pub spec: &'a ArchitectureSpec,
    pub layout: &'a Layout,
    pub params: &'a [T],
}

impl<'a, T> Net<'a, T> {
    fn conv_weights(&self, i: usize) -> &'a [T] {
        let r = self.layout.conv[i].weights;
        &self.params[r.0..r.1]
    }

    fn conv_bias(&self, i: usize) -> &'a [T] {
        let r = self.layout.conv[i].bias;
        &self.params[r.0..r.1]
    }

    fn fc_weights(&self, i: usize) -> &'a [T] {
        let r = self.layout.fc[i].weights;
        &self.params[r.0..r.1]
    }

    fn fc_bias(&self, i: usize) -> &'a [T] {
        let r = self.layout.fc[i].bias;
        &self.params[r.0..r.1]
    }
}

impl<'a> Net<'a, f64> {
    fn of(w: &'a ModelWeights) -> Self {
        Net { spec: w.architecture(), layout: w.layout(), params: w.params() }
    }
}

#[derive(Debug, Clone, Copy)]
struct MapShape {
    channels: usize,
    height: usize,
    width: usize,
}

impl MapShape {
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Output columns `ox` whose tap `kx` lands inside a row of `width` pixels,
/// and the source column of the first one.
fn valid_columns(width: usize, out_width: usize, stride: usize, kx: usize) -> (std::ops::Range<usize>, usize) {
    // ix = ox * stride + kx - 1 must lie in [0, width)
    let lo = if kx == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = ((width + 1 - kx).div_ceil(stride)).min(out_width);
    let lo = lo.min(hi);
    (lo..hi, (lo * stride + kx).saturating_sub(1).min(width))
}

fn im2col<T: Real>(x: &[T], shape: MapShape, batch: usize, stride: usize, out: MapShape) -> Vec<T> {
    let n = batch * out.plane();
    let mut col = vec![T::ZERO; shape.channels * KERNEL * KERNEL * n];
    for c in 0..shape.channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let (cols, first) = valid_columns(shape.width, out.width, stride, kx);
                let row = &mut col[((c * KERNEL + ky) * KERNEL + kx) * n..][..n];
                for b in 0..batch {
                    let src = &x[(c * batch + b) * shape.plane()..][..shape.plane()];
                    let dst = &mut row[b * out.plane()..][..out.plane()];
                    for oy in 0..out.height {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= shape.height {
                            continue;
                        }
                        let src_row = &src[iy as usize * shape.width + first..(iy as usize + 1) * shape.width];
                        let dst_row = &mut dst[oy * out.width..][cols.clone()];
                        for (d, &v) in dst_row.iter_mut().zip(src_row.iter().step_by(stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], shape: MapShape, batch: usize, stride: usize, out: MapShape) -> Vec<T> {
    let n = batch * out.plane();
    let mut x = vec![T::ZERO; shape.channels * batch * shape.plane()];
    for c in 0..shape.channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let (cols, first) = valid_columns(shape.width, out.width, stride, kx);
                let row = &col[((c * KERNEL + ky) * KERNEL + kx) * n..][..n];
                for b in 0..batch {
                    let dst = &mut x[(c * batch + b) * shape.plane()..][..shape.plane()];
                    let src = &row[b * out.plane()..][..out.plane()];
                    for oy in 0..out.height {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= shape.height {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * shape.width + first..(iy as usize + 1) * shape.width];
                        let src_row = &src[oy * out.width..][cols.clone()];
                        for (d, &g) in dst_row.iter_mut().step_by(stride).zip(src_row) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
    x
}

fn check_finite<T: Real>(values: &[T], layer: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.finite()) {
        Ok(())
    } else {
        Err(EstimatorError::NonFinite { layer: layer() })
    }
}

/// Activations kept for the backward pass.
struct Trace<T> {
    batch: usize,
    shapes: Vec<MapShape>,
    /// `maps[0]` is the packed input; `maps[l + 1]` the output of conv block `l`.
    maps: Vec<Vec<T>>,
    cols: Vec<Vec<T>>,
    /// `dense[0]` is the pooled vector; `dense[i + 1]` the output of dense layer `i`.
    dense: Vec<Vec<T>>,
}

impl<T: Real> Trace<T> {
    fn predictions(&self) -> Vec<[f64; 2]> {
        self.dense.last().unwrap().chunks(2).map(|p| [p[0].to_f64(), p[1].to_f64()]).collect()
    }
}

fn run_forward<T: Real>(net: Net<'_, T>, inputs: &[&[T]]) -> Result<Trace<T>> {
    let spec = net.spec;
    let batch = inputs.len();
    if batch == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    let shapes: Vec<MapShape> = spec
        .feature_maps()
        .into_iter()
        .map(|(channels, height, width)| MapShape { channels, height, width })
        .collect();
    let in_shape = shapes[0];
    let in_len = in_shape.channels * in_shape.plane();
    let mut packed = vec![T::ZERO; in_len * batch];
    for (b, x) in inputs.iter().enumerate() {
        if x.len() != in_len {
            return Err(EstimatorError::Shape { layer: "input".into(), expected: in_len, got: x.len() });
        }
        for c in 0..in_shape.channels {
            packed[(c * batch + b) * in_shape.plane()..][..in_shape.plane()]
                .copy_from_slice(&x[c * in_shape.plane()..][..in_shape.plane()]);
        }
    }
    let act = spec.activation;
    let mut maps = vec![packed];
    let mut cols = Vec::with_capacity(spec.conv.len());
    for (l, block) in spec.conv.iter().enumerate() {
        let (src, dst) = (shapes[l], shapes[l + 1]);
        let col = im2col(&maps[l], src, batch, block.stride, dst);
        let k = src.channels * KERNEL * KERNEL;
        let n = batch * dst.plane();
        let mut z = vec![T::ZERO; dst.channels * n];
        gemm(dst.channels, k, n, net.conv_weights(l), (k, 1), &col, (n, 1), &mut z, T::ZERO);
        let bias = net.conv_bias(l);
        for (o, row) in z.chunks_mut(n).enumerate() {
            for v in row.iter_mut() {
                *v += bias[o];
            }
        }
        if block.skip {
            for (v, &x) in z.iter_mut().zip(&maps[l]) {
                *v += x;
            }
        }
        for v in z.iter_mut() {
            *v = activate(act, *v);
        }
        check_finite(&z, || format!("conv{l}"))?;
        maps.push(z);
        cols.push(col);
    }

    let last = *shapes.last().unwrap();
    let top = maps.last().unwrap();
    let mut pooled = vec![T::ZERO; batch * last.channels];
    let inv_plane = T::from_f64(1.0 / last.plane() as f64);
    for c in 0..last.channels {
        for b in 0..batch {
            let s: T = top[(c * batch + b) * last.plane()..][..last.plane()].iter().copied().sum();
            pooled[b * last.channels + c] = s * inv_plane;
        }
    }
    let layout = net.layout;
    let mut dense = vec![pooled];
    for (i, &(n_in, n_out)) in layout.fc_dims.iter().enumerate() {
        let mut z = vec![T::ZERO; batch * n_out];
        gemm(batch, n_in, n_out, &dense[i], (n_in, 1), net.fc_weights(i), (1, n_in), &mut z, T::ZERO);
        let bias = net.fc_bias(i);
        let hidden = i + 1 < layout.fc_dims.len();
        for row in z.chunks_mut(n_out) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
                if hidden {
                    *v = activate(act, *v);
                }
            }
        }
        check_finite(&z, || format!("fc{i}"))?;
        dense.push(z);
    }
    Ok(Trace { batch, shapes, maps, cols, dense })
}

/// Predicted normalized point of regard for one feature vector.
pub fn forward(weights: &ModelWeights, features: &[f64]) -> Result<[f64; 2]> {
    Ok(run_forward(Net::of(weights), &[features])?.predictions()[0])
}

pub fn forward_batch(weights: &ModelWeights, inputs: &[&[f64]]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(INFERENCE_CHUNK) {
        out.extend(run_forward(Net::of(weights), chunk)?.predictions());
    }
    Ok(out)
}

fn batch_loss(preds: &[[f64; 2]], targets: &[[f64; 2]]) -> f64 {
    let sq: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    sq / (2.0 * targets.len() as f64)
}

fn targets_of(batch: &[&TrainingSample]) -> Vec<[f64; 2]> {
    batch.iter().map(|s| s.target).collect()
}

/// Mean squared error, `1/(2N) * sum |pred - target|^2`.
pub fn loss(weights: &ModelWeights, batch: &[&TrainingSample]) -> Result<f64> {
    let inputs: Vec<&[f64]> = batch.iter().map(|s| s.features.as_slice()).collect();
    let preds = forward_batch(weights, &inputs)?;
    Ok(batch_loss(&preds, &targets_of(batch)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// Same layout as [`ModelWeights::params`].
    pub values: Vec<f64>,
}

/// Exact backpropagated gradient of [`loss`] over `batch`.
pub fn gradients(weights: &ModelWeights, batch: &[&TrainingSample]) -> Result<Gradients> {
    let inputs: Vec<&[f64]> = batch.iter().map(|s| s.features.as_slice()).collect();
    let (loss, values) = backprop(Net::of(weights), &inputs, &targets_of(batch))?;
    Ok(Gradients { loss, values })
}

/// Loss and flat gradient vector in the precision of `net`.
pub(crate) fn backprop<T: Real>(net: Net<'_, T>, inputs: &[&[T]], targets: &[[f64; 2]]) -> Result<(f64, Vec<T>)> {
    let trace = run_forward(net, inputs)?;
    let preds = trace.predictions();
    let loss = batch_loss(&preds, targets);
    let n_batch = trace.batch;
    let spec = net.spec;
    let layout = net.layout;
    let act = spec.activation;
    let mut grads = vec![T::ZERO; layout.total];

    let inv_b = 1.0 / n_batch as f64;
    let mut delta: Vec<T> = preds
        .iter()
        .zip(targets)
        .flat_map(|(p, t)| [T::from_f64((p[0] - t[0]) * inv_b), T::from_f64((p[1] - t[1]) * inv_b)])
        .collect();

    for i in (0..layout.fc_dims.len()).rev() {
        let (n_in, n_out) = layout.fc_dims[i];
        if i + 1 < layout.fc_dims.len() && act == Activation::Relu {
            for (d, &y) in delta.iter_mut().zip(&trace.dense[i + 1]) {
                if y <= T::ZERO {
                    *d = T::ZERO;
                }
            }
        }
        let r = layout.fc[i];
        let input = &trace.dense[i];
        gemm(n_out, n_batch, n_in, &delta, (1, n_out), input, (n_in, 1), &mut grads[r.weights.0..r.weights.1], T::ZERO);
        let gb = &mut grads[r.bias.0..r.bias.1];
        for row in delta.chunks(n_out) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut d_in = vec![T::ZERO; n_batch * n_in];
        gemm(n_batch, n_out, n_in, &delta, (n_out, 1), net.fc_weights(i), (n_in, 1), &mut d_in, T::ZERO);
        check_finite(&d_in, || format!("fc{i} backward"))?;
        delta = d_in;
    }

    if spec.conv.is_empty() {
        check_finite(&grads, || "gradients".to_string())?;
        return Ok((loss, grads));
    }

    // global average pooling
    let last = *trace.shapes.last().unwrap();
    let inv_plane = T::from_f64(1.0 / last.plane() as f64);
    let mut d_map = vec![T::ZERO; last.channels * n_batch * last.plane()];
    for c in 0..last.channels {
        for b in 0..n_batch {
            let g = delta[b * last.channels + c] * inv_plane;
            d_map[(c * n_batch + b) * last.plane()..][..last.plane()].fill(g);
        }
    }

    for l in (0..spec.conv.len()).rev() {
        let block = spec.conv[l];
        let (src, dst) = (trace.shapes[l], trace.shapes[l + 1]);
        if act == Activation::Relu {
            for (d, &y) in d_map.iter_mut().zip(&trace.maps[l + 1]) {
                if y <= T::ZERO {
                    *d = T::ZERO;
                }
            }
        }
        let k = src.channels * KERNEL * KERNEL;
        let n = n_batch * dst.plane();
        let r = layout.conv[l];
        gemm(dst.channels, n, k, &d_map, (n, 1), &trace.cols[l], (1, n), &mut grads[r.weights.0..r.weights.1], T::ZERO);
        for (g, row) in grads[r.bias.0..r.bias.1].iter_mut().zip(d_map.chunks(n)) {
            *g = row.iter().copied().sum();
        }
        if l == 0 {
            break;
        }
        let mut d_col = vec![T::ZERO; k * n];
        gemm(k, dst.channels, n, net.conv_weights(l), (1, k), &d_map, (n, 1), &mut d_col, T::ZERO);
        let mut d_src = col2im(&d_col, src, n_batch, block.stride, dst);
        if block.skip {
            for (d, &g) in d_src.iter_mut().zip(&d_map) {
                *d += g;
            }
        }
        check_finite(&d_src, || format!("conv{l} backward"))?;
        d_map = d_src;
    }
    check_finite(&grads, || "gradients".to_string())?;
    Ok((loss, grads))
}
