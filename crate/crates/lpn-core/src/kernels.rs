//! The neural kernels the pose networks need, implemented directly on the
//! dense `Tensor` type and validated against naive oracles in the tests.
//!
//! Determinism contract: for every output element the reduction order is
//! fixed (kernel taps scanned in ky, kx, input-channel ascending order), so
//! results are bit-identical regardless of the thread count configured via
//! [`set_max_threads`]. Threads only partition disjoint output regions.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Shape, Tensor};

static MAX_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Cap kernel-level parallelism. Default 1 (fully serial).
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn max_threads() -> usize {
    MAX_THREADS.load(Ordering::Relaxed)
}

fn threads_for(jobs: usize) -> usize {
    max_threads().min(jobs).max(1)
}

/// Run `f(job)` for every job in 0..jobs, splitting jobs across scoped
/// threads. `f` must only touch state owned by its job index.
fn for_each_job<F: Fn(usize) + Sync>(jobs: usize, f: F) {
    let nt = threads_for(jobs);
    if nt <= 1 {
        for j in 0..jobs {
            f(j);
        }
        return;
    }
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..nt {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs {
                    break;
                }
                f(j);
            });
        }
    });
}

/// Convolution (and transposed convolution) parameters.
///
/// Weight layout is `(out_c, in_c/groups, kh, kw)` for `conv2d` and
/// `(in_c, out_c/groups, kh, kw)` for `conv_transpose2d`.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Self {
        ConvParams {
            weight,
            bias,
            stride,
            padding,
            groups,
        }
    }

    /// in_channels as seen by conv2d.
    pub fn conv_in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn conv_out_channels(&self) -> usize {
        self.weight.shape().n
    }

    /// out_channels as seen by conv_transpose2d.
    pub fn deconv_out_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn deconv_in_channels(&self) -> usize {
        self.weight.shape().n
    }
}

fn check_groups(groups: usize, in_c: usize, out_c: usize) -> Result<()> {
    if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
        return Err(Error::BadGroups {
            groups,
            in_channels: in_c,
            out_channels: out_c,
        });
    }
    Ok(())
}

pub fn conv_out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if in_size + 2 * pad < k {
        return Err(Error::shape(format!(
            "kernel {k} does not fit input {in_size} with padding {pad}"
        )));
    }
    Ok((in_size + 2 * pad - k) / stride + 1)
}

/// 2-D cross-correlation with zero padding and channel groups.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (oc, cg, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let in_c = cg * p.groups;
    check_groups(p.groups, in_c, oc)?;
    if xs.c != in_c {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels but weight {} expects {} (groups={})",
            xs.c, ws, in_c, p.groups
        )));
    }
    if let Some(b) = &p.bias {
        if b.len() != oc {
            return Err(Error::shape(format!(
                "conv2d: bias length {} != out_channels {}",
                b.len(),
                oc
            )));
        }
    }
    let oh = conv_out_size(xs.h, kh, p.stride.0, p.padding.0)?;
    let ow = conv_out_size(xs.w, kw, p.stride.1, p.padding.1)?;
    let out_shape = Shape::new(xs.n, oc, oh, ow);
    let mut out: Tensor<T> = Tensor::zeros(out_shape);

    let ocg = oc / p.groups;
    let kdim = cg * kh * kw;
    let plane = oh * ow;

    // One job per (sample, group); the matmul inside splits rows further when
    // it is the only job.
    let out_ptr = SendPtr(out.data_mut().as_mut_ptr());
    let jobs = xs.n * p.groups;
    let inner_split = jobs == 1;
    for_each_job(jobs, |job| {
        let n = job / p.groups;
        let g = job % p.groups;
        let mut cols = vec![T::zero(); kdim * plane];
        im2col(x, n, g * cg, cg, (kh, kw), p.stride, p.padding, (oh, ow), &mut cols);
        let wrow = &p.weight.data()[g * ocg * kdim..(g + 1) * ocg * kdim];
        // Disjoint region: sample n, channels [g*ocg, (g+1)*ocg).
        let dst = unsafe {
            std::slice::from_raw_parts_mut(
                out_ptr.get().add((n * oc + g * ocg) * plane),
                ocg * plane,
            )
        };
        let bias = p.bias.as_deref().map(|b| &b[g * ocg..(g + 1) * ocg]);
        matmul_rows(wrow, &cols, dst, ocg, kdim, plane, bias, inner_split);
    });
    Ok(out)
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    fn get(&self) -> *mut T {
        self.0
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    c0: usize,
    cg: usize,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
    cols: &mut [T],
) {
    let xs = x.shape();
    let (oh, ow) = out;
    let plane = oh * ow;
    let mut row = 0usize;
    for ci in 0..cg {
        let src = x.plane(n, c0 + ci);
        for ky in 0..k.0 {
            for kx in 0..k.1 {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        dst[oy * ow..(oy + 1) * ow].fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                    for ox in 0..ow {
                        let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                        dst[oy * ow + ox] = if ix < 0 || ix >= xs.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// C[i][j] = bias[i] + sum_k A[i][k] * B[k][j]; k ascending for every output.
#[allow(clippy::too_many_arguments)]
fn matmul_rows<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    p: usize,
    bias: Option<&[T]>,
    split_rows: bool,
) {
    let fill_row = |i: usize, crow: &mut [T]| {
        let init = bias.map_or(T::zero(), |b| b[i]);
        crow.fill(init);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if split_rows && threads_for(m) > 1 {
        let c_ptr = SendPtr(c.as_mut_ptr());
        for_each_job(m, |i| {
            let crow = unsafe { std::slice::from_raw_parts_mut(c_ptr.get().add(i * p), p) };
            fill_row(i, crow);
        });
    } else {
        for (i, crow) in c.chunks_exact_mut(p).enumerate() {
            fill_row(i, crow);
        }
    }
}

/// Transposed convolution (gradient-of-conv2d semantics), gather form.
///
/// Weight layout `(in_c, out_c/groups, kh, kw)`. Output spatial size is
/// `(in-1)*stride - 2*pad + k + output_padding`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    output_padding: (usize, usize),
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (in_c, ocg, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let out_c = ocg * p.groups;
    check_groups(p.groups, in_c, out_c)?;
    if xs.c != in_c {
        return Err(Error::shape(format!(
            "conv_transpose2d: input has {} channels but weight {} expects {}",
            xs.c, ws, in_c
        )));
    }
    if let Some(b) = &p.bias {
        if b.len() != out_c {
            return Err(Error::shape(format!(
                "conv_transpose2d: bias length {} != out_channels {}",
                b.len(),
                out_c
            )));
        }
    }
    if output_padding.0 >= p.stride.0 || output_padding.1 >= p.stride.1 {
        return Err(Error::invalid(format!(
            "output_padding {:?} must be smaller than stride {:?}",
            output_padding, p.stride
        )));
    }
    let oh = (xs.h - 1) * p.stride.0 + kh + output_padding.0;
    let ow = (xs.w - 1) * p.stride.1 + kw + output_padding.1;
    if oh < 2 * p.padding.0 || ow < 2 * p.padding.1 {
        return Err(Error::shape(format!(
            "conv_transpose2d: padding {:?} too large for output {}x{}",
            p.padding, oh, ow
        )));
    }
    let (oh, ow) = (oh - 2 * p.padding.0, ow - 2 * p.padding.1);
    let icg = in_c / p.groups;
    let mut out: Tensor<T> = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow));

    let out_ptr = SendPtr(out.data_mut().as_mut_ptr());
    let jobs = xs.n * out_c;
    for_each_job(jobs, |job| {
        let n = job / out_c;
        let oc = job % out_c;
        let g = oc / ocg;
        let oc_in_group = oc % ocg;
        let dst =
            unsafe { std::slice::from_raw_parts_mut(out_ptr.get().add((n * out_c + oc) * oh * ow), oh * ow) };
        let bias = p.bias.as_ref().map_or(T::zero(), |b| b[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ky in 0..kh {
                    let num_y = oy + p.padding.0;
                    if num_y < ky {
                        continue;
                    }
                    let ty = num_y - ky;
                    if ty % p.stride.0 != 0 {
                        continue;
                    }
                    let iy = ty / p.stride.0;
                    if iy >= xs.h {
                        continue;
                    }
                    for kx in 0..kw {
                        let num_x = ox + p.padding.1;
                        if num_x < kx {
                            continue;
                        }
                        let tx = num_x - kx;
                        if tx % p.stride.1 != 0 {
                            continue;
                        }
                        let ix = tx / p.stride.1;
                        if ix >= xs.w {
                            continue;
                        }
                        for ci in 0..icg {
                            let c = g * icg + ci;
                            acc += x.at(n, c, iy, ix)
                                * p.weight.at(c, oc_in_group, ky, kx);
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    });
    Ok(out)
}

/// Batch-norm parameters (per-channel affine plus running statistics).
#[derive(Clone, Debug)]
pub struct NormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Scalar> NormParams<T> {
    pub fn identity(channels: usize) -> Self {
        NormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x_c: usize) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("norm parameter vectors disagree in length"));
        }
        if x_c != c {
            return Err(Error::shape(format!(
                "batch_norm: input has {x_c} channels, params have {c}"
            )));
        }
        Ok(())
    }
}

/// Per-channel batch statistics captured during a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divided by N), as used for normalization.
    pub var: Vec<T>,
}

/// Inference-mode batch norm: uses running statistics.
pub fn batch_norm_infer<T: Scalar>(x: &Tensor<T>, p: &NormParams<T>) -> Result<Tensor<T>> {
    p.check(x.shape().c)?;
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let inv = T::one() / (p.running_var[c] + lit::<T>(p.epsilon)).sqrt();
        let scale = p.gamma[c] * inv;
        let shift = p.beta[c] - p.running_mean[c] * scale;
        for n in 0..s.n {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Training-mode batch norm: normalizes with batch statistics and updates the
/// running estimates in place (`running = (1-momentum)*running + momentum*batch`,
/// unbiased variance for the running update when N > 1).
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    p: &mut NormParams<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    p.check(x.shape().c)?;
    let s = x.shape();
    let count = s.n * s.h * s.w;
    if count == 0 {
        return Err(Error::invalid("batch_norm: empty input"));
    }
    let inv_count = T::one() / lit::<T>(count as f64);
    let mut stats = BatchStats {
        mean: vec![T::zero(); s.c],
        var: vec![T::zero(); s.c],
    };
    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let mut sum = T::zero();
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                sum += v;
            }
        }
        let mean = sum * inv_count;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - mean;
                sq += d * d;
            }
        }
        let var = sq * inv_count;
        stats.mean[c] = mean;
        stats.var[c] = var;

        let inv_std = T::one() / (var + lit::<T>(p.epsilon)).sqrt();
        let scale = p.gamma[c] * inv_std;
        let shift = p.beta[c] - mean * scale;
        for n in 0..s.n {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * scale + shift;
            }
        }

        let mom = lit::<T>(p.momentum);
        let keep = T::one() - mom;
        let running_var_update = if count > 1 {
            var * lit::<T>(count as f64 / (count as f64 - 1.0))
        } else {
            var
        };
        p.running_mean[c] = keep * p.running_mean[c] + mom * mean;
        p.running_var[c] = keep * p.running_var[c] + mom * running_var_update;
    }
    Ok((out, stats))
}

/// Softmax over all h*w positions of each (sample, channel) slice, with the
/// input pre-scaled by `scale`. Stabilized by max subtraction; `scale = 0`
/// yields the uniform distribution.
pub fn spatial_softmax<T: Scalar>(x: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !scale.is_finite() {
        return Err(Error::invalid("spatial_softmax: scale must be finite"));
    }
    let s = x.shape();
    if s.h * s.w == 0 {
        return Err(Error::shape("spatial_softmax: empty spatial extent"));
    }
    let sc = lit::<T>(scale);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            let mut m = sc * src[0];
            for &v in src {
                let z = sc * v;
                if z > m {
                    m = z;
                }
            }
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = (sc * v - m).exp();
                *d = e;
                total += e;
            }
            let inv = T::one() / total;
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
    }
    Ok(out)
}

/// Max pooling; padding positions are treated as -inf. Ties resolve to the
/// first tap in (ky, kx) scan order.
pub fn max_pool2d<T: Scalar>(
    x: &Tensor<T>,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    Ok(max_pool2d_with_argmax(x, k, stride, pad)?.0)
}

/// Max pooling that also returns, per output element, the flat input offset
/// of the selected maximum (used by the backward pass).
pub fn max_pool2d_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let oh = conv_out_size(s.h, k.0, stride.0, pad.0)?;
    let ow = conv_out_size(s.w, k.1, stride.1, pad.1)?;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut arg = vec![0usize; out.numel()];
    let mut oi = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_off = usize::MAX;
                    for ky in 0..k.0 {
                        let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..k.1 {
                            let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let off = iy as usize * s.w + ix as usize;
                            let v = src[off];
                            if v > best {
                                best = v;
                                best_off = off;
                            }
                        }
                    }
                    if best_off == usize::MAX {
                        return Err(Error::shape(
                            "max_pool2d: window contains no valid input",
                        ));
                    }
                    let base = (n * s.c + c) * s.h * s.w;
                    out.data_mut()[oi] = best;
                    arg[oi] = base + best_off;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = lit::<T>(factor);
    x.map(|v| v * f)
}

/// Add a per-channel constant to every spatial position and sample.
pub fn broadcast_add_channel<T: Scalar>(x: &Tensor<T>, v: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if v.len() != s.c {
        return Err(Error::shape(format!(
            "broadcast_add_channel: vector length {} != channels {}",
            v.len(),
            s.c
        )));
    }
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let add = v[c];
            for d in out.plane_mut(n, c) {
                *d += add;
            }
        }
    }
    Ok(out)
}

/// Add a per-(sample, channel) vector `(n, c, 1, 1)` to every spatial
/// position of `x`. A vector with n = 1 broadcasts across the batch.
pub fn broadcast_add_vec<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let vs = v.shape();
    if vs.c != s.c || vs.h != 1 || vs.w != 1 || (vs.n != s.n && vs.n != 1) {
        return Err(Error::shape(format!(
            "broadcast_add_vec: vector shape {vs} incompatible with input {s}"
        )));
    }
    let mut out = x.clone();
    for n in 0..s.n {
        let vn = if vs.n == 1 { 0 } else { n };
        for c in 0..s.c {
            let add = v.at(vn, c, 0, 0);
            for d in out.plane_mut(n, c) {
                *d += add;
            }
        }
    }
    Ok(out)
}

/// Multiply every channel of `x` by a single-channel spatial map `(n, 1, h, w)`.
pub fn broadcast_mul_map<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let ms = m.shape();
    if ms.n != s.n || ms.c != 1 || ms.h != s.h || ms.w != s.w {
        return Err(Error::shape(format!(
            "broadcast_mul_map: map shape {ms} incompatible with input {s}"
        )));
    }
    let mut out = x.clone();
    for n in 0..s.n {
        let map = m.plane(n, 0);
        for c in 0..s.c {
            for (d, &w) in out.plane_mut(n, c).iter_mut().zip(map) {
                *d = *d * w;
            }
        }
    }
    Ok(out)
}

/// Sum over all spatial positions, producing `(n, c, 1, 1)`.
pub fn global_sum_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = T::zero();
            for &v in x.plane(n, c) {
                acc += v;
            }
            *out.at_mut(n, c, 0, 0) = acc;
        }
    }
    out
}

/// Layer-norm parameters for a per-sample channel vector.
#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub epsilon: f64,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        LayerNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            epsilon: 1e-5,
        }
    }
}

/// Normalize each sample's channel vector `(n, c, 1, 1)` to zero mean and
/// unit variance, then apply the affine pair.
pub fn layer_norm_vec<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!(
            "layer_norm_vec: expected (n, c, 1, 1), got {s}"
        )));
    }
    if p.gamma.len() != s.c || p.beta.len() != s.c {
        return Err(Error::shape(format!(
            "layer_norm_vec: affine length {} != channels {}",
            p.gamma.len(),
            s.c
        )));
    }
    let inv_c = T::one() / lit::<T>(s.c as f64);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let mut mean = T::zero();
        for c in 0..s.c {
            mean += x.at(n, c, 0, 0);
        }
        mean = mean * inv_c;
        let mut var = T::zero();
        for c in 0..s.c {
            let d = x.at(n, c, 0, 0) - mean;
            var += d * d;
        }
        var = var * inv_c;
        let inv_std = T::one() / (var + lit::<T>(p.epsilon)).sqrt();
        for c in 0..s.c {
            let xhat = (x.at(n, c, 0, 0) - mean) * inv_std;
            *out.at_mut(n, c, 0, 0) = p.gamma[c] * xhat + p.beta[c];
        }
    }
    Ok(out)
}

/// Mean squared error between two same-shape tensors (plain evaluation path).
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same_shape(a, b, "mse")?;
    let n = a.numel() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{naive_conv2d, naive_conv_transpose2d};
    use crate::rng::{rand_tensor, rand_vec, seeded};

    #[test]
    fn conv_1x1_identity_over_channels() {
        // weight = identity matrix over channels
        let c = 4;
        let w = Tensor::<f32>::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| {
            if o == i {
                1.0
            } else {
                0.0
            }
        });
        let p = ConvParams::new(w, None, (1, 1), (0, 0), 1);
        let x = rand_tensor::<f32>(Shape::new(2, c, 5, 3), 7);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let c = 3;
        let w = Tensor::<f32>::from_fn(Shape::new(c, 1, 3, 3), |_, _, ky, kx| {
            if ky == 1 && kx == 1 {
                1.0
            } else {
                0.0
            }
        });
        let p = ConvParams::new(w, None, (1, 1), (1, 1), c);
        let x = rand_tensor::<f32>(Shape::new(1, c, 6, 6), 11);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv_matches_naive_oracle_for_each_group_count() {
        for (seed, groups) in [(1u64, 1usize), (2, 2), (3, 4)] {
            let x = rand_tensor::<f64>(Shape::new(1, 4, 6, 6), seed);
            let w = rand_tensor::<f64>(Shape::new(4, 4 / groups, 3, 3), seed + 100);
            let bias = rand_vec::<f64>(4, seed + 200);
            let p = ConvParams::new(w, Some(bias), (1, 1), (1, 1), groups);
            let got = conv2d(&x, &p).unwrap();
            let want = naive_conv2d(&x, &p).unwrap();
            assert!(
                got.max_rel_diff(&want) <= 1e-12,
                "groups={groups} rel diff {}",
                got.max_rel_diff(&want)
            );
        }
    }

    #[test]
    fn grouped_conv_equals_concatenated_independent_convs() {
        let groups = 2;
        let x = rand_tensor::<f64>(Shape::new(2, 4, 5, 5), 21);
        let w = rand_tensor::<f64>(Shape::new(6, 2, 3, 3), 22);
        let p = ConvParams::new(w.clone(), None, (1, 1), (1, 1), groups);
        let whole = conv2d(&x, &p).unwrap();

        for g in 0..groups {
            // slice inputs/weights for group g and run an ordinary conv
            let xg = Tensor::from_fn(Shape::new(2, 2, 5, 5), |n, c, y, xx| {
                x.at(n, g * 2 + c, y, xx)
            });
            let wg = Tensor::from_fn(Shape::new(3, 2, 3, 3), |o, i, ky, kx| {
                w.at(g * 3 + o, i, ky, kx)
            });
            let pg = ConvParams::new(wg, None, (1, 1), (1, 1), 1);
            let yg = conv2d(&xg, &pg).unwrap();
            for n in 0..2 {
                for c in 0..3 {
                    for y in 0..5 {
                        for xx in 0..5 {
                            assert_eq!(yg.at(n, c, y, xx), whole.at(n, g * 3 + c, y, xx));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_bad_groups_and_channels() {
        let x = rand_tensor::<f32>(Shape::new(1, 4, 4, 4), 1);
        let w = rand_tensor::<f32>(Shape::new(4, 2, 3, 3), 2);
        // groups=3 does not divide 4
        let p = ConvParams::new(w.clone(), None, (1, 1), (1, 1), 3);
        assert!(matches!(conv2d(&x, &p), Err(Error::BadGroups { .. })));
        // channel mismatch: weight expects 2*1=2 input channels
        let p = ConvParams::new(w, None, (1, 1), (1, 1), 1);
        let err = conv2d(&x, &p).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn deconv_single_pixel_spreads_kernel() {
        let v = 2.5f32;
        let x = Tensor::full(Shape::new(1, 1, 1, 1), v);
        let w = Tensor::full(Shape::new(1, 1, 4, 4), 1.0);
        let p = ConvParams::new(w, None, (2, 2), (0, 0), 1);
        let y = conv_transpose2d(&x, &p, (0, 0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert!(y.data().iter().all(|&o| o == v));
    }

    #[test]
    fn deconv_matches_scatter_oracle() {
        let mut rng_seed = 31u64;
        for groups in [1usize, 2, 4] {
            rng_seed += 1;
            let x = rand_tensor::<f64>(Shape::new(2, 4, 3, 4), rng_seed);
            let w = rand_tensor::<f64>(Shape::new(4, 8 / groups, 4, 4), rng_seed + 50);
            let bias = rand_vec::<f64>(8, rng_seed + 90);
            let p = ConvParams::new(w, Some(bias), (2, 2), (1, 1), groups);
            let got = conv_transpose2d(&x, &p, (1, 1)).unwrap();
            let want = naive_conv_transpose2d(&x, &p, (1, 1)).unwrap();
            assert!(got.max_rel_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn depthwise_deconv_channels_are_independent() {
        let c = 3;
        let base = rand_tensor::<f64>(Shape::new(1, c, 3, 3), 77);
        let w = rand_tensor::<f64>(Shape::new(c, 1, 4, 4), 78);
        let p = ConvParams::new(w, None, (2, 2), (1, 1), c);
        let y0 = conv_transpose2d(&base, &p, (0, 0)).unwrap();

        let mut perturbed = base.clone();
        *perturbed.at_mut(0, 1, 2, 2) += 0.5;
        let y1 = conv_transpose2d(&perturbed, &p, (0, 0)).unwrap();
        for ch in 0..c {
            let same = y0.plane(0, ch) == y1.plane(0, ch);
            assert_eq!(same, ch != 1, "only channel 1 may change");
        }
    }

    #[test]
    fn batch_norm_identity_params_pass_through() {
        let x = rand_tensor::<f64>(Shape::new(2, 3, 4, 4), 5);
        let p = NormParams::identity(3);
        let y = batch_norm_infer(&x, &p).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4, "identity up to epsilon");
    }

    #[test]
    fn batch_norm_train_normalizes_batch() {
        let x = rand_tensor::<f64>(Shape::new(4, 3, 5, 5), 9);
        let mut p = NormParams::identity(3);
        p.epsilon = 1e-12; // so the epsilon guard does not disturb the variance check
        let (y, _) = batch_norm_train(&x, &mut p).unwrap();
        let s = y.shape();
        let count = (s.n * s.h * s.w) as f64;
        for c in 0..3 {
            let mut mean = 0.0;
            let mut sq = 0.0;
            for n in 0..s.n {
                for &v in y.plane(n, c) {
                    mean += v;
                }
            }
            mean /= count;
            for n in 0..s.n {
                for &v in y.plane(n, c) {
                    sq += (v - mean) * (v - mean);
                }
            }
            let var = sq / count;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-5, "var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_channel_becomes_beta() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 3, 3), 4.2);
        let mut p = NormParams::identity(1);
        p.beta[0] = -1.5;
        let (y, _) = batch_norm_train(&x, &mut p).unwrap();
        for &v in y.data() {
            assert!((v + 1.5).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_rejects_channel_mismatch() {
        let x = rand_tensor::<f32>(Shape::new(1, 3, 2, 2), 3);
        let p = NormParams::identity(4);
        assert!(batch_norm_infer(&x, &p).is_err());
    }

    #[test]
    fn softmax_uniform_slice() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 4, 6), 3.3);
        let y = spatial_softmax(&x, 1.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_one_hot_beta_160_saturates() {
        let mut x = Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8));
        *x.at_mut(0, 0, 3, 5) = 1.0;
        let y = spatial_softmax(&x, 160.0).unwrap();
        let max = y.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!(max >= 1.0 - 1e-6);
        let total: f64 = y.plane(0, 0).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_scale_zero_is_uniform() {
        let x = rand_tensor::<f32>(Shape::new(1, 1, 5, 5), 13);
        let y = spatial_softmax(&x, 0.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 25.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_invariant_under_constant_shift() {
        let x = rand_tensor::<f64>(Shape::new(1, 2, 4, 4), 17);
        let shifted = x.map(|v| v + 7.25);
        let a = spatial_softmax(&x, 3.0).unwrap();
        let b = spatial_softmax(&shifted, 3.0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn pointwise_suite_basics() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);

        let z = Tensor::<f32>::zeros(x.shape());
        assert_eq!(add(&x, &z).unwrap(), x);

        let ones = Tensor::<f32>::full(Shape::new(1, 3, 4, 5), 1.0);
        let pooled = global_sum_pool(&ones);
        for c in 0..3 {
            assert_eq!(pooled.at(0, c, 0, 0), 20.0);
        }

        let err = add(&x, &ones).unwrap_err();
        assert!(err.to_string().contains("shapes"));
    }

    #[test]
    fn layer_norm_normalizes_channel_vector() {
        let x = rand_tensor::<f64>(Shape::new(3, 8, 1, 1), 23);
        let p = LayerNormParams::identity(8);
        let y = layer_norm_vec(&x, &p).unwrap();
        for n in 0..3 {
            let mut mean = 0.0;
            for c in 0..8 {
                mean += y.at(n, c, 0, 0);
            }
            mean /= 8.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn max_pool_basic_and_ties() {
        let x = Tensor::<f32>::from_vec(
            Shape::new(1, 1, 2, 4),
            vec![1.0, 1.0, 0.0, 3.0, 0.0, -1.0, 3.0, 2.0],
        )
        .unwrap();
        let (y, arg) = max_pool2d_with_argmax(&x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
        // tie between (0,0) and (0,1) resolves to the first scanned
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn kernels_are_deterministic_across_thread_counts() {
        let x = rand_tensor::<f32>(Shape::new(2, 8, 8, 8), 41);
        let w = rand_tensor::<f32>(Shape::new(8, 4, 3, 3), 42);
        let p = ConvParams::new(w, None, (1, 1), (1, 1), 2);
        let a = conv2d(&x, &p).unwrap();
        set_max_threads(4);
        let b = conv2d(&x, &p).unwrap();
        set_max_threads(1);
        assert_eq!(a, b, "thread split must not change results bit-for-bit");
    }

    #[test]
    fn random_shape_sweep_matches_oracles() {
        // conv2d and conv_transpose2d against the naive oracles on >= 50
        // random shapes with dims <= (2, 8, 8, 8)
        let mut rng = seeded(99);
        use rand::Rng;
        for case in 0..60 {
            let n = rng.gen_range(1..=2);
            let groups = [1usize, 2, 4][rng.gen_range(0..3)];
            let cg_in = rng.gen_range(1..=2);
            let cg_out = rng.gen_range(1..=2);
            let (ic, oc) = (groups * cg_in, groups * cg_out);
            let k = rng.gen_range(1..=3);
            let s = rng.gen_range(1..=2);
            let pd = rng.gen_range(0..=1);
            let h = rng.gen_range(k..=8);
            let w = rng.gen_range(k..=8);
            let x = rand_tensor::<f32>(Shape::new(n, ic, h, w), 1000 + case);
            let wt = rand_tensor::<f32>(Shape::new(oc, cg_in, k, k), 2000 + case);
            let p = ConvParams::new(wt, None, (s, s), (pd, pd), groups);
            if let Ok(got) = conv2d(&x, &p) {
                let want = naive_conv2d(&x, &p).unwrap();
                assert!(got.max_rel_diff(&want) <= 1e-6, "case {case}");
            }

            let wt = rand_tensor::<f32>(Shape::new(ic, cg_out, k, k), 3000 + case);
            let p = ConvParams::new(wt, None, (s, s), (pd.min(k / 2), pd.min(k / 2)), groups);
            let op = rng.gen_range(0..s);
            if let Ok(got) = conv_transpose2d(&x, &p, (op, op)) {
                let want = naive_conv_transpose2d(&x, &p, (op, op)).unwrap();
                assert!(got.max_rel_diff(&want) <= 1e-6, "deconv case {case}");
            }
        }
    }
}
