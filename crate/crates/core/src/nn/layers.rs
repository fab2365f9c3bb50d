//! Forward and backward passes of the individual network layers.

use super::scalar::{matmul, Scalar};
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

/// Zero padding before/after for a "same" convolution of kernel size `k`.
fn same_padding(k: usize) -> (usize, usize) {
    let before = (k - 1) / 2;
    (before, k - 1 - before)
}

/// Unrolls one sample into a `(cin * k * k) x (h * w)` matrix.
fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let (pb, _) = same_padding(k);
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let dx = kx as isize - pb as isize;
                // valid output columns where x + dx stays inside [0, w)
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pb as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Scatters an unrolled gradient back onto one sample.
fn col2im<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let (pb, _) = same_padding(k);
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let d = kx as isize - pb as isize;
                let x0 = (-d).max(0) as usize;
                let x1 = ((w as isize - d).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pb as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + d) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (o, &g) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *o = *o + g;
                    }
                }
            }
        }
    }
}

/// Kernel geometry of a same-padded, stride-1 convolution. Weights are laid
/// out `[cout][cin][k][k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn check(&self, x: &Tensor4<impl Scalar>, w_len: usize, b_len: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::shape("kernel size must be positive"));
        }
        if x.c != self.cin {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {}",
                self.cin, x.c
            )));
        }
        if w_len != self.weight_len() || b_len != self.cout {
            return Err(Error::shape(format!(
                "kernel has {w_len} weights and {b_len} biases, expected {} and {}",
                self.weight_len(),
                self.cout
            )));
        }
        Ok(())
    }
}

/// Cross-correlation with zero "same" padding, stride 1.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    spec: ConvSpec,
    weight: &[T],
    bias: &[T],
    exec: Execution,
) -> Result<Tensor4<T>> {
    spec.check(x, weight.len(), bias.len())?;
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let kk = spec.cin * spec.k * spec.k;
    let mut out = Tensor4::zeros(x.n, spec.cout, h, w);
    parallel::for_each_chunk_mut(exec, &mut out.data, spec.cout * hw, |i, y| {
        let mut cols = vec![T::zero(); kk * hw];
        im2col(x.sample(i), spec.cin, h, w, spec.k, &mut cols);
        for (co, plane) in y.chunks_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        matmul(spec.cout, kk, hw, weight, false, &cols, false, y, true);
    });
    Ok(out)
}

/// Gradients of a convolution.
pub struct ConvGrads<T> {
    /// `None` when the caller did not ask for the input gradient.
    pub dx: Option<Tensor4<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    spec: ConvSpec,
    weight: &[T],
    dy: &Tensor4<T>,
    need_dx: bool,
    exec: Execution,
) -> Result<ConvGrads<T>> {
    spec.check(x, weight.len(), spec.cout)?;
    if dy.shape() != [x.n, spec.cout, x.h, x.w] {
        return Err(Error::shape("output gradient does not match convolution output"));
    }
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let kk = spec.cin * spec.k * spec.k;
    let per_sample = parallel::map_range(exec, x.n, |i| {
        let mut cols = vec![T::zero(); kk * hw];
        im2col(x.sample(i), spec.cin, h, w, spec.k, &mut cols);
        let g = dy.sample(i);
        let mut dw = vec![T::zero(); spec.weight_len()];
        matmul(spec.cout, hw, kk, g, false, &cols, true, &mut dw, false);
        let db: Vec<T> = g.chunks(hw).map(|p| p.iter().copied().sum()).collect();
        let dx = need_dx.then(|| {
            matmul(kk, spec.cout, hw, weight, true, g, false, &mut cols, false);
            let mut dx = vec![T::zero(); spec.cin * hw];
            col2im(&cols, spec.cin, h, w, spec.k, &mut dx);
            dx
        });
        (dw, db, dx)
    });

    // reduce in sample order so the result does not depend on thread count
    let mut dw = vec![T::zero(); spec.weight_len()];
    let mut db = vec![T::zero(); spec.cout];
    let mut dx_data = Vec::with_capacity(if need_dx { x.data.len() } else { 0 });
    for (sw, sb, sx) in per_sample {
        for (a, b) in dw.iter_mut().zip(sw) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(sb) {
            *a = *a + b;
        }
        if let Some(sx) = sx {
            dx_data.extend(sx);
        }
    }
    let dx = if need_dx {
        Some(Tensor4::from_vec(x.n, x.c, h, w, dx_data)?)
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}

/// Per-channel state saved by a training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn channel_iter<T: Scalar>(x: &Tensor4<T>, c: usize) -> impl Iterator<Item = &[T]> {
    let hw = x.plane();
    (0..x.n).map(move |i| &x.data[(i * x.c + c) * hw..(i * x.c + c + 1) * hw])
}

/// Batch normalization in training mode: normalizes each channel by its mean
/// and (biased) variance over `N, H, W`, then scales by `gamma` and shifts by `beta`.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    if x.n < 2 {
        return Err(Error::invalid("batch normalization needs at least 2 samples in training mode"));
    }
    if gamma.len() != x.c || beta.len() != x.c {
        return Err(Error::shape("batch-norm parameters do not match channel count"));
    }
    let hw = x.plane();
    let count = (x.n * hw) as f64;
    let mut mean = vec![0.0f64; x.c];
    let mut var = vec![0.0f64; x.c];
    for c in 0..x.c {
        let m = channel_iter(x, c)
            .map(|p| p.iter().map(|v| v.f64()).sum::<f64>())
            .sum::<f64>()
            / count;
        let v = channel_iter(x, c)
            .map(|p| p.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / count;
        mean[c] = m;
        var[c] = v;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
    for i in 0..x.n {
        for c in 0..x.c {
            let off = (i * x.c + c) * hw;
            let (m, s) = (T::of(mean[c]), inv_std[c]);
            for j in off..off + hw {
                let xh = (x.data[j] - m) * s;
                xhat.data[j] = xh;
                y.data[j] = gamma[c] * xh + beta[c];
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Batch normalization in inference mode, using running statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor4<T>> {
    if [gamma.len(), beta.len(), running_mean.len(), running_var.len()] != [x.c; 4] {
        return Err(Error::shape("batch-norm parameters do not match channel count"));
    }
    let hw = x.plane();
    let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
    for i in 0..x.n {
        for c in 0..x.c {
            let scale = gamma[c] / (running_var[c] + T::of(eps)).sqrt();
            let shift = beta[c] - running_mean[c] * scale;
            let off = (i * x.c + c) * hw;
            for j in off..off + hw {
                y.data[j] = x.data[j] * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Exponential moving update `r = momentum * r + (1 - momentum) * batch`.
pub fn update_running<T: Scalar>(running: &mut [T], batch: &[f64], momentum: f64) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = T::of(momentum * r.f64() + (1.0 - momentum) * b);
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor4<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let x = &cache.xhat;
    let hw = x.plane();
    let m = (x.n * hw) as f64;
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut dgamma = vec![T::zero(); x.c];
    let mut dbeta = vec![T::zero(); x.c];
    for c in 0..x.c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for i in 0..x.n {
            let off = (i * x.c + c) * hw;
            for j in off..off + hw {
                let g = dy.data[j].f64();
                sum_dy += g;
                sum_dy_xhat += g * x.data[j].f64();
            }
        }
        dgamma[c] = T::of(sum_dy_xhat);
        dbeta[c] = T::of(sum_dy);
        let k = gamma[c].f64() * cache.inv_std[c].f64() / m;
        for i in 0..x.n {
            let off = (i * x.c + c) * hw;
            for j in off..off + hw {
                let v = k * (m * dy.data[j].f64() - sum_dy - x.data[j].f64() * sum_dy_xhat);
                dx.data[j] = T::of(v);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(out: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // split on sign to avoid overflow in exp
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of the logistic sigmoid given its output.
pub fn sigmoid_backward<T: Scalar>(out: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &s) in dx.data.iter_mut().zip(&out.data) {
        *d = *d * s * (T::one() - s);
    }
    dx
}

/// 2x2, stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input index of the winning element (first maximum wins ties).
pub fn maxpool2<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "max pooling needs even spatial dimensions, got {}x{}",
            x.h, x.w
        )));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor4::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; y.data.len()];
    for p in 0..x.n * x.c {
        let src = p * x.h * x.w;
        for r in 0..oh {
            for c in 0..ow {
                let mut best = src + 2 * r * x.w + 2 * c;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let j = src + (2 * r + dr) * x.w + 2 * c + dc;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                let o = (p * oh + r) * ow + c;
                y.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: [usize; 4],
    argmax: &[u32],
    dy: &Tensor4<T>,
) -> Tensor4<T> {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (&j, &g) in argmax.iter().zip(&dy.data) {
        dx.data[j as usize] = dx.data[j as usize] + g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor4::zeros(x.n, x.c, oh, ow);
    for p in 0..x.n * x.c {
        for r in 0..oh {
            let src = &x.data[(p * x.h + r / 2) * x.w..(p * x.h + r / 2 + 1) * x.w];
            let dst = &mut y.data[(p * oh + r) * ow..(p * oh + r + 1) * ow];
            for (c, d) in dst.iter_mut().enumerate() {
                *d = src[c / 2];
            }
        }
    }
    y
}

/// Sums each 2x2 block of the upsampled gradient.
pub fn upsample2_backward<T: Scalar>(dy: &Tensor4<T>) -> Tensor4<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        for r in 0..dy.h {
            for c in 0..dy.w {
                let o = (p * h + r / 2) * w + c / 2;
                dx.data[o] = dx.data[o] + dy.data[(p * dy.h + r) * dy.w + c];
            }
        }
    }
    dx
}

/// Channel-wise concatenation `[a, b]`.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor4::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

/// Splits a concatenated gradient into its `a` and `b` parts.
pub fn split_channels<T: Scalar>(d: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let cb = d.c - ca;
    let hw = d.plane();
    let mut da = Vec::with_capacity(d.n * ca * hw);
    let mut db = Vec::with_capacity(d.n * cb * hw);
    for i in 0..d.n {
        let s = d.sample(i);
        da.extend_from_slice(&s[..ca * hw]);
        db.extend_from_slice(&s[ca * hw..]);
    }
    (
        Tensor4::from_vec(d.n, ca, d.h, d.w, da).expect("split sizes"),
        Tensor4::from_vec(d.n, cb, d.h, d.w, db).expect("split sizes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, c: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(n, c, h, w, v).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = t(1, 1, 3, 4, (0..12).map(|v| v as f64).collect());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let spec = ConvSpec { cin: 1, cout: 1, k: 3 };
        let y = conv2d_forward(&x, spec, &k, &[0.0], Execution::Sequential).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn ones_kernel_window_sum() {
        let x = t(1, 1, 5, 5, vec![1.0; 25]);
        let spec = ConvSpec { cin: 1, cout: 1, k: 3 };
        let y = conv2d_forward(&x, spec, &[1.0; 9], &[0.0], Execution::Sequential).unwrap();
        assert_eq!(y.data[2 * 5 + 2], 9.0);
        assert_eq!(y.data[0], 4.0);
        assert_eq!(y.data[2], 6.0);
    }

    #[test]
    fn conv_matches_direct_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for k in [1usize, 2, 3] {
            let spec = ConvSpec { cin: 2, cout: 3, k };
            let x = t(2, 2, 5, 4, (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let wts: Vec<f64> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3];
            let y = conv2d_forward(&x, spec, &wts, &b, Execution::Sequential).unwrap();
            let pb = (k - 1) / 2;
            for n in 0..2 {
                for co in 0..3 {
                    for r in 0..5 {
                        for c in 0..4 {
                            let mut s = b[co];
                            for ci in 0..2 {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (sy, sx) = (r as isize + ky as isize - pb as isize, c as isize + kx as isize - pb as isize);
                                        if sy < 0 || sx < 0 || sy >= 5 || sx >= 4 {
                                            continue;
                                        }
                                        s += wts[((co * 2 + ci) * k + ky) * k + kx]
                                            * x.data[((n * 2 + ci) * 5 + sy as usize) * 4 + sx as usize];
                                    }
                                }
                            }
                            let got = y.data[((n * 3 + co) * 5 + r) * 4 + c];
                            assert!((got - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = t(1, 2, 3, 3, vec![0.0; 18]);
        let spec = ConvSpec { cin: 1, cout: 1, k: 3 };
        assert!(conv2d_forward(&x, spec, &[0.0; 9], &[0.0], Execution::Sequential).is_err());
    }

    #[test]
    fn bn_two_values() {
        let x = t(2, 1, 1, 1, vec![2.0, 4.0]);
        let (y, _) = batch_norm_train(&x, &[1.0], &[0.0], 0.0).unwrap();
        assert_eq!(y.data, vec![-1.0, 1.0]);
        assert!(batch_norm_train(&t(1, 1, 1, 2, vec![1.0, 2.0]), &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn bn_standardized_input_is_identity() {
        let x = t(2, 1, 1, 2, vec![-1.0, 1.0, -1.0, 1.0]);
        let (y, _) = batch_norm_train(&x, &[1.0], &[0.0], 1e-5).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn activations() {
        let x = t(1, 1, 1, 3, vec![-3.0, 2.0, 0.0]);
        assert_eq!(relu(&x).data, vec![0.0, 2.0, 0.0]);
        assert_eq!(sigmoid(&x).data[2], 0.5);
        assert!(sigmoid_scalar(-800.0f64).is_finite());
        assert_eq!(sigmoid_scalar(800.0f64), 1.0);
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let x = t(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data, vec![4.0]);
        let dx = maxpool2_backward(x.shape(), &arg, &t(1, 1, 1, 1, vec![1.0]));
        assert_eq!(dx.data, vec![0.0, 0.0, 0.0, 1.0]);
        assert!(maxpool2(&t(1, 1, 3, 2, vec![0.0; 6])).is_err());
    }

    #[test]
    fn upsample_and_concat() {
        let x = t(1, 1, 1, 2, vec![1.0, 2.0]);
        let y = upsample2(&x);
        assert_eq!(y.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(upsample2_backward(&y).data, vec![4.0, 8.0]);

        let a = t(2, 1, 1, 1, vec![1.0, 2.0]);
        let b = t(2, 2, 1, 1, vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let (da, db) = split_channels(&c, 1);
        assert_eq!((da, db), (a, b));
    }
}
