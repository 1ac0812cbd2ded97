//! Neural-network ops: activations, normalization, attention, resampling.

use rand::Rng;

use super::{arg_err, numel, shape_err, Real, Result, Tensor};

/// sqrt(2/pi), the tanh-GELU input scale.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
/// Cubic coefficient of the tanh-GELU approximation.
pub const GELU_COEFF: f64 = 0.044715;
/// Additive surrogate for a minus-infinity attention mask entry.
pub const MASK_NEG: f64 = -1e9;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn gelu_value<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_COEFF);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_COEFF);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

impl<T: Real> Tensor<T> {
    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        self.map_unary(gelu_value, |x, _| gelu_derivative(x))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.softmax_scaled(axis, T::one())
    }

    /// `softmax(scale * x)` along `axis`, fused.
    pub fn softmax_scaled(&self, axis: usize, scale: T) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(arg_err("softmax", format!("axis {axis} for rank {}", self.ndim())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        let mut row = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = x[base] * scale;
                for k in 0..n {
                    row[k] = x[base + k * inner] * scale;
                    max = max.max(row[k]);
                }
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                for k in 0..n {
                    y[base + k * inner] = row[k] * inv;
                }
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), y, &[self], move |g, y| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: T = (0..n).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                    for k in 0..n {
                        let p = base + k * inner;
                        gx[p] = scale * y[p] * (g[p] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Log-softmax along `axis`, fused for stability.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(arg_err("log_softmax", format!("axis {axis} for rank {}", self.ndim())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|k| x[base + k * inner]).fold(x[base], |m, v| m.max(v));
                let lse = (0..n).map(|k| (x[base + k * inner] - max).exp()).sum::<T>().ln() + max;
                for k in 0..n {
                    y[base + k * inner] = x[base + k * inner] - lse;
                }
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), y, &[self], move |g, y| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let gsum: T = (0..n).map(|k| g[base + k * inner]).sum();
                    for k in 0..n {
                        let p = base + k * inner;
                        gx[p] = g[p] - y[p].exp() * gsum;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        self.layer_norm_axis(self.ndim().saturating_sub(1), gamma, beta, eps)
    }

    /// Layer normalization over `axis` (e.g. the channel axis of an NCHW map),
    /// with per-channel affine `gamma`, `beta` of length `shape[axis]`.
    pub fn layer_norm_axis(&self, axis: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(arg_err("layer_norm", format!("axis {axis} for rank {}", self.ndim())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if gamma.numel() != n || beta.numel() != n {
            return Err(shape_err(
                "layer_norm",
                format!("affine {:?}/{:?} for {n} channels", gamma.shape(), beta.shape()),
            ));
        }
        let x = self.data_arc();
        let gm = gamma.data_arc();
        let bt = beta.data();
        let eps = T::from_f64(eps);
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut mean = vec![T::zero(); inner];
        let mut var = vec![T::zero(); inner];
        for o in 0..outer {
            let block = o * n * inner;
            mean.iter_mut().for_each(|v| *v = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            for k in 0..n {
                let row = &x[block + k * inner..block + (k + 1) * inner];
                mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m *= inv_n);
            for k in 0..n {
                let row = &x[block + k * inner..block + (k + 1) * inner];
                var.iter_mut().zip(row).zip(&mean).for_each(|((s, &v), &m)| *s += (v - m) * (v - m));
            }
            for i in 0..inner {
                rstd[o * inner + i] = T::one() / (var[i] * inv_n + eps).sqrt();
            }
            for k in 0..n {
                for i in 0..inner {
                    let p = block + k * inner + i;
                    let h = (x[p] - mean[i]) * rstd[o * inner + i];
                    xhat[p] = h;
                    y[p] = h * gm[k] + bt[k];
                }
            }
        }
        let (tx, tg, tb) = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        Ok(Tensor::from_op(self.shape().to_vec(), y, &[self, gamma, beta], move |g, _| {
            let mut dgamma = tg.then(|| vec![T::zero(); n]);
            let mut dbeta = tb.then(|| vec![T::zero(); n]);
            let mut dx = tx.then(|| vec![T::zero(); xhat.len()]);
            let mut sum_d = vec![T::zero(); inner];
            let mut sum_dh = vec![T::zero(); inner];
            for o in 0..outer {
                let block = o * n * inner;
                sum_d.iter_mut().for_each(|v| *v = T::zero());
                sum_dh.iter_mut().for_each(|v| *v = T::zero());
                for k in 0..n {
                    for i in 0..inner {
                        let p = block + k * inner + i;
                        let d = g[p] * gm[k];
                        sum_d[i] += d;
                        sum_dh[i] += d * xhat[p];
                        if let Some(dg) = dgamma.as_mut() {
                            dg[k] += g[p] * xhat[p];
                        }
                        if let Some(db) = dbeta.as_mut() {
                            db[k] += g[p];
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    for k in 0..n {
                        for i in 0..inner {
                            let p = block + k * inner + i;
                            let d = g[p] * gm[k];
                            dx[p] = rstd[o * inner + i] * (d - inv_n * sum_d[i] - xhat[p] * inv_n * sum_dh[i]);
                        }
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        }))
    }

    /// `x W + b` along the last axis; `W` is `[Cin, Cout]`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if w.ndim() != 2 || self.ndim() == 0 || self.dim(self.ndim() - 1) != w.dim(0) {
            return Err(shape_err("linear", format!("{:?} x {:?}", self.shape(), w.shape())));
        }
        let y = if self.ndim() == 1 {
            self.reshape(&[1, w.dim(0)])?.matmul(w)?.reshape(&[w.dim(1)])?
        } else {
            self.matmul(w)?
        };
        match b {
            Some(b) if b.shape() != [w.dim(1)] => Err(shape_err("linear", format!("bias {:?}", b.shape()))),
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    /// Mean pooling with square `kernel` and equal stride over the last two axes.
    pub fn pool2d_mean(&self, kernel: usize) -> Result<Tensor<T>> {
        let r = self.ndim();
        if r < 2 || kernel == 0 || self.dim(r - 2) % kernel != 0 || self.dim(r - 1) % kernel != 0 {
            return Err(shape_err("pool2d_mean", format!("{:?} with kernel {kernel}", self.shape())));
        }
        let (h, w) = (self.dim(r - 2), self.dim(r - 1));
        let (oh, ow) = (h / kernel, w / kernel);
        let planes = numel(&self.shape()[..r - 2]);
        let scale = T::one() / T::from_f64((kernel * kernel) as f64);
        let x = self.data();
        let mut y = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..h {
                for j in 0..w {
                    y[p * oh * ow + (i / kernel) * ow + j / kernel] += x[p * h * w + i * w + j];
                }
            }
        }
        y.iter_mut().for_each(|v| *v *= scale);
        let mut shape = self.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(Tensor::from_op(shape, y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for i in 0..h {
                    for j in 0..w {
                        gx[p * h * w + i * w + j] = g[p * oh * ow + (i / kernel) * ow + j / kernel] * scale;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Bilinear resize of the last two axes, `align_corners = false`:
    /// source coordinate `max(0, (dst + 0.5) * in / out - 0.5)`, upper neighbour clamped to the edge.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let r = self.ndim();
        if r < 2 || out_h == 0 || out_w == 0 {
            return Err(shape_err("upsample_bilinear", format!("{:?} -> ({out_h},{out_w})", self.shape())));
        }
        let (h, w) = (self.dim(r - 2), self.dim(r - 1));
        if h == 0 || w == 0 {
            return Err(shape_err("upsample_bilinear", "empty spatial input"));
        }
        let rows = interp_table(h, out_h);
        let cols = interp_table(w, out_w);
        let planes = numel(&self.shape()[..r - 2]);
        let x = self.data();
        let mut y = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(1.0 - ly), T::from_f64(ly));
                for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                    let (wx0, wx1) = (T::from_f64(1.0 - lx), T::from_f64(lx));
                    dst[oy * out_w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(Tensor::from_op(shape, y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let gsrc = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                    let (wy0, wy1) = (T::from_f64(1.0 - ly), T::from_f64(ly));
                    for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                        let (wx0, wx1) = (T::from_f64(1.0 - lx), T::from_f64(lx));
                        let gv = gsrc[oy * out_w + ox];
                        dst[y0 * w + x0] += gv * wy0 * wx0;
                        dst[y0 * w + x1] += gv * wy0 * wx1;
                        dst[y1 * w + x0] += gv * wy1 * wx0;
                        dst[y1 * w + x1] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

fn interp_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Stochastic depth: zeroes whole samples (axis 0) of a residual branch with
/// probability `rate` and rescales survivors by `1 / (1 - rate)`. Identity at evaluation.
/// A rate of 1 drops every sample.
pub fn drop_path<T: Real, R: Rng + ?Sized>(x: &Tensor<T>, rate: f64, training: bool, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(arg_err("drop_path", format!("rate {rate}")));
    }
    if !training || rate == 0.0 || x.ndim() == 0 {
        return Ok(x.clone());
    }
    let batch = x.dim(0);
    let keep_scale = if rate < 1.0 { 1.0 / (1.0 - rate) } else { 0.0 };
    let mask: Vec<T> = (0..batch)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { T::from_f64(keep_scale) })
        .collect();
    let mut shape = vec![1; x.ndim()];
    shape[0] = batch;
    x.mul(&Tensor::from_vec(mask, &shape))
}

/// Projection weights of one multi-head attention layer; matrices are `[C, C]`.
#[derive(Debug, Clone)]
pub struct MhaWeights<T: Real> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Real> Tensor<T> {
    /// Multi-head attention over `[B, T, C]` tokens. Each head computes
    /// `softmax((Q K^T + M) / sqrt(d)) V` with `d = C / heads`; `mask` is additive,
    /// either `[T, T]` or `[B|1, T|1, T]` (use [`MASK_NEG`] for suppressed pairs).
    pub fn masked_mha(&self, weights: &MhaWeights<T>, heads: usize, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if self.ndim() != 3 {
            return Err(shape_err("masked_mha", format!("expected [B,T,C], got {:?}", self.shape())));
        }
        let (b, t, c) = (self.dim(0), self.dim(1), self.dim(2));
        if heads == 0 || c % heads != 0 {
            return Err(arg_err("masked_mha", format!("{c} channels not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            let ok = match m.ndim() {
                2 => m.shape() == [t, t],
                3 => (m.dim(0) == b || m.dim(0) == 1) && (m.dim(1) == t || m.dim(1) == 1) && m.dim(2) == t,
                _ => false,
            };
            if !ok {
                return Err(shape_err("masked_mha", format!("mask {:?} for {t} tokens", m.shape())));
            }
        }
        let d = c / heads;
        let q = self.linear(&weights.wq, Some(&weights.bq))?;
        let k = self.linear(&weights.wk, Some(&weights.bk))?;
        let v = self.linear(&weights.wv, Some(&weights.bv))?;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (q.narrow(2, h * d, d)?, k.narrow(2, h * d, d)?, v.narrow(2, h * d, d)?)
            };
            let mut scores = qh.matmul_t(&kh)?;
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let attn = scores.softmax_scaled(2, scale)?;
            outs.push(attn.matmul(&vh)?);
        }
        let merged = if heads == 1 { outs.pop().expect("one head") } else { Tensor::concat(&outs, 2)? };
        merged.linear(&weights.wo, Some(&weights.bo))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_fixed_points() {
        let x = Tensor::<f64>::from_vec(vec![0.0, 10.0, -10.0], &[3]);
        let y = x.gelu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-9);
        assert!(y.data()[2].abs() < 1e-9);
    }

    #[test]
    fn softmax_symmetric_and_normalized() {
        let x = Tensor::<f32>::from_vec(vec![0.0, 0.0], &[2]);
        assert_eq!(x.softmax(0).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.softmax(1).unwrap();
        for r in 0..2 {
            let s: f32 = y.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let y0 = x.softmax(0).unwrap();
        assert!((y0.data()[0] + y0.data()[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn masked_entries_vanish() {
        let x = Tensor::<f32>::from_vec(vec![0.3, MASK_NEG as f32, 0.1], &[3]);
        let y = x.softmax(0).unwrap();
        assert!(y.data()[1] <= 1e-30);
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::<f64>::ones(&[4]);
        let b = Tensor::<f64>::zeros(&[4]);
        let c = Tensor::<f64>::full(&[2, 4], 3.0).layer_norm(&g, &b, 1e-5).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-12));
        let g = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let y = Tensor::<f64>::from_vec(vec![1.0, -1.0], &[2]).layer_norm(&g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_channel_axis_matches_last_axis() {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7) % 11) as f64 * 0.3).collect();
        let x = Tensor::<f64>::from_vec(data, &[2, 3, 4]);
        let g = Tensor::from_vec(vec![1.0, 2.0, 0.5], &[3]);
        let b = Tensor::from_vec(vec![0.0, 1.0, -1.0], &[3]);
        let a = x.layer_norm_axis(1, &g, &b, 1e-5).unwrap();
        let via_last = x
            .permute(&[0, 2, 1])
            .unwrap()
            .layer_norm(&g, &b, 1e-5)
            .unwrap()
            .permute(&[0, 2, 1])
            .unwrap();
        for (p, q) in a.data().iter().zip(via_last.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_identity_and_sum() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]);
        let w = Tensor::from_vec(vec![1.0, 1.0], &[2, 1]);
        let b = Tensor::from_vec(vec![0.0], &[1]);
        assert_eq!(x.linear(&w, Some(&b)).unwrap().data(), &[3.0]);
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x2 = Tensor::<f32>::from_vec(vec![5.0, -2.0, 1.5, 0.25], &[2, 2]);
        assert_eq!(x2.linear(&eye, Some(&Tensor::zeros(&[2]))).unwrap().data(), x2.data());
        assert!(x2.linear(&w.reshape(&[1, 2]).unwrap(), None).is_err());
    }

    #[test]
    fn constant_resampling_is_constant() {
        let x = Tensor::<f32>::full(&[1, 2, 4, 6], 1.5);
        assert!(x.pool2d_mean(2).unwrap().data().iter().all(|&v| v == 1.5));
        let up = x.upsample_bilinear(7, 13).unwrap();
        assert_eq!(up.shape(), &[1, 2, 7, 13]);
        assert!(up.data().iter().all(|&v| (v - 1.5).abs() < 1e-6));
    }

    #[test]
    fn bilinear_two_by_two_hand_values() {
        // align_corners=false: destination centres at src 0, .25, .75, 1 (clamped)
        let x = Tensor::<f64>::from_vec(vec![0.0, 1.0, 2.0, 3.0], &[2, 2]);
        let y = x.upsample_bilinear(4, 4).unwrap();
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, e) in y.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn drop_path_rate_zero_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_vec((0..8).map(|v| v as f32).collect(), &[4, 2]);
        let y = drop_path(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        let y = drop_path(&x, 0.7, false, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        let y = drop_path(&x, 1.0, true, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = drop_path(&x, 0.5, true, &mut rng).unwrap();
        for (row_y, row_x) in y.data().chunks(2).zip(x.data().chunks(2)) {
            assert!(row_y.iter().all(|&v| v == 0.0) || row_y.iter().zip(row_x).all(|(a, b)| *a == 2.0 * b));
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let c = 4;
        let eye: Vec<f64> = (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let rnd = |s: u64| -> Vec<f64> { (0..c * c).map(|i| (((i as u64 * 31 + s) % 17) as f64 - 8.0) / 10.0).collect() };
        let zeros = Tensor::<f64>::zeros(&[c]);
        let w = MhaWeights {
            wq: Tensor::from_vec(rnd(1), &[c, c]),
            bq: zeros.clone(),
            wk: Tensor::from_vec(rnd(2), &[c, c]),
            bk: zeros.clone(),
            wv: Tensor::from_vec(rnd(3), &[c, c]),
            bv: zeros.clone(),
            wo: Tensor::from_vec(eye, &[c, c]),
            bo: zeros,
        };
        let x = Tensor::<f64>::from_vec(vec![0.5, -1.0, 2.0, 0.1], &[1, 1, c]);
        let y = x.masked_mha(&w, 2, None).unwrap();
        let v = x.linear(&w.wv, None).unwrap();
        for (a, b) in y.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(x.masked_mha(&w, 3, None).is_err());
    }
}
