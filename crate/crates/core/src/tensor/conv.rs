//! 2-D cross-correlation over NCHW tensors.
//!
//! Dense and grouped convolutions lower to GEMM over an im2col buffer that is
//! built a band of output rows at a time, so memory stays bounded on
//! full-resolution range images. Depthwise convolutions use a direct kernel.

use super::{shape_err, Real, Result, Tensor};

/// Elements of scratch im2col buffer allowed per band.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dOptions {
    pub fn padded(padding: usize) -> Self {
        Self { padding, ..Self::default() }
    }

    pub fn dilated(dilation: usize) -> Self {
        Self { padding: dilation, dilation, ..Self::default() }
    }

    pub fn depthwise(channels: usize, padding: usize) -> Self {
        Self { padding, groups: channels, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn kdim(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout && self.groups > 1
    }
    fn band_rows(&self) -> usize {
        (COL_BUDGET / (self.kdim() * self.wo).max(1)).clamp(1, self.ho)
    }
    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k * self.dil) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// `c = a b (+ c)` over strided views. Bounds are checked before the raw call.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents asserted above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

fn im2col<T: Real>(g: &Geometry, x: &[T], row0: usize, rows: usize, col: &mut [T]) {
    let p = rows * g.wo;
    for ci in 0..g.cin_g() {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for r in 0..rows {
                    let oy = row0 + r;
                    let line = &mut dst[r * g.wo..(r + 1) * g.wo];
                    match g.src(oy, ky, g.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = g.src(ox, kx, g.w).map_or(T::zero(), |ix| src_row[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, col: &[T], row0: usize, rows: usize, dx: &mut [T]) {
    let p = rows * g.wo;
    for ci in 0..g.cin_g() {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for r in 0..rows {
                    let Some(iy) = g.src(row0 + r, ky, g.h) else { continue };
                    let line = &src[r * g.wo..(r + 1) * g.wo];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn forward_dense<T: Real>(g: &Geometry, x: &[T], wt: &[T], out: &mut [T]) {
    let (cin_g, cout_g, kdim, plane_out) = (g.cin_g(), g.cout_g(), g.kdim(), g.ho * g.wo);
    let band = g.band_rows();
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); kdim * band * g.wo] };
    for b in 0..g.batch {
        for gi in 0..g.groups {
            let xg = &x[(b * g.cin + gi * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
            let wg = &wt[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            let og = &mut out[(b * g.cout + gi * cout_g) * plane_out..][..cout_g * plane_out];
            if g.pointwise() {
                gemm_strided(cout_g, kdim, plane_out, wg, (kdim, 1), xg, (plane_out, 1), og, (plane_out, 1), false);
                continue;
            }
            let mut row0 = 0;
            while row0 < g.ho {
                let rows = band.min(g.ho - row0);
                let p = rows * g.wo;
                im2col(g, xg, row0, rows, &mut col);
                gemm_strided(
                    cout_g,
                    kdim,
                    p,
                    wg,
                    (kdim, 1),
                    &col,
                    (p, 1),
                    &mut og[row0 * g.wo..],
                    (plane_out, 1),
                    false,
                );
                row0 += rows;
            }
        }
    }
}

fn backward_dense<T: Real>(
    g: &Geometry,
    x: &[T],
    wt: &[T],
    grad: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (cin_g, cout_g, kdim, plane_out) = (g.cin_g(), g.cout_g(), g.kdim(), g.ho * g.wo);
    let band = g.band_rows();
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { kdim * band * g.wo }];
    let mut dcol = vec![T::zero(); if g.pointwise() || dx.is_none() { 0 } else { kdim * band * g.wo }];
    for b in 0..g.batch {
        for gi in 0..g.groups {
            let x_off = (b * g.cin + gi * cin_g) * g.h * g.w;
            let xg = &x[x_off..][..cin_g * g.h * g.w];
            let wg = &wt[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            let gg = &grad[(b * g.cout + gi * cout_g) * plane_out..][..cout_g * plane_out];
            if g.pointwise() {
                if let Some(dw) = dw.as_deref_mut() {
                    // dW [cout_g, cin_g] += dY [cout_g, P] X^T
                    let dwg = &mut dw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                    gemm_strided(cout_g, plane_out, kdim, gg, (plane_out, 1), xg, (1, plane_out), dwg, (kdim, 1), true);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let dxg = &mut dx[x_off..][..cin_g * g.h * g.w];
                    gemm_strided(kdim, cout_g, plane_out, wg, (1, kdim), gg, (plane_out, 1), dxg, (plane_out, 1), true);
                }
                continue;
            }
            let mut row0 = 0;
            while row0 < g.ho {
                let rows = band.min(g.ho - row0);
                let p = rows * g.wo;
                let gband = &gg[row0 * g.wo..];
                if let Some(dw) = dw.as_deref_mut() {
                    im2col(g, xg, row0, rows, &mut col);
                    let dwg = &mut dw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                    gemm_strided(cout_g, p, kdim, gband, (plane_out, 1), &col, (1, p), dwg, (kdim, 1), true);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    gemm_strided(kdim, cout_g, p, wg, (1, kdim), gband, (plane_out, 1), &mut dcol, (p, 1), false);
                    col2im(g, &dcol, row0, rows, &mut dx[x_off..][..cin_g * g.h * g.w]);
                }
                row0 += rows;
            }
        }
    }
}

fn forward_depthwise<T: Real>(g: &Geometry, x: &[T], wt: &[T], out: &mut [T]) {
    let kk = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let k = &wt[c * kk..(c + 1) * kk];
            let o = &mut out[(b * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            for oy in 0..g.ho {
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let wv = k[ky * g.kw + kx];
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                o[oy * g.wo + ox] += wv * plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_depthwise<T: Real>(
    g: &Geometry,
    x: &[T],
    wt: &[T],
    grad: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let kk = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base = (b * g.cin + c) * g.h * g.w;
            let plane = &x[base..][..g.h * g.w];
            let k = &wt[c * kk..(c + 1) * kk];
            let gp = &grad[(b * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            for oy in 0..g.ho {
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let mut acc = T::zero();
                        let wv = k[ky * g.kw + kx];
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                let gv = gp[oy * g.wo + ox];
                                acc += gv * plane[iy * g.w + ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[base + iy * g.w + ix] += gv * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[c * kk + ky * g.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin/groups, kh, kw]` weights.
    /// Output spatial size is `floor((H + 2p - d(kh-1) - 1) / stride) + 1`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, opts: Conv2dOptions) -> Result<Tensor<T>> {
        if self.ndim() != 4 || weight.ndim() != 4 {
            return Err(shape_err("conv2d", format!("input {:?}, weight {:?}", self.shape(), weight.shape())));
        }
        let (batch, cin, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (cout, wcin, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        let Conv2dOptions { stride, padding, dilation, groups } = opts;
        if stride == 0 || dilation == 0 || groups == 0 || cin % groups != 0 || cout % groups != 0 || wcin != cin / groups {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}, groups {groups}", self.shape(), weight.shape()),
            ));
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || w + 2 * padding < span_w {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} does not fit padded {h}x{w}")));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let geo = Geometry {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (h + 2 * padding - span_h) / stride + 1,
            wo: (w + 2 * padding - span_w) / stride + 1,
            stride,
            pad: padding,
            dil: dilation,
            groups,
        };
        let x = self.data_arc();
        let wt = weight.data_arc();
        let mut out = vec![T::zero(); batch * cout * geo.ho * geo.wo];
        if geo.depthwise() {
            forward_depthwise(&geo, &x, &wt, &mut out);
        } else {
            forward_dense(&geo, &x, &wt, &mut out);
        }
        let plane_out = geo.ho * geo.wo;
        if let Some(b) = bias {
            for (i, chunk) in out.chunks_mut(plane_out).enumerate() {
                let bv = b.data()[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = vec![batch, cout, geo.ho, geo.wo];
        let (tx, tw) = (self.is_tracked(), weight.is_tracked());
        let tb = bias.is_some_and(|b| b.is_tracked());
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(Tensor::from_op(shape, out, &inputs, move |g, _| {
            let mut dx = tx.then(|| vec![T::zero(); x.len()]);
            let mut dw = tw.then(|| vec![T::zero(); wt.len()]);
            if geo.depthwise() {
                backward_depthwise(&geo, &x, &wt, g, dx.as_deref_mut(), dw.as_deref_mut());
            } else {
                backward_dense(&geo, &x, &wt, g, dx.as_deref_mut(), dw.as_deref_mut());
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(tb.then(|| {
                    let mut db = vec![T::zero(); geo.cout];
                    for (i, chunk) in g.chunks(plane_out).enumerate() {
                        db[i % geo.cout] += chunk.iter().copied().sum::<T>();
                    }
                    db
                }));
            }
            grads
        }))
    }
}
