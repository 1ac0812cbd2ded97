//! Elementwise, reduction, layout and matrix-product ops.

use std::sync::Arc;

use super::{arg_err, numel, shape_err, strides_of, Real, Result, Tensor};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output position with the matching offsets into both inputs.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // odometer over the outer axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * idx[d];
            base_b -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Real> Tensor<T> {
    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.0.data)
    }

    fn binary(&self, other: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let out_shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| shape_err(name, format!("{:?} vs {:?}", self.shape(), other.shape())))?;
        let a = self.data_arc();
        let b = other.data_arc();
        let same = self.shape() == other.shape();
        let apply = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data: Vec<T> = if same {
            a.iter().zip(b.iter()).map(|(&x, &y)| apply(x, y)).collect()
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            let mut out = vec![T::zero(); numel(&out_shape)];
            for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| out[o] = apply(a[ia], b[ib]));
            out
        };

        let (a_shape, b_shape, o_shape) = (self.shape().to_vec(), other.shape().to_vec(), out_shape.clone());
        let (need_a, need_b) = (self.is_tracked(), other.is_tracked());
        Ok(Tensor::from_op(out_shape, data, &[self, other], move |g, _| {
            let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
            let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
            let sa = broadcast_strides(&a_shape, &o_shape);
            let sb = broadcast_strides(&b_shape, &o_shape);
            for_each_pair(&o_shape, &sa, &sb, |o, ia, ib| {
                let go = g[o];
                let (da, db) = match op {
                    BinOp::Add => (go, go),
                    BinOp::Sub => (go, -go),
                    BinOp::Mul => (go * b[ib], go * a[ia]),
                    BinOp::Div => {
                        let inv = T::one() / b[ib];
                        (go * inv, -go * a[ia] * inv * inv)
                    }
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Div)
    }

    /// Elementwise op with a caller-supplied derivative `df(x, y)`.
    pub fn map_unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let x = self.data_arc();
        let data: Vec<T> = x.iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g, y| {
            vec![Some(g.iter().zip(x.iter()).zip(y).map(|((&g, &x), &y)| g * df(x, y)).collect())]
        })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.map_unary(|v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.map_unary(|v| v * s, move |_, _| s)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map_unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map_unary(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn square(&self) -> Tensor<T> {
        self.map_unary(|v| v * v, |x, _| x + x)
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&self) -> Tensor<T> {
        let n = self.numel();
        let total = self.data().iter().copied().sum::<T>();
        Tensor::from_op(vec![], vec![total], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().mul_scalar(T::one() / T::from_f64(n as f64))
    }

    /// Sum along one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(arg_err("sum_axis", format!("axis {axis} for rank {}", self.ndim())));
        }
        let shape = self.shape();
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Tensor::from_op(out_shape, out, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Sums over several axes (kept as size-1 dims).
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let mut t = self.clone();
        for &a in axes {
            t = t.sum_axis(a, true)?;
        }
        Ok(t)
    }

    /// General axis permutation; `dims[i]` is the input axis placed at output axis `i`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if dims.len() != rank || dims.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(arg_err("permute", format!("{dims:?} for rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = dims.iter().map(|&d| in_shape[d]).collect();
        let data = permute_data(self.data(), &in_shape, dims);
        let mut inverse = vec![0; rank];
        for (i, &d) in dims.iter().enumerate() {
            inverse[d] = i;
        }
        let o_shape = out_shape.clone();
        Ok(Tensor::from_op(out_shape, data, &[self], move |g, _| {
            vec![Some(permute_data(g, &o_shape, &inverse))]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut dims: Vec<usize> = (0..self.ndim()).collect();
        if a >= dims.len() || b >= dims.len() {
            return Err(arg_err("transpose", format!("axes ({a},{b}) for rank {}", self.ndim())));
        }
        dims.swap(a, b);
        self.permute(&dims)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || start + len > self.dim(axis) {
            return Err(arg_err(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, self.shape()),
            ));
        }
        let shape = self.shape();
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(out_shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = tensors.first().ok_or_else(|| arg_err("concat", "no inputs"))?;
        let rank = first.ndim();
        if axis >= rank {
            return Err(arg_err("concat", format!("axis {axis} for rank {rank}")));
        }
        for t in tensors {
            let ok = t.ndim() == rank && (0..rank).all(|d| d == axis || t.dim(d) == first.dim(d));
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?}", first.shape(), t.shape())));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let sizes: Vec<usize> = tensors.iter().map(|t| t.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &n) in tensors.iter().zip(&sizes) {
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let refs: Vec<&Tensor<T>> = tensors.iter().collect();
        let tracked: Vec<bool> = tensors.iter().map(|t| t.is_tracked()).collect();
        Ok(Tensor::from_op(out_shape, out, &refs, move |g, _| {
            let mut grads: Vec<Option<Vec<T>>> =
                sizes.iter().zip(&tracked).map(|(&n, &tr)| tr.then(|| Vec::with_capacity(outer * n * inner))).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &n) in grads.iter_mut().zip(&sizes) {
                    if let Some(gi) = gi {
                        gi.extend_from_slice(&g[pos..pos + n * inner]);
                    }
                    pos += n * inner;
                }
            }
            grads
        }))
    }

    /// Zero-pads every axis by `(before, after)`.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Tensor<T>> {
        if pads.len() != self.ndim() {
            return Err(arg_err("pad", format!("{} pad pairs for rank {}", pads.len(), self.ndim())));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(self.clone());
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = in_shape.iter().zip(pads).map(|(&d, &(a, b))| d + a + b).collect();
        let out_strides = strides_of(&out_shape);
        let base: usize = pads.iter().zip(&out_strides).map(|(&(a, _), &s)| a * s).sum();
        let mut out = vec![T::zero(); numel(&out_shape)];
        let x = self.data();
        let in_strides = strides_of(&in_shape);
        for_each_pair(&in_shape, &in_strides, &out_strides, |i, _, o| out[base + o] = x[i]);
        Ok(Tensor::from_op(out_shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); numel(&in_shape)];
            for_each_pair(&in_shape, &in_strides, &out_strides, |i, _, o| gx[i] = g[base + o]);
            vec![Some(gx)]
        }))
    }

    /// Batched product `[*, M, K] x [*, K, N]`; the right side may also be a shared `[K, N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.bmm(other, false)
    }

    /// Batched product with the right side transposed: `[*, M, K] x [*, N, K]^T`.
    pub fn matmul_t(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.bmm(other, true)
    }

    fn bmm(&self, other: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(shape_err(op, format!("{:?} x {:?}", self.shape(), other.shape())));
        }
        let (m, k) = (self.dim(self.ndim() - 2), self.dim(self.ndim() - 1));
        let (kb, n) = if trans_b {
            (other.dim(other.ndim() - 1), other.dim(other.ndim() - 2))
        } else {
            (other.dim(other.ndim() - 2), other.dim(other.ndim() - 1))
        };
        let batch_shape = &self.shape()[..self.ndim() - 2];
        let shared_b = other.ndim() == 2;
        if kb != k || (!shared_b && other.shape()[..other.ndim() - 2] != *batch_shape) {
            return Err(shape_err(op, format!("{:?} x {:?}", self.shape(), other.shape())));
        }
        let batch = numel(batch_shape);
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([m, n]);
        let a = self.data_arc();
        let b = other.data_arc();
        let mut out = vec![T::zero(); batch * m * n];
        if shared_b && !trans_b {
            gemm(batch * m, k, n, &a, false, &b, false, &mut out, false);
        } else {
            for i in 0..batch {
                let bi = if shared_b { &b[..] } else { &b[i * k * n..(i + 1) * k * n] };
                gemm(m, k, n, &a[i * m * k..(i + 1) * m * k], false, bi, trans_b, &mut out[i * m * n..(i + 1) * m * n], false);
            }
        }
        let (need_a, need_b) = (self.is_tracked(), other.is_tracked());
        Ok(Tensor::from_op(out_shape, out, &[self, other], move |g, _| {
            let ga = need_a.then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                if shared_b && !trans_b {
                    // dA = dC B^T
                    gemm(batch * m, n, k, g, false, &b, true, &mut ga, false);
                } else {
                    for i in 0..batch {
                        let bi = if shared_b { &b[..] } else { &b[i * k * n..(i + 1) * k * n] };
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        // trans_b: B stored [n,k], dA = dC B ; else B stored [k,n], dA = dC B^T
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * m * k..(i + 1) * m * k], false);
                    }
                }
                ga
            });
            let gb = need_b.then(|| {
                let mut gb = vec![T::zero(); b.len()];
                if shared_b && !trans_b {
                    // dB = A^T dC over the merged batch
                    gemm(k, batch * m, n, &a, true, g, false, &mut gb, false);
                } else {
                    for i in 0..batch {
                        let ai = &a[i * m * k..(i + 1) * m * k];
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let (dst, acc) = if shared_b { (&mut gb[..], i > 0) } else { (&mut gb[i * k * n..(i + 1) * k * n], false) };
                        if trans_b {
                            // dB [n,k] = dC^T A
                            gemm(n, m, k, gi, true, ai, false, dst, acc);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, acc);
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }
}

/// `c (+)= op(a) op(b)` with `op(a)` of size m x k and `op(b)` of size k x n.
/// `a_t` means `a` is stored k x m; `b_t` means `b` is stored n x k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every access of the strided views.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

pub(crate) fn permute_data<T: Real>(x: &[T], shape: &[usize], dims: &[usize]) -> Vec<T> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let zeros = vec![0usize; out_shape.len()];
    let mut out = vec![T::zero(); x.len()];
    for_each_pair(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = x[i]);
    out
}
