//! Fused CPU kernels with hand-written backward passes for the hot layers:
//! affine maps, layer norm, GELU and multi-head attention.

use std::sync::Mutex;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Shape, Storage, Tensor, WithDType};

use crate::error::{Error, Result};

type CResult<T> = candle_core::Result<T>;

pub trait Elem: WithDType + Copy + PartialOrd + Default + std::fmt::Debug {
    const ZERO: Self;
    const ONE: Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn erf(self) -> Self;
    fn c(x: f64) -> Self;
    /// `C = alpha A B + beta C` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );
}

macro_rules! elem {
    ($t:ty, $gemm:path, $erf:path, $exp:path) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn exp(self) -> Self { $exp(self) }
            fn sqrt(self) -> Self { <$t>::sqrt(self) }
            fn erf(self) -> Self { $erf(self) }
            fn c(x: f64) -> Self { x as $t }
            unsafe fn gemm_raw(
                m: usize, k: usize, n: usize, alpha: Self,
                a: *const Self, rsa: isize, csa: isize,
                b: *const Self, rsb: isize, csb: isize,
                beta: Self, c: *mut Self, rsc: isize, csc: isize,
            ) {
                unsafe { $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
            }
        }
    };
}

elem!(f32, matrixmultiply::sgemm, erf_f32, exp_f32);
elem!(f64, matrixmultiply::dgemm, libm::erf, f64::exp);

/// Branch-free single-precision exp: range reduction by ln 2 and a
/// degree-6 polynomial, within 2 ulp of `f32::exp` above the subnormal range.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const SHIFT: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.max(-87.0).min(88.0);
    // adding the shift rounds to nearest and leaves n in the low mantissa bits
    let s = x * std::f32::consts::LOG2_E + SHIFT;
    let n = s - SHIFT;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4_f32;
    for c in [1.398_199_9e-3, 8.333_452e-3, 4.166_579_6e-2, 0.166_666_65, 0.5] {
        p = p * r + c;
    }
    let y = 1.0 + r + r * r * p;
    let bits = s.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(127).wrapping_shl(23);
    y * f32::from_bits(bits)
}

/// Rational minimax erf for single precision, accurate to a few ulp on
/// [-4, 4] and saturated outside.
fn erf_f32(x: f32) -> f32 {
    let x = x.max(-4.0).min(4.0);
    let x2 = x * x;
    let mut p = -2.726_142_3e-10_f32;
    for c in [2.770_681_4e-8, -2.101_024e-6, -5.692_506_4e-5, -7.349_906_3e-4, -2.954_600_2e-3, -1.609_603_3e-2] {
        p = p * x2 + c;
    }
    let mut q = -1.456_607_2e-5_f32;
    for c in [-2.133_740_6e-4, -1.682_827e-3, -7.373_329_3e-3, -1.426_473_9e-2] {
        q = q * x2 + c;
    }
    x * p / q
}

/// A strided matrix view into a slice.
#[derive(Clone, Copy)]
struct View {
    off: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn rm(off: usize, rs: usize) -> Self {
        Self { off, rs, cs: 1 }
    }

    fn t(self) -> Self {
        Self { off: self.off, rs: self.cs, cs: self.rs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + rows.saturating_sub(1) * self.rs + cols.saturating_sub(1) * self.cs
    }
}

/// `c[cv] = alpha a[av] (m x k) b[bv] (k x n) + beta c[cv]`, bounds-checked.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Elem>(
    m: usize, k: usize, n: usize, alpha: T,
    a: &[T], av: View, b: &[T], bv: View,
    beta: T, c: &mut [T], cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(k == 0 || bv.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: every addressed element lies inside its slice (checked above)
    // and `c` is a unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m, k, n, alpha,
            a.as_ptr().add(av.off), av.rs as isize, av.cs as isize,
            b.as_ptr().add(bv.off), bv.rs as isize, bv.cs as isize,
            beta, c.as_mut_ptr().add(cv.off), cv.rs as isize, cv.cs as isize,
        )
    }
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op needs contiguous input".into()))?;
    Ok(&s.as_slice::<T>()?[a..b])
}

/// Runs `f` on borrowed contiguous host slices of `ts`.
fn with_host<T: WithDType, R>(ts: &[&Tensor], f: impl FnOnce(&[&[T]]) -> CResult<R>) -> CResult<R> {
    let owned = ts.iter().map(|t| t.contiguous()).collect::<CResult<Vec<_>>>()?;
    let guards: Vec<_> = owned.iter().map(|t| t.storage_and_layout()).collect();
    let mut slices = Vec::with_capacity(guards.len());
    for (s, l) in &guards {
        match &**s {
            Storage::Cpu(c) => slices.push(slice::<T>(c, l)?),
            _ => return Err(candle_core::Error::Msg("fused ops run on the CPU only".into())),
        }
    }
    f(&slices)
}

fn tensor<T: WithDType>(v: Vec<T>, shape: &[usize]) -> CResult<Tensor> {
    Tensor::from_vec(v, shape, &Device::Cpu)
}

fn storage<T: WithDType>(v: Vec<T>) -> CpuStorage {
    T::to_cpu_storage_owned(v)
}

fn unsupported(op: &str, dtype: DType) -> candle_core::Error {
    candle_core::Error::Msg(format!("{op}: unsupported dtype {dtype:?}"))
}

// ---------------------------------------------------------------- linear

struct LinearOp;

fn linear_fwd<T: Elem>(x: &[T], w: &[T], b: &[T], rows: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, k, n, T::ONE, x, View::rm(0, k), w, View::rm(0, n), T::ONE, &mut y, View::rm(0, n));
    y
}

fn linear_bwd<T: Elem>(x: &Tensor, w: &Tensor, gy: &Tensor) -> CResult<(Tensor, Tensor, Tensor)> {
    let (k, n) = w.dims2()?;
    let rows = x.elem_count() / k;
    let xdims = x.dims().to_vec();
    with_host::<T, _>(&[x, w, gy], |h| {
        let (x, w, gy) = (h[0], h[1], h[2]);
        let mut gx = vec![T::ZERO; rows * k];
        gemm(rows, n, k, T::ONE, gy, View::rm(0, n), w, View::rm(0, n).t(), T::ZERO, &mut gx, View::rm(0, k));
        let mut gw = vec![T::ZERO; k * n];
        gemm(k, rows, n, T::ONE, x, View::rm(0, k).t(), gy, View::rm(0, n), T::ZERO, &mut gw, View::rm(0, n));
        let mut gb = vec![T::ZERO; n];
        for row in gy.chunks_exact(n) {
            for (acc, g) in gb.iter_mut().zip(row) {
                *acc += *g;
            }
        }
        Ok((tensor(gx, &xdims)?, tensor(gw, &[k, n])?, tensor(gb, &[n])?))
    })
}

impl CustomOp3 for LinearOp {
    fn name(&self) -> &'static str {
        "fused-linear"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage, l1: &Layout,
        s2: &CpuStorage, l2: &Layout,
        s3: &CpuStorage, l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (k, n) = l2.shape().dims2()?;
        let rows = l1.shape().elem_count() / k;
        let out = match s1.dtype() {
            DType::F32 => storage(linear_fwd(slice::<f32>(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, rows, k, n)),
            DType::F64 => storage(linear_fwd(slice::<f64>(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, rows, k, n)),
            d => return Err(unsupported(self.name(), d)),
        };
        let mut dims = l1.dims().to_vec();
        *dims.last_mut().expect("checked rank") = n;
        Ok((out, Shape::from(dims)))
    }

    fn bwd(
        &self, x: &Tensor, w: &Tensor, _b: &Tensor, _res: &Tensor, gy: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gx, gw, gb) = match x.dtype() {
            DType::F32 => linear_bwd::<f32>(x, w, gy)?,
            DType::F64 => linear_bwd::<f64>(x, w, gy)?,
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// `x w + b` over the last dimension of `x: [.., K]`, with `w: [K, N]`, `b: [N]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let k = x.dims().last().copied().unwrap_or(0);
    let (kw, n) = w.dims2()?;
    if k == 0 || k != kw || b.dims() != [n] {
        return Err(Error::Shape(format!(
            "linear: x {:?}, w {:?}, b {:?}",
            x.dims(),
            w.dims(),
            b.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op3(&w.contiguous()?, &b.contiguous()?, LinearOp)?)
}

// ---------------------------------------------------------------- layer norm

struct LayerNormOp {
    eps: f64,
}

fn ln_stats<T: Elem>(row: &[T], eps: f64) -> (T, T) {
    let d = row.len() as f64;
    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d;
    let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d;
    (T::c(mean), T::c(1.0 / (var + eps).sqrt()))
}

fn ln_fwd<T: Elem>(x: &[T], g: &[T], b: &[T], eps: f64) -> Vec<T> {
    let d = g.len();
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let (mean, rstd) = ln_stats(row, eps);
        for j in 0..d {
            y.push((row[j] - mean) * rstd * g[j] + b[j]);
        }
    }
    y
}

fn ln_bwd<T: Elem>(x: &Tensor, g: &Tensor, gy: &Tensor, eps: f64) -> CResult<(Tensor, Tensor, Tensor)> {
    let shape = x.dims().to_vec();
    with_host::<T, _>(&[x, g, gy], |h| ln_bwd_host(h[0], h[1], h[2], eps, &shape))
}

fn ln_bwd_host<T: Elem>(x: &[T], g: &[T], gy: &[T], eps: f64, shape: &[usize]) -> CResult<(Tensor, Tensor, Tensor)> {
    let d = g.len();
    let mut gx = Vec::with_capacity(x.len());
    let mut gg = vec![0f64; d];
    let mut gb = vec![0f64; d];
    let mut xhat = vec![0f64; d];
    let mut gxhat = vec![0f64; d];
    for (row, grow) in x.chunks_exact(d).zip(gy.chunks_exact(d)) {
        let (mean, rstd) = ln_stats(row, eps);
        let (mean, rstd) = (mean.to_f64(), rstd.to_f64());
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..d {
            xhat[j] = (row[j].to_f64() - mean) * rstd;
            let gyj = grow[j].to_f64();
            gxhat[j] = gyj * g[j].to_f64();
            gg[j] += gyj * xhat[j];
            gb[j] += gyj;
            m1 += gxhat[j];
            m2 += gxhat[j] * xhat[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            gx.push(T::c(rstd * (gxhat[j] - m1 - xhat[j] * m2)));
        }
    }
    let gg = gg.into_iter().map(T::c).collect();
    let gb = gb.into_iter().map(T::c).collect();
    Ok((tensor(gx, shape)?, tensor(gg, &[d])?, tensor(gb, &[d])?))
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage, l1: &Layout,
        s2: &CpuStorage, l2: &Layout,
        s3: &CpuStorage, l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let out = match s1.dtype() {
            DType::F32 => storage(ln_fwd(slice::<f32>(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, self.eps)),
            DType::F64 => storage(ln_fwd(slice::<f64>(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, self.eps)),
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self, x: &Tensor, g: &Tensor, _b: &Tensor, _res: &Tensor, gy: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gx, gg, gb) = match x.dtype() {
            DType::F32 => ln_bwd::<f32>(x, g, gy, self.eps)?,
            DType::F64 => ln_bwd::<f64>(x, g, gy, self.eps)?,
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((Some(gx), Some(gg), Some(gb)))
    }
}

/// Layer norm over the last dimension with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.dims().last().copied().unwrap_or(0);
    if d == 0 || gamma.dims() != [d] || beta.dims() != [d] {
        return Err(Error::Shape(format!("layer norm over {:?} with gamma {:?}", x.dims(), gamma.dims())));
    }
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })?)
}

// ---------------------------------------------------------------- gelu

struct GeluOp;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_fwd<T: Elem>(x: &[T]) -> Vec<T> {
    let half = T::c(0.5);
    let r2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
    x.iter().map(|&v| half * v * (T::ONE + (v * r2).erf())).collect()
}

fn gelu_bwd<T: Elem>(x: &Tensor, gy: &Tensor) -> CResult<Tensor> {
    let shape = x.dims().to_vec();
    with_host::<T, _>(&[x, gy], |h| gelu_bwd_host(h[0], h[1], &shape))
}

fn gelu_bwd_host<T: Elem>(x: &[T], gy: &[T], shape: &[usize]) -> CResult<Tensor> {
    let half = T::c(0.5);
    let r2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
    let c = T::c(FRAC_1_SQRT_2PI);
    let gx = x
        .iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let cdf = half * (T::ONE + (v * r2).erf());
            let pdf = c * (T::c(-0.5) * v * v).exp();
            g * (cdf + v * pdf)
        })
        .collect();
    tensor(gx, shape)
}

impl CustomOp1 for GeluOp {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match s.dtype() {
            DType::F32 => storage(gelu_fwd(slice::<f32>(s, l)?)),
            DType::F64 => storage(gelu_fwd(slice::<f64>(s, l)?)),
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, gy: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(match x.dtype() {
            DType::F32 => gelu_bwd::<f32>(x, gy)?,
            DType::F64 => gelu_bwd::<f64>(x, gy)?,
            d => return Err(unsupported(self.name(), d)),
        }))
    }
}

/// `x Phi(x)` with the exact Gaussian CDF.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GeluOp)?)
}

// ---------------------------------------------------------------- attention

#[derive(Debug, Clone)]
struct AttnDims {
    b: usize,
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
}

impl AttnDims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.dh() as f64).sqrt()
    }
}

enum Saved {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

struct AttentionOp {
    heads: usize,
    /// Valid key count per batch item; keys past it get zero weight.
    key_lengths: Option<Vec<usize>>,
    probs: Mutex<Option<Saved>>,
}

impl AttentionOp {
    fn len(&self, b: usize, nk: usize) -> usize {
        self.key_lengths.as_ref().map_or(nk, |l| l[b])
    }
}

const LANES: usize = 8;

/// Maximum of a non-empty row, in independent lanes so it vectorizes.
fn lane_max<T: Elem>(v: &[T]) -> T {
    let mut acc = [v[0]; LANES];
    let chunks = v.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    rest.iter().chain(&acc).fold(v[0], |m, &x| if x > m { x } else { m })
}

/// `sum(a * b)`, or `sum(a)` without `b`, accumulated in lanes.
fn lane_dot<T: Elem>(a: &[T], b: Option<&[T]>) -> T {
    let mut acc = [T::ZERO; LANES];
    let n = a.len() / LANES * LANES;
    match b {
        Some(b) => {
            for (x, y) in a[..n].chunks_exact(LANES).zip(b[..n].chunks_exact(LANES)) {
                for i in 0..LANES {
                    acc[i] += x[i] * y[i];
                }
            }
        }
        None => {
            for x in a[..n].chunks_exact(LANES) {
                for i in 0..LANES {
                    acc[i] += x[i];
                }
            }
        }
    }
    let mut s = acc.iter().fold(T::ZERO, |s, &x| s + x);
    for j in n..a.len() {
        s += a[j] * b.map_or(T::ONE, |b| b[j]);
    }
    s
}

/// Post-softmax weights `[B, H, Nq, Nk]`, zero past each key length.
fn attn_probs<T: Elem>(q: &[T], k: &[T], dims: &AttnDims, lens: &dyn Fn(usize) -> usize) -> Vec<T> {
    let AttnDims { b, nq, nk, d, heads } = *dims;
    let dh = dims.dh();
    let mut p = vec![T::ZERO; b * heads * nq * nk];
    for bi in 0..b {
        let len = lens(bi);
        for h in 0..heads {
            let po = (bi * heads + h) * nq * nk;
            gemm(
                nq, dh, len, T::c(dims.scale()),
                q, View::rm(bi * nq * d + h * dh, d),
                k, View::rm(bi * nk * d + h * dh, d).t(),
                T::ZERO, &mut p, View::rm(po, nk),
            );
            for row in p[po..po + nq * nk].chunks_exact_mut(nk) {
                let row = &mut row[..len];
                let max = lane_max(row);
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                }
                let inv = T::ONE / lane_dot(row, None);
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
        }
    }
    p
}

fn attn_context<T: Elem>(p: &[T], v: &[T], dims: &AttnDims, lens: &dyn Fn(usize) -> usize) -> Vec<T> {
    let AttnDims { b, nq, nk, d, heads } = *dims;
    let dh = dims.dh();
    let mut out = vec![T::ZERO; b * nq * d];
    for bi in 0..b {
        let len = lens(bi);
        for h in 0..heads {
            gemm(
                nq, len, dh, T::ONE,
                p, View::rm((bi * heads + h) * nq * nk, nk),
                v, View::rm(bi * nk * d + h * dh, d),
                T::ZERO, &mut out, View::rm(bi * nq * d + h * dh, d),
            );
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn attn_bwd<T: Elem>(
    q: &[T], k: &[T], v: &[T], p: &[T], go: &[T], dims: &AttnDims, lens: &dyn Fn(usize) -> usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { b, nq, nk, d, heads } = *dims;
    let dh = dims.dh();
    let scale = T::c(dims.scale());
    let mut gq = vec![T::ZERO; b * nq * d];
    let mut gk = vec![T::ZERO; b * nk * d];
    let mut gv = vec![T::ZERO; b * nk * d];
    let mut gs = vec![T::ZERO; nq * nk];
    for bi in 0..b {
        let len = lens(bi);
        for h in 0..heads {
            let po = (bi * heads + h) * nq * nk;
            let qo = bi * nq * d + h * dh;
            let ko = bi * nk * d + h * dh;
            // dP = dO V^T
            gemm(nq, dh, len, T::ONE, go, View::rm(qo, d), v, View::rm(ko, d).t(), T::ZERO, &mut gs, View::rm(0, nk));
            // dV = P^T dO
            gemm(len, nq, dh, T::ONE, p, View::rm(po, nk).t(), go, View::rm(qo, d), T::ZERO, &mut gv, View::rm(ko, d));
            // dS = P (dP - rowsum(dP P))
            for i in 0..nq {
                let prow = &p[po + i * nk..po + i * nk + len];
                let grow = &mut gs[i * nk..i * nk + len];
                let dot = lane_dot(prow, Some(grow));
                for (g, &pv) in grow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot);
                }
            }
            // dQ = scale dS K, dK = scale dS^T Q
            gemm(nq, len, dh, scale, &gs, View::rm(0, nk), k, View::rm(ko, d), T::ZERO, &mut gq, View::rm(qo, d));
            gemm(len, nq, dh, scale, &gs, View::rm(0, nk).t(), q, View::rm(qo, d), T::ZERO, &mut gk, View::rm(ko, d));
        }
    }
    (gq, gk, gv)
}

fn attn_dims(q: &[usize], k: &[usize], heads: usize) -> CResult<AttnDims> {
    match (q, k) {
        ([b, nq, d], [bk, nk, dk]) if b == bk && d == dk && heads > 0 && d % heads == 0 => Ok(AttnDims {
            b: *b,
            nq: *nq,
            nk: *nk,
            d: *d,
            heads,
        }),
        _ => Err(candle_core::Error::Msg(format!("attention shapes {q:?} / {k:?} with {heads} heads"))),
    }
}

impl CustomOp3 for AttentionOp {
    fn name(&self) -> &'static str {
        "fused-attention"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage, l1: &Layout,
        s2: &CpuStorage, l2: &Layout,
        s3: &CpuStorage, l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = attn_dims(l1.dims(), l2.dims(), self.heads)?;
        let lens = |b: usize| self.len(b, dims.nk);
        let (out, saved) = match s1.dtype() {
            DType::F32 => {
                let p = attn_probs(slice::<f32>(s1, l1)?, slice(s2, l2)?, &dims, &lens);
                (storage(attn_context(&p, slice(s3, l3)?, &dims, &lens)), Saved::F32(p))
            }
            DType::F64 => {
                let p = attn_probs(slice::<f64>(s1, l1)?, slice(s2, l2)?, &dims, &lens);
                (storage(attn_context(&p, slice(s3, l3)?, &dims, &lens)), Saved::F64(p))
            }
            d => return Err(unsupported(self.name(), d)),
        };
        *self.probs.lock().expect("attention cache") = Some(saved);
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self, q: &Tensor, k: &Tensor, v: &Tensor, _res: &Tensor, go: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = attn_dims(q.dims(), k.dims(), self.heads)?;
        let lens = |b: usize| self.len(b, dims.nk);
        let saved = self.probs.lock().expect("attention cache").take();
        macro_rules! run {
            ($t:ty, $variant:path) => {{
                with_host::<$t, _>(&[q, k, v, go], |h| {
                    let p = match saved {
                        Some($variant(p)) => p,
                        _ => attn_probs(h[0], h[1], &dims, &lens),
                    };
                    let (gq, gk, gv) = attn_bwd(h[0], h[1], h[2], &p, h[3], &dims, &lens);
                    Ok((tensor(gq, q.dims())?, tensor(gk, k.dims())?, tensor(gv, v.dims())?))
                })?
            }};
        }
        let (gq, gk, gv) = match q.dtype() {
            DType::F32 => run!(f32, Saved::F32),
            DType::F64 => run!(f64, Saved::F64),
            d => return Err(unsupported(self.name(), d)),
        };
        Ok((Some(gq), Some(gk), Some(gv)))
    }
}

fn check_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, key_lengths: Option<&[usize]>) -> Result<()> {
    let (b, _, d) = q.dims3()?;
    let (bk, nk, dk) = k.dims3()?;
    if v.dims() != k.dims() || bk != b || dk != d {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
    }
    if nk == 0 {
        return Err(Error::Shape("attention over an empty memory".into()));
    }
    if let Some(lens) = key_lengths {
        if lens.len() != b || lens.iter().any(|&l| l == 0 || l > nk) {
            return Err(Error::Shape(format!("key lengths {lens:?} for {b} items of {nk} keys")));
        }
    }
    Ok(())
}

/// Multi-head scaled dot-product attention over projected `q: [B, Nq, d]`,
/// `k, v: [B, Nk, d]`; returns the merged per-head contexts `[B, Nq, d]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, key_lengths: Option<&[usize]>) -> Result<Tensor> {
    check_attention(q, k, v, heads, key_lengths)?;
    let op = AttentionOp {
        heads,
        key_lengths: key_lengths.map(<[usize]>::to_vec),
        probs: Mutex::new(None),
    };
    Ok(q.contiguous()?.apply_op3(&k.contiguous()?, &v.contiguous()?, op)?)
}

/// The post-softmax weights `[B, H, Nq, Nk]` of [`attention`], without gradient.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize, key_lengths: Option<&[usize]>) -> Result<Tensor> {
    check_attention(q, k, k, heads, key_lengths)?;
    let dims = attn_dims(q.dims(), k.dims(), heads).map_err(Error::from)?;
    let lens = |b: usize| key_lengths.map_or(dims.nk, |l| l[b]);
    let shape = [dims.b, heads, dims.nq, dims.nk];
    let t = match q.dtype() {
        DType::F32 => with_host::<f32, _>(&[q, k], |h| tensor(attn_probs(h[0], h[1], &dims, &lens), &shape))?,
        DType::F64 => with_host::<f64, _>(&[q, k], |h| tensor(attn_probs(h[0], h[1], &dims, &lens), &shape))?,
        d => return Err(Error::Shape(format!("attention weights in {d:?}"))),
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Var, D};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng as _, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.dims(), b.dims());
        a.sub(b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Compares outputs and the gradients of `<out, probe>` for both routes.
    fn compare(
        inputs: &[Tensor],
        fused: impl Fn(&[Tensor]) -> Tensor,
        reference: impl Fn(&[Tensor]) -> Tensor,
        tol: f64,
    ) {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(&t.copy().unwrap()).unwrap()).collect();
        let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let a = fused(&ts);
        let b = reference(&ts);
        assert!(max_diff(&a, &b) < tol, "forward differs by {}", max_diff(&a, &b));
        let probe = randn(a.dims(), 99);
        let ga = (&a * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (&b * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for (i, t) in ts.iter().enumerate() {
            let (x, y) = (ga.get(t).unwrap(), gb.get(t).unwrap());
            assert!(max_diff(x, y) < tol, "input {i} gradient differs by {}", max_diff(x, y));
        }
    }

    fn ref_layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
        let mean = x.mean_keepdim(D::Minus1).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let n = c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
        n.broadcast_mul(g).unwrap().broadcast_add(b).unwrap()
    }

    fn ref_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, lens: Option<&[usize]>) -> (Tensor, Tensor) {
        let (b, nq, d) = q.dims3().unwrap();
        let nk = k.dim(1).unwrap();
        let split = |x: &Tensor, n: usize| {
            x.reshape((b, n, heads, d / heads)).unwrap().transpose(1, 2).unwrap().contiguous().unwrap()
        };
        let (qh, kh, vh) = (split(q, nq), split(k, nk), split(v, nk));
        let mut s = (qh.matmul(&kh.t().unwrap()).unwrap() / ((d / heads) as f64).sqrt()).unwrap();
        if let Some(lens) = lens {
            let mask: Vec<f64> = lens
                .iter()
                .flat_map(|&l| (0..nk).map(move |j| if j < l { 0.0 } else { f64::NEG_INFINITY }))
                .collect();
            let mask = Tensor::from_vec(mask, (b, 1, 1, nk), &Device::Cpu).unwrap();
            s = s.broadcast_add(&mask).unwrap();
        }
        let max = s.max_keepdim(D::Minus1).unwrap().detach();
        let e = s.broadcast_sub(&max).unwrap().exp().unwrap();
        let p = e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap();
        let ctx = p.matmul(&vh).unwrap().transpose(1, 2).unwrap().contiguous().unwrap().reshape((b, nq, d)).unwrap();
        (ctx, p)
    }

    #[test]
    fn linear_matches_matmul() {
        let inputs = [randn(&[7, 5], 1), randn(&[5, 3], 2), randn(&[3], 3)];
        compare(
            &inputs,
            |t| linear(&t[0], &t[1], &t[2]).unwrap(),
            |t| t[0].matmul(&t[1]).unwrap().broadcast_add(&t[2]).unwrap(),
            1e-12,
        );
        let inputs = [randn(&[2, 3, 5], 4), randn(&[5, 4], 5), randn(&[4], 6)];
        compare(
            &inputs,
            |t| linear(&t[0], &t[1], &t[2]).unwrap(),
            |t| t[0].broadcast_matmul(&t[1]).unwrap().broadcast_add(&t[2]).unwrap(),
            1e-12,
        );
    }

    #[test]
    fn layer_norm_matches_composed() {
        let inputs = [randn(&[2, 4, 6], 4), randn(&[6], 5), randn(&[6], 6)];
        compare(
            &inputs,
            |t| layer_norm(&t[0], &t[1], &t[2], 1e-5).unwrap(),
            |t| ref_layer_norm(&t[0], &t[1], &t[2]),
            1e-10,
        );
    }

    #[test]
    fn gelu_matches_erf_gelu() {
        let inputs = [(randn(&[3, 11], 7) * 3.0).unwrap()];
        compare(
            &inputs,
            |t| gelu(&t[0]).unwrap(),
            |t| {
                let cdf = ((&t[0] * std::f64::consts::FRAC_1_SQRT_2).unwrap().erf().unwrap() + 1.0).unwrap();
                (&t[0] * 0.5).unwrap().mul(&cdf).unwrap()
            },
            1e-12,
        );
    }

    #[test]
    fn attention_matches_composed() {
        let inputs = [randn(&[3, 5, 8], 8), randn(&[3, 7, 8], 9), randn(&[3, 7, 8], 10)];
        compare(
            &inputs,
            |t| attention(&t[0], &t[1], &t[2], 2, None).unwrap(),
            |t| ref_attention(&t[0], &t[1], &t[2], 2, None).0,
            1e-12,
        );
        let lens = [7, 2, 4];
        compare(
            &inputs,
            |t| attention(&t[0], &t[1], &t[2], 2, Some(&lens)).unwrap(),
            |t| ref_attention(&t[0], &t[1], &t[2], 2, Some(&lens)).0,
            1e-12,
        );
        let w = attention_weights(&inputs[0], &inputs[1], 2, Some(&lens)).unwrap();
        let (_, p) = ref_attention(&inputs[0], &inputs[1], &inputs[2], 2, Some(&lens));
        assert!(max_diff(&w, &p) < 1e-12);
        // padded keys get exactly zero weight
        let row = w.get(1).unwrap().get(0).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        assert!(row[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn f32_route_agrees_with_f64() {
        let q = randn(&[2, 4, 8], 11);
        let k = randn(&[2, 6, 8], 12);
        let a = attention(&q, &k, &k, 4, Some(&[6, 3])).unwrap();
        let f = |t: &Tensor| t.to_dtype(DType::F32).unwrap();
        let b = attention(&f(&q), &f(&k), &f(&k), 4, Some(&[6, 3])).unwrap();
        assert!(max_diff(&a, &b.to_dtype(DType::F64).unwrap()) < 1e-5);
    }

    #[test]
    fn single_precision_exp_is_close_to_std() {
        let mut worst = 0f32;
        for i in -87_000..88_000 {
            let x = i as f32 * 1e-3 + 3.7e-4;
            let (a, b) = (exp_f32(x), x.exp());
            worst = worst.max((a - b).abs() / b);
        }
        assert!(worst < 4e-7, "{worst}");
        assert!(exp_f32(-1e4) < 1e-37 && exp_f32(0.0) == 1.0);
    }

    #[test]
    fn single_precision_erf_is_close_to_libm() {
        let mut worst = 0f64;
        for i in -6000..=6000 {
            let x = i as f32 / 1000.0;
            worst = worst.max((erf_f32(x) as f64 - libm::erf(x as f64)).abs());
        }
        assert!(worst < 5e-7, "{worst}");
    }

    #[test]
    fn rejects_bad_lengths_and_heads() {
        let q = randn(&[2, 4, 8], 13);
        assert!(attention(&q, &q, &q, 3, None).is_err());
        assert!(attention(&q, &q, &q, 2, Some(&[0, 4])).is_err());
        assert!(attention(&q, &q, &q, 2, Some(&[5, 4])).is_err());
        assert!(attention(&q, &q, &q, 2, Some(&[4])).is_err());
        assert!(linear(&q.reshape((8, 8)).unwrap(), &randn(&[7, 2], 1), &randn(&[2], 1)).is_err());
    }
}
