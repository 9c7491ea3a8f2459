//! Dense kernels with hand-written backward passes. Matrices are row-major;
//! weights are stored `[in, out]` so a linear layer is `x · W + b`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the model (f32 for training, f64 for
/// gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `c = alpha * a·b + beta * c` on raw strided buffers.
    ///
    /// # Safety
    /// All strided accesses must stay inside the allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(rs: usize) -> Self {
        Self { offset: 0, rs, cs: 1 }
    }

    pub fn at(offset: usize, rs: usize) -> Self {
        Self { offset, rs, cs: 1 }
    }

    /// Transposed view of a row-major block.
    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, bounds-checked.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len().max(1) || k == 0, "gemm: a out of bounds");
    assert!(bv.last(k, n) < b.len().max(1) || k == 0, "gemm: b out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: every accessed element was bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// out[n×cout] = inp[n×cin]·w[cin×cout] + bias
pub fn linear<T: Real>(out: &mut [T], inp: &[T], w: &[T], bias: Option<&[T]>, n: usize, cin: usize, cout: usize) {
    gemm(
        n,
        cin,
        cout,
        T::one(),
        inp,
        View::rows(cin),
        w,
        View::rows(cout),
        T::zero(),
        out,
        View::rows(cout),
    );
    if let Some(b) = bias {
        for row in out[..n * cout].chunks_exact_mut(cout) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
    }
}

/// Accumulates gradients of [`linear`]: dinp += dout·wᵀ, dw += inpᵀ·dout, dbias += Σ dout.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    dinp: Option<&mut [T]>,
    dw: &mut [T],
    dbias: Option<&mut [T]>,
    dout: &[T],
    inp: &[T],
    w: &[T],
    n: usize,
    cin: usize,
    cout: usize,
) {
    if let Some(dinp) = dinp {
        gemm(
            n,
            cout,
            cin,
            T::one(),
            dout,
            View::rows(cout),
            w,
            View::rows(cout).t(),
            T::one(),
            dinp,
            View::rows(cin),
        );
    }
    gemm(
        cin,
        n,
        cout,
        T::one(),
        inp,
        View::rows(cin).t(),
        dout,
        View::rows(cout),
        T::one(),
        dw,
        View::rows(cout),
    );
    if let Some(db) = dbias {
        for row in dout[..n * cout].chunks_exact(cout) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

pub fn layernorm<T: Real>(out: &mut [T], mean: &mut [T], rstd: &mut [T], inp: &[T], g: &[T], b: &[T], c: usize) {
    let eps = T::lit(LN_EPS);
    let cf = T::from_usize(c).unwrap();
    for (r, (x, o)) in inp.chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
        let m = x.iter().copied().sum::<T>() / cf;
        let v = x.iter().map(|&xi| (xi - m) * (xi - m)).sum::<T>() / cf;
        let s = (v + eps).sqrt().recip();
        for i in 0..c {
            o[i] = (x[i] - m) * s * g[i] + b[i];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    dinp: &mut [T],
    dg: &mut [T],
    db: &mut [T],
    dout: &[T],
    inp: &[T],
    g: &[T],
    mean: &[T],
    rstd: &[T],
    c: usize,
) {
    let cf = T::from_usize(c).unwrap();
    for (r, ((x, d), dx)) in inp
        .chunks_exact(c)
        .zip(dout.chunks_exact(c))
        .zip(dinp.chunks_exact_mut(c))
        .enumerate()
    {
        let (m, s) = (mean[r], rstd[r]);
        let mut dnorm_mean = T::zero();
        let mut dnorm_norm_mean = T::zero();
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dn = g[i] * d[i];
            dnorm_mean += dn;
            dnorm_norm_mean += dn * norm;
        }
        dnorm_mean /= cf;
        dnorm_norm_mean /= cf;
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dn = g[i] * d[i];
            db[i] += d[i];
            dg[i] += norm * d[i];
            dx[i] += (dn - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

fn gelu_consts<T: Real>() -> (T, T, T) {
    (
        T::lit((2.0 / std::f64::consts::PI).sqrt()),
        T::lit(0.044715),
        T::lit(0.5),
    )
}

/// tanh through a single exponential; faster than the libm routine.
#[inline]
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(out: &mut [T], inp: &[T]) {
    let (s, c, half) = gelu_consts::<T>();
    for (o, &x) in out.iter_mut().zip(inp) {
        let u = s * (x + c * x * x * x);
        *o = half * x * (T::one() + fast_tanh(u));
    }
}

pub fn gelu_backward<T: Real>(dinp: &mut [T], inp: &[T], dout: &[T]) {
    let (s, c, half) = gelu_consts::<T>();
    let three = T::lit(3.0);
    for ((dx, &x), &d) in dinp.iter_mut().zip(inp).zip(dout) {
        let u = s * (x + c * x * x * x);
        let t = fast_tanh(u);
        let sech2 = T::one() - t * t;
        let local = half * (T::one() + t) + x * half * sech2 * s * (T::one() + three * c * x * x);
        *dx += local * d;
    }
}

/// Causal multi-head attention over a fused `qkv` buffer `[b·t, 3c]`.
/// Writes probabilities `att[b, h, t, t]` (zero above the diagonal) and the
/// head outputs `out[b·t, c]`.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(out: &mut [T], att: &mut [T], qkv: &[T], b: usize, t: usize, c: usize, nh: usize) {
    let hs = c / nh;
    let c3 = 3 * c;
    let scale = T::lit(1.0 / (hs as f64).sqrt());
    for bi in 0..b {
        for h in 0..nh {
            let base = bi * t * c3 + h * hs;
            let a_off = (bi * nh + h) * t * t;
            let att_bh = &mut att[a_off..a_off + t * t];
            gemm(
                t,
                hs,
                t,
                scale,
                qkv,
                View::at(base, c3),
                qkv,
                View::at(base + c, c3).t(),
                T::zero(),
                att_bh,
                View::rows(t),
            );
            for i in 0..t {
                let row = &mut att_bh[i * t..(i + 1) * t];
                let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row[..=i].iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = sum.recip();
                for v in row[..=i].iter_mut() {
                    *v *= inv;
                }
                for v in row[i + 1..].iter_mut() {
                    *v = T::zero();
                }
            }
            gemm(
                t,
                t,
                hs,
                T::one(),
                att_bh,
                View::rows(t),
                qkv,
                View::at(base + 2 * c, c3),
                T::zero(),
                out,
                View::at(bi * t * c + h * hs, c),
            );
        }
    }
}

/// Accumulates into `dqkv` the gradient of [`attention`] given `dout`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    dqkv: &mut [T],
    dout: &[T],
    qkv: &[T],
    att: &[T],
    b: usize,
    t: usize,
    c: usize,
    nh: usize,
) {
    let hs = c / nh;
    let c3 = 3 * c;
    let scale = T::lit(1.0 / (hs as f64).sqrt());
    let mut datt = vec![T::zero(); t * t];
    for bi in 0..b {
        for h in 0..nh {
            let base = bi * t * c3 + h * hs;
            let o_off = bi * t * c + h * hs;
            let a_off = (bi * nh + h) * t * t;
            let att_bh = &att[a_off..a_off + t * t];
            // datt = dout_h · V_hᵀ
            gemm(
                t,
                hs,
                t,
                T::one(),
                dout,
                View::at(o_off, c),
                qkv,
                View::at(base + 2 * c, c3).t(),
                T::zero(),
                &mut datt,
                View::rows(t),
            );
            // dV_h += attᵀ · dout_h
            gemm(
                t,
                t,
                hs,
                T::one(),
                att_bh,
                View::rows(t).t(),
                dout,
                View::at(o_off, c),
                T::one(),
                dqkv,
                View::at(base + 2 * c, c3),
            );
            // softmax backward, in place: datt becomes d(scores)·scale
            for i in 0..t {
                let a = &att_bh[i * t..i * t + i + 1];
                let d = &mut datt[i * t..(i + 1) * t];
                let dot: T = a.iter().zip(d.iter()).map(|(&x, &y)| x * y).sum();
                for j in 0..=i {
                    d[j] = a[j] * (d[j] - dot) * scale;
                }
                for v in d[i + 1..].iter_mut() {
                    *v = T::zero();
                }
            }
            // dQ_h += dscores · K_h
            gemm(
                t,
                t,
                hs,
                T::one(),
                &datt,
                View::rows(t),
                qkv,
                View::at(base + c, c3),
                T::one(),
                dqkv,
                View::at(base, c3),
            );
            // dK_h += dscoresᵀ · Q_h
            gemm(
                t,
                t,
                hs,
                T::one(),
                &datt,
                View::rows(t).t(),
                qkv,
                View::at(base, c3),
                T::one(),
                dqkv,
                View::at(base + c, c3),
            );
        }
    }
}

/// Numerically stable softmax in f64.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|x| x.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|x| (x.to_f64().unwrap() - max).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn linear_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias = vec![0.5, -1.0, 2.0];
        let mut out = vec![0.0; m * n];
        linear(&mut out, &a, &w, Some(&bias), m, k, n);
        let want = naive_matmul(&a, &w, m, k, n);
        for i in 0..m * n {
            assert!((out[i] - want[i] - bias[i % n]).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let (b, t, c, nh) = (2, 6, 8, 2);
        let qkv: Vec<f64> = (0..b * t * 3 * c).map(|i| ((i * 7919) % 97) as f64 / 50.0 - 1.0).collect();
        let mut out = vec![0.0; b * t * c];
        let mut att = vec![0.0; b * nh * t * t];
        attention(&mut out, &mut att, &qkv, b, t, c, nh);
        for row in att.chunks_exact(t).enumerate() {
            let (r, vals) = row;
            let i = r % t;
            let s: f64 = vals.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(vals[i + 1..].iter().all(|&v| v == 0.0));
            assert!(vals.iter().all(|&v| v >= 0.0));
        }
    }
}
