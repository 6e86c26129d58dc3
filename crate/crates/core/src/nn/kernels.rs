//! Raw forward/backward kernels over NCHW buffers.

use crate::tensor::Tensor;

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Run `f` compiled for AVX2/FMA when the CPU has it.
#[inline(always)]
pub(crate) fn with_simd<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        #[target_feature(enable = "avx2,fma")]
        unsafe fn run<R>(f: impl FnOnce() -> R) -> R {
            f()
        }
        // SAFETY: the required target features were detected at runtime.
        return unsafe { run(f) };
    }
    f()
}

const LANES: usize = 16;

/// `(Σ f(a, b), Σ g(a, b))` with f32 lane partials and an f64 total.
#[inline(always)]
fn sum2(
    a: &[f32],
    b: &[f32],
    f: impl Fn(f32, f32) -> f32,
    g: impl Fn(f32, f32) -> f32,
) -> (f64, f64) {
    let mut lf = [0.0f32; LANES];
    let mut lg = [0.0f32; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (ca, cb) in ac.zip(bc) {
        for j in 0..LANES {
            lf[j] += f(ca[j], cb[j]);
            lg[j] += g(ca[j], cb[j]);
        }
    }
    let mut sf: f64 = lf.iter().map(|&v| f64::from(v)).sum();
    let mut sg: f64 = lg.iter().map(|&v| f64::from(v)).sum();
    for (&x, &y) in ar.iter().zip(br) {
        sf += f64::from(f(x, y));
        sg += f64::from(g(x, y));
    }
    (sf, sg)
}

/// Returns the output and per-(item, group) `(mean, rstd)`.
pub(crate) fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> (Tensor, Vec<(f32, f32)>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let cpg = c / groups;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = Vec::with_capacity(n * groups);
    with_simd(|| {
        for i in 0..n {
            let src = x.item(i);
            let dst = out.item_mut(i);
            for g in 0..groups {
                let vals = &src[g * cpg * hw..(g + 1) * cpg * hw];
                let m = vals.len() as f64;
                let (sum, _) = sum2(vals, vals, |v, _| v, |_, _| 0.0);
                let mean64 = sum / m;
                let shift = mean64 as f32;
                let (dev, dev2) = sum2(
                    vals,
                    vals,
                    |v, _| v - shift,
                    |v, _| (v - shift) * (v - shift),
                );
                // Shifted two-moment variance; `dev` only corrects rounding in `shift`.
                let var = (dev2 / m - (dev / m) * (dev / m)).max(0.0);
                let rstd = (1.0 / (var + GROUP_NORM_EPS).sqrt()) as f32;
                let mean = (mean64 + dev / m) as f32;
                stats.push((mean, rstd));
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let scale = rstd * gamma.data()[ch];
                    let offset = beta.data()[ch] - mean * scale;
                    let off = ch * hw;
                    for (d, &s) in dst[off..off + hw].iter_mut().zip(&src[off..off + hw]) {
                        *d = s * scale + offset;
                    }
                }
            }
        }
    });
    (out, stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &[(f32, f32)],
    groups: usize,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let cpg = c / groups;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let mut per_channel = vec![(0.0f64, 0.0f64); cpg];
    with_simd(|| {
        for i in 0..n {
            let src = x.item(i);
            let g_out = dout.item(i);
            for g in 0..groups {
                let (mean, rstd) = stats[i * groups + g];
                let mut sum_d = 0.0f64;
                let mut sum_dx = 0.0f64;
                for (cc, slot) in per_channel.iter_mut().enumerate() {
                    let ch = g * cpg + cc;
                    let off = ch * hw;
                    let (sdy, sdyx) = sum2(
                        &g_out[off..off + hw],
                        &src[off..off + hw],
                        |dy, _| dy,
                        |dy, v| dy * ((v - mean) * rstd),
                    );
                    *slot = (sdy, sdyx);
                    dgamma.data_mut()[ch] += sdyx as f32;
                    dbeta.data_mut()[ch] += sdy as f32;
                    let ga = f64::from(gamma.data()[ch]);
                    sum_d += ga * sdy;
                    sum_dx += ga * sdyx;
                }
                let m = (cpg * hw) as f64;
                let mean_d = (sum_d / m) as f32;
                let mean_dx = (sum_dx / m) as f32;
                let dst = dx.item_mut(i);
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let off = ch * hw;
                    let ga = gamma.data()[ch];
                    for ((d, &dy), &v) in dst[off..off + hw]
                        .iter_mut()
                        .zip(&g_out[off..off + hw])
                        .zip(&src[off..off + hw])
                    {
                        let xh = (v - mean) * rstd;
                        *d = rstd * (dy * ga - mean_d - xh * mean_dx);
                    }
                }
            }
        }
    });
    (dx, dgamma, dbeta)
}

/// `exp` by range reduction to `[-ln2/2, ln2/2]` and a degree-6 polynomial
/// (relative error under 3e-7). Branch-free, so loops over it vectorize.
#[inline(always)]
pub(crate) fn exp_approx(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let shifted = x * std::f32::consts::LOG2_E + ROUND;
    // The low mantissa bits of `shifted` hold round(x·log2 e) as an integer.
    let exponent = shifted
        .to_bits()
        .wrapping_sub(ROUND.to_bits())
        .wrapping_add(127)
        << 23;
    let n = shifted - ROUND;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(exponent)
}

/// Apply `f` to every element, compiled for AVX2/FMA when the CPU has it.
#[inline(always)]
pub(crate) fn map_inplace(data: &mut [f32], f: impl Fn(f32) -> f32) {
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        #[target_feature(enable = "avx2,fma")]
        unsafe fn run(data: &mut [f32], f: impl Fn(f32) -> f32) {
            for v in data {
                *v = f(*v);
            }
        }
        // SAFETY: the required target features were detected at runtime.
        unsafe { run(data, f) };
        return;
    }
    for v in data {
        *v = f(*v);
    }
}

/// `zip_inplace(a, b, f)` sets `a[i] = f(a[i], b[i])`, dispatched like [`map_inplace`].
#[inline(always)]
pub(crate) fn zip_inplace(a: &mut [f32], b: &[f32], f: impl Fn(f32, f32) -> f32) {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        #[target_feature(enable = "avx2,fma")]
        unsafe fn run(a: &mut [f32], b: &[f32], f: impl Fn(f32, f32) -> f32) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = f(*x, y);
            }
        }
        // SAFETY: the required target features were detected at runtime.
        unsafe { run(a, b, f) };
        return;
    }
    for (x, &y) in a.iter_mut().zip(b) {
        *x = f(*x, y);
    }
}

#[inline(always)]
pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + exp_approx(-v))
}

pub(crate) fn avg_pool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let a = s[2 * y * w + 2 * xx] + s[2 * y * w + 2 * xx + 1];
                let b = s[(2 * y + 1) * w + 2 * xx] + s[(2 * y + 1) * w + 2 * xx + 1];
                d[y * wo + xx] = 0.25 * (a + b);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dout: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = in_shape;
    let (ho, wo) = (dout.height(), dout.width());
    let mut dx = Tensor::zeros(in_shape);
    let src = dout.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        let s = &src[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * s[y * wo + xx];
                d[2 * y * w + 2 * xx] = g;
                d[2 * y * w + 2 * xx + 1] = g;
                d[(2 * y + 1) * w + 2 * xx] = g;
                d[(2 * y + 1) * w + 2 * xx + 1] = g;
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * 2, w * 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            let row = &s[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, v) in d[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *v = row[xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = in_shape;
    let wo = w * 2;
    let mut dx = Tensor::zeros(in_shape);
    let src = dout.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        let s = &src[p * 4 * h * w..(p + 1) * 4 * h * w];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                d[y * w + xx] = s[2 * y * wo + 2 * xx]
                    + s[2 * y * wo + 2 * xx + 1]
                    + s[(2 * y + 1) * wo + 2 * xx]
                    + s[(2 * y + 1) * wo + 2 * xx + 1];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_approx_matches_libm() {
        let mut worst = 0.0f64;
        for i in -86_999..=87_999 {
            let x = i as f32 * 1e-3;
            let want = f64::from(x).exp();
            let got = f64::from(exp_approx(x));
            worst = worst.max((got - want).abs() / want);
        }
        assert!(worst < 5e-7, "worst relative error {worst}");
        assert!(exp_approx(-1000.0) > 0.0);
        assert!(exp_approx(1000.0).is_finite());
    }
}
