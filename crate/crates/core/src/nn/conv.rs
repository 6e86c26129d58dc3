//! Direct stride-1 convolution with zero padding `k/2`, for `k` in {1, 3}.
//!
//! Output channels are processed in blocks of four so each loaded input
//! vector feeds four accumulators. On x86-64 an AVX-512 path (rows of 16, 32
//! or 64 columns) or an AVX2/FMA path is chosen at runtime; remaining columns
//! and other targets use the scalar path.

use std::borrow::Cow;

use crate::tensor::Tensor;

const BLOCK: usize = 4;

fn round_up(c: usize) -> usize {
    c.div_ceil(BLOCK) * BLOCK
}

/// Zero-pad every plane of `[n, c, h, w]` by `p` on each side.
fn pad_planes(data: &[f32], planes: usize, h: usize, w: usize, p: usize) -> Cow<'_, [f32]> {
    if p == 0 {
        return Cow::Borrowed(data);
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; planes * hp * wp];
    for (src, dst) in data.chunks_exact(h * w).zip(out.chunks_exact_mut(hp * wp)) {
        for y in 0..h {
            dst[(y + p) * wp + p..(y + p) * wp + p + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Cow::Owned(out)
}

/// Zero-extend the channel axis of `[n, c, hw]` to `cp` channels.
fn pad_channels(data: &[f32], n: usize, c: usize, cp: usize, hw: usize) -> Cow<'_, [f32]> {
    if c == cp {
        return Cow::Borrowed(data);
    }
    let mut out = vec![0.0; n * cp * hw];
    for (src, dst) in data.chunks_exact(c * hw).zip(out.chunks_exact_mut(cp * hw)) {
        dst[..c * hw].copy_from_slice(src);
    }
    Cow::Owned(out)
}

/// Repack `w[co][ci][t]` as `[co / 4][ci][t][co % 4]`, zero-filling `co >= cout`.
/// With `flip`, the source is read as `w[ci][co][kk - 1 - t]` (the adjoint kernel).
fn pack_weights(w: &[f32], cout: usize, cin: usize, kk: usize, flip: bool) -> Vec<f32> {
    let mut out = vec![0.0; round_up(cout) * cin * kk];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..kk {
                let v = if flip {
                    w[(ci * cout + co) * kk + kk - 1 - t]
                } else {
                    w[(co * cin + ci) * kk + t]
                };
                out[(((co / BLOCK) * cin + ci) * kk + t) * BLOCK + co % BLOCK] = v;
            }
        }
    }
    out
}

/// One item: `out[co][y][x] += Σ w[co][ci][ky][kx] · src[ci][y + ky][x + kx]`
/// over a padded `src` of `[cin, h + K - 1, w + K - 1]`, `out` of `[coutp, h, w]`.
struct Correlate<'a> {
    src: &'a [f32],
    packed: &'a [f32],
    cin: usize,
    coutp: usize,
    h: usize,
    w: usize,
}

impl Correlate<'_> {
    fn run<const K: usize>(&self, out: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if avx512_available() {
            // SAFETY: the required target features were detected at runtime.
            match self.w {
                16 => return unsafe { self.run_avx512::<K, 1>(out) },
                32 => return unsafe { self.run_avx512::<K, 2>(out) },
                64 => return unsafe { self.run_avx512::<K, 4>(out) },
                _ => {}
            }
        }
        #[cfg(target_arch = "x86_64")]
        if simd_available() {
            // SAFETY: the required target features were detected at runtime.
            unsafe { self.run_avx2::<K>(out) };
            return;
        }
        self.run_scalar::<K>(out, 0);
    }

    fn run_scalar<const K: usize>(&self, out: &mut [f32], x_from: usize) {
        let (h, w, cin) = (self.h, self.w, self.cin);
        let wp = w + K - 1;
        let hp = h + K - 1;
        for blk in 0..self.coutp / BLOCK {
            let wb = &self.packed[blk * cin * K * K * BLOCK..(blk + 1) * cin * K * K * BLOCK];
            for y in 0..h {
                for x in x_from..w {
                    let mut acc = [0.0f32; BLOCK];
                    for ci in 0..cin {
                        for ky in 0..K {
                            let row = &self.src[(ci * hp + y + ky) * wp + x..];
                            for kx in 0..K {
                                let v = row[kx];
                                let wt = &wb[((ci * K + ky) * K + kx) * BLOCK..][..BLOCK];
                                for b in 0..BLOCK {
                                    acc[b] += wt[b] * v;
                                }
                            }
                        }
                    }
                    for (b, a) in acc.iter().enumerate() {
                        out[((blk * BLOCK + b) * h + y) * w + x] += a;
                    }
                }
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn run_avx2<const K: usize>(&self, out: &mut [f32]) {
        use std::arch::x86_64::*;
        let (h, w, cin) = (self.h, self.w, self.cin);
        let wp = w + K - 1;
        let hp = h + K - 1;
        let wide = w / 8 * 8;
        let src = self.src.as_ptr();
        let dst = out.as_mut_ptr();
        for blk in 0..self.coutp / BLOCK {
            let wb = self.packed.as_ptr().add(blk * cin * K * K * BLOCK);
            let plane = |b: usize, y: usize| dst.add(((blk * BLOCK + b) * h + y) * w);
            for y in 0..h {
                let mut x = 0;
                while x + 16 <= w {
                    let mut lo = [_mm256_setzero_ps(); BLOCK];
                    let mut hi = [_mm256_setzero_ps(); BLOCK];
                    for ci in 0..cin {
                        for ky in 0..K {
                            let row = src.add((ci * hp + y + ky) * wp + x);
                            for kx in 0..K {
                                let v0 = _mm256_loadu_ps(row.add(kx));
                                let v1 = _mm256_loadu_ps(row.add(kx + 8));
                                let wt = wb.add(((ci * K + ky) * K + kx) * BLOCK);
                                for b in 0..BLOCK {
                                    let s = _mm256_broadcast_ss(&*wt.add(b));
                                    lo[b] = _mm256_fmadd_ps(s, v0, lo[b]);
                                    hi[b] = _mm256_fmadd_ps(s, v1, hi[b]);
                                }
                            }
                        }
                    }
                    for b in 0..BLOCK {
                        let p = plane(b, y).add(x);
                        _mm256_storeu_ps(p, _mm256_add_ps(_mm256_loadu_ps(p), lo[b]));
                        _mm256_storeu_ps(p.add(8), _mm256_add_ps(_mm256_loadu_ps(p.add(8)), hi[b]));
                    }
                    x += 16;
                }
                while x + 8 <= w {
                    let mut acc = [_mm256_setzero_ps(); BLOCK];
                    for ci in 0..cin {
                        for ky in 0..K {
                            let row = src.add((ci * hp + y + ky) * wp + x);
                            for kx in 0..K {
                                let v = _mm256_loadu_ps(row.add(kx));
                                let wt = wb.add(((ci * K + ky) * K + kx) * BLOCK);
                                for b in 0..BLOCK {
                                    let s = _mm256_broadcast_ss(&*wt.add(b));
                                    acc[b] = _mm256_fmadd_ps(s, v, acc[b]);
                                }
                            }
                        }
                    }
                    for b in 0..BLOCK {
                        let p = plane(b, y).add(x);
                        _mm256_storeu_ps(p, _mm256_add_ps(_mm256_loadu_ps(p), acc[b]));
                    }
                    x += 8;
                }
            }
        }
        if wide < w {
            self.run_scalar::<K>(out, wide);
        }
    }

    /// Whole rows of `16 * RW` columns held in registers.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn run_avx512<const K: usize, const RW: usize>(&self, out: &mut [f32]) {
        use std::arch::x86_64::*;
        let (h, w, cin) = (self.h, self.w, self.cin);
        debug_assert_eq!(w, 16 * RW);
        let (hp, wp) = (h + K - 1, w + K - 1);
        let src = self.src.as_ptr();
        let dst = out.as_mut_ptr();
        for blk in 0..self.coutp / BLOCK {
            let wb = self.packed.as_ptr().add(blk * cin * K * K * BLOCK);
            for y in 0..h {
                let mut acc = [[_mm512_setzero_ps(); RW]; BLOCK];
                for ci in 0..cin {
                    for ky in 0..K {
                        let row = src.add((ci * hp + y + ky) * wp);
                        for kx in 0..K {
                            let mut v = [_mm512_setzero_ps(); RW];
                            for (r, vr) in v.iter_mut().enumerate() {
                                *vr = _mm512_loadu_ps(row.add(kx + 16 * r));
                            }
                            let wt = wb.add(((ci * K + ky) * K + kx) * BLOCK);
                            for (b, ab) in acc.iter_mut().enumerate() {
                                let s = _mm512_set1_ps(*wt.add(b));
                                for r in 0..RW {
                                    ab[r] = _mm512_fmadd_ps(s, v[r], ab[r]);
                                }
                            }
                        }
                    }
                }
                for (b, ab) in acc.iter().enumerate() {
                    let p = dst.add(((blk * BLOCK + b) * h + y) * w);
                    for (r, a) in ab.iter().enumerate() {
                        let q = p.add(16 * r);
                        _mm512_storeu_ps(q, _mm512_add_ps(_mm512_loadu_ps(q), *a));
                    }
                }
            }
        }
    }
}

/// `dw[co][ci][ky][kx] = Σ_n Σ_y Σ_x g[n][co][y][x] · src[n][ci][y + ky][x + kx]`
/// with `g` channel-padded to `coutp` and `src` spatially padded.
struct WeightGrad<'a> {
    src: &'a [f32],
    g: &'a [f32],
    n: usize,
    cin: usize,
    coutp: usize,
    h: usize,
    w: usize,
}

impl WeightGrad<'_> {
    /// Returns `[coutp][cin][K * K]`.
    fn run<const K: usize>(&self) -> Vec<f32> {
        let mut dw = vec![0.0f32; self.coutp * self.cin * K * K];
        #[cfg(target_arch = "x86_64")]
        if avx512_available() {
            // SAFETY: the required target features were detected at runtime.
            match self.w {
                16 => unsafe { self.run_avx512::<K, 1>(&mut dw) },
                32 => unsafe { self.run_avx512::<K, 2>(&mut dw) },
                64 => unsafe { self.run_avx512::<K, 4>(&mut dw) },
                _ => {}
            }
            if self.w % 16 == 0 && self.w <= 64 {
                return dw;
            }
        }
        #[cfg(target_arch = "x86_64")]
        if simd_available() {
            // SAFETY: the required target features were detected at runtime.
            unsafe { self.run_avx2::<K>(&mut dw) };
            return dw;
        }
        self.run_scalar::<K>(&mut dw, 0);
        dw
    }

    fn run_scalar<const K: usize>(&self, dw: &mut [f32], x_from: usize) {
        let (h, w, cin, coutp) = (self.h, self.w, self.cin, self.coutp);
        let (hp, wp) = (h + K - 1, w + K - 1);
        for co in 0..coutp {
            for ci in 0..cin {
                for ky in 0..K {
                    for kx in 0..K {
                        let mut acc = 0.0f32;
                        for i in 0..self.n {
                            let g = &self.g[(i * coutp + co) * h * w..];
                            let s = &self.src[(i * cin + ci) * hp * wp..];
                            for y in 0..h {
                                for x in x_from..w {
                                    acc += g[y * w + x] * s[(y + ky) * wp + x + kx];
                                }
                            }
                        }
                        dw[(co * cin + ci) * K * K + ky * K + kx] += acc;
                    }
                }
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn run_avx2<const K: usize>(&self, dw: &mut [f32]) {
        use std::arch::x86_64::*;
        let (h, w, cin, coutp) = (self.h, self.w, self.cin, self.coutp);
        let (hp, wp) = (h + K - 1, w + K - 1);
        let wide = w / 8 * 8;
        let src = self.src.as_ptr();
        let gp = self.g.as_ptr();
        // Vector partial sums per (block, ci, ky, b, kx), reduced once at the end.
        let mut partial = vec![_mm256_setzero_ps(); coutp * cin * K * K];
        for i in 0..self.n {
            for blk in 0..coutp / BLOCK {
                for ci in 0..cin {
                    for ky in 0..K {
                        let mut acc = [[_mm256_setzero_ps(); K]; BLOCK];
                        for y in 0..h {
                            let row = src.add(((i * cin + ci) * hp + y + ky) * wp);
                            let grow = gp.add(((i * coutp + blk * BLOCK) * h + y) * w);
                            let mut x = 0;
                            while x < wide {
                                let mut v = [_mm256_setzero_ps(); K];
                                for (kx, vk) in v.iter_mut().enumerate() {
                                    *vk = _mm256_loadu_ps(row.add(x + kx));
                                }
                                for (b, ab) in acc.iter_mut().enumerate() {
                                    let gv = _mm256_loadu_ps(grow.add(b * h * w + x));
                                    for kx in 0..K {
                                        ab[kx] = _mm256_fmadd_ps(gv, v[kx], ab[kx]);
                                    }
                                }
                                x += 8;
                            }
                        }
                        for (b, ab) in acc.iter().enumerate() {
                            for (kx, a) in ab.iter().enumerate() {
                                let slot = &mut partial
                                    [((blk * BLOCK + b) * cin + ci) * K * K + ky * K + kx];
                                *slot = _mm256_add_ps(*slot, *a);
                            }
                        }
                    }
                }
            }
        }
        for (d, p) in dw.iter_mut().zip(&partial) {
            let mut lanes = [0.0f32; 8];
            _mm256_storeu_ps(lanes.as_mut_ptr(), *p);
            *d += lanes.iter().sum::<f32>();
        }
        if wide < w {
            self.run_scalar::<K>(dw, wide);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn run_avx512<const K: usize, const RW: usize>(&self, dw: &mut [f32]) {
        use std::arch::x86_64::*;
        let (h, w, cin, coutp) = (self.h, self.w, self.cin, self.coutp);
        debug_assert_eq!(w, 16 * RW);
        let (hp, wp) = (h + K - 1, w + K - 1);
        let src = self.src.as_ptr();
        let gp = self.g.as_ptr();
        let mut partial = vec![_mm512_setzero_ps(); coutp * cin * K * K];
        for i in 0..self.n {
            for blk in 0..coutp / BLOCK {
                for ci in 0..cin {
                    for ky in 0..K {
                        let mut acc = [[_mm512_setzero_ps(); K]; BLOCK];
                        for y in 0..h {
                            let row = src.add(((i * cin + ci) * hp + y + ky) * wp);
                            let grow = gp.add(((i * coutp + blk * BLOCK) * h + y) * w);
                            for r in 0..RW {
                                let mut v = [_mm512_setzero_ps(); K];
                                for (kx, vk) in v.iter_mut().enumerate() {
                                    *vk = _mm512_loadu_ps(row.add(16 * r + kx));
                                }
                                for (b, ab) in acc.iter_mut().enumerate() {
                                    let gv = _mm512_loadu_ps(grow.add(b * h * w + 16 * r));
                                    for kx in 0..K {
                                        ab[kx] = _mm512_fmadd_ps(gv, v[kx], ab[kx]);
                                    }
                                }
                            }
                        }
                        for (b, ab) in acc.iter().enumerate() {
                            for (kx, a) in ab.iter().enumerate() {
                                let slot = &mut partial
                                    [((blk * BLOCK + b) * cin + ci) * K * K + ky * K + kx];
                                *slot = _mm512_add_ps(*slot, *a);
                            }
                        }
                    }
                }
            }
        }
        for (d, p) in dw.iter_mut().zip(&partial) {
            *d += _mm512_reduce_add_ps(*p);
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn avx512_available() -> bool {
    is_x86_feature_detected!("avx512f")
}

#[cfg(target_arch = "x86_64")]
fn simd_available() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

fn correlate_batch(
    src: &[f32],
    packed: &[f32],
    n: usize,
    cin: usize,
    coutp: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [f32],
) {
    let (hp, wp) = (h + k - 1, w + k - 1);
    for i in 0..n {
        let job = Correlate {
            src: &src[i * cin * hp * wp..(i + 1) * cin * hp * wp],
            packed,
            cin,
            coutp,
            h,
            w,
        };
        let dst = &mut out[i * coutp * h * w..(i + 1) * coutp * h * w];
        match k {
            1 => job.run::<1>(dst),
            3 => job.run::<3>(dst),
            _ => panic!("unsupported kernel size {k}"),
        }
    }
}

/// Keep the first `c` of `cp` channels of each item.
fn take_channels(buf: Vec<f32>, n: usize, c: usize, cp: usize, hw: usize) -> Vec<f32> {
    if c == cp {
        return buf;
    }
    let mut out = Vec::with_capacity(n * c * hw);
    for item in buf.chunks_exact(cp * hw) {
        out.extend_from_slice(&item[..c * hw]);
    }
    out
}

pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, k: usize) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let cout = weight.batch();
    let coutp = round_up(cout);
    let hw = h * w;
    let src = pad_planes(x.data(), n * cin, h, w, k / 2);
    let packed = pack_weights(weight.data(), cout, cin, k * k, false);
    let mut out = vec![0.0f32; n * coutp * hw];
    if let Some(bias) = bias {
        for item in out.chunks_exact_mut(coutp * hw) {
            for (plane, &b) in item.chunks_exact_mut(hw).zip(bias.data()) {
                plane.fill(b);
            }
        }
    }
    correlate_batch(&src, &packed, n, cin, coutp, h, w, k, &mut out);
    Tensor::from_vec([n, cout, h, w], take_channels(out, n, cout, coutp, hw))
        .expect("conv output shape")
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    k: usize,
    need_dx: bool,
    need_db: bool,
) -> (Option<Tensor>, Tensor, Option<Tensor>) {
    let [n, cin, h, w] = x.shape();
    let cout = weight.batch();
    let coutp = round_up(cout);
    let hw = h * w;
    let p = k / 2;

    let db = need_db.then(|| {
        let mut db = Tensor::zeros([1, cout, 1, 1]);
        for item in dout.data().chunks_exact(cout * hw) {
            for (acc, plane) in db.data_mut().iter_mut().zip(item.chunks_exact(hw)) {
                *acc += plane.iter().sum::<f32>();
            }
        }
        db
    });

    let src = pad_planes(x.data(), n * cin, h, w, p);
    let g = pad_channels(dout.data(), n, cout, coutp, hw);
    let job = WeightGrad {
        src: &src,
        g: &g,
        n,
        cin,
        coutp,
        h,
        w,
    };
    let dw = match k {
        1 => job.run::<1>(),
        3 => job.run::<3>(),
        _ => panic!("unsupported kernel size {k}"),
    };
    let dw = Tensor::from_vec(weight.shape(), dw[..cout * cin * k * k].to_vec())
        .expect("weight gradient shape");

    let dx = need_dx.then(|| {
        let cinp = round_up(cin);
        let gpad = pad_planes(dout.data(), n * cout, h, w, p);
        let packed = pack_weights(weight.data(), cin, cout, k * k, true);
        let mut out = vec![0.0f32; n * cinp * hw];
        correlate_batch(&gpad, &packed, n, cout, cinp, h, w, k, &mut out);
        Tensor::from_vec(x.shape(), take_channels(out, n, cin, cinp, hw))
            .expect("input gradient shape")
    });
    (dx, dw, db)
}
