//! Raw compute kernels over flat slices. Inner loops run across independent
//! output lanes so they vectorize without reassociating floating point sums;
//! results do not depend on vector width.

use super::Real;

const MR: usize = 4;

/// `c[m,n] += A[m,k] · b[k,n]` with `A[i,p] = a_at(i, p)`, register-blocked
/// in `MR × NR` tiles. Each output element accumulates in ascending `p`.
#[inline(always)]
fn gemm_impl<T: Real, const NR: usize>(
    a_at: impl Fn(usize, usize) -> T,
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    let np = n.div_ceil(NR) * NR;
    let padded;
    let bp: &[T] = if np == n {
        b
    } else {
        let mut t = vec![T::zero(); k * np];
        for p in 0..k {
            t[p * np..p * np + n].copy_from_slice(&b[p * n..(p + 1) * n]);
        }
        padded = t;
        &padded
    };
    let mut i0 = 0;
    while i0 + MR <= m {
        for j0 in (0..np).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[T; NR] = bp[p * np + j0..p * np + j0 + NR].try_into().unwrap();
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a_at(i0 + r, p);
                    for l in 0..NR {
                        accr[l] = accr[l] + av * brow[l];
                    }
                }
            }
            let w = NR.min(n - j0);
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + w];
                if w == NR {
                    let crow: &mut [T; NR] = crow.try_into().unwrap();
                    for l in 0..NR {
                        crow[l] = crow[l] + accr[l];
                    }
                } else {
                    for l in 0..w {
                        crow[l] = crow[l] + accr[l];
                    }
                }
            }
        }
        i0 += MR;
    }
    for i in i0..m {
        for j0 in (0..np).step_by(NR) {
            let mut acc = [T::zero(); NR];
            for p in 0..k {
                let brow: &[T; NR] = bp[p * np + j0..p * np + j0 + NR].try_into().unwrap();
                let av = a_at(i, p);
                for l in 0..NR {
                    acc[l] = acc[l] + av * brow[l];
                }
            }
            let w = NR.min(n - j0);
            let crow = &mut c[i * n + j0..i * n + j0 + w];
            for l in 0..w {
                crow[l] = crow[l] + acc[l];
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(super) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let at = |i: usize, p: usize| a[i * k + p];
    if n <= 8 {
        gemm_impl::<T, 8>(at, b, c, m, k, n)
    } else {
        gemm_impl::<T, 16>(at, b, c, m, k, n)
    }
}

/// `c[m,n] += aᵀ · b` where `a` is stored `(k, m)`.
pub(super) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let at = |i: usize, p: usize| a[p * m + i];
    if n <= 8 {
        gemm_impl::<T, 8>(at, b, c, m, k, n)
    } else {
        gemm_impl::<T, 16>(at, b, c, m, k, n)
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub(super) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

pub(super) fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Gradients of `c = a · b` given `dc`.
#[allow(clippy::too_many_arguments)]
pub(super) fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let da = need_a.then(|| matmul(dc, &transpose(b, k, n), m, n, k));
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); k * n];
        gemm_tn_acc(a, dc, &mut db, k, m, n);
        db
    });
    (da, db)
}

/// Geometry of a 2-D convolution over channels-last `(B, H, W, C)` data.
#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Input pixel under tap `(ky, kx)` of output pixel `(oy, ox)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(iy as usize * self.w + ix as usize)
        }
    }

    /// Patch matrix `(Ho·Wo, k·k·Cin)` of one image, zero outside the input.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let (k, cin, pl) = (self.k, self.cin, self.patch_len());
        let run = k * cin;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * pl..(oy * self.wo + ox + 1) * pl];
                let x0 = (ox * self.stride) as isize - self.pad_left as isize;
                let inside_x = x0 >= 0 && x0 as usize + k <= self.w;
                for ky in 0..k {
                    let dst = &mut row[ky * run..(ky + 1) * run];
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.h as isize {
                        dst.fill(T::zero());
                    } else if inside_x {
                        let start = (iy as usize * self.w + x0 as usize) * cin;
                        dst.copy_from_slice(&img[start..start + run]);
                    } else {
                        for kx in 0..k {
                            let d = &mut dst[kx * cin..(kx + 1) * cin];
                            match self.source(oy, ox, ky, kx) {
                                Some(ip) => d.copy_from_slice(&img[ip * cin..(ip + 1) * cin]),
                                None => d.fill(T::zero()),
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back onto the image gradient.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let (k, cin, pl) = (self.k, self.cin, self.patch_len());
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * pl..(oy * self.wo + ox + 1) * pl];
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(ip) = self.source(oy, ox, ky, kx) {
                            let src = &row[(ky * k + kx) * cin..(ky * k + kx + 1) * cin];
                            for (d, &v) in img[ip * cin..(ip + 1) * cin].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation: `out[b,oy,ox,co] = Σ x[b,oy*s+ky-pt,ox*s+kx-pl,ci] · w[ky,kx,ci,co]`.
pub(super) fn conv2d<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let in_img = g.h * g.w * g.cin;
    let out_img = g.out_pixels() * g.cout;
    let mut out = vec![T::zero(); g.batch * out_img];
    let mut cols = vec![T::zero(); g.out_pixels() * g.patch_len()];
    for b in 0..g.batch {
        g.im2col(&x[b * in_img..(b + 1) * in_img], &mut cols);
        gemm_acc(
            &cols,
            w,
            &mut out[b * out_img..(b + 1) * out_img],
            g.out_pixels(),
            g.patch_len(),
            g.cout,
        );
    }
    out
}

pub(super) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_img = g.h * g.w * g.cin;
    let out_img = g.out_pixels() * g.cout;
    let (np, pl) = (g.out_pixels(), g.patch_len());
    let wt = need_x.then(|| transpose(w, pl, g.cout));
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); np * pl];
    let mut dcols = vec![T::zero(); np * pl];
    for b in 0..g.batch {
        let db = &dout[b * out_img..(b + 1) * out_img];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x[b * in_img..(b + 1) * in_img], &mut cols);
            gemm_tn_acc(&cols, db, dw, pl, np, g.cout);
        }
        if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
            dcols.fill(T::zero());
            gemm_acc(db, wt, &mut dcols, np, g.cout, pl);
            g.col2im(&dcols, &mut dx[b * in_img..(b + 1) * in_img]);
        }
    }
    (dx, dw)
}

/// Non-overlapping `size × size` max pooling; returns values and the flat
/// input index of each maximum (first maximum wins ties).
pub(super) fn maxpool2d<T: Real>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    size: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / size, w / size);
    let mut out = vec![T::neg_infinity(); batch * ho * wo * c];
    let mut arg = vec![0u32; out.len()];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let obase = ((b * ho + oy) * wo + ox) * c;
                let orow = &mut out[obase..obase + c];
                let arow = &mut arg[obase..obase + c];
                for dy in 0..size {
                    for dx in 0..size {
                        let ibase = ((b * h + oy * size + dy) * w + ox * size + dx) * c;
                        let irow = &x[ibase..ibase + c];
                        for ch in 0..c {
                            if irow[ch] > orow[ch] {
                                orow[ch] = irow[ch];
                                arow[ch] = (ibase + ch) as u32;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}
