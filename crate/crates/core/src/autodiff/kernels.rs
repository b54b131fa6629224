//! Hot loops behind the tape ops. All kernels accumulate into their
//! output slice and assign every output element to exactly one task, so
//! results do not depend on the rayon thread count.

use rayon::prelude::*;

/// Work size above which a matmul is split across threads.
const PAR_THRESHOLD: usize = 1 << 16;

#[inline]
fn axpy(dst: &mut [f32], a: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

/// dst += a0·s0 + a1·s1 + a2·s2 + a3·s3, one pass over dst.
#[inline]
fn axpy4(dst: &mut [f32], a: [f32; 4], s0: &[f32], s1: &[f32], s2: &[f32], s3: &[f32]) {
    let n = dst.len();
    let (s0, s1, s2, s3) = (&s0[..n], &s1[..n], &s2[..n], &s3[..n]);
    for j in 0..n {
        dst[j] += a[0] * s0[j] + a[1] * s1[j] + a[2] * s2[j] + a[3] * s3[j];
    }
}

/// Sixteen-lane dot product; fixed accumulation order.
#[inline]
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    const L: usize = 16;
    let mut acc = [0f32; L];
    let cx = x.chunks_exact(L);
    let cy = y.chunks_exact(L);
    let rx = cx.remainder();
    let ry = cy.remainder();
    for (xv, yv) in cx.zip(cy) {
        for i in 0..L {
            acc[i] += xv[i] * yv[i];
        }
    }
    let mut s = 0.0;
    for i in 0..L {
        s += acc[i];
    }
    for (a, b) in rx.iter().zip(ry) {
        s += a * b;
    }
    s
}

/// One output row of c += a · b, with the k loop unrolled so each pass
/// touches the output row once per four inner products.
#[inline]
fn gemm_row(crow: &mut [f32], arow: &[f32], b: &[f32], n: usize) {
    let k = arow.len();
    let mut kk = 0;
    while kk + 4 <= k {
        let a4 = [arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]];
        axpy4(
            crow,
            a4,
            &b[kk * n..kk * n + n],
            &b[(kk + 1) * n..(kk + 1) * n + n],
            &b[(kk + 2) * n..(kk + 2) * n + n],
            &b[(kk + 3) * n..(kk + 3) * n + n],
        );
        kk += 4;
    }
    while kk < k {
        let aj = arow[kk];
        if aj != 0.0 {
            axpy(crow, aj, &b[kk * n..kk * n + n]);
        }
        kk += 1;
    }
}

/// Four output rows at once: one pass over b per four k values, each
/// c element updated with four fused products per pass.
#[inline]
fn gemm_block4(cblk: &mut [f32], ablk: &[f32], b: &[f32], k: usize, n: usize) {
    debug_assert_eq!(cblk.len(), 4 * n);
    debug_assert_eq!(ablk.len(), 4 * k);
    let (c0, rest) = cblk.split_at_mut(n);
    let (c1, rest) = rest.split_at_mut(n);
    let (c2, c3) = rest.split_at_mut(n);
    let mut kk = 0;
    while kk + 4 <= k {
        let mut ar = [[0f32; 4]; 4];
        for (r, arr) in ar.iter_mut().enumerate() {
            for (j, v) in arr.iter_mut().enumerate() {
                *v = ablk[r * k + kk + j];
            }
        }
        let b0 = &b[kk * n..kk * n + n];
        let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
        let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
        let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
        for j in 0..n {
            let (v0, v1, v2, v3) = (b0[j], b1[j], b2[j], b3[j]);
            c0[j] += ar[0][0] * v0 + ar[0][1] * v1 + ar[0][2] * v2 + ar[0][3] * v3;
            c1[j] += ar[1][0] * v0 + ar[1][1] * v1 + ar[1][2] * v2 + ar[1][3] * v3;
            c2[j] += ar[2][0] * v0 + ar[2][1] * v1 + ar[2][2] * v2 + ar[2][3] * v3;
            c3[j] += ar[3][0] * v0 + ar[3][1] * v1 + ar[3][2] * v2 + ar[3][3] * v3;
        }
        kk += 4;
    }
    while kk < k {
        let brow = &b[kk * n..kk * n + n];
        for (r, crow) in [&mut *c0, &mut *c1, &mut *c2, &mut *c3].into_iter().enumerate() {
            let aj = ablk[r * k + kk];
            if aj != 0.0 {
                axpy(crow, aj, brow);
            }
        }
        kk += 1;
    }
}

/// c[m,n] += a[m,k] · b[k,n]
pub fn matmul_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let run = |cblk: &mut [f32], ablk: &[f32]| {
        if cblk.len() == 4 * n {
            gemm_block4(cblk, ablk, b, k, n);
        } else {
            for (crow, arow) in cblk.chunks_mut(n).zip(ablk.chunks(k)) {
                gemm_row(crow, arow, b, n);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 4 {
        c.par_chunks_mut(4 * n)
            .zip(a.par_chunks(4 * k))
            .for_each(|(cblk, ablk)| run(cblk, ablk));
    } else {
        for (cblk, ablk) in c.chunks_mut(4 * n).zip(a.chunks(4 * k)) {
            run(cblk, ablk);
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub fn matmul_nt_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let row = |crow: &mut [f32], arow: &[f32]| {
        for (j, cj) in crow.iter_mut().enumerate() {
            *cj += dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| row(crow, arow));
    } else {
        for (crow, arow) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(crow, arow);
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub fn matmul_tn_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let row = |i: usize, crow: &mut [f32]| {
        let mut mm = 0;
        while mm + 4 <= m {
            let a4 = [
                a[mm * k + i],
                a[(mm + 1) * k + i],
                a[(mm + 2) * k + i],
                a[(mm + 3) * k + i],
            ];
            axpy4(
                crow,
                a4,
                &b[mm * n..mm * n + n],
                &b[(mm + 1) * n..(mm + 1) * n + n],
                &b[(mm + 2) * n..(mm + 2) * n + n],
                &b[(mm + 3) * n..(mm + 3) * n + n],
            );
            mm += 4;
        }
        while mm < m {
            let aj = a[mm * k + i];
            if aj != 0.0 {
                axpy(crow, aj, &b[mm * n..(mm + 1) * n]);
            }
            mm += 1;
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// Geometry of one conv application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn ck(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }
    pub fn out_plane(&self) -> usize {
        self.c_out * self.oh * self.ow
    }
    /// 1×1 kernel, unit stride, no padding: the patch matrix is the
    /// input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Unfold one sample into a [ck, oh·ow] patch matrix (zero padding).
pub fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let ohw = g.oh * g.ow;
    debug_assert_eq!(col.len(), g.ck() * ohw);
    debug_assert_eq!(x.len(), g.in_plane());
    col.fill(0.0);
    for ci in 0..g.c_in {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let ck = (ci * g.kh + ky) * g.kw + kx;
                let crow = &mut col[ck * ohw..(ck + 1) * ohw];
                // valid ox range: 0 <= ox·sw + kx − pw < w
                let ix0 = kx as isize - g.pw as isize;
                let ox_lo = if ix0 >= 0 {
                    0
                } else {
                    ((-ix0) as usize).div_ceil(g.sw)
                };
                let ox_hi = if g.w as isize > ix0 {
                    (((g.w as isize - ix0 - 1) as usize) / g.sw + 1).min(g.ow)
                } else {
                    0
                };
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let orow = &mut crow[oy * g.ow..(oy + 1) * g.ow];
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let src0 = (ix0 + (ox_lo * g.sw) as isize) as usize;
                    if g.sw == 1 {
                        orow[ox_lo..ox_hi].copy_from_slice(&xrow[src0..src0 + (ox_hi - ox_lo)]);
                    } else {
                        let src = &xrow[src0..];
                        for (o, s) in orow[ox_lo..ox_hi]
                            .iter_mut()
                            .zip(src.iter().step_by(g.sw))
                        {
                            *o = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input plane.
pub fn col2im_acc(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ohw = g.oh * g.ow;
    debug_assert_eq!(col.len(), g.ck() * ohw);
    debug_assert_eq!(dx.len(), g.in_plane());
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let ck = (ci * g.kh + ky) * g.kw + kx;
                let crow = &col[ck * ohw..(ck + 1) * ohw];
                let ix0 = kx as isize - g.pw as isize;
                let ox_lo = if ix0 >= 0 {
                    0
                } else {
                    ((-ix0) as usize).div_ceil(g.sw)
                };
                let ox_hi = if g.w as isize > ix0 {
                    (((g.w as isize - ix0 - 1) as usize) / g.sw + 1).min(g.ow)
                } else {
                    0
                };
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let orow = &crow[oy * g.ow..(oy + 1) * g.ow];
                    let src0 = (ix0 + (ox_lo * g.sw) as isize) as usize;
                    if g.sw == 1 {
                        for (d, s) in xrow[src0..src0 + (ox_hi - ox_lo)]
                            .iter_mut()
                            .zip(&orow[ox_lo..ox_hi])
                        {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in xrow[src0..]
                            .iter_mut()
                            .step_by(g.sw)
                            .zip(&orow[ox_lo..ox_hi])
                        {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv forward: out[b] = w · im2col(x[b]). Returns the patch
/// matrices when `keep_cols` (reused by the weight gradient).
pub fn conv2d_forward(
    x: &[f32],
    w: &[f32],
    batch: usize,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let ohw = g.oh * g.ow;
    let ck = g.ck();
    let mut out = vec![0.0f32; batch * g.out_plane()];
    if g.is_pointwise() {
        // the input plane is the patch matrix
        out.par_chunks_mut(g.out_plane())
            .zip(x.par_chunks(g.in_plane()))
            .for_each(|(ob, xb)| matmul_acc(ob, w, xb, g.c_out, ck, ohw));
        return (out, None);
    }
    let mut cols = if keep_cols {
        Some(vec![0.0f32; batch * ck * ohw])
    } else {
        None
    };
    let run = |xb: &[f32], ob: &mut [f32], colb: &mut [f32]| {
        im2col(xb, g, colb);
        matmul_acc(ob, w, colb, g.c_out, ck, ohw);
    };
    match cols.as_mut() {
        Some(cols) => {
            out.par_chunks_mut(g.out_plane())
                .zip(x.par_chunks(g.in_plane()))
                .zip(cols.par_chunks_mut(ck * ohw))
                .for_each(|((ob, xb), colb)| run(xb, ob, colb));
        }
        None => {
            out.par_chunks_mut(g.out_plane())
                .zip(x.par_chunks(g.in_plane()))
                .for_each(|(ob, xb)| {
                    let mut colb = vec![0.0f32; ck * ohw];
                    run(xb, ob, &mut colb);
                });
        }
    }
    (out, cols)
}

/// Input gradient: dx[b] += col2im(wᵀ · dout[b]).
pub fn conv2d_backward_input(dout: &[f32], w: &[f32], batch: usize, g: &ConvGeom, dx: &mut [f32]) {
    let ohw = g.oh * g.ow;
    let ck = g.ck();
    if g.is_pointwise() {
        dx.par_chunks_mut(g.in_plane())
            .zip(dout.par_chunks(g.out_plane()))
            .for_each(|(dxb, dob)| matmul_tn_acc(dxb, w, dob, g.c_out, ck, ohw));
        return;
    }
    dx.par_chunks_mut(g.in_plane())
        .zip(dout.par_chunks(g.out_plane()))
        .for_each(|(dxb, dob)| {
            let mut dcol = vec![0.0f32; ck * ohw];
            matmul_tn_acc(&mut dcol, w, dob, g.c_out, ck, ohw);
            col2im_acc(&dcol, g, dxb);
        });
}

/// Weight gradient: dw += Σ_b dout[b] · col[b]ᵀ. Recomputes patch
/// matrices when `cols` is None.
pub fn conv2d_backward_weight(
    dout: &[f32],
    x: &[f32],
    cols: Option<&[f32]>,
    batch: usize,
    g: &ConvGeom,
    dw: &mut [f32],
) {
    let ohw = g.oh * g.ow;
    let ck = g.ck();
    debug_assert_eq!(dw.len(), g.c_out * ck);
    let mut scratch;
    let cols: &[f32] = match cols {
        Some(c) => c,
        None if g.is_pointwise() => x,
        None => {
            scratch = vec![0.0f32; batch * ck * ohw];
            scratch
                .par_chunks_mut(ck * ohw)
                .zip(x.par_chunks(g.in_plane()))
                .for_each(|(colb, xb)| im2col(xb, g, colb));
            &scratch
        }
    };
    for b in 0..batch {
        matmul_nt_acc(
            dw,
            &dout[b * g.out_plane()..(b + 1) * g.out_plane()],
            &cols[b * ck * ohw..(b + 1) * ck * ohw],
            g.c_out,
            ohw,
            ck,
        );
    }
}
