//! Numeric kernels behind the graph ops: GEMM wrapper and grouped 2-D
//! convolution (cross-correlation) via im2col.

use super::Scalar;
use crate::par;

/// Samples per work unit when reducing weight gradients. Fixed so the
/// summation order never depends on the number of threads.
const GRAD_CHUNK: usize = 4;

/// `c (+)= op(a)·op(b)` for row-major matrices. `a` is `[m,k]` (or `[k,m]`
/// when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`), `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: the asserts above bound every access implied by the strides.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Static description of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold the channels `c0..c0+cg` of one sample into `[cg·k·k, oh·ow]`.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, c0: usize, col: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        drow.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into channels `c0..`.
fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, c0: usize, dx: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. `x` is `[N,C_in,H,W]`, `weight` is
/// `[C_out, C_in/groups, k, k]`; returns `[N,C_out,oh,ow]` data.
pub fn conv2d_forward<S: Scalar>(x: &[S], weight: &[S], g: &ConvGeom) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let out_per = g.c_out * oh * ow;
    let in_per = g.c_in * g.h * g.w;
    let mut out = vec![S::zero(); g.batch * out_per];
    let rows = g.col_rows();
    let wg = g.cout_g() * rows;
    par::for_each_chunk_mut(&mut out, out_per, |n, out_n| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![S::zero(); rows * oh * ow]
        };
        for grp in 0..g.groups {
            let c0 = grp * g.cin_g();
            let cols: &[S] = if g.is_pointwise() {
                &xn[c0 * oh * ow..(c0 + g.cin_g()) * oh * ow]
            } else {
                im2col(xn, g, c0, &mut col);
                &col
            };
            let o0 = grp * g.cout_g() * oh * ow;
            gemm(
                g.cout_g(),
                rows,
                oh * ow,
                &weight[grp * wg..(grp + 1) * wg],
                false,
                cols,
                false,
                &mut out_n[o0..o0 + g.cout_g() * oh * ow],
                false,
            );
        }
    });
    out
}

/// Input gradient of the convolution.
pub fn conv2d_backward_input<S: Scalar>(dy: &[S], weight: &[S], g: &ConvGeom) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let out_per = g.c_out * oh * ow;
    let in_per = g.c_in * g.h * g.w;
    let rows = g.col_rows();
    let wg = g.cout_g() * rows;
    let mut dx = vec![S::zero(); g.batch * in_per];
    par::for_each_chunk_mut(&mut dx, in_per, |n, dxn| {
        let dyn_ = &dy[n * out_per..(n + 1) * out_per];
        let mut dcol = vec![S::zero(); rows * oh * ow];
        for grp in 0..g.groups {
            let c0 = grp * g.cin_g();
            let o0 = grp * g.cout_g() * oh * ow;
            let dyg = &dyn_[o0..o0 + g.cout_g() * oh * ow];
            let wgs = &weight[grp * wg..(grp + 1) * wg];
            if g.is_pointwise() {
                let dst = &mut dxn[c0 * oh * ow..(c0 + g.cin_g()) * oh * ow];
                gemm(rows, g.cout_g(), oh * ow, wgs, true, dyg, false, dst, true);
            } else {
                gemm(rows, g.cout_g(), oh * ow, wgs, true, dyg, false, &mut dcol, false);
                col2im(&dcol, g, c0, dxn);
            }
        }
    });
    dx
}

/// Weight gradient of the convolution, reduced in fixed sample-chunk order.
pub fn conv2d_backward_weight<S: Scalar>(x: &[S], dy: &[S], g: &ConvGeom) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let out_per = g.c_out * oh * ow;
    let in_per = g.c_in * g.h * g.w;
    let rows = g.col_rows();
    let wg = g.cout_g() * rows;
    let wlen = g.c_out * rows;
    let n_chunks = g.batch.div_ceil(GRAD_CHUNK);
    let partials = par::map_range(n_chunks, |ci| {
        let mut dw = vec![S::zero(); wlen];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![S::zero(); rows * oh * ow]
        };
        for n in ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(g.batch) {
            let xn = &x[n * in_per..(n + 1) * in_per];
            let dyn_ = &dy[n * out_per..(n + 1) * out_per];
            for grp in 0..g.groups {
                let c0 = grp * g.cin_g();
                let cols: &[S] = if g.is_pointwise() {
                    &xn[c0 * oh * ow..(c0 + g.cin_g()) * oh * ow]
                } else {
                    im2col(xn, g, c0, &mut col);
                    &col
                };
                let o0 = grp * g.cout_g() * oh * ow;
                gemm(
                    g.cout_g(),
                    oh * ow,
                    rows,
                    &dyn_[o0..o0 + g.cout_g() * oh * ow],
                    false,
                    cols,
                    true,
                    &mut dw[grp * wg..(grp + 1) * wg],
                    true,
                );
            }
        }
        dw
    });
    let mut dw = vec![S::zero(); wlen];
    for p in partials {
        for (a, b) in dw.iter_mut().zip(p) {
            *a += b;
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
