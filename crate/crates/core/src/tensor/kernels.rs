//! Raw numeric kernels over flat slices. Shapes are validated by the caller.

use crate::par;

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `[m, k]`
/// and `b` logically `[k, n]`. A transposed operand is stored with its
/// logical axes swapped (`[k, m]` for `a`, `[n, k]` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation, NCHW input, `[cout, cin, kh, kw]` kernel.
pub fn conv2d_forward(x: &[f64], batch: usize, weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_item = g.cin * g.h * g.w;
    let ohw = g.oh * g.ow;
    let mut out = vec![0.0; batch * g.cout * ohw];
    par::chunks_mut(&mut out, g.cout * ohw, |n, dst| {
        let xn = &x[n * in_item..(n + 1) * in_item];
        if g.is_pointwise() {
            gemm(g.cout, g.cin, ohw, weight, false, xn, false, dst, false);
        } else {
            let mut cols = vec![0.0; g.patch_len() * ohw];
            im2col(xn, g, &mut cols);
            gemm(g.cout, g.patch_len(), ohw, weight, false, &cols, false, dst, false);
        }
    });
    out
}

/// Returns `(dx, dweight)`; either is skipped when not requested.
pub fn conv2d_backward(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_item = g.cin * g.h * g.w;
    let ohw = g.oh * g.ow;
    let klen = g.patch_len();
    let wlen = g.cout * klen;
    let mut dx = if want_dx {
        vec![0.0; batch * in_item]
    } else {
        Vec::new()
    };
    let per_item = |n: usize, dxn: Option<&mut [f64]>| -> Option<Vec<f64>> {
        let xn = &x[n * in_item..(n + 1) * in_item];
        let dyn_ = &dy[n * g.cout * ohw..(n + 1) * g.cout * ohw];
        let cols_owned;
        let cols: &[f64] = if g.is_pointwise() {
            xn
        } else {
            let mut c = vec![0.0; klen * ohw];
            im2col(xn, g, &mut c);
            cols_owned = c;
            &cols_owned
        };
        let dw = want_dw.then(|| {
            let mut dw = vec![0.0; wlen];
            gemm(g.cout, ohw, klen, dyn_, false, cols, true, &mut dw, false);
            dw
        });
        if let Some(dxn) = dxn {
            if g.is_pointwise() {
                gemm(klen, g.cout, ohw, weight, true, dyn_, false, dxn, true);
            } else {
                let mut dcols = vec![0.0; klen * ohw];
                gemm(klen, g.cout, ohw, weight, true, dyn_, false, &mut dcols, false);
                col2im_add(&dcols, g, dxn);
            }
        }
        dw
    };
    let partial_dw: Vec<Option<Vec<f64>>> = if want_dx {
        par::chunks_mut(&mut dx, in_item, |n, dxn| per_item(n, Some(dxn)))
    } else {
        par::map_range(batch, |n| per_item(n, None))
    };
    let dw = want_dw.then(|| {
        let mut acc = vec![0.0; wlen];
        for p in partial_dw.into_iter().flatten() {
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
        acc
    });
    (want_dx.then_some(dx), dw)
}

/// Separable blur over the two trailing axes of `planes` stacked `h × w`
/// planes, valid region only, subsampled by `stride`.
pub fn blur_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    taps: &[f64],
    stride: usize,
) -> Vec<f64> {
    let l = taps.len();
    let oh = (h - l) / stride + 1;
    let ow = (w - l) / stride + 1;
    let mut out = vec![0.0; planes * oh * ow];
    par::chunks_mut(&mut out, oh * ow, |p, dst| {
        let src = &x[p * h * w..(p + 1) * h * w];
        let mut tmp = vec![0.0; h * ow];
        for r in 0..h {
            for j in 0..ow {
                let base = r * w + j * stride;
                tmp[r * ow + j] = taps.iter().enumerate().map(|(b, g)| g * src[base + b]).sum();
            }
        }
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(a, g)| g * tmp[(i * stride + a) * ow + j])
                    .sum();
            }
        }
    });
    out
}

pub fn blur_backward(
    dy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    taps: &[f64],
    stride: usize,
) -> Vec<f64> {
    let l = taps.len();
    let oh = (h - l) / stride + 1;
    let ow = (w - l) / stride + 1;
    let mut dx = vec![0.0; planes * h * w];
    par::chunks_mut(&mut dx, h * w, |p, dst| {
        let g_out = &dy[p * oh * ow..(p + 1) * oh * ow];
        let mut dtmp = vec![0.0; h * ow];
        for i in 0..oh {
            for j in 0..ow {
                let v = g_out[i * ow + j];
                for (a, g) in taps.iter().enumerate() {
                    dtmp[(i * stride + a) * ow + j] += g * v;
                }
            }
        }
        for r in 0..h {
            for j in 0..ow {
                let v = dtmp[r * ow + j];
                let base = r * w + j * stride;
                for (b, g) in taps.iter().enumerate() {
                    dst[base + b] += g * v;
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let taps = [0.25, 0.5, 0.25];
        let x = vec![2.0; 7 * 7];
        let y = blur_forward(&x, 1, 7, 7, &taps, 2);
        assert_eq!(y.len(), 9);
        assert!(y.iter().all(|v| (v - 2.0).abs() < 1e-15));
    }
}
