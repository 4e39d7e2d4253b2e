//! Row-major dense kernels shared by the tape ops.
//!
//! All three GEMM variants accumulate into `c`.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

/// Dot product with four independent accumulators.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for q in 0..chunks {
        let o = q * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..n {
        s += a[o] * b[o];
    }
    s
}

/// Geometry of a 2-D cross-correlation over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output coordinate range `[lo, hi)` along one axis for which the
    /// tap offset `t` lands inside `[0, extent)`.
    fn valid_range(&self, t: usize, extent: usize, out: usize) -> (usize, usize) {
        // input index = o * stride + t - pad
        let lo = if t >= self.pad {
            0
        } else {
            (self.pad - t).div_ceil(self.stride)
        };
        let hi = if extent + self.pad > t {
            ((extent + self.pad - t - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let n_out = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, self.h_out);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, self.w_out);
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    dst.fill(0.0);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst_row = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            dst_row[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst_row[ox] = src_row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column-matrix gradient back onto the input layout.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let n_out = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, self.h_out);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, self.w_out);
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let src_row = &src[oy * self.w_out..(oy + 1) * self.w_out];
                        for ox in ox_lo..ox_hi {
                            dst_row[ox * s + kx - p] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Corner-aligned bilinear sampling positions along one axis:
/// `(i0, i1, frac)` per output coordinate.
pub(crate) fn bilinear_axis(n_in: usize, n_out: usize) -> alloc::vec::Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = if n_out == 1 || n_in == 1 {
                0.0
            } else {
                (o * (n_in - 1)) as f64 / (n_out - 1) as f64
            };
            let i0 = (libm::floor(src) as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> alloc::vec::Vec<f64> {
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

    fn transpose(r: usize, c: usize, a: &[f64]) -> alloc::vec::Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: alloc::vec::Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for &(h, w, k, stride, pad) in &[
            (5, 4, 3, 1, 1),
            (6, 6, 3, 2, 1),
            (5, 5, 3, 1, 0),
            (4, 7, 5, 2, 2),
        ] {
            let c_in = 2;
            let h_out = (h + 2 * pad - k) / stride + 1;
            let w_out = (w + 2 * pad - k) / stride + 1;
            let g = ConvGeometry {
                c_in,
                h,
                w,
                k,
                stride,
                pad,
                h_out,
                w_out,
            };
            let x: alloc::vec::Vec<f64> = (0..c_in * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.col_rows() * g.out_pixels()];
            g.im2col(&x, &mut cols);
            for ci in 0..c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let want =
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        0.0
                                    } else {
                                        x[ci * h * w + iy as usize * w + ix as usize]
                                    };
                                let row = (ci * k + ky) * k + kx;
                                assert_eq!(cols[row * h_out * w_out + oy * w_out + ox], want);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_axis_is_corner_aligned() {
        let pos = bilinear_axis(2, 4);
        assert_eq!(pos[0], (0, 1, 0.0));
        assert_eq!(pos[3].0, 1);
        assert!((pos[1].2 - 1.0 / 3.0).abs() < 1e-15);
        let same = bilinear_axis(5, 5);
        assert!(same
            .iter()
            .enumerate()
            .all(|(o, &(i0, _, f))| i0 == o && f == 0.0));
    }
}
