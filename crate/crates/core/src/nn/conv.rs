//! im2col-based 2-D cross-correlation kernels on single NCHW samples.

use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let (h, w) = (self.in_h + 2 * self.pad, self.in_w + 2 * self.pad);
        if h < self.k || w < self.k || self.stride == 0 {
            return None;
        }
        Some(((h - self.k) / self.stride + 1, (w - self.k) / self.stride + 1))
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// Unfolds one `C x H x W` sample into a `(C*k*k) x (Ho*Wo)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw().expect("valid geometry");
    let ohw = oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * ohw);
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a sample gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw().expect("valid geometry");
    let ohw = oh * ow;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = w * im2col(x[n]) + b` for every sample.
pub fn forward<T: Scalar>(x: &[T], n: usize, g: &ConvGeom, w: &[T], b: &[T], out_c: usize, out: &mut [T]) {
    let (oh, ow) = g.out_hw().expect("valid geometry");
    let ohw = oh * ow;
    let in_len = g.in_c * g.in_h * g.in_w;
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * ohw];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        let o = &mut out[s * out_c * ohw..(s + 1) * out_c * ohw];
        for (oc, chunk) in o.chunks_exact_mut(ohw).enumerate() {
            chunk.fill(b[oc]);
        }
        T::gemm(out_c, rows, ohw, w, false, &cols, false, T::one(), o);
    }
}

/// Accumulates gradients of a convolution. `dx`, `dw`, `db` are optional so
/// constant operands can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    out_c: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (oh, ow) = g.out_hw().expect("valid geometry");
    let ohw = oh * ow;
    let in_len = g.in_c * g.in_h * g.in_w;
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * ohw];
    for s in 0..n {
        let go = &dout[s * out_c * ohw..(s + 1) * out_c * ohw];
        if let Some(db) = db.as_deref_mut() {
            for (oc, chunk) in go.chunks_exact(ohw).enumerate() {
                db[oc] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
            // dw (out_c x rows) += go (out_c x ohw) * cols^T (ohw x rows)
            T::gemm(out_c, ohw, rows, go, false, &cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols (rows x ohw) = w^T (rows x out_c) * go (out_c x ohw)
            T::gemm(rows, out_c, ohw, w, true, go, false, T::zero(), &mut cols);
            col2im(&cols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation.
    fn naive(x: &[f64], g: &ConvGeom, w: &[f64], b: &[f64], out_c: usize) -> Vec<f64> {
        let (oh, ow) = g.out_hw().unwrap();
        let mut out = vec![0.0; out_c * oh * ow];
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for c in 0..g.in_c {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    acc += w[((oc * g.in_c + c) * g.k + ki) * g.k + kj]
                                        * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1), (2, 0, 2)] {
            let g = ConvGeom { in_c: 2, in_h: 7, in_w: 6, k, stride, pad };
            let out_c = 3;
            let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
            let w: Vec<f64> = (0..out_c * 2 * k * k).map(|i| ((i * 104729) % 53) as f64 / 53.0 - 0.5).collect();
            let b = vec![0.1, -0.2, 0.3];
            let (oh, ow) = g.out_hw().unwrap();
            let mut out = vec![0.0; out_c * oh * ow];
            forward(&x, 1, &g, &w, &b, out_c, &mut out);
            let expect = naive(&x, &g, &w, &b, out_c);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
