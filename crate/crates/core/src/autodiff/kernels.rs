//! Dense loops shared by the forward and backward rules.
//!
//! All reductions run in a fixed order so results are bitwise reproducible.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        axpy_rows(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], n);
    }
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // Row p of the result is the combination of g's rows weighted by column p of a.
    let mut col = vec![0.0; m];
    for p in 0..k {
        for (i, c) in col.iter_mut().enumerate() {
            *c = a[i * k + p];
        }
        axpy_rows(&col, g, &mut out[p * n..(p + 1) * n], n);
    }
}

/// Dot product with four interleaved partial sums.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += Σ_p coef[p] · rows[p]` where `rows` is row-major with width `n`.
/// Four rows are folded per pass over `out`.
fn axpy_rows(coef: &[f64], rows: &[f64], out: &mut [f64], n: usize) {
    let mut chunks = coef.chunks_exact(4);
    let mut p = 0;
    for c in &mut chunks {
        let (c0, c1, c2, c3) = (c[0], c[1], c[2], c[3]);
        if c0 != 0.0 || c1 != 0.0 || c2 != 0.0 || c3 != 0.0 {
            let out = &mut out[..n];
            let r0 = &rows[p * n..(p + 1) * n];
            let r1 = &rows[(p + 1) * n..(p + 2) * n];
            let r2 = &rows[(p + 2) * n..(p + 3) * n];
            let r3 = &rows[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                out[j] += c0 * r0[j] + c1 * r1[j] + c2 * r2[j] + c3 * r3[j];
            }
        }
        p += 4;
    }
    for &cv in chunks.remainder() {
        if cv != 0.0 {
            let r = &rows[p * n..(p + 1) * n];
            for (o, &rv) in out.iter_mut().zip(r) {
                *o += cv * rv;
            }
        }
        p += 1;
    }
}

/// `out[m×k] += g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o += dot(g_row, b_row);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub(crate) fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub(crate) fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[c×h×w]` image into `[c·kh·kw × oh·ow]` patch columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.out_w + oj] = if ii >= 0
                            && jj >= 0
                            && (ii as usize) < g.height
                            && (jj as usize) < g.width
                        {
                            x[(c * g.height + ii as usize) * g.width + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto the image.
pub(crate) fn col2im_acc(col: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.height {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.width {
                            continue;
                        }
                        dx[(c * g.height + ii as usize) * g.width + jj as usize] +=
                            src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}
