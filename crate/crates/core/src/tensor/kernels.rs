//! Convolution kernels: im2col unfolding plus a dense GEMM.

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Rows of the unfolded matrix (`ci·k·k`).
    pub fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    /// Columns of the unfolded matrix (`oh·ow`).
    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Output column range `[lo, hi)` for which `ox + kx - pad_left` lands
    /// inside `[0, w)`.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(kx).min(self.ow);
        let hi = (self.w + self.pad_left).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

/// Unfolds one sample (`ci·h·w` values) into a `patch × positions` matrix.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    debug_assert_eq!(input.len(), g.ci * g.h * g.w);
    debug_assert_eq!(cols.len(), g.patch() * g.positions());
    let p = g.positions();
    for c in 0..g.ci {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy as usize >= g.h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let ix0 = lo + kx - g.pad_left;
                    out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a `patch × positions` matrix back
/// into a `ci·h·w` gradient buffer.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], grad: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.ci {
        let plane = &mut grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let ix0 = lo + kx - g.pad_left;
                    let dst = &mut plane[iy as usize * g.w + ix0..iy as usize * g.w + ix0 + (hi - lo)];
                    for (d, s) in dst.iter_mut().zip(&src[oy * g.ow + lo..oy * g.ow + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    rs: isize,
    cs: isize,
}

impl Layout {
    /// Row-major `rows × cols` matrix.
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns in storage.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a·b + beta·c` where `a` is `m×k`, `b` is `k×n` and `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slice lengths above cover every element addressed by the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward cross-correlation over a whole batch.
pub(crate) fn conv_forward(g: &ConvGeom, batch: usize, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (kk, p) = (g.patch(), g.positions());
    let in_per = g.ci * g.h * g.w;
    let mut out = vec![0.0; batch * g.co * p];
    let mut cols = vec![0.0; kk * p];
    for n in 0..batch {
        im2col(g, &input[n * in_per..(n + 1) * in_per], &mut cols);
        let dst = &mut out[n * g.co * p..(n + 1) * g.co * p];
        for (co, chunk) in dst.chunks_exact_mut(p).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            g.co,
            kk,
            p,
            weight,
            Layout::row_major(kk),
            &cols,
            Layout::row_major(p),
            1.0,
            dst,
        );
    }
    out
}

/// Gradients of a batch cross-correlation. Returns `(d_input, d_weight, d_bias)`;
/// `d_input` is skipped (empty) when `want_input` is false.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (kk, p) = (g.patch(), g.positions());
    let in_per = g.ci * g.h * g.w;
    let mut d_input = if want_input {
        vec![0.0; batch * in_per]
    } else {
        Vec::new()
    };
    let mut d_weight = vec![0.0; g.co * kk];
    let mut d_bias = vec![0.0; g.co];
    let mut cols = vec![0.0; kk * p];
    let mut d_cols = vec![0.0; kk * p];
    for n in 0..batch {
        let go = &grad_out[n * g.co * p..(n + 1) * g.co * p];
        for (co, chunk) in go.chunks_exact(p).enumerate() {
            d_bias[co] += chunk.iter().sum::<f64>();
        }
        im2col(g, &input[n * in_per..(n + 1) * in_per], &mut cols);
        // d_weight (co×kk) += go (co×p) · colsᵀ (p×kk)
        gemm(
            g.co,
            p,
            kk,
            go,
            Layout::row_major(p),
            &cols,
            Layout::transposed(p),
            1.0,
            &mut d_weight,
        );
        if want_input {
            // d_cols (kk×p) = weightᵀ (kk×co) · go (co×p)
            gemm(
                kk,
                g.co,
                p,
                weight,
                Layout::transposed(kk),
                go,
                Layout::row_major(p),
                0.0,
                &mut d_cols,
            );
            col2im(g, &d_cols, &mut d_input[n * in_per..(n + 1) * in_per]);
        }
    }
    (d_input, d_weight, d_bias)
}
