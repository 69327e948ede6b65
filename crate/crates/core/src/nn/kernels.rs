//! Raw-slice compute kernels behind the layer API.
//!
//! Inner loops run over contiguous rows so they autovectorize; accumulation
//! order per output element is fixed (ascending input index, then ascending
//! batch index), which keeps results bitwise reproducible for any thread
//! count and makes the batched and single-sample paths agree exactly. Work
//! splits into per-thread bands of output rows so the large shared operand
//! (weights, patch rows) streams once per thread rather than once per row.

use crate::parallel::{for_each_band, for_each_unit};

/// Dot product over eight independent accumulator lanes, combined in a fixed
/// tree. The lanes break the sequential dependence so the loop vectorizes;
/// the fixed combination order keeps the result deterministic.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let a8 = &a[i * 8..i * 8 + 8];
        let b8 = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += a8[l] * b8[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// `y += s * x` over contiguous rows.
#[inline]
fn axpy(y: &mut [f64], x: &[f64], s: f64) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += s * xv;
    }
}

/// Geometry of one conv block (valid correlation followed by 2x2 average
/// pooling with floor truncation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvShape {
    pub fn conv_h(&self) -> usize {
        self.in_h - self.kh + 1
    }
    pub fn conv_w(&self) -> usize {
        self.in_w - self.kw + 1
    }
    pub fn pool_h(&self) -> usize {
        self.conv_h() / 2
    }
    pub fn pool_w(&self) -> usize {
        self.conv_w() / 2
    }
    pub fn input_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
    pub fn conv_len(&self) -> usize {
        self.out_c * self.conv_h() * self.conv_w()
    }
    pub fn pool_len(&self) -> usize {
        self.out_c * self.pool_h() * self.pool_w()
    }
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.conv_h() * self.conv_w()
    }
}

/// Unrolls the input into patch-row matrix form: row `r = (c, ky, kx)` holds
/// `x[c, oy+ky, ox+kx]` over all output positions `p = (oy, ox)`. Turns the
/// correlation into products of long contiguous rows.
pub fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let mut cols = Vec::new();
    im2col_into(x, s, &mut cols);
    cols
}

/// [`im2col`] into a reusable buffer.
pub fn im2col_into(x: &[f64], s: &ConvShape, cols: &mut Vec<f64>) {
    let (ch, cw) = (s.conv_h(), s.conv_w());
    let positions = ch * cw;
    let in_plane = s.in_h * s.in_w;
    cols.resize(s.patch() * positions, 0.0);
    let mut row = 0usize;
    for c in 0..s.in_c {
        let xplane = &x[c * in_plane..(c + 1) * in_plane];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..ch {
                    let src = &xplane[(oy + ky) * s.in_w + kx..(oy + ky) * s.in_w + kx + cw];
                    dst[oy * cw..(oy + 1) * cw].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Valid correlation plus per-map bias: `z[o] = bias[o] + sum_r k[o,r] * cols[r]`.
pub fn conv_forward(x: &[f64], kernels: &[f64], bias: &[f64], s: &ConvShape, z: &mut [f64], threads: usize) {
    let cols = im2col(x, s);
    conv_forward_cols(&cols, kernels, bias, s, z, threads);
}

/// Forward over an already-unrolled input; the training loop shares one
/// unrolling between the forward pass and the kernel-gradient pass.
pub fn conv_forward_cols(cols: &[f64], kernels: &[f64], bias: &[f64], s: &ConvShape, z: &mut [f64], threads: usize) {
    let positions = s.positions();
    let patch = s.patch();
    debug_assert_eq!(cols.len(), patch * positions);
    for_each_band(z, positions, threads, |o0, _n_o, zband| {
        for (oi, zmap) in zband.chunks_mut(positions).enumerate() {
            zmap.fill(bias[o0 + oi]);
        }
        for (r, colrow) in cols.chunks_exact(positions).enumerate() {
            for (oi, zmap) in zband.chunks_mut(positions).enumerate() {
                let kv = kernels[(o0 + oi) * patch + r];
                if kv != 0.0 {
                    axpy(zmap, colrow, kv);
                }
            }
        }
    });
}

/// Non-overlapping 2x2 average pooling of the rectified pre-activations:
/// `p = P(max(z, 0))`. Odd trailing rows/columns are dropped.
pub fn relu_avg_pool2(z: &[f64], s: &ConvShape, pooled: &mut [f64], threads: usize) {
    let (ch, cw) = (s.conv_h(), s.conv_w());
    let (ph, pw) = (s.pool_h(), s.pool_w());
    for_each_unit(pooled, ph * pw, threads, |o, pmap| {
        let zmap = &z[o * ch * cw..(o + 1) * ch * cw];
        for py in 0..ph {
            for px in 0..pw {
                let (y0, x0) = (2 * py, 2 * px);
                let sum = zmap[y0 * cw + x0].max(0.0)
                    + zmap[y0 * cw + x0 + 1].max(0.0)
                    + zmap[(y0 + 1) * cw + x0].max(0.0)
                    + zmap[(y0 + 1) * cw + x0 + 1].max(0.0);
                pmap[py * pw + px] = 0.25 * sum;
            }
        }
    });
}

/// Backward of the pooling + inner rectifier: routes `d_pool` evenly over each
/// 2x2 window, gated by the sign of the pre-activation.
pub fn relu_avg_pool2_backward(z: &[f64], s: &ConvShape, d_pool: &[f64], d_z: &mut [f64], threads: usize) {
    let (ch, cw) = (s.conv_h(), s.conv_w());
    let (ph, pw) = (s.pool_h(), s.pool_w());
    for_each_unit(d_z, ch * cw, threads, |o, dzmap| {
        dzmap.fill(0.0);
        let zmap = &z[o * ch * cw..(o + 1) * ch * cw];
        let dpmap = &d_pool[o * ph * pw..(o + 1) * ph * pw];
        for py in 0..ph {
            for px in 0..pw {
                let g = 0.25 * dpmap[py * pw + px];
                let (y0, x0) = (2 * py, 2 * px);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (y0 + dy) * cw + x0 + dx;
                    if zmap[idx] > 0.0 {
                        dzmap[idx] = g;
                    }
                }
            }
        }
    });
}

/// Kernel and bias gradients of the correlation: `dk[o,r] += d_z[o] . cols[r]`,
/// `db[o] += sum d_z[o]`. Adds into the accumulators.
pub fn conv_backward_params(
    x: &[f64],
    d_z: &[f64],
    s: &ConvShape,
    d_kernels: &mut [f64],
    d_bias: &mut [f64],
    threads: usize,
) {
    let cols = im2col(x, s);
    conv_backward_params_cols(&cols, d_z, s, d_kernels, d_bias, threads);
}

/// Kernel/bias gradients over an already-unrolled input.
pub fn conv_backward_params_cols(
    cols: &[f64],
    d_z: &[f64],
    s: &ConvShape,
    d_kernels: &mut [f64],
    d_bias: &mut [f64],
    threads: usize,
) {
    let positions = s.positions();
    let patch = s.patch();
    for_each_band(d_kernels, patch, threads, |o0, n_o, dkband| {
        // Patch rows stream once per band; the band's d_z rows stay hot.
        for (r, colrow) in cols.chunks_exact(positions).enumerate() {
            for oi in 0..n_o {
                let dzmap = &d_z[(o0 + oi) * positions..(o0 + oi + 1) * positions];
                dkband[oi * patch + r] += dot(dzmap, colrow);
            }
        }
    });
    for (o, db) in d_bias.iter_mut().enumerate() {
        let dzmap = &d_z[o * positions..(o + 1) * positions];
        *db += dzmap.iter().sum::<f64>();
    }
}

/// Input gradient of the correlation, overwritten into `d_x`.
pub fn conv_backward_input(
    kernels: &[f64],
    d_z: &[f64],
    s: &ConvShape,
    d_x: &mut [f64],
    threads: usize,
) {
    let (ch, cw) = (s.conv_h(), s.conv_w());
    let positions = ch * cw;
    let patch = s.patch();
    let ksize = s.kh * s.kw;
    // Patch-row gradients: dcols[r] = sum_o k[o,r] * d_z[o].
    let mut dcols = vec![0.0; patch * positions];
    for_each_band(&mut dcols, positions, threads, |r0, _n_r, dband| {
        for (o, dzmap) in d_z.chunks_exact(positions).enumerate() {
            for (ri, drow) in dband.chunks_mut(positions).enumerate() {
                let kv = kernels[o * patch + r0 + ri];
                if kv != 0.0 {
                    axpy(drow, dzmap, kv);
                }
            }
        }
    });
    // Fold the patch rows back onto the input grid.
    let in_plane = s.in_h * s.in_w;
    for_each_unit(d_x, in_plane, threads, |c, dxplane| {
        dxplane.fill(0.0);
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = c * ksize + ky * s.kw + kx;
                let drow = &dcols[r * positions..(r + 1) * positions];
                for oy in 0..ch {
                    let dst = &mut dxplane[(oy + ky) * s.in_w + kx..(oy + ky) * s.in_w + kx + cw];
                    let src = &drow[oy * cw..(oy + 1) * cw];
                    for (dxv, dv) in dst.iter_mut().zip(src) {
                        *dxv += dv;
                    }
                }
            }
        }
    });
}

/// Adds `x . W` into `yrow` for a contiguous block of weight rows, skipping
/// zero inputs (rectified activations are sparse). Shared by the full forward
/// pass and the split face-part/audio-part evaluation so both accumulate in
/// the same order.
#[inline]
pub fn dense_row_accumulate(x: &[f64], w_rows: &[f64], out_dim: usize, yrow: &mut [f64]) {
    for (i, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            let wrow = &w_rows[i * out_dim..(i + 1) * out_dim];
            axpy(yrow, wrow, xv);
        }
    }
}

/// Adds the bias and optionally rectifies, finishing a dense pre-activation.
#[inline]
pub fn dense_row_finish(yrow: &mut [f64], bias: &[f64], relu: bool) {
    for (yv, bv) in yrow.iter_mut().zip(bias) {
        *yv += bv;
    }
    if relu {
        for yv in yrow.iter_mut() {
            if *yv < 0.0 {
                *yv = 0.0;
            }
        }
    }
}

/// Batched dense forward: `y[b] = x[b] . W + bias`, optionally rectified.
/// Bias is added after the full input sum so a split of the input dimension
/// accumulates identically to a single pass. The weight matrix streams once
/// per thread band.
pub fn dense_forward_batch(
    x: &[f64],
    batch: usize,
    w: &[f64],
    bias: &[f64],
    in_dim: usize,
    out_dim: usize,
    relu: bool,
    y: &mut [f64],
    threads: usize,
) {
    debug_assert_eq!(x.len(), batch * in_dim);
    debug_assert_eq!(y.len(), batch * out_dim);
    for_each_band(y, out_dim, threads, |b0, _n_b, yband| {
        yband.fill(0.0);
        for (i, wrow) in w.chunks_exact(out_dim).enumerate() {
            for (bi, yrow) in yband.chunks_mut(out_dim).enumerate() {
                let xv = x[(b0 + bi) * in_dim + i];
                if xv != 0.0 {
                    axpy(yrow, wrow, xv);
                }
            }
        }
        for yrow in yband.chunks_mut(out_dim) {
            dense_row_finish(yrow, bias, relu);
        }
    });
}

/// Weight and bias gradients of a dense layer over a batch. Adds into the
/// accumulators. `d_g` is the gradient at the pre-activation.
pub fn dense_backward_params(
    x: &[f64],
    d_g: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    d_w: &mut [f64],
    d_bias: &mut [f64],
    threads: usize,
) {
    for_each_unit(d_w, out_dim, threads, |i, dwrow| {
        for b in 0..batch {
            let xv = x[b * in_dim + i];
            if xv != 0.0 {
                let dgrow = &d_g[b * out_dim..(b + 1) * out_dim];
                axpy(dwrow, dgrow, xv);
            }
        }
    });
    for b in 0..batch {
        let dgrow = &d_g[b * out_dim..(b + 1) * out_dim];
        for (dbv, dgv) in d_bias.iter_mut().zip(dgrow) {
            *dbv += dgv;
        }
    }
}

/// Input gradient of a dense layer over a batch: `d_x[b,i] = d_g[b] . W[i,:]`.
/// Overwrites `d_x`; the weight matrix streams once per thread band.
pub fn dense_backward_input(
    d_g: &[f64],
    w: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    d_x: &mut [f64],
    threads: usize,
) {
    debug_assert_eq!(d_x.len(), batch * in_dim);
    for_each_band(d_x, in_dim, threads, |b0, n_b, dxband| {
        for (i, wrow) in w.chunks_exact(out_dim).enumerate() {
            for bi in 0..n_b {
                let dgrow = &d_g[(b0 + bi) * out_dim..(b0 + bi + 1) * out_dim];
                dxband[bi * in_dim + i] = dot(dgrow, wrow);
            }
        }
    });
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows(values: &mut [f64], n: usize) {
    for row in values.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
