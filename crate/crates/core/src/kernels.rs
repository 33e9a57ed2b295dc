//! Raw numeric kernels on flat row-major buffers. Forward and adjoint
//! (transpose) versions live side by side; the tape in [`crate::autodiff`]
//! wires them together.

use alloc::vec;
use alloc::vec::Vec;

/// `c = alpha * op(a) * op(b) + beta * c`, with `a` of logical shape `m × k`
/// and `b` of logical shape `k × n`. `ta`/`tb` mean the stored buffer is the
/// transpose (`k × m` / `n × k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffers have the asserted lengths and the strides address
    // exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Dot product with a fixed eight-lane accumulation order. Every similarity
/// in the crate goes through here, so repeated evaluations are bitwise equal.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Squared Euclidean distance with the same lane layout as [`dot`].
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Reflection of index `i` (which may be negative or past the end) into `0..n`,
/// excluding the edge sample (`-1 -> 1`). A length-one axis maps everything to 0.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - r;
    }
    r as usize
}

/// Column matrix `[c·k·k, h·w]` for a stride-1 "same" convolution with
/// reflection padding.
pub fn im2col_reflect(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let sy = reflect(oy as isize + ky as isize - pad, h);
                    let src_row = &plane[sy * w..(sy + 1) * w];
                    let dst_row = &mut dst[oy * w..(oy + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        *d = src_row[reflect(ox as isize + kx as isize - pad, w)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_reflect`]: scatter-adds a column matrix back onto the image.
pub fn col2im_reflect(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let sy = reflect(oy as isize + ky as isize - pad, h);
                    for ox in 0..w {
                        let sx = reflect(ox as isize + kx as isize - pad, w);
                        dx[ch * hw + sy * w + sx] += src[oy * w + ox];
                    }
                }
            }
        }
    }
}

/// Stride-1 reflection-padded convolution. `weight` is `[o, c, k, k]`.
pub fn conv2d_forward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    o: usize,
    k: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; o * hw];
    for (oc, b) in bias.iter().enumerate() {
        out[oc * hw..(oc + 1) * hw].fill(*b);
    }
    if k == 1 {
        gemm(o, c, hw, weight, false, x, false, 1.0, &mut out);
    } else {
        let cols = im2col_reflect(x, c, h, w, k);
        gemm(o, c * k * k, hw, weight, false, &cols, false, 1.0, &mut out);
    }
    out
}

/// Gradients of [`conv2d_forward`]; each output is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    o: usize,
    k: usize,
    grad_out: &[f64],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let hw = h * w;
    let ckk = c * k * k;
    let grad_b: Vec<f64> = (0..o).map(|oc| grad_out[oc * hw..(oc + 1) * hw].iter().sum()).collect();
    let cols = if want_w && k != 1 {
        Some(im2col_reflect(x, c, h, w, k))
    } else {
        None
    };
    let grad_w = want_w.then(|| {
        let mut gw = vec![0.0; o * ckk];
        let cols_ref: &[f64] = cols.as_deref().unwrap_or(x);
        gemm(o, hw, ckk, grad_out, false, cols_ref, true, 0.0, &mut gw);
        gw
    });
    let grad_x = want_x.then(|| {
        let mut dcols = vec![0.0; ckk * hw];
        gemm(ckk, o, hw, weight, true, grad_out, false, 0.0, &mut dcols);
        if k == 1 {
            dcols
        } else {
            let mut dx = vec![0.0; c * hw];
            col2im_reflect(&dcols, c, h, w, k, &mut dx);
            dx
        }
    });
    (grad_x, grad_w, grad_b)
}

/// 2×2 max pooling with stride 2 (floor on odd sides). Returns values and the
/// flat argmax index of each output into the input.
pub fn max_pool2(x: &[f64], (c, h, w): (usize, usize, usize)) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if best == usize::MAX || x[idx] > best_v {
                            best = idx;
                            best_v = x[idx];
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source taps for half-pixel bilinear 2× upsampling of an axis of length `n`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = libm::floor(src) as usize;
            let i0 = i0.min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2_forward(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = (1.0 - fy) * ((1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
                    + fy * ((1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
                out[(ch * oh + oy) * ow + ox] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[(ch * oh + oy) * ow + ox];
                plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                plane[y0 * w + x1] += (1.0 - fy) * fx * gv;
                plane[y1 * w + x0] += fy * (1.0 - fx) * gv;
                plane[y1 * w + x1] += fy * fx * gv;
            }
        }
    }
    dx
}

/// Number of window origins along an axis of length `n`.
#[inline]
pub fn grid_len(n: usize, p: usize, s: usize) -> usize {
    (n - p) / s + 1
}

/// Sliding-window patches as rows `[n_patches, c·p·p]`, row-major over origins,
/// each row laid out channel, then row, then column.
pub fn unfold(x: &[f64], (c, h, w): (usize, usize, usize), p: usize, s: usize) -> Vec<f64> {
    let (gh, gw) = (grid_len(h, p, s), grid_len(w, p, s));
    let d = c * p * p;
    let mut out = vec![0.0; gh * gw * d];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * d..(gy * gw + gx + 1) * d];
            for ch in 0..c {
                for py in 0..p {
                    let src = (ch * h + gy * s + py) * w + gx * s;
                    let dst = (ch * p + py) * p;
                    row[dst..dst + p].copy_from_slice(&x[src..src + p]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold`]: every patch value is summed back onto its source position.
pub fn fold_sum(rows: &[f64], (c, h, w): (usize, usize, usize), p: usize, s: usize) -> Vec<f64> {
    let (gh, gw) = (grid_len(h, p, s), grid_len(w, p, s));
    let d = c * p * p;
    let mut out = vec![0.0; c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &rows[(gy * gw + gx) * d..(gy * gw + gx + 1) * d];
            for ch in 0..c {
                for py in 0..p {
                    let dst = (ch * h + gy * s + py) * w + gx * s;
                    let src = (ch * p + py) * p;
                    for px in 0..p {
                        out[dst + px] += row[src + px];
                    }
                }
            }
        }
    }
    out
}

/// Mean of the patch values covering each position, 0 where none does.
/// A running mean keeps the result exact when every contribution is equal.
pub fn fold_mean(rows: &[f64], (c, h, w): (usize, usize, usize), p: usize, s: usize) -> Vec<f64> {
    let (gh, gw) = (grid_len(h, p, s), grid_len(w, p, s));
    let d = c * p * p;
    let mut out = vec![0.0; c * h * w];
    let mut seen = vec![0u32; c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &rows[(gy * gw + gx) * d..(gy * gw + gx + 1) * d];
            for ch in 0..c {
                for py in 0..p {
                    let dst = (ch * h + gy * s + py) * w + gx * s;
                    let src = (ch * p + py) * p;
                    for px in 0..p {
                        let k = dst + px;
                        seen[k] += 1;
                        out[k] += (row[src + px] - out[k]) / seen[k] as f64;
                    }
                }
            }
        }
    }
    out
}

/// How many windows cover each spatial position (`h × w`).
pub fn coverage(h: usize, w: usize, p: usize, s: usize) -> Vec<f64> {
    let (gh, gw) = (grid_len(h, p, s), grid_len(w, p, s));
    let mut cnt = vec![0.0; h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    cnt[(gy * s + py) * w + gx * s + px] += 1.0;
                }
            }
        }
    }
    cnt
}

/// Corner-aligned bilinear taps mapping `target` output samples onto a source
/// window of side `side` starting at `start`.
pub fn resize_taps(start: usize, side: usize, target: usize) -> Vec<(usize, usize, f64)> {
    (0..target)
        .map(|i| {
            let pos = if target == 1 {
                (side - 1) as f64 / 2.0
            } else {
                (i * (side - 1)) as f64 / (target - 1) as f64
            };
            let i0 = (libm::floor(pos) as usize).min(side - 1);
            let frac = pos - i0 as f64;
            let i1 = if frac > 0.0 { (i0 + 1).min(side - 1) } else { i0 };
            (start + i0, start + i1, frac)
        })
        .collect()
}

/// Start of a window of side `scale` grown (or shrunk) around the base
/// `p`-window at `origin`, shifted to stay inside an axis of length `n`.
#[inline]
pub fn window_start(origin: usize, p: usize, scale: usize, n: usize) -> usize {
    let start = origin as isize + (p as isize - scale as isize).div_euclid(2);
    start.clamp(0, (n - scale) as isize) as usize
}

/// For every base-grid location (origins of `p`-windows with stride `s`), take
/// the `scale`-sided window around it and bilinearly resize it to `p × p`.
/// Output rows `[n_loc, c·p·p]` in the same layout as [`unfold`].
pub fn window_patches(x: &[f64], (c, h, w): (usize, usize, usize), p: usize, s: usize, scale: usize) -> Vec<f64> {
    let (gh, gw) = (grid_len(h, p, s), grid_len(w, p, s));
    let d = c * p * p;
    let mut out = vec![0.0; gh * gw * d];
    for gy in 0..gh {
        let ty = resize_taps(window_start(gy * s, p, scale, h), scale, p);
        for gx in 0..gw {
            let tx = resize_taps(window_start(gx * s, p, scale, w), scale, p);
            let row = &mut out[(gy * gw + gx) * d..(gy * gw + gx + 1) * d];
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for (py, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (px, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let mut v = plane[y0 * w + x0];
                        if fx > 0.0 {
                            v = (1.0 - fx) * v + fx * plane[y0 * w + x1];
                        }
                        if fy > 0.0 {
                            let mut lo = plane[y1 * w + x0];
                            if fx > 0.0 {
                                lo = (1.0 - fx) * lo + fx * plane[y1 * w + x1];
                            }
                            v = (1.0 - fy) * v + fy * lo;
                        }
                        row[(ch * p + py) * p + px] = v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`window_patches`].
pub fn window_patches_backward(
    g: &[f64],
    (c, h, w): (usize, usize, usize),
    p: usize,
    s: usize,
    scale: usize,
) -> Vec<f64> {
    let (gh, gw) = (grid_len(h, p, s), grid_len(w, p, s));
    let d = c * p * p;
    let mut dx = vec![0.0; c * h * w];
    for gy in 0..gh {
        let ty = resize_taps(window_start(gy * s, p, scale, h), scale, p);
        for gx in 0..gw {
            let tx = resize_taps(window_start(gx * s, p, scale, w), scale, p);
            let row = &g[(gy * gw + gx) * d..(gy * gw + gx + 1) * d];
            for ch in 0..c {
                let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                for (py, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (px, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = row[(ch * p + py) * p + px];
                        plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                        plane[y0 * w + x1] += (1.0 - fy) * fx * gv;
                        plane[y1 * w + x0] += fy * (1.0 - fx) * gv;
                        plane[y1 * w + x1] += fy * fx * gv;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(2, 2), 0);
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // a stored transposed (3x2), b stored transposed (4x3)
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, 0.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..19).map(|v| v as f64).collect();
        let want: f64 = a.iter().map(|v| v * v).sum();
        assert_eq!(dot(&a, &a), want);
        assert_eq!(squared_distance(&a, &a), 0.0);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = vec![2.5; 2 * 3 * 3];
        let y = upsample2_forward(&x, (2, 3, 3));
        assert_eq!(y.len(), 2 * 6 * 6);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn window_start_is_clipped() {
        assert_eq!(window_start(0, 5, 7, 16), 0);
        assert_eq!(window_start(11, 5, 7, 16), 9);
        assert_eq!(window_start(4, 5, 3, 16), 5);
        assert_eq!(window_start(4, 5, 5, 16), 4);
    }
}
