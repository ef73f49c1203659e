//! Bilinear and nearest-neighbor resampling on row-major planes.
//!
//! Sample positions use the half-pixel convention
//! `src = (dst + 0.5) * in / out - 0.5`, clamped to the source grid.

use crate::autodiff::SparseRows;

/// Two-tap weights along one axis for every output coordinate.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// The bilinear resampling operator from an `in_h × in_w` plane to
/// `out_h × out_w`, as a sparse matrix acting on flattened planes.
pub fn bilinear_operator(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> SparseRows {
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let mut rows = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut push = |idx: usize, w: f64| {
                if w == 0.0 {
                    return;
                }
                if let Some(t) = taps.iter_mut().find(|t| t.0 == idx) {
                    t.1 += w;
                } else {
                    taps.push((idx, w));
                }
            };
            push(y0 * in_w + x0, (1.0 - fy) * (1.0 - fx));
            push(y0 * in_w + x1, (1.0 - fy) * fx);
            push(y1 * in_w + x0, fy * (1.0 - fx));
            push(y1 * in_w + x1, fy * fx);
            rows.push(taps);
        }
    }
    SparseRows {
        in_rows: in_h * in_w,
        rows,
    }
}

/// Bilinear resize of an interleaved `h × w × channels` buffer.
pub fn resize_bilinear(
    src: &[f64],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w * channels];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * w + x) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_w + ox) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Nearest-neighbor source index for each output coordinate.
fn nearest_index(input: usize, output: usize) -> Vec<usize> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(input - 1))
        .collect()
}

pub fn resize_nearest(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let iy = nearest_index(h, out_h);
    let ix = nearest_index(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &y in &iy {
        for &x in &ix {
            out.push(src[y * w + x]);
        }
    }
    out
}
