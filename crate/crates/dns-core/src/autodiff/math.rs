//! Raw array routines shared by the tape's forward and backward passes.

use crate::tensor::strides_for;

/// `a: [m,k]`, `b: [k,n]` -> `[m,n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `a: [m,k]`, `b: [n,k]` -> `[m,n]` (contract over the shared trailing axis).
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// `a: [m,k]` read transposed, `b: [m,n]` -> `[k,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisGeom {
    pub outer: usize,
    pub axis_len: usize,
    pub inner: usize,
}

pub(crate) fn axis_geom(shape: &[usize], axis: usize) -> AxisGeom {
    AxisGeom {
        outer: shape[..axis].iter().product(),
        axis_len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

pub(crate) fn reduce_axis(
    data: &[f64],
    geom: &AxisGeom,
    fold: impl Fn(f64, f64, usize) -> f64,
    init: f64,
) -> Vec<f64> {
    let mut out = vec![init; geom.outer * geom.inner];
    for o in 0..geom.outer {
        for k in 0..geom.axis_len {
            for i in 0..geom.inner {
                let slot = o * geom.inner + i;
                out[slot] = fold(out[slot], data[(o * geom.axis_len + k) * geom.inner + i], k);
            }
        }
    }
    out
}

/// Row-wise softmax over trailing blocks of length `d` with max subtraction.
pub(crate) fn softmax_rows(data: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..data.len() / d {
        let row = &data[r * d..(r + 1) * d];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..d {
            let e = (row[c] - max).exp();
            out[r * d + c] = e;
            sum += e;
        }
        for c in 0..d {
            out[r * d + c] /= sum;
        }
    }
    out
}

pub(crate) fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Rearranges `data` so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_forward(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let old_strides = strides_for(shape);
    let new_strides = strides_for(&new_shape);
    let mut out = vec![0.0; data.len()];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut rem = lin;
        let mut src = 0usize;
        for (i, &stride) in new_strides.iter().enumerate() {
            let idx = rem / stride;
            rem %= stride;
            src += idx * old_strides[axes[i]];
        }
        *slot = data[src];
    }
    (out, new_shape)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_same_forward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        let obase = co * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[co];
                for ci in 0..cin {
                    let xbase = ci * h * w;
                    let wbase = (co * cin + ci) * kh * kw;
                    for u in 0..kh {
                        let si = i as isize + u as isize - ph as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let sj = j as isize + v as isize - pw as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            acc += x[xbase + si as usize * w + sj as usize] * wgt[wbase + u * kw + v];
                        }
                    }
                }
                out[obase + i * w + j] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_same_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    gout: &[f64],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = vec![0.0; if want_x { cin * h * w } else { 0 }];
    let mut gw = vec![0.0; if want_w { cout * cin * kh * kw } else { 0 }];
    let mut gb = vec![0.0; if want_b { cout } else { 0 }];
    for co in 0..cout {
        let obase = co * h * w;
        if want_b {
            gb[co] = gout[obase..obase + h * w].iter().sum();
        }
        for i in 0..h {
            for j in 0..w {
                let go = gout[obase + i * w + j];
                if go == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    let xbase = ci * h * w;
                    let wbase = (co * cin + ci) * kh * kw;
                    for u in 0..kh {
                        let si = i as isize + u as isize - ph as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let sj = j as isize + v as isize - pw as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let xi = xbase + si as usize * w + sj as usize;
                            if want_x {
                                gx[xi] += go * wgt[wbase + u * kw + v];
                            }
                            if want_w {
                                gw[wbase + u * kw + v] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Ceil-mode 2x2/stride-2 max pooling. Returns values, per-slot argmax as a
/// linear index into the input, and the output height/width.
pub(crate) fn maxpool2_forward(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for i in 2 * oi..(2 * oi + 2).min(h) {
                    for j in 2 * oj..(2 * oj + 2).min(w) {
                        let idx = ch * h * w + i * w + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let slot = ch * oh * ow + oi * ow + oj;
                out[slot] = best;
                arg[slot] = best_idx;
            }
        }
    }
    (out, arg, oh, ow)
}

/// Folds an out-of-range index back into `[0, n)` by edge-inclusive mirroring.
pub(crate) fn fold_symmetric(mut p: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if p < 0 {
            p = -p - 1;
        } else if p >= n {
            p = 2 * n - 1 - p;
        } else {
            return p as usize;
        }
    }
}
