//! Batched layer kernels over flat row-major buffers.
//!
//! Work is split so that every output element is produced by exactly one task,
//! with a fixed summation order inside the task.

use crate::par;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.out_ch * self.oh * self.ow
    }

    /// Output index range `[lo, hi)` along one axis whose input tap
    /// `o*stride + tap - pad` lands inside `0..size`.
    fn valid_range(&self, tap: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        // largest o with o*s + tap - pad <= size - 1
        let hi = if size + self.pad > tap {
            ((size + self.pad - tap - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub fn conv2d_forward(x: &[f32], n: usize, g: ConvGeom, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; n * g.out_len()];
    let plane = g.oh * g.ow;
    par::for_each_chunk(&mut out, g.out_len(), |s, y| {
        let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
        let mut acc = vec![0.0f64; plane];
        for o in 0..g.out_ch {
            acc.fill(bias[o] as f64);
            for c in 0..g.in_ch {
                let xc = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
                for kh in 0..g.k {
                    let (oy0, oy1) = g.valid_range(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let wv = weight[((o * g.in_ch + c) * g.k + kh) * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let wv = wv as f64;
                        let (ox0, ox1) = g.valid_range(kw, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.pad;
                            let row = &xc[iy * g.w..(iy + 1) * g.w];
                            let arow = &mut acc[oy * g.ow..(oy + 1) * g.ow];
                            for ox in ox0..ox1 {
                                arow[ox] += wv * row[ox * g.stride + kw - g.pad] as f64;
                            }
                        }
                    }
                }
            }
            for (dst, a) in y[o * plane..(o + 1) * plane].iter_mut().zip(&acc) {
                *dst = *a as f32;
            }
        }
    });
    out
}

/// Returns `(d_weight, d_bias, d_input)`.
pub fn conv2d_backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    g: ConvGeom,
    weight: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let plane = g.oh * g.ow;
    let wlen = g.in_ch * g.k * g.k;

    let mut dw = vec![0.0f32; g.out_ch * wlen];
    par::for_each_chunk(&mut dw, wlen, |o, dwo| {
        let mut acc = vec![0.0f64; wlen];
        for s in 0..n {
            let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
            let dys = &dy[s * g.out_len() + o * plane..s * g.out_len() + (o + 1) * plane];
            for c in 0..g.in_ch {
                let xc = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
                for kh in 0..g.k {
                    let (oy0, oy1) = g.valid_range(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let (ox0, ox1) = g.valid_range(kw, g.w, g.ow);
                        let mut sum = 0.0f64;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.pad;
                            let row = &xc[iy * g.w..(iy + 1) * g.w];
                            let drow = &dys[oy * g.ow..(oy + 1) * g.ow];
                            for ox in ox0..ox1 {
                                sum += drow[ox] as f64 * row[ox * g.stride + kw - g.pad] as f64;
                            }
                        }
                        acc[(c * g.k + kh) * g.k + kw] += sum;
                    }
                }
            }
        }
        for (d, a) in dwo.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    });

    let db: Vec<f32> = (0..g.out_ch)
        .map(|o| {
            let mut acc = 0.0f64;
            for s in 0..n {
                let base = s * g.out_len() + o * plane;
                acc += dy[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            acc as f32
        })
        .collect();

    let mut dx = vec![0.0f32; n * g.in_len()];
    par::for_each_chunk(&mut dx, g.in_len(), |s, dxs| {
        let dys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
        let mut acc = vec![0.0f64; g.in_len()];
        for o in 0..g.out_ch {
            let dyo = &dys[o * plane..(o + 1) * plane];
            for c in 0..g.in_ch {
                let ac = &mut acc[c * g.h * g.w..(c + 1) * g.h * g.w];
                for kh in 0..g.k {
                    let (oy0, oy1) = g.valid_range(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let wv = weight[((o * g.in_ch + c) * g.k + kh) * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let wv = wv as f64;
                        let (ox0, ox1) = g.valid_range(kw, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.pad;
                            for ox in ox0..ox1 {
                                ac[iy * g.w + ox * g.stride + kw - g.pad] +=
                                    wv * dyo[oy * g.ow + ox] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dxs.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    });

    (dw, db, dx)
}

pub fn dense_forward(x: &[f32], n: usize, fin: usize, fout: usize, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; n * fout];
    par::for_each_chunk(&mut out, fout, |s, y| {
        let xs = &x[s * fin..(s + 1) * fin];
        for (o, dst) in y.iter_mut().enumerate() {
            let wrow = &weight[o * fin..(o + 1) * fin];
            let mut acc = bias[o] as f64;
            for (w, v) in wrow.iter().zip(xs) {
                acc += *w as f64 * *v as f64;
            }
            *dst = acc as f32;
        }
    });
    out
}

pub fn dense_backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    fin: usize,
    fout: usize,
    weight: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dw = vec![0.0f32; fout * fin];
    par::for_each_chunk(&mut dw, fin, |o, row| {
        let mut acc = vec![0.0f64; fin];
        for s in 0..n {
            let g = dy[s * fout + o] as f64;
            if g == 0.0 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(&x[s * fin..(s + 1) * fin]) {
                *a += g * *v as f64;
            }
        }
        for (d, a) in row.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    });
    let db = (0..fout)
        .map(|o| (0..n).map(|s| dy[s * fout + o] as f64).sum::<f64>() as f32)
        .collect();
    let mut dx = vec![0.0f32; n * fin];
    par::for_each_chunk(&mut dx, fin, |s, row| {
        let mut acc = vec![0.0f64; fin];
        for o in 0..fout {
            let g = dy[s * fout + o] as f64;
            if g == 0.0 {
                continue;
            }
            for (a, w) in acc.iter_mut().zip(&weight[o * fin..(o + 1) * fin]) {
                *a += g * *w as f64;
            }
        }
        for (d, a) in row.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    });
    (dw, db, dx)
}

/// Max pooling; ties go to the first (lowest-index) element of the window.
/// Returns outputs and the flat input index each output was taken from.
pub fn maxpool_forward(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<f32>, Vec<u32>) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = (oy * stride + ky) * w + ox * stride + kx;
                        if best_i == usize::MAX || xp[i] > best {
                            best = xp[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = (p * h * w + best_i) as u32;
            }
        }
    }
    (out, arg)
}
