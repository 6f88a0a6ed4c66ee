//! Slice-level forward/backward kernels. Layouts are row-major `[B, C, L]`.

/// Output length of a 1-D sliding window.
pub fn out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<usize> {
    let span = (kernel - 1) * dilation + 1;
    let padded = len + 2 * padding;
    if kernel == 0 || stride == 0 || span > padded {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Range of output positions `t` for which `t * stride + offset` falls in `[0, len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    // largest t with t*s + offset <= len - 1
    let hi_excl = if (len as isize) - 1 - offset < 0 {
        0
    } else {
        ((len as isize - 1 - offset) / s + 1) as usize
    };
    let lo = lo as usize;
    (lo.min(out), hi_excl.min(out))
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out: usize,
}

pub fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let mut y = vec![0.0; d.batch * d.c_out * d.out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let row = &mut y[(b * d.c_out + co) * d.out..][..d.out];
            if let Some(bias) = bias {
                row.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..d.c_in {
                let xr = &x[(b * d.c_in + ci) * d.len..][..d.len];
                let wr = &w[(co * d.c_in + ci) * d.kernel..][..d.kernel];
                for (k, &wv) in wr.iter().enumerate() {
                    let off = (k * d.dilation) as isize - d.padding as isize;
                    let (lo, hi) = valid_range(off, d.stride, d.len, d.out);
                    if lo >= hi {
                        continue;
                    }
                    if d.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        let xs = &xr[start..start + (hi - lo)];
                        for (o, &xv) in row[lo..hi].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            row[t] += wv * xr[(t as isize * d.stride as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates input, weight and bias gradients for [`conv1d_forward`].
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: &ConvDims,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(gb) = gb {
        for b in 0..d.batch {
            for co in 0..d.c_out {
                gb[co] += gy[(b * d.c_out + co) * d.out..][..d.out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let gr = &gy[(b * d.c_out + co) * d.out..][..d.out];
            for ci in 0..d.c_in {
                let xbase = (b * d.c_in + ci) * d.len;
                let wbase = (co * d.c_in + ci) * d.kernel;
                for k in 0..d.kernel {
                    let off = (k * d.dilation) as isize - d.padding as isize;
                    let (lo, hi) = valid_range(off, d.stride, d.len, d.out);
                    if lo >= hi {
                        continue;
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        let mut acc = 0.0;
                        if d.stride == 1 {
                            let start = xbase + (lo as isize + off) as usize;
                            for (g, xv) in gr[lo..hi].iter().zip(&x[start..start + (hi - lo)]) {
                                acc += g * xv;
                            }
                        } else {
                            for t in lo..hi {
                                acc += gr[t]
                                    * x[xbase + (t as isize * d.stride as isize + off) as usize];
                            }
                        }
                        gw[wbase + k] += acc;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[wbase + k];
                        if d.stride == 1 {
                            let start = xbase + (lo as isize + off) as usize;
                            for (gxv, g) in gx[start..start + (hi - lo)].iter_mut().zip(&gr[lo..hi])
                            {
                                *gxv += wv * g;
                            }
                        } else {
                            for t in lo..hi {
                                gx[xbase + (t as isize * d.stride as isize + off) as usize] +=
                                    wv * gr[t];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoolDims {
    pub rows: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out: usize,
}

/// Window max over valid (unpadded) positions; returns values and flat argmax
/// indices, first occurrence on ties.
pub fn maxpool_forward(x: &[f64], d: &PoolDims) -> (Vec<f64>, Vec<usize>) {
    let mut y = Vec::with_capacity(d.rows * d.out);
    let mut arg = Vec::with_capacity(d.rows * d.out);
    for r in 0..d.rows {
        let base = r * d.len;
        for t in 0..d.out {
            let start = (t * d.stride) as isize - d.padding as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + d.kernel as isize) as usize).min(d.len);
            let mut best = lo;
            for i in lo + 1..hi {
                if x[base + i] > x[base + best] {
                    best = i;
                }
            }
            y.push(x[base + best]);
            arg.push(base + best);
        }
    }
    (y, arg)
}

/// Window mean over valid positions only (padding excluded from the count).
pub fn avgpool_forward(x: &[f64], d: &PoolDims) -> Vec<f64> {
    let mut y = Vec::with_capacity(d.rows * d.out);
    for r in 0..d.rows {
        let base = r * d.len;
        for t in 0..d.out {
            let (lo, hi) = avg_window(t, d);
            let s: f64 = x[base + lo..base + hi].iter().sum();
            y.push(s / (hi - lo) as f64);
        }
    }
    y
}

#[inline]
pub fn avg_window(t: usize, d: &PoolDims) -> (usize, usize) {
    let start = (t * d.stride) as isize - d.padding as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + d.kernel as isize) as usize).min(d.len);
    (lo, hi)
}

pub fn avgpool_backward(gy: &[f64], d: &PoolDims, gx: &mut [f64]) {
    for r in 0..d.rows {
        let base = r * d.len;
        for t in 0..d.out {
            let (lo, hi) = avg_window(t, d);
            let share = gy[r * d.out + t] / (hi - lo) as f64;
            gx[base + lo..base + hi]
                .iter_mut()
                .for_each(|v| *v += share);
        }
    }
}

/// Per-channel batch statistics over `(B, L)`: biased mean and variance.
pub fn channel_stats(x: &[f64], batch: usize, channels: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * len) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * channels + c) * len..][..len].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for b in 0..batch {
            for &xv in &x[(b * channels + c) * len..][..len] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `2 f sinc(2 pi f n)` with `f` in cycles per sample, `sinc(0) = 1`.
#[inline]
pub fn band_term(f: f64, n: f64) -> f64 {
    if n == 0.0 {
        2.0 * f
    } else {
        (2.0 * std::f64::consts::PI * f * n).sin() / (std::f64::consts::PI * n)
    }
}

/// Derivative of [`band_term`] with respect to `f` (cycles per sample).
#[inline]
pub fn band_term_df(f: f64, n: f64) -> f64 {
    if n == 0.0 {
        2.0
    } else {
        2.0 * (2.0 * std::f64::consts::PI * f * n).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(len: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> ConvDims {
        ConvDims {
            batch: 1,
            c_in: 1,
            c_out: 1,
            len,
            kernel,
            stride,
            dilation,
            padding,
            out: 0,
        }
    }

    /// Direct summation with explicit zero padding.
    fn naive(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut padded = vec![0.0; d.padding];
        padded.extend_from_slice(x);
        padded.resize(padded.len() + d.padding, 0.0);
        (0..d.out)
            .map(|t| {
                (0..d.kernel)
                    .map(|k| w[k] * padded[t * d.stride + k * d.dilation])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn valid_range_matches_naive_over_grid() {
        for len in 1..9 {
            for kernel in 1..4 {
                for stride in 1..4 {
                    for dilation in 1..3 {
                        for padding in 0..3 {
                            let Some(out) = out_len(len, kernel, stride, dilation, padding) else {
                                continue;
                            };
                            let d = ConvDims {
                                out,
                                ..dims(len, kernel, stride, dilation, padding)
                            };
                            let x: Vec<f64> = (0..len).map(|i| (i as f64 * 0.7).sin()).collect();
                            let w: Vec<f64> = (0..kernel).map(|i| 1.0 + i as f64).collect();
                            let got = conv1d_forward(&x, &w, None, &d);
                            let want = naive(&x, &w, &d);
                            for (a, b) in got.iter().zip(&want) {
                                assert!(
                                    (a - b).abs() < 1e-12,
                                    "{len} {kernel} {stride} {dilation} {padding}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }
}
