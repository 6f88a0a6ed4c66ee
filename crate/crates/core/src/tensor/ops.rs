use serde::{Deserialize, Serialize};

use super::graph::Op;
use super::kernels::{self, ConvDims, PoolDims};
use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const VALID: ConvSpec = ConvSpec {
        stride: 1,
        dilation: 1,
        padding: 0,
    };

    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            padding,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize) -> Self {
        PoolSpec {
            kernel,
            stride,
            padding: 0,
        }
    }

    pub fn padded(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolSpec {
            kernel,
            stride,
            padding,
        }
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update running statistics.
    Train { momentum: f64 },
    /// Normalize with running statistics.
    Eval,
}

fn dims3(g: &Graph, v: Var, what: &str) -> Result<[usize; 3]> {
    match g.shape(v) {
        &[a, b, c] => Ok([a, b, c]),
        s => Err(Error::shape(format!("{what} expects [B, C, L], got {s:?}"))),
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

impl Graph {
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [batch, c_in, len] = dims3(self, x, "conv1d input")?;
        let [c_out, w_in, kernel] = match self.shape(w) {
            &[a, b, c] => [a, b, c],
            s => {
                return Err(Error::shape(format!(
                    "conv1d weight must be [Cout, Cin, k], got {s:?}"
                )))
            }
        };
        if w_in != c_in {
            return Err(Error::shape(format!(
                "conv1d weight expects {w_in} input channels, got {c_in}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(format!(
                    "conv1d bias shape {:?}",
                    self.shape(b)
                )));
            }
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::invalid(
                "conv1d stride and dilation must be at least 1",
            ));
        }
        let out = kernels::out_len(len, kernel, spec.stride, spec.dilation, spec.padding)
            .ok_or_else(|| {
                Error::shape(format!(
                    "conv1d kernel span {} exceeds padded length {}",
                    (kernel.max(1) - 1) * spec.dilation + 1,
                    len + 2 * spec.padding
                ))
            })?;
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            len,
            kernel,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            out,
        };
        let y = kernels::conv1d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &dims,
        );
        Ok(self.push(
            vec![batch, c_out, out],
            y,
            Op::Conv1d {
                x,
                w,
                b: bias,
                dims,
            },
        ))
    }

    fn pool_dims(&self, x: Var, spec: PoolSpec, what: &str) -> Result<([usize; 3], PoolDims)> {
        let [batch, ch, len] = dims3(self, x, what)?;
        if spec.stride == 0 || spec.kernel == 0 {
            return Err(Error::invalid(format!(
                "{what}: kernel and stride must be at least 1"
            )));
        }
        if spec.padding >= spec.kernel {
            return Err(Error::invalid(format!(
                "{what}: padding must be smaller than the kernel"
            )));
        }
        let out =
            kernels::out_len(len, spec.kernel, spec.stride, 1, spec.padding).ok_or_else(|| {
                Error::shape(format!(
                    "{what}: kernel {} exceeds length {len}",
                    spec.kernel
                ))
            })?;
        Ok((
            [batch, ch, out],
            PoolDims {
                rows: batch * ch,
                len,
                kernel: spec.kernel,
                stride: spec.stride,
                padding: spec.padding,
                out,
            },
        ))
    }

    /// Window maximum; padded positions never win.
    pub fn maxpool1d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (shape, dims) = self.pool_dims(x, spec, "maxpool1d")?;
        let (y, argmax) = kernels::maxpool_forward(self.value(x), &dims);
        Ok(self.push(shape.to_vec(), y, Op::MaxPool { x, argmax }))
    }

    /// Window mean; padded positions are excluded from the divisor.
    pub fn avgpool1d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (shape, dims) = self.pool_dims(x, spec, "avgpool1d")?;
        let y = kernels::avgpool_forward(self.value(x), &dims);
        Ok(self.push(shape.to_vec(), y, Op::AvgPool { x, dims }))
    }

    /// Batch normalization over `(B, L)` per channel. In training mode the
    /// updated running statistics are queued for
    /// [`ParamStore::apply_buffer_updates`].
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm1d(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        mode: BatchNormMode,
        eps: f64,
    ) -> Result<Var> {
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let rm = store.get(running_mean).data().to_vec();
        let rv = store.get(running_var).data().to_vec();
        let (y, updates) = self.batchnorm_raw(x, gv, bv, &rm, &rv, mode, eps)?;
        if let Some((m, v)) = updates {
            self.record_buffer(running_mean, m);
            self.record_buffer(running_var, v);
        }
        Ok(y)
    }

    /// Batch normalization with explicit running statistics. Returns the
    /// updated `(mean, var)` in training mode.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    pub fn batchnorm_raw(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: BatchNormMode,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let [batch, ch, len] = dims3(self, x, "batchnorm1d")?;
        if !(eps > 0.0) {
            return Err(Error::invalid("batchnorm eps must be positive"));
        }
        if batch * len == 0 {
            return Err(Error::invalid("batchnorm over an empty batch"));
        }
        if self.shape(gamma) != [ch]
            || self.shape(beta) != [ch]
            || running_mean.len() != ch
            || running_var.len() != ch
        {
            return Err(Error::shape(format!(
                "batchnorm parameters must have {ch} channels"
            )));
        }
        let xv = self.value(x);
        let (mean, var, updates) = match mode {
            BatchNormMode::Train { momentum } => {
                let (m, v) = kernels::channel_stats(xv, batch, ch, len);
                let n = (batch * len) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let new_m = running_mean
                    .iter()
                    .zip(&m)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                    .collect();
                let new_v = running_var
                    .iter()
                    .zip(&v)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b * unbias)
                    .collect();
                (m, v, Some((new_m, new_v)))
            }
            BatchNormMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gam, bet) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let o = (b * ch + c) * len;
                for j in o..o + len {
                    xhat[j] = (xv[j] - mean[c]) * inv_std[c];
                    y[j] = gam[c] * xhat[j] + bet[c];
                }
            }
        }
        let train = matches!(mode, BatchNormMode::Train { .. });
        let v = self.push(
            vec![batch, ch, len],
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                dims: [batch, ch, len],
            },
        );
        Ok((v, updates))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at 0 is 1.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self
            .value(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, y, Op::LeakyRelu { x, slope })
    }

    /// `x W^T + b` for `x: [B, D]`, `W: [Dout, D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, d_in] = match self.shape(x) {
            &[a, b] => [a, b],
            s => {
                return Err(Error::shape(format!(
                    "linear input must be [B, D], got {s:?}"
                )))
            }
        };
        let [d_out, w_in] = match self.shape(w) {
            &[a, b] => [a, b],
            s => {
                return Err(Error::shape(format!(
                    "linear weight must be [Dout, D], got {s:?}"
                )))
            }
        };
        if w_in != d_in {
            return Err(Error::shape(format!(
                "linear weight expects {w_in} inputs, got {d_in}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape(format!(
                    "linear bias shape {:?}",
                    self.shape(b)
                )));
            }
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let mut y = vec![0.0; batch * d_out];
        for bi in 0..batch {
            let xr = &xv[bi * d_in..][..d_in];
            for o in 0..d_out {
                let wr = &wv[o * d_in..][..d_in];
                let mut acc: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                if let Some(bv) = bv {
                    acc += bv[o];
                }
                y[bi * d_out + o] = acc;
            }
        }
        Ok(self.push(
            vec![batch, d_out],
            y,
            Op::Linear {
                x,
                w,
                b,
                dims: [batch, d_in, d_out],
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, y, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, y, Op::Tanh(x))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self, a, b, what)?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, y, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    /// Left-to-right sum of equally shaped values.
    pub fn sum_of(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::invalid("sum of an empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("softmax of a scalar"))?;
        if n == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let mut y = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            y.extend(e.iter().map(|v| v / s));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, Op::Softmax { x, n }))
    }

    /// Concatenation along the channel axis in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat of an empty list"))?;
        let [batch, _, len] = dims3(self, first, "concat")?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let [b, c, l] = dims3(self, x, "concat")?;
            if b != batch || l != len {
                return Err(Error::shape(format!(
                    "concat inputs disagree on batch/length: [{batch}, _, {len}] vs [{b}, _, {l}]"
                )));
            }
            sizes.push(c);
        }
        let total: usize = sizes.iter().sum();
        let mut y = Vec::with_capacity(batch * total * len);
        for b in 0..batch {
            for (&x, &c) in xs.iter().zip(&sizes) {
                y.extend_from_slice(&self.value(x)[b * c * len..][..c * len]);
            }
        }
        Ok(self.push(
            vec![batch, total, len],
            y,
            Op::Concat {
                xs: xs.to_vec(),
                sizes,
                batch,
                len,
            },
        ))
    }

    /// Gathers the listed channels in the given order.
    pub fn select_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let [batch, ch, len] = dims3(self, x, "select_channels")?;
        if idx.iter().any(|&c| c >= ch) {
            return Err(Error::shape(format!(
                "channel index out of range for {ch} channels"
            )));
        }
        let xv = self.value(x);
        let mut y = Vec::with_capacity(batch * idx.len() * len);
        for b in 0..batch {
            for &c in idx {
                y.extend_from_slice(&xv[(b * ch + c) * len..][..len]);
            }
        }
        Ok(self.push(
            vec![batch, idx.len(), len],
            y,
            Op::SelectChannels {
                x,
                idx: idx.to_vec(),
                dims: [batch, ch, len],
            },
        ))
    }

    /// Copy of `base` whose channels `idx` are replaced, in order, by the
    /// channels of `sub`. Other channels are copied bit for bit.
    pub fn merge_channels(&mut self, base: Var, sub: Var, idx: &[usize]) -> Result<Var> {
        let [batch, ch, len] = dims3(self, base, "merge_channels")?;
        let [sb, sc, sl] = dims3(self, sub, "merge_channels")?;
        if sb != batch || sl != len || sc != idx.len() {
            return Err(Error::shape(format!(
                "merge_channels: sub [{sb}, {sc}, {sl}] does not fit base [{batch}, {ch}, {len}] with {} indices",
                idx.len()
            )));
        }
        if idx.iter().any(|&c| c >= ch) {
            return Err(Error::shape("merge_channels index out of range"));
        }
        let mut y = self.value(base).to_vec();
        let sv = self.value(sub);
        for b in 0..batch {
            for (j, &c) in idx.iter().enumerate() {
                y[(b * ch + c) * len..][..len].copy_from_slice(&sv[(b * sc + j) * len..][..len]);
            }
        }
        Ok(self.push(
            vec![batch, ch, len],
            y,
            Op::MergeChannels {
                base,
                sub,
                idx: idx.to_vec(),
                dims: [batch, ch, len],
            },
        ))
    }

    /// `x * s[index]` where `s` is any tensor (typically softmax weights).
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let sv = *self
            .value(s)
            .get(index)
            .ok_or_else(|| Error::shape("scale_by index out of range"))?;
        let y = self.value(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, Op::ScaleBy { x, s, index }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    /// Frame `t` of a `[B, C, T]` sequence as `[B, C]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let [batch, ch, len] = dims3(self, x, "time_step")?;
        if t >= len {
            return Err(Error::shape(format!("time step {t} of {len}")));
        }
        let xv = self.value(x);
        let y = (0..batch * ch).map(|r| xv[r * len + t]).collect();
        Ok(self.push(
            vec![batch, ch],
            y,
            Op::TimeStep {
                x,
                t,
                dims: [batch, ch, len],
            },
        ))
    }

    /// Keeps the first `keep` frames.
    pub fn narrow_time(&mut self, x: Var, keep: usize) -> Result<Var> {
        let [batch, ch, len] = dims3(self, x, "narrow_time")?;
        if keep > len || keep == 0 {
            return Err(Error::shape(format!("cannot keep {keep} of {len} frames")));
        }
        if keep == len {
            return Ok(x);
        }
        let xv = self.value(x);
        let mut y = Vec::with_capacity(batch * ch * keep);
        for r in 0..batch * ch {
            y.extend_from_slice(&xv[r * len..][..keep]);
        }
        Ok(self.push(
            vec![batch, ch, keep],
            y,
            Op::NarrowTime {
                x,
                keep,
                dims: [batch, ch, len],
            },
        ))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, y, Op::Abs(x))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let y = self.value(x).iter().map(|v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, y, Op::Clamp { x, lo, hi })
    }

    /// Windowed band-pass kernels `[C, 1, K]` from band edges in Hz.
    pub fn sinc_kernels(
        &mut self,
        f1: Var,
        f2: Var,
        window: &[f64],
        sample_rate: f64,
    ) -> Result<Var> {
        let c = self.value(f1).len();
        if self.shape(f1) != [c] || self.shape(f2) != [c] {
            return Err(Error::shape(
                "band edges must be two vectors of equal length",
            ));
        }
        let k = window.len();
        if k < 2 {
            return Err(Error::invalid("sinc kernels need at least 2 taps"));
        }
        let centre = (k as f64 - 1.0) / 2.0;
        let (lo, hi) = (self.value(f1), self.value(f2));
        let mut y = Vec::with_capacity(c * k);
        for ch in 0..c {
            let (a, b) = (lo[ch] / sample_rate, hi[ch] / sample_rate);
            for (t, &wt) in window.iter().enumerate() {
                let n = t as f64 - centre;
                y.push((kernels::band_term(b, n) - kernels::band_term(a, n)) * wt);
            }
        }
        Ok(self.push(
            vec![c, 1, k],
            y,
            Op::SincKernels {
                f1,
                f2,
                window: window.to_vec(),
                sample_rate,
            },
        ))
    }

    /// Zeroes `count` consecutive slices along the first axis starting at `start`.
    pub fn zero_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::shape("zero_rows of a scalar"))?;
        if start + count > rows {
            return Err(Error::shape(format!(
                "rows [{start}, {}) out of {rows}",
                start + count
            )));
        }
        let row = shape[1..].iter().product::<usize>();
        let mut y = self.value(x).to_vec();
        y[start * row..(start + count) * row]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        Ok(self.push(
            shape,
            y,
            Op::ZeroRows {
                x,
                start,
                count,
                row,
            },
        ))
    }

    /// Cosine similarity of every embedding row with every class row,
    /// `[B, D] x [K, D] -> [B, K]`; norms are clamped below at `eps`.
    pub fn cosine(&mut self, e: Var, w: Var, eps: f64) -> Result<Var> {
        let ([batch, dim], [classes, wd]) = match (self.shape(e), self.shape(w)) {
            (&[a, b], &[c, d]) => ([a, b], [c, d]),
            (s, t) => {
                return Err(Error::shape(format!(
                    "cosine expects [B, D] and [K, D], got {s:?}, {t:?}"
                )))
            }
        };
        if dim != wd {
            return Err(Error::shape(format!(
                "cosine: embedding dim {dim} vs class dim {wd}"
            )));
        }
        let (ev, wv) = (self.value(e), self.value(w));
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
        let mut y = Vec::with_capacity(batch * classes);
        for er in ev.chunks(dim) {
            let ne = norm(er);
            for wr in wv.chunks(dim) {
                let dot: f64 = er.iter().zip(wr).map(|(a, b)| a * b).sum();
                y.push(dot / (ne * norm(wr)));
            }
        }
        Ok(self.push(
            vec![batch, classes],
            y,
            Op::Cosine {
                e,
                w,
                eps,
                dims: [batch, dim, classes],
            },
        ))
    }

    /// Mean over batch and classes of `(x - onehot(label))^2`.
    pub fn mse_onehot(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let [batch, classes] = match self.shape(x) {
            &[a, b] => [a, b],
            s => {
                return Err(Error::shape(format!(
                    "mse_onehot expects [B, K], got {s:?}"
                )))
            }
        };
        if labels.len() != batch {
            return Err(Error::shape(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        let xv = self.value(x);
        let mut s = 0.0;
        for (b, &lab) in labels.iter().enumerate() {
            for c in 0..classes {
                let t = if c == lab { 1.0 } else { 0.0 };
                let d = xv[b * classes + c] - t;
                s += d * d;
            }
        }
        let loss = s / xv.len() as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::MseOneHot {
                x,
                labels: labels.to_vec(),
                classes,
            },
        ))
    }
}
