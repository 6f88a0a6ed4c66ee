//! Sinc band-pass filterbank (or a plain learnable convolution) applied to
//! the raw waveform, followed by max-pooling, batch norm and LeakyReLU.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, BatchNorm, Mode};
use crate::tensor::{ConvSpec, Graph, ParamGroup, ParamId, ParamStore, PoolSpec, Tensor, Var};

/// Narrowest band a sinc filter may have, in Hz.
pub const MIN_BAND_HZ: f64 = 50.0;
/// Lowest band edge on the Mel and inverse-Mel scales, in Hz.
pub const LOG_SCALE_LOW_HZ: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontendKind {
    SincMel,
    SincInvMel,
    SincLinear,
    Conv0,
}

impl FrontendKind {
    pub const ALL: [FrontendKind; 4] = [
        FrontendKind::SincMel,
        FrontendKind::SincInvMel,
        FrontendKind::SincLinear,
        FrontendKind::Conv0,
    ];

    pub fn is_sinc(self) -> bool {
        self != FrontendKind::Conv0
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FrontendKind::SincMel => "sinc-mel",
            FrontendKind::SincInvMel => "sinc-inv-mel",
            FrontendKind::SincLinear => "sinc-linear",
            FrontendKind::Conv0 => "conv0",
        }
    }
}

impl fmt::Display for FrontendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrontendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FrontendKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown frontend `{s}` (expected sinc-mel, sinc-inv-mel, sinc-linear or conv0)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub kind: FrontendKind,
    /// Ignored for `Conv0`, which is always learnable.
    pub learnable: bool,
    pub filters: usize,
    pub kernel_len: usize,
    pub sample_rate: u32,
    pub pool: usize,
    /// Upper bound (exclusive) on the number of masked filters per training pass.
    pub mask_max: usize,
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(Error::Config("frontend needs at least one filter".into()));
        }
        if self.kernel_len < 2 {
            return Err(Error::Config(
                "frontend kernel_len must be at least 2".into(),
            ));
        }
        if self.pool == 0 {
            return Err(Error::Config("frontend pool must be at least 1".into()));
        }
        if self.mask_max > self.filters {
            return Err(Error::Config(format!(
                "mask_max {} exceeds the filter count {}",
                self.mask_max, self.filters
            )));
        }
        if (self.sample_rate as f64) / 2.0 <= LOG_SCALE_LOW_HZ + MIN_BAND_HZ {
            return Err(Error::Config(format!(
                "sample rate {} Hz is too low",
                self.sample_rate
            )));
        }
        Ok(())
    }

    /// Output frames for an input of `samples` samples.
    pub fn out_len(&self, samples: usize) -> Option<usize> {
        samples
            .checked_sub(self.kernel_len - 1)
            .map(|n| n / self.pool)
            .filter(|&n| n > 0)
    }
}

pub fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `C + 1` band edges for a sinc scale; filter `c` spans `edges[c]..edges[c + 1]`.
pub fn band_edges(kind: FrontendKind, filters: usize, sample_rate: f64) -> Result<Vec<f64>> {
    if filters == 0 {
        return Err(Error::invalid("a filterbank needs at least one filter"));
    }
    let hi = sample_rate / 2.0;
    let steps = filters as f64;
    let mel_edges = || {
        let (a, b) = (mel(LOG_SCALE_LOW_HZ), mel(hi));
        (0..=filters)
            .map(|i| mel_to_hz(a + (b - a) * i as f64 / steps))
            .collect::<Vec<_>>()
    };
    match kind {
        FrontendKind::SincMel => Ok(mel_edges()),
        FrontendKind::SincInvMel => {
            let m = mel_edges();
            Ok((0..=filters)
                .map(|i| LOG_SCALE_LOW_HZ + hi - m[filters - i])
                .collect())
        }
        FrontendKind::SincLinear => Ok((0..=filters).map(|i| hi * i as f64 / steps).collect()),
        FrontendKind::Conv0 => Err(Error::invalid("conv0 has no frequency scale")),
    }
}

/// Initial `(f1, f2)` per filter, before the clamping rule.
pub fn init_scale(
    kind: FrontendKind,
    filters: usize,
    sample_rate: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let e = band_edges(kind, filters, sample_rate)?;
    Ok((e[..filters].to_vec(), e[1..].to_vec()))
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2 pi t / (K - 1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    let d = (len.max(2) - 1) as f64;
    (0..len)
        .map(|t| 0.54 - 0.46 * (2.0 * PI * t as f64 / d).cos())
        .collect()
}

/// The clamping rule mapping raw learnable values to valid band edges.
pub fn clamp_band(raw_low: f64, raw_band: f64, sample_rate: f64) -> (f64, f64) {
    let nyq = sample_rate / 2.0;
    let f1 = raw_low.abs().clamp(0.0, nyq - MIN_BAND_HZ);
    let f2 = (f1 + raw_band.abs().max(MIN_BAND_HZ)).min(nyq);
    (f1, f2)
}

/// A concrete bank of band edges, detached from any graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SincFilterBank {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub kernel_len: usize,
    pub sample_rate: f64,
    pub learnable: bool,
}

impl SincFilterBank {
    pub fn new(f1: Vec<f64>, f2: Vec<f64>, kernel_len: usize, sample_rate: f64) -> Result<Self> {
        let bank = SincFilterBank {
            f1,
            f2,
            kernel_len,
            sample_rate,
            learnable: false,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn filters(&self) -> usize {
        self.f1.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_len < 2 {
            return Err(Error::invalid("sinc kernels need at least 2 taps"));
        }
        if self.f1.len() != self.f2.len() || self.f1.is_empty() {
            return Err(Error::shape(
                "band edge arrays must be non-empty and of equal length",
            ));
        }
        let nyq = self.sample_rate / 2.0;
        for (c, (&a, &b)) in self.f1.iter().zip(&self.f2).enumerate() {
            if !(0.0 <= a && a <= b && b <= nyq) {
                return Err(Error::invalid(format!(
                    "filter {c}: invalid band ({a}, {b}) for Nyquist {nyq}"
                )));
            }
        }
        Ok(())
    }

    /// Windowed kernels `[C, 1, K]`.
    pub fn build_kernels(&self) -> Result<Tensor> {
        self.validate()?;
        let mut g = Graph::new();
        let f1 = g.input([self.filters()], self.f1.clone())?;
        let f2 = g.input([self.filters()], self.f2.clone())?;
        let k = g.sinc_kernels(f1, f2, &hamming(self.kernel_len), self.sample_rate)?;
        Ok(g.to_tensor(k))
    }
}

/// Contiguous range of filters zeroed for one training pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterMask {
    pub start: usize,
    pub count: usize,
}

/// Draws `f` uniformly from `[0, F)`, then `C1` from `[0, C - f)`. `F` of 0
/// or 1 draws nothing and never masks.
pub fn sample_mask(rng: &mut impl Rng, filters: usize, max: usize) -> Result<FilterMask> {
    if max > filters {
        return Err(Error::invalid(format!(
            "mask bound {max} exceeds {filters} filters"
        )));
    }
    if max <= 1 {
        return Ok(FilterMask { start: 0, count: 0 });
    }
    let count = rng.random_range(0..max);
    let start = rng.random_range(0..filters - count);
    Ok(FilterMask { start, count })
}

#[derive(Clone, Debug)]
enum Kernels {
    Sinc { raw_low: ParamId, raw_band: ParamId },
    Conv0 { weight: ParamId },
}

/// The frontend block as bound into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Frontend {
    pub config: FrontendConfig,
    kernels: Kernels,
    window: Vec<f64>,
    bn: BatchNorm,
    slope: f64,
}

impl Frontend {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &FrontendConfig,
        slope: f64,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.filters;
        let kernels = if config.kind.is_sinc() {
            let (f1, f2) = init_scale(config.kind, c, config.sample_rate as f64)?;
            let band: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| b - a).collect();
            let raw_low = store.register(
                "frontend.raw_low",
                ParamGroup::Frontend,
                Tensor::new([c], f1)?,
            );
            let raw_band = store.register(
                "frontend.raw_band",
                ParamGroup::Frontend,
                Tensor::new([c], band)?,
            );
            if !config.learnable {
                store.get_mut(raw_low).set_requires_grad(false);
                store.get_mut(raw_band).set_requires_grad(false);
            }
            Kernels::Sinc { raw_low, raw_band }
        } else {
            let bound = 1.0 / (config.kernel_len as f64).sqrt();
            let w = uniform(rng, &[c, 1, config.kernel_len], bound);
            Kernels::Conv0 {
                weight: store.register("frontend.conv0", ParamGroup::Frontend, w),
            }
        };
        Ok(Frontend {
            config: config.clone(),
            kernels,
            window: hamming(config.kernel_len),
            bn: BatchNorm::new(store, "frontend.bn", c),
            slope,
        })
    }

    /// Frontend kernel parameters (band edges or Conv_0 weights), excluding batch norm.
    pub fn kernel_params(&self) -> Vec<ParamId> {
        match self.kernels {
            Kernels::Sinc { raw_low, raw_band } => vec![raw_low, raw_band],
            Kernels::Conv0 { weight } => vec![weight],
        }
    }

    /// Clamped band edges, or `None` for Conv_0.
    pub fn bank(&self, store: &ParamStore) -> Option<SincFilterBank> {
        let Kernels::Sinc { raw_low, raw_band } = self.kernels else {
            return None;
        };
        let sr = self.config.sample_rate as f64;
        let (f1, f2) = store
            .get(raw_low)
            .data()
            .iter()
            .zip(store.get(raw_band).data())
            .map(|(&l, &b)| clamp_band(l, b, sr))
            .unzip();
        Some(SincFilterBank {
            f1,
            f2,
            kernel_len: self.config.kernel_len,
            sample_rate: sr,
            learnable: store.get(raw_low).requires_grad(),
        })
    }

    /// Kernels `[C, 1, K]` for the current parameters, on the tape.
    pub fn kernels(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        match self.kernels {
            Kernels::Sinc { raw_low, raw_band } => {
                let sr = self.config.sample_rate as f64;
                let nyq = sr / 2.0;
                let low = g.param(store, raw_low);
                let band = g.param(store, raw_band);
                let low = g.abs(low);
                let f1 = g.clamp(low, 0.0, nyq - MIN_BAND_HZ);
                let band = g.abs(band);
                let band = g.clamp(band, MIN_BAND_HZ, f64::INFINITY);
                let f2 = g.add(f1, band)?;
                let f2 = g.clamp(f2, f64::NEG_INFINITY, nyq);
                g.sinc_kernels(f1, f2, &self.window, sr)
            }
            Kernels::Conv0 { weight } => Ok(g.param(store, weight)),
        }
    }

    /// `[B, 1, L] -> [B, C, (L - K + 1) / pool]`. The mask is honoured only in
    /// training mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        wave: Var,
        mask: Option<FilterMask>,
        mode: Mode,
    ) -> Result<Var> {
        match g.shape(wave) {
            &[_, 1, len] if len >= self.config.kernel_len => {}
            s => {
                return Err(Error::shape(format!(
                    "frontend expects [B, 1, L] with L >= {}, got {s:?}",
                    self.config.kernel_len
                )))
            }
        }
        let mut k = self.kernels(g, store)?;
        if let (Some(m), Mode::Train) = (mask, mode) {
            if m.count > 0 {
                k = g.zero_rows(k, m.start, m.count)?;
            }
        }
        let y = g.conv1d(wave, k, None, ConvSpec::VALID)?;
        let y = g.maxpool1d(y, PoolSpec::new(self.config.pool, self.config.pool))?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.leaky_relu(y, self.slope))
    }
}
