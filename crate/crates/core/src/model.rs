//! The full network: frontend, strided stem convolution, stacked cells,
//! GRU, embedding layer and the cosine (P2SGrad) head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{sample_mask, Frontend, FrontendConfig, FrontendKind};
use crate::nn::{uniform, BatchNorm, Conv1d, Gru, Linear, Mode};
use crate::search::{
    eval_channel_mask, sample_channel_mask, Alpha, CellKind, CellSpec, DiscreteCell, Genotype,
    SearchCell, EDGES, INTERMEDIATE,
};
use crate::tensor::{ConvSpec, Graph, ParamGroup, ParamId, ParamStore, Var};

pub const CLASSES: usize = 2;
/// Class index of bona fide speech; its cosine is the detection score.
pub const BONAFIDE: usize = 0;
pub const SPOOF: usize = 1;
/// Lower bound on norms inside the cosine head.
pub const COSINE_EPS: f64 = 1e-12;
const STEM_KERNEL: usize = 3;
const STEM_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    /// Input length in samples.
    pub samples: usize,
    /// Stem width and node width of the first cells.
    pub channels: usize,
    pub cells: usize,
    pub expand_positions: Vec<usize>,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub embedding_dim: usize,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// 16 kHz, 4 s inputs, 64 fixed Mel sinc filters of 128 taps, 8 cells
    /// with expand cells at 1/3 and 2/3 depth, three 1024-unit GRU layers.
    pub fn full() -> Self {
        ModelConfig {
            frontend: FrontendConfig {
                kind: FrontendKind::SincMel,
                learnable: false,
                filters: 64,
                kernel_len: 128,
                sample_rate: 16000,
                pool: 3,
                mask_max: 16,
            },
            samples: 64000,
            channels: 64,
            cells: 8,
            expand_positions: vec![2, 5],
            gru_hidden: 1024,
            gru_layers: 3,
            embedding_dim: 1024,
            leaky_slope: 0.3,
        }
    }

    /// 4 kHz, 1 s inputs, 8 channels, 4 cells with one expand cell, one
    /// 64-unit GRU layer.
    pub fn toy() -> Self {
        ModelConfig {
            frontend: FrontendConfig {
                kind: FrontendKind::SincLinear,
                learnable: false,
                filters: 16,
                kernel_len: 8,
                sample_rate: 4000,
                pool: 3,
                mask_max: 4,
            },
            samples: 4000,
            channels: 8,
            cells: 4,
            expand_positions: vec![2],
            gru_hidden: 64,
            gru_layers: 1,
            embedding_dim: 64,
            leaky_slope: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.channels == 0
            || self.gru_hidden == 0
            || self.gru_layers == 0
            || self.embedding_dim == 0
        {
            return cfg("channel, GRU and embedding sizes must be positive".into());
        }
        if let Some(&p) = self.expand_positions.iter().find(|&&p| p >= self.cells) {
            return cfg(format!("expand position {p} is outside 0..{}", self.cells));
        }
        if self.expand_positions.windows(2).any(|w| w[0] >= w[1]) {
            return cfg("expand positions must be strictly increasing".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return cfg(format!(
                "leaky slope {} must be finite and non-negative",
                self.leaky_slope
            ));
        }
        let lengths = self.stage_lengths();
        if lengths.is_none() {
            return cfg(format!(
                "{} samples are too few for this network depth",
                self.samples
            ));
        }
        Ok(())
    }

    /// Kind and node width of every cell.
    pub fn cell_specs(&self) -> Vec<CellSpec> {
        let mut width = self.channels;
        (0..self.cells)
            .map(|k| {
                let kind = if self.expand_positions.contains(&k) {
                    width *= 2;
                    CellKind::Expand
                } else {
                    CellKind::Normal
                };
                CellSpec {
                    kind,
                    channels: width,
                }
            })
            .collect()
    }

    /// Output channels of the last stage (the GRU input width).
    pub fn final_channels(&self) -> usize {
        self.cell_specs()
            .last()
            .map_or(self.channels, |s| INTERMEDIATE * s.channels)
    }

    /// Time lengths after the frontend, the stem and every cell.
    pub fn stage_lengths(&self) -> Option<Vec<usize>> {
        let mut out = vec![self.frontend.out_len(self.samples)?];
        let stem = out[0].checked_sub(STEM_KERNEL)? / STEM_STRIDE + 1;
        out.push(stem);
        for _ in 0..self.cells {
            let l = out.last()? / 2;
            if l == 0 {
                return None;
            }
            out.push(l);
        }
        Some(out)
    }
}

/// Whether cells are searchable mixtures or a fixed genotype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    Search { k_c: usize },
    Discrete(Genotype),
}

#[derive(Clone, Debug)]
enum Body {
    Search {
        cells: Vec<SearchCell>,
        alpha: Alpha,
        k_c: usize,
    },
    Discrete {
        cells: Vec<DiscreteCell>,
        genotype: Genotype,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct Output {
    /// `[B, embedding_dim]`.
    pub embedding: Var,
    /// `[B, 2]` cosine of the embedding with each class weight.
    pub cos: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub frontend: Frontend,
    stem: Conv1d,
    stem_bn: BatchNorm,
    body: Body,
    gru: Gru,
    fc: Linear,
    head: ParamId,
}

impl Model {
    /// Registers every parameter in `store` (which should be empty) and draws
    /// initial values from `rng`.
    pub fn build(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &ModelConfig,
        arch: &Architecture,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let frontend = Frontend::new(store, rng, &config.frontend, config.leaky_slope)?;
        let stem = Conv1d::new(
            store,
            rng,
            "stem.conv",
            config.frontend.filters,
            c,
            STEM_KERNEL,
            ConvSpec::new(STEM_STRIDE, 1, 0),
            false,
        );
        let stem_bn = BatchNorm::new(store, "stem.bn", c);
        let specs = config.cell_specs();
        let mut widths = vec![config.frontend.filters, c];
        let body = match arch {
            Architecture::Search { k_c } => {
                let mut cells = Vec::with_capacity(specs.len());
                for (k, spec) in specs.iter().enumerate() {
                    let (c_pp, c_p) = (widths[widths.len() - 2], widths[widths.len() - 1]);
                    cells.push(SearchCell::new(
                        store,
                        rng,
                        &format!("cells.{k}"),
                        *spec,
                        c_pp,
                        c_p,
                        *k_c,
                    )?);
                    widths.push(INTERMEDIATE * spec.channels);
                }
                let alpha = Alpha::new(store, rng);
                Body::Search {
                    cells,
                    alpha,
                    k_c: *k_c,
                }
            }
            Architecture::Discrete(genotype) => {
                genotype.validate()?;
                let mut cells = Vec::with_capacity(specs.len());
                for (k, spec) in specs.iter().enumerate() {
                    let (c_pp, c_p) = (widths[widths.len() - 2], widths[widths.len() - 1]);
                    let genes = genotype.cell(spec.kind);
                    cells.push(DiscreteCell::new(
                        store,
                        rng,
                        &format!("cells.{k}"),
                        *spec,
                        c_pp,
                        c_p,
                        genes,
                    )?);
                    widths.push(INTERMEDIATE * spec.channels);
                }
                Body::Discrete {
                    cells,
                    genotype: genotype.clone(),
                }
            }
        };
        let d = *widths.last().expect("non-empty");
        let gru = Gru::new(store, rng, "gru", d, config.gru_hidden, config.gru_layers);
        let fc = Linear::new(
            store,
            rng,
            "fc",
            config.gru_hidden,
            config.embedding_dim,
            true,
        );
        let bound = 1.0 / (config.embedding_dim as f64).sqrt();
        let head = store.register(
            "head.weight",
            ParamGroup::Network,
            uniform(rng, &[CLASSES, config.embedding_dim], bound),
        );
        Ok(Model {
            config: config.clone(),
            frontend,
            stem,
            stem_bn,
            body,
            gru,
            fc,
            head,
        })
    }

    pub fn alpha(&self) -> Option<Alpha> {
        match &self.body {
            Body::Search { alpha, .. } => Some(*alpha),
            Body::Discrete { .. } => None,
        }
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        match &self.body {
            Body::Discrete { genotype, .. } => Some(genotype),
            Body::Search { .. } => None,
        }
    }

    /// `wave` is `[B, 1, samples]`. Training passes draw, in order, the
    /// filter mask and then (in search mode) one channel mask per edge for
    /// every cell; evaluation passes draw nothing.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        wave: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Output> {
        match g.shape(wave) {
            &[_, 1, n] if n == self.config.samples => {}
            s => {
                return Err(Error::shape(format!(
                    "expected input [B, 1, {}], got {s:?}",
                    self.config.samples
                )))
            }
        }
        let slope = self.config.leaky_slope;
        let mask = match mode {
            Mode::Train => Some(sample_mask(
                rng,
                self.config.frontend.filters,
                self.config.frontend.mask_max,
            )?),
            Mode::Eval => None,
        };
        let x0 = self.frontend.forward(g, store, wave, mask, mode)?;
        let x1 = self.stem.forward(g, store, x0)?;
        let x1 = self.stem_bn.forward(g, store, x1, mode)?;
        let x1 = g.leaky_relu(x1, slope);
        let (mut s_pp, mut s_p) = (x0, x1);
        match &self.body {
            Body::Search { cells, alpha, k_c } => {
                let normal = g.param(store, alpha.normal);
                let normal = g.softmax(normal)?;
                let expand = g.param(store, alpha.expand);
                let expand = g.softmax(expand)?;
                for cell in cells {
                    let weights = match cell.spec.kind {
                        CellKind::Normal => normal,
                        CellKind::Expand => expand,
                    };
                    let masks = match mode {
                        Mode::Train => (0..EDGES)
                            .map(|_| sample_channel_mask(rng, cell.spec.channels, *k_c))
                            .collect::<Result<Vec<_>>>()?,
                        Mode::Eval => vec![eval_channel_mask(cell.spec.channels, *k_c)?; EDGES],
                    };
                    let y = cell.forward(g, store, s_pp, s_p, weights, &masks, mode, slope)?;
                    (s_pp, s_p) = (s_p, y);
                }
            }
            Body::Discrete { cells, .. } => {
                for cell in cells {
                    let y = cell.forward(g, store, s_pp, s_p, mode, slope)?;
                    (s_pp, s_p) = (s_p, y);
                }
            }
        }
        let frames = g.shape(s_p)[2];
        let steps = (0..frames)
            .map(|t| g.time_step(s_p, t))
            .collect::<Result<Vec<_>>>()?;
        let h = self.gru.forward(g, store, &steps)?;
        let embedding = self.fc.forward(g, store, h)?;
        let w = g.param(store, self.head);
        let cos = g.cosine(embedding, w, COSINE_EPS)?;
        Ok(Output { embedding, cos })
    }
}

/// Mean squared error between the class cosines and one-hot labels.
pub fn p2sgrad_loss(g: &mut Graph, cos: Var, labels: &[usize]) -> Result<Var> {
    if let Some(&l) = labels.iter().find(|&&l| l >= CLASSES) {
        return Err(Error::invalid(format!(
            "label {l} is not 0 (bona fide) or 1 (spoof)"
        )));
    }
    g.mse_onehot(cos, labels)
}

/// Bona fide cosine of every row of `[B, 2]` class cosines.
pub fn scores(g: &Graph, cos: Var) -> Vec<f64> {
    g.value(cos).chunks(CLASSES).map(|r| r[BONAFIDE]).collect()
}

/// Predicted class per row: bona fide iff its cosine is strictly larger.
pub fn predictions(g: &Graph, cos: Var) -> Vec<usize> {
    g.value(cos)
        .chunks(CLASSES)
        .map(|r| {
            if r[BONAFIDE] > r[SPOOF] {
                BONAFIDE
            } else {
                SPOOF
            }
        })
        .collect()
}

/// Learnable scalars per subsystem; architecture weights are excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub frontend: usize,
    pub stem: usize,
    pub cells: usize,
    pub gru: usize,
    pub fc_head: usize,
}

impl ParamCounts {
    pub fn of(store: &ParamStore) -> Self {
        let count = |prefixes: &[&str]| {
            store.count_matching(|e| {
                e.group != ParamGroup::Architecture
                    && e.tensor.requires_grad()
                    && prefixes.iter().any(|p| e.name.starts_with(p))
            })
        };
        ParamCounts {
            frontend: count(&["frontend."]),
            stem: count(&["stem."]),
            cells: count(&["cells."]),
            gru: count(&["gru."]),
            fc_head: count(&["fc.", "head."]),
        }
    }

    pub fn total(&self) -> usize {
        self.frontend + self.stem + self.cells + self.gru + self.fc_head
    }
}
