//! Parameterized layers built on the tape: convolution, batch norm, linear
//! and a stacked GRU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, ConvSpec, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Whether a forward pass is a training pass (batch statistics, masking,
/// channel-mask sampling) or an evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn bn(self) -> BatchNormMode {
        match self {
            Mode::Train => BatchNormMode::Train {
                momentum: BN_MOMENTUM,
            },
            Mode::Eval => BatchNormMode::Eval,
        }
    }
}

/// Tensor of uniform draws in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.register(
                format!("{name}.gamma"),
                ParamGroup::Network,
                Tensor::full([channels], 1.0),
            ),
            beta: store.register(
                format!("{name}.beta"),
                ParamGroup::Network,
                Tensor::zeros([channels]),
            ),
            running_mean: store.register(
                format!("{name}.running_mean"),
                ParamGroup::Buffer,
                Tensor::zeros([channels]),
            ),
            running_var: store.register(
                format!("{name}.running_var"),
                ParamGroup::Buffer,
                Tensor::full([channels], 1.0),
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        g.batchnorm1d(
            store,
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            mode.bn(),
            BN_EPS,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv1d {
    /// Weights uniform in `±1/sqrt(c_in * kernel)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            ParamGroup::Network,
            uniform(rng, &[c_out, c_in, kernel], bound),
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                ParamGroup::Network,
                uniform(rng, &[c_out], bound),
            )
        });
        Conv1d { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv1d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            ParamGroup::Network,
            uniform(rng, &[d_out, d_in], bound),
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                ParamGroup::Network,
                uniform(rng, &[d_out], bound),
            )
        });
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// One GRU layer with separate input-hidden and hidden-hidden biases for each
/// of the reset, update and candidate gates.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub input: [Linear; 3],
    pub hidden: [Linear; 3],
}

#[derive(Clone, Debug)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        layers: usize,
    ) -> Self {
        fn gate(
            store: &mut ParamStore,
            rng: &mut impl Rng,
            name: String,
            d: usize,
            hidden: usize,
        ) -> Linear {
            let bound = 1.0 / (hidden as f64).sqrt();
            Linear {
                weight: store.register(
                    format!("{name}.weight"),
                    ParamGroup::Network,
                    uniform(rng, &[hidden, d], bound),
                ),
                bias: Some(store.register(
                    format!("{name}.bias"),
                    ParamGroup::Network,
                    uniform(rng, &[hidden], bound),
                )),
            }
        }
        let layers = (0..layers)
            .map(|l| {
                let d = if l == 0 { d_in } else { hidden };
                let n = |s: &str| format!("{name}.l{l}.{s}");
                GruLayer {
                    input: [
                        gate(store, rng, n("ir"), d, hidden),
                        gate(store, rng, n("iz"), d, hidden),
                        gate(store, rng, n("in"), d, hidden),
                    ],
                    hidden: [
                        gate(store, rng, n("hr"), hidden, hidden),
                        gate(store, rng, n("hz"), hidden, hidden),
                        gate(store, rng, n("hn"), hidden, hidden),
                    ],
                }
            })
            .collect();
        Gru { layers, hidden }
    }

    /// Closed-form learnable scalar count: per layer
    /// `3 (H d_in + H H) + 6 H`.
    pub fn param_count(d_in: usize, hidden: usize, layers: usize) -> usize {
        (0..layers)
            .map(|l| {
                let d = if l == 0 { d_in } else { hidden };
                3 * (hidden * d + hidden * hidden) + 6 * hidden
            })
            .sum()
    }

    /// Runs the stack over `xs` (each `[B, D]`) from a zero state and returns
    /// the top layer's final hidden state `[B, H]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("GRU over an empty sequence"))?;
        let batch = g.shape(first)[0];
        let mut seq = xs.to_vec();
        for layer in &self.layers {
            let mut h = g.input([batch, self.hidden], vec![0.0; batch * self.hidden])?;
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                h = layer.step(g, store, x, h)?;
                out.push(h);
            }
            seq = out;
        }
        Ok(*seq.last().expect("non-empty sequence"))
    }
}

impl GruLayer {
    /// `r = s(Wir x + bir + Whr h + bhr)`, `z` likewise,
    /// `n = tanh(Win x + bin + r * (Whn h + bhn))`, `h' = (1 - z) n + z h`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let gate_in = |g: &mut Graph, i: usize| -> Result<(Var, Var)> {
            let a = self.input[i].forward(g, store, x)?;
            let b = self.hidden[i].forward(g, store, h)?;
            Ok((a, b))
        };
        let (ir, hr) = gate_in(g, 0)?;
        let (iz, hz) = gate_in(g, 1)?;
        let (inn, hn) = gate_in(g, 2)?;
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn)?;
        let n = g.add(inn, rh)?;
        let n = g.tanh(n);
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        g.add(n, zd)
    }
}
