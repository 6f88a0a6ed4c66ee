use std::collections::HashMap;

use super::kernels::{self, ConvDims, PoolDims};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

pub(crate) enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        dims: PoolDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        dims: [usize; 3],
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: [usize; 3],
    },
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Softmax {
        x: Var,
        n: usize,
    },
    Concat {
        xs: Vec<Var>,
        sizes: Vec<usize>,
        batch: usize,
        len: usize,
    },
    SelectChannels {
        x: Var,
        idx: Vec<usize>,
        dims: [usize; 3],
    },
    MergeChannels {
        base: Var,
        sub: Var,
        idx: Vec<usize>,
        dims: [usize; 3],
    },
    ScaleBy {
        x: Var,
        s: Var,
        index: usize,
    },
    Sum(Var),
    TimeStep {
        x: Var,
        t: usize,
        dims: [usize; 3],
    },
    NarrowTime {
        x: Var,
        keep: usize,
        dims: [usize; 3],
    },
    Abs(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    SincKernels {
        f1: Var,
        f2: Var,
        window: Vec<f64>,
        sample_rate: f64,
    },
    ZeroRows {
        x: Var,
        start: usize,
        count: usize,
        row: usize,
    },
    Cosine {
        e: Var,
        w: Var,
        eps: f64,
        dims: [usize; 3],
    },
    MseOneHot {
        x: Var,
        labels: Vec<usize>,
        classes: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv1d { x, w, b, .. } | Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            MaxPool { x, .. }
            | AvgPool { x, .. }
            | LeakyRelu { x, .. }
            | Softmax { x, .. }
            | SelectChannels { x, .. }
            | TimeStep { x, .. }
            | NarrowTime { x, .. }
            | Clamp { x, .. }
            | ZeroRows { x, .. }
            | MseOneHot { x, .. } => vec![*x],
            Sigmoid(x) | Tanh(x) | Sum(x) | Abs(x) => vec![*x],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Concat { xs, .. } => xs.clone(),
            MergeChannels { base, sub, .. } => vec![*base, *sub],
            ScaleBy { x, s, .. } => vec![*x, *s],
            SincKernels { f1, f2, .. } => vec![*f1, *f2],
            Cosine { e, w, .. } => vec![*e, *w],
        }
    }
}

/// Define-by-run tape. Operations execute eagerly and record what the
/// backward pass needs; [`Graph::backward`] walks the record once in reverse.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    bound_order: Vec<(ParamId, Var)>,
    buffer_updates: Vec<(ParamId, Vec<f64>)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.leaf_raw(tensor.shape().to_vec(), tensor.data().to_vec(), false)
    }

    /// Records a leaf that follows the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.leaf_raw(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn input(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf_raw(t.shape().to_vec(), t.into_data(), false))
    }

    fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter, copying its current value onto the tape once.
    /// A graph must only ever be used with a single store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.bound.insert(id, v);
        self.bound_order.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter that received one, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.bound_order
            .iter()
            .filter_map(move |&(id, v)| self.grad(v).map(|g| (id, g)))
    }

    pub(crate) fn record_buffer(&mut self, id: ParamId, data: Vec<f64>) {
        self.buffer_updates.push((id, data));
    }

    pub(crate) fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively over
    /// every use of a value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                propagate(nodes, grads, i, &g);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Zeroed gradient buffer for `v` taken out of the table, if `v` needs one.
fn take(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]),
    )
}

fn put(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
    let Some(buf) = buf else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&buf).for_each(|(a, b)| *a += b),
        slot => *slot = Some(buf),
    }
}

fn with_grad(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if let Some(mut buf) = take(nodes, grads, v) {
        f(&mut buf);
        put(grads, v, Some(buf));
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = &node.value;
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Conv1d { x, w, b, dims } => {
            let mut gx = take(nodes, grads, *x);
            let mut gw = take(nodes, grads, *w);
            let mut gb = b.and_then(|b| take(nodes, grads, b));
            kernels::conv1d_backward(
                val(*x),
                val(*w),
                g,
                dims,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            put(grads, *x, gx);
            put(grads, *w, gw);
            if let Some(b) = b {
                put(grads, *b, gb);
            }
        }
        Op::MaxPool { x, argmax } => with_grad(nodes, grads, *x, |gx| {
            for (&a, gv) in argmax.iter().zip(g) {
                gx[a] += gv;
            }
        }),
        Op::AvgPool { x, dims } => with_grad(nodes, grads, *x, |gx| {
            kernels::avgpool_backward(g, dims, gx)
        }),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            dims: [batch, ch, len],
        } => {
            let (batch, ch, len) = (*batch, *ch, *len);
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for b in 0..batch {
                for c in 0..ch {
                    let o = (b * ch + c) * len;
                    for j in o..o + len {
                        sum_g[c] += g[j];
                        sum_gx[c] += g[j] * xhat[j];
                    }
                }
            }
            let gam = val(*gamma);
            with_grad(nodes, grads, *x, |gx| {
                let n = (batch * len) as f64;
                for b in 0..batch {
                    for c in 0..ch {
                        let o = (b * ch + c) * len;
                        let k = gam[c] * inv_std[c];
                        for j in o..o + len {
                            gx[j] += if *train {
                                k / n * (n * g[j] - sum_g[c] - xhat[j] * sum_gx[c])
                            } else {
                                k * g[j]
                            };
                        }
                    }
                }
            });
            with_grad(nodes, grads, *gamma, |gg| {
                gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b)
            });
            with_grad(nodes, grads, *beta, |gb| {
                gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b)
            });
        }
        Op::LeakyRelu { x, slope } => {
            let xv = val(*x);
            with_grad(nodes, grads, *x, |gx| {
                for j in 0..gx.len() {
                    gx[j] += if xv[j] >= 0.0 { g[j] } else { slope * g[j] };
                }
            })
        }
        Op::Linear {
            x,
            w,
            b,
            dims: [batch, d_in, d_out],
        } => {
            let (batch, d_in, d_out) = (*batch, *d_in, *d_out);
            let (xv, wv) = (val(*x), val(*w));
            with_grad(nodes, grads, *x, |gx| {
                for bi in 0..batch {
                    let gr = &g[bi * d_out..][..d_out];
                    let gxr = &mut gx[bi * d_in..][..d_in];
                    for (o, &go) in gr.iter().enumerate() {
                        for (a, wvv) in gxr.iter_mut().zip(&wv[o * d_in..][..d_in]) {
                            *a += go * wvv;
                        }
                    }
                }
            });
            with_grad(nodes, grads, *w, |gw| {
                for bi in 0..batch {
                    let xr = &xv[bi * d_in..][..d_in];
                    for o in 0..d_out {
                        let go = g[bi * d_out + o];
                        for (a, xvv) in gw[o * d_in..][..d_in].iter_mut().zip(xr) {
                            *a += go * xvv;
                        }
                    }
                }
            });
            if let Some(b) = b {
                with_grad(nodes, grads, *b, |gb| {
                    for bi in 0..batch {
                        for o in 0..d_out {
                            gb[o] += g[bi * d_out + o];
                        }
                    }
                });
            }
        }
        Op::Sigmoid(x) => with_grad(nodes, grads, *x, |gx| {
            for j in 0..gx.len() {
                gx[j] += g[j] * y[j] * (1.0 - y[j]);
            }
        }),
        Op::Tanh(x) => with_grad(nodes, grads, *x, |gx| {
            for j in 0..gx.len() {
                gx[j] += g[j] * (1.0 - y[j] * y[j]);
            }
        }),
        Op::Add(a, b) => {
            with_grad(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(p, q)| *p += q)
            });
            with_grad(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(p, q)| *p += q)
            });
        }
        Op::Sub(a, b) => {
            with_grad(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(p, q)| *p += q)
            });
            with_grad(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(p, q)| *p -= q)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            with_grad(nodes, grads, *a, |ga| {
                for j in 0..ga.len() {
                    ga[j] += g[j] * bv[j];
                }
            });
            with_grad(nodes, grads, *b, |gb| {
                for j in 0..gb.len() {
                    gb[j] += g[j] * av[j];
                }
            });
        }
        Op::Softmax { x, n } => with_grad(nodes, grads, *x, |gx| {
            for (r, yr) in y.chunks(*n).enumerate() {
                let gr = &g[r * n..][..*n];
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..*n {
                    gx[r * n + j] += yr[j] * (gr[j] - dot);
                }
            }
        }),
        Op::Concat {
            xs,
            sizes,
            batch,
            len,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (xv, &c) in xs.iter().zip(sizes) {
                with_grad(nodes, grads, *xv, |gx| {
                    for b in 0..*batch {
                        let src = &g[(b * total + offset) * len..][..c * len];
                        gx[b * c * len..][..c * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, q)| *p += q);
                    }
                });
                offset += c;
            }
        }
        Op::SelectChannels {
            x,
            idx,
            dims: [batch, ch, len],
        } => with_grad(nodes, grads, *x, |gx| {
            let k = idx.len();
            for b in 0..*batch {
                for (j, &c) in idx.iter().enumerate() {
                    let src = &g[(b * k + j) * len..][..*len];
                    gx[(b * ch + c) * len..][..*len]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(p, q)| *p += q);
                }
            }
        }),
        Op::MergeChannels {
            base,
            sub,
            idx,
            dims: [batch, ch, len],
        } => {
            let mut replaced = vec![false; *ch];
            idx.iter().for_each(|&c| replaced[c] = true);
            with_grad(nodes, grads, *base, |gb| {
                for b in 0..*batch {
                    for c in (0..*ch).filter(|&c| !replaced[c]) {
                        let o = (b * ch + c) * len;
                        gb[o..o + len]
                            .iter_mut()
                            .zip(&g[o..o + len])
                            .for_each(|(p, q)| *p += q);
                    }
                }
            });
            with_grad(nodes, grads, *sub, |gs| {
                let k = idx.len();
                for b in 0..*batch {
                    for (j, &c) in idx.iter().enumerate() {
                        let src = &g[(b * ch + c) * len..][..*len];
                        gs[(b * k + j) * len..][..*len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, q)| *p += q);
                    }
                }
            });
        }
        Op::ScaleBy { x, s, index } => {
            let sv = val(*s)[*index];
            let xv = val(*x);
            with_grad(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q * sv)
            });
            with_grad(nodes, grads, *s, |gs| {
                gs[*index] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            });
        }
        Op::Sum(x) => with_grad(nodes, grads, *x, |gx| {
            gx.iter_mut().for_each(|p| *p += g[0])
        }),
        Op::TimeStep {
            x,
            t,
            dims: [batch, ch, len],
        } => with_grad(nodes, grads, *x, |gx| {
            for b in 0..*batch {
                for c in 0..*ch {
                    gx[(b * ch + c) * len + t] += g[b * ch + c];
                }
            }
        }),
        Op::NarrowTime {
            x,
            keep,
            dims: [batch, ch, len],
        } => with_grad(nodes, grads, *x, |gx| {
            for r in 0..batch * ch {
                gx[r * len..][..*keep]
                    .iter_mut()
                    .zip(&g[r * keep..][..*keep])
                    .for_each(|(p, q)| *p += q);
            }
        }),
        Op::Abs(x) => {
            let xv = val(*x);
            with_grad(nodes, grads, *x, |gx| {
                for j in 0..gx.len() {
                    gx[j] += if xv[j] >= 0.0 { g[j] } else { -g[j] };
                }
            })
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            with_grad(nodes, grads, *x, |gx| {
                for j in 0..gx.len() {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        gx[j] += g[j];
                    }
                }
            })
        }
        Op::SincKernels {
            f1,
            f2,
            window,
            sample_rate,
        } => {
            let k = window.len();
            let centre = (k as f64 - 1.0) / 2.0;
            for (fv, sign) in [(*f1, -1.0), (*f2, 1.0)] {
                let freqs = val(fv);
                with_grad(nodes, grads, fv, |gf| {
                    for (c, &f) in freqs.iter().enumerate() {
                        let fnorm = f / sample_rate;
                        let mut acc = 0.0;
                        for (t, &wt) in window.iter().enumerate() {
                            acc +=
                                g[c * k + t] * wt * kernels::band_term_df(fnorm, t as f64 - centre);
                        }
                        gf[c] += sign * acc / sample_rate;
                    }
                });
            }
        }
        Op::ZeroRows {
            x,
            start,
            count,
            row,
        } => with_grad(nodes, grads, *x, |gx| {
            let (a, b) = (start * row, (start + count) * row);
            for j in (0..gx.len()).filter(|&j| j < a || j >= b) {
                gx[j] += g[j];
            }
        }),
        Op::Cosine {
            e,
            w,
            eps,
            dims: [batch, dim, classes],
        } => {
            let (ev, wv) = (val(*e), val(*w));
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let en: Vec<f64> = ev.chunks(*dim).map(norm).collect();
            let wn: Vec<f64> = wv.chunks(*dim).map(norm).collect();
            let mut ge = vec![0.0; ev.len()];
            let mut gw = vec![0.0; wv.len()];
            for b in 0..*batch {
                let er = &ev[b * dim..][..*dim];
                let ne = en[b].max(*eps);
                for c in 0..*classes {
                    let wr = &wv[c * dim..][..*dim];
                    let nw = wn[c].max(*eps);
                    let cos = y[b * classes + c];
                    let gc = g[b * classes + c];
                    let e_clamped = en[b] < *eps;
                    let w_clamped = wn[c] < *eps;
                    for d in 0..*dim {
                        let mut de = wr[d] / (ne * nw);
                        if !e_clamped {
                            de -= cos * er[d] / (ne * ne);
                        }
                        ge[b * dim + d] += gc * de;
                        let mut dw = er[d] / (ne * nw);
                        if !w_clamped {
                            dw -= cos * wr[d] / (nw * nw);
                        }
                        gw[c * dim + d] += gc * dw;
                    }
                }
            }
            with_grad(nodes, grads, *e, |p| {
                p.iter_mut().zip(&ge).for_each(|(a, b)| *a += b)
            });
            with_grad(nodes, grads, *w, |p| {
                p.iter_mut().zip(&gw).for_each(|(a, b)| *a += b)
            });
        }
        Op::MseOneHot { x, labels, classes } => {
            let xv = val(*x);
            let n = xv.len() as f64;
            with_grad(nodes, grads, *x, |gx| {
                for (b, &lab) in labels.iter().enumerate() {
                    for c in 0..*classes {
                        let j = b * classes + c;
                        let target = if c == lab { 1.0 } else { 0.0 };
                        gx[j] += g[0] * 2.0 * (xv[j] - target) / n;
                    }
                }
            })
        }
    }
}
