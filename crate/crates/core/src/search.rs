//! Candidate operations, partially connected mixed edges, normal/expand
//! cells and discrete genotype derivation.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv1d, Mode};
use crate::tensor::{ConvSpec, Graph, ParamGroup, ParamId, ParamStore, PoolSpec, Tensor, Var};

/// Intermediate nodes per cell.
pub const INTERMEDIATE: usize = 4;
/// Inputs kept per intermediate node in a discrete cell.
pub const NODE_INPUTS: usize = 2;
/// Searchable edges per cell: node `j` (0-based over the two inputs and the
/// intermediates) receives one edge from every earlier node.
pub const EDGES: usize = 2 + 3 + 4 + 5;
/// Bumped whenever [`OpKind::ALL`] changes.
pub const OPS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    None,
    Skip,
    Conv3,
    Conv5,
    DilConv3,
    DilConv5,
    MaxPool3,
    AvgPool3,
}

impl OpKind {
    /// Column order of every architecture-weight table.
    pub const ALL: [OpKind; 8] = [
        OpKind::None,
        OpKind::Skip,
        OpKind::Conv3,
        OpKind::Conv5,
        OpKind::DilConv3,
        OpKind::DilConv5,
        OpKind::MaxPool3,
        OpKind::AvgPool3,
    ];
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::Skip => "skip",
            OpKind::Conv3 => "conv3",
            OpKind::Conv5 => "conv5",
            OpKind::DilConv3 => "dilconv3",
            OpKind::DilConv5 => "dilconv5",
            OpKind::MaxPool3 => "maxpool3",
            OpKind::AvgPool3 => "avgpool3",
        }
    }

    /// `(kernel, dilation, padding)` for the convolutional candidates.
    pub fn conv_geometry(self) -> Option<(usize, usize, usize)> {
        match self {
            OpKind::Conv3 => Some((3, 1, 1)),
            OpKind::Conv5 => Some((5, 1, 2)),
            OpKind::DilConv3 => Some((3, 2, 2)),
            OpKind::DilConv5 => Some((5, 2, 4)),
            _ => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown operation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Expand,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Expand => "expand",
        }
    }
}

/// Source node and destination node (both 0-based; 0 and 1 are the cell
/// inputs) of edge `e`.
pub fn edge_endpoints(e: usize) -> (usize, usize) {
    let mut base = 0;
    for j in 2..2 + INTERMEDIATE {
        if e < base + j {
            return (e - base, j);
        }
        base += j;
    }
    panic!("edge {e} out of range");
}

/// Index of the edge from node `i` into node `j`.
pub fn edge_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j && (2..2 + INTERMEDIATE).contains(&j));
    (2..j).sum::<usize>() + i
}

/// One candidate operation with its parameters.
#[derive(Clone, Debug)]
pub enum Candidate {
    None,
    Skip,
    Conv { conv: Conv1d, bn: BatchNorm },
    MaxPool { bn: BatchNorm },
    AvgPool { bn: BatchNorm },
}

impl Candidate {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        kind: OpKind,
        channels: usize,
    ) -> Self {
        match kind {
            OpKind::None => Candidate::None,
            OpKind::Skip => Candidate::Skip,
            OpKind::MaxPool3 => Candidate::MaxPool {
                bn: BatchNorm::new(store, &format!("{name}.bn"), channels),
            },
            OpKind::AvgPool3 => Candidate::AvgPool {
                bn: BatchNorm::new(store, &format!("{name}.bn"), channels),
            },
            conv => {
                let (k, d, p) = conv.conv_geometry().expect("convolutional candidate");
                Candidate::Conv {
                    conv: Conv1d::new(
                        store,
                        rng,
                        &format!("{name}.conv"),
                        channels,
                        channels,
                        k,
                        ConvSpec::new(1, d, p),
                        false,
                    ),
                    bn: BatchNorm::new(store, &format!("{name}.bn"), channels),
                }
            }
        }
    }

    /// Length- and width-preserving application to `[B, C, L]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        slope: f64,
    ) -> Result<Var> {
        match self {
            Candidate::None => {
                let shape = g.shape(x).to_vec();
                Ok(g.constant(&Tensor::zeros(shape)))
            }
            Candidate::Skip => Ok(x),
            Candidate::Conv { conv, bn } => {
                let y = g.leaky_relu(x, slope);
                let y = conv.forward(g, store, y)?;
                bn.forward(g, store, y, mode)
            }
            Candidate::MaxPool { bn } => {
                let y = g.maxpool1d(x, PoolSpec::padded(3, 1, 1))?;
                bn.forward(g, store, y, mode)
            }
            Candidate::AvgPool { bn } => {
                let y = g.avgpool1d(x, PoolSpec::padded(3, 1, 1))?;
                bn.forward(g, store, y, mode)
            }
        }
    }
}

/// All eight candidates of one searchable edge, at width `C / K_C`.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub ops: Vec<Candidate>,
    pub width: usize,
}

impl MixedEdge {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize) -> Self {
        let ops = OpKind::ALL
            .iter()
            .map(|&k| Candidate::new(store, rng, &format!("{name}.{k}"), k, width))
            .collect();
        MixedEdge { ops, width }
    }

    /// `sum_o w[offset + o] * o(x)` over all candidates in column order.
    pub fn mixture(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        weights: Var,
        offset: usize,
        mode: Mode,
        slope: f64,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (o, op) in self.ops.iter().enumerate() {
            let y = op.forward(g, store, x, mode, slope)?;
            let y = g.scale_by(y, weights, offset + o)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        Ok(acc.expect("eight candidates"))
    }

    /// Partial-channel mixed operation: channels in `selected` go through the
    /// mixture, all others are passed through unchanged at their original index.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        weights: Var,
        offset: usize,
        selected: &[usize],
        mode: Mode,
        slope: f64,
    ) -> Result<Var> {
        if selected.len() != self.width {
            return Err(Error::shape(format!(
                "edge of width {} given {} selected channels",
                self.width,
                selected.len()
            )));
        }
        let xs = g.select_channels(x, selected)?;
        let mixed = self.mixture(g, store, xs, weights, offset, mode, slope)?;
        g.merge_channels(x, mixed, selected)
    }
}

/// Channels a partial connection keeps: sorted, `channels / k_c` of them.
pub fn sample_channel_mask(rng: &mut impl Rng, channels: usize, k_c: usize) -> Result<Vec<usize>> {
    check_partial(channels, k_c)?;
    if k_c == 1 {
        return Ok((0..channels).collect());
    }
    let mut idx = index::sample(rng, channels, channels / k_c).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn sample_channel_masks(
    rng: &mut impl Rng,
    channels: usize,
    k_c: usize,
    edges: usize,
) -> Result<Vec<Vec<usize>>> {
    (0..edges)
        .map(|_| sample_channel_mask(rng, channels, k_c))
        .collect()
}

/// The mask used outside training: the first `channels / k_c` channels.
pub fn eval_channel_mask(channels: usize, k_c: usize) -> Result<Vec<usize>> {
    check_partial(channels, k_c)?;
    Ok((0..channels / k_c).collect())
}

fn check_partial(channels: usize, k_c: usize) -> Result<()> {
    if k_c == 0 || channels % k_c != 0 {
        return Err(Error::invalid(format!(
            "{channels} channels are not divisible by K_C = {k_c}"
        )));
    }
    Ok(())
}

/// LeakyReLU, 1x1 convolution and batch norm adapting a cell input to the
/// cell's node width.
#[derive(Clone, Debug)]
pub struct Preprocess {
    conv: Conv1d,
    bn: BatchNorm,
}

impl Preprocess {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Preprocess {
            conv: Conv1d::new(
                store,
                rng,
                &format!("{name}.conv"),
                c_in,
                c_out,
                1,
                ConvSpec::VALID,
                false,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        stride: usize,
        mode: Mode,
        slope: f64,
    ) -> Result<Var> {
        let y = g.leaky_relu(x, slope);
        let w = g.param(store, self.conv.weight);
        let y = g.conv1d(y, w, None, ConvSpec::new(stride, 1, 0))?;
        self.bn.forward(g, store, y, mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: CellKind,
    /// Width of every node; the cell outputs `4 * channels`.
    pub channels: usize,
}

/// Preprocesses both inputs, matching the older input's time length to the
/// newer one (a stride-2 1x1 convolution and a crop when it is twice as long).
fn preprocess_inputs(
    g: &mut Graph,
    store: &ParamStore,
    pre: &[Preprocess; 2],
    s_pp: Var,
    s_p: Var,
    mode: Mode,
    slope: f64,
) -> Result<(Var, Var)> {
    let (lpp, lp) = (time_len(g, s_pp)?, time_len(g, s_p)?);
    let stride = if lpp == lp {
        1
    } else if lpp.div_ceil(2) == lp || lpp.div_ceil(2) == lp + 1 {
        2
    } else {
        return Err(Error::shape(format!(
            "cell inputs of lengths {lpp} and {lp} are not in 1:1 or 2:1 ratio"
        )));
    };
    let a = pre[0].forward(g, store, s_pp, stride, mode, slope)?;
    let a = g.narrow_time(a, lp)?;
    let b = pre[1].forward(g, store, s_p, 1, mode, slope)?;
    Ok((a, b))
}

fn time_len(g: &Graph, x: Var) -> Result<usize> {
    match g.shape(x) {
        &[_, _, l] => Ok(l),
        s => Err(Error::shape(format!(
            "cell input must be [B, C, L], got {s:?}"
        ))),
    }
}

fn finish(g: &mut Graph, states: &[Var]) -> Result<Var> {
    let y = g.concat_channels(&states[2..])?;
    g.maxpool1d(y, PoolSpec::new(2, 2))
}

/// A cell in search mode: every edge is a mixed edge.
#[derive(Clone, Debug)]
pub struct SearchCell {
    pub spec: CellSpec,
    pre: [Preprocess; 2],
    pub edges: Vec<MixedEdge>,
    pub k_c: usize,
}

impl SearchCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: CellSpec,
        c_pp: usize,
        c_p: usize,
        k_c: usize,
    ) -> Result<Self> {
        check_partial(spec.channels, k_c)?;
        let pre = [
            Preprocess::new(store, rng, &format!("{name}.pre0"), c_pp, spec.channels),
            Preprocess::new(store, rng, &format!("{name}.pre1"), c_p, spec.channels),
        ];
        let edges = (0..EDGES)
            .map(|e| MixedEdge::new(store, rng, &format!("{name}.edge{e}"), spec.channels / k_c))
            .collect();
        Ok(SearchCell {
            spec,
            pre,
            edges,
            k_c,
        })
    }

    /// `weights` is the row-wise softmax of this cell kind's `[EDGES, 8]`
    /// architecture table; `masks[e]` lists the selected channels of edge `e`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s_pp: Var,
        s_p: Var,
        weights: Var,
        masks: &[Vec<usize>],
        mode: Mode,
        slope: f64,
    ) -> Result<Var> {
        if masks.len() != EDGES {
            return Err(Error::shape(format!(
                "expected {EDGES} channel masks, got {}",
                masks.len()
            )));
        }
        let (a, b) = preprocess_inputs(g, store, &self.pre, s_pp, s_p, mode, slope)?;
        let mut states = vec![a, b];
        let mut e = 0;
        for j in 2..2 + INTERMEDIATE {
            let mut inputs = Vec::with_capacity(j);
            for i in 0..j {
                let y = self.edges[e].forward(
                    g,
                    store,
                    states[i],
                    weights,
                    e * OpKind::COUNT,
                    &masks[e],
                    mode,
                    slope,
                )?;
                inputs.push(y);
                e += 1;
            }
            states.push(g.sum_of(&inputs)?);
        }
        finish(g, &states)
    }
}

/// A cell in discrete mode: two fixed operations per intermediate node.
#[derive(Clone, Debug)]
pub struct DiscreteCell {
    pub spec: CellSpec,
    pre: [Preprocess; 2],
    nodes: Vec<[(usize, Candidate); NODE_INPUTS]>,
}

impl DiscreteCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: CellSpec,
        c_pp: usize,
        c_p: usize,
        genes: &CellGenes,
    ) -> Result<Self> {
        genes.validate()?;
        let pre = [
            Preprocess::new(store, rng, &format!("{name}.pre0"), c_pp, spec.channels),
            Preprocess::new(store, rng, &format!("{name}.pre1"), c_p, spec.channels),
        ];
        let nodes = genes
            .0
            .iter()
            .enumerate()
            .map(|(n, pair)| {
                pair.map(|(i, op)| {
                    let label = format!("{name}.node{}.in{}.{op}", n + 2, i);
                    (i, Candidate::new(store, rng, &label, op, spec.channels))
                })
            })
            .collect();
        Ok(DiscreteCell { spec, pre, nodes })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s_pp: Var,
        s_p: Var,
        mode: Mode,
        slope: f64,
    ) -> Result<Var> {
        let (a, b) = preprocess_inputs(g, store, &self.pre, s_pp, s_p, mode, slope)?;
        let mut states = vec![a, b];
        for pair in &self.nodes {
            let mut inputs = Vec::with_capacity(NODE_INPUTS);
            for (i, op) in pair {
                inputs.push(op.forward(g, store, states[*i], mode, slope)?);
            }
            states.push(g.sum_of(&inputs)?);
        }
        finish(g, &states)
    }
}

/// Architecture weights for both cell kinds, `[EDGES, 8]` each.
#[derive(Clone, Copy, Debug)]
pub struct Alpha {
    pub normal: ParamId,
    pub expand: ParamId,
}

impl Alpha {
    /// Entries drawn from a normal distribution with standard deviation 1e-3.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, 1e-3).expect("valid normal");
        let mut table = |name: &str| {
            let data = (0..EDGES * OpKind::COUNT)
                .map(|_| dist.sample(rng))
                .collect();
            let t = Tensor::new([EDGES, OpKind::COUNT], data).expect("alpha shape");
            store.register(name, ParamGroup::Architecture, t)
        };
        let normal = table("alpha.normal");
        let expand = table("alpha.expand");
        Alpha { normal, expand }
    }

    pub fn get(&self, kind: CellKind) -> ParamId {
        match kind {
            CellKind::Normal => self.normal,
            CellKind::Expand => self.expand,
        }
    }

    pub fn snapshot(&self, store: &ParamStore) -> AlphaSnapshot {
        AlphaSnapshot {
            normal: store.get(self.normal).data().to_vec(),
            expand: store.get(self.expand).data().to_vec(),
        }
    }
}

/// Plain copy of both architecture tables, row-major `[EDGES, 8]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub normal: Vec<f64>,
    pub expand: Vec<f64>,
}

impl AlphaSnapshot {
    /// One line per edge, `<kind> <edge> <from>-><to> <8 logits>`, with
    /// 1-based node numbers and exact values.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# kind edge nodes {}\n",
            OpKind::ALL.map(OpKind::as_str).join(" ")
        );
        for (kind, table) in [
            (CellKind::Normal, &self.normal),
            (CellKind::Expand, &self.expand),
        ] {
            for (e, row) in table.chunks(OpKind::COUNT).enumerate() {
                let (i, j) = edge_endpoints(e);
                let vals: Vec<String> = row.iter().map(f64::to_string).collect();
                s.push_str(&format!(
                    "{} {e} {}->{} {}\n",
                    kind.as_str(),
                    i + 1,
                    j + 1,
                    vals.join(" ")
                ));
            }
        }
        s
    }
}

/// For each intermediate node, its two `(input node, operation)` pairs with
/// 0-based node indices (0 and 1 are the cell inputs).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGenes(pub Vec<[(usize, OpKind); NODE_INPUTS]>);

impl CellGenes {
    pub fn validate(&self) -> Result<()> {
        if self.0.len() != INTERMEDIATE {
            return Err(Error::invalid(format!(
                "expected {INTERMEDIATE} nodes, got {}",
                self.0.len()
            )));
        }
        for (n, pair) in self.0.iter().enumerate() {
            let j = n + 2;
            let [(a, oa), (b, ob)] = *pair;
            if a >= j || b >= j {
                return Err(Error::invalid(format!(
                    "node {} takes an input from a later node",
                    j + 1
                )));
            }
            if a == b {
                return Err(Error::invalid(format!(
                    "node {} uses input {} twice",
                    j + 1,
                    a + 1
                )));
            }
            if oa == OpKind::None || ob == OpKind::None {
                return Err(Error::invalid(format!("node {} selects `none`", j + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: CellGenes,
    pub expand: CellGenes,
    pub k_c: usize,
}

/// Best non-`none` operation of each edge with its weight; ties go to the
/// lower column.
fn best_ops(alpha: &[f64]) -> Vec<(OpKind, f64)> {
    alpha
        .chunks(OpKind::COUNT)
        .map(|row| {
            let mut best = (OpKind::Skip, row[OpKind::Skip.index()]);
            for &k in &OpKind::ALL[2..] {
                if row[k.index()] > best.1 {
                    best = (k, row[k.index()]);
                }
            }
            best
        })
        .collect()
}

/// Discrete cell from one `[EDGES, 8]` table: per node, the two incoming edges
/// whose best operation weighs most (ties go to the lower input), listed by
/// input index.
pub fn derive_cell(alpha: &[f64]) -> Result<CellGenes> {
    if alpha.len() != EDGES * OpKind::COUNT {
        return Err(Error::shape(format!(
            "alpha table must have {} entries",
            EDGES * OpKind::COUNT
        )));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("architecture weights".into()));
    }
    let best = best_ops(alpha);
    let mut nodes = Vec::with_capacity(INTERMEDIATE);
    for j in 2..2 + INTERMEDIATE {
        let mut cands: Vec<usize> = (0..j).collect();
        cands.sort_by(|&a, &b| {
            let (wa, wb) = (best[edge_index(a, j)].1, best[edge_index(b, j)].1);
            wb.total_cmp(&wa).then(a.cmp(&b))
        });
        let mut keep = [cands[0], cands[1]];
        keep.sort_unstable();
        nodes.push(keep.map(|i| (i, best[edge_index(i, j)].0)));
    }
    Ok(CellGenes(nodes))
}

pub fn derive_genotype(alpha: &AlphaSnapshot, k_c: usize) -> Result<Genotype> {
    Ok(Genotype {
        normal: derive_cell(&alpha.normal)?,
        expand: derive_cell(&alpha.expand)?,
        k_c,
    })
}

const HEADER: &str = "# rawdarts genotype";

impl Genotype {
    pub fn cell(&self, kind: CellKind) -> &CellGenes {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Expand => &self.expand,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.normal.validate()?;
        self.expand.validate()
    }

    /// A dilated-convolution-heavy architecture whose full-size network has
    /// about 24.48M learnable parameters, used when no search result is at
    /// hand.
    pub fn reference() -> Self {
        use OpKind::*;
        Genotype {
            normal: CellGenes(vec![
                [(0, DilConv5), (1, DilConv3)],
                [(0, Skip), (2, DilConv5)],
                [(1, MaxPool3), (3, DilConv3)],
                [(2, Skip), (4, MaxPool3)],
            ]),
            expand: CellGenes(vec![
                [(0, DilConv3), (1, Skip)],
                [(1, AvgPool3), (2, Skip)],
                [(0, Skip), (3, Skip)],
                [(2, AvgPool3), (4, Skip)],
            ]),
            k_c: 2,
        }
    }

    /// Text form; see [`Genotype::parse`].
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER}\nnodes {}\nk_c {}\nops v{OPS_VERSION} {}\n",
            2 + INTERMEDIATE + 1,
            self.k_c,
            OpKind::ALL.map(OpKind::as_str).join(",")
        );
        for kind in [CellKind::Normal, CellKind::Expand] {
            for (n, [(a, oa), (b, ob)]) in self.cell(kind).0.iter().enumerate() {
                s += &format!(
                    "{} node{}: (input={}, {oa}), (input={}, {ob})\n",
                    kind.as_str(),
                    n + 3,
                    a + 1,
                    b + 1
                );
            }
        }
        s
    }

    /// Parses the text form. Lines are, in order: the header comment,
    /// `nodes 7`, `k_c <int>`, `ops v<version> <comma-separated ops>`, then
    /// four `normal nodeJ: (input=I, op), (input=I, op)` lines for J = 3..6 and
    /// four matching `expand` lines. Nodes are numbered from 1; 1 and 2 are
    /// the cell inputs.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::parse("<genotype>", line, msg);
        let lines: Vec<&str> = text.lines().collect();
        let want = 4 + 2 * INTERMEDIATE;
        if lines.len() != want {
            return Err(bad(
                lines.len(),
                format!("expected {want} lines, found {}", lines.len()),
            ));
        }
        if lines[0] != HEADER {
            return Err(bad(1, format!("expected header `{HEADER}`")));
        }
        if lines[1] != format!("nodes {}", 2 + INTERMEDIATE + 1) {
            return Err(bad(
                2,
                format!("unsupported node count line `{}`", lines[1]),
            ));
        }
        let k_c = lines[2]
            .strip_prefix("k_c ")
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .ok_or_else(|| bad(3, format!("malformed `{}`", lines[2])))?;
        let ops = format!(
            "ops v{OPS_VERSION} {}",
            OpKind::ALL.map(OpKind::as_str).join(",")
        );
        if lines[3] != ops {
            return Err(bad(
                4,
                format!("operation vocabulary `{}` is not `{ops}`", lines[3]),
            ));
        }
        let mut cells = Vec::new();
        for (c, kind) in [CellKind::Normal, CellKind::Expand].into_iter().enumerate() {
            let mut nodes = Vec::new();
            for n in 0..INTERMEDIATE {
                let no = 5 + c * INTERMEDIATE + n;
                let line = lines[no - 1];
                let prefix = format!("{} node{}: ", kind.as_str(), n + 3);
                let rest = line
                    .strip_prefix(&prefix)
                    .ok_or_else(|| bad(no, format!("expected a line starting `{prefix}`")))?;
                let pairs: Vec<&str> = rest.split("), (").collect();
                if pairs.len() != 2 {
                    return Err(bad(no, "expected two (input=I, op) pairs".into()));
                }
                let mut parsed = [(0, OpKind::None); 2];
                for (slot, p) in pairs.iter().enumerate() {
                    let p = p.trim_start_matches('(').trim_end_matches(')');
                    let (inp, op) = p
                        .split_once(", ")
                        .ok_or_else(|| bad(no, format!("malformed pair `{p}`")))?;
                    let i: usize = inp
                        .strip_prefix("input=")
                        .and_then(|v| v.parse().ok())
                        .filter(|&v| v >= 1)
                        .ok_or_else(|| bad(no, format!("malformed input `{inp}`")))?;
                    let op: OpKind = op.parse().map_err(|e: Error| bad(no, e.to_string()))?;
                    parsed[slot] = (i - 1, op);
                }
                nodes.push(parsed);
            }
            let genes = CellGenes(nodes);
            genes
                .validate()
                .map_err(|e| bad(5 + c * INTERMEDIATE, e.to_string()))?;
            cells.push(genes);
        }
        let expand = cells.pop().expect("two cells");
        let normal = cells.pop().expect("two cells");
        Ok(Genotype {
            normal,
            expand,
            k_c,
        })
    }
}
