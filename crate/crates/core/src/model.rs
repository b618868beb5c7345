//! The node-matching GNN and the graph-level match.
//!
//! For every node `i` of one attribute graph the model computes
//!
//! * `z_i`, the sum of inner-interaction messages `f_neural(u_i, u_j)` over
//!   the other nodes of the same graph,
//! * `s_i`, the sum of Bi-interactions `u_i ⊙ û_j` over every node of the
//!   opposite graph,
//! * `u'_i`, the final hidden state of a GRU run over `[u_i, z_i, s_i]`
//!   from a zero state.
//!
//! The graph representation is `Σ u'_i` and the score is the dot product of
//! the user and item graph representations.
//!
//! All sums over nodes run in ascending attribute-id order, so the score is
//! bit-for-bit independent of the order attributes were listed in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, ParamId, Parameter, ParameterSet, Tape, Var};
use crate::data::{init_embeddings, AttributeId, AttributeValuePair, DataSample, EmbeddingTable};
use crate::error::{GmcfError, Result};
use crate::graph::{AttributeGraph, GraphNode};
use crate::variants::{CrossKind, FuseKind, GraphLayout, InnerKind, VariantConfig};

/// Width multiplier of every hidden layer.
pub const HIDDEN_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// ReLU hidden layers, linear output. Parameters occupy consecutive
/// registry ids starting at `base`: weight then bias, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    base: usize,
    pub layers: Vec<Dense>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

impl Mlp {
    /// `input -> hidden (x hidden_layers) -> output`.
    pub fn new(
        name: &str,
        base: usize,
        input: usize,
        hidden: usize,
        output: usize,
        hidden_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, hidden_layers));
        widths.push(output);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense {
                weight: Parameter::matrix(format!("{name}.{l}.w"), w[1], w[0], uniform(rng, w[0] * w[1], w[0])),
                bias: Parameter::vector(format!("{name}.{l}.b"), vec![0.0; w[1]]),
            })
            .collect();
        Self { base, layers }
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    fn rebase(&mut self, base: usize) {
        self.base = base;
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(ParamId(self.base + 2 * l), &layer.weight);
            let b = tape.param(ParamId(self.base + 2 * l + 1), &layer.bias);
            let wx = tape.matvec(w, h)?;
            h = tape.add(wx, b)?;
            if l < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// Gated recurrent unit with input and hidden size `d`:
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// n = tanh(W_n x + r ⊙ (U_n h) + b_n)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    base: usize,
    /// `W_z, U_z, b_z, W_r, U_r, b_r, W_n, U_n, b_n`
    pub params: Vec<Parameter>,
}

impl Gru {
    pub const PARAM_COUNT: usize = 9;

    pub fn new(base: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::with_capacity(Self::PARAM_COUNT);
        for gate in ["z", "r", "n"] {
            params.push(Parameter::matrix(format!("gru.w_{gate}"), d, d, uniform(rng, d * d, d)));
            params.push(Parameter::matrix(format!("gru.u_{gate}"), d, d, uniform(rng, d * d, d)));
            params.push(Parameter::vector(format!("gru.b_{gate}"), vec![0.0; d]));
        }
        Self { base, params }
    }

    fn bind(&self, tape: &mut Tape, k: usize) -> Var {
        tape.param(ParamId(self.base + k), &self.params[k])
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, k: usize| -> Result<Var> {
            let (w, u, b) = (self.bind(tape, k), self.bind(tape, k + 1), self.bind(tape, k + 2));
            let wx = tape.matvec(w, x)?;
            let uh = tape.matvec(u, h)?;
            let a = tape.add(wx, uh)?;
            let a = tape.add(a, b)?;
            tape.sigmoid(a)
        };
        let z = gate(tape, 0)?;
        let r = gate(tape, 3)?;
        let (w, u, b) = (self.bind(tape, 6), self.bind(tape, 7), self.bind(tape, 8));
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, h)?;
        let ruh = tape.mul(r, uh)?;
        let a = tape.add(wx, ruh)?;
        let a = tape.add(a, b)?;
        let n = tape.tanh(a)?;
        // n + z ⊙ (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    /// Final hidden state over `seq` from a zero initial state.
    pub fn run(&self, tape: &mut Tape, seq: &[Var]) -> Result<Var> {
        let d = match self.params[0].shape {
            crate::autodiff::Shape::Matrix(r, _) => r,
            crate::autodiff::Shape::Vector(n) => n,
        };
        let mut h = tape.zeros(d);
        for &x in seq {
            h = self.step(tape, x, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fuser {
    Gru(Gru),
    Mlp(Mlp),
    /// `Sum` and `FmLinear` have no parameters.
    Linear,
}

/// Every trainable array of one model, in registry order: embeddings by
/// attribute id, the inner MLP, the separate cross MLP, the fusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    variant: VariantConfig,
    hidden_layers: usize,
    pub embeddings: EmbeddingTable,
    pub inner_mlp: Option<Mlp>,
    pub cross_mlp: Option<Mlp>,
    pub fuser: Fuser,
}

impl ModelParams {
    /// Fresh parameters. Embeddings use `seed`; network weights use a
    /// generator derived from it.
    pub fn init(universe: usize, dim: usize, variant: VariantConfig, hidden_layers: usize, seed: u64) -> Result<Self> {
        let table = init_embeddings(universe, dim, seed)?;
        Self::from_embeddings(table, variant, hidden_layers, seed)
    }

    pub fn from_embeddings(
        embeddings: EmbeddingTable,
        variant: VariantConfig,
        hidden_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        variant.validate()?;
        let d = embeddings.dim();
        let hidden = HIDDEN_FACTOR * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d63_665f_6e65_7473);
        let mut base = embeddings.len();
        let inner_mlp = variant.uses_inner_mlp().then(|| {
            let m = Mlp::new("inner", base, 2 * d, hidden, d, hidden_layers, &mut rng);
            base += m.param_count();
            m
        });
        let cross_mlp = variant.uses_cross_mlp().then(|| {
            let m = Mlp::new("cross", base, 2 * d, hidden, d, hidden_layers, &mut rng);
            base += m.param_count();
            m
        });
        let fuser = match variant.fuse {
            FuseKind::Gru => Fuser::Gru(Gru::new(base, d, &mut rng)),
            // the fusing MLP always has exactly one 4d hidden layer
            FuseKind::Mlp => Fuser::Mlp(Mlp::new("fuse", base, 3 * d, hidden, d, 1, &mut rng)),
            FuseKind::Sum | FuseKind::FmLinear => Fuser::Linear,
        };
        Ok(Self {
            variant,
            hidden_layers,
            embeddings,
            inner_mlp,
            cross_mlp,
            fuser,
        })
    }

    pub fn variant(&self) -> VariantConfig {
        self.variant
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden_layers
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    /// Parameters in registry order; `ParamId(k)` is the `k`-th entry.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.embeddings.parameters().collect();
        if let Some(m) = &self.inner_mlp {
            out.extend(m.parameters());
        }
        if let Some(m) = &self.cross_mlp {
            out.extend(m.parameters());
        }
        match &self.fuser {
            Fuser::Gru(g) => out.extend(g.params.iter()),
            Fuser::Mlp(m) => out.extend(m.parameters()),
            Fuser::Linear => {}
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.embeddings.parameters_mut().collect();
        if let Some(m) = &mut self.inner_mlp {
            out.extend(m.parameters_mut());
        }
        if let Some(m) = &mut self.cross_mlp {
            out.extend(m.parameters_mut());
        }
        match &mut self.fuser {
            Fuser::Gru(g) => out.extend(g.params.iter_mut()),
            Fuser::Mlp(m) => out.extend(m.parameters_mut()),
            Fuser::Linear => {}
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Copies the inner MLP's weights into the separate cross MLP.
    pub fn tie_cross_to_inner(&mut self) -> Result<()> {
        match (&self.inner_mlp, &mut self.cross_mlp) {
            (Some(inner), Some(cross)) => {
                let base = cross.base;
                *cross = inner.clone();
                cross.rebase(base);
                Ok(())
            }
            _ => Err(GmcfError::InvalidConfig(
                "tying needs both an inner and a separate cross MLP".into(),
            )),
        }
    }

    fn embedding(&self, tape: &mut Tape, pair: &AttributeValuePair) -> Result<Var> {
        let p = self.embeddings.parameter(pair.att.id)?;
        let v = tape.param(ParamId(pair.att.id), p);
        tape.scale(v, pair.val)
    }

    fn inner_net(&self) -> Result<&Mlp> {
        self.inner_mlp
            .as_ref()
            .ok_or_else(|| GmcfError::Contract(format!("variant '{}' has no inner MLP", self.variant)))
    }

    fn cross_net(&self) -> Result<&Mlp> {
        match self.variant.cross {
            CrossKind::MlpSeparate => self
                .cross_mlp
                .as_ref()
                .ok_or_else(|| GmcfError::Contract("missing cross MLP".into())),
            _ => self.inner_net(),
        }
    }
}

impl ParameterSet for ModelParams {
    fn param_refs(&self) -> Vec<&Parameter> {
        self.parameters()
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Parameter> {
        self.parameters_mut()
    }
}

fn check_len(primitive: &'static str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(GmcfError::Shape {
            primitive,
            detail: format!("vector of length {}, expected {d}", v.len()),
        });
    }
    Ok(())
}

/// Indices of `atts` in ascending attribute-id order.
fn canonical_order(atts: impl Iterator<Item = AttributeId>) -> Vec<usize> {
    let mut idx: Vec<(usize, AttributeId)> = atts.enumerate().collect();
    idx.sort_by_key(|&(_, a)| a.id);
    idx.into_iter().map(|(k, _)| k).collect()
}

/// One attribute graph as tape handles.
struct TapeGraph {
    atts: Vec<AttributeId>,
    nodes: Vec<Var>,
    order: Vec<usize>,
}

impl TapeGraph {
    fn from_pairs(tape: &mut Tape, params: &ModelParams, pairs: &[AttributeValuePair]) -> Result<Self> {
        let nodes = pairs
            .iter()
            .map(|p| params.embedding(tape, p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs.iter().map(|p| p.att).collect(), nodes)
    }

    fn from_graph_nodes(tape: &mut Tape, nodes: &[GraphNode]) -> Result<Self> {
        let vars = nodes.iter().map(|n| tape.constant(n.repr.clone())).collect();
        Self::new(nodes.iter().map(|n| n.att()).collect(), vars)
    }

    fn new(atts: Vec<AttributeId>, nodes: Vec<Var>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(GmcfError::Contract("an attribute graph needs at least one node".into()));
        }
        let order = canonical_order(atts.iter().copied());
        Ok(Self { atts, nodes, order })
    }

    fn ordered(&self) -> impl Iterator<Item = Var> + '_ {
        self.order.iter().map(|&k| self.nodes[k])
    }
}

fn pair_interaction(tape: &mut Tape, net: Option<&Mlp>, a: Var, b: Var) -> Result<Var> {
    match net {
        Some(mlp) => {
            let x = tape.concat(&[a, b])?;
            mlp.apply(tape, x)
        }
        None => tape.mul(a, b),
    }
}

/// `z_i`: messages from every other node of the same graph.
fn message_on_tape(tape: &mut Tape, params: &ModelParams, g: &TapeGraph, i: usize) -> Result<Var> {
    let d = params.dim();
    let net = match params.variant.inner {
        InnerKind::Mlp => Some(params.inner_net()?),
        InnerKind::Bi => None,
    };
    let mut terms = Vec::with_capacity(g.nodes.len());
    for &j in &g.order {
        if j != i {
            terms.push(pair_interaction(tape, net, g.nodes[i], g.nodes[j])?);
        }
    }
    if terms.is_empty() {
        Ok(tape.zeros(d))
    } else {
        tape.add_all(&terms)
    }
}

/// `s_i`: matches against every node of the opposite graph. `opposite_sum`
/// is `Σ û_j`, shared by all nodes of one graph under Bi matching.
fn match_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    u: Var,
    opposite: &TapeGraph,
    opposite_sum: Option<Var>,
) -> Result<Var> {
    match params.variant.cross {
        CrossKind::None => Ok(tape.zeros(params.dim())),
        CrossKind::Bi => {
            let sum = match opposite_sum {
                Some(s) => s,
                None => {
                    let ordered: Vec<Var> = opposite.ordered().collect();
                    tape.add_all(&ordered)?
                }
            };
            tape.mul(u, sum)
        }
        CrossKind::MlpShared | CrossKind::MlpSeparate => {
            let net = params.cross_net()?;
            let ordered: Vec<Var> = opposite.ordered().collect();
            let terms = ordered
                .into_iter()
                .map(|o| pair_interaction(tape, Some(net), u, o))
                .collect::<Result<Vec<_>>>()?;
            tape.add_all(&terms)
        }
    }
}

fn fuse_on_tape(tape: &mut Tape, params: &ModelParams, u: Var, z: Var, s: Var) -> Result<Var> {
    match (&params.fuser, params.variant.fuse) {
        (Fuser::Gru(gru), _) => gru.run(tape, &[u, z, s]),
        (Fuser::Mlp(mlp), _) => {
            let x = tape.concat(&[u, z, s])?;
            mlp.apply(tape, x)
        }
        (Fuser::Linear, FuseKind::Sum) => {
            let a = tape.add(u, z)?;
            tape.add(a, s)
        }
        (Fuser::Linear, FuseKind::FmLinear) => {
            let half = tape.scale(s, 0.5)?;
            tape.add(u, half)
        }
        (Fuser::Linear, kind) => Err(GmcfError::Contract(format!("fusion {kind:?} has no parameters"))),
    }
}

/// Per-node tape handles.
#[derive(Debug, Clone, Copy)]
pub struct NodeVars {
    pub u: Var,
    pub z: Var,
    pub s: Var,
    pub fused: Var,
}

/// Handles of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub score: Var,
    pub user_repr: Var,
    pub item_repr: Var,
    pub user_nodes: Vec<NodeVars>,
    pub item_nodes: Vec<NodeVars>,
}

fn graph_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    g: &TapeGraph,
    opposite: &TapeGraph,
    opposite_sum: Option<Var>,
) -> Result<(Var, Vec<NodeVars>)> {
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for i in 0..g.nodes.len() {
        let u = g.nodes[i];
        let z = message_on_tape(tape, params, g, i)?;
        let s = match_on_tape(tape, params, u, opposite, opposite_sum)?;
        let fused = fuse_on_tape(tape, params, u, z, s)?;
        nodes.push(NodeVars { u, z, s, fused });
    }
    let ordered: Vec<Var> = g.order.iter().map(|&k| nodes[k].fused).collect();
    Ok((tape.add_all(&ordered)?, nodes))
}

fn pair_layout_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    user: &TapeGraph,
    item: &TapeGraph,
) -> Result<TapeForward> {
    let (user_sum, item_sum) = if params.variant.cross == CrossKind::Bi {
        let u: Vec<Var> = user.ordered().collect();
        let i: Vec<Var> = item.ordered().collect();
        (Some(tape.add_all(&u)?), Some(tape.add_all(&i)?))
    } else {
        (None, None)
    };
    let (user_repr, user_nodes) = graph_on_tape(tape, params, user, item, item_sum)?;
    let (item_repr, item_nodes) = graph_on_tape(tape, params, item, user, user_sum)?;
    let score = tape.dot(user_repr, item_repr)?;
    Ok(TapeForward {
        score,
        user_repr,
        item_repr,
        user_nodes,
        item_nodes,
    })
}

/// Every pair across the union node set is a cross interaction; there are
/// no inner messages and the match is `sum(v_user) + sum(v_item)`.
fn single_layout_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    user: &TapeGraph,
    item: &TapeGraph,
) -> Result<TapeForward> {
    let d = params.dim();
    let union_atts: Vec<AttributeId> = user.atts.iter().chain(&item.atts).copied().collect();
    let union_nodes: Vec<Var> = user.nodes.iter().chain(&item.nodes).copied().collect();
    let order = canonical_order(union_atts.iter().copied());
    let net = match params.variant.cross {
        CrossKind::Bi => None,
        CrossKind::MlpShared | CrossKind::MlpSeparate => Some(params.cross_net()?),
        CrossKind::None => unreachable!("rejected by VariantConfig::validate"),
    };
    let mut nodes = Vec::with_capacity(union_nodes.len());
    for i in 0..union_nodes.len() {
        let u = union_nodes[i];
        let mut terms = Vec::new();
        for &j in &order {
            if j != i {
                terms.push(pair_interaction(tape, net, u, union_nodes[j])?);
            }
        }
        let s = tape.add_all(&terms)?;
        let z = tape.zeros(d);
        let fused = fuse_on_tape(tape, params, u, z, s)?;
        nodes.push(NodeVars { u, z, s, fused });
    }
    let p = user.nodes.len();
    let item_nodes = nodes.split_off(p);
    let user_nodes = nodes;
    let user_fused: Vec<Var> = user.order.iter().map(|&k| user_nodes[k].fused).collect();
    let item_fused: Vec<Var> = item.order.iter().map(|&k| item_nodes[k].fused).collect();
    let user_repr = tape.add_all(&user_fused)?;
    let item_repr = tape.add_all(&item_fused)?;
    let su = tape.sum(user_repr)?;
    let si = tape.sum(item_repr)?;
    let score = tape.add(su, si)?;
    Ok(TapeForward {
        score,
        user_repr,
        item_repr,
        user_nodes,
        item_nodes,
    })
}

fn layout_on_tape(tape: &mut Tape, params: &ModelParams, user: &TapeGraph, item: &TapeGraph) -> Result<TapeForward> {
    match params.variant.layout {
        GraphLayout::Pair => pair_layout_on_tape(tape, params, user, item),
        GraphLayout::Single => single_layout_on_tape(tape, params, user, item),
    }
}

/// Records the forward pass of one sample, with embeddings bound as
/// parameters so that `backward` reaches them.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    user: &[AttributeValuePair],
    item: &[AttributeValuePair],
) -> Result<TapeForward> {
    let user = TapeGraph::from_pairs(tape, params, user)?;
    let item = TapeGraph::from_pairs(tape, params, item)?;
    layout_on_tape(tape, params, &user, &item)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDiagnostics {
    pub att: AttributeId,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub fused: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub user_repr: Vec<f64>,
    pub item_repr: Vec<f64>,
    /// Raw match score `y'`.
    pub score: f64,
    /// In the sample's attribute order.
    pub user_nodes: Vec<NodeDiagnostics>,
    pub item_nodes: Vec<NodeDiagnostics>,
}

impl ForwardResult {
    /// `σ(y')`, the probability the loss is computed on.
    pub fn probability(&self) -> f64 {
        sigmoid(self.score)
    }

    fn collect(tape: &Tape, fw: &TapeForward, user: &[AttributeId], item: &[AttributeId]) -> Self {
        let diag = |nodes: &[NodeVars], atts: &[AttributeId]| {
            nodes
                .iter()
                .zip(atts)
                .map(|(n, &att)| NodeDiagnostics {
                    att,
                    u: tape.value(n.u).to_vec(),
                    z: tape.value(n.z).to_vec(),
                    s: tape.value(n.s).to_vec(),
                    fused: tape.value(n.fused).to_vec(),
                })
                .collect()
        };
        Self {
            user_repr: tape.value(fw.user_repr).to_vec(),
            item_repr: tape.value(fw.item_repr).to_vec(),
            score: tape.scalar(fw.score),
            user_nodes: diag(&fw.user_nodes, user),
            item_nodes: diag(&fw.item_nodes, item),
        }
    }
}

/// Forward pass under the parameters' own variant.
pub fn forward(params: &ModelParams, sample: &DataSample) -> Result<ForwardResult> {
    sample.validate()?;
    let mut tape = Tape::new();
    let fw = forward_on_tape(&mut tape, params, &sample.user_chars, &sample.item_chars)?;
    let user: Vec<AttributeId> = sample.user_chars.iter().map(|p| p.att).collect();
    let item: Vec<AttributeId> = sample.item_chars.iter().map(|p| p.att).collect();
    Ok(ForwardResult::collect(&tape, &fw, &user, &item))
}

/// Scores a sample: `y' = <v_G^U, v_G^I>` for the canonical layout.
pub fn predict(sample: &DataSample, params: &ModelParams) -> Result<ForwardResult> {
    forward(params, sample)
}

/// Forward pass over prebuilt graphs. Graph roles may be swapped freely;
/// node representations are taken from the graphs as constants.
pub fn predict_graphs(user: &AttributeGraph, item: &AttributeGraph, params: &ModelParams) -> Result<ForwardResult> {
    let mut tape = Tape::new();
    let ug = TapeGraph::from_graph_nodes(&mut tape, user.nodes())?;
    let ig = TapeGraph::from_graph_nodes(&mut tape, item.nodes())?;
    let fw = layout_on_tape(&mut tape, params, &ug, &ig)?;
    Ok(ForwardResult::collect(&tape, &fw, &ug.atts, &ig.atts))
}

/// `z_ij = f_neural(u_i, u_j)`; concatenation order matters.
pub fn inner_message(u_i: &[f64], u_j: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    let d = params.dim();
    check_len("inner_message", u_i, d)?;
    check_len("inner_message", u_j, d)?;
    let mut tape = Tape::new();
    let a = tape.constant(u_i.to_vec());
    let b = tape.constant(u_j.to_vec());
    let z = pair_interaction(&mut tape, Some(params.inner_net()?), a, b)?;
    Ok(tape.value(z).to_vec())
}

/// `z_i` for every node of `graph`, in node order.
pub fn message_pass(graph: &AttributeGraph, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let g = TapeGraph::from_graph_nodes(&mut tape, graph.nodes())?;
    (0..g.nodes.len())
        .map(|i| {
            let z = message_on_tape(&mut tape, params, &g, i)?;
            Ok(tape.value(z).to_vec())
        })
        .collect()
}

/// `s_i = Σ_j u_i ⊙ û_j`, evaluated as `u_i ⊙ Σ_j û_j`.
pub fn node_match(u_i: &[f64], opposite: &[GraphNode]) -> Result<Vec<f64>> {
    if opposite.is_empty() {
        return Err(GmcfError::Contract(
            "node matching needs at least one opposite node".into(),
        ));
    }
    for n in opposite {
        check_len("node_match", &n.repr, u_i.len())?;
    }
    let mut tape = Tape::new();
    let u = tape.constant(u_i.to_vec());
    let g = TapeGraph::from_graph_nodes(&mut tape, opposite)?;
    let ordered: Vec<Var> = g.ordered().collect();
    let sum = tape.add_all(&ordered)?;
    let s = tape.mul(u, sum)?;
    Ok(tape.value(s).to_vec())
}

/// `u'_i = f_fuse(u_i, z_i, s_i)` under the parameters' fusion kind.
pub fn fuse(u_i: &[f64], z_i: &[f64], s_i: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    let d = params.dim();
    for v in [u_i, z_i, s_i] {
        check_len("fuse", v, d)?;
    }
    let mut tape = Tape::new();
    let u = tape.constant(u_i.to_vec());
    let z = tape.constant(z_i.to_vec());
    let s = tape.constant(s_i.to_vec());
    let out = fuse_on_tape(&mut tape, params, u, z, s)?;
    Ok(tape.value(out).to_vec())
}

/// `f_G(G, V̂) = Σ_i u'_i`.
pub fn graph_representation(graph: &AttributeGraph, opposite: &[GraphNode], params: &ModelParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let g = TapeGraph::from_graph_nodes(&mut tape, graph.nodes())?;
    let o = TapeGraph::from_graph_nodes(&mut tape, opposite)?;
    let sum = if params.variant.cross == CrossKind::Bi {
        let ordered: Vec<Var> = o.ordered().collect();
        Some(tape.add_all(&ordered)?)
    } else {
        None
    };
    let (v, _) = graph_on_tape(&mut tape, params, &g, &o, sum)?;
    Ok(tape.value(v).to_vec())
}
