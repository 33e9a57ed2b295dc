//! Two-stage heterogeneous message passing over patch nodes.
//!
//! A node feature is a `(c, p, p)` patch flattened channel-major. Every
//! learned map acts on the `c` channels of each patch position and is shared
//! across positions, so node dimension `c·p·p` is preserved and the same
//! parameters serve any patch side.
//!
//! Attention: `W_b` maps each position to `heads × d_head`. The logit of
//! neighbor `j` for center `i` and head `h` is
//! `LeakyReLU(a_h · mean_pos(W_b x_i) + b_h · mean_pos(W_b x_j))`, softmaxed
//! over the neighborhood. The head-averaged weighted sum of `W_b x_j` goes
//! through the output transform `T` (per position, `d_head → c` plus bias)
//! and is added to the center.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{attention_weights, Csr, Tape, Var};
use crate::config::Aggregator;
use crate::error::{Error, Result};
use crate::graph_builder::{Edge, HeteroStyleGraph};
use crate::params::ModelParameters;
use crate::patch_ops::NodeFeature;
use crate::tensor::{ShapeFmt, Tensor};

/// Resolves a stage-relative parameter name (`"gat.wb"`, `"gin.eps"`, ...)
/// to a tape variable.
pub type Binder<'a> = dyn FnMut(&mut Tape, &str) -> Result<Var> + 'a;

/// Attention weights of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `W_b`: `[heads·d_head, c]`, rows grouped by head.
    pub wb: Tensor,
    /// Center half of `W_a`: `[heads, d_head]`.
    pub att_left: Tensor,
    /// Neighbor half of `W_a`: `[heads, d_head]`.
    pub att_right: Tensor,
    /// Output transform `T`: `[c, d_head]`.
    pub out_weight: Tensor,
    /// `[c]`.
    pub out_bias: Tensor,
    pub negative_slope: f64,
}

impl AttentionParams {
    pub fn from_model(params: &ModelParameters, stage: &str) -> Result<Self> {
        let get = |n: &str| params.get(&format!("gnn.{stage}.gat.{n}")).cloned();
        let p = Self {
            wb: get("wb")?,
            att_left: get("att_left")?,
            att_right: get("att_right")?,
            out_weight: get("out.weight")?,
            out_bias: get("out.bias")?,
            negative_slope: params.arch().negative_slope,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn heads(&self) -> usize {
        self.att_left.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.att_left.shape().get(1).copied().unwrap_or(0)
    }

    pub fn channels(&self) -> usize {
        self.wb.shape().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let (heads, dh) = self.att_left.dims2()?;
        let c = self.channels();
        let checks: [(&'static str, &Tensor, Vec<usize>); 4] = [
            ("attention W_b", &self.wb, vec![heads * dh, c]),
            ("attention right vector", &self.att_right, vec![heads, dh]),
            ("output transform", &self.out_weight, vec![c, dh]),
            ("output bias", &self.out_bias, vec![c]),
        ];
        for (ctx, t, want) in checks {
            if t.shape() != want.as_slice() {
                return Err(Error::shape(ctx, ShapeFmt(&want), ShapeFmt(t.shape())));
            }
        }
        if heads == 0 || dh == 0 || c == 0 {
            return Err(Error::Parameter(
                "attention needs at least one head, head dim and channel".into(),
            ));
        }
        if !(self.negative_slope > 0.0 && self.negative_slope < 1.0) {
            return Err(Error::Parameter(format!(
                "negative slope {} outside (0, 1)",
                self.negative_slope
            )));
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        match name {
            "gat.wb" => Some(&self.wb),
            "gat.att_left" => Some(&self.att_left),
            "gat.att_right" => Some(&self.att_right),
            "gat.out.weight" => Some(&self.out_weight),
            "gat.out.bias" => Some(&self.out_bias),
            _ => None,
        }
    }
}

/// Weights of one ablation aggregator, keyed by name within the kind
/// (`"weight"`, `"bias"`, `"eps"`, `"mlp1.weight"`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct AltParams {
    pub kind: Aggregator,
    pub arrays: BTreeMap<String, Tensor>,
}

impl AltParams {
    pub fn from_model(params: &ModelParameters, stage: &str, kind: Aggregator) -> Result<Self> {
        if kind == Aggregator::Gat {
            return Err(Error::Parameter("gat is not an alternative aggregator".into()));
        }
        let prefix = format!("gnn.{stage}.{kind}.");
        let arrays = params
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix.as_str()).map(|s| (s.to_string(), t.clone())))
            .collect();
        Ok(Self { kind, arrays })
    }
}

fn const_binder<'a>(
    lookup: impl Fn(&str) -> Option<&'a Tensor> + 'a,
) -> impl FnMut(&mut Tape, &str) -> Result<Var> + 'a {
    let mut cache: BTreeMap<String, Var> = BTreeMap::new();
    move |tape: &mut Tape, name: &str| {
        if let Some(v) = cache.get(name) {
            return Ok(*v);
        }
        let t = lookup(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        let v = tape.constant(t.clone());
        cache.insert(name.to_string(), v);
        Ok(v)
    }
}

fn position_offsets(nodes: usize, positions: usize) -> Vec<usize> {
    (0..=nodes).map(|i| i * positions).collect()
}

fn positions_of(tape: &Tape, x: Var, channels: usize) -> Result<usize> {
    let (_, d) = tape.value(x).dims2()?;
    if channels == 0 || d % channels != 0 {
        return Err(Error::shape(
            "node feature length",
            format!("multiple of {channels} channels"),
            d,
        ));
    }
    Ok(d / channels)
}

/// Position-wise `W_b` transform: `[n, c·P] -> [n·P, heads·d_head]`.
fn transform(tape: &mut Tape, x: Var, wb: Var, channels: usize) -> Result<Var> {
    let pix = tape.nodes_to_pixels(x, channels)?;
    tape.linear(pix, wb, None)
}

/// One half of the attention logit per node and head, `[n, heads]`.
fn logit_half(tape: &mut Tape, z: Var, att: Var, positions: usize) -> Result<Var> {
    let n = tape.value(z).shape()[0] / positions;
    let scores = tape.head_dot(z, att)?;
    tape.segment_mean(scores, &position_offsets(n, positions))
}

/// Attention update of every center over its neighbors among `keys`,
/// including the residual. `centers: [N_c, c·P]`, `keys: [N_k, c·P]`.
pub fn gat_pass_var(
    tape: &mut Tape,
    bind: &mut Binder<'_>,
    centers: Var,
    keys: Var,
    nbrs: &Csr,
    slope: f64,
) -> Result<Var> {
    let wb = bind(tape, "gat.wb")?;
    let al = bind(tape, "gat.att_left")?;
    let ar = bind(tape, "gat.att_right")?;
    let tw = bind(tape, "gat.out.weight")?;
    let tb = bind(tape, "gat.out.bias")?;
    let channels = tape.value(wb).shape()[1];
    let dh = tape.value(al).shape()[1];
    let positions = positions_of(tape, centers, channels)?;
    if positions_of(tape, keys, channels)? != positions {
        return Err(Error::shape(
            "neighbor feature length",
            tape.value(centers).shape()[1],
            tape.value(keys).shape()[1],
        ));
    }
    let zk = transform(tape, keys, wb, channels)?;
    let right = logit_half(tape, zk, ar, positions)?;
    let zc = if centers == keys {
        zk
    } else {
        transform(tape, centers, wb, channels)?
    };
    let left = logit_half(tape, zc, al, positions)?;
    let nk = tape.value(keys).shape()[0];
    let hd = tape.value(zk).shape()[1];
    let msgs = tape.reshape(zk, &[nk, positions * hd])?;
    let agg = tape.attention(left, right, msgs, nbrs, dh, slope)?;
    let nc = tape.value(centers).shape()[0];
    let agg = tape.reshape(agg, &[nc * positions, dh])?;
    let out = tape.linear(agg, tw, Some(tb))?;
    let out = tape.pixels_to_nodes(out, positions)?;
    tape.add(out, centers)
}

/// Ablation aggregator formula without the residual.
pub fn alt_formula_var(
    tape: &mut Tape,
    bind: &mut Binder<'_>,
    kind: Aggregator,
    centers: Var,
    keys: Var,
    nbrs: &Csr,
    channels: usize,
) -> Result<Var> {
    let positions = positions_of(tape, centers, channels)?;
    let nc = tape.value(centers).shape()[0];
    if nbrs.centers() != nc {
        return Err(Error::shape("neighborhoods", nc, nbrs.centers()));
    }
    if (0..nc).any(|i| nbrs.neighbors(i).is_empty()) {
        return Err(Error::Contract(
            "aggregation needs at least one neighbor per center".into(),
        ));
    }
    let gathered = tape.gather_rows(keys, &nbrs.indices)?;
    let pre = |k: Aggregator, n: &str| format!("{k}.{n}");
    let layer = |tape: &mut Tape, bind: &mut Binder<'_>, x: Var, name: &str| -> Result<Var> {
        let w = bind(tape, &pre(kind, &format!("{name}weight")))?;
        let b = bind(tape, &pre(kind, &format!("{name}bias")))?;
        tape.linear(x, w, Some(b))
    };
    match kind {
        Aggregator::Gat => Err(Error::Parameter("gat is handled by the attention pass".into())),
        Aggregator::Gcn => {
            let mean = tape.segment_mean(gathered, &nbrs.offsets)?;
            let pix = tape.nodes_to_pixels(mean, channels)?;
            let y = layer(tape, bind, pix, "")?;
            tape.pixels_to_nodes(y, positions)
        }
        Aggregator::Gin => {
            let sum = tape.segment_sum(gathered, &nbrs.offsets)?;
            let eps = bind(tape, &pre(kind, "eps"))?;
            let factor = tape.add_scalar(eps, 1.0);
            let own = tape.scale_by(centers, factor)?;
            let h = tape.add(own, sum)?;
            let pix = tape.nodes_to_pixels(h, channels)?;
            let y = layer(tape, bind, pix, "mlp1.")?;
            let y = tape.relu(y);
            let y = layer(tape, bind, y, "mlp2.")?;
            tape.pixels_to_nodes(y, positions)
        }
        Aggregator::Sage => {
            let mean = tape.segment_mean(gathered, &nbrs.offsets)?;
            let cp = tape.nodes_to_pixels(centers, channels)?;
            let mp = tape.nodes_to_pixels(mean, channels)?;
            let cat = tape.concat_cols(cp, mp)?;
            let y = layer(tape, bind, cat, "")?;
            tape.pixels_to_nodes(y, positions)
        }
        Aggregator::EdgeConv => {
            let own = tape.gather_rows(centers, &nbrs.owners())?;
            let diff = tape.sub(gathered, own)?;
            let op = tape.nodes_to_pixels(own, channels)?;
            let dp = tape.nodes_to_pixels(diff, channels)?;
            let cat = tape.concat_cols(op, dp)?;
            let y = layer(tape, bind, cat, "mlp1.")?;
            let y = tape.relu(y);
            let y = layer(tape, bind, y, "mlp2.")?;
            let per_edge = tape.pixels_to_nodes(y, positions)?;
            tape.segment_max(per_edge, &nbrs.offsets)
        }
    }
}

/// One message-passing stage with the chosen aggregator, residual included.
#[allow(clippy::too_many_arguments)]
pub fn stage_pass_var(
    tape: &mut Tape,
    bind: &mut Binder<'_>,
    kind: Aggregator,
    centers: Var,
    keys: Var,
    nbrs: &Csr,
    channels: usize,
    slope: f64,
) -> Result<Var> {
    match kind {
        Aggregator::Gat => gat_pass_var(tape, bind, centers, keys, nbrs, slope),
        _ => {
            let y = alt_formula_var(tape, bind, kind, centers, keys, nbrs, channels)?;
            tape.add(y, centers)
        }
    }
}

fn stack(nodes: &[impl AsRef<[f64]>], context: &'static str) -> Result<Tensor> {
    let d = nodes.first().map(|n| n.as_ref().len()).unwrap_or(0);
    let mut data = Vec::with_capacity(nodes.len() * d);
    for n in nodes {
        if n.as_ref().len() != d {
            return Err(Error::shape(context, d, n.as_ref().len()));
        }
        data.extend_from_slice(n.as_ref());
    }
    Tensor::new(&[nodes.len(), d], data)
}

fn unstack(t: &Tensor) -> Vec<NodeFeature> {
    let d = t.shape()[1];
    if d == 0 {
        return vec![NodeFeature(Vec::new()); t.shape()[0]];
    }
    t.data().chunks_exact(d).map(|r| NodeFeature(r.to_vec())).collect()
}

fn single(center: &NodeFeature, neighbors: &[NodeFeature]) -> Result<(Tensor, Tensor, Csr)> {
    if neighbors.is_empty() {
        return Err(Error::Contract("neighbor list must not be empty".into()));
    }
    let c = stack(core::slice::from_ref(center), "center")?;
    let n = stack(neighbors, "neighbor features")?;
    if n.shape()[1] != c.shape()[1] {
        return Err(Error::shape("neighbor feature length", c.shape()[1], n.shape()[1]));
    }
    Ok((c, n, Csr::from_lists(&[(0..neighbors.len()).collect()])))
}

/// Softmax attention weights of `head` over `neighbors`, in neighbor order.
pub fn attention_coefficients(
    center: &NodeFeature,
    neighbors: &[NodeFeature],
    params: &AttentionParams,
    head: usize,
) -> Result<Vec<f64>> {
    params.validate()?;
    let heads = params.heads();
    if head >= heads {
        return Err(Error::Parameter(format!("head {head} out of range for {heads} heads")));
    }
    let (c, n, nbrs) = single(center, neighbors)?;
    let mut tape = Tape::new();
    let cv = tape.constant(c);
    let nv = tape.constant(n);
    let wb = tape.constant(params.wb.clone());
    let al = tape.constant(params.att_left.clone());
    let ar = tape.constant(params.att_right.clone());
    let ch = params.channels();
    let positions = positions_of(&tape, cv, ch)?;
    let zc = transform(&mut tape, cv, wb, ch)?;
    let left = logit_half(&mut tape, zc, al, positions)?;
    let zn = transform(&mut tape, nv, wb, ch)?;
    let right = logit_half(&mut tape, zn, ar, positions)?;
    let w = attention_weights(
        tape.value(left).data(),
        tape.value(right).data(),
        heads,
        &nbrs,
        params.negative_slope,
    );
    Ok(w.chunks_exact(heads).map(|r| r[head]).collect())
}

/// Attention update of a single center, residual included.
pub fn aggregate(center: &NodeFeature, neighbors: &[NodeFeature], params: &AttentionParams) -> Result<NodeFeature> {
    params.validate()?;
    let (c, n, nbrs) = single(center, neighbors)?;
    let mut tape = Tape::new();
    let cv = tape.constant(c);
    let nv = tape.constant(n);
    let mut bind = const_binder(|name| params.tensor(name));
    let out = gat_pass_var(&mut tape, &mut bind, cv, nv, &nbrs, params.negative_slope)?;
    Ok(unstack(tape.value(out)).remove(0))
}

/// Ablation aggregator formula for a single center, without the residual.
pub fn alt_aggregate(
    kind: Aggregator,
    center: &NodeFeature,
    neighbors: &[NodeFeature],
    params: &AltParams,
) -> Result<NodeFeature> {
    if kind == Aggregator::Gat || params.kind != kind {
        return Err(Error::Parameter(format!(
            "alternative aggregator `{kind}` needs its own parameters (got `{}`)",
            params.kind
        )));
    }
    let (c, n, nbrs) = single(center, neighbors)?;
    let channels = match kind {
        Aggregator::Gcn | Aggregator::Sage => params.arrays.get("weight"),
        _ => params.arrays.get("mlp1.weight"),
    }
    .ok_or_else(|| Error::MissingParameter(format!("{kind} weight")))?
    .shape()[0];
    let mut tape = Tape::new();
    let cv = tape.constant(c);
    let nv = tape.constant(n);
    let prefix = format!("{kind}.");
    let mut bind =
        const_binder(move |name: &str| name.strip_prefix(prefix.as_str()).and_then(|n| params.arrays.get(n)));
    let out = alt_formula_var(&mut tape, &mut bind, kind, cv, nv, &nbrs, channels)?;
    Ok(unstack(tape.value(out)).remove(0))
}

fn csr_from_edges(edges: &[Edge], centers: usize) -> Result<Csr> {
    let mut lists = vec![Vec::new(); centers];
    for e in edges {
        if e.target >= centers {
            return Err(Error::Contract(format!("edge target {} out of range", e.target)));
        }
        lists[e.target].push(e.source);
    }
    Ok(Csr::from_lists(&lists))
}

fn run_pass(
    centers: &[NodeFeature],
    keys: Option<&[NodeFeature]>,
    nbrs: &Csr,
    params: &AttentionParams,
) -> Result<Vec<NodeFeature>> {
    params.validate()?;
    let mut tape = Tape::new();
    let cv = tape.constant(stack(centers, "content nodes")?);
    let kv = match keys {
        Some(k) => tape.constant(stack(k, "neighbor nodes")?),
        None => cv,
    };
    let mut bind = const_binder(|name| params.tensor(name));
    let out = gat_pass_var(&mut tape, &mut bind, cv, kv, nbrs, params.negative_slope)?;
    Ok(unstack(tape.value(out)))
}

/// Updates every content node from its style neighbors. Style nodes are
/// left untouched.
pub fn style_to_content_pass(graph: &HeteroStyleGraph, params: &AttentionParams) -> Result<Vec<NodeFeature>> {
    graph.validate()?;
    run_pass(
        &graph.content_nodes,
        Some(&graph.style_nodes),
        &graph.inter_neighbors(),
        params,
    )
}

/// Updates every content node from its content neighbors. An empty edge list
/// (intra stage disabled) returns the input unchanged.
pub fn content_to_content_pass(
    content: &[NodeFeature],
    intra_edges: &[Edge],
    params: &AttentionParams,
) -> Result<Vec<NodeFeature>> {
    if intra_edges.is_empty() {
        return Ok(content.to_vec());
    }
    if intra_edges
        .iter()
        .any(|e| e.source >= content.len() || e.source == e.target)
    {
        return Err(Error::Contract(
            "intra edges must stay in range and avoid self-loops".into(),
        ));
    }
    run_pass(content, None, &csr_from_edges(intra_edges, content.len())?, params)
}
