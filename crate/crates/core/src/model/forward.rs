use std::collections::BTreeMap;

use vip_tensor::{Graph, Tensor, Var};

use super::{layer_prefix, ModelDims, ParamSet};
use crate::data::Batch;
use crate::error::{Error, Result, StageExt};

const LN_EPS: f64 = 1e-5;

/// Parameters recorded on a graph, by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}

/// Records every tensor of `params` on `g`, as trainable leaves or as
/// constants.
pub fn bind(g: &mut Graph, params: &ParamSet, trainable: bool) -> Bound {
    let mut b = Bound::default();
    for (name, t) in params.iter() {
        let v = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        b.insert(name.clone(), v);
    }
    b
}

/// Parameter mask applied inside attention. `kept` lists the retained
/// attention dimensions used by the query and key projections; `p_hat`
/// gates the value projection elementwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnMask<'a> {
    pub kept: Option<&'a [usize]>,
    pub p_hat: Option<Var>,
}

impl AttnMask<'_> {
    pub fn none() -> Self {
        AttnMask::default()
    }
}

/// Features, node embeddings and calendar embeddings, concatenated in that
/// order: `x_in` is `B x m x l`, `nodes` names the variable behind each of
/// the `m` rows, and `tod`/`dow` hold `B x l` indices. Returns
/// `B x m x l x q`.
pub fn embed(
    g: &mut Graph,
    p: &Bound,
    dims: &ModelDims,
    x_in: Var,
    nodes: &[usize],
    tod: &[usize],
    dow: &[usize],
) -> Result<Var> {
    let s = g.shape(x_in).to_vec();
    if s.len() != 3 || s[1] != nodes.len() || s[2] != dims.input_len {
        return Err(Error::Contract(format!(
            "input window has shape {s:?}, expected [B, {}, {}]",
            nodes.len(),
            dims.input_len
        )));
    }
    let (bsz, m, l) = (s[0], s[1], s[2]);
    if tod.len() != bsz * l || dow.len() != bsz * l {
        return Err(Error::Contract("temporal index count does not match the batch".into()));
    }
    if let Some(&bad) = tod.iter().find(|&&t| t >= dims.steps_per_day) {
        return Err(Error::Contract(format!("time-of-day index {bad} outside 0..{}", dims.steps_per_day)));
    }
    if let Some(&bad) = dow.iter().find(|&&t| t >= dims.days_per_week) {
        return Err(Error::Contract(format!("day-of-week index {bad} outside 0..{}", dims.days_per_week)));
    }
    if let Some(&bad) = nodes.iter().find(|&&i| i >= dims.n) {
        return Err(Error::Contract(format!("variable index {bad} outside 0..{}", dims.n)));
    }
    let rows = bsz * m * l;
    let mut node_idx = Vec::with_capacity(rows);
    let mut tod_idx = Vec::with_capacity(rows);
    let mut dow_idx = Vec::with_capacity(rows);
    for b in 0..bsz {
        for &node in nodes {
            for t in 0..l {
                node_idx.push(node);
                tod_idx.push(tod[b * l + t]);
                dow_idx.push(dow[b * l + t]);
            }
        }
    }
    let stage = || "embedding".to_string();
    let x = g.reshape(x_in, &[rows, 1]).stage(stage)?;
    let h = g.matmul(x, p.get("input.w1")?).stage(stage)?;
    let h = g.add_along(h, p.get("input.b1")?, 1).stage(stage)?;
    let h = g.gelu(h).stage(stage)?;
    let h = g.matmul(h, p.get("input.w2")?).stage(stage)?;
    let ef = g.add_along(h, p.get("input.b2")?, 1).stage(stage)?;
    let en = g.gather(p.get("emb.node")?, 0, &node_idx).stage(stage)?;
    let et = g.gather(p.get("emb.tod")?, 0, &tod_idx).stage(stage)?;
    let ew = g.gather(p.get("emb.dow")?, 0, &dow_idx).stage(stage)?;
    let all = g.concat(&[ef, en, et, ew], 1).stage(stage)?;
    g.reshape(all, &[bsz, m, l, dims.q]).stage(stage)
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> vip_tensor::Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, v, t, q) = (s[0], s[1], s[2], s[3]);
    let dh = q / heads;
    let x = g.reshape(x, &[b, v, t, heads, dh])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    g.reshape(x, &[b * v * heads, t, dh])
}

fn merge_heads(g: &mut Graph, x: Var, shape: &[usize], heads: usize) -> vip_tensor::Result<Var> {
    let (b, v, t, q) = (shape[0], shape[1], shape[2], shape[3]);
    let x = g.reshape(x, &[b, v, heads, t, q / heads])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    g.reshape(x, &[b, v, t, q])
}

fn attention_core(
    g: &mut Graph,
    p: &Bound,
    dims: &ModelDims,
    layer: usize,
    x: Var,
    mask: AttnMask<'_>,
) -> Result<vip_tensor::Result<Var>> {
    let pre = layer_prefix(layer);
    let wq = p.get(&format!("{pre}.wq"))?;
    let wk = p.get(&format!("{pre}.wk"))?;
    let wv = p.get(&format!("{pre}.wv"))?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != dims.q {
        return Err(Error::Contract(format!("attention input {shape:?} is not [B, S, T, {}]", dims.q)));
    }
    if let Some(kept) = mask.kept {
        if kept.is_empty() || kept.iter().any(|&j| j >= dims.q) {
            return Err(Error::Contract("parameter mask must keep at least one valid dimension".into()));
        }
    }
    let run = |g: &mut Graph| -> vip_tensor::Result<Var> {
        let (q, k) = match mask.kept {
            Some(kept) => {
                let wq = g.gather(wq, 1, kept)?;
                let wk = g.gather(wk, 1, kept)?;
                let q = g.matmul(x, wq)?;
                let k = g.matmul(x, wk)?;
                // back to full width so every head keeps its own slots
                (g.scatter(q, 3, kept, dims.q)?, g.scatter(k, 3, kept, dims.q)?)
            }
            None => (g.matmul(x, wq)?, g.matmul(x, wk)?),
        };
        let mut v = g.matmul(x, wv)?;
        if let Some(ph) = mask.p_hat {
            v = g.mul_along(v, ph, 3)?;
        }
        let qh = split_heads(g, q, dims.heads)?;
        let kh = split_heads(g, k, dims.heads)?;
        let vh = split_heads(g, v, dims.heads)?;
        let scores = g.matmul_t(qh, kh, false, true)?;
        let scores = g.scale(scores, 1.0 / (dims.head_dim() as f64).sqrt())?;
        let att = g.softmax(scores)?;
        let out = g.matmul(att, vh)?;
        merge_heads(g, out, &shape, dims.heads)
    };
    Ok(run(g))
}

/// Multi-head self-attention over axis 2 of a `B x S x T x q` tensor, one
/// sequence per `(batch, S)` pair.
pub fn temporal_attention(
    g: &mut Graph,
    p: &Bound,
    dims: &ModelDims,
    layer: usize,
    x: Var,
    mask: AttnMask<'_>,
) -> Result<Var> {
    attention_core(g, p, dims, layer, x, mask)?.stage(|| format!("attention layer {layer}"))
}

/// Attention over axis 1 instead: swaps axes 1 and 2, attends, swaps back.
pub fn spatial_attention(
    g: &mut Graph,
    p: &Bound,
    dims: &ModelDims,
    layer: usize,
    x: Var,
    mask: AttnMask<'_>,
) -> Result<Var> {
    let stage = || format!("attention layer {layer}");
    let xt = g.permute(x, &[0, 2, 1, 3]).stage(stage)?;
    let h = temporal_attention(g, p, dims, layer, xt, mask)?;
    g.permute(h, &[0, 2, 1, 3]).stage(stage)
}

/// One attention block: attention, then the optional feed-forward, each
/// wrapped in residual + layer norm when `dims.residual_norm` is set.
pub fn attention_layer(
    g: &mut Graph,
    p: &Bound,
    dims: &ModelDims,
    layer: usize,
    x: Var,
    spatial: bool,
    mask: AttnMask<'_>,
) -> Result<Var> {
    let a = if spatial {
        spatial_attention(g, p, dims, layer, x, mask)?
    } else {
        temporal_attention(g, p, dims, layer, x, mask)?
    };
    let pre = layer_prefix(layer);
    let stage = || format!("attention layer {layer}");
    let mut h = a;
    if dims.residual_norm {
        let r = g.add(x, a).stage(stage)?;
        h = g
            .layer_norm(r, p.get(&format!("{pre}.ln1.g"))?, p.get(&format!("{pre}.ln1.b"))?, LN_EPS)
            .stage(stage)?;
    }
    if dims.ffn_hidden > 0 {
        let f = g.matmul(h, p.get(&format!("{pre}.ff.w1"))?).stage(stage)?;
        let f = g.add_along(f, p.get(&format!("{pre}.ff.b1"))?, 3).stage(stage)?;
        let f = g.gelu(f).stage(stage)?;
        let f = g.matmul(f, p.get(&format!("{pre}.ff.w2"))?).stage(stage)?;
        let f = g.add_along(f, p.get(&format!("{pre}.ff.b2"))?, 3).stage(stage)?;
        h = if dims.residual_norm {
            let r = g.add(h, f).stage(stage)?;
            g.layer_norm(r, p.get(&format!("{pre}.ln2.g"))?, p.get(&format!("{pre}.ln2.b"))?, LN_EPS)
                .stage(stage)?
        } else {
            f
        };
    }
    Ok(h)
}

/// Embedding, then every temporal layer, then every spatial layer.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    dims: &ModelDims,
    x_in: Var,
    nodes: &[usize],
    tod: &[usize],
    dow: &[usize],
    mask: AttnMask<'_>,
) -> Result<Var> {
    let mut h = embed(g, p, dims, x_in, nodes, tod, dow)?;
    for layer in 0..dims.layers() {
        h = attention_layer(g, p, dims, layer, h, layer >= dims.temporal_layers, mask)?;
    }
    Ok(h)
}

/// Maps each variable's flattened `l x q` representation to `l'` outputs.
pub fn output_mlp(g: &mut Graph, p: &Bound, dims: &ModelDims, h: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let stage = || "output head".to_string();
    let x = g.reshape(h, &[s[0] * s[1], s[2] * s[3]]).stage(stage)?;
    let x = g.matmul(x, p.get("out.w1")?).stage(stage)?;
    let x = g.add_along(x, p.get("out.b1")?, 1).stage(stage)?;
    let x = g.gelu(x).stage(stage)?;
    let x = g.matmul(x, p.get("out.w2")?).stage(stage)?;
    let x = g.add_along(x, p.get("out.b2")?, 1).stage(stage)?;
    g.reshape(x, &[s[0], s[1], dims.output_len]).stage(stage)
}

/// Forecasts `B x n x l'` from every variable's input.
pub fn forward_stmf(g: &mut Graph, p: &Bound, dims: &ModelDims, batch: &Batch) -> Result<Var> {
    let nodes: Vec<usize> = (0..dims.n).collect();
    let x = g.constant(batch.x_in.clone());
    let h = encode(g, p, dims, x, &nodes, &batch.tod, &batch.dow, AttnMask::none())?;
    output_mlp(g, p, dims, h)
}

/// Inference-only forward of the base forecaster.
pub fn predict_stmf(params: &ParamSet, dims: &ModelDims, batch: &Batch) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let out = forward_stmf(&mut g, &p, dims, batch)?;
    Ok(g.value(out).clone())
}
