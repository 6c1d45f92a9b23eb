//! The masked forecaster: parameter-masked attention over the selected
//! variables, then extrapolation to every variable through a fused
//! graph/similarity matrix.

use vip_tensor::{Graph, Tensor, Var};

use crate::data::Batch;
use crate::error::{Error, Result, StageExt};
use crate::model::{bind, encode, output_mlp, temporal_attention, AttnMask, Bound, ModelDims, ParamSet};
use crate::pruning::MaskState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VipOptions {
    /// Replace bridge/fusion/propagation with a learned linear map over the
    /// stacked selected representations. Row `i` of the map serves the
    /// `i`-th selected variable, whichever variable that is.
    pub no_extra: bool,
    /// Row-softmax on the bridge similarities.
    pub bridge_softmax: bool,
}

/// Which variables feed the model, which attention dimensions survive, and
/// the graph nodes of the importance vectors.
#[derive(Debug, Clone, Copy)]
pub struct MaskVars<'a> {
    pub selected: &'a [usize],
    pub kept: &'a [usize],
    pub b_hat: Var,
    pub p_hat: Var,
}

/// Temporal attention with the query/key projections restricted to `kept`
/// and the values gated by `p_hat`.
pub fn masked_attention(
    g: &mut Graph,
    p: &Bound,
    dims: &ModelDims,
    layer: usize,
    x: Var,
    kept: &[usize],
    p_hat: Var,
) -> Result<Var> {
    temporal_attention(
        g,
        p,
        dims,
        layer,
        x,
        AttnMask {
            kept: Some(kept),
            p_hat: Some(p_hat),
        },
    )
}

/// `gelu(FC(E[selected]) FC(E)^T)`, `m x n`.
pub fn extrapolation_bridge(
    g: &mut Graph,
    node_emb: Var,
    fc: Var,
    selected: &[usize],
    softmax: bool,
) -> Result<Var> {
    let stage = || "extrapolation bridge".to_string();
    let proj = g.matmul(node_emb, fc).stage(stage)?;
    let sel = g.gather(proj, 0, selected).stage(stage)?;
    let sim = g.matmul_t(sel, proj, false, true).stage(stage)?;
    let out = g.gelu(sim).stage(stage)?;
    if softmax {
        g.softmax(out).stage(stage)
    } else {
        Ok(out)
    }
}

/// `b_hat[selected] * A_norm[selected, :] + bridge`, `m x n`.
pub fn fuse_adjacency(g: &mut Graph, b_hat: Var, a_norm: &Tensor, selected: &[usize], bridge: Var) -> Result<Var> {
    let n = a_norm.shape()[0];
    let bs = g.shape(bridge).to_vec();
    if bs != [selected.len(), n] || g.shape(b_hat) != [n] {
        return Err(Error::Contract(format!(
            "fusion shapes: bridge {bs:?}, b_hat {:?}, adjacency {:?}, {} selected",
            g.shape(b_hat),
            a_norm.shape(),
            selected.len()
        )));
    }
    let stage = || "adjacency fusion".to_string();
    let rows = g.constant(a_norm.select(0, selected)?);
    let weights = g.gather(b_hat, 0, selected).stage(stage)?;
    let graph_term = g.mul_along(rows, weights, 0).stage(stage)?;
    g.add(graph_term, bridge).stage(stage)
}

/// `A'^T H` along the variable axis: `m x n` and `B x m x l x q` give
/// `B x n x l x q`.
pub fn propagate(g: &mut Graph, a_fused: Var, h: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let a = g.shape(a_fused).to_vec();
    if s.len() != 4 || a.len() != 2 || a[0] != s[1] {
        return Err(Error::Contract(format!("cannot propagate {s:?} through {a:?}")));
    }
    let stage = || "propagation".to_string();
    let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]]).stage(stage)?;
    let out = g.matmul_t(a_fused, flat, true, false).stage(stage)?;
    g.reshape(out, &[s[0], a[1], s[2], s[3]]).stage(stage)
}

/// Forecasts for all `n` variables from the selected rows of `x_in`
/// (`B x n x l`). Rows outside `mask.selected` are never read.
#[allow(clippy::too_many_arguments)]
pub fn forward_vip(
    g: &mut Graph,
    p: &Bound,
    dims: &ModelDims,
    a_norm: &Tensor,
    x_in: &Tensor,
    tod: &[usize],
    dow: &[usize],
    mask: MaskVars<'_>,
    opts: VipOptions,
) -> Result<Var> {
    if mask.selected.is_empty() || mask.kept.is_empty() {
        return Err(Error::Contract("masks must keep at least one variable and one dimension".into()));
    }
    let x = g.constant(x_in.select(1, mask.selected)?);
    let attn = AttnMask {
        kept: Some(mask.kept),
        p_hat: Some(mask.p_hat),
    };
    let h = encode(g, p, dims, x, mask.selected, tod, dow, attn)?;
    let map = if opts.no_extra {
        let slots: Vec<usize> = (0..mask.selected.len()).collect();
        g.gather(p.get("extra.w")?, 0, &slots)
            .stage(|| "variable map".to_string())?
    } else {
        let bridge = extrapolation_bridge(g, p.get("emb.node")?, p.get("bridge.fc")?, mask.selected, opts.bridge_softmax)?;
        fuse_adjacency(g, mask.b_hat, a_norm, mask.selected, bridge)?
    };
    let full = propagate(g, map, h)?;
    output_mlp(g, p, dims, full)
}

/// Inference-only forward with the masks of `state`.
pub fn predict_vip(
    params: &ParamSet,
    dims: &ModelDims,
    a_norm: &Tensor,
    state: &MaskState,
    batch: &Batch,
    opts: VipOptions,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let b_hat = g.constant(state.b_hat.clone());
    let p_hat = g.constant(state.p_hat.clone());
    let selected = state.selected();
    let kept = state.kept_dims();
    let mask = MaskVars {
        selected: &selected,
        kept: &kept,
        b_hat,
        p_hat,
    };
    let out = forward_vip(&mut g, &p, dims, a_norm, &batch.x_in, &batch.tod, &batch.dow, mask, opts)?;
    Ok(g.value(out).clone())
}
