//! Explicit cross-modal interaction: the tabular map acts as a query against
//! each AC observation feature map, a channel softmax turns the product into
//! an attention map, and the map reweights the same features.

use crate::tensor::{Graph, NodeId, TensorError};
use crate::Result;

fn check_same(g: &Graph, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op,
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `softmax_c(f_tab * f_ac)` over the channel axis.
pub fn attention_map(g: &mut Graph, f_tab: NodeId, f_ac: NodeId) -> Result<NodeId> {
    check_same(g, "attention_map", f_tab, f_ac)?;
    let logits = g.mul(f_tab, f_ac)?;
    Ok(g.softmax_channels(logits)?)
}

/// Elementwise `map * f_ac`.
pub fn apply_attention(g: &mut Graph, map: NodeId, f_ac: NodeId) -> Result<NodeId> {
    check_same(g, "apply_attention", map, f_ac)?;
    Ok(g.mul(map, f_ac)?)
}

/// Attention outputs for both AC images.
#[derive(Clone, Copy, Debug)]
pub struct EcimOutput {
    pub maps: [NodeId; 2],
    pub weighted: [NodeId; 2],
    /// Channel concatenation of the two weighted maps.
    pub concat: NodeId,
}

pub fn ecim(g: &mut Graph, f_tab: NodeId, f_ac: [NodeId; 2]) -> Result<EcimOutput> {
    let mut maps = [f_ac[0]; 2];
    let mut weighted = [f_ac[0]; 2];
    for i in 0..2 {
        maps[i] = attention_map(g, f_tab, f_ac[i])?;
        weighted[i] = apply_attention(g, maps[i], f_ac[i])?;
    }
    let concat = g.concat_channels(&weighted)?;
    Ok(EcimOutput { maps, weighted, concat })
}
