use crate::autodiff::Graph;
use crate::error::Result;
use crate::params::Bound;

use super::backbone::conv;
use super::{BackboneFeatures, FeaturePyramid};

/// Top-down pyramid: `P5 = lat5(C5)`, and for i = 4, 3, 2
/// `Pᵢ = smooth3x3(latᵢ(Cᵢ) + up2(Mᵢ₊₁))` where `M` is the merged map before
/// smoothing (`M5 = P5`).
pub fn fpn_forward(g: &mut Graph, p: &Bound, feats: &BackboneFeatures) -> Result<FeaturePyramid> {
    let mut merged = conv(g, p, "fpn.lat5", feats.levels[3], 0)?;
    let mut out = [merged; 4];
    for l in (2..=4).rev() {
        let lateral = conv(g, p, &format!("fpn.lat{l}"), feats.levels[l - 2], 0)?;
        let up = g.upsample2(merged)?;
        merged = g.add(lateral, up)?;
        out[l - 2] = conv(g, p, &format!("fpn.smooth{l}"), merged, 1)?;
    }
    Ok(FeaturePyramid { levels: out })
}
