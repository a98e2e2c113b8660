use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Bound;

use super::NetConfig;

/// Backbone stage outputs C2..C5 at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    pub levels: [Var; 4],
}

pub(crate) fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.conv2d(x, w, b, 1, pad)
}

/// Plain conv-relu stages with 2×2 max-pool downsampling:
///
/// ```text
/// stem:    conv3x3 → relu → pool            (stride 2)
/// stage k: pool → conv3x3 → relu → [residual conv-relu blocks]
/// ```
pub fn backbone_forward(g: &mut Graph, p: &Bound, cfg: &NetConfig, image: Var) -> Result<BackboneFeatures> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::shape("backbone", format!("image {s:?} must be [1,3,H,W]")));
    }
    if !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) {
        return Err(Error::Input(format!(
            "image size {}x{} not divisible by 32",
            s[2], s[3]
        )));
    }
    let x = conv(g, p, "backbone.stem", image, 1)?;
    let x = g.relu(x);
    let mut x = g.max_pool2(x)?;
    let mut levels = Vec::with_capacity(4);
    for (stage, &n) in cfg.blocks.iter().enumerate() {
        x = g.max_pool2(x)?;
        let y = conv(g, p, &format!("backbone.s{}.b0", stage + 1), x, 1)?;
        x = g.relu(y);
        for b in 1..n {
            let y = conv(g, p, &format!("backbone.s{}.b{b}", stage + 1), x, 1)?;
            let sum = g.add(x, y)?;
            x = g.relu(sum);
        }
        levels.push(x);
    }
    Ok(BackboneFeatures {
        levels: [levels[0], levels[1], levels[2], levels[3]],
    })
}
