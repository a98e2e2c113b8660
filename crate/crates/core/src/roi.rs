//! RoIAlign on a single pyramid level and Pyramid RoIAlign across all levels.
//!
//! Feature coordinates are image coordinates divided by the level stride,
//! with no half-pixel offset. Samples outside the map clamp to its border.

use crate::autodiff::kernels::bilinear_taps;
use crate::autodiff::{Graph, Taps, Var};
use crate::boxes::{BBox, RoI};
use crate::error::{Error, Result};
use crate::nets::FeaturePyramid;

/// Smallest RoI extent, in feature cells, used when sampling.
pub const MIN_EXTENT: f64 = 1e-6;

/// Pyramid levels P2..P5 and their strides.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

pub fn level_stride(level: usize) -> usize {
    1 << level
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignConfig {
    /// Output resolution per side.
    pub output_size: usize,
    /// Bilinear samples per bin axis.
    pub samples: usize,
    /// Box side mapped onto level `k0` by [`assign_level`].
    pub canonical: f64,
    pub k0: f64,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        RoiAlignConfig {
            output_size: 7,
            samples: 2,
            canonical: 56.0,
            k0: 4.0,
        }
    }
}

/// FPN level for a box: `clamp(⌊k0 + log2(√(w·h) / canonical)⌋, 2, 5)`.
pub fn assign_level(roi: &BBox, cfg: &RoiAlignConfig) -> usize {
    let side = roi.area().sqrt().max(f64::MIN_POSITIVE);
    let k = (cfg.k0 + (side / cfg.canonical).log2()).floor();
    k.clamp(2.0, 5.0) as usize
}

/// Sampling taps for `rois` on an `h×w` plane: `S²` output bins per RoI,
/// each averaging `samples²` bilinear samples on a regular sub-grid.
pub fn roi_align_taps(rois: &[BBox], h: usize, w: usize, stride: f64, cfg: &RoiAlignConfig) -> Taps {
    let s = cfg.output_size;
    let n = cfg.samples;
    let inv = 1.0 / (n * n) as f64;
    let mut taps = Taps::new();
    for roi in rois {
        let x1 = roi.x1 / stride;
        let y1 = roi.y1 / stride;
        let rw = ((roi.x2 - roi.x1) / stride).max(MIN_EXTENT);
        let rh = ((roi.y2 - roi.y1) / stride).max(MIN_EXTENT);
        let (bw, bh) = (rw / s as f64, rh / s as f64);
        for by in 0..s {
            for bx in 0..s {
                let mut bin = Vec::with_capacity(4 * n * n);
                for iy in 0..n {
                    let y = y1 + by as f64 * bh + (iy as f64 + 0.5) * bh / n as f64;
                    for ix in 0..n {
                        let x = x1 + bx as f64 * bw + (ix as f64 + 0.5) * bw / n as f64;
                        bin.extend(bilinear_taps(h, w, y, x).into_iter().map(|(i, wt)| (i, wt * inv)));
                    }
                }
                // samples of a small bin share pixels; fold them into one tap each
                bin.sort_by_key(|&(i, _)| i);
                bin.dedup_by(|b, a| {
                    let same = a.0 == b.0;
                    if same {
                        a.1 += b.1;
                    }
                    same
                });
                taps.push(bin);
            }
        }
    }
    taps
}

/// RoIAlign of `rois` from one feature level (`[d,H,W]` or `[1,d,H,W]`),
/// producing `[R, d, S, S]`.
pub fn roi_align(g: &mut Graph, level_feature: Var, rois: &[BBox], stride: f64, cfg: &RoiAlignConfig) -> Result<Var> {
    if rois.is_empty() {
        return Err(Error::Input("roi_align needs at least one RoI".into()));
    }
    let shape = g.shape(level_feature).to_vec();
    if shape.len() < 3 || shape[..shape.len() - 3].iter().any(|&d| d != 1) {
        return Err(Error::shape("roi_align", format!("feature {shape:?} must be [d,H,W]")));
    }
    let (d, h, w) = (shape[shape.len() - 3], shape[shape.len() - 2], shape[shape.len() - 1]);
    let s = cfg.output_size;
    let taps = roi_align_taps(rois, h, w, stride, cfg);
    g.spatial_gather(level_feature, taps, rois.len(), &[rois.len(), d, s, s])
}

/// Crops every RoI from all four levels and concatenates along channels in
/// level order: `[R, 4d, S, S]`.
pub fn pyramid_roi_align(g: &mut Graph, pyr: &FeaturePyramid, rois: &[BBox], cfg: &RoiAlignConfig) -> Result<Var> {
    let crops = LEVELS
        .iter()
        .zip(pyr.levels)
        .map(|(&l, f)| roi_align(g, f, rois, level_stride(l) as f64, cfg))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&crops, 1)
}

/// Crops every RoI from its assigned level only: `[R, d, S, S]`, rows in
/// input order.
pub fn single_level_roi_align(g: &mut Graph, pyr: &FeaturePyramid, rois: &[BBox], cfg: &RoiAlignConfig) -> Result<Var> {
    if rois.is_empty() {
        return Err(Error::Input("roi_align needs at least one RoI".into()));
    }
    let levels: Vec<usize> = rois.iter().map(|r| assign_level(r, cfg)).collect();
    let mut blocks = Vec::new();
    let mut order = Vec::with_capacity(rois.len());
    for (li, &l) in LEVELS.iter().enumerate() {
        let members: Vec<usize> = (0..rois.len()).filter(|&i| levels[i] == l).collect();
        if members.is_empty() {
            continue;
        }
        let subset: Vec<BBox> = members.iter().map(|&i| rois[i]).collect();
        blocks.push(roi_align(g, pyr.levels[li], &subset, level_stride(l) as f64, cfg)?);
        order.extend(members);
    }
    // position of RoI i inside the stacked blocks
    let mut inverse = vec![0; rois.len()];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    let stacked = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat(&blocks, 0)?
    };
    if inverse.iter().enumerate().all(|(i, &p)| i == p) {
        Ok(stacked)
    } else {
        g.index_select(stacked, &inverse)
    }
}

/// How region features are cropped for the second stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiMode {
    /// Each RoI reads only its assigned level (`d` channels).
    SingleLevel,
    /// Each RoI reads all four levels (`4d` channels).
    Pyramid,
}

impl RoiMode {
    pub fn from_flag(pyramid: bool) -> Self {
        if pyramid {
            RoiMode::Pyramid
        } else {
            RoiMode::SingleLevel
        }
    }

    pub fn channels(self, d: usize) -> usize {
        match self {
            RoiMode::SingleLevel => d,
            RoiMode::Pyramid => 4 * d,
        }
    }
}

/// Region features `[R, C, S, S]` for `rois` under `mode`.
pub fn region_features(
    g: &mut Graph,
    pyr: &FeaturePyramid,
    rois: &[RoI],
    mode: RoiMode,
    cfg: &RoiAlignConfig,
) -> Result<Var> {
    let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
    match mode {
        RoiMode::Pyramid => pyramid_roi_align(g, pyr, &boxes, cfg),
        RoiMode::SingleLevel => single_level_roi_align(g, pyr, &boxes, cfg),
    }
}
