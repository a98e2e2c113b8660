use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::boxes::{decode, encode, nms, BBox, DeltaWeights, RoI, ScoredBox};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::roi::{level_stride, LEVELS};

use super::backbone::conv;
use super::FeaturePyramid;

/// One anchor size per level (side `base_size · 2^(level−2)`), one box per
/// aspect ratio (height : width).
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub base_size: f64,
    pub aspect_hw: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_size: 16.0,
            aspect_hw: vec![2.4],
        }
    }
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.aspect_hw.len()
    }
}

/// Anchors for every pyramid level, each level laid out `[A, H, W]` to match
/// the RPN output channels.
#[derive(Clone, Debug)]
pub struct Anchors {
    pub per_location: usize,
    /// `(H, W, boxes)` per level.
    pub levels: Vec<(usize, usize, Vec<BBox>)>,
}

impl Anchors {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.2.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<BBox> {
        self.levels.iter().flat_map(|l| l.2.iter().copied()).collect()
    }
}

pub fn generate_anchors(img_h: usize, img_w: usize, cfg: &AnchorConfig) -> Anchors {
    let levels = LEVELS
        .iter()
        .map(|&l| {
            let stride = level_stride(l);
            let (h, w) = (img_h / stride, img_w / stride);
            let side = cfg.base_size * (1 << (l - 2)) as f64;
            let mut boxes = Vec::with_capacity(cfg.aspect_hw.len() * h * w);
            for &ratio in &cfg.aspect_hw {
                let bw = side / ratio.sqrt();
                let bh = side * ratio.sqrt();
                for i in 0..h {
                    for j in 0..w {
                        let cx = (j as f64 + 0.5) * stride as f64;
                        let cy = (i as f64 + 0.5) * stride as f64;
                        boxes.push(BBox::from_center(cx, cy, bw, bh));
                    }
                }
            }
            (h, w, boxes)
        })
        .collect();
    Anchors {
        per_location: cfg.per_location(),
        levels,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RpnLevelOutput {
    /// `[1, A, H, W]` objectness logits.
    pub objectness: Var,
    /// `[1, 4A, H, W]` box deltas.
    pub deltas: Var,
}

#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub levels: Vec<RpnLevelOutput>,
}

/// Shared RPN head applied to every level: conv3x3-relu, then sibling 1×1
/// convs for objectness and deltas.
pub fn rpn_forward(g: &mut Graph, p: &Bound, pyr: &FeaturePyramid) -> Result<RpnOutput> {
    let levels = pyr
        .levels
        .iter()
        .map(|&f| {
            let h = conv(g, p, "rpn.conv", f, 1)?;
            let h = g.relu(h);
            Ok(RpnLevelOutput {
                objectness: conv(g, p, "rpn.obj", h, 0)?,
                deltas: conv(g, p, "rpn.delta", h, 0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RpnOutput { levels })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalParams {
    pub pre_nms_k: usize,
    pub post_nms_k: usize,
    pub nms_iou: f64,
    /// Proposals narrower or shorter than this (pixels) are dropped.
    pub min_size: f64,
}

/// Decodes RPN deltas onto anchors, clips to the image, keeps the
/// `pre_nms_k` best by objectness, applies NMS and keeps `post_nms_k`.
/// Scores are sigmoid probabilities.
pub fn generate_proposals(
    g: &Graph,
    out: &RpnOutput,
    anchors: &Anchors,
    params: &ProposalParams,
    img_w: f64,
    img_h: f64,
) -> Result<Vec<RoI>> {
    if out.levels.len() != anchors.levels.len() {
        return Err(Error::shape("generate_proposals", "level count mismatch"));
    }
    let a = anchors.per_location;
    let mut cands: Vec<(f64, usize, usize)> = Vec::new(); // (logit, level, local index)
    for (li, (lvl, (h, w, boxes))) in out.levels.iter().zip(&anchors.levels).enumerate() {
        let obj = g.value(lvl.objectness);
        if obj.numel() != boxes.len() || g.value(lvl.deltas).numel() != 4 * boxes.len() {
            return Err(Error::shape(
                "generate_proposals",
                format!("level {li}: {h}x{w}x{a} anchors"),
            ));
        }
        cands.extend(obj.data().iter().enumerate().map(|(i, &s)| (s, li, i)));
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut boxes = Vec::new();
    for &(logit, li, i) in cands.iter() {
        if boxes.len() == params.pre_nms_k {
            break;
        }
        let (h, w, anchor_boxes) = &anchors.levels[li];
        let hw = h * w;
        let (ai, pos) = (i / hw, i % hw);
        let d = g.value(out.levels[li].deltas).data();
        let deltas = [0, 1, 2, 3].map(|c| d[(4 * ai + c) * hw + pos]);
        let b = decode(deltas, &anchor_boxes[i], DeltaWeights::UNIT).clip(img_w, img_h);
        if b.width() < params.min_size || b.height() < params.min_size {
            continue;
        }
        boxes.push(ScoredBox {
            bbox: b,
            score: 1.0 / (1.0 + (-logit).exp()),
        });
    }
    let keep = nms(&boxes, params.nms_iou);
    Ok(keep.into_iter().take(params.post_nms_k).map(|i| boxes[i]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpnSampleConfig {
    pub batch: usize,
    pub pos_fraction: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for RpnSampleConfig {
    fn default() -> Self {
        RpnSampleConfig {
            batch: 64,
            pos_fraction: 0.5,
            pos_iou: 0.7,
            neg_iou: 0.3,
        }
    }
}

/// Per-anchor training labels: 1 positive, 0 negative, -1 ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLabels {
    pub labels: Vec<i8>,
    pub matched_gt: Vec<usize>,
}

/// Positive if IoU ≥ `pos_iou` or the anchor attains some GT's best IoU;
/// negative if IoU ≤ `neg_iou`; ignored otherwise.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], cfg: &RpnSampleConfig) -> AnchorLabels {
    let mut best = vec![0.0f64; anchors.len()];
    let mut matched = vec![0usize; anchors.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|gt| a.iou(gt)).collect())
        .collect();
    for (ai, row) in ious.iter().enumerate() {
        for (gi, &v) in row.iter().enumerate() {
            if v > best[ai] {
                best[ai] = v;
                matched[ai] = gi;
            }
            gt_best[gi] = gt_best[gi].max(v);
        }
    }
    let mut labels: Vec<i8> = best
        .iter()
        .map(|&v| {
            if v >= cfg.pos_iou {
                1
            } else if v <= cfg.neg_iou {
                0
            } else {
                -1
            }
        })
        .collect();
    for (ai, row) in ious.iter().enumerate() {
        for (gi, &v) in row.iter().enumerate() {
            if gt_best[gi] > 0.0 && v == gt_best[gi] {
                labels[ai] = 1;
                matched[ai] = gi;
            }
        }
    }
    AnchorLabels {
        labels,
        matched_gt: matched,
    }
}

/// Random subset of at most `n` items, returned in ascending order.
pub(crate) fn subsample<R: Rng + ?Sized>(items: Vec<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    if items.len() <= n {
        return items;
    }
    let mut picked: Vec<usize> = sample(rng, items.len(), n).into_iter().map(|i| items[i]).collect();
    picked.sort_unstable();
    picked
}

/// Objectness BCE over sampled anchors plus smooth-L1 over the positives'
/// deltas, the latter summed and divided by the number of sampled anchors.
pub fn rpn_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    out: &RpnOutput,
    anchors: &Anchors,
    gts: &[BBox],
    cfg: &RpnSampleConfig,
    rng: &mut R,
) -> Result<Var> {
    let flat = anchors.all();
    let assigned = assign_anchors(&flat, gts, cfg);
    let pos: Vec<usize> = (0..flat.len()).filter(|&i| assigned.labels[i] == 1).collect();
    let neg: Vec<usize> = (0..flat.len()).filter(|&i| assigned.labels[i] == 0).collect();
    let max_pos = (cfg.batch as f64 * cfg.pos_fraction).floor() as usize;
    let pos = subsample(pos, max_pos, rng);
    let neg = subsample(neg, cfg.batch - pos.len(), rng);
    let n_sampled = pos.len() + neg.len();
    if n_sampled == 0 {
        return Ok(g.constant(crate::tensor::Tensor::scalar(0.0)));
    }

    // flatten objectness and deltas into columns, level by level
    let mut obj_cols = Vec::new();
    let mut delta_cols = Vec::new();
    let mut delta_offsets = Vec::new();
    let mut anchor_offsets = Vec::new();
    let (mut d_off, mut a_off) = (0, 0);
    for lvl in &out.levels {
        let on = g.value(lvl.objectness).numel();
        let dn = g.value(lvl.deltas).numel();
        obj_cols.push(g.reshape(lvl.objectness, &[on, 1])?);
        delta_cols.push(g.reshape(lvl.deltas, &[dn, 1])?);
        anchor_offsets.push(a_off);
        delta_offsets.push(d_off);
        a_off += on;
        d_off += dn;
    }
    if a_off != flat.len() {
        return Err(Error::shape("rpn_loss", "anchor count does not match RPN output"));
    }
    let obj = g.concat(&obj_cols, 0)?;
    let mut sampled: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    sampled.sort_unstable();
    let targets: Vec<f64> = sampled
        .iter()
        .map(|&i| if assigned.labels[i] == 1 { 1.0 } else { 0.0 })
        .collect();
    let logits = g.index_select(obj, &sampled)?;
    let cls = g.bce_with_logits(logits, &targets)?;
    if pos.is_empty() {
        return Ok(cls);
    }

    let deltas = g.concat(&delta_cols, 0)?;
    let mut idx = Vec::with_capacity(4 * pos.len());
    let mut reg_targets = Vec::with_capacity(4 * pos.len());
    for &i in &pos {
        let li = anchor_offsets.iter().rposition(|&o| o <= i).unwrap();
        let local = i - anchor_offsets[li];
        let (h, w, _) = anchors.levels[li];
        let hw = h * w;
        let (a, p) = (local / hw, local % hw);
        for c in 0..4 {
            idx.push(delta_offsets[li] + (4 * a + c) * hw + p);
        }
        reg_targets.extend(encode(&gts[assigned.matched_gt[i]], &flat[i], DeltaWeights::UNIT));
    }
    let picked = g.index_select(deltas, &idx)?;
    let reg = g.smooth_l1(picked, &reg_targets, n_sampled as f64)?;
    g.add(cls, reg)
}
