use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::boxes::{encode, BBox, DeltaWeights, RoI, ScoredBox};
use crate::error::{Error, Result};
use crate::params::Bound;

use super::rpn::subsample;

/// Second-stage outputs for a batch of RoIs.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[R, logit_width]` activation of the second FC layer.
    pub logits: Var,
    /// `[R, 2]` background / pedestrian scores.
    pub class_scores: Var,
    /// `[R, 4]` box deltas relative to each RoI.
    pub box_deltas: Var,
}

fn fc(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.linear(x, w, b)
}

/// `fc1 → relu → fc2 → relu` gives the logit feature; sibling linear layers
/// map it to class scores and box deltas. `regions` is `[R, ...]`.
pub fn head_forward(g: &mut Graph, p: &Bound, regions: Var) -> Result<HeadOutput> {
    let x = g.flatten(regions)?;
    let expected = g.shape(p.get("head.fc1.w")?)[0];
    if g.shape(x)[1] != expected {
        return Err(Error::shape(
            "head_forward",
            format!("region width {} vs head input {expected}", g.shape(x)[1]),
        ));
    }
    let h = fc(g, p, "head.fc1", x)?;
    let h = g.relu(h);
    let l = fc(g, p, "head.fc2", h)?;
    let logits = g.relu(l);
    Ok(HeadOutput {
        logits,
        class_scores: fc(g, p, "head.cls", logits)?,
        box_deltas: fc(g, p, "head.box", logits)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSampleConfig {
    pub batch: usize,
    pub pos_fraction: f64,
    pub fg_iou: f64,
}

impl Default for RoiSampleConfig {
    fn default() -> Self {
        RoiSampleConfig {
            batch: 32,
            pos_fraction: 0.25,
            fg_iou: 0.5,
        }
    }
}

/// Training RoIs for the second stage with their labels (1 = pedestrian)
/// and regression targets (positives only).
#[derive(Clone, Debug, Default)]
pub struct SampledRois {
    pub rois: Vec<RoI>,
    pub labels: Vec<usize>,
    pub targets: Vec<Option<[f64; 4]>>,
}

/// Labels proposals (plus the GT boxes themselves) by IoU against GT and
/// samples up to `batch` of them at the configured positive fraction.
pub fn sample_rois<R: Rng + ?Sized>(
    proposals: &[RoI],
    gts: &[BBox],
    cfg: &RoiSampleConfig,
    rng: &mut R,
) -> SampledRois {
    let cands: Vec<RoI> = proposals
        .iter()
        .copied()
        .chain(gts.iter().map(|&b| ScoredBox { bbox: b, score: 1.0 }))
        .collect();
    let mut matched = Vec::with_capacity(cands.len());
    for c in &cands {
        let best = gts
            .iter()
            .enumerate()
            .map(|(i, gt)| (c.bbox.iou(gt), i))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        matched.push(best);
    }
    let is_pos = |i: usize| matches!(matched[i], Some((iou, _)) if iou >= cfg.fg_iou);
    let pos: Vec<usize> = (0..cands.len()).filter(|&i| is_pos(i)).collect();
    let neg: Vec<usize> = (0..cands.len()).filter(|&i| !is_pos(i)).collect();
    let max_pos = (cfg.batch as f64 * cfg.pos_fraction).round() as usize;
    let pos = subsample(pos, max_pos, rng);
    let neg = subsample(neg, cfg.batch - pos.len(), rng);
    let mut out = SampledRois::default();
    for &i in pos.iter().chain(&neg) {
        out.rois.push(cands[i]);
        if is_pos(i) {
            let (_, gi) = matched[i].unwrap();
            out.labels.push(1);
            out.targets
                .push(Some(encode(&gts[gi], &cands[i].bbox, DeltaWeights::HEAD)));
        } else {
            out.labels.push(0);
            out.targets.push(None);
        }
    }
    out
}

/// Mean softmax cross-entropy over all RoIs plus smooth-L1 on the positive
/// RoIs' deltas, summed and divided by the RoI count.
pub fn detection_loss(
    g: &mut Graph,
    class_scores: Var,
    box_deltas: Var,
    labels: &[usize],
    targets: &[Option<[f64; 4]>],
) -> Result<Var> {
    let r = labels.len();
    if r == 0 || targets.len() != r || g.shape(box_deltas) != [r, 4] {
        return Err(Error::shape(
            "detection_loss",
            format!(
                "{r} labels, {} targets, deltas {:?}",
                targets.len(),
                g.shape(box_deltas)
            ),
        ));
    }
    let cls = g.softmax_cross_entropy(class_scores, labels)?;
    let pos: Vec<usize> = (0..r).filter(|&i| targets[i].is_some()).collect();
    if pos.is_empty() {
        return Ok(cls);
    }
    let flat_targets: Vec<f64> = pos.iter().flat_map(|&i| targets[i].unwrap()).collect();
    let picked = g.index_select(box_deltas, &pos)?;
    let reg = g.smooth_l1(picked, &flat_targets, r as f64)?;
    g.add(cls, reg)
}
