//! Axis-aligned boxes, box-delta coding and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Box in continuous image-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Mirror across the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, image_width: f64) -> BBox {
        BBox::new(image_width - self.x2, self.y1, image_width - self.x1, self.y2)
    }
}

/// A box with a confidence score: an RPN proposal or a final detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Region of interest proposed by the first stage.
pub type RoI = ScoredBox;
/// Final pedestrian detection.
pub type Detection = ScoredBox;

/// Per-coordinate weights applied to regression deltas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaWeights(pub [f64; 4]);

impl DeltaWeights {
    pub const UNIT: DeltaWeights = DeltaWeights([1.0, 1.0, 1.0, 1.0]);
    pub const HEAD: DeltaWeights = DeltaWeights([10.0, 10.0, 5.0, 5.0]);
}

/// Largest log-scale change accepted when decoding.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Regression target mapping `reference` onto `target`: scale-relative
/// center shift and log-scale size change.
pub fn encode(target: &BBox, reference: &BBox, w: DeltaWeights) -> [f64; 4] {
    let (tcx, tcy) = target.center();
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        w.0[0] * (tcx - rcx) / rw,
        w.0[1] * (tcy - rcy) / rh,
        w.0[2] * (target.width() / rw).ln(),
        w.0[3] * (target.height() / rh).ln(),
    ]
}

/// Inverse of [`encode`].
pub fn decode(deltas: [f64; 4], reference: &BBox, w: DeltaWeights) -> BBox {
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let dx = deltas[0] / w.0[0];
    let dy = deltas[1] / w.0[1];
    let dw = (deltas[2] / w.0[2]).min(MAX_LOG_SCALE);
    let dh = (deltas[3] / w.0[3]).min(MAX_LOG_SCALE);
    BBox::from_center(rcx + dx * rw, rcy + dy * rh, rw * dw.exp(), rh * dh.exp())
}

/// Greedy NMS: visit boxes by descending score (ties keep input order) and
/// drop every box whose IoU with an already kept box exceeds `iou_thresh`.
/// Returns indices into `boxes` of the survivors, best first.
pub fn nms(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].bbox.iou(&boxes[i].bbox) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn zero_delta_decodes_to_reference() {
        let r = BBox::new(3.0, 4.0, 13.0, 28.0);
        let d = decode([0.0; 4], &r, DeltaWeights::UNIT);
        assert!((d.x1 - r.x1).abs() < 1e-12 && (d.y2 - r.y2).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_inverse() {
        let r = BBox::new(3.0, 4.0, 13.0, 28.0);
        let t = BBox::new(5.5, 2.0, 11.0, 40.0);
        for w in [DeltaWeights::UNIT, DeltaWeights::HEAD] {
            let d = decode(encode(&t, &r, w), &r, w);
            for (a, b) in [(d.x1, t.x1), (d.y1, t.y1), (d.x2, t.x2), (d.y2, t.y2)] {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nms_keeps_higher_of_duplicates() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let boxes = [ScoredBox { bbox: b, score: 0.8 }, ScoredBox { bbox: b, score: 0.9 }];
        assert_eq!(nms(&boxes, 0.5), vec![1]);
    }

    #[test]
    fn flip_is_involution() {
        let b = BBox::new(1.5, 2.0, 7.25, 9.0);
        assert_eq!(b.flip_horizontal(20.0).flip_horizontal(20.0), b);
    }
}
