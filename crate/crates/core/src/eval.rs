//! Miss-rate / FPPI evaluation in the style of the Caltech pedestrian
//! benchmark: subset filtering, greedy matching with ignore regions, the
//! tradeoff curve and its log-average miss rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Detection};
use crate::error::{Error, Result};

/// Floor applied to miss rates before taking logs.
pub const MR_EPS: f64 = 1e-10;

/// Default IoU threshold for a detection to match a ground-truth box.
pub const MATCH_IOU: f64 = 0.5;

/// FPPI reference points of the log-average miss rate: nine values evenly
/// spaced in log space over `[1e-2, 1]`.
pub fn reference_fppi() -> [f64; 9] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + 0.25 * k as f64))
}

/// Annotated pedestrian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GTBox {
    pub bbox: BBox,
    /// Unoccluded fraction of the figure, in `[0, 1]`.
    pub visibility: f64,
    /// Ignore regions absorb detections without counting them.
    pub ignore: bool,
}

impl GTBox {
    pub fn new(bbox: BBox, visibility: f64) -> Self {
        GTBox {
            bbox,
            visibility,
            ignore: false,
        }
    }

    pub fn height(&self) -> f64 {
        self.bbox.height()
    }
}

/// Evaluation subsets. Thresholds are given at full benchmark resolution
/// and multiplied by a scale factor for smaller images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    /// height > 50, visibility > 0.65
    Reasonable,
    /// 50 < height < 75, 0.2 < visibility < 0.65
    Small,
}

impl Subset {
    pub const ALL: [Subset; 2] = [Subset::Reasonable, Subset::Small];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Reasonable => "reasonable",
            Subset::Small => "small",
        }
    }

    pub fn contains(self, gt: &GTBox, scale: f64) -> bool {
        let (h, v) = (gt.height(), gt.visibility);
        match self {
            Subset::Reasonable => h > 50.0 * scale && v > 0.65,
            Subset::Small => h > 50.0 * scale && h < 75.0 * scale && v > 0.2 && v < 0.65,
        }
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reasonable" => Ok(Subset::Reasonable),
            "small" => Ok(Subset::Small),
            other => Err(Error::Input(format!("unknown subset `{other}`"))),
        }
    }
}

/// Marks every box outside `subset` as an ignore region.
pub fn subset_filter(gts: &[GTBox], subset: Subset, scale: f64) -> Vec<GTBox> {
    gts.iter()
        .map(|g| GTBox {
            ignore: g.ignore || !subset.contains(g, scale),
            ..*g
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetOutcome {
    TruePositive,
    FalsePositive,
    /// Matched an ignore region: neither true nor false.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Outcome of each detection, in input order.
    pub detections: Vec<DetOutcome>,
    /// Whether each ground-truth box was matched; always false for ignores.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn count(&self, outcome: DetOutcome) -> usize {
        self.detections.iter().filter(|&&o| o == outcome).count()
    }
}

/// Detection indices by descending score; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching: in score order, each detection takes the highest-IoU
/// unmatched non-ignore box with IoU ≥ `iou_thresh`; failing that, the best
/// ignore box above threshold; otherwise it is a false positive.
pub fn match_detections(dets: &[Detection], gts: &[GTBox], iou_thresh: f64) -> MatchResult {
    let mut detections = vec![DetOutcome::FalsePositive; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        let mut best_ignore = false;
        for (j, gt) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            let iou = dets[i].bbox.iou(&gt.bbox);
            if iou < iou_thresh {
                continue;
            }
            // a real box always beats an ignore region
            let better = match best {
                None => true,
                Some((_, b)) => (best_ignore && !gt.ignore) || (best_ignore == gt.ignore && iou > b),
            };
            if better {
                best = Some((j, iou));
                best_ignore = gt.ignore;
            }
        }
        detections[i] = match best {
            Some((j, _)) if !best_ignore => {
                gt_matched[j] = true;
                DetOutcome::TruePositive
            }
            Some(_) => DetOutcome::Ignored,
            None => DetOutcome::FalsePositive,
        };
    }
    MatchResult { detections, gt_matched }
}

/// Scored match outcomes of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub scores: Vec<f64>,
    pub outcomes: Vec<DetOutcome>,
    /// Number of non-ignore ground-truth boxes.
    pub num_gt: usize,
}

impl ImageResult {
    pub fn new(dets: &[Detection], gts: &[GTBox], iou_thresh: f64) -> Self {
        let m = match_detections(dets, gts, iou_thresh);
        ImageResult {
            scores: dets.iter().map(|d| d.score).collect(),
            outcomes: m.detections,
            num_gt: gts.iter().filter(|g| !g.ignore).count(),
        }
    }
}

/// Miss rate against false positives per image, one point per distinct
/// detection score, ordered by decreasing threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub points: Vec<(f64, f64)>,
    pub log_avg_mr: f64,
}

impl EvalCurve {
    /// Tab-separated `fppi  miss_rate` rows with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("fppi\tmiss_rate\n");
        for (f, m) in &self.points {
            let _ = writeln!(out, "{f}\t{m}");
        }
        out
    }
}

/// Sweeps the score threshold over every distinct score. A detector with no
/// counted detections yields the single point `(0, 1)`.
pub fn mr_fppi_curve(results: &[ImageResult], num_images: usize) -> Result<EvalCurve> {
    if num_images == 0 {
        return Err(Error::Input("no images to evaluate".into()));
    }
    let total_gt: usize = results.iter().map(|r| r.num_gt).sum();
    if total_gt == 0 {
        return Err(Error::Input("miss rate undefined without ground truth".into()));
    }
    let mut scored: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| r.scores.iter().zip(&r.outcomes))
        .filter_map(|(&s, &o)| match o {
            DetOutcome::TruePositive => Some((s, true)),
            DetOutcome::FalsePositive => Some((s, false)),
            DetOutcome::Ignored => None,
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = scored.get(k + 1).is_none_or(|n| n.0 != score);
        if last_of_score {
            points.push((fp as f64 / num_images as f64, 1.0 - tp as f64 / total_gt as f64));
        }
    }
    if points.is_empty() {
        points.push((0.0, 1.0));
    }
    let log_avg_mr = log_average_miss_rate(&points)?;
    Ok(EvalCurve { points, log_avg_mr })
}

/// Geometric mean of the miss rate sampled at the reference FPPI values.
/// Each sample is the miss rate of the last point whose FPPI does not exceed
/// the reference, or the first point's miss rate if there is none. Samples
/// are floored at [`MR_EPS`]; a curve that misses nothing at any reference
/// scores exactly 0.
pub fn log_average_miss_rate(points: &[(f64, f64)]) -> Result<f64> {
    let first = points.first().ok_or_else(|| Error::Input("empty curve".into()))?;
    let samples = reference_fppi().map(|r| points.iter().rev().find(|p| p.0 <= r).unwrap_or(first).1);
    if samples.iter().all(|&m| m == 0.0) {
        return Ok(0.0);
    }
    let sum_log: f64 = samples.iter().map(|m| m.max(MR_EPS).ln()).sum();
    Ok((sum_log / samples.len() as f64).exp())
}

/// Full evaluation of per-image detections against per-image ground truth on
/// one subset.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GTBox>],
    subset: Subset,
    scale: f64,
    iou_thresh: f64,
) -> Result<EvalCurve> {
    if dets.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let results: Vec<ImageResult> = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| ImageResult::new(d, &subset_filter(g, subset, scale), iou_thresh))
        .collect();
    mr_fppi_curve(&results, gts.len())
}

fn parse_rows(text: &str, path: &Path, min_cols: usize, max_cols: usize) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < min_cols || fields.len() > max_cols {
            return Err(err(format!(
                "expected {min_cols}..={max_cols} columns, got {}",
                fields.len()
            )));
        }
        let id = fields[0].parse::<usize>().map_err(|e| err(format!("image id: {e}")))?;
        let vals = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        rows.push((n + 1, id, vals));
    }
    Ok(rows)
}

/// Parses `image_id x1 y1 x2 y2 score` lines. `#` starts a comment line.
pub fn parse_detections(text: &str, path: &Path) -> Result<BTreeMap<usize, Vec<Detection>>> {
    let mut out: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for (_, id, v) in parse_rows(text, path, 6, 6)? {
        out.entry(id).or_default().push(Detection {
            bbox: BBox::new(v[0], v[1], v[2], v[3]),
            score: v[4],
        });
    }
    Ok(out)
}

/// Parses `image_id x1 y1 x2 y2 visibility [ignore]` lines, where the
/// optional last column is `1` for ignore regions.
pub fn parse_annotations(text: &str, path: &Path) -> Result<BTreeMap<usize, Vec<GTBox>>> {
    let mut out: BTreeMap<usize, Vec<GTBox>> = BTreeMap::new();
    for (line, id, v) in parse_rows(text, path, 6, 7)? {
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        };
        if !(0.0..=1.0).contains(&v[4]) {
            return Err(err("visibility outside [0, 1]"));
        }
        let ignore = match v.get(5) {
            None | Some(0.0) => false,
            Some(1.0) => true,
            Some(_) => return Err(err("ignore flag must be 0 or 1")),
        };
        out.entry(id).or_default().push(GTBox {
            bbox: BBox::new(v[0], v[1], v[2], v[3]),
            visibility: v[4],
            ignore,
        });
    }
    Ok(out)
}

pub fn format_detections<'a>(images: impl IntoIterator<Item = (usize, &'a [Detection])>) -> String {
    let mut out = String::new();
    for (id, dets) in images {
        for d in dets {
            let b = d.bbox;
            let _ = writeln!(out, "{id} {} {} {} {} {}", b.x1, b.y1, b.x2, b.y2, d.score);
        }
    }
    out
}

pub fn format_annotations<'a>(images: impl IntoIterator<Item = (usize, &'a [GTBox])>) -> String {
    let mut out = String::new();
    for (id, gts) in images {
        for g in gts {
            let b = g.bbox;
            let _ = write!(out, "{id} {} {} {} {} {}", b.x1, b.y1, b.x2, b.y2, g.visibility);
            out.push_str(if g.ignore { " 1\n" } else { "\n" });
        }
    }
    out
}
