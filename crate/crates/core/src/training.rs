//! Training driver: supervised teacher training and distillation of a
//! student from a frozen teacher.
//!
//! One image per step. Two ChaCha streams derived from the run seed drive
//! the loop: one shuffles the data and draws flips, the other samples
//! anchors and RoIs. Distillation consumes neither, so a run with every
//! distillation term disabled follows exactly the same trajectory as plain
//! training of the same student.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::boxes::{BBox, RoI};
use crate::data::SyntheticScene;
use crate::distill::{
    logit_distill_loss, pyramid_distill_loss, region_distill_loss, total_distill_loss, DistillConfig, DistillReport,
};
use crate::error::{Error, Result};
use crate::eval::GTBox;
use crate::nets::{backbone_forward, fpn_forward, head_forward, Detector, DetectorConfig, FeaturePyramid};
use crate::params::Sgd;
use crate::roi::{region_features, RoiMode};
use crate::tensor::Tensor;

const ORDER_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs (1-based) from which the rate is multiplied by the factor.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub flip_prob: f64,
    pub momentum: f64,
    /// Rescale the gradient to at most this L2 norm; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Seeds parameter initialization, data order, flips and sampling.
    pub seed: u64,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            base_lr: 0.002,
            lr_decay_epochs: vec![4, 6],
            lr_decay_factor: 0.1,
            flip_prob: 0.5,
            momentum: 0.9,
            max_grad_norm: 0.0,
            seed: 0,
            distill: DistillConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {}", self.base_lr));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] <= w[1]) {
            return fail("lr_decay_epochs must be sorted".into());
        }
        if self.lr_decay_epochs.iter().any(|&e| e == 0 || e > self.epochs) {
            return fail("lr_decay_epochs must lie in 1..=epochs".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return fail(format!("lr_decay_factor {}", self.lr_decay_factor));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob {}", self.flip_prob));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {}", self.momentum));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return fail(format!("max_grad_norm {}", self.max_grad_norm));
        }
        self.distill.validate()
    }
}

/// Learning rate of 1-based `epoch`: the base rate times the decay factor
/// once for every decay epoch already reached.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(decays as i32)
}

/// Mirrors an image along its last (width) axis and maps each box to
/// `x' = W − x` with the endpoints swapped.
pub fn horizontal_flip(image: &Tensor, boxes: &[GTBox]) -> (Tensor, Vec<GTBox>) {
    let w = *image.shape().last().expect("image has a width axis");
    let mut data = image.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    let flipped = boxes
        .iter()
        .map(|b| GTBox {
            bbox: b.bbox.flip_horizontal(w as f64),
            ..*b
        })
        .collect();
    (Tensor::from_parts(image.shape().to_vec(), data), flipped)
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub det_loss: f64,
    pub rpn_loss: f64,
    pub distill: DistillReport,
    pub total: f64,
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub det_loss: f64,
    pub rpn_loss: f64,
    pub distill: f64,
}

impl EpochSummary {
    fn add(&mut self, r: &StepRecord) {
        self.steps += 1;
        self.det_loss += r.det_loss;
        self.rpn_loss += r.rpn_loss;
        self.distill += r.distill.total;
    }

    fn finish(mut self) -> Self {
        let n = self.steps.max(1) as f64;
        self.det_loss /= n;
        self.rpn_loss /= n;
        self.distill /= n;
        self
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub epochs: Vec<EpochSummary>,
}

/// Teacher in inference mode. Its feature pyramids are memoized per
/// (scene index, flipped), so one instance must only ever be used with one
/// training set.
#[derive(Debug)]
pub struct FrozenTeacher {
    detector: Detector,
    cache: HashMap<(usize, bool), Vec<Tensor>>,
}

/// Teacher tensors matched to one student step.
#[derive(Debug, Default)]
struct TeacherTargets {
    pyramid: Option<Vec<Tensor>>,
    regions: Option<Tensor>,
    logits: Option<Tensor>,
}

impl FrozenTeacher {
    pub fn new(detector: Detector) -> Self {
        FrozenTeacher {
            detector,
            cache: HashMap::new(),
        }
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    fn pyramid(&mut self, key: (usize, bool), image: &Tensor) -> Result<&[Tensor]> {
        if !self.cache.contains_key(&key) {
            let mut g = Graph::new();
            let p = self.detector.params.bind_prefix(&mut g, "backbone.", false);
            let q = self.detector.params.bind_prefix(&mut g, "fpn.", false);
            let x = g.constant(image.clone());
            let feats = backbone_forward(&mut g, &p, &self.detector.config.net, x)?;
            let pyr = fpn_forward(&mut g, &q, &feats)?;
            let levels = pyr.levels.iter().map(|&v| g.value(v).clone()).collect();
            self.cache.insert(key, levels);
        }
        Ok(&self.cache[&key])
    }

    fn targets(
        &mut self,
        key: (usize, bool),
        image: &Tensor,
        rois: &[RoI],
        cfg: &DistillConfig,
        student_mode: RoiMode,
    ) -> Result<TeacherTargets> {
        let levels = self.pyramid(key, image)?.to_vec();
        let mut out = TeacherTargets::default();
        if cfg.rd || cfg.ld {
            let mut g = Graph::new();
            let vars = levels.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
            let pyr = FeaturePyramid {
                levels: [vars[0], vars[1], vars[2], vars[3]],
            };
            let roi_cfg = self.detector.config.roi;
            let teacher_mode = self.detector.config.roi_mode;
            let mut own = None;
            if cfg.rd {
                let r = region_features(&mut g, &pyr, rois, student_mode, &roi_cfg)?;
                out.regions = Some(g.value(r).clone());
                if student_mode == teacher_mode {
                    own = Some(r);
                }
            }
            if cfg.ld {
                let regions = match own {
                    Some(r) => r,
                    None => region_features(&mut g, &pyr, rois, teacher_mode, &roi_cfg)?,
                };
                let p = self.detector.params.bind_prefix(&mut g, "head.", false);
                let head = head_forward(&mut g, &p, regions)?;
                out.logits = Some(g.value(head.logits).clone());
            }
        }
        if cfg.pd {
            out.pyramid = Some(levels);
        }
        Ok(out)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gt_boxes(gts: &[GTBox]) -> Vec<BBox> {
    gts.iter().filter(|g| !g.ignore).map(|g| g.bbox).collect()
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    opt: Sgd,
    sample_rng: ChaCha8Rng,
}

impl Loop<'_> {
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        det: &mut Detector,
        teacher: Option<&mut FrozenTeacher>,
        key: (usize, bool),
        image: &Tensor,
        gts: &[GTBox],
        epoch: usize,
        step: usize,
        lr: f64,
    ) -> Result<StepRecord> {
        let diverged = |what: String| Error::Diverged { epoch, step, what };
        let mut g = Graph::new();
        let p = det.params.bind(&mut g, true);
        let x = g.constant(image.clone());
        let sp = det.supervised(&mut g, &p, x, &gt_boxes(gts), &mut self.sample_rng)?;
        let mut loss = g.add(sp.rpn_loss, sp.det_loss)?;
        let mut report = DistillReport::default();
        if let Some(teacher) = teacher.filter(|_| self.cfg.distill.any_enabled()) {
            let dcfg = &self.cfg.distill;
            let t = teacher.targets(key, image, &sp.sampled.rois, dcfg, det.config.roi_mode)?;
            let pd = match t.pyramid {
                Some(levels) => {
                    let v: Vec<_> = levels.into_iter().map(|l| g.constant(l)).collect();
                    let tp = FeaturePyramid {
                        levels: [v[0], v[1], v[2], v[3]],
                    };
                    Some(pyramid_distill_loss(&mut g, &sp.forward.pyramid, &tp)?)
                }
                None => None,
            };
            let rd = match t.regions {
                Some(r) => {
                    let r = g.constant(r);
                    Some(region_distill_loss(&mut g, &[sp.regions], &[r])?)
                }
                None => None,
            };
            let ld = match t.logits {
                Some(l) => {
                    let l = g.constant(l);
                    Some(logit_distill_loss(&mut g, &[sp.head.logits], &[l])?)
                }
                None => None,
            };
            let (dist, r) = total_distill_loss(&mut g, dcfg, pd, rd, ld)?;
            report = r;
            loss = g.add(loss, dist)?;
        }
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(diverged(format!("loss is {total}")));
        }
        g.backward(loss).map_err(|e| diverged(e.to_string()))?;
        let mut grads = p.gradients(&g);
        if self.cfg.max_grad_norm > 0.0 {
            let norm = grads.l2_norm();
            if norm > self.cfg.max_grad_norm {
                grads.scale(self.cfg.max_grad_norm / norm);
            }
        }
        self.opt.step(&mut det.params, &mut grads, lr)?;
        Ok(StepRecord {
            epoch,
            step,
            lr,
            det_loss: g.value(sp.det_loss).item(),
            rpn_loss: g.value(sp.rpn_loss).item(),
            distill: report,
            total,
        })
    }
}

fn run(
    mut det: Detector,
    mut teacher: Option<&mut FrozenTeacher>,
    data: &[SyntheticScene],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut order_rng = stream(cfg.seed, ORDER_STREAM);
    let mut lp = Loop {
        cfg,
        opt: Sgd::new(cfg.momentum),
        sample_rng: stream(cfg.seed, SAMPLE_STREAM),
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut summary = EpochSummary {
            epoch,
            lr,
            ..EpochSummary::default()
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        for i in order {
            let flip = order_rng.gen_bool(cfg.flip_prob);
            let batch = data[i].batch();
            let (image, gts) = if flip {
                horizontal_flip(&batch, &data[i].annotations)
            } else {
                (batch, data[i].annotations.clone())
            };
            step += 1;
            let rec = lp.step(
                &mut det,
                teacher.as_deref_mut(),
                (i, flip),
                &image,
                &gts,
                epoch,
                step,
                lr,
            )?;
            summary.add(&rec);
            log(&rec)?;
        }
        epochs.push(summary.finish());
    }
    Ok(TrainOutcome { detector: det, epochs })
}

/// Supervised training (RPN + detection losses) of a freshly initialized
/// detector; the teacher phase.
pub fn train_detector(
    config: DetectorConfig,
    data: &[SyntheticScene],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let det = Detector::new(config, cfg.seed)?;
    run(det, None, data, cfg, log)
}

pub fn train_teacher(
    config: DetectorConfig,
    data: &[SyntheticScene],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    train_detector(config, data, cfg, log)
}

/// Trains a student under supervision plus the enabled distillation terms.
/// The student's crop mode follows `cfg.distill.pyramid_roi`.
pub fn distill_student(
    student: DetectorConfig,
    teacher: &mut FrozenTeacher,
    data: &[SyntheticScene],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let t = &teacher.detector.config;
    if t.net.pyramid_width != student.net.pyramid_width {
        return Err(Error::Config(format!(
            "teacher pyramid width {} differs from student {}",
            t.net.pyramid_width, student.net.pyramid_width
        )));
    }
    if t.net.logit_width != student.net.logit_width {
        return Err(Error::Config(format!(
            "teacher logit width {} differs from student {}",
            t.net.logit_width, student.net.logit_width
        )));
    }
    let student = DetectorConfig {
        roi_mode: RoiMode::from_flag(cfg.distill.pyramid_roi),
        ..student
    };
    let det = Detector::new(student, cfg.seed)?;
    run(det, Some(teacher), data, cfg, log)
}
