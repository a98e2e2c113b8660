//! End-to-end experiments: teacher training, the eight-row distillation
//! ablation, evaluation and the tables they produce.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::Detection;
use crate::config::{EvalConfig, RunConfig};
use crate::data::{generate_dataset, Dataset, SyntheticScene};
use crate::distill::DistillConfig;
use crate::error::Result;
use crate::eval::{evaluate, Subset};
use crate::nets::Detector;
use crate::training::{distill_student, train_teacher, FrozenTeacher, StepRecord, TrainConfig};

/// Log-average miss rates on both subsets. `NaN` marks a subset without any
/// ground truth in the test split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mr_reasonable: f64,
    pub mr_small: f64,
}

pub fn detect_all(det: &Detector, scenes: &[SyntheticScene]) -> Result<Vec<Vec<Detection>>> {
    scenes.iter().map(|s| det.detect(&s.batch())).collect()
}

pub fn evaluate_detections(dets: &[Vec<Detection>], scenes: &[SyntheticScene], cfg: &EvalConfig) -> Result<Metrics> {
    let gts: Vec<_> = scenes.iter().map(|s| s.annotations.clone()).collect();
    let mr = |subset| {
        let has_gt = gts.iter().flatten().any(|g| subset_member(g, subset, cfg));
        if has_gt {
            evaluate(dets, &gts, subset, cfg.scale, cfg.iou).map(|c| c.log_avg_mr)
        } else {
            Ok(f64::NAN)
        }
    };
    Ok(Metrics {
        mr_reasonable: mr(Subset::Reasonable)?,
        mr_small: mr(Subset::Small)?,
    })
}

fn subset_member(g: &crate::eval::GTBox, subset: Subset, cfg: &EvalConfig) -> bool {
    !g.ignore && subset.contains(g, cfg.scale)
}

pub fn evaluate_detector(det: &Detector, scenes: &[SyntheticScene], cfg: &EvalConfig) -> Result<Metrics> {
    evaluate_detections(&detect_all(det, scenes)?, scenes, cfg)
}

/// One trained student of the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub distill: DistillConfig,
    pub metrics: Metrics,
    /// SHA-256 of the student checkpoint.
    pub checkpoint: String,
}

/// Teacher and all eight students for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub teacher: Metrics,
    pub teacher_checkpoint: String,
    pub rows: Vec<AblationRow>,
}

/// Progress events of a long run.
pub enum Event<'a> {
    TeacherStep(&'a StepRecord),
    TeacherDone(&'a Detector, &'a Metrics),
    StudentStep(usize, &'a StepRecord),
    StudentDone(usize, &'a Detector, &'a AblationRow),
}

/// Trains the teacher of `cfg`'s seed on a freshly generated dataset.
pub fn teacher_phase(
    cfg: &RunConfig,
    data: &Dataset,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Detector> {
    Ok(train_teacher(cfg.teacher_detector(), &data.train, &cfg.teacher_train, on_step)?.detector)
}

/// Distills one student with the given loss selection.
pub fn student_phase(
    cfg: &RunConfig,
    teacher: &mut FrozenTeacher,
    data: &Dataset,
    distill: DistillConfig,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Detector> {
    let train = TrainConfig {
        distill,
        ..cfg.student_train.clone()
    };
    let student = RunConfig {
        student_train: train.clone(),
        ..cfg.clone()
    }
    .student_detector();
    Ok(distill_student(student, teacher, &data.train, &train, on_step)?.detector)
}

/// Runs the full ablation for the seed already applied to `cfg`.
pub fn run_seed(cfg: &RunConfig, events: &mut dyn FnMut(Event) -> Result<()>) -> Result<SeedReport> {
    let data = generate_dataset(&cfg.data)?;
    let teacher = teacher_phase(cfg, &data, &mut |r| events(Event::TeacherStep(r)))?;
    let teacher_metrics = evaluate_detector(&teacher, &data.test, &cfg.eval)?;
    events(Event::TeacherDone(&teacher, &teacher_metrics))?;
    let teacher_checkpoint = teacher.params.digest();
    let mut frozen = FrozenTeacher::new(teacher);
    let mut rows = Vec::new();
    for (i, distill) in cfg.student_train.distill.ablation_rows().into_iter().enumerate() {
        let student = student_phase(cfg, &mut frozen, &data, distill, &mut |r| {
            events(Event::StudentStep(i, r))
        })?;
        let row = AblationRow {
            distill,
            metrics: evaluate_detector(&student, &data.test, &cfg.eval)?,
            checkpoint: student.params.digest(),
        };
        events(Event::StudentDone(i, &student, &row))?;
        rows.push(row);
    }
    Ok(SeedReport {
        seed: cfg.data.seed,
        teacher: teacher_metrics,
        teacher_checkpoint,
        rows,
    })
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

/// Tab-separated ablation table with one row per configuration, in table
/// order. With several reports the miss rates are means over seeds.
pub fn ablation_table(reports: &[SeedReport]) -> String {
    let mut out = String::from("num\tPD\tRD\tLD\tPyRoIAlign\tMR-reasonable\tMR-small\n");
    let Some(first) = reports.first() else { return out };
    let n = reports.len() as f64;
    for (i, row) in first.rows.iter().enumerate() {
        let mean = |f: fn(&Metrics) -> f64| reports.iter().map(|r| f(&r.rows[i].metrics)).sum::<f64>() / n;
        let d = row.distill;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}",
            i + 1,
            mark(d.pd),
            mark(d.rd),
            mark(d.ld),
            mark(d.pyramid_roi),
            100.0 * mean(|m| m.mr_reasonable),
            100.0 * mean(|m| m.mr_small),
        );
    }
    out
}

/// Per-seed miss rates of the teacher and every row, tab separated.
pub fn seed_table(reports: &[SeedReport]) -> String {
    let mut out = String::from("seed\tmodel\tMR-reasonable\tMR-small\tcheckpoint\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{}\tteacher\t{:.4}\t{:.4}\t{}",
            r.seed,
            100.0 * r.teacher.mr_reasonable,
            100.0 * r.teacher.mr_small,
            r.teacher_checkpoint
        );
        for (i, row) in r.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\trow{}\t{:.4}\t{:.4}\t{}",
                r.seed,
                i + 1,
                100.0 * row.metrics.mr_reasonable,
                100.0 * row.metrics.mr_small,
                row.checkpoint
            );
        }
    }
    out
}

/// Row indices (0-based, table order) used by the headline comparisons.
pub const BASELINE_ROW: usize = 1;
pub const RD_SINGLE_ROW: usize = 3;
pub const RD_PYRAMID_ROW: usize = 4;
pub const FULL_ROW: usize = 7;

/// Seed-level outcomes of the qualitative claims the ablation tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVerdict {
    pub seeds: usize,
    /// Full distillation beats the no-distillation baseline.
    pub full_beats_baseline: usize,
    /// Region distillation gains from pyramid crops.
    pub pyramid_rd_beats_single: usize,
    /// Distillation shrinks the student's gap to the teacher.
    pub gap_shrinks: usize,
    pub mean_full: f64,
    pub mean_baseline: f64,
}

pub fn verdict(reports: &[SeedReport]) -> AblationVerdict {
    let mr = |r: &SeedReport, i: usize| r.rows[i].metrics.mr_reasonable;
    let count = |f: &dyn Fn(&SeedReport) -> bool| reports.iter().filter(|r| f(r)).count();
    let n = reports.len().max(1) as f64;
    AblationVerdict {
        seeds: reports.len(),
        full_beats_baseline: count(&|r| mr(r, FULL_ROW) < mr(r, BASELINE_ROW)),
        pyramid_rd_beats_single: count(&|r| mr(r, RD_PYRAMID_ROW) < mr(r, RD_SINGLE_ROW)),
        gap_shrinks: count(&|r| {
            (mr(r, FULL_ROW) - r.teacher.mr_reasonable).abs() < (mr(r, BASELINE_ROW) - r.teacher.mr_reasonable).abs()
        }),
        mean_full: reports.iter().map(|r| mr(r, FULL_ROW)).sum::<f64>() / n,
        mean_baseline: reports.iter().map(|r| mr(r, BASELINE_ROW)).sum::<f64>() / n,
    }
}
