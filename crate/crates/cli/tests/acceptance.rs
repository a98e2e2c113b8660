//! End-to-end acceptance criteria. Each test prints one `criterion N: PASS`
//! or `criterion N: FAIL` line straight to stdout (visible without
//! `--nocapture`) and then asserts.
//!
//! The criteria run one at a time: the ablation is long and the gradient
//! suite carries a wall-clock bound that must not be measured while another
//! criterion competes for the CPU.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use hkd_core::boxes::{BBox, ScoredBox};
use hkd_core::data::{generate_dataset, DatasetParams};
use hkd_core::distill::{
    logit_distill_loss, pyramid_distill_loss, region_distill_loss, total_distill_loss, DistillConfig,
};
use hkd_core::eval::{evaluate, match_detections, mr_fppi_curve, DetOutcome, GTBox, ImageResult, Subset};
use hkd_core::nets::{head_forward, Detector, DetectorConfig, NetConfig};
use hkd_core::roi::RoiMode;
use hkd_core::training::{distill_student, train_detector, FrozenTeacher, StepRecord, TrainConfig};
use hkd_core::{Detection, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_TOL_TIGHT: f64 = 1e-12;
const MIN_RATIO: f64 = 4.0;
const SEEDS: usize = 5;
const REQUIRED_SEEDS: usize = 4;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn hkd(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hkd"))
        .args(args)
        .output()
        .expect("spawn hkd");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn criterion_1_gradient_suite() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let (ok, stdout, stderr) = hkd(&["--out", path_str(dir.path()), "gradcheck", "--instances", "20"]);
    let elapsed = t0.elapsed();
    let tsv = std::fs::read_to_string(dir.path().join("gradcheck.tsv")).unwrap_or_default();
    let rows: Vec<Vec<&str>> = tsv.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let mut failures = Vec::new();
    let mut ops = 0;
    for r in &rows {
        let (name, instances, err, tol, passed) = (r[0], r[1], r[2], r[3], r[4]);
        let err: f64 = err.parse().unwrap();
        let tol_ok = if name == "detector_loss_64x64" {
            tol.parse::<f64>().unwrap() <= 1e-3
        } else {
            ops += 1;
            tol.parse::<f64>().unwrap() <= 1e-4 && instances.parse::<usize>().unwrap() >= 20
        };
        if passed != "true" || !tol_ok || !err.is_finite() {
            failures.push(format!("{name} ({err:e})"));
        }
    }
    let has_e2e = rows.iter().any(|r| r[0] == "detector_loss_64x64");
    let pass = ok && ops > 0 && has_e2e && failures.is_empty() && elapsed < GRADCHECK_BUDGET;
    report(
        1,
        pass,
        &format!(
            "{ops} ops plus end-to-end loss, {:.1}s (budget {}s){}",
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    );
    assert!(pass, "gradient suite failed\n{stdout}\n{stderr}");
}

#[test]
fn criterion_2_oracle_equivalence() {
    let _guard = serial();
    let checks = oracles::all(2024);
    let names: Vec<&str> = checks.iter().map(|c| c.name).collect();
    let required = [
        "conv2d",
        "linear",
        "bilinear_sample",
        "roi_align",
        "nms",
        "pyramid_distill",
        "region_distill",
        "logit_distill",
    ];
    let missing: Vec<&&str> = required
        .iter()
        .filter(|r| !names.iter().any(|n| n.starts_with(**r)))
        .collect();
    let mut bad = Vec::new();
    for c in &checks {
        let tol = if c.name.contains("distill") || c.name.starts_with("bilinear") {
            ORACLE_TOL_TIGHT
        } else {
            ORACLE_TOL
        };
        if !c.passed() || c.tol > tol || c.instances < oracles::INSTANCES {
            bad.push(format!("{} ({} instances, {:e})", c.name, c.instances, c.max_err));
        }
    }
    let worst = checks.iter().map(|c| c.max_err).fold(0.0, f64::max);
    let pass = missing.is_empty() && bad.is_empty();
    report(
        2,
        pass,
        &format!(
            "{} ops x >= {} instances, worst deviation {worst:.2e}{}",
            checks.len(),
            oracles::INSTANCES,
            if pass {
                String::new()
            } else {
                format!("; failing: {bad:?} missing: {missing:?}")
            }
        ),
    );
    assert!(pass);
}

fn collect(into: &mut Vec<StepRecord>) -> impl FnMut(&StepRecord) -> hkd_core::Result<()> + '_ {
    |r| {
        into.push(r.clone());
        Ok(())
    }
}

/// Student and teacher with the same architecture and initialization: every
/// term is exactly zero on the first step.
fn identical_tensors_give_zero() -> bool {
    let data = generate_dataset(&DatasetParams {
        train: 2,
        test: 0,
        seed: 12,
        ..DatasetParams::default()
    })
    .unwrap();
    let config = DetectorConfig::new(NetConfig::default_student(), RoiMode::Pyramid);
    let mut frozen = FrozenTeacher::new(Detector::new(config.clone(), 5).unwrap());
    let tc = TrainConfig {
        epochs: 1,
        lr_decay_epochs: vec![],
        seed: 5,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    distill_student(config, &mut frozen, &data.train, &tc, &mut collect(&mut log)).unwrap();
    let d = &log[0].distill;
    d.pd == Some(0.0) && d.rd == Some(0.0) && d.ld == Some(0.0) && d.total == 0.0
}

/// Both networks bound as trainable on one tape: the teacher's parameters
/// must still receive exactly zero gradient through every term.
fn teacher_gradients_are_zero() -> bool {
    let data = generate_dataset(&DatasetParams {
        train: 1,
        test: 0,
        seed: 13,
        ..DatasetParams::default()
    })
    .unwrap();
    let scene = &data.train[0];
    let teacher = Detector::new(DetectorConfig::new(NetConfig::default_teacher(), RoiMode::Pyramid), 1).unwrap();
    let student = Detector::new(DetectorConfig::new(NetConfig::default_student(), RoiMode::Pyramid), 2).unwrap();
    let mut g = Graph::new();
    let tp = teacher.params.bind(&mut g, true);
    let sp = student.params.bind(&mut g, true);
    let image = g.constant(scene.batch());
    let tf = teacher.forward(&mut g, &tp, image).unwrap();
    let sf = student.forward(&mut g, &sp, image).unwrap();
    let rois: Vec<ScoredBox> = scene
        .boxes()
        .into_iter()
        .map(|bbox| ScoredBox { bbox, score: 1.0 })
        .collect();
    let tr = teacher.regions(&mut g, &tf.pyramid, &rois).unwrap();
    let sr = student.regions(&mut g, &sf.pyramid, &rois).unwrap();
    let th = head_forward(&mut g, &tp, tr).unwrap();
    let sh = head_forward(&mut g, &sp, sr).unwrap();
    let pd = pyramid_distill_loss(&mut g, &sf.pyramid, &tf.pyramid).unwrap();
    let rd = region_distill_loss(&mut g, &[sr], &[tr]).unwrap();
    let ld = logit_distill_loss(&mut g, &[sh.logits], &[th.logits]).unwrap();
    let (loss, _) = total_distill_loss(&mut g, &DistillConfig::default(), Some(pd), Some(rd), Some(ld)).unwrap();
    g.backward(loss).unwrap();
    let tg = tp.gradients(&g);
    let sg = sp.gradients(&g);
    let teacher_zero = tg.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0));
    let student_moves = sg.iter().any(|(_, v)| v.iter().any(|&x| x != 0.0));
    teacher_zero && student_moves
}

/// All flags off reproduces plain supervised training bit for bit.
fn flags_off_is_bitwise_baseline() -> bool {
    let data = generate_dataset(&DatasetParams {
        train: 4,
        test: 0,
        seed: 14,
        ..DatasetParams::default()
    })
    .unwrap();
    let teacher = Detector::new(DetectorConfig::new(NetConfig::default_teacher(), RoiMode::Pyramid), 3).unwrap();
    let mut frozen = FrozenTeacher::new(teacher);
    let tc = TrainConfig {
        epochs: 2,
        lr_decay_epochs: vec![],
        seed: 21,
        distill: DistillConfig::default().with_flags(false, false, false, true),
        ..TrainConfig::default()
    };
    let student = DetectorConfig::new(NetConfig::default_student(), RoiMode::Pyramid);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let plain = train_detector(student.clone(), &data.train, &tc, &mut collect(&mut a)).unwrap();
    let dist = distill_student(student, &mut frozen, &data.train, &tc, &mut collect(&mut b)).unwrap();
    let same_steps = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.total.to_bits() == y.total.to_bits()
                && x.det_loss.to_bits() == y.det_loss.to_bits()
                && x.rpn_loss.to_bits() == y.rpn_loss.to_bits()
        });
    same_steps && plain.detector.params.to_bytes() == dist.detector.params.to_bytes()
}

#[test]
fn criterion_3_distillation_identities() {
    let _guard = serial();
    let zero = identical_tensors_give_zero();
    let isolated = teacher_gradients_are_zero();
    let bitwise = flags_off_is_bitwise_baseline();
    let pass = zero && isolated && bitwise;
    report(
        3,
        pass,
        &format!("identical tensors -> zero terms: {zero}; teacher grads exactly 0: {isolated}; flags off bitwise baseline: {bitwise}"),
    );
    assert!(pass);
}

fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GTBox {
    GTBox::new(BBox::new(x1, y1, x2, y2), 1.0)
}

fn det(b: BBox, score: f64) -> Detection {
    ScoredBox { bbox: b, score }
}

fn perfect_and_empty() -> bool {
    let gts = vec![
        vec![gt(0.0, 0.0, 10.0, 24.0)],
        vec![gt(5.0, 5.0, 15.0, 40.0), gt(30.0, 0.0, 44.0, 30.0)],
    ];
    let perfect: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| g.iter().map(|b| det(b.bbox, 1.0)).collect())
        .collect();
    let empty = vec![Vec::new(); gts.len()];
    let p = evaluate(&perfect, &gts, Subset::Reasonable, 0.25, 0.5).unwrap();
    let e = evaluate(&empty, &gts, Subset::Reasonable, 0.25, 0.5).unwrap();
    p.log_avg_mr == 0.0 && e.log_avg_mr == 1.0
}

/// Three images, three pedestrians, one ignore region. Score sweep:
/// 0.9 TP, 0.8 TP+FP, 0.7 ignored, 0.6 FP, 0.5 FP, 0.4 FP, 0.3 TP.
fn crafted_scenario() -> bool {
    let mut ignore = gt(50.0, 0.0, 70.0, 40.0);
    ignore.ignore = true;
    let a = BBox::new(0.0, 0.0, 10.0, 24.0);
    let c = BBox::new(40.0, 0.0, 50.0, 24.0);
    let gts = vec![
        vec![GTBox::new(a, 1.0)],
        vec![GTBox::new(a, 1.0), GTBox::new(c, 1.0)],
        vec![ignore],
    ];
    let dets = [
        vec![det(a, 0.9), det(BBox::new(80.0, 0.0, 90.0, 24.0), 0.6)],
        vec![det(a, 0.8), det(a, 0.8), det(c, 0.3)],
        vec![
            det(ignore.bbox, 0.7),
            det(a, 0.5),
            det(BBox::new(20.0, 0.0, 30.0, 24.0), 0.4),
        ],
    ];
    let results: Vec<ImageResult> = dets
        .iter()
        .zip(&gts)
        .map(|(d, g)| ImageResult::new(d, g, 0.5))
        .collect();
    let curve = mr_fppi_curve(&results, 3).unwrap();
    // (FPPI, miss rate) after each distinct score, worked by hand
    let expected = vec![
        (0.0, 1.0 - 1.0 / 3.0),
        (1.0 / 3.0, 1.0 - 2.0 / 3.0),
        (2.0 / 3.0, 1.0 - 2.0 / 3.0),
        (1.0, 1.0 - 2.0 / 3.0),
        (4.0 / 3.0, 1.0 - 2.0 / 3.0),
        (4.0 / 3.0, 0.0),
    ];
    // seven of the nine reference FPPIs lie below 1/3 and read 2/3
    let mr = ((7.0 * (2.0f64 / 3.0).ln() + 2.0 * (1.0f64 / 3.0).ln()) / 9.0).exp();
    results[2].outcomes[0] == DetOutcome::Ignored && curve.points == expected && (curve.log_avg_mr - mr).abs() < 1e-15
}

fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<GTBox>, Vec<Detection>) {
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0));
        BBox::new(x, y, x + rng.gen_range(4.0..30.0), y + rng.gen_range(8.0..40.0))
    };
    let gts: Vec<GTBox> = (0..rng.gen_range(1..6))
        .map(|_| GTBox {
            bbox: rand_box(rng),
            visibility: rng.gen_range(0.0..=1.0),
            ignore: rng.gen_bool(0.2),
        })
        .collect();
    let dets = (0..rng.gen_range(0..20))
        .map(|_| {
            let k = rng.gen_range(0..=gts.len());
            let b = if k < gts.len() {
                let (dx, dy) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                let g = gts[k].bbox;
                BBox::new(g.x1 + dx, g.y1 + dy, g.x2 + dx, g.y2 + dy)
            } else {
                rand_box(rng)
            };
            det(b, f64::from(rng.gen_range(0..10u8)) / 10.0)
        })
        .collect();
    (gts, dets)
}

/// 100 random scenarios: curves are monotone with MR in [0, 1], and adding
/// detections that only hit ignore regions changes no count.
fn random_properties() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut monotone, mut neutral) = (0, 0);
    let mut scenarios = 0;
    while scenarios < 100 {
        let (g1, d1) = random_scene(&mut rng);
        let (g2, d2) = random_scene(&mut rng);
        if !g1.iter().chain(&g2).any(|g| !g.ignore) {
            continue;
        }
        scenarios += 1;
        let results = vec![ImageResult::new(&d1, &g1, 0.5), ImageResult::new(&d2, &g2, 0.5)];
        let c = mr_fppi_curve(&results, 2).unwrap();
        let ordered = c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 <= w[0].1);
        let bounded = c.points.iter().all(|p| (0.0..=1.0).contains(&p.1)) && (0.0..=1.0).contains(&c.log_avg_mr);
        monotone += usize::from(ordered && bounded);

        let score = rng.gen_range(0.0..1.0);
        let mut extra = d1.clone();
        for g in g1.iter().filter(|g| g.ignore) {
            if g1.iter().filter(|r| !r.ignore).all(|r| g.bbox.iou(&r.bbox) < 0.5) {
                extra.push(det(g.bbox, score));
            }
        }
        let base = match_detections(&d1, &g1, 0.5);
        let more = match_detections(&extra, &g1, 0.5);
        let same = base.count(DetOutcome::TruePositive) == more.count(DetOutcome::TruePositive)
            && base.count(DetOutcome::FalsePositive) == more.count(DetOutcome::FalsePositive)
            && base.gt_matched == more.gt_matched
            && more.detections[..d1.len()] == base.detections[..];
        neutral += usize::from(same);
    }
    (monotone, neutral)
}

#[test]
fn criterion_4_evaluation_oracle() {
    let _guard = serial();
    let exact = perfect_and_empty();
    let crafted = crafted_scenario();
    let (monotone, neutral) = random_properties();
    let pass = exact && crafted && monotone == 100 && neutral == 100;
    report(
        4,
        pass,
        &format!(
            "perfect=0/empty=1 exact: {exact}; crafted curve exact: {crafted}; monotone {monotone}/100; ignore-neutral {neutral}/100"
        ),
    );
    assert!(pass);
}

/// Outcome of the default five-seed ablation, shared by criteria 5 and 6.
struct Ablation {
    ok: bool,
    elapsed: Duration,
    ratio: Option<f64>,
    verdict: serde_json::Value,
    table: String,
    log: String,
}

fn ablation() -> &'static Ablation {
    static RUN: OnceLock<Ablation> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let t0 = Instant::now();
        let (ok, stdout, stderr) = hkd(&["--out", path_str(dir.path()), "ablate"]);
        let elapsed = t0.elapsed();
        let ratio = stdout
            .lines()
            .find_map(|l| l.strip_prefix("parameters: "))
            .and_then(|l| l.rsplit("ratio ").next())
            .and_then(|r| r.trim().parse().ok());
        let verdict = std::fs::read_to_string(dir.path().join("verdict.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or(serde_json::Value::Null);
        let table = std::fs::read_to_string(dir.path().join("ablation.tsv")).unwrap_or_default();
        Ablation {
            ok,
            elapsed,
            ratio,
            verdict,
            table,
            log: format!("{stdout}\n{stderr}"),
        }
    })
}

fn count(v: &serde_json::Value, key: &str) -> usize {
    v[key].as_u64().unwrap_or(0) as usize
}

#[test]
fn criterion_5_ablation_ordering() {
    let _guard = serial();
    let a = ablation();
    let v = &a.verdict;
    let seeds = count(v, "seeds");
    let mean_full = v["mean_full"].as_f64().unwrap_or(f64::NAN);
    let mean_base = v["mean_baseline"].as_f64().unwrap_or(f64::NAN);
    let full_wins = count(v, "full_beats_baseline");
    let pyramid_wins = count(v, "pyramid_rd_beats_single");
    let pass = a.ok && seeds == SEEDS && mean_full < mean_base && pyramid_wins >= REQUIRED_SEEDS;
    report(
        5,
        pass,
        &format!(
            "mean MR-reasonable full {:.2}% vs baseline {:.2}% (full better in {full_wins}/{seeds} seeds); \
             RD+PyRoIAlign beats RD single-level in {pyramid_wins}/{seeds} seeds (need {REQUIRED_SEEDS}); {:.0} min",
            100.0 * mean_full,
            100.0 * mean_base,
            a.elapsed.as_secs_f64() / 60.0
        ),
    );
    assert!(pass, "ablation table:\n{}\n{}", a.table, a.log);
}

#[test]
fn criterion_6_compression_contract() {
    let _guard = serial();
    let a = ablation();
    let seeds = count(&a.verdict, "seeds");
    let gap = count(&a.verdict, "gap_shrinks");
    let ratio = a.ratio.unwrap_or(f64::NAN);
    let pass = a.ok && ratio >= MIN_RATIO && seeds == SEEDS && gap >= REQUIRED_SEEDS;
    report(
        6,
        pass,
        &format!("printed parameter ratio {ratio:.2} (need >= {MIN_RATIO}); distilled gap to teacher smaller in {gap}/{seeds} seeds (need {REQUIRED_SEEDS})"),
    );
    assert!(pass, "{}", a.log);
}

const SMALL_RUN: &str = "\
ablation_seeds = 1
data.train = 6
data.test = 4
teacher_train.epochs = 1
teacher_train.lr_decay_epochs = []
student_train.epochs = 1
student_train.lr_decay_epochs = []
";

#[test]
fn criterion_7_reproducibility() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let (ok, _, stderr) = hkd(&[
            "--config",
            path_str(&config),
            "--seed",
            "17",
            "--out",
            path_str(&out),
            "ablate",
        ]);
        assert!(ok, "{stderr}");
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        let mut ckpts = vec![read("seed_17/teacher.ckpt")];
        ckpts.extend((1..=8).map(|i| read(&format!("seed_17/row{i}.ckpt"))));
        (read("seeds.tsv"), read("ablation.tsv"), ckpts)
    };
    let (seeds_a, table_a, ckpt_a) = run("a");
    let (seeds_b, table_b, ckpt_b) = run("b");
    let hashes: Vec<String> = String::from_utf8_lossy(&seeds_a)
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit('\t').next().map(str::to_owned))
        .collect();
    let pass = seeds_a == seeds_b && table_a == table_b && ckpt_a == ckpt_b && hashes.len() == 9;
    report(
        7,
        pass,
        &format!(
            "two runs, seed 17: {} checkpoint hashes and both metric tables {}",
            hashes.len(),
            if pass { "identical" } else { "DIFFER" }
        ),
    );
    assert!(pass);
}
