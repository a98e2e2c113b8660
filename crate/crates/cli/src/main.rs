//! `hkd`: train teachers, distill students, evaluate detectors and run the
//! full distillation ablation on the synthetic pedestrian benchmark.

mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hkd_core::autodiff::gradcheck::op_suite;
use hkd_core::config::RunConfig;
use hkd_core::data::{generate_dataset, generate_scene, Dataset, SceneParams};
use hkd_core::eval::{evaluate, parse_annotations, parse_detections, Subset};
use hkd_core::experiment::{
    ablation_table, detect_all, evaluate_detections, run_seed, seed_table, verdict, Event, Metrics,
};
use hkd_core::nets::{Detector, DetectorConfig};
use hkd_core::training::{distill_student, train_teacher, FrozenTeacher};
use hkd_core::ParamStore;

use output::{metrics_tsv, write_file, StepLog};

/// Relative-error bound of the end-to-end gradient check.
const E2E_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "hkd", version, about)]
struct Cli {
    /// Run configuration (TOML). Unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for data, initialization and training; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Role {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and of the full
    /// detection loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Writes the synthetic train/test annotations (and optionally images).
    GenData {
        /// Also write every scene as a PPM image.
        #[arg(long)]
        images: bool,
    },
    /// Prints the parameter counts of both networks.
    Params,
    /// Trains the teacher detector.
    TrainTeacher,
    /// Trains a student with the configured distillation losses.
    Distill {
        /// Teacher checkpoint; defaults to `<out>/teacher.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Scores detections, either from files or by running a checkpoint on
    /// the synthetic test split.
    Eval {
        #[arg(long, requires = "gt", conflicts_with = "checkpoint")]
        dets: Option<PathBuf>,
        #[arg(long, requires = "dets")]
        gt: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Architecture of the checkpoint.
        #[arg(long, value_enum, default_value_t = Role::Student)]
        role: Role,
    },
    /// Teacher plus all eight distillation configurations for each seed.
    Ablate,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match cli.command {
        Command::Gradcheck { instances } => gradcheck(&cfg, instances, cli.seed.unwrap_or(0)),
        Command::GenData { images } => gen_data(&cfg, images),
        Command::Params => print_params(&cfg),
        Command::TrainTeacher => teacher(&cfg),
        Command::Distill { teacher } => distill(&cfg, teacher),
        Command::Eval {
            dets,
            gt,
            checkpoint,
            role,
        } => match (dets, gt, checkpoint) {
            (Some(d), Some(g), None) => eval_files(&cfg, &d, &g),
            (None, None, Some(c)) => eval_checkpoint(&cfg, &c, role),
            _ => bail!("eval needs either --dets and --gt, or --checkpoint"),
        },
        Command::Ablate => ablate(&cfg),
    }
}

fn gradcheck(cfg: &RunConfig, instances: usize, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let mut report = String::from("check\tinstances\tmax_rel_error\ttolerance\tpassed\n");
    let mut ok = true;
    for c in op_suite(instances, seed)? {
        println!(
            "{:<24} {:>3} instances  max rel err {:.3e}  {}",
            c.name,
            c.instances,
            c.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
        report += &format!(
            "{}\t{}\t{:e}\t{:e}\t{}\n",
            c.name,
            c.instances,
            c.max_rel_error,
            c.tolerance,
            c.passed()
        );
        ok &= c.passed();
    }
    let rel = end_to_end_gradcheck(seed)?;
    let e2e_ok = rel < E2E_TOLERANCE;
    println!(
        "{:<24} {:>3} instances  max rel err {:.3e}  {}",
        "detector_loss_64x64",
        1,
        rel,
        if e2e_ok { "ok" } else { "FAIL" }
    );
    report += &format!("detector_loss_64x64\t1\t{rel:e}\t{E2E_TOLERANCE:e}\t{e2e_ok}\n");
    write_file(&cfg.out_dir.join("gradcheck.tsv"), &report)?;
    println!("gradient checks finished in {:.1}s", t0.elapsed().as_secs_f64());
    if !(ok && e2e_ok) {
        bail!("gradient check failed");
    }
    Ok(())
}

/// RPN plus detection loss of a fresh student on one 64×64 scene, checked
/// against finite differences on a spread of backbone and pyramid weights.
fn end_to_end_gradcheck(seed: u64) -> Result<f64> {
    let scene = generate_scene(
        &SceneParams {
            height: 64,
            width: 64,
            max_height: 40.0,
            ..SceneParams::default()
        },
        seed,
        0,
    );
    let cfg = RunConfig::default();
    let det = Detector::new(cfg.student_detector(), seed)?;
    let names = ["backbone.stem.w", "backbone.s2.b0.w", "backbone.s4.b0.w", "fpn.lat3.w"];
    Ok(det.loss_gradcheck(&scene.batch(), &scene.boxes(), &names, 12)?)
}

fn gen_data(cfg: &RunConfig, images: bool) -> Result<()> {
    let data = generate_dataset(&cfg.data)?;
    let dir = cfg.out_dir.join("data");
    for (split, scenes) in [("train", &data.train), ("test", &data.test)] {
        write_file(&dir.join(format!("{split}_gt.txt")), output::annotations(scenes))?;
        if images {
            let img_dir = dir.join(split);
            std::fs::create_dir_all(&img_dir)?;
            for (i, s) in scenes.iter().enumerate() {
                std::fs::write(img_dir.join(format!("{i:04}.ppm")), s.to_ppm())?;
            }
        }
    }
    println!(
        "wrote {} train and {} test scenes to {}",
        data.train.len(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}

fn print_params(cfg: &RunConfig) -> Result<()> {
    let t = cfg.teacher_detector().num_params()?;
    let s = cfg.student_detector().num_params()?;
    println!("parameters: teacher {t}, student {s}, ratio {:.2}", t as f64 / s as f64);
    Ok(())
}

fn print_metrics(name: &str, m: &Metrics) {
    println!(
        "{name}: MR-reasonable {:.2}%  MR-small {:.2}%",
        100.0 * m.mr_reasonable,
        100.0 * m.mr_small
    );
}

fn teacher(cfg: &RunConfig) -> Result<()> {
    print_params(cfg)?;
    let data = generate_dataset(&cfg.data)?;
    let mut log = StepLog::create(&cfg.out_dir.join("teacher_steps.jsonl"))?;
    let out = train_teacher(cfg.teacher_detector(), &data.train, &cfg.teacher_train, &mut |r| {
        log.write(r)
    })?;
    log.finish()?;
    write_file(&cfg.out_dir.join("teacher_epochs.tsv"), output::epochs_tsv(&out.epochs))?;
    out.detector.params.save(&cfg.out_dir.join("teacher.ckpt"))?;
    let m = finish_model(cfg, &out.detector, &data, "teacher")?;
    print_metrics("teacher", &m);
    Ok(())
}

/// Evaluates a trained model on the test split and writes its metrics.
fn finish_model(cfg: &RunConfig, det: &Detector, data: &Dataset, name: &str) -> Result<Metrics> {
    let dets = detect_all(det, &data.test)?;
    let m = evaluate_detections(&dets, &data.test, &cfg.eval)?;
    write_file(&cfg.out_dir.join(format!("{name}_metrics.tsv")), metrics_tsv(&m))?;
    write_file(
        &cfg.out_dir.join(format!("{name}_detections.txt")),
        output::detections(&dets),
    )?;
    Ok(m)
}

fn load_detector(config: DetectorConfig, path: &Path) -> Result<Detector> {
    let params = ParamStore::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let expected = config.num_params()?;
    if params.num_scalars() != expected {
        bail!(
            "{} holds {} parameters, the configured network has {expected}",
            path.display(),
            params.num_scalars()
        );
    }
    Ok(Detector::with_params(config, params))
}

fn distill(cfg: &RunConfig, teacher: Option<PathBuf>) -> Result<()> {
    let path = teacher.unwrap_or_else(|| cfg.out_dir.join("teacher.ckpt"));
    let teacher = load_detector(cfg.teacher_detector(), &path)?;
    let data = generate_dataset(&cfg.data)?;
    let mut frozen = FrozenTeacher::new(teacher);
    let mut log = StepLog::create(&cfg.out_dir.join("student_steps.jsonl"))?;
    let out = distill_student(
        cfg.student_detector(),
        &mut frozen,
        &data.train,
        &cfg.student_train,
        &mut |r| log.write(r),
    )?;
    log.finish()?;
    write_file(&cfg.out_dir.join("student_epochs.tsv"), output::epochs_tsv(&out.epochs))?;
    let ckpt = cfg.out_dir.join("student.ckpt");
    out.detector.params.save(&ckpt)?;
    let m = finish_model(cfg, &out.detector, &data, "student")?;
    print_metrics("student", &m);
    println!("checkpoint {} sha256 {}", ckpt.display(), out.detector.params.digest());
    Ok(())
}

fn eval_files(cfg: &RunConfig, dets: &Path, gt: &Path) -> Result<()> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let gts = parse_annotations(&read(gt)?, gt)?;
    let mut dets = parse_detections(&read(dets)?, dets)?;
    if let Some(id) = dets.keys().find(|id| !gts.contains_key(id)) {
        bail!("detections reference image {id}, which has no ground-truth entry");
    }
    let ids: Vec<usize> = gts.keys().copied().collect();
    let gts: Vec<_> = ids.iter().map(|id| gts[id].clone()).collect();
    let dets: Vec<_> = ids.iter().map(|id| dets.remove(id).unwrap_or_default()).collect();
    report_curves(cfg, &dets, &gts)
}

fn report_curves(cfg: &RunConfig, dets: &[Vec<hkd_core::Detection>], gts: &[Vec<hkd_core::eval::GTBox>]) -> Result<()> {
    let mut table = String::from("subset\tMR\n");
    for subset in Subset::ALL {
        let has_gt = gts
            .iter()
            .flatten()
            .any(|g| !g.ignore && subset.contains(g, cfg.eval.scale));
        if !has_gt {
            println!("{}: no ground truth", subset.name());
            table += &format!("{}\tnan\n", subset.name());
            continue;
        }
        let curve = evaluate(dets, gts, subset, cfg.eval.scale, cfg.eval.iou)?;
        write_file(
            &cfg.out_dir.join(format!("curve_{}.tsv", subset.name())),
            curve.to_tsv(),
        )?;
        println!("{}: MR {:.4}", subset.name(), curve.log_avg_mr);
        table += &format!("{}\t{}\n", subset.name(), curve.log_avg_mr);
    }
    write_file(&cfg.out_dir.join("eval_metrics.tsv"), &table)
}

fn eval_checkpoint(cfg: &RunConfig, path: &Path, role: Role) -> Result<()> {
    let config = match role {
        Role::Teacher => cfg.teacher_detector(),
        Role::Student => cfg.student_detector(),
    };
    let det = load_detector(config, path)?;
    let data = generate_dataset(&cfg.data)?;
    let dets = detect_all(&det, &data.test)?;
    let gts: Vec<_> = data.test.iter().map(|s| s.annotations.clone()).collect();
    write_file(&cfg.out_dir.join("eval_detections.txt"), output::detections(&dets))?;
    report_curves(cfg, &dets, &gts)
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    print_params(cfg)?;
    let first = cfg.data.seed;
    let mut reports = Vec::new();
    for seed in first..first + cfg.ablation_seeds as u64 {
        let t0 = Instant::now();
        let run = cfg.with_seed(seed);
        let dir = cfg.out_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir)?;
        let mut log: Option<StepLog> = None;
        let open = |log: &mut Option<StepLog>, name: &str| -> hkd_core::Result<()> {
            if log.is_none() {
                *log = Some(StepLog::create(&dir.join(format!("{name}_steps.jsonl")))?);
            }
            Ok(())
        };
        let report = run_seed(&run, &mut |ev| {
            match ev {
                Event::TeacherStep(r) => {
                    open(&mut log, "teacher")?;
                    log.as_mut().expect("opened").write(r)?;
                }
                Event::StudentStep(i, r) => {
                    open(&mut log, &format!("row{}", i + 1))?;
                    log.as_mut().expect("opened").write(r)?;
                }
                Event::TeacherDone(det, m) => {
                    finish_log(&mut log)?;
                    det.params.save(&dir.join("teacher.ckpt"))?;
                    eprintln!(
                        "seed {seed} teacher: MR-reasonable {:.2}% ({:.0}s)",
                        100.0 * m.mr_reasonable,
                        t0.elapsed().as_secs_f64()
                    );
                }
                Event::StudentDone(i, det, row) => {
                    finish_log(&mut log)?;
                    det.params.save(&dir.join(format!("row{}.ckpt", i + 1)))?;
                    eprintln!(
                        "seed {seed} row {}: MR-reasonable {:.2}% ({:.0}s)",
                        i + 1,
                        100.0 * row.metrics.mr_reasonable,
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
            Ok(())
        })?;
        write_file(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        reports.push(report);
    }
    let table = ablation_table(&reports);
    write_file(&cfg.out_dir.join("ablation.tsv"), &table)?;
    write_file(&cfg.out_dir.join("seeds.tsv"), seed_table(&reports))?;
    let v = verdict(&reports);
    write_file(&cfg.out_dir.join("verdict.json"), &serde_json::to_string_pretty(&v)?)?;
    print!("{table}");
    println!(
        "full < baseline in {}/{} seeds; RD pyramid < RD single in {}/{}; gap to teacher shrinks in {}/{}",
        v.full_beats_baseline, v.seeds, v.pyramid_rd_beats_single, v.seeds, v.gap_shrinks, v.seeds
    );
    Ok(())
}

fn finish_log(log: &mut Option<StepLog>) -> hkd_core::Result<()> {
    match log.take() {
        Some(l) => l.finish(),
        None => Ok(()),
    }
}
