//! Run configuration: one TOML file fixes the dataset, both networks, both
//! training phases and the evaluation protocol.
//!
//! Files only need the keys they change. Everything else keeps the default,
//! so `student_train.distill.lambda_rd = 10.0` is a complete config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetParams;
use crate::error::{Error, Result};
use crate::eval::MATCH_IOU;
use crate::nets::{DetectorConfig, NetConfig, Role};
use crate::roi::RoiMode;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Multiplier on the benchmark's pixel-height thresholds.
    pub scale: f64,
    pub iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scale: 0.25,
            iou: MATCH_IOU,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Number of consecutive seeds, starting at the configured one, that
    /// the ablation runs.
    pub ablation_seeds: usize,
    pub data: DatasetParams,
    pub teacher: NetConfig,
    pub student: NetConfig,
    pub teacher_train: TrainConfig,
    /// Student training; its `distill` table selects the losses.
    pub student_train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            ablation_seeds: 5,
            data: DatasetParams::default(),
            teacher: NetConfig::default_teacher(),
            student: NetConfig::default_student(),
            teacher_train: TrainConfig::default(),
            student_train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses a config, filling unspecified keys from the defaults.
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        };
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| err(e.to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, over);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        if self.teacher.role != Role::Teacher || self.student.role != Role::Student {
            return Err(Error::Config("teacher and student roles are swapped".into()));
        }
        if self.teacher.pyramid_width != self.student.pyramid_width
            || self.teacher.logit_width != self.student.logit_width
        {
            return Err(Error::Config(
                "teacher and student must share pyramid_width and logit_width".into(),
            ));
        }
        if self.data.train == 0 {
            return Err(Error::Config("data.train must be positive".into()));
        }
        if !(self.eval.scale > 0.0 && (0.0..=1.0).contains(&self.eval.iou)) {
            return Err(Error::Config(
                "eval.scale must be positive and eval.iou in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Uses `seed` for the data, both initializations and both training
    /// loops.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.data.seed = seed;
        c.teacher_train.seed = seed;
        c.student_train.seed = seed;
        c
    }

    /// The teacher always crops from every pyramid level.
    pub fn teacher_detector(&self) -> DetectorConfig {
        DetectorConfig::new(self.teacher.clone(), RoiMode::Pyramid)
    }

    pub fn student_detector(&self) -> DetectorConfig {
        DetectorConfig::new(
            self.student.clone(),
            RoiMode::from_flag(self.student_train.distill.pyramid_roi),
        )
    }
}
