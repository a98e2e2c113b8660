//! Files written by the commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use hkd_core::data::SyntheticScene;
use hkd_core::eval::{format_annotations, format_detections};
use hkd_core::experiment::Metrics;
use hkd_core::training::{EpochSummary, StepRecord};
use hkd_core::Detection;

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// One JSON object per optimizer step.
pub struct StepLog {
    out: BufWriter<File>,
}

impl StepLog {
    pub fn create(path: &Path) -> hkd_core::Result<Self> {
        Ok(StepLog {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, r: &StepRecord) -> hkd_core::Result<()> {
        serde_json::to_writer(&mut self.out, r).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> hkd_core::Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn epochs_tsv(epochs: &[EpochSummary]) -> String {
    let mut out = String::from("epoch\tlr\tsteps\tdet_loss\trpn_loss\tdistill\n");
    for e in epochs {
        out += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.epoch, e.lr, e.steps, e.det_loss, e.rpn_loss, e.distill
        );
    }
    out
}

pub fn metrics_tsv(m: &Metrics) -> String {
    format!("subset\tMR\nreasonable\t{}\nsmall\t{}\n", m.mr_reasonable, m.mr_small)
}

pub fn annotations(scenes: &[SyntheticScene]) -> String {
    format_annotations(scenes.iter().enumerate().map(|(i, s)| (i, s.annotations.as_slice())))
}

pub fn detections(dets: &[Vec<Detection>]) -> String {
    format_detections(dets.iter().enumerate().map(|(i, d)| (i, d.as_slice())))
}
