//! Teacher and student detector networks: backbone, FPN, RPN and the
//! two-FC second-stage head.

mod backbone;
mod detector;
mod fpn;
mod head;
mod rpn;

pub use backbone::{backbone_forward, BackboneFeatures};
pub use detector::{Detector, DetectorConfig, ForwardPass, SupervisedPass};
pub use fpn::fpn_forward;
pub use head::{detection_loss, head_forward, sample_rois, HeadOutput, RoiSampleConfig, SampledRois};
pub use rpn::{
    assign_anchors, generate_anchors, generate_proposals, rpn_forward, rpn_loss, AnchorConfig, AnchorLabels, Anchors,
    ProposalParams, RpnLevelOutput, RpnOutput, RpnSampleConfig,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::roi::{RoiAlignConfig, RoiMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Architecture of one detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub role: Role,
    /// Channel widths of C2..C5.
    pub widths: [usize; 4],
    /// Conv blocks per stage; blocks after the first are residual.
    pub blocks: [usize; 4],
    /// Channel width `d` shared by every pyramid level.
    pub pyramid_width: usize,
    /// Width of the first FC layer of the second-stage head.
    pub head_hidden: usize,
    /// Width of the second FC layer, whose activation is the logit feature.
    pub logit_width: usize,
    /// Hidden width of the shared RPN conv.
    pub rpn_hidden: usize,
}

impl NetConfig {
    pub fn default_teacher() -> Self {
        NetConfig {
            role: Role::Teacher,
            widths: [16, 32, 64, 128],
            blocks: [2, 2, 2, 2],
            pyramid_width: 32,
            head_hidden: 128,
            logit_width: 32,
            rpn_hidden: 16,
        }
    }

    pub fn default_student() -> Self {
        NetConfig {
            role: Role::Student,
            widths: [8, 16, 32, 64],
            blocks: [1, 1, 1, 1],
            pyramid_width: 32,
            head_hidden: 32,
            logit_width: 32,
            rpn_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.widths.iter().chain(&self.blocks).all(|&v| v > 0)
            && self.pyramid_width > 0
            && self.head_hidden > 0
            && self.logit_width > 0
            && self.rpn_hidden > 0;
        if !positive {
            return Err(Error::Config(format!(
                "{:?} net has a zero width or block count",
                self.role
            )));
        }
        Ok(())
    }

    /// Flattened input width of the head for a given crop mode.
    pub fn head_input(&self, mode: RoiMode, roi: &RoiAlignConfig) -> usize {
        mode.channels(self.pyramid_width) * roi.output_size * roi.output_size
    }

    /// Fresh He-initialized parameters.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        mode: RoiMode,
        roi: &RoiAlignConfig,
        anchors_per_location: usize,
        rng: &mut R,
    ) -> Result<ParamStore> {
        self.validate()?;
        let mut p = ParamStore::new();
        let conv =
            |p: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, std: Option<f64>, rng: &mut R| {
                let fan_in = (cin * k * k) as f64;
                let std = std.unwrap_or((2.0 / fan_in).sqrt());
                p.insert(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
                p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
            };
        conv(&mut p, "backbone.stem", 3, self.widths[0], 3, None, rng);
        let mut cin = self.widths[0];
        for (s, (&w, &n)) in self.widths.iter().zip(&self.blocks).enumerate() {
            for b in 0..n {
                let inputs = if b == 0 { cin } else { w };
                conv(&mut p, &format!("backbone.s{}.b{b}", s + 1), inputs, w, 3, None, rng);
            }
            cin = w;
        }
        let d = self.pyramid_width;
        for (l, &w) in (2..=5).zip(&self.widths) {
            conv(
                &mut p,
                &format!("fpn.lat{l}"),
                w,
                d,
                1,
                Some((1.0 / w as f64).sqrt()),
                rng,
            );
        }
        for l in 2..=4 {
            conv(
                &mut p,
                &format!("fpn.smooth{l}"),
                d,
                d,
                3,
                Some((1.0 / (9 * d) as f64).sqrt()),
                rng,
            );
        }
        conv(&mut p, "rpn.conv", d, self.rpn_hidden, 3, None, rng);
        let a = anchors_per_location;
        conv(&mut p, "rpn.obj", self.rpn_hidden, a, 1, Some(0.01), rng);
        conv(&mut p, "rpn.delta", self.rpn_hidden, 4 * a, 1, Some(0.01), rng);
        let fc = |p: &mut ParamStore, name: &str, din: usize, dout: usize, std: f64, rng: &mut R| {
            p.insert(format!("{name}.w"), Tensor::randn(&[din, dout], std, rng));
            p.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
        };
        let din = self.head_input(mode, roi);
        fc(
            &mut p,
            "head.fc1",
            din,
            self.head_hidden,
            (2.0 / din as f64).sqrt(),
            rng,
        );
        fc(
            &mut p,
            "head.fc2",
            self.head_hidden,
            self.logit_width,
            (2.0 / self.head_hidden as f64).sqrt(),
            rng,
        );
        fc(&mut p, "head.cls", self.logit_width, 2, 0.01, rng);
        fc(&mut p, "head.box", self.logit_width, 4, 0.001, rng);
        Ok(p)
    }
}

/// Pyramid levels P2..P5 on one graph, all `[1, d, H_i, W_i]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

/// Parameter count of a configuration, without materializing weights.
pub fn count_params(
    cfg: &NetConfig,
    mode: RoiMode,
    roi: &RoiAlignConfig,
    anchors_per_location: usize,
) -> Result<usize> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(cfg
        .init_params(mode, roi, anchors_per_location, &mut rng)?
        .num_scalars())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_is_at_least_four_times_larger() {
        let roi = RoiAlignConfig::default();
        let t = count_params(&NetConfig::default_teacher(), RoiMode::Pyramid, &roi, 1).unwrap();
        let s = count_params(&NetConfig::default_student(), RoiMode::Pyramid, &roi, 1).unwrap();
        assert!(t as f64 / s as f64 >= 4.0, "teacher {t}, student {s}");
    }

    #[test]
    fn logit_widths_match() {
        assert_eq!(
            NetConfig::default_teacher().logit_width,
            NetConfig::default_student().logit_width
        );
        assert_eq!(
            NetConfig::default_teacher().pyramid_width,
            NetConfig::default_student().pyramid_width
        );
    }
}
