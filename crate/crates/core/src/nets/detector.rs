use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{relative_error, DEFAULT_EPS};
use crate::autodiff::{Graph, Var};
use crate::boxes::{decode, nms, BBox, DeltaWeights, Detection, RoI, ScoredBox};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::roi::{region_features, RoiAlignConfig, RoiMode};
use crate::tensor::Tensor;

use super::{
    backbone_forward, detection_loss, fpn_forward, generate_anchors, generate_proposals, head_forward, rpn_forward,
    rpn_loss, sample_rois, AnchorConfig, FeaturePyramid, HeadOutput, NetConfig, ProposalParams, RoiSampleConfig,
    RpnOutput, RpnSampleConfig, SampledRois,
};

/// Everything needed to build and run one two-stage detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub net: NetConfig,
    pub roi_mode: RoiMode,
    pub roi: RoiAlignConfig,
    pub anchors: AnchorConfig,
    pub proposals: ProposalParams,
    pub rpn_sample: RpnSampleConfig,
    pub roi_sample: RoiSampleConfig,
    /// IoU threshold of the final per-image NMS.
    pub det_nms_iou: f64,
}

impl DetectorConfig {
    pub fn new(net: NetConfig, roi_mode: RoiMode) -> Self {
        DetectorConfig {
            net,
            roi_mode,
            roi: RoiAlignConfig::default(),
            anchors: AnchorConfig::default(),
            proposals: ProposalParams {
                pre_nms_k: 200,
                post_nms_k: 32,
                nms_iou: 0.7,
                min_size: 1.0,
            },
            rpn_sample: RpnSampleConfig::default(),
            roi_sample: RoiSampleConfig::default(),
            det_nms_iou: 0.5,
        }
    }

    pub fn num_params(&self) -> Result<usize> {
        super::count_params(&self.net, self.roi_mode, &self.roi, self.anchors.per_location())
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
}

/// First-stage outputs on a graph.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub pyramid: FeaturePyramid,
    pub rpn: RpnOutput,
}

/// A full supervised forward pass for one training image.
#[derive(Clone, Debug)]
pub struct SupervisedPass {
    pub forward: ForwardPass,
    pub sampled: SampledRois,
    pub regions: Var,
    pub head: HeadOutput,
    pub rpn_loss: Var,
    pub det_loss: Var,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .net
            .init_params(config.roi_mode, &config.roi, config.anchors.per_location(), &mut rng)?;
        Ok(Detector { config, params })
    }

    pub fn with_params(config: DetectorConfig, params: ParamStore) -> Self {
        Detector { config, params }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<ForwardPass> {
        let feats = backbone_forward(g, p, &self.config.net, image)?;
        let pyramid = fpn_forward(g, p, &feats)?;
        let rpn = rpn_forward(g, p, &pyramid)?;
        Ok(ForwardPass { pyramid, rpn })
    }

    pub fn proposals(&self, g: &Graph, fp: &ForwardPass, img_h: usize, img_w: usize) -> Result<Vec<RoI>> {
        let anchors = generate_anchors(img_h, img_w, &self.config.anchors);
        generate_proposals(g, &fp.rpn, &anchors, &self.config.proposals, img_w as f64, img_h as f64)
    }

    pub fn regions(&self, g: &mut Graph, pyr: &FeaturePyramid, rois: &[RoI]) -> Result<Var> {
        region_features(g, pyr, rois, self.config.roi_mode, &self.config.roi)
    }

    /// RPN loss, proposal sampling and detection loss for one image.
    pub fn supervised<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        image: Var,
        gts: &[BBox],
        rng: &mut R,
    ) -> Result<SupervisedPass> {
        let shape = g.shape(image).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let forward = self.forward(g, p, image)?;
        let anchors = generate_anchors(h, w, &self.config.anchors);
        let rpn_loss = rpn_loss(g, &forward.rpn, &anchors, gts, &self.config.rpn_sample, rng)?;
        let proposals = generate_proposals(g, &forward.rpn, &anchors, &self.config.proposals, w as f64, h as f64)?;
        let mut sampled = sample_rois(&proposals, gts, &self.config.roi_sample, rng);
        if sampled.rois.is_empty() {
            // no GT and no proposals: train the head on one whole-image background RoI
            sampled.rois.push(ScoredBox {
                bbox: BBox::new(0.0, 0.0, w as f64, h as f64),
                score: 0.0,
            });
            sampled.labels.push(0);
            sampled.targets.push(None);
        }
        let regions = self.regions(g, &forward.pyramid, &sampled.rois)?;
        let head = head_forward(g, p, regions)?;
        let det_loss = detection_loss(g, head.class_scores, head.box_deltas, &sampled.labels, &sampled.targets)?;
        Ok(SupervisedPass {
            forward,
            sampled,
            regions,
            head,
            rpn_loss,
            det_loss,
        })
    }

    /// Pedestrian detections for a `[1,3,H,W]` image, best first.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let fp = self.forward(&mut g, &p, x)?;
        let rois = self.proposals(&g, &fp, h, w)?;
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let regions = self.regions(&mut g, &fp.pyramid, &rois)?;
        let head = head_forward(&mut g, &p, regions)?;
        let probs = g.softmax(head.class_scores)?;
        let probs = g.value(probs).data();
        let deltas = g.value(head.box_deltas).data();
        let mut dets = Vec::with_capacity(rois.len());
        for (i, roi) in rois.iter().enumerate() {
            let d = [0, 1, 2, 3].map(|c| deltas[4 * i + c]);
            let b = decode(d, &roi.bbox, DeltaWeights::HEAD).clip(w as f64, h as f64);
            if b.is_valid() {
                dets.push(ScoredBox {
                    bbox: b,
                    score: probs[2 * i + 1],
                });
            }
        }
        let keep = nms(&dets, self.config.det_nms_iou);
        Ok(keep.into_iter().map(|i| dets[i]).collect())
    }

    /// Finite-difference check of the summed RPN and detection loss on one
    /// image w.r.t. the named parameters, probing at most `max_coords`
    /// entries of each. RoIs are sampled once at the unperturbed weights and
    /// then held fixed, matching backprop, which treats proposal coordinates
    /// as constants.
    pub fn loss_gradcheck(&self, image: &Tensor, gts: &[BBox], names: &[&str], max_coords: usize) -> Result<f64> {
        let sampled = {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(image.clone());
            self.supervised(&mut g, &p, x, gts, &mut ChaCha8Rng::seed_from_u64(0))?
                .sampled
        };
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let anchors = generate_anchors(h, w, &self.config.anchors);
        let inputs = names
            .iter()
            .map(|n| self.params.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        relative_error(&inputs, &[], DEFAULT_EPS, max_coords, |g, v| {
            let mut p = self.params.bind(g, false);
            for (n, &var) in names.iter().zip(v) {
                p.set(n, var)?;
            }
            let x = g.constant(image.clone());
            let fp = self.forward(g, &p, x)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let rpn = rpn_loss(g, &fp.rpn, &anchors, gts, &self.config.rpn_sample, &mut rng)?;
            let regions = self.regions(g, &fp.pyramid, &sampled.rois)?;
            let head = head_forward(g, &p, regions)?;
            let det = detection_loss(g, head.class_scores, head.box_deltas, &sampled.labels, &sampled.targets)?;
            g.add(rpn, det)
        })
    }
}
