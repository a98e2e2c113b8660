//! Brute-force reference implementations of the numeric kernels. Shared by
//! the oracle tests and the acceptance suite.

use hkd_core::autodiff::Graph;
use hkd_core::boxes::{nms, BBox, ScoredBox};
use hkd_core::distill::{logit_distill_loss, pyramid_distill_loss, region_distill_loss};
use hkd_core::nets::FeaturePyramid;
use hkd_core::roi::{roi_align, RoiAlignConfig};
use hkd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 50;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst deviation of one op from its oracle, as `|got − want| / (1 + |want|)`.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: &'static str, tol: f64) -> Self {
        Check {
            name,
            instances: 0,
            max_err: 0.0,
            tol,
        }
    }

    fn record(&mut self, got: &[f64], want: &[f64]) {
        self.instances += 1;
        if got.len() != want.len() {
            self.max_err = f64::INFINITY;
            return;
        }
        for (g, w) in got.iter().zip(want) {
            let e = (g - w).abs() / (1.0 + w.abs());
            self.max_err = if e.is_nan() { f64::INFINITY } else { self.max_err.max(e) };
        }
    }

    fn require(&mut self, ok: bool) {
        if !ok {
            self.max_err = f64::INFINITY;
        }
    }

    fn record_exact(&mut self, ok: bool) {
        self.instances += 1;
        self.require(ok);
    }

    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.max_err <= self.tol
    }
}

/// Every oracle comparison, each on its own stream derived from `seed`.
pub fn all(seed: u64) -> Vec<Check> {
    let mut out = vec![
        conv2d(seed),
        linear(seed + 1),
        bilinear_sample(seed + 2),
        roi_align_op(seed + 3),
        nms_op(seed + 4),
    ];
    out.extend(distillation(seed + 5));
    out
}

pub fn conv2d(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut c_ = Check::new("conv2d", 1e-10);
    while c_.instances < INSTANCES {
        let c = r.gen_range(1..4);
        let k_out = r.gen_range(1..4);
        let k = [1, 3][r.gen_range(0..2)];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        // input sides that give an integral output size
        let oh = r.gen_range(1..5);
        let ow = r.gen_range(1..5);
        let (span_h, span_w) = ((oh - 1) * stride + k, (ow - 1) * stride + k);
        if span_h <= 2 * pad || span_w <= 2 * pad {
            continue;
        }
        let (h, w) = (span_h - 2 * pad, span_w - 2 * pad);
        let x = Tensor::randn(&[1, c, h, w], 1.0, &mut r);
        let wt = Tensor::randn(&[k_out, c, k, k], 1.0, &mut r);
        let b = Tensor::randn(&[k_out], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        c_.require(g.shape(y) == [1, k_out, oh, ow]);

        let (xd, wd, bd) = (x.data(), wt.data(), b.data());
        let mut want = vec![0.0; k_out * oh * ow];
        for o in 0..k_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[o];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wd[((o * c + ci) * k + ki) * k + kj]
                                        * xd[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    want[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        c_.record(g.value(y).data(), &want);
    }
    c_
}

pub fn linear(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut c_ = Check::new("linear", 1e-10);
    while c_.instances < INSTANCES {
        let (n, d, m) = (r.gen_range(1..6), r.gen_range(1..9), r.gen_range(1..7));
        let x = Tensor::randn(&[n, d], 1.0, &mut r);
        let w = Tensor::randn(&[d, m], 1.0, &mut r);
        let b = Tensor::randn(&[m], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, bv).unwrap();
        let mut want = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = b.data()[j];
                for k in 0..d {
                    acc += x.data()[i * d + k] * w.data()[k * m + j];
                }
                want[i * m + j] = acc;
            }
        }
        c_.record(g.value(y).data(), &want);
    }
    c_
}

/// Bilinear interpolation as a sum of tent functions over every grid point,
/// after clamping the query to the grid.
fn tent_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let ty = (1.0 - (y - i as f64).abs()).max(0.0);
            let tx = (1.0 - (x - j as f64).abs()).max(0.0);
            acc += ty * tx * plane[i * w + j];
        }
    }
    acc
}

pub fn bilinear_sample(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut c_ = Check::new("bilinear_sample", 1e-12);
    while c_.instances < INSTANCES {
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..7), r.gen_range(1..7));
        let f = Tensor::randn(&[c, h, w], 1.0, &mut r);
        // include points outside the map to exercise clamping
        let x = r.gen_range(-1.0..w as f64 + 1.0);
        let y = r.gen_range(-1.0..h as f64 + 1.0);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let s = g.bilinear_sample(fv, x, y).unwrap();
        let want: Vec<f64> = (0..c)
            .map(|ci| tent_sample(&f.data()[ci * h * w..(ci + 1) * h * w], h, w, y, x))
            .collect();
        c_.record(g.value(s).data(), &want);
    }
    c_
}

pub fn roi_align_op(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut c_ = Check::new("roi_align", 1e-10);
    let cfg = RoiAlignConfig::default();
    while c_.instances < INSTANCES {
        let (c, h, w) = (r.gen_range(1..3), r.gen_range(2..9), r.gen_range(2..9));
        let stride = [4.0, 8.0][r.gen_range(0..2)];
        let f = Tensor::randn(&[1, c, h, w], 1.0, &mut r);
        let rois: Vec<BBox> = (0..r.gen_range(1..4))
            .map(|_| {
                let x1 = r.gen_range(-4.0..w as f64 * stride);
                let y1 = r.gen_range(-4.0..h as f64 * stride);
                BBox::new(x1, y1, x1 + r.gen_range(0.0..40.0), y1 + r.gen_range(0.0..60.0))
            })
            .collect();
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let out = roi_align(&mut g, fv, &rois, stride, &cfg).unwrap();
        let (s, n) = (cfg.output_size, cfg.samples);
        let mut want = Vec::new();
        for roi in &rois {
            let rw = ((roi.x2 - roi.x1) / stride).max(1e-6);
            let rh = ((roi.y2 - roi.y1) / stride).max(1e-6);
            for ci in 0..c {
                let plane = &f.data()[ci * h * w..(ci + 1) * h * w];
                for by in 0..s {
                    for bx in 0..s {
                        let mut acc = 0.0;
                        for sy in 0..n {
                            for sx in 0..n {
                                let y = roi.y1 / stride + rh * (by as f64 + (sy as f64 + 0.5) / n as f64) / s as f64;
                                let x = roi.x1 / stride + rw * (bx as f64 + (sx as f64 + 0.5) / n as f64) / s as f64;
                                acc += tent_sample(plane, h, w, y, x);
                            }
                        }
                        want.push(acc / (n * n) as f64);
                    }
                }
            }
        }
        c_.record(g.value(out).data(), &want);
    }
    c_
}

pub fn nms_op(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut c_ = Check::new("nms", 0.0);
    while c_.instances < INSTANCES {
        let boxes: Vec<ScoredBox> = (0..50)
            .map(|_| {
                let (x, y) = (r.gen_range(0.0..60.0), r.gen_range(0.0..60.0));
                ScoredBox {
                    bbox: BBox::new(x, y, x + r.gen_range(2.0..20.0), y + r.gen_range(2.0..20.0)),
                    // coarse scores so that ties occur
                    score: (r.gen_range(0.0..1.0f64) * 20.0).round() / 20.0,
                }
            })
            .collect();
        let thresh = r.gen_range(0.2..0.8);
        // rank by score, earlier index first on ties
        let mut rank: Vec<usize> = (0..boxes.len()).collect();
        for i in 0..rank.len() {
            for j in 0..rank.len() - 1 - i {
                let (a, b) = (rank[j], rank[j + 1]);
                if boxes[b].score > boxes[a].score {
                    rank.swap(j, j + 1);
                }
            }
        }
        let mut suppressed = vec![false; boxes.len()];
        let mut want = Vec::new();
        for (pos, &i) in rank.iter().enumerate() {
            if suppressed[i] {
                continue;
            }
            want.push(i);
            for &j in &rank[pos + 1..] {
                if boxes[i].bbox.iou(&boxes[j].bbox) > thresh {
                    suppressed[j] = true;
                }
            }
        }
        c_.record_exact(nms(&boxes, thresh) == want);
    }
    c_
}

fn flat_oracle(pairs: &[(&Tensor, &Tensor)]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in pairs {
        for (x, y) in a.data().iter().zip(b.data()) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn distillation(seed: u64) -> [Check; 3] {
    let mut r = rng(seed);
    let mut c_pd = Check::new("pyramid_distill_loss", 1e-12);
    let mut c_rd = Check::new("region_distill_loss", 1e-12);
    let mut c_ld = Check::new("logit_distill_loss", 1e-12);
    while c_pd.instances < INSTANCES {
        let d = r.gen_range(1..4);
        let sizes = [(8, 12), (4, 6), (2, 3), (1, 2)];
        let s_lv: Vec<Tensor> = sizes
            .iter()
            .map(|&(h, w)| Tensor::randn(&[1, d, h, w], 1.0, &mut r))
            .collect();
        let t_lv: Vec<Tensor> = sizes
            .iter()
            .map(|&(h, w)| Tensor::randn(&[1, d, h, w], 1.0, &mut r))
            .collect();
        let mut g = Graph::new();
        let sv: Vec<_> = s_lv.iter().map(|t| g.param(t.clone())).collect();
        let tv: Vec<_> = t_lv.iter().map(|t| g.constant(t.clone())).collect();
        let sp = FeaturePyramid {
            levels: [sv[0], sv[1], sv[2], sv[3]],
        };
        let tp = FeaturePyramid {
            levels: [tv[0], tv[1], tv[2], tv[3]],
        };
        let pd = pyramid_distill_loss(&mut g, &sp, &tp).unwrap();
        let pairs: Vec<_> = s_lv.iter().zip(&t_lv).collect();
        let want = flat_oracle(&pairs);
        c_pd.record(&[g.value(pd).item()], &[want]);

        let rois = r.gen_range(1..5);
        let width = r.gen_range(1..4) * d;
        let sr = Tensor::randn(&[rois, width, 7, 7], 1.0, &mut r);
        let tr = Tensor::randn(&[rois, width, 7, 7], 1.0, &mut r);
        let (a, b) = (g.param(sr.clone()), g.constant(tr.clone()));
        let rd = region_distill_loss(&mut g, &[a], &[b]).unwrap();
        let want = flat_oracle(&[(&sr, &tr)]);
        c_rd.record(&[g.value(rd).item()], &[want]);

        let sl = Tensor::randn(&[rois, 8], 1.0, &mut r);
        let tl = Tensor::randn(&[rois, 8], 1.0, &mut r);
        let (a, b) = (g.param(sl.clone()), g.constant(tl.clone()));
        let ld = logit_distill_loss(&mut g, &[a], &[b]).unwrap();
        // mean over each vector, then over proposals
        let per: Vec<f64> = (0..rois)
            .map(|i| {
                (0..8)
                    .map(|j| (sl.data()[i * 8 + j] - tl.data()[i * 8 + j]).powi(2))
                    .sum::<f64>()
                    / 8.0
            })
            .collect();
        let want = per.iter().sum::<f64>() / rois as f64;
        c_ld.record(&[g.value(ld).item()], &[want]);
    }
    [c_pd, c_rd, c_ld]
}
