//! Synthetic pedestrian scenes.
//!
//! Each scene is a textured background with a few upright, pedestrian-shaped
//! figures (head, torso, two legs), some partly covered by an occluder bar,
//! plus non-pedestrian clutter. Figures never overlap each other's margins,
//! so an occluder only ever covers its own figure and visibility follows
//! exactly from the bar geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::eval::GTBox;
use crate::tensor::Tensor;

/// Gap kept free around every figure; occluders extend into it.
const MARGIN: f64 = 2.0;
const PLACEMENT_TRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub min_figures: usize,
    pub max_figures: usize,
    /// Figure heights are log-uniform over `[min_height, max_height]`.
    pub min_height: f64,
    pub max_height: f64,
    /// Figure width over height.
    pub aspect: f64,
    /// Probability that a figure gets an occluder.
    pub occlusion_rate: f64,
    /// Occluders cover a fraction of the figure drawn from this range.
    pub min_occlusion: f64,
    pub max_occlusion: f64,
    /// Upper bound on non-pedestrian clutter objects per scene.
    pub max_clutter: usize,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 96,
            width: 160,
            min_figures: 1,
            max_figures: 3,
            min_height: 10.0,
            max_height: 48.0,
            aspect: 0.41,
            occlusion_rate: 0.4,
            min_occlusion: 0.1,
            max_occlusion: 0.75,
            max_clutter: 2,
            noise: 0.04,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("scene parameters: {m}")));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return fail("image sides must be positive multiples of 32");
        }
        if self.max_figures == 0 || self.min_figures > self.max_figures {
            return fail("need 1 <= max_figures and min_figures <= max_figures");
        }
        if !(self.min_height >= 2.0 && self.min_height <= self.max_height) {
            return fail("need 2 <= min_height <= max_height");
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return fail("aspect must be positive");
        }
        if self.max_height + 2.0 * MARGIN > self.height as f64
            || self.max_height * self.aspect + 2.0 * MARGIN > self.width as f64
        {
            return fail("largest figure does not fit in the image");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return fail("occlusion_rate must lie in [0, 1]");
        }
        if !(0.0 <= self.min_occlusion && self.min_occlusion <= self.max_occlusion && self.max_occlusion < 1.0) {
            return fail("need 0 <= min_occlusion <= max_occlusion < 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be nonnegative");
        }
        Ok(())
    }
}

/// Scene counts, generator parameters and master seed of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub scene: SceneParams,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            train: 400,
            test: 100,
            seed: 0,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]` with values roughly in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<GTBox>,
}

impl SyntheticScene {
    /// The image as a one-image batch `[1, 3, H, W]`.
    pub fn batch(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.image.shape());
        self.image.clone().reshape(&shape).expect("same element count")
    }

    /// Binary PPM rendering, values clamped to `[0, 1]`.
    pub fn to_ppm(&self) -> Vec<u8> {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        let d = self.image.data();
        for i in 0..h * w {
            for c in 0..3 {
                out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

/// Generates the train and test splits. Scene `i` (test scenes continue the
/// numbering after the training scenes) draws from its own ChaCha stream,
/// so any scene can be regenerated on its own.
pub fn generate_dataset(params: &DatasetParams) -> Result<Dataset> {
    params.scene.validate()?;
    let scene = |i: usize| generate_scene(&params.scene, params.seed, i as u64);
    Ok(Dataset {
        train: (0..params.train).map(scene).collect(),
        test: (params.train..params.train + params.test).map(scene).collect(),
    })
}

/// Scene number `index` of the dataset with master seed `seed`.
pub fn generate_scene(p: &SceneParams, seed: u64, index: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut canvas = Canvas::background(p, &mut rng);

    let n = rng.gen_range(p.min_figures..=p.max_figures);
    let mut taken: Vec<BBox> = Vec::new();
    let mut annotations = Vec::new();
    for _ in 0..n {
        let Some(b) = place(p, &taken, &mut rng) else { break };
        taken.push(expand(&b, MARGIN));
        let visibility = canvas.figure(&b, p, &mut rng);
        annotations.push(GTBox::new(b, visibility));
    }
    let clutter = rng.gen_range(0..=p.max_clutter);
    for _ in 0..clutter {
        canvas.clutter(p, &taken, &mut rng);
    }
    canvas.add_noise(p.noise, &mut rng);
    SyntheticScene {
        image: Tensor::new(vec![3, p.height, p.width], canvas.data).expect("finite pixels"),
        annotations,
    }
}

fn expand(b: &BBox, m: f64) -> BBox {
    BBox::new(b.x1 - m, b.y1 - m, b.x2 + m, b.y2 + m)
}

/// A figure box that keeps its margin clear of earlier figures.
fn place<R: Rng>(p: &SceneParams, taken: &[BBox], rng: &mut R) -> Option<BBox> {
    let (lo, hi) = (p.min_height.ln(), p.max_height.ln());
    for _ in 0..PLACEMENT_TRIES {
        let h = if hi > lo {
            rng.gen_range(lo..hi).exp()
        } else {
            p.min_height
        };
        let w = h * p.aspect;
        let x1 = rng.gen_range(MARGIN..=p.width as f64 - MARGIN - w);
        let y1 = rng.gen_range(MARGIN..=p.height as f64 - MARGIN - h);
        let b = BBox::new(x1, y1, x1 + w, y1 + h);
        let grown = expand(&b, MARGIN);
        if taken.iter().all(|t| t.intersection(&grown) == 0.0) {
            return Some(b);
        }
    }
    None
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    /// Smooth per-channel gradient plus a few low-frequency waves.
    fn background<R: Rng>(p: &SceneParams, rng: &mut R) -> Self {
        let (h, w) = (p.height, p.width);
        let base = random_color(rng, 0.35, 0.65);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(-0.15..0.15),
                    rng.gen_range(0.02..0.12),
                    rng.gen_range(0.02..0.12),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let wave: f64 = waves
                        .iter()
                        .enumerate()
                        .map(|(k, &(a, fx, fy, ph))| {
                            let tilt = if (k + c) % 2 == 0 { 1.0 } else { -1.0 };
                            a * (fx * x as f64 + tilt * fy * y as f64 + ph).sin()
                        })
                        .sum();
                    data[(c * h + y) * w + x] = base[c] + wave;
                }
            }
        }
        Canvas { h, w, data }
    }

    /// Fills the pixels whose centers fall inside `b`.
    fn fill(&mut self, b: &BBox, color: [f64; 3]) {
        let xs = (b.x1 - 0.5).ceil().max(0.0) as usize..((b.x2 - 0.5).ceil().max(0.0) as usize).min(self.w);
        let ys = (b.y1 - 0.5).ceil().max(0.0) as usize..((b.y2 - 0.5).ceil().max(0.0) as usize).min(self.h);
        for (c, &v) in color.iter().enumerate() {
            for y in ys.clone() {
                let row = (c * self.h + y) * self.w;
                self.data[row + xs.start..row + xs.end].fill(v);
            }
        }
    }

    fn ellipse(&mut self, b: &BBox, color: [f64; 3]) {
        let (cx, cy) = b.center();
        let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
        for y in (b.y1.floor().max(0.0) as usize)..(b.y2.ceil() as usize).min(self.h) {
            for x in (b.x1.floor().max(0.0) as usize)..(b.x2.ceil() as usize).min(self.w) {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    for (c, &v) in color.iter().enumerate() {
                        self.data[(c * self.h + y) * self.w + x] = v;
                    }
                }
            }
        }
    }

    /// Draws a pedestrian in `b` and possibly an occluder over it; returns
    /// the figure's visible fraction.
    fn figure<R: Rng>(&mut self, b: &BBox, p: &SceneParams, rng: &mut R) -> f64 {
        let (w, h) = (b.width(), b.height());
        // dark figures on light backgrounds and the reverse
        let color = if rng.gen_bool(0.5) {
            random_color(rng, 0.0, 0.2)
        } else {
            random_color(rng, 0.8, 1.0)
        };
        let head = h * 0.16;
        self.ellipse(&BBox::new(b.x1 + 0.22 * w, b.y1, b.x2 - 0.22 * w, b.y1 + head), color);
        let hip = b.y1 + 0.55 * h;
        self.fill(&BBox::new(b.x1, b.y1 + head, b.x2, hip), color);
        let gap = 0.12 * w;
        let mid = b.x1 + 0.5 * w;
        self.fill(&BBox::new(b.x1 + 0.08 * w, hip, mid - 0.5 * gap, b.y2), color);
        self.fill(&BBox::new(mid + 0.5 * gap, hip, b.x2 - 0.08 * w, b.y2), color);

        if !rng.gen_bool(p.occlusion_rate) {
            return 1.0;
        }
        let frac = rng.gen_range(p.min_occlusion..=p.max_occlusion);
        let bar = if rng.gen_bool(0.7) {
            // from below, like a parked car or a railing
            BBox::new(b.x1 - MARGIN, b.y2 - frac * h, b.x2 + MARGIN, b.y2 + MARGIN)
        } else if rng.gen_bool(0.5) {
            BBox::new(b.x1 - MARGIN, b.y1 - MARGIN, b.x1 + frac * w, b.y2 + MARGIN)
        } else {
            BBox::new(b.x2 - frac * w, b.y1 - MARGIN, b.x2 + MARGIN, b.y2 + MARGIN)
        };
        self.fill(&bar, random_color(rng, 0.3, 0.7));
        1.0 - bar.intersection(b) / b.area()
    }

    /// A non-pedestrian object: a flat blob, a thin pole or a squat box.
    fn clutter<R: Rng>(&mut self, p: &SceneParams, taken: &[BBox], rng: &mut R) {
        for _ in 0..PLACEMENT_TRIES {
            let (bw, bh) = match rng.gen_range(0..3) {
                0 => (rng.gen_range(10.0..30.0), rng.gen_range(4.0..10.0)),
                1 => (rng.gen_range(1.5..3.0), rng.gen_range(15.0..50.0)),
                _ => (rng.gen_range(8.0..20.0), rng.gen_range(8.0..20.0)),
            };
            if bw >= p.width as f64 || bh >= p.height as f64 {
                continue;
            }
            let x1 = rng.gen_range(0.0..p.width as f64 - bw);
            let y1 = rng.gen_range(0.0..p.height as f64 - bh);
            let b = BBox::new(x1, y1, x1 + bw, y1 + bh);
            if taken.iter().all(|t| t.intersection(&b) == 0.0) {
                let color = random_color(rng, 0.0, 1.0);
                self.fill(&b, color);
                return;
            }
        }
    }

    fn add_noise<R: Rng>(&mut self, sigma: f64, rng: &mut R) {
        if sigma == 0.0 {
            return;
        }
        let normal = rand_distr::Normal::new(0.0, sigma).expect("valid sigma");
        for v in &mut self.data {
            *v += rng.sample(normal);
        }
    }
}
