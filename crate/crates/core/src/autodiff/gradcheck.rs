//! Central finite-difference gradient checks.
//!
//! The error measure is the norm-relative error
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-6)` over all
//! checked coordinates of one instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;

/// Worst-case outcome of checking one operation over several instances.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Evaluates `f` (which must return a scalar) at `inputs`, returning the value.
pub fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of the scalar `f` w.r.t. every input.
pub fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect())
}

/// Relative error between analytic and central-difference gradients of `f`
/// w.r.t. the inputs whose index is listed in `wrt` (all inputs if empty).
/// At most `max_coords` coordinates per input are probed, spread evenly.
pub fn relative_error<F>(inputs: &[Tensor], wrt: &[usize], eps: f64, max_coords: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &f)?;
    let targets: Vec<usize> = if wrt.is_empty() {
        (0..inputs.len()).collect()
    } else {
        wrt.to_vec()
    };
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut probe = inputs.to_vec();
    for &t in &targets {
        let numel = inputs[t].numel();
        let step = numel.div_ceil(max_coords.max(1)).max(1);
        for i in (0..numel).step_by(step) {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&probe, &f)?;
            probe[t].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&probe, &f)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t][i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-6);
    let rel = diff2.sqrt() / denom;
    if !rel.is_finite() {
        return Err(Error::NonFinite("gradient check".into()));
    }
    Ok(rel)
}

/// Random tensor whose entries stay at least `margin` away from every point
/// in `kinks`, so that piecewise ops are probed on smooth pieces only.
fn away_from(shape: &[usize], scale: f64, kinks: &[f64], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, -scale, scale, rng);
    for v in t.data_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < margin) {
            *v = rng.gen_range(-scale..scale);
        }
    }
    t
}

/// Weights the output by a fixed random tensor so that the check sees a
/// generic upstream gradient rather than all ones.
fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mse(out, w)?;
    let lin = g.sum(out);
    let lin = g.scale(lin, 0.3);
    g.add(prod, lin)
}

/// Runs `instances` random finite-difference checks for every differentiable
/// op on the tape.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut run =
        |name: &str, rng: &mut ChaCha8Rng, case: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>| -> Result<()> {
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                worst = worst.max(case(rng)?);
            }
            results.push(OpCheck {
                name: name.to_string(),
                instances,
                max_rel_error: worst,
                tolerance: OP_TOLERANCE,
            });
            Ok(())
        };

    run("conv2d", &mut rng, &mut |rng| {
        let c = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let ks = if rng.gen_bool(0.5) { 3 } else { 1 };
        let stride = rng.gen_range(1..=2);
        let pad = if ks == 3 { rng.gen_range(0..=1) } else { 0 };
        // choose sizes with an integral output
        let oh = rng.gen_range(1..=4);
        let ow = rng.gen_range(1..=4);
        let h = (oh - 1) * stride + ks - 2 * pad;
        let w = (ow - 1) * stride + ks - 2 * pad;
        if h == 0 || w == 0 {
            return Ok(0.0);
        }
        let inputs = vec![
            Tensor::randn(&[1, c, h, w], 1.0, rng),
            Tensor::randn(&[k, c, ks, ks], 1.0, rng),
            Tensor::randn(&[k], 1.0, rng),
        ];
        let wts = Tensor::randn(&[1, k, oh, ow], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            weighted_sum(g, y, &wts)
        })
    })?;

    run("linear", &mut rng, &mut |rng| {
        let (n, d, m) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let inputs = vec![
            Tensor::randn(&[n, d], 1.0, rng),
            Tensor::randn(&[d, m], 1.0, rng),
            Tensor::randn(&[m], 1.0, rng),
        ];
        let wts = Tensor::randn(&[n, m], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, &wts)
        })
    })?;

    run("bilinear_sample", &mut rng, &mut |rng| {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5));
        let x = rng.gen_range(-0.5..w as f64 - 0.5);
        let y = rng.gen_range(-0.5..h as f64 - 0.5);
        let inputs = vec![Tensor::randn(&[c, h, w], 1.0, rng)];
        let wts = Tensor::randn(&[c], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let s = g.bilinear_sample(v[0], x, y)?;
            weighted_sum(g, s, &wts)
        })
    })?;

    run("relu", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..=12);
        let inputs = vec![away_from(&[n], 2.0, &[0.0], 1e-3, rng)];
        let wts = Tensor::randn(&[n], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let r = g.relu(v[0]);
            weighted_sum(g, r, &wts)
        })
    })?;

    run("maxpool2x2", &mut rng, &mut |rng| {
        let (c, h, w) = (rng.gen_range(1..=2), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3));
        // distinct values on a coarse lattice keep every window's max unique
        let n = c * h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let inputs = vec![Tensor::new(vec![1, c, h, w], vals)?];
        let wts = Tensor::randn(&[1, c, h / 2, w / 2], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let p = g.max_pool2(v[0])?;
            weighted_sum(g, p, &wts)
        })
    })?;

    run("upsample2x", &mut rng, &mut |rng| {
        let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let inputs = vec![Tensor::randn(&[1, c, h, w], 1.0, rng)];
        let wts = Tensor::randn(&[1, c, 2 * h, 2 * w], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let u = g.upsample2(v[0])?;
            weighted_sum(g, u, &wts)
        })
    })?;

    run("channel_concat", &mut rng, &mut |rng| {
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (c1, c2) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let inputs = vec![
            Tensor::randn(&[n, c1, h, w], 1.0, rng),
            Tensor::randn(&[n, c2, h, w], 1.0, rng),
        ];
        let wts = Tensor::randn(&[n, c1 + c2, h, w], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, c, &wts)
        })
    })?;

    run("flatten_index_select", &mut rng, &mut |rng| {
        let (n, c, s) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let picks: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..n)).collect();
        let inputs = vec![Tensor::randn(&[n, c, s, s], 1.0, rng)];
        let wts = Tensor::randn(&[picks.len(), c * s * s], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let f = g.flatten(v[0])?;
            let p = g.index_select(f, &picks)?;
            weighted_sum(g, p, &wts)
        })
    })?;

    run("softmax", &mut rng, &mut |rng| {
        let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
        let inputs = vec![Tensor::randn(&[n, k], 2.0, rng)];
        let wts = Tensor::randn(&[n, k], 1.0, rng);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            let p = g.softmax(v[0])?;
            weighted_sum(g, p, &wts)
        })
    })?;

    run("softmax_cross_entropy", &mut rng, &mut |rng| {
        let (n, k) = (rng.gen_range(1..=6), rng.gen_range(2..=4));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let inputs = vec![Tensor::randn(&[n, k], 2.0, rng)];
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| {
            g.softmax_cross_entropy(v[0], &labels)
        })
    })?;

    run("bce_with_logits", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..=10);
        let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let inputs = vec![Tensor::randn(&[n], 2.0, rng)];
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| g.bce_with_logits(v[0], &targets))
    })?;

    run("mse", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..=10);
        let inputs = vec![Tensor::randn(&[n], 1.0, rng), Tensor::randn(&[n], 1.0, rng)];
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| g.mse(v[0], v[1]))
    })?;

    run("smooth_l1", &mut rng, &mut |rng| {
        let n = rng.gen_range(1..=10);
        let targets = vec![0.0; n];
        let inputs = vec![away_from(&[n], 3.0, &[-1.0, 1.0], 1e-3, rng)];
        let norm = rng.gen_range(1.0..5.0);
        relative_error(&inputs, &[], DEFAULT_EPS, 64, |g, v| g.smooth_l1(v[0], &targets, norm))
    })?;

    Ok(results)
}
