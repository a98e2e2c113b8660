//! Differentiable operations: forward constructors on [`Graph`] and the
//! matching gradient rules in [`propagate`].

use super::kernels::{bilinear_taps, col2im, gemm, im2col, plain, transposed, ConvGeom, Taps};
use super::{grad_buf, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Sums scalars (or same-shape tensors) left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Input("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let value = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x.max(0.0)).collect());
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    /// 2-D cross-correlation of `input [N,C,H,W]` with `weight [K,C,kh,kw]`
    /// plus per-channel `bias [K]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.value(input), self.value(weight), self.value(bias));
        let (xs, ws) = (xi.shape(), wi.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?} must be 4-D"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} vs weight channels {wc}"),
            ));
        }
        if bi.shape() != [k] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {k} filters", bi.shape())));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let span_h = (h + 2 * pad).checked_sub(kh);
        let span_w = (w + 2 * pad).checked_sub(kw);
        let (Some(sh), Some(sw)) = (span_h, span_w) else {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        };
        if sh % stride != 0 || sw % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("non-integer output size for {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: sh / stride + 1,
            ow: sw / stride + 1,
        };
        let (rows, p) = (geom.rows(), geom.positions());
        let mut cols = Vec::with_capacity(n * rows * p);
        let mut out = Vec::with_capacity(n * k * p);
        for b in 0..n {
            im2col(&xi.data()[b * c * h * w..(b + 1) * c * h * w], &geom, &mut cols);
            for &bias in bi.data() {
                out.extend(std::iter::repeat_n(bias, p));
            }
            let col = &cols[b * rows * p..(b + 1) * rows * p];
            gemm(
                k,
                rows,
                p,
                wi.data(),
                plain(rows),
                col,
                plain(p),
                1.0,
                &mut out[b * k * p..(b + 1) * k * p],
            );
        }
        let value = Tensor::from_parts(vec![n, k, geom.oh, geom.ow], out);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Affine map `input [N,D] · weight [D,M] + bias [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.value(input), self.value(weight), self.value(bias));
        let (xs, ws) = (xi.shape(), wi.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bi.shape() != [ws[1]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", bi.shape()),
            ));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bi.data());
        }
        gemm(n, d, m, xi.data(), plain(d), wi.data(), plain(m), 1.0, &mut out);
        let value = Tensor::from_parts(vec![n, m], out);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// 2×2 max pooling with stride 2 over `[N,C,H,W]`; H and W must be even.
    /// Ties resolve to the first maximal element in row-major order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let xi = self.value(input);
        let s = xi.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape("max_pool2", format!("{s:?} needs 4-D with even H, W")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let x = xi.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::MaxPool2 { input, argmax }))
    }

    /// Nearest-neighbour 2× upsampling of `[N,C,H,W]`.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let xi = self.value(input);
        let s = xi.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2", format!("{s:?} must be 4-D")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let plane = &xi.data()[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for x in 0..2 * w {
                    out.push(row[x / 2]);
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out);
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Upsample2(input)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Reshape(input)))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = *s.first().ok_or_else(|| Error::shape("flatten", "scalar input"))?;
        let rest = s[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Selects slices along the first axis (repeats allowed).
    pub fn index_select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let xi = self.value(input);
        let s = xi.shape();
        if s.is_empty() || indices.is_empty() {
            return Err(Error::shape(
                "index_select",
                "needs a non-scalar input and at least one index",
            ));
        }
        let inner: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::shape("index_select", format!("index {i} out of range {}", s[0])));
            }
            out.extend_from_slice(&xi.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        let value = Tensor::from_parts(shape, out);
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            rg,
            Op::IndexSelect {
                input,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Weighted spatial gather. `input` is viewed as `[C, H·W]` (any leading
    /// axes of size one are ignored; the last two axes are spatial). The taps
    /// describe `groups · per_group` output positions; the result has layout
    /// `[groups, C, per_group]`, reshaped to `out_shape`.
    pub fn spatial_gather(&mut self, input: Var, taps: Taps, groups: usize, out_shape: &[usize]) -> Result<Var> {
        let xi = self.value(input);
        let s = xi.shape();
        if s.len() < 2 {
            return Err(Error::shape("spatial_gather", format!("{s:?} lacks spatial axes")));
        }
        let hw = s[s.len() - 2] * s[s.len() - 1];
        let channels = xi.numel() / hw;
        let q = taps.positions();
        if groups == 0 || !q.is_multiple_of(groups) {
            return Err(Error::shape(
                "spatial_gather",
                format!("{q} positions in {groups} groups"),
            ));
        }
        if taps.max_index().is_some_and(|m| m >= hw) {
            return Err(Error::shape("spatial_gather", "tap index outside the plane"));
        }
        let per = q / groups;
        if out_shape.iter().product::<usize>() != groups * channels * per {
            return Err(Error::shape("spatial_gather", format!("out shape {out_shape:?}")));
        }
        let x = xi.data();
        let mut out = vec![0.0; groups * channels * per];
        for g in 0..groups {
            for c in 0..channels {
                let plane = &x[c * hw..(c + 1) * hw];
                let dst = &mut out[(g * channels + c) * per..(g * channels + c + 1) * per];
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = taps.get(g * per + j).iter().map(|&(i, w)| w * plane[i]).sum();
                }
            }
        }
        let value = Tensor::from_parts(out_shape.to_vec(), out);
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            rg,
            Op::SpatialGather {
                input,
                taps,
                groups,
                channels,
            },
        ))
    }

    /// Bilinear sample of a `[C,H,W]` feature map at continuous `(x, y)`
    /// (x along width), clamped to the border. Returns `[C]`.
    pub fn bilinear_sample(&mut self, feature: Var, x: f64, y: f64) -> Result<Var> {
        let s = self.shape(feature).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("bilinear_sample", format!("{s:?} lacks spatial axes")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let c = self.value(feature).numel() / (h * w);
        let mut taps = Taps::new();
        taps.push(bilinear_taps(h, w, y, x));
        self.spatial_gather(feature, taps, 1, &[c])
    }

    /// Row-wise softmax over the last axis of `[N,K]`.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let xi = self.value(logits);
        let s = xi.shape();
        if s.len() != 2 {
            return Err(Error::shape("softmax", format!("{s:?} must be [N,K]")));
        }
        let probs = softmax_rows(xi.data(), s[1]);
        let value = Tensor::from_parts(s.to_vec(), probs);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, rg, Op::Softmax(logits)))
    }

    /// Fused softmax + cross-entropy over `[N,K]` logits, averaged over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xi = self.value(logits);
        let s = xi.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        let mut loss = 0.0;
        for (row, &y) in xi.data().chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        let probs = softmax_rows(xi.data(), k);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Binary cross-entropy on logits, averaged over all elements.
    pub fn bce_with_logits(&mut self, input: Var, targets: &[f64]) -> Result<Var> {
        let xi = self.value(input);
        if xi.numel() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", xi.numel(), targets.len()),
            ));
        }
        let loss = xi
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BceWithLogits {
                input,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Smooth-L1 (unit transition point) summed over elements, divided by
    /// `normalizer`.
    pub fn smooth_l1(&mut self, input: Var, targets: &[f64], normalizer: f64) -> Result<Var> {
        let xi = self.value(input);
        if xi.numel() != targets.len() || normalizer <= 0.0 {
            return Err(Error::shape(
                "smooth_l1",
                format!("{} inputs, {} targets", xi.numel(), targets.len()),
            ));
        }
        let loss = xi
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| smooth_l1_value(x - t))
            .sum::<f64>()
            / normalizer;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SmoothL1 {
                input,
                targets: targets.to_vec(),
                normalizer,
            },
        ))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        self.squared_error(a, b, n)
    }

    /// `Σ (a − b)² / normalizer` over all elements.
    pub fn squared_error(&mut self, a: Var, b: Var, normalizer: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "squared_error",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        if !(normalizer > 0.0 && normalizer.is_finite()) {
            return Err(Error::Input(format!("squared_error normalizer {normalizer}")));
        }
        let loss = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / normalizer;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::SquaredError { a, b, normalizer }))
    }
}

pub(crate) fn smooth_l1_value(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies the gradient rule of one node, accumulating into its parents
/// (which all live in `before`).
pub(super) fn propagate(op: &Op, value: &Tensor, grad: &[f64], before: &mut [Node]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(ga) = grad_buf(&mut before[v.0]) {
                    ga.iter_mut().zip(grad).for_each(|(x, g)| *x += g);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = grad_buf(&mut before[a.0]) {
                ga.iter_mut().zip(grad).for_each(|(x, g)| *x += c * g);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = grad_buf(&mut before[a.0]) {
                ga.iter_mut().for_each(|x| *x += grad[0]);
            }
        }
        Op::Relu(a) => {
            let node = &mut before[a.0];
            let input = node.value.data().to_vec();
            if let Some(ga) = grad_buf(node) {
                for ((x, g), v) in ga.iter_mut().zip(grad).zip(input) {
                    if v > 0.0 {
                        *x += g;
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            conv2d_backward(*input, *weight, *bias, geom, cols, value.shape(), grad, before);
        }
        Op::Linear { input, weight, bias } => {
            let (n, d) = {
                let s = before[input.0].value.shape();
                (s[0], s[1])
            };
            let m = before[weight.0].value.shape()[1];
            if before[input.0].requires_grad {
                let w = before[weight.0].value.data().to_vec();
                let gi = grad_buf(&mut before[input.0]).unwrap();
                gemm(n, m, d, grad, plain(m), &w, transposed(m), 1.0, gi);
            }
            if before[weight.0].requires_grad {
                let x = before[input.0].value.data().to_vec();
                let gw = grad_buf(&mut before[weight.0]).unwrap();
                gemm(d, n, m, &x, transposed(d), grad, plain(m), 1.0, gw);
            }
            if let Some(gb) = grad_buf(&mut before[bias.0]) {
                for row in grad.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(x, g)| *x += g);
                }
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(gi) = grad_buf(&mut before[input.0]) {
                for (&i, g) in argmax.iter().zip(grad) {
                    gi[i] += g;
                }
            }
        }
        Op::Upsample2(input) => {
            let s = value.shape();
            let (planes, oh, ow) = (s[0] * s[1], s[2], s[3]);
            let (h, w) = (oh / 2, ow / 2);
            if let Some(gi) = grad_buf(&mut before[input.0]) {
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            gi[p * h * w + (y / 2) * w + x / 2] += grad[p * oh * ow + y * ow + x];
                        }
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let s = value.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let total = s[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let chunk = before[p.0].value.shape()[*axis] * inner;
                if let Some(gp) = grad_buf(&mut before[p.0]) {
                    for o in 0..outer {
                        let src = &grad[o * total + offset..o * total + offset + chunk];
                        gp[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, g)| *x += g);
                    }
                }
                offset += chunk;
            }
        }
        Op::Reshape(input) => {
            if let Some(gi) = grad_buf(&mut before[input.0]) {
                gi.iter_mut().zip(grad).for_each(|(x, g)| *x += g);
            }
        }
        Op::IndexSelect { input, indices } => {
            let inner = grad.len() / indices.len();
            if let Some(gi) = grad_buf(&mut before[input.0]) {
                for (row, &i) in indices.iter().enumerate() {
                    gi[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&grad[row * inner..(row + 1) * inner])
                        .for_each(|(x, g)| *x += g);
                }
            }
        }
        Op::SpatialGather {
            input,
            taps,
            groups,
            channels,
        } => {
            let per = taps.positions() / groups;
            let node = &mut before[input.0];
            let s = node.value.shape();
            let hw = s[s.len() - 2] * s[s.len() - 1];
            if let Some(gi) = grad_buf(node) {
                for g in 0..*groups {
                    for c in 0..*channels {
                        let plane = &mut gi[c * hw..(c + 1) * hw];
                        let src = &grad[(g * channels + c) * per..(g * channels + c + 1) * per];
                        for (j, gv) in src.iter().enumerate() {
                            for &(i, w) in taps.get(g * per + j) {
                                plane[i] += w * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::Softmax(input) => {
            let k = value.shape()[1];
            if let Some(gi) = grad_buf(&mut before[input.0]) {
                for ((p, g), dst) in value.data().chunks(k).zip(grad.chunks(k)).zip(gi.chunks_mut(k)) {
                    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dst[j] += p[j] * (g[j] - dot);
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = grad[0] / n as f64;
            if let Some(gl) = grad_buf(&mut before[logits.0]) {
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }
        }
        Op::BceWithLogits { input, targets } => {
            let node = &mut before[input.0];
            let x = node.value.data().to_vec();
            let scale = grad[0] / targets.len() as f64;
            if let Some(gi) = grad_buf(node) {
                for ((dst, xv), t) in gi.iter_mut().zip(x).zip(targets) {
                    *dst += scale * (sigmoid(xv) - t);
                }
            }
        }
        Op::SmoothL1 {
            input,
            targets,
            normalizer,
        } => {
            let node = &mut before[input.0];
            let x = node.value.data().to_vec();
            let scale = grad[0] / normalizer;
            if let Some(gi) = grad_buf(node) {
                for ((dst, xv), t) in gi.iter_mut().zip(x).zip(targets) {
                    let d = xv - t;
                    let dd = if d.abs() < 1.0 { d } else { d.signum() };
                    *dst += scale * dd;
                }
            }
        }
        Op::SquaredError { a, b, normalizer } => {
            let diff: Vec<f64> = before[a.0]
                .value
                .data()
                .iter()
                .zip(before[b.0].value.data())
                .map(|(x, y)| x - y)
                .collect();
            let scale = 2.0 * grad[0] / normalizer;
            if let Some(ga) = grad_buf(&mut before[a.0]) {
                ga.iter_mut().zip(&diff).for_each(|(x, d)| *x += scale * d);
            }
            if let Some(gb) = grad_buf(&mut before[b.0]) {
                gb.iter_mut().zip(&diff).for_each(|(x, d)| *x -= scale * d);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: Var,
    weight: Var,
    bias: Var,
    geom: &ConvGeom,
    cols: &[f64],
    out_shape: &[usize],
    grad: &[f64],
    before: &mut [Node],
) {
    let (n, k) = (out_shape[0], out_shape[1]);
    let (rows, p) = (geom.rows(), geom.positions());
    let image = geom.c * geom.h * geom.w;
    if let Some(gb) = grad_buf(&mut before[bias.0]) {
        for b in 0..n {
            for (kk, dst) in gb.iter_mut().enumerate() {
                *dst += grad[(b * k + kk) * p..(b * k + kk + 1) * p].iter().sum::<f64>();
            }
        }
    }
    if before[weight.0].requires_grad {
        let gw = grad_buf(&mut before[weight.0]).unwrap();
        for b in 0..n {
            let go = &grad[b * k * p..(b + 1) * k * p];
            let col = &cols[b * rows * p..(b + 1) * rows * p];
            gemm(k, p, rows, go, plain(p), col, transposed(p), 1.0, gw);
        }
    }
    if before[input.0].requires_grad {
        let w = before[weight.0].value.data().to_vec();
        let gi = grad_buf(&mut before[input.0]).unwrap();
        let mut dcol = vec![0.0; rows * p];
        for b in 0..n {
            let go = &grad[b * k * p..(b + 1) * k * p];
            gemm(rows, k, p, &w, transposed(rows), go, plain(p), 0.0, &mut dcol);
            col2im(&dcol, geom, &mut gi[b * image..(b + 1) * image]);
        }
    }
}
