//! The learned label denoiser: a three-layer 3x3 convolutional network over
//! channel-concatenated (labels, target frame, warped frame), trained with
//! cycle-consistency cross-entropy.

use std::io::Write as _;
use std::ops::{AddAssign, MulAssign};
use std::path::Path;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::flowio::{read_bytes, write_bytes};
use crate::grid::{argmax_pixel, onehot_encode, GateMask, Image, LabelMap, SoftLabelMap};
use crate::oracles::{mix_seed, Direction, Oracles};
use crate::propagation::{cycle_propagate, GateConfig};
use crate::synth::Sequence;

pub const HIDDEN: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const PROB_EPS: f64 = 1e-7;
pub const MAX_CYCLE_LENGTH: usize = 6;
/// Fixed multiplier on `label_skip`, which speeds up learning of the gain.
pub const SKIP_SCALE: f64 = 10.0;
pub const TENSOR_NAMES: [&str; 7] =
    ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias", "label_skip"];

const PARAMS_MAGIC: &[u8; 4] = b"LPRF";
const PARAMS_VERSION: u32 = 1;

/// Scalar type the network runs in: `f32` in production, `f64` for gradient checks.
pub trait Real: Float + AddAssign + MulAssign + std::fmt::Debug + Send + Sync + 'static {}
impl<T: Float + AddAssign + MulAssign + std::fmt::Debug + Send + Sync + 'static> Real for T {}

#[inline]
fn cast<T: Real>(v: f64) -> T {
    T::from(v).expect("representable")
}

/// A 3x3 convolution, weights laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self { in_ch, out_ch, weight: vec![T::zero(); out_ch * in_ch * 9], bias: vec![T::zero(); out_ch] }
    }

    fn he(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_ch * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..out_ch * in_ch * 9).map(|_| cast(normal.sample(rng))).collect();
        Self { in_ch, out_ch, weight, bias: vec![T::zero(); out_ch] }
    }

    fn cast<U: Real>(&self) -> Conv<U> {
        let f = |v: &T| cast::<U>(v.to_f64().expect("finite"));
        Conv {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: self.weight.iter().map(f).collect(),
            bias: self.bias.iter().map(f).collect(),
        }
    }

    fn forward(&self, input: &[T], w: usize, h: usize) -> Vec<T> {
        let n = w * h;
        let mut out = vec![T::zero(); self.out_ch * n];
        for (o, plane) in out.chunks_exact_mut(n).enumerate() {
            plane.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let src = &input[i * n..(i + 1) * n];
                let k = &self.weight[(o * self.in_ch + i) * 9..][..9];
                for (t, &wt) in k.iter().enumerate() {
                    if wt != T::zero() {
                        shifted_axpy(plane, src, w, h, t as isize / 3 - 1, t as isize % 3 - 1, wt);
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, input: &[T], gout: &[T], w: usize, h: usize, grad: &mut Conv<T>, need_input: bool) -> Vec<T> {
        let n = w * h;
        let mut gin = if need_input { vec![T::zero(); self.in_ch * n] } else { Vec::new() };
        for o in 0..self.out_ch {
            let go = &gout[o * n..(o + 1) * n];
            let mut s = T::zero();
            for &v in go {
                s += v;
            }
            grad.bias[o] += s;
            for i in 0..self.in_ch {
                let src = &input[i * n..(i + 1) * n];
                let base = (o * self.in_ch + i) * 9;
                for t in 0..9 {
                    let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
                    grad.weight[base + t] += shifted_dot(go, src, w, h, dy, dx);
                    if need_input {
                        let wt = self.weight[base + t];
                        if wt != T::zero() {
                            shifted_axpy(&mut gin[i * n..(i + 1) * n], go, w, h, -dy, -dx, wt);
                        }
                    }
                }
            }
        }
        gin
    }
}

/// Valid index range `[lo, hi)` along an axis of length `len` for a shift `d`.
#[inline]
fn shift_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// `dst[y][x] += a * src[y + dy][x + dx]` wherever the source is in bounds.
fn shifted_axpy<T: Real>(dst: &mut [T], src: &[T], w: usize, h: usize, dy: isize, dx: isize, a: T) {
    let (x0, x1) = shift_range(w, dx);
    let (y0, y1) = shift_range(h, dy);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[((sy * w + x0) as isize + dx) as usize..][..x1 - x0];
        for (d, &s) in d.iter_mut().zip(s) {
            *d += a * s;
        }
    }
}

/// `sum a[y][x] * b[y + dy][x + dx]` over in-bounds positions.
fn shifted_dot<T: Real>(a: &[T], b: &[T], w: usize, h: usize, dy: isize, dx: isize) -> T {
    let (x0, x1) = shift_range(w, dx);
    let (y0, y1) = shift_range(h, dy);
    let mut acc = T::zero();
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let ra = &a[y * w + x0..y * w + x1];
        let rb = &b[((sy * w + x0) as isize + dx) as usize..][..x1 - x0];
        let mut row = T::zero();
        for (&p, &q) in ra.iter().zip(rb) {
            row += p * q;
        }
        acc += row;
    }
    acc
}

/// conv -> ReLU -> conv -> ReLU -> conv, plus `label_skip` times the input
/// label channels, then softmax over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub layers: [Conv<T>; 3],
    /// Single learnable gain (times [`SKIP_SCALE`]) on the input label channels.
    pub label_skip: Vec<T>,
}

/// Intermediate values kept for the backward pass (all channel-major).
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub width: usize,
    pub height: usize,
    pub input: Vec<T>,
    pub hidden1: Vec<T>,
    pub hidden2: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> Network<T> {
    pub fn zeros(num_classes: usize) -> Self {
        let in_ch = num_classes + 2 * IMAGE_CHANNELS;
        Self {
            layers: [Conv::zeros(in_ch, HIDDEN), Conv::zeros(HIDDEN, HIDDEN), Conv::zeros(HIDDEN, num_classes)],
            label_skip: vec![T::zero()],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers[2].out_ch
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            layers: [self.layers[0].cast(), self.layers[1].cast(), self.layers[2].cast()],
            label_skip: self.label_skip.iter().map(|v| cast::<U>(v.to_f64().expect("finite"))).collect(),
        }
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[T]; 7] {
        let [a, b, c] = &self.layers;
        [&a.weight, &a.bias, &b.weight, &b.bias, &c.weight, &c.bias, &self.label_skip]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 7] {
        let [a, b, c] = &mut self.layers;
        [&mut a.weight, &mut a.bias, &mut b.weight, &mut b.bias, &mut c.weight, &mut c.bias, &mut self.label_skip]
    }

    pub fn forward(&self, input: Vec<T>, w: usize, h: usize) -> Activations<T> {
        let relu = |mut v: Vec<T>| {
            for x in &mut v {
                *x = x.max(T::zero());
            }
            v
        };
        let hidden1 = relu(self.layers[0].forward(&input, w, h));
        let hidden2 = relu(self.layers[1].forward(&hidden1, w, h));
        let mut probs = self.layers[2].forward(&hidden2, w, h);
        let skip = self.label_skip[0] * cast::<T>(SKIP_SCALE);
        if skip != T::zero() {
            for (z, &x) in probs.iter_mut().zip(&input) {
                *z += skip * x;
            }
        }
        softmax_channels(&mut probs, self.num_classes(), w * h);
        Activations { width: w, height: h, input, hidden1, hidden2, probs }
    }

    /// Parameter gradients given the loss gradient w.r.t. the logits.
    pub fn backward(&self, acts: &Activations<T>, dlogits: &[T], grad: &mut Network<T>) {
        let (w, h) = (acts.width, acts.height);
        let mut s = T::zero();
        for (&d, &x) in dlogits.iter().zip(&acts.input) {
            s += d * x;
        }
        grad.label_skip[0] += s * cast::<T>(SKIP_SCALE);
        let [g0, g1, g2] = &mut grad.layers;
        let mut d2 = self.layers[2].backward(&acts.hidden2, dlogits, w, h, g2, true);
        relu_mask(&mut d2, &acts.hidden2);
        let mut d1 = self.layers[1].backward(&acts.hidden1, &d2, w, h, g1, true);
        relu_mask(&mut d1, &acts.hidden1);
        self.layers[0].backward(&acts.input, &d1, w, h, g0, false);
    }
}

fn relu_mask<T: Real>(grad: &mut [T], act: &[T]) {
    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn softmax_channels<T: Real>(logits: &mut [T], c: usize, n: usize) {
    for p in 0..n {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(logits[k * n + p]);
        }
        let mut s = T::zero();
        for k in 0..c {
            let e = (logits[k * n + p] - m).exp();
            logits[k * n + p] = e;
            s += e;
        }
        for k in 0..c {
            logits[k * n + p] = logits[k * n + p] / s;
        }
    }
}

/// Mean clamped cross-entropy over non-ignore pixels and its logit gradient.
///
/// `probs` is channel-major. Pixels whose target probability is clamped get a
/// zero gradient, matching the clamped loss exactly.
pub fn cross_entropy<T: Real>(probs: &[T], target: &LabelMap) -> Result<(T, Vec<T>)> {
    let n = target.width() * target.height();
    let c = target.num_classes();
    debug_assert_eq!(probs.len(), n * c);
    let count = target.data().iter().filter(|&&v| v != target.ignore_id()).count();
    if count == 0 {
        return Err(Error::Degenerate("cross-entropy target is entirely ignore".into()));
    }
    let inv = T::one() / cast::<T>(count as f64);
    let (lo, hi) = (cast::<T>(PROB_EPS), T::one() - cast::<T>(PROB_EPS));
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * c];
    for (p, &y) in target.data().iter().enumerate() {
        if y == target.ignore_id() {
            continue;
        }
        let py = probs[y as usize * n + p];
        loss += -py.max(lo).min(hi).ln();
        if py > lo && py < hi {
            for k in 0..c {
                let d = if k == y as usize { T::one() } else { T::zero() };
                grad[k * n + p] = (probs[k * n + p] - d) * inv;
            }
        }
    }
    Ok((loss * inv, grad))
}

/// Channel-major network input: labels, target frame, warped frame.
pub fn build_input<T: Real>(labels: &SoftLabelMap, target_image: &Image, warped_image: &Image) -> Result<Vec<T>> {
    ensure_same_dims("refiner input", labels.dims(), target_image.dims())?;
    ensure_same_dims("refiner input", labels.dims(), warped_image.dims())?;
    for img in [target_image, warped_image] {
        if img.channels() != IMAGE_CHANNELS {
            return Err(Error::Shape(format!(
                "refiner expects {IMAGE_CHANNELS}-channel images, got {}",
                img.channels()
            )));
        }
    }
    let (w, h) = labels.dims();
    let n = w * h;
    let c = labels.num_classes();
    let mut out = vec![T::zero(); (c + 2 * IMAGE_CHANNELS) * n];
    for (p, px) in labels.data().chunks_exact(c).enumerate() {
        for (k, &v) in px.iter().enumerate() {
            out[k * n + p] = cast(v as f64);
        }
    }
    for (j, img) in [target_image, warped_image].into_iter().enumerate() {
        for (p, px) in img.data().chunks_exact(IMAGE_CHANNELS).enumerate() {
            for (k, &v) in px.iter().enumerate() {
                out[(c + j * IMAGE_CHANNELS + k) * n + p] = cast(v as f64);
            }
        }
    }
    Ok(out)
}

fn probs_to_soft(probs: &[f32], c: usize, w: usize, h: usize) -> Result<SoftLabelMap> {
    let n = w * h;
    let mut data = vec![0.0; n * c];
    for k in 0..c {
        for p in 0..n {
            data[p * c + k] = probs[k * n + p];
        }
    }
    SoftLabelMap::new(w, h, c, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub num_classes: usize,
    pub hidden: usize,
    pub image_channels: usize,
    pub init_seed: u64,
    pub init: String,
    pub step: u64,
    /// Echo of the training configuration that produced these parameters.
    pub train_config: Option<TrainConfig>,
}

/// All learnable tensors of the denoiser plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub net: Network<f32>,
    pub init_seed: u64,
    pub step: u64,
    pub train_config: Option<TrainConfig>,
}

impl RefinerParams {
    /// He-normal hidden layers, zero output layer.
    pub fn init(num_classes: usize, seed: u64) -> Result<Self> {
        if !(1..=255).contains(&num_classes) {
            return Err(Error::Config(format!("num_classes {num_classes} outside 1..=255")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_ch = num_classes + 2 * IMAGE_CHANNELS;
        let net = Network {
            layers: [Conv::he(in_ch, HIDDEN, &mut rng), Conv::he(HIDDEN, HIDDEN, &mut rng), Conv::zeros(HIDDEN, num_classes)],
            label_skip: vec![0.0],
        };
        Ok(Self { net, init_seed: seed, step: 0, train_config: None })
    }

    /// He-normal in every layer, so that every tensor receives gradient.
    pub fn init_dense(num_classes: usize, seed: u64) -> Result<Self> {
        let mut p = Self::init(num_classes, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3, 3));
        p.net.layers[2] = Conv::he(HIDDEN, num_classes, &mut rng);
        for b in p.net.tensors_mut().into_iter().skip(1).step_by(2) {
            // biases, then the skip gain
            for v in b.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        Ok(p)
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        if self.num_classes() != num_classes {
            return Err(Error::Shape(format!(
                "refiner built for {} classes, data has {num_classes}",
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn meta(&self) -> ParamsMeta {
        ParamsMeta {
            num_classes: self.num_classes(),
            hidden: HIDDEN,
            image_channels: IMAGE_CHANNELS,
            init_seed: self.init_seed,
            init: "he-normal hidden, zero output".into(),
            step: self.step,
            train_config: self.train_config.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let expect = [(c + 2 * IMAGE_CHANNELS, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, c)];
        for (layer, (i, o)) in self.net.layers.iter().zip(expect) {
            if layer.in_ch != i || layer.out_ch != o || layer.weight.len() != i * o * 9 || layer.bias.len() != o {
                return Err(Error::Shape("refiner tensor shapes inconsistent with class count".into()));
            }
        }
        if self.net.label_skip.len() != 1 {
            return Err(Error::Shape("refiner label skip must be a single gain".into()));
        }
        if self.net.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation("refiner parameters must be finite".into()));
        }
        Ok(())
    }

    /// `LPRF`, u32 version, u32 metadata length, JSON metadata, then each
    /// tensor as u32 length plus little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta()).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in self.net.tensors() {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PARAMS_MAGIC {
            return Err(Error::Format("not a refiner params file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported params version {version}")));
        }
        let len = r.u32()? as usize;
        let meta: ParamsMeta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format(format!("params metadata: {e}")))?;
        if meta.hidden != HIDDEN || meta.image_channels != IMAGE_CHANNELS {
            return Err(Error::Format("params architecture does not match this build".into()));
        }
        let mut net = Network::zeros(meta.num_classes);
        for t in net.tensors_mut() {
            let n = r.u32()? as usize;
            if n != t.len() {
                return Err(Error::Format(format!("tensor length {n}, expected {}", t.len())));
            }
            for v in t.iter_mut() {
                *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after params tensors".into()));
        }
        let p = Self { net, init_seed: meta.init_seed, step: meta.step, train_config: meta.train_config };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("params file truncated".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Per-pixel distributions from the denoiser.
pub fn refiner_forward(
    params: &RefinerParams,
    input_labels: &SoftLabelMap,
    target_image: &Image,
    warped_image: &Image,
) -> Result<SoftLabelMap> {
    params.check_classes(input_labels.num_classes())?;
    let (w, h) = input_labels.dims();
    let input = build_input::<f32>(input_labels, target_image, warped_image)?;
    let acts = params.net.forward(input, w, h);
    probs_to_soft(&acts.probs, params.num_classes(), w, h)
}

/// Mean of `-ln pred[target]` over non-ignore pixels, probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn refiner_loss(pred: &SoftLabelMap, target: &LabelMap) -> Result<f64> {
    ensure_same_dims("refiner_loss", pred.dims(), target.dims())?;
    if pred.num_classes() != target.num_classes() {
        return Err(Error::Shape("refiner_loss: class counts differ".into()));
    }
    let c = pred.num_classes();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (px, &y) in pred.data().chunks_exact(c).zip(target.data()) {
        if y == target.ignore_id() {
            continue;
        }
        sum -= (px[y as usize] as f64).clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate("refiner_loss target is entirely ignore".into()));
    }
    Ok(sum / count as f64)
}

/// One supervised example: refiner inputs and the labels it should produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input_labels: SoftLabelMap,
    pub target_image: Image,
    pub warped_image: Image,
    pub target: LabelMap,
}

impl Sample {
    pub fn from_cycle(c: &crate::propagation::CycleSample) -> Self {
        Self {
            input_labels: onehot_encode(&c.cyclic_labels),
            target_image: c.annotated_image.clone(),
            warped_image: c.warped_image.clone(),
            target: c.target_labels.clone(),
        }
    }

    fn check(&self, c: usize) -> Result<()> {
        ensure_same_dims("sample", self.input_labels.dims(), self.target.dims())?;
        if self.input_labels.num_classes() != c || self.target.num_classes() != c {
            return Err(Error::Shape("sample class count differs from refiner".into()));
        }
        Ok(())
    }
}

/// Loss and parameter gradient of one sample in precision `T`.
pub fn sample_loss_grad<T: Real>(net: &Network<T>, sample: &Sample) -> Result<(T, Network<T>)> {
    let (w, h) = sample.target.dims();
    let acts = net.forward(build_input(&sample.input_labels, &sample.target_image, &sample.warped_image)?, w, h);
    let (loss, dlogits) = cross_entropy(&acts.probs, &sample.target)?;
    let mut grad = Network::zeros(net.num_classes());
    net.backward(&acts, &dlogits, &mut grad);
    Ok((loss, grad))
}

/// Loss of one sample in precision `T`.
pub fn sample_loss<T: Real>(net: &Network<T>, sample: &Sample) -> Result<T> {
    let (w, h) = sample.target.dims();
    let acts = net.forward(build_input(&sample.input_labels, &sample.target_image, &sample.warped_image)?, w, h);
    Ok(cross_entropy(&acts.probs, &sample.target)?.0)
}

/// Gradients summed over the batch, with the summed per-sample loss.
pub fn refiner_backward(params: &RefinerParams, batch: &[Sample]) -> Result<(f64, Network<f32>)> {
    let mut total = Network::zeros(params.num_classes());
    let mut loss = 0.0;
    for s in batch {
        s.check(params.num_classes())?;
        let (l, g) = sample_loss_grad(&params.net, s)?;
        loss += l as f64;
        for (acc, t) in total.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &v) in acc.iter_mut().zip(t) {
                *a += v;
            }
        }
    }
    Ok((loss, total))
}

/// Refines hard Ψ^W labels; ignore pixels the gate kept stay ignore.
pub fn refine_hard(
    params: &RefinerParams,
    labels: &LabelMap,
    mask: &GateMask,
    target_image: &Image,
    warped_image: &Image,
) -> Result<(SoftLabelMap, LabelMap)> {
    ensure_same_dims("refine", labels.dims(), mask.dims())?;
    let probs = refiner_forward(params, &onehot_encode(labels), target_image, warped_image)?;
    let c = probs.num_classes();
    let data = probs
        .data()
        .chunks_exact(c)
        .zip(labels.data())
        .zip(mask.data())
        .map(|((px, &l), &kept)| {
            if kept && l == labels.ignore_id() {
                l
            } else {
                argmax_pixel(px).map_or(labels.ignore_id(), |k| k as u8)
            }
        })
        .collect();
    Ok((probs, LabelMap::new(labels.width(), labels.height(), c, labels.ignore_id(), data)?))
}

/// Soft-input variant of [`refine_hard`]; zero vectors play the role of ignore.
pub fn refine_soft(
    params: &RefinerParams,
    soft: &SoftLabelMap,
    mask: &GateMask,
    target_image: &Image,
    warped_image: &Image,
    ignore_id: u8,
) -> Result<(SoftLabelMap, LabelMap)> {
    ensure_same_dims("refine", soft.dims(), mask.dims())?;
    let probs = refiner_forward(params, soft, target_image, warped_image)?;
    let c = probs.num_classes();
    let mut out_probs = probs.data().to_vec();
    let mut data = Vec::with_capacity(mask.data().len());
    for (p, (px, &kept)) in soft.data().chunks_exact(c).zip(mask.data()).enumerate() {
        if kept && px.iter().all(|&v| v == 0.0) {
            out_probs[p * c..(p + 1) * c].fill(0.0);
            data.push(ignore_id);
        } else {
            data.push(argmax_pixel(&probs.data()[p * c..(p + 1) * c]).map_or(ignore_id, |k| k as u8));
        }
    }
    let (w, h) = soft.dims();
    Ok((SoftLabelMap::new(w, h, c, out_probs)?, LabelMap::new(w, h, c, ignore_id, data)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub steps: usize,
    /// Cycle samples per step; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Cycle lengths are drawn uniformly from `1..=max_cycle_length`.
    pub max_cycle_length: usize,
    pub seed: u64,
    pub gate: GateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            steps: 500,
            batch_size: 2,
            max_cycle_length: MAX_CYCLE_LENGTH,
            seed: 0,
            gate: GateConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.max_cycle_length == 0 {
            return Err(Error::Config("steps, batch_size and max_cycle_length must be >= 1".into()));
        }
        self.gate.validate()
    }
}

/// An annotated frame `t` inside a sequence.
#[derive(Debug, Clone, Copy)]
pub struct TrainingFrame<'a> {
    pub sequence: &'a Sequence,
    pub annotated_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: RefinerParams,
    /// Mean batch loss per step.
    pub loss_trace: Vec<f64>,
}

/// Every labelled frame with `max_len` frames of context on both sides.
pub fn training_frames(sequences: &[Sequence], max_len: usize) -> Vec<TrainingFrame<'_>> {
    sequences
        .iter()
        .flat_map(|s| {
            (max_len..s.len().saturating_sub(max_len)).map(move |t| TrainingFrame { sequence: s, annotated_index: t })
        })
        .collect()
}

/// Draws the cycle for one training sample.
pub fn draw_cycle(
    frames: &[TrainingFrame<'_>],
    max_len: usize,
    gate: &GateConfig,
    oracles: &Oracles,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let f = frames[rng.random_range(0..frames.len())];
    let length = rng.random_range(1..=max_len);
    let direction = if rng.random::<bool>() { Direction::Forward } else { Direction::Backward };
    let noise = oracles.reseeded(rng.random());
    let c = cycle_propagate(f.sequence, f.annotated_index, length, direction, gate, &noise)?;
    Ok(Sample::from_cycle(&c))
}

/// SGD with momentum on cycle-consistency samples; deterministic given `cfg.seed`.
pub fn train(
    params: &RefinerParams,
    frames: &[TrainingFrame<'_>],
    cfg: &TrainConfig,
    oracles: &Oracles,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Config("training needs at least one annotated frame".into()));
    }
    for f in frames {
        let t = f.annotated_index;
        if t < cfg.max_cycle_length || t + cfg.max_cycle_length >= f.sequence.len() {
            return Err(Error::Config(format!(
                "annotated frame {t} needs {} frames on each side in a {}-frame sequence",
                cfg.max_cycle_length,
                f.sequence.len()
            )));
        }
        params.check_classes(f.sequence.num_classes())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = params.clone();
    let mut velocity = Network::<f32>::zeros(p.num_classes());
    let mut trace = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_size as f32;
    for _ in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| draw_cycle(frames, cfg.max_cycle_length, &cfg.gate, oracles, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = refiner_backward(&p, &batch)?;
        trace.push(loss / cfg.batch_size as f64);
        for ((param, vel), g) in p.net.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grad.tensors()) {
            for ((w, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = cfg.momentum * *v + g * scale;
                *w -= cfg.lr * *v;
            }
        }
        p.step += 1;
    }
    p.train_config = Some(cfg.clone());
    p.validate()?;
    Ok(TrainOutput { params: p, loss_trace: trace })
}

/// `step,loss` CSV, steps numbered from 1.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{},{l:.9}\n", i + 1));
    }
    s
}

pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(loss_trace_csv(trace).as_bytes()).expect("in-memory write");
    write_bytes(path, &buf)
}

/// Scales one analytic gradient element before comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mutation {
    pub tensor: usize,
    pub index: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }
}

pub const GRADCHECK_STEP: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradients.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Central-difference check of every parameter in 64-bit precision.
pub fn gradient_check(params: &RefinerParams, sample: &Sample, tolerance: f64) -> Result<GradCheckReport> {
    gradient_check_with(params, sample, tolerance, None)
}

pub fn gradient_check_with(
    params: &RefinerParams,
    sample: &Sample,
    tolerance: f64,
    mutation: Option<Mutation>,
) -> Result<GradCheckReport> {
    sample.check(params.num_classes())?;
    let mut net: Network<f64> = params.net.cast();
    let (_, mut analytic) = sample_loss_grad(&net, sample)?;
    if let Some(m) = mutation {
        let t = analytic.tensors_mut();
        let slot = t
            .into_iter()
            .nth(m.tensor)
            .and_then(|t| t.get_mut(m.index))
            .ok_or_else(|| Error::Range("mutation target outside parameters".into()))?;
        *slot *= m.factor;
    }
    let mut tensors = Vec::new();
    for (ti, name) in TENSOR_NAMES.iter().enumerate() {
        let len = net.tensors()[ti].len();
        let mut max_rel = 0.0f64;
        for i in 0..len {
            let orig = net.tensors()[ti][i];
            net.tensors_mut()[ti][i] = orig + GRADCHECK_STEP;
            let up = sample_loss(&net, sample)?;
            net.tensors_mut()[ti][i] = orig - GRADCHECK_STEP;
            let down = sample_loss(&net, sample)?;
            net.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let a = analytic.tensors()[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            max_rel = max_rel.max(rel);
        }
        tensors.push(TensorCheck { name: name.to_string(), elements: len, max_rel_error: max_rel, passed: max_rel <= tolerance });
    }
    Ok(GradCheckReport { tolerance, step: GRADCHECK_STEP, tensors })
}

/// Seeded random sample for gradient checks and fixtures.
pub fn random_sample(width: usize, height: usize, num_classes: usize, ignore_id: u8, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = width * height;
    let mut soft = Vec::with_capacity(n * num_classes);
    for _ in 0..n {
        let raw: Vec<f32> = (0..num_classes).map(|_| rng.random::<f32>() + 0.01).collect();
        let s: f32 = raw.iter().sum();
        soft.extend(raw.iter().map(|v| v / s));
    }
    let mut img = || -> Result<Image> {
        Image::new(width, height, IMAGE_CHANNELS, (0..n * IMAGE_CHANNELS).map(|_| rng.random::<f32>()).collect())
    };
    let target_image = img()?;
    let warped_image = img()?;
    let labels = (0..n)
        .map(|_| if rng.random::<f32>() < 0.1 { ignore_id } else { rng.random_range(0..num_classes) as u8 })
        .collect();
    Ok(Sample {
        input_labels: SoftLabelMap::new(width, height, num_classes, soft)?,
        target_image,
        warped_image,
        target: LabelMap::new(width, height, num_classes, ignore_id, labels)?,
    })
}
