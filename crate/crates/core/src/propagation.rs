//! Label propagation: gather warps, the photometric gate, gated blending and
//! the recursive chains built from them.
//!
//! One warp-inpaint step carries the previous labels along the estimated
//! flow, then re-initializes every pixel whose warped previous frame does
//! not match the target frame photometrically with the semantic prediction.
//! Warp-refine additionally runs the learned refiner after each step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::grid::{onehot_encode, pixel_distance_unchecked, FlowField, GateMask, Image, LabelMap, SoftLabelMap};
use crate::oracles::{motion_oracle, semantic_for_frame, Direction, Oracles};
use crate::refine::{refine_hard, refine_soft, RefinerParams};
use crate::synth::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fill {
    /// Out-of-frame sources read the nearest edge pixel.
    Clamp,
    /// Out-of-frame sources become ignore and are flagged invalid.
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub tau: f32,
    /// Strict `<` comparison against `tau` (otherwise `<=`).
    pub strict: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { tau: 0.10, strict: true }
    }
}

impl GateConfig {
    pub fn with_tau(tau: f32) -> Self {
        Self { tau, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("tau {} must be >= 0", self.tau)));
        }
        Ok(())
    }

    #[inline]
    fn accepts(&self, d: f32) -> bool {
        if self.strict {
            d < self.tau
        } else {
            d <= self.tau
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MotionOnly,
    SemanticOnly,
    WarpInpaint,
    WarpRefine,
}

impl Method {
    pub const ALL: [Method; 4] =
        [Method::MotionOnly, Method::SemanticOnly, Method::WarpInpaint, Method::WarpRefine];

    pub fn name(self) -> &'static str {
        match self {
            Method::MotionOnly => "motion-only",
            Method::SemanticOnly => "semantic-only",
            Method::WarpInpaint => "warp-inpaint",
            Method::WarpRefine => "warp-refine",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRepresentation {
    /// Argmax labels flow between steps.
    #[default]
    Hard,
    /// Refiner probabilities flow between warp-refine steps.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateConfig {
    pub horizon: usize,
    pub method: Method,
    pub gate: GateConfig,
    pub refine_every_step: bool,
    pub label_representation: LabelRepresentation,
}

impl PropagateConfig {
    pub fn new(method: Method, horizon: usize) -> Self {
        Self {
            horizon,
            method,
            gate: GateConfig::default(),
            refine_every_step: true,
            label_representation: LabelRepresentation::Hard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        self.gate.validate()
    }
}

/// Nearest-neighbour gather: `out(x, y) = labels(round(x + u), round(y + v))`.
///
/// Returns the warped labels and a mask of pixels whose source was in frame.
pub fn remap_labels(labels: &LabelMap, flow: &FlowField, fill: Fill) -> Result<(LabelMap, GateMask)> {
    ensure_same_dims("remap_labels", labels.dims(), flow.dims())?;
    let (w, h) = labels.dims();
    let mut out = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy, ok) = gather_source(flow, x, y, w, h);
            valid.push(ok);
            out.push(if ok || fill == Fill::Clamp {
                labels.get(sx, sy)
            } else {
                labels.ignore_id()
            });
        }
    }
    Ok((LabelMap::from_raw(labels, out), GateMask::new(w, h, valid)?))
}

/// Rounded, clamped source pixel and whether it was inside the frame.
#[inline]
fn gather_source(flow: &FlowField, x: usize, y: usize, w: usize, h: usize) -> (usize, usize, bool) {
    let [u, v] = flow.get(x, y);
    let sx = (x as f32 + u).round();
    let sy = (y as f32 + v).round();
    let ok = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f32 && sy <= (h - 1) as f32;
    (
        sx.clamp(0.0, (w - 1) as f32) as usize,
        sy.clamp(0.0, (h - 1) as f32) as usize,
        ok,
    )
}

/// Soft counterpart of [`remap_labels`]; invalid sources become zero vectors.
pub fn remap_soft(soft: &SoftLabelMap, flow: &FlowField, fill: Fill) -> Result<(SoftLabelMap, GateMask)> {
    ensure_same_dims("remap_soft", soft.dims(), flow.dims())?;
    let (w, h) = soft.dims();
    let c = soft.num_classes();
    let mut out = Vec::with_capacity(w * h * c);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy, ok) = gather_source(flow, x, y, w, h);
            valid.push(ok);
            if ok || fill == Fill::Clamp {
                out.extend_from_slice(soft.pixel(sx, sy));
            } else {
                out.extend(std::iter::repeat_n(0.0, c));
            }
        }
    }
    Ok((SoftLabelMap::new(w, h, c, out)?, GateMask::new(w, h, valid)?))
}

/// Bilinear gather with edge clamping.
pub fn remap_image(image: &Image, flow: &FlowField) -> Result<Image> {
    ensure_same_dims("remap_image", image.dims(), flow.dims())?;
    let (w, h) = image.dims();
    let ch = image.channels();
    let src = image.data();
    let (maxx, maxy) = ((w - 1) as f32, (h - 1) as f32);
    let mut out = Vec::with_capacity(w * h * ch);
    for y in 0..h {
        for x in 0..w {
            let [u, v] = flow.get(x, y);
            let fx = (x as f32 + u).clamp(0.0, maxx);
            let fy = (y as f32 + v).clamp(0.0, maxy);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
            let (w00, w10, w01, w11) =
                ((1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay);
            let (i00, i10, i01, i11) =
                ((y0 * w + x0) * ch, (y0 * w + x1) * ch, (y1 * w + x0) * ch, (y1 * w + x1) * ch);
            for c in 0..ch {
                let v = w00 * src[i00 + c] + w10 * src[i10 + c] + w01 * src[i01 + c] + w11 * src[i11 + c];
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(w, h, ch, out)
}

/// `M(x, y) = [ ||target(x, y) - warped_prev(x, y)||_2 < tau ]`.
pub fn gate_mask(target: &Image, warped_prev: &Image, cfg: &GateConfig) -> Result<GateMask> {
    gate_mask_with_validity(target, warped_prev, None, cfg)
}

/// [`gate_mask`] with pixels outside `valid` forced false.
pub fn gate_mask_with_validity(
    target: &Image,
    warped_prev: &Image,
    valid: Option<&GateMask>,
    cfg: &GateConfig,
) -> Result<GateMask> {
    ensure_same_dims("gate_mask", target.dims(), warped_prev.dims())?;
    if target.channels() != warped_prev.channels() {
        return Err(Error::Shape("gate_mask: channel count differs".into()));
    }
    if let Some(v) = valid {
        ensure_same_dims("gate_mask validity", target.dims(), v.dims())?;
    }
    let (w, h) = target.dims();
    let ch = target.channels();
    let data = target
        .data()
        .chunks_exact(ch)
        .zip(warped_prev.data().chunks_exact(ch))
        .enumerate()
        .map(|(i, (a, b))| valid.is_none_or(|v| v.data()[i]) && cfg.accepts(pixel_distance_unchecked(a, b)))
        .collect();
    GateMask::new(w, h, data)
}

/// `M * motion + (1 - M) * semantic`, pixel by pixel.
pub fn blend_labels(motion: &LabelMap, semantic: &LabelMap, mask: &GateMask) -> Result<LabelMap> {
    ensure_same_dims("blend_labels", motion.dims(), semantic.dims())?;
    ensure_same_dims("blend_labels mask", motion.dims(), mask.dims())?;
    if motion.num_classes() != semantic.num_classes() || motion.ignore_id() != semantic.ignore_id() {
        return Err(Error::Shape("blend_labels: class spaces differ".into()));
    }
    let data = motion
        .data()
        .iter()
        .zip(semantic.data())
        .zip(mask.data())
        .map(|((&m, &s), &keep)| if keep { m } else { s })
        .collect();
    Ok(LabelMap::from_raw(motion, data))
}

fn blend_soft(motion: &SoftLabelMap, semantic: &LabelMap, mask: &GateMask) -> Result<SoftLabelMap> {
    let sem = onehot_encode(semantic);
    let c = motion.num_classes();
    let data = motion
        .data()
        .chunks_exact(c)
        .zip(sem.data().chunks_exact(c))
        .zip(mask.data())
        .flat_map(|((m, s), &keep)| if keep { m } else { s }.iter().copied())
        .collect();
    SoftLabelMap::new(motion.width(), motion.height(), c, data)
}

/// Everything one warp-inpaint step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintStep {
    pub labels: LabelMap,
    /// Pixels that kept their motion-warped label.
    pub mask: GateMask,
    /// Previous frame warped onto the target frame.
    pub warped_image: Image,
}

/// Warp, gate, blend. `flow` maps `target_image` pixels into `prev_image`.
pub fn warp_inpaint_step(
    prev_labels: &LabelMap,
    prev_image: &Image,
    target_image: &Image,
    flow: &FlowField,
    semantic_labels: &LabelMap,
    gate: &GateConfig,
) -> Result<InpaintStep> {
    ensure_same_dims("warp_inpaint_step", prev_image.dims(), target_image.dims())?;
    let (motion, valid) = remap_labels(prev_labels, flow, Fill::Invalid)?;
    let warped_image = remap_image(prev_image, flow)?;
    let mask = gate_mask_with_validity(target_image, &warped_image, Some(&valid), gate)?;
    let labels = blend_labels(&motion, semantic_labels, &mask)?;
    Ok(InpaintStep { labels, mask, warped_image })
}

/// Frame reached after one step from `k` in time direction `dir`.
fn step_target(k: usize, dir: Direction) -> usize {
    match dir {
        Direction::Forward => k + 1,
        Direction::Backward => k - 1,
    }
}

/// Inputs for stepping from frame `from` onto its neighbour in `dir`.
struct StepInputs<'a> {
    target: usize,
    flow: FlowField,
    prev_image: &'a Image,
    target_image: &'a Image,
}

fn step_inputs<'a>(seq: &'a Sequence, from: usize, dir: Direction, oracles: &Oracles) -> Result<StepInputs<'a>> {
    let target = step_target(from, dir);
    let flow = motion_oracle(seq, &oracles.motion, target, dir)?;
    Ok(StepInputs { target, flow, prev_image: &seq.frames[from], target_image: &seq.frames[target] })
}

fn semantic_labels(seq: &Sequence, k: usize, oracles: &Oracles) -> Result<LabelMap> {
    Ok(semantic_for_frame(seq, &oracles.semantic, k)?.thresholded(oracles.semantic.threshold))
}

/// One Ψ^W step from frame `from` onto its neighbour in `dir`.
pub fn inpaint_from(
    seq: &Sequence,
    from: usize,
    prev_labels: &LabelMap,
    dir: Direction,
    gate: &GateConfig,
    oracles: &Oracles,
) -> Result<(usize, InpaintStep)> {
    let s = step_inputs(seq, from, dir, oracles)?;
    let sem = semantic_labels(seq, s.target, oracles)?;
    let step = warp_inpaint_step(prev_labels, s.prev_image, s.target_image, &s.flow, &sem, gate)?;
    Ok((s.target, step))
}

/// Propagated labels for every offset in `[-K, K] \ {0}` around frame `t`.
pub fn propagate(
    seq: &Sequence,
    t: usize,
    cfg: &PropagateConfig,
    oracles: &Oracles,
    refiner: Option<&RefinerParams>,
) -> Result<BTreeMap<i64, LabelMap>> {
    cfg.validate()?;
    let k = cfg.horizon;
    if t >= seq.len() || t < k || t + k >= seq.len() {
        return Err(Error::Range(format!(
            "annotated frame {t} with horizon {k} leaves a {}-frame sequence",
            seq.len()
        )));
    }
    match (cfg.method, refiner) {
        (Method::WarpRefine, None) => {
            return Err(Error::Config("warp-refine requires refiner parameters".into()))
        }
        (Method::WarpRefine, Some(p)) => p.check_classes(seq.num_classes())?,
        (_, Some(_)) => {
            return Err(Error::Config(format!("{} does not take a refiner", cfg.method)))
        }
        _ => {}
    }
    let mut out = BTreeMap::new();
    for dir in [Direction::Forward, Direction::Backward] {
        let chain = propagate_chain(seq, t, dir, cfg, oracles, refiner)?;
        for (i, labels) in chain.into_iter().enumerate() {
            out.insert(dir.sign() * (i as i64 + 1), labels);
        }
    }
    Ok(out)
}

fn propagate_chain(
    seq: &Sequence,
    t: usize,
    dir: Direction,
    cfg: &PropagateConfig,
    oracles: &Oracles,
    refiner: Option<&RefinerParams>,
) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(cfg.horizon);
    let mut prev = seq.labels[t].clone();
    let mut prev_soft: Option<SoftLabelMap> = None;
    let mut from = t;
    for _ in 0..cfg.horizon {
        let target = step_target(from, dir);
        let labels = match cfg.method {
            Method::SemanticOnly => semantic_labels(seq, target, oracles)?,
            Method::MotionOnly => {
                let s = step_inputs(seq, from, dir, oracles)?;
                remap_labels(&prev, &s.flow, Fill::Clamp)?.0
            }
            Method::WarpInpaint => inpaint_from(seq, from, &prev, dir, &cfg.gate, oracles)?.1.labels,
            Method::WarpRefine => {
                let params = refiner.expect("checked by caller");
                let s = step_inputs(seq, from, dir, oracles)?;
                let sem = semantic_labels(seq, target, oracles)?;
                match (cfg.label_representation, prev_soft.as_ref()) {
                    (LabelRepresentation::Soft, Some(soft)) if cfg.refine_every_step => {
                        let (motion, valid) = remap_soft(soft, &s.flow, Fill::Invalid)?;
                        let warped = remap_image(s.prev_image, &s.flow)?;
                        let mask = gate_mask_with_validity(s.target_image, &warped, Some(&valid), &cfg.gate)?;
                        let blended = blend_soft(&motion, &sem, &mask)?;
                        let (probs, hard) = refine_soft(params, &blended, &mask, s.target_image, &warped, seq.ignore_id())?;
                        prev_soft = Some(probs);
                        hard
                    }
                    _ => {
                        let step = warp_inpaint_step(&prev, s.prev_image, s.target_image, &s.flow, &sem, &cfg.gate)?;
                        if cfg.refine_every_step {
                            let (probs, hard) =
                                refine_hard(params, &step.labels, &step.mask, s.target_image, &step.warped_image)?;
                            if cfg.label_representation == LabelRepresentation::Soft {
                                prev_soft = Some(probs);
                            }
                            hard
                        } else {
                            // the chain stays unrefined; only the emitted labels are refined
                            let (_, hard) =
                                refine_hard(params, &step.labels, &step.mask, s.target_image, &step.warped_image)?;
                            out.push(hard);
                            prev = step.labels;
                            from = target;
                            continue;
                        }
                    }
                }
            }
        };
        out.push(labels.clone());
        prev = labels;
        from = target;
    }
    Ok(out)
}

/// A forward-then-back (or back-then-forward) cycle around frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSample {
    pub length: usize,
    /// Direction of the first leg.
    pub direction: Direction,
    /// Labels for frame `t` after the round trip.
    pub cyclic_labels: LabelMap,
    /// Gate of the final step back onto `t`.
    pub cyclic_mask: GateMask,
    /// Neighbouring frame warped onto `t` by the final step.
    pub warped_image: Image,
    pub annotated_image: Image,
    pub target_labels: LabelMap,
}

/// `l` warp-inpaint steps away from `t` in `direction`, then `l` steps back.
pub fn cycle_propagate(
    seq: &Sequence,
    t: usize,
    length: usize,
    direction: Direction,
    gate: &GateConfig,
    oracles: &Oracles,
) -> Result<CycleSample> {
    gate.validate()?;
    if length == 0 {
        return Err(Error::Config("cycle length must be >= 1".into()));
    }
    let far = t as i64 + direction.sign() * length as i64;
    if t >= seq.len() || far < 0 || far >= seq.len() as i64 {
        return Err(Error::Range(format!(
            "cycle of length {length} from frame {t} leaves a {}-frame sequence",
            seq.len()
        )));
    }
    let mut labels = seq.labels[t].clone();
    let mut from = t;
    for _ in 0..length {
        let (to, step) = inpaint_from(seq, from, &labels, direction, gate, oracles)?;
        labels = step.labels;
        from = to;
    }
    let back = direction.reversed();
    let mut last = None;
    for _ in 0..length {
        let (to, step) = inpaint_from(seq, from, &labels, back, gate, oracles)?;
        labels = step.labels.clone();
        from = to;
        last = Some(step);
    }
    debug_assert_eq!(from, t);
    let last = last.expect("length >= 1");
    Ok(CycleSample {
        length,
        direction,
        cyclic_labels: last.labels,
        cyclic_mask: last.mask,
        warped_image: last.warped_image,
        annotated_image: seq.frames[t].clone(),
        target_labels: seq.labels[t].clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DEFAULT_IGNORE_ID;
    use crate::synth::{generate, standard_benchmark};
    use proptest::prelude::*;

    const IGN: u8 = DEFAULT_IGNORE_ID;

    fn lm(w: usize, h: usize, c: usize, d: Vec<u8>) -> LabelMap {
        LabelMap::new(w, h, c, IGN, d).unwrap()
    }

    /// Per-pixel gather written directly from the definition.
    fn gather_oracle(labels: &LabelMap, flow: &FlowField) -> Vec<Option<u8>> {
        let (w, h) = labels.dims();
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let [u, v] = flow.get(x as usize, y as usize);
                let sx = (x as f64 + u as f64).round() as i64;
                let sy = (y as f64 + v as f64).round() as i64;
                out.push(if (0..w as i64).contains(&sx) && (0..h as i64).contains(&sy) {
                    Some(labels.get(sx as usize, sy as usize))
                } else {
                    None
                });
            }
        }
        out
    }

    #[test]
    fn zero_flow_is_identity() {
        let l = lm(3, 2, 4, vec![0, 1, 2, 3, IGN, 1]);
        let (out, valid) = remap_labels(&l, &FlowField::zeros(3, 2), Fill::Invalid).unwrap();
        assert_eq!(out, l);
        assert_eq!(valid.count_true(), 6);
        let img = Image::new(3, 2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(remap_image(&img, &FlowField::zeros(3, 2)).unwrap(), img);
    }

    #[test]
    fn uniform_shift_against_gather_oracle() {
        let l = lm(4, 4, 16, (0..16).collect());
        let flow = FlowField::uniform(4, 4, 1.0, 0.0);
        let (out, valid) = remap_labels(&l, &flow, Fill::Invalid).unwrap();
        let oracle = gather_oracle(&l, &flow);
        for y in 0..4 {
            for x in 0..4 {
                let i = y * 4 + x;
                match oracle[i] {
                    Some(v) => {
                        assert_eq!(out.get(x, y), v);
                        assert_eq!(v as usize, i + 1);
                        assert!(valid.get(x, y));
                    }
                    None => {
                        assert_eq!(x, 3);
                        assert!(!valid.get(x, y));
                        assert_eq!(out.get(x, y), IGN);
                    }
                }
            }
        }
        let (clamped, _) = remap_labels(&l, &flow, Fill::Clamp).unwrap();
        assert_eq!(clamped.get(3, 2), l.get(3, 2));
    }

    #[test]
    fn half_pixel_shift_on_ramp() {
        let w = 8;
        let ramp: Vec<f32> = (0..w * 2).map(|i| (i % w) as f32 / (w - 1) as f32).collect();
        let img = Image::new(w, 2, 1, ramp.clone()).unwrap();
        let out = remap_image(&img, &FlowField::uniform(w, 2, 0.5, 0.0)).unwrap();
        for y in 0..2 {
            for x in 0..w {
                // direct interpolation at x + 0.5, clamped at the right edge
                let fx = (x as f32 + 0.5).min((w - 1) as f32);
                let expected = fx / (w - 1) as f32;
                assert!((out.pixel(x, y)[0] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gate_examples() {
        let a = Image::new(2, 2, 3, vec![0.5; 12]).unwrap();
        assert_eq!(gate_mask(&a, &a, &GateConfig::with_tau(0.1)).unwrap().count_true(), 4);
        assert_eq!(gate_mask(&a, &a, &GateConfig::with_tau(0.0)).unwrap().count_true(), 0);
        // distances 0, 0.05, 0.2, 0.5 along the red channel
        let b = Image::new(
            2,
            2,
            3,
            vec![0.5, 0.5, 0.5, 0.55, 0.5, 0.5, 0.7, 0.5, 0.5, 1.0, 0.5, 0.5],
        )
        .unwrap();
        let m = gate_mask(&a, &b, &GateConfig::with_tau(0.1)).unwrap();
        assert_eq!(m.data(), &[true, true, false, false]);
    }

    #[test]
    fn blend_examples() {
        let m = lm(2, 2, 4, vec![0, 1, 2, 3]);
        let s = lm(2, 2, 4, vec![3, 2, 1, 0]);
        assert_eq!(blend_labels(&m, &s, &GateMask::filled(2, 2, true)).unwrap(), m);
        assert_eq!(blend_labels(&m, &s, &GateMask::filled(2, 2, false)).unwrap(), s);
        for bits in 0u8..16 {
            let mask: Vec<bool> = (0..4).map(|i| bits & (1 << i) != 0).collect();
            let out = blend_labels(&m, &s, &GateMask::new(2, 2, mask.clone()).unwrap()).unwrap();
            for i in 0..4 {
                assert_eq!(out.data()[i], if mask[i] { m.data()[i] } else { s.data()[i] });
            }
        }
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let l = lm(2, 2, 2, vec![0; 4]);
        assert!(matches!(remap_labels(&l, &FlowField::zeros(3, 2), Fill::Clamp), Err(Error::Shape(_))));
        let big = lm(3, 2, 2, vec![0; 6]);
        assert!(matches!(blend_labels(&l, &big, &GateMask::filled(2, 2, true)), Err(Error::Shape(_))));
    }

    fn seq(seed: u64) -> Sequence {
        generate(&standard_benchmark(seed)).unwrap()
    }

    #[test]
    fn perfect_step_reproduces_ground_truth() {
        let s = seq(1);
        let o = Oracles::perfect();
        for k in [1usize, 5, 10, 15, 20] {
            let (to, step) = inpaint_from(&s, k - 1, &s.labels[k - 1], Direction::Forward, &GateConfig::default(), &o).unwrap();
            assert_eq!(to, k);
            assert_eq!(step.labels, s.labels[k]);
            let (_, back) = inpaint_from(&s, k, &s.labels[k], Direction::Backward, &GateConfig::default(), &o).unwrap();
            assert_eq!(back.labels, s.labels[k - 1]);
        }
    }

    #[test]
    fn gate_saturation_degenerates_step() {
        let s = seq(2);
        let o = Oracles::standard(5);
        let k = 11;
        let flow = motion_oracle(&s, &o.motion, k, Direction::Forward).unwrap();
        let sem = semantic_labels(&s, k, &o).unwrap();
        let prev = &s.labels[k - 1];
        let wide = warp_inpaint_step(prev, &s.frames[k - 1], &s.frames[k], &flow, &sem, &GateConfig::with_tau(1e3)).unwrap();
        let (motion, valid) = remap_labels(prev, &flow, Fill::Invalid).unwrap();
        for i in 0..valid.data().len() {
            if valid.data()[i] {
                assert_eq!(wide.labels.data()[i], motion.data()[i]);
            }
        }
        let shut = warp_inpaint_step(prev, &s.frames[k - 1], &s.frames[k], &flow, &sem, &GateConfig::with_tau(0.0)).unwrap();
        assert_eq!(shut.labels, sem);
    }

    #[test]
    fn perfect_oracles_k1_match_ground_truth() {
        let s = seq(3);
        for m in [Method::SemanticOnly, Method::WarpInpaint] {
            let out = propagate(&s, 10, &PropagateConfig::new(m, 1), &Oracles::perfect(), None).unwrap();
            assert_eq!(out.len(), 2);
            assert_eq!(out[&1], s.labels[11]);
            assert_eq!(out[&-1], s.labels[9]);
        }
    }

    #[test]
    fn semantic_only_has_no_temporal_coupling() {
        let s = seq(4);
        let o = Oracles::standard(8);
        let out = propagate(&s, 10, &PropagateConfig::new(Method::SemanticOnly, 3), &o, None).unwrap();
        assert_eq!(out[&3], semantic_labels(&s, 13, &o).unwrap());
        assert_eq!(out[&-3], semantic_labels(&s, 7, &o).unwrap());
    }

    #[test]
    fn propagate_argument_errors() {
        let s = seq(0);
        let o = Oracles::perfect();
        assert!(matches!(
            propagate(&s, 10, &PropagateConfig::new(Method::WarpInpaint, 11), &o, None),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            propagate(&s, 3, &PropagateConfig::new(Method::WarpInpaint, 4), &o, None),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            propagate(&s, 10, &PropagateConfig::new(Method::WarpRefine, 2), &o, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            propagate(&s, 10, &PropagateConfig::new(Method::WarpInpaint, 0), &o, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prefix_property() {
        let s = seq(6);
        let o = Oracles::standard(2);
        for m in [Method::MotionOnly, Method::WarpInpaint] {
            let long = propagate(&s, 10, &PropagateConfig::new(m, 6), &o, None).unwrap();
            let short = propagate(&s, 10, &PropagateConfig::new(m, 5), &o, None).unwrap();
            for (off, l) in &short {
                assert_eq!(&long[off], l);
            }
        }
    }

    #[test]
    fn perfect_cycle_returns_annotation() {
        let s = seq(7);
        for dir in [Direction::Forward, Direction::Backward] {
            for l in [1, 3, 6] {
                let c = cycle_propagate(&s, 10, l, dir, &GateConfig::default(), &Oracles::perfect()).unwrap();
                assert_eq!(c.cyclic_labels, s.labels[10]);
                assert_eq!(c.target_labels, s.labels[10]);
                assert_eq!(c.annotated_image, s.frames[10]);
            }
        }
        assert!(matches!(
            cycle_propagate(&s, 10, 11, Direction::Forward, &GateConfig::default(), &Oracles::perfect()),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn backward_unit_cycle_uses_rev_then_forward_flows() {
        let s = seq(8);
        let o = Oracles::standard(3);
        let gate = GateConfig::default();
        let c = cycle_propagate(&s, 10, 1, Direction::Backward, &gate, &o).unwrap();
        let (_, away) = inpaint_from(&s, 10, &s.labels[10], Direction::Backward, &gate, &o).unwrap();
        let flow = motion_oracle(&s, &o.motion, 10, Direction::Forward).unwrap();
        let sem = semantic_labels(&s, 10, &o).unwrap();
        let back = warp_inpaint_step(&away.labels, &s.frames[9], &s.frames[10], &flow, &sem, &gate).unwrap();
        assert_eq!(c.cyclic_labels, back.labels);
        assert_eq!(c.warped_image, back.warped_image);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn remap_never_invents_classes(
            data in proptest::collection::vec(0u8..5, 36),
            flow in proptest::collection::vec((-8.0f32..8.0, -8.0f32..8.0), 36),
            clamp in any::<bool>(),
        ) {
            let l = lm(6, 6, 5, data.clone());
            let f = FlowField::new(6, 6, flow.into_iter().map(|(u, v)| [u, v]).collect()).unwrap();
            let fill = if clamp { Fill::Clamp } else { Fill::Invalid };
            let (out, _) = remap_labels(&l, &f, fill).unwrap();
            for v in out.data() {
                prop_assert!(data.contains(v) || (!clamp && *v == IGN));
            }
            let oracle = gather_oracle(&l, &f);
            for (i, o) in oracle.iter().enumerate() {
                if let Some(v) = o {
                    prop_assert_eq!(out.data()[i], *v);
                }
            }
        }

        #[test]
        fn bilinear_stays_within_extrema(
            px in proptest::collection::vec(0.0f32..=1.0, 25),
            flow in proptest::collection::vec((-6.0f32..6.0, -6.0f32..6.0), 25),
        ) {
            let img = Image::new(5, 5, 1, px.clone()).unwrap();
            let f = FlowField::new(5, 5, flow.into_iter().map(|(u, v)| [u, v]).collect()).unwrap();
            let out = remap_image(&img, &f).unwrap();
            let lo = px.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = px.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for v in out.data() {
                prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
            }
        }

        #[test]
        fn gate_is_monotone_in_tau(
            a in proptest::collection::vec(0.0f32..=1.0, 27),
            b in proptest::collection::vec(0.0f32..=1.0, 27),
            t1 in 0.0f32..2.0,
            dt in 0.0f32..1.0,
        ) {
            let ia = Image::new(3, 3, 3, a).unwrap();
            let ib = Image::new(3, 3, 3, b).unwrap();
            let m1 = gate_mask(&ia, &ib, &GateConfig::with_tau(t1)).unwrap();
            let m2 = gate_mask(&ia, &ib, &GateConfig::with_tau(t1 + dt)).unwrap();
            for (p, q) in m1.data().iter().zip(m2.data()) {
                prop_assert!(!p || *q);
            }
        }

        #[test]
        fn blend_partitions_inputs(
            m in proptest::collection::vec(0u8..4, 16),
            s in proptest::collection::vec(0u8..4, 16),
            mask in proptest::collection::vec(any::<bool>(), 16),
        ) {
            let out = blend_labels(&lm(4, 4, 4, m.clone()), &lm(4, 4, 4, s.clone()), &GateMask::new(4, 4, mask).unwrap()).unwrap();
            for i in 0..16 {
                prop_assert!(out.data()[i] == m[i] || out.data()[i] == s[i]);
            }
        }
    }
}
