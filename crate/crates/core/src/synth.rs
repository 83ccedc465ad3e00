//! Procedural image sequences with exact labels and flow.
//!
//! A scene is a stack of rigid, translating elements (rectangles, ellipses
//! and thin bars) over a textured backdrop, seen by a panning camera. Every
//! element's screen position is snapped to the pixel grid each frame, so the
//! ground-truth flow is integral and warping labels along it is exact.
//!
//! Flow at a pixel is the motion of the element drawn there. Where that
//! motion points off-frame (entering content) or at a different element in
//! the other frame (de-occlusion), the flow still points at that wrong
//! content; the generator records these cases as [`Provenance`] flags,
//! which exist only for tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FlowField, Image, LabelMap, DEFAULT_IGNORE_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Rectangle,
    Ellipse,
    /// Axis-aligned bar; at most 2 px wide.
    Bar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape: Shape,
    pub class_id: u8,
    /// Extent in pixels.
    pub size: (u32, u32),
    /// World position of the top-left corner at the spawn frame.
    pub origin: (f32, f32),
    /// Pixels per frame, in world coordinates.
    pub velocity: (f32, f32),
    pub spawn_frame: usize,
    /// Higher is drawn on top.
    pub depth: i32,
    /// Texture amplitude added to the class color.
    pub texture: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub num_classes: usize,
    pub ignore_id: u8,
    pub class_names: Vec<String>,
    /// RGB base color per class id.
    pub class_colors: Vec<[f32; 3]>,
    pub ignore_color: [f32; 3],
    pub backdrop_class: u8,
    pub backdrop_texture: f32,
    pub texture_scale: f32,
    pub texture_seed: u64,
    pub sprites: Vec<SpriteSpec>,
    /// Camera motion in pixels per frame; scene content moves opposite.
    pub camera_pan: (f32, f32),
    /// Class that must stay below `rare_quota` of all labelled pixels.
    pub rare_class: Option<u8>,
    pub rare_quota: f32,
    pub seed: u64,
}

impl SceneConfig {
    pub fn annotated_index(&self) -> usize {
        (self.frame_count - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("scene dimensions must be positive".into());
        }
        if self.frame_count % 2 == 0 {
            return bad(format!("frame_count {} must be odd", self.frame_count));
        }
        if self.num_classes == 0 || self.num_classes > self.ignore_id as usize {
            return bad(format!("num_classes {} invalid", self.num_classes));
        }
        if self.class_colors.len() != self.num_classes {
            return bad("one color per class required".into());
        }
        if self.backdrop_class as usize >= self.num_classes {
            return bad("backdrop class out of range".into());
        }
        let t = self.annotated_index();
        if !self.sprites.iter().any(|s| s.spawn_frame > t) {
            return bad("at least one sprite must spawn after the annotated frame".into());
        }
        if !self
            .sprites
            .iter()
            .any(|s| s.shape == Shape::Bar && s.size.0.min(s.size.1) <= 2)
        {
            return bad("at least one bar of width <= 2 is required".into());
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if s.class_id as usize >= self.num_classes && s.class_id != self.ignore_id {
                return bad(format!("sprite {i}: class {} out of range", s.class_id));
            }
            if s.size.0 == 0 || s.size.1 == 0 {
                return bad(format!("sprite {i}: empty size"));
            }
            if s.shape == Shape::Bar && s.size.0.min(s.size.1) > 2 {
                return bad(format!("sprite {i}: bars are at most 2 px wide"));
            }
            if s.spawn_frame >= self.frame_count {
                return bad(format!("sprite {i}: spawn frame beyond sequence"));
            }
            if ![s.origin.0, s.origin.1, s.velocity.0, s.velocity.1, s.texture]
                .iter()
                .all(|v| v.is_finite())
            {
                return bad(format!("sprite {i}: non-finite parameters"));
            }
        }
        if !(self.camera_pan.0.is_finite() && self.camera_pan.1.is_finite()) {
            return bad("camera pan must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.rare_quota) {
            return bad("rare quota must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// How a pixel relates to its flow source in the neighbouring frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// The same element is visible at the source.
    Consistent,
    /// The source shows a different element, or this element did not exist.
    Deoccluded,
    /// The source lies outside the neighbouring frame.
    Entering,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Image>,
    pub labels: Vec<LabelMap>,
    /// `flows[k]` maps frame `k` back to frame `k - 1`; `flows[0]` is absent.
    pub flows: Vec<Option<FlowField>>,
    /// `rev_flows[k]` maps frame `k` to frame `k + 1`; the last is absent.
    pub rev_flows: Vec<Option<FlowField>>,
    pub annotated_index: usize,
    /// Generator-only flags for `flows` and `rev_flows`; empty when loaded from disk.
    pub provenance: Vec<Option<Vec<Provenance>>>,
    pub rev_provenance: Vec<Option<Vec<Provenance>>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
    pub fn num_classes(&self) -> usize {
        self.labels[0].num_classes()
    }
    pub fn ignore_id(&self) -> u8 {
        self.labels[0].ignore_id()
    }

    /// Flow from frame `k` into its neighbour `k - 1` (`forward == true`) or `k + 1`.
    pub fn flow_into_neighbor(&self, k: usize, forward_in_time: bool) -> Option<&FlowField> {
        if forward_in_time {
            self.flows.get(k).and_then(Option::as_ref)
        } else {
            self.rev_flows.get(k).and_then(Option::as_ref)
        }
    }
}

fn floor_i(v: f32) -> i64 {
    v.floor() as i64
}

struct Element {
    shape: Shape,
    class_id: u8,
    w: i64,
    h: i64,
    origin: (f32, f32),
    velocity: (f32, f32),
    spawn: usize,
    texture: f32,
    tex_seed: u32,
}

impl Element {
    /// Screen position of the top-left corner at frame `k`.
    fn screen(&self, k: usize, pan: (f32, f32)) -> (i64, i64) {
        let dt = k as f32 - self.spawn as f32;
        (
            floor_i(self.origin.0 + self.velocity.0 * dt - pan.0 * k as f32),
            floor_i(self.origin.1 + self.velocity.1 * dt - pan.1 * k as f32),
        )
    }

    fn exists(&self, k: usize) -> bool {
        k >= self.spawn
    }

    fn covers_local(&self, lx: i64, ly: i64) -> bool {
        if lx < 0 || ly < 0 || lx >= self.w || ly >= self.h {
            return false;
        }
        match self.shape {
            Shape::Rectangle | Shape::Bar => true,
            Shape::Ellipse => {
                let (rx, ry) = (self.w as f32 / 2.0, self.h as f32 / 2.0);
                let dx = (lx as f32 + 0.5 - rx) / rx;
                let dy = (ly as f32 + 0.5 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn hash2(seed: u32, x: i64, y: i64) -> f32 {
    let mut h = seed
        .wrapping_mul(0x9E37_79B1)
        .wrapping_add((x as i32 as u32).wrapping_mul(0x85EB_CA77))
        .wrapping_add((y as i32 as u32).wrapping_mul(0xC2B2_AE3D));
    h ^= h >> 15;
    h = h.wrapping_mul(0x2C1B_3C6D);
    h ^= h >> 12;
    h = h.wrapping_mul(0x297A_2D39);
    h ^= h >> 15;
    (h as f32 / u32::MAX as f32) * 2.0 - 1.0
}

/// Smooth lattice noise in `[-1, 1]` at integer texture coordinates.
fn value_noise(seed: u32, x: i64, y: i64, scale: f32) -> f32 {
    let octave = |seed: u32, scale: f32| {
        let fx = x as f32 / scale;
        let fy = y as f32 / scale;
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        let s = |t: f32| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(tx), s(ty));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let a = hash2(seed, ix, iy);
        let b = hash2(seed, ix + 1, iy);
        let c = hash2(seed, ix, iy + 1);
        let d = hash2(seed, ix + 1, iy + 1);
        let top = a + (b - a) * sx;
        let bot = c + (d - c) * sx;
        top + (bot - top) * sy
    };
    0.7 * octave(seed, scale.max(1.0)) + 0.3 * octave(seed ^ 0x5bd1_e995, (scale / 2.0).max(1.0))
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Scene<'a> {
    cfg: &'a SceneConfig,
    /// Sorted bottom to top.
    elements: Vec<Element>,
}

const BACKDROP: usize = usize::MAX;

impl<'a> Scene<'a> {
    fn new(cfg: &'a SceneConfig) -> Self {
        let mut order: Vec<usize> = (0..cfg.sprites.len()).collect();
        order.sort_by_key(|&i| (cfg.sprites[i].depth, i));
        let elements = order
            .into_iter()
            .map(|i| {
                let s = &cfg.sprites[i];
                Element {
                    shape: s.shape,
                    class_id: s.class_id,
                    w: s.size.0 as i64,
                    h: s.size.1 as i64,
                    origin: s.origin,
                    velocity: s.velocity,
                    spawn: s.spawn_frame,
                    texture: s.texture,
                    tex_seed: (cfg.texture_seed as u32) ^ (i as u32 + 1).wrapping_mul(0x27d4_eb2f),
                }
            })
            .collect();
        Self { cfg, elements }
    }

    fn backdrop_offset(&self, k: usize) -> (i64, i64) {
        (
            floor_i(-self.cfg.camera_pan.0 * k as f32),
            floor_i(-self.cfg.camera_pan.1 * k as f32),
        )
    }

    /// Screen displacement of element `e` between frames `from` and `to`.
    fn displacement(&self, e: usize, from: usize, to: usize) -> (i64, i64) {
        let pan = self.cfg.camera_pan;
        let (a, b) = if e == BACKDROP {
            (self.backdrop_offset(from), self.backdrop_offset(to))
        } else {
            (self.elements[e].screen(from, pan), self.elements[e].screen(to, pan))
        };
        (b.0 - a.0, b.1 - a.1)
    }

    /// Per-pixel index of the topmost element at frame `k`.
    fn top_map(&self, k: usize) -> Vec<usize> {
        let (w, h) = (self.cfg.width as i64, self.cfg.height as i64);
        let mut top = vec![BACKDROP; (w * h) as usize];
        for (ei, e) in self.elements.iter().enumerate() {
            if !e.exists(k) {
                continue;
            }
            let (sx, sy) = e.screen(k, self.cfg.camera_pan);
            for y in sy.max(0)..(sy + e.h).min(h) {
                for x in sx.max(0)..(sx + e.w).min(w) {
                    if e.covers_local(x - sx, y - sy) {
                        top[(y * w + x) as usize] = ei;
                    }
                }
            }
        }
        top
    }

    fn class_of(&self, e: usize) -> u8 {
        if e == BACKDROP {
            self.cfg.backdrop_class
        } else {
            self.elements[e].class_id
        }
    }

    fn color(&self, e: usize, k: usize, x: i64, y: i64) -> [f32; 3] {
        let class = self.class_of(e);
        let base = if class == self.cfg.ignore_id {
            self.cfg.ignore_color
        } else {
            self.cfg.class_colors[class as usize]
        };
        let (amp, seed, lx, ly) = if e == BACKDROP {
            let (ox, oy) = self.backdrop_offset(k);
            (self.cfg.backdrop_texture, self.cfg.texture_seed as u32, x - ox, y - oy)
        } else {
            let el = &self.elements[e];
            let (sx, sy) = el.screen(k, self.cfg.camera_pan);
            (el.texture, el.tex_seed, x - sx, y - sy)
        };
        let mut rgb = base;
        if amp > 0.0 {
            let n = value_noise(seed, lx, ly, self.cfg.texture_scale);
            let tint = value_noise(seed ^ 0xabcd_1234, lx, ly, self.cfg.texture_scale * 1.7);
            rgb[0] += amp * n;
            rgb[1] += amp * (0.8 * n + 0.2 * tint);
            rgb[2] += amp * (0.6 * n - 0.4 * tint);
        }
        rgb.map(quantize)
    }

    /// Flow into frame `to` for every pixel of frame `from`, with provenance.
    fn flow(&self, from: usize, to: usize, tops: &[Vec<usize>]) -> (FlowField, Vec<Provenance>) {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut data = Vec::with_capacity(w * h);
        let mut prov = Vec::with_capacity(w * h);
        let top_from = &tops[from];
        let top_to = &tops[to];
        for y in 0..h {
            for x in 0..w {
                let e = top_from[y * w + x];
                let (dx, dy) = self.displacement(e, from, to);
                data.push([dx as f32, dy as f32]);
                let (srcx, srcy) = (x as i64 + dx, y as i64 + dy);
                let p = if srcx < 0 || srcy < 0 || srcx >= w as i64 || srcy >= h as i64 {
                    Provenance::Entering
                } else if e != BACKDROP && !self.elements[e].exists(to) {
                    Provenance::Deoccluded
                } else if top_to[srcy as usize * w + srcx as usize] == e {
                    Provenance::Consistent
                } else {
                    Provenance::Deoccluded
                };
                prov.push(p);
            }
        }
        (FlowField::new(w, h, data).expect("integral flow is finite"), prov)
    }
}

/// Renders a scene into a sequence; a pure function of the configuration.
pub fn generate(cfg: &SceneConfig) -> Result<Sequence> {
    cfg.validate()?;
    let scene = Scene::new(cfg);
    let (w, h) = (cfg.width, cfg.height);
    let n = cfg.frame_count;
    let tops: Vec<Vec<usize>> = (0..n).map(|k| scene.top_map(k)).collect();

    let mut frames = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (k, top) in tops.iter().enumerate() {
        let mut rgb = Vec::with_capacity(w * h * 3);
        let mut ids = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let e = top[y * w + x];
                ids.push(scene.class_of(e));
                rgb.extend_from_slice(&scene.color(e, k, x as i64, y as i64));
            }
        }
        frames.push(Image::new(w, h, 3, rgb)?);
        labels.push(LabelMap::new(w, h, cfg.num_classes, cfg.ignore_id, ids)?);
    }

    if let Some(rare) = cfg.rare_class {
        let total = n * w * h;
        let count: usize = labels
            .iter()
            .map(|l| l.data().iter().filter(|&&v| v == rare).count())
            .sum();
        if count as f32 > cfg.rare_quota * total as f32 {
            return Err(Error::Config(format!(
                "rare class {rare} covers {count} of {total} pixels, above quota {}",
                cfg.rare_quota
            )));
        }
    }

    let mut flows = vec![None; n];
    let mut provenance = vec![None; n];
    let mut rev_flows = vec![None; n];
    let mut rev_provenance = vec![None; n];
    for k in 1..n {
        let (f, p) = scene.flow(k, k - 1, &tops);
        flows[k] = Some(f);
        provenance[k] = Some(p);
        let (rf, rp) = scene.flow(k - 1, k, &tops);
        rev_flows[k - 1] = Some(rf);
        rev_provenance[k - 1] = Some(rp);
    }

    Ok(Sequence {
        frames,
        labels,
        flows,
        rev_flows,
        annotated_index: cfg.annotated_index(),
        provenance,
        rev_provenance,
    })
}

/// Semantic confusion partners for the standard classes. Nothing is
/// confused into the rare class, so it is only ever predicted where it exists.
pub const STANDARD_CONFUSION_TABLE: [u8; 8] = [
    class::BUILDING,
    class::BUILDING,
    class::SKY,
    class::BUS,
    class::CAR,
    class::CAR,
    class::PERSON,
    class::BUILDING,
];

pub const STANDARD_CLASS_NAMES: [&str; 8] = [
    "sky", "road", "building", "car", "bus", "person", "bicycle", "pole",
];

pub mod class {
    pub const SKY: u8 = 0;
    pub const ROAD: u8 = 1;
    pub const BUILDING: u8 = 2;
    pub const CAR: u8 = 3;
    pub const BUS: u8 = 4;
    pub const PERSON: u8 = 5;
    pub const BICYCLE: u8 = 6;
    pub const POLE: u8 = 7;
}

/// The canonical 96x96, 21-frame, 8-class scene family.
///
/// Layout: sky backdrop with an unlabelled (ignore) patch that stays in view
/// and is never crossed by moving content, buildings on a horizon, a road
/// carrying a car, a bus and a pedestrian, one or two static poles, a car
/// entering after the annotated frame, and a rare bicycle appearing late.
pub fn standard_benchmark(seed: u64) -> SceneConfig {
    use class::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4_e000_0000_0001);
    let (width, height, frame_count) = (96usize, 96usize, 21usize);
    let t = (frame_count - 1) / 2;
    let pan = (0.5f32, 0.0f32);
    let horizon = rng.random_range(46..54) as f32;
    let mut sprites = Vec::new();
    let whole = |v: f32| v.floor();

    sprites.push(SpriteSpec {
        shape: Shape::Rectangle,
        class_id: ROAD,
        size: (200, (height as f32 - horizon) as u32 + 4),
        origin: (-40.0, horizon),
        velocity: (0.0, 0.0),
        spawn_frame: 0,
        depth: 1,
        texture: 0.05,
    });

    let n_buildings = rng.random_range(2..=3);
    let mut bx = rng.random_range(-6.0f32..10.0);
    for _ in 0..n_buildings {
        let bw = rng.random_range(14..30);
        let bh = rng.random_range(14..26);
        sprites.push(SpriteSpec {
            shape: Shape::Rectangle,
            class_id: BUILDING,
            size: (bw, bh),
            origin: (whole(bx), horizon - bh as f32),
            velocity: (0.0, 0.0),
            spawn_frame: 0,
            depth: 1,
            texture: 0.06,
        });
        bx += bw as f32 + rng.random_range(6.0f32..24.0);
    }

    // unlabelled patch in the sky, inside the view for every frame
    let iw = rng.random_range(12..20);
    let ih = rng.random_range(6..10);
    let ix = whole(rng.random_range(14.0f32..(width as f32 - iw as f32 - 4.0)));
    sprites.push(SpriteSpec {
        shape: Shape::Ellipse,
        class_id: DEFAULT_IGNORE_ID,
        size: (iw, ih),
        origin: (ix, whole(rng.random_range(3.0f32..(horizon - 28.0).max(4.0)))),
        velocity: (0.0, 0.0),
        spawn_frame: 0,
        depth: 2,
        texture: 0.04,
    });

    let lane = |rng: &mut ChaCha8Rng, h: u32| {
        whole(rng.random_range(horizon + 2.0..(height as f32 - h as f32 - 2.0)))
    };
    let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0f32 } else { -1.0 };

    let movers = [
        (Shape::Rectangle, CAR, (16u32, 8u32), 1.0f32, 2.5f32),
        (Shape::Rectangle, BUS, (26, 12), 0.5, 1.5),
        (Shape::Ellipse, PERSON, (5, 11), 0.25, 0.75),
    ];
    for (depth, (shape, class_id, size, vmin, vmax)) in movers.into_iter().enumerate() {
        let y = lane(&mut rng, size.1);
        let vx = sign(&mut rng) * rng.random_range(vmin..vmax);
        let vy = rng.random_range(-0.25f32..0.25);
        // keep the element around the annotated frame in view
        let x_at_t = rng.random_range(8.0f32..(width as f32 - size.0 as f32 - 8.0));
        let x0 = x_at_t - vx * t as f32 + pan.0 * t as f32;
        sprites.push(SpriteSpec {
            shape,
            class_id,
            size,
            origin: (x0, y - vy * t as f32),
            velocity: (vx, vy),
            spawn_frame: 0,
            depth: 3 + depth as i32,
            texture: 0.03,
        });
    }

    // new content after the annotated frame
    let spawn = rng.random_range(t + 1..t + 4);
    let from_left = rng.random_bool(0.5);
    let speed = rng.random_range(2.0f32..3.0);
    let (cw, ch) = (14u32, 7u32);
    let cam = pan.0 * spawn as f32;
    sprites.push(SpriteSpec {
        shape: Shape::Rectangle,
        class_id: CAR,
        size: (cw, ch),
        origin: if from_left {
            (cam - cw as f32 + 2.0, lane(&mut rng, ch))
        } else {
            (cam + width as f32 - 2.0, lane(&mut rng, ch))
        },
        velocity: (if from_left { speed } else { -speed }, 0.0),
        spawn_frame: spawn,
        depth: 7,
        texture: 0.03,
    });

    let rare_spawn = rng.random_range(t + 3..t + 7);
    let rare_left = rng.random_bool(0.5);
    let cam = pan.0 * rare_spawn as f32;
    let (rw, rh) = (7u32, 5u32);
    sprites.push(SpriteSpec {
        shape: Shape::Ellipse,
        class_id: BICYCLE,
        size: (rw, rh),
        origin: if rare_left {
            (cam + 1.0, lane(&mut rng, rh))
        } else {
            (cam + width as f32 - rw as f32 - 1.0, lane(&mut rng, rh))
        },
        velocity: (if rare_left { 2.0 } else { -2.0 }, 0.0),
        spawn_frame: rare_spawn,
        depth: 8,
        texture: 0.02,
    });

    let n_poles = rng.random_range(1..=2);
    for i in 0..n_poles {
        let pw = if i == 0 { 1 } else { rng.random_range(1..=2) };
        let ph = rng.random_range(24..34);
        let px = whole(rng.random_range(10.0f32..(width as f32 + 4.0)));
        sprites.push(SpriteSpec {
            shape: Shape::Bar,
            class_id: POLE,
            size: (pw, ph),
            origin: (px, horizon + 6.0 - ph as f32),
            velocity: (0.0, 0.0),
            spawn_frame: 0,
            depth: 10,
            texture: 0.0,
        });
    }

    SceneConfig {
        width,
        height,
        frame_count,
        num_classes: STANDARD_CLASS_NAMES.len(),
        ignore_id: DEFAULT_IGNORE_ID,
        class_names: STANDARD_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        class_colors: vec![
            [0.55, 0.70, 0.90],
            [0.33, 0.33, 0.36],
            [0.62, 0.42, 0.30],
            [0.85, 0.12, 0.12],
            [0.95, 0.78, 0.10],
            [0.15, 0.70, 0.25],
            [0.70, 0.20, 0.85],
            [0.05, 0.05, 0.05],
        ],
        ignore_color: [0.40, 0.60, 0.55],
        backdrop_class: SKY,
        backdrop_texture: 0.06,
        texture_scale: 6.0,
        texture_seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7e57,
        sprites,
        camera_pan: pan,
        rare_class: Some(BICYCLE),
        rare_quota: 0.05,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(sprites: Vec<SpriteSpec>, pan: (f32, f32)) -> SceneConfig {
        let mut all = sprites;
        // offscreen late spawner and thin bar satisfy the scene invariants
        all.push(SpriteSpec {
            shape: Shape::Rectangle,
            class_id: 1,
            size: (3, 3),
            origin: (-100.0, -100.0),
            velocity: (0.0, 0.0),
            spawn_frame: 4,
            depth: 0,
            texture: 0.0,
        });
        all.push(SpriteSpec {
            shape: Shape::Bar,
            class_id: 2,
            size: (1, 6),
            origin: (2.0, 1.0),
            velocity: (0.0, 0.0),
            spawn_frame: 0,
            depth: 9,
            texture: 0.0,
        });
        SceneConfig {
            width: 24,
            height: 16,
            frame_count: 5,
            num_classes: 3,
            ignore_id: DEFAULT_IGNORE_ID,
            class_names: vec!["bg".into(), "box".into(), "bar".into()],
            class_colors: vec![[0.5, 0.5, 0.5], [0.9, 0.1, 0.1], [0.0, 0.0, 0.0]],
            ignore_color: [0.2, 0.8, 0.2],
            backdrop_class: 0,
            backdrop_texture: 0.05,
            texture_scale: 4.0,
            texture_seed: 3,
            sprites: all,
            camera_pan: pan,
            rare_class: None,
            rare_quota: 1.0,
            seed: 0,
        }
    }

    fn rect(x: f32, y: f32, vx: f32) -> SpriteSpec {
        SpriteSpec {
            shape: Shape::Rectangle,
            class_id: 1,
            size: (5, 4),
            origin: (x, y),
            velocity: (vx, 0.0),
            spawn_frame: 0,
            depth: 1,
            texture: 0.0,
        }
    }

    #[test]
    fn static_scene_has_zero_flow_and_constant_labels() {
        let seq = generate(&minimal(vec![rect(8.0, 6.0, 0.0)], (0.0, 0.0))).unwrap();
        for k in 1..seq.len() {
            assert!(seq.flows[k].as_ref().unwrap().data().iter().all(|d| *d == [0.0, 0.0]));
            assert_eq!(seq.labels[k], seq.labels[0]);
        }
    }

    /// Brute-force rasterization of a lone rectangle, independent of `Scene`.
    fn rect_mask(w: usize, h: usize, x0: i64, y0: i64, rw: i64, rh: i64) -> Vec<bool> {
        let mut m = vec![false; w * h];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                m[(y as usize) * w + x as usize] = x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh;
            }
        }
        m
    }

    #[test]
    fn moving_rectangle_flow_matches_rasterized_masks() {
        let cfg = minimal(vec![rect(8.0, 6.0, 1.0)], (0.0, 0.0));
        let seq = generate(&cfg).unwrap();
        let (w, h) = (cfg.width, cfg.height);
        for k in 1..seq.len() {
            let now = rect_mask(w, h, 8 + k as i64, 6, 5, 4);
            let before = rect_mask(w, h, 8 + k as i64 - 1, 6, 5, 4);
            let flow = seq.flows[k].as_ref().unwrap();
            for y in 0..h {
                for x in 0..w {
                    if now[y * w + x] {
                        assert_eq!(flow.get(x, y), [-1.0, 0.0]);
                        let sx = (x as f32 + flow.get(x, y)[0]) as usize;
                        assert!(before[y * w + sx]);
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = generate(&standard_benchmark(5)).unwrap();
        let b = generate(&standard_benchmark(5)).unwrap();
        assert_eq!(a, b);
        let c = generate(&standard_benchmark(6)).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    fn remap_nearest(labels: &LabelMap, flow: &FlowField, x: usize, y: usize) -> Option<u8> {
        let [u, v] = flow.get(x, y);
        let (sx, sy) = ((x as f32 + u).round() as i64, (y as f32 + v).round() as i64);
        if sx < 0 || sy < 0 || sx >= labels.width() as i64 || sy >= labels.height() as i64 {
            return None;
        }
        Some(labels.get(sx as usize, sy as usize))
    }

    #[test]
    fn ground_truth_consistency_and_reversibility() {
        for seed in 0..4 {
            let seq = generate(&standard_benchmark(seed)).unwrap();
            let (w, h) = seq.dims();
            let mut checked = 0usize;
            for k in 1..seq.len() {
                let flow = seq.flows[k].as_ref().unwrap();
                let prov = seq.provenance[k].as_ref().unwrap();
                let rflow = seq.rev_flows[k - 1].as_ref().unwrap();
                let rprov = seq.rev_provenance[k - 1].as_ref().unwrap();
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        if prov[i] == Provenance::Consistent {
                            assert_eq!(
                                remap_nearest(&seq.labels[k - 1], flow, x, y),
                                Some(seq.labels[k].get(x, y))
                            );
                            checked += 1;
                        }
                        if rprov[i] == Provenance::Consistent {
                            assert_eq!(
                                remap_nearest(&seq.labels[k], rflow, x, y),
                                Some(seq.labels[k - 1].get(x, y))
                            );
                        }
                    }
                }
            }
            assert!(checked > (seq.len() - 1) * w * h * 8 / 10);
        }
    }

    #[test]
    fn consistent_pixels_are_photometrically_exact() {
        let seq = generate(&standard_benchmark(2)).unwrap();
        let (w, h) = seq.dims();
        for k in 1..seq.len() {
            let flow = seq.flows[k].as_ref().unwrap();
            let prov = seq.provenance[k].as_ref().unwrap();
            for y in 0..h {
                for x in 0..w {
                    if prov[y * w + x] == Provenance::Consistent {
                        let [u, v] = flow.get(x, y);
                        let (sx, sy) = ((x as f32 + u) as usize, (y as f32 + v) as usize);
                        assert_eq!(seq.frames[k].pixel(x, y), seq.frames[k - 1].pixel(sx, sy));
                    }
                }
            }
        }
    }

    #[test]
    fn standard_benchmark_properties() {
        for seed in 0..10 {
            let cfg = standard_benchmark(seed);
            assert_eq!(cfg.annotated_index(), 10);
            assert_eq!((cfg.width, cfg.height, cfg.frame_count, cfg.num_classes), (96, 96, 21, 8));
            let seq = generate(&cfg).unwrap();
            let total: usize = seq.labels.iter().map(|l| l.data().len()).sum();
            let rare: usize = seq
                .labels
                .iter()
                .map(|l| l.data().iter().filter(|&&v| v == class::BICYCLE).count())
                .sum();
            assert!((rare as f64) / (total as f64) < 0.05);
            let at_t: std::collections::BTreeSet<u8> =
                seq.labels[10].data().iter().copied().collect();
            let novel = seq.labels[11..].iter().any(|l| l.data().iter().any(|v| !at_t.contains(v)));
            assert!(novel, "seed {seed}: no new classes after the annotated frame");
            // the ignore patch is visible in every frame and never de-occluded or entering
            for k in 1..seq.len() {
                let prov = seq.provenance[k].as_ref().unwrap();
                let rprov = seq.rev_provenance[k - 1].as_ref().unwrap();
                for (i, &id) in seq.labels[k].data().iter().enumerate() {
                    if id == DEFAULT_IGNORE_ID {
                        assert_eq!(prov[i], Provenance::Consistent);
                    }
                }
                for (i, &id) in seq.labels[k - 1].data().iter().enumerate() {
                    if id == DEFAULT_IGNORE_ID {
                        assert_eq!(rprov[i], Provenance::Consistent);
                    }
                }
                assert!(seq.labels[k].data().contains(&DEFAULT_IGNORE_ID));
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = minimal(vec![], (0.0, 0.0));
        cfg.frame_count = 4;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = minimal(vec![], (0.0, 0.0));
        cfg.sprites.retain(|s| s.shape != Shape::Bar);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = minimal(vec![], (0.0, 0.0));
        cfg.sprites.retain(|s| s.spawn_frame == 0);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
