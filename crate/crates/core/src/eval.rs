//! Confusion matrices, IoU, mIoU-vs-horizon curves, tau sweeps and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::flowio::{read_bytes, write_bytes};
use crate::grid::LabelMap;
use crate::oracles::Oracles;
use crate::propagation::{propagate, GateConfig, LabelRepresentation, Method, PropagateConfig};
use crate::refine::RefinerParams;
use crate::synth::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IgnorePolicy {
    /// Ignore is an extra class: it has its own IoU and enters the mean.
    #[default]
    AsClass,
    /// Pixels whose ground truth is ignore are skipped.
    Excluded,
}

impl std::str::FromStr for IgnorePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-class" => Ok(Self::AsClass),
            "excluded" => Ok(Self::Excluded),
            _ => Err(Error::Validation(format!("unknown ignore policy {s:?}"))),
        }
    }
}

/// `(C + 1) x (C + 1)` counts indexed `[gt][pred]`; slot `C` is ignore.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_id: u8,
    policy: IgnorePolicy,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_id: u8, policy: IgnorePolicy) -> Self {
        let s = num_classes + 1;
        Self { num_classes, ignore_id, policy, counts: vec![0; s * s] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn policy(&self) -> IgnorePolicy {
        self.policy
    }

    fn side(&self) -> usize {
        self.num_classes + 1
    }

    fn slot(&self, v: u8) -> usize {
        if v == self.ignore_id {
            self.num_classes
        } else {
            v as usize
        }
    }

    /// Count at `[gt][pred]`, slots indexed by class id with `C` for ignore.
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.side() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add_pixel(&mut self, pred: u8, gt: u8) {
        if self.policy == IgnorePolicy::Excluded && gt == self.ignore_id {
            return;
        }
        let i = self.slot(gt) * self.side() + self.slot(pred);
        self.counts[i] += 1;
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        ensure_same_dims("accumulate", pred.dims(), gt.dims())?;
        if pred.num_classes() != self.num_classes
            || gt.num_classes() != self.num_classes
            || pred.ignore_id() != self.ignore_id
            || gt.ignore_id() != self.ignore_id
        {
            return Err(Error::Shape("accumulate: class space differs from matrix".into()));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.add_pixel(p, g);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes || self.policy != other.policy || self.ignore_id != other.ignore_id {
            return Err(Error::Shape("merge: matrices differ in class space or policy".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// The same counts under `policy`; only the as-class to excluded direction loses nothing.
    pub fn with_policy(&self, policy: IgnorePolicy) -> Result<ConfusionMatrix> {
        match (self.policy, policy) {
            (a, b) if a == b => Ok(self.clone()),
            (IgnorePolicy::AsClass, IgnorePolicy::Excluded) => {
                let mut m = self.clone();
                m.policy = policy;
                let s = self.side();
                m.counts[self.num_classes * s..].fill(0);
                Ok(m)
            }
            _ => Err(Error::Validation("cannot recover ignore rows from an excluded matrix".into())),
        }
    }

    /// Slots that take part in the mean under the matrix policy.
    pub fn class_slots(&self) -> std::ops::Range<usize> {
        match self.policy {
            IgnorePolicy::AsClass => 0..self.side(),
            IgnorePolicy::Excluded => 0..self.num_classes,
        }
    }

    /// `(TP, FP, FN)` for a slot.
    pub fn tp_fp_fn(&self, slot: usize) -> (u64, u64, u64) {
        let s = self.side();
        let tp = self.get(slot, slot);
        let row: u64 = (0..s).map(|j| self.get(slot, j)).sum();
        let col: u64 = (0..s).map(|i| self.get(i, slot)).sum();
        (tp, col - tp, row - tp)
    }

    /// `TP / (TP + FP + FN)`, or `None` when the union is empty.
    pub fn iou(&self, slot: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.tp_fp_fn(slot);
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over slots with a nonzero union; `None` if there are none.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.class_slots().filter_map(|c| self.iou(c)).collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Fraction of non-ignore ground-truth pixels predicted correctly.
pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap) -> Result<(u64, u64)> {
    ensure_same_dims("pixel_accuracy", pred.dims(), gt.dims())?;
    let mut hit = 0;
    let mut total = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g != gt.ignore_id() {
            total += 1;
            hit += u64::from(p == g);
        }
    }
    Ok((hit, total))
}

/// One propagation run to score: an annotated frame and its noise oracles.
#[derive(Debug, Clone)]
pub struct EvalJob<'a> {
    pub name: String,
    pub sequence: &'a Sequence,
    pub annotated_index: usize,
    pub oracles: Oracles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub methods: Vec<Method>,
    pub horizon: usize,
    pub gate: GateConfig,
    pub refine_every_step: bool,
    pub label_representation: LabelRepresentation,
    pub policy: IgnorePolicy,
}

impl HorizonConfig {
    pub fn new(methods: Vec<Method>, horizon: usize) -> Self {
        Self {
            methods,
            horizon,
            gate: GateConfig::default(),
            refine_every_step: true,
            label_representation: LabelRepresentation::Hard,
            policy: IgnorePolicy::AsClass,
        }
    }

    fn propagate_config(&self, method: Method) -> PropagateConfig {
        PropagateConfig {
            horizon: self.horizon,
            method,
            gate: self.gate,
            refine_every_step: self.refine_every_step,
            label_representation: self.label_representation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetResult {
    pub offset: i64,
    pub matrix: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: Method,
    pub offsets: Vec<OffsetResult>,
}

impl MethodCurve {
    pub fn miou_at(&self, offset: i64) -> Option<f64> {
        self.offsets.iter().find(|o| o.offset == offset).and_then(|o| o.matrix.miou())
    }

    /// Mean of the `+d` and `-d` mIoUs (whichever exist).
    pub fn miou_abs(&self, d: u64) -> Option<f64> {
        let v: Vec<f64> = [d as i64, -(d as i64)].iter().filter_map(|&o| self.miou_at(o)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean mIoU over every offset.
    pub fn grand_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.offsets.iter().filter_map(|o| o.matrix.miou()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub horizon: usize,
    pub runs: usize,
    pub config: HorizonConfig,
    pub curves: Vec<MethodCurve>,
}

impl HorizonReport {
    pub fn curve(&self, method: Method) -> Option<&MethodCurve> {
        self.curves.iter().find(|c| c.method == method)
    }

    /// The same report re-scored under another ignore policy.
    pub fn with_policy(&self, policy: IgnorePolicy) -> Result<HorizonReport> {
        let mut r = self.clone();
        r.config.policy = policy;
        for c in &mut r.curves {
            for o in &mut c.offsets {
                o.matrix = o.matrix.with_policy(policy)?;
            }
        }
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("report JSON: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        Self::from_json(&String::from_utf8_lossy(&bytes))
    }
}

/// Worker pool with `threads` workers (0 means rayon's default).
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Propagates every job with every method and pools per-offset confusion counts.
pub fn horizon_curve(
    jobs: &[EvalJob<'_>],
    cfg: &HorizonConfig,
    class_names: &[String],
    refiner: Option<&RefinerParams>,
    threads: usize,
) -> Result<HorizonReport> {
    let first = jobs.first().ok_or_else(|| Error::Config("evaluation needs at least one sequence".into()))?;
    if cfg.methods.is_empty() {
        return Err(Error::Config("evaluation needs at least one method".into()));
    }
    let (c, ignore) = (first.sequence.num_classes(), first.sequence.ignore_id());
    if jobs.iter().any(|j| j.sequence.num_classes() != c || j.sequence.ignore_id() != ignore) {
        return Err(Error::Validation("sequences disagree on the class space".into()));
    }
    let tasks: Vec<(usize, Method)> =
        (0..jobs.len()).flat_map(|j| cfg.methods.iter().map(move |&m| (j, m))).collect();
    let run = |&(j, m): &(usize, Method)| -> Result<BTreeMap<i64, ConfusionMatrix>> {
        let job = &jobs[j];
        let r = if m == Method::WarpRefine { refiner } else { None };
        let out = propagate(job.sequence, job.annotated_index, &cfg.propagate_config(m), &job.oracles, r)?;
        let mut mats = BTreeMap::new();
        for (off, pred) in out {
            let gt = &job.sequence.labels[(job.annotated_index as i64 + off) as usize];
            let mut cm = ConfusionMatrix::new(c, ignore, cfg.policy);
            cm.accumulate(&pred, gt)?;
            mats.insert(off, cm);
        }
        Ok(mats)
    };
    let results: Vec<Result<BTreeMap<i64, ConfusionMatrix>>> = if threads == 1 {
        tasks.iter().map(run).collect()
    } else {
        thread_pool(threads)?.install(|| tasks.par_iter().map(run).collect())
    };
    let mut pooled: BTreeMap<Method, BTreeMap<i64, ConfusionMatrix>> = BTreeMap::new();
    for ((_, m), res) in tasks.iter().zip(results) {
        let entry = pooled.entry(*m).or_default();
        for (off, cm) in res? {
            match entry.get_mut(&off) {
                Some(acc) => acc.merge(&cm)?,
                None => {
                    entry.insert(off, cm);
                }
            }
        }
    }
    let curves = cfg
        .methods
        .iter()
        .map(|m| MethodCurve {
            method: *m,
            offsets: pooled
                .remove(m)
                .unwrap_or_default()
                .into_iter()
                .map(|(offset, matrix)| OffsetResult { offset, matrix })
                .collect(),
        })
        .collect();
    let mut names: Vec<String> = class_names.to_vec();
    names.resize_with(c, || String::new());
    for (i, n) in names.iter_mut().enumerate() {
        if n.is_empty() {
            *n = format!("class{i}");
        }
    }
    Ok(HorizonReport { num_classes: c, class_names: names, horizon: cfg.horizon, runs: jobs.len(), config: cfg.clone(), curves })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f32,
    pub grand_mean_miou: f64,
}

/// Warp-inpaint grand-mean mIoU for each gate threshold.
pub fn tau_sweep(
    jobs: &[EvalJob<'_>],
    taus: &[f32],
    horizon: usize,
    policy: IgnorePolicy,
    threads: usize,
) -> Result<Vec<TauRow>> {
    if taus.is_empty() {
        return Err(Error::Config("tau sweep needs at least one tau".into()));
    }
    taus.iter()
        .map(|&tau| {
            let mut cfg = HorizonConfig::new(vec![Method::WarpInpaint], horizon);
            cfg.gate = GateConfig { tau, ..GateConfig::default() };
            cfg.policy = policy;
            let r = horizon_curve(jobs, &cfg, &[], None, threads)?;
            Ok(TauRow { tau, grand_mean_miou: r.curves[0].grand_mean().unwrap_or(0.0) })
        })
        .collect()
}

pub fn tau_sweep_csv(rows: &[TauRow]) -> String {
    let mut s = String::from("tau,grand_mean_miou\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6}", r.tau, r.grand_mean_miou);
    }
    s
}

/// `method,offset,class,iou` for every present class.
pub fn horizon_csv(report: &HorizonReport) -> String {
    let mut s = String::from("method,offset,class,iou\n");
    for c in &report.curves {
        for o in &c.offsets {
            for slot in o.matrix.class_slots() {
                if let Some(iou) = o.matrix.iou(slot) {
                    let name = report.class_names.get(slot).map_or("ignore", String::as_str);
                    let _ = writeln!(s, "{},{},{},{:.6}", c.method, o.offset, name, iou);
                }
            }
        }
    }
    s
}

/// `method,abs_offset,miou_pos,miou_neg,miou`; `abs_offset = all` holds the grand mean.
pub fn summary_csv(report: &HorizonReport) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut s = String::from("method,abs_offset,miou_pos,miou_neg,miou\n");
    for c in &report.curves {
        for d in 1..=report.horizon as u64 {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.method,
                d,
                fmt(c.miou_at(d as i64)),
                fmt(c.miou_at(-(d as i64))),
                fmt(c.miou_abs(d))
            );
        }
        let _ = writeln!(s, "{},all,,,{}", c.method, fmt(c.grand_mean()));
    }
    s
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// mIoU against |offset|, one polyline per method.
pub fn curve_svg(report: &HorizonReport) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let kmax = report.horizon.max(1) as f64;
    let px = |d: f64| m + (d - 1.0).max(0.0) / (kmax - 1.0).max(1.0) * (w - 2.0 * m);
    let py = |v: f64| h - m - v * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{v:.2}</text>"#, m - 6.0, py(v) + 4.0);
    }
    for d in 1..=report.horizon {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{d}</text>"#, px(d as f64), h - m + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">|offset| (frames)</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">mIoU</text>"#, h / 2.0, h / 2.0);
    for (i, c) in report.curves.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let pts: Vec<String> = (1..=report.horizon as u64)
            .filter_map(|d| c.miou_abs(d).map(|v| format!("{:.1},{:.1}", px(d as f64), py(v))))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            w - m - 110.0,
            m + 16.0 * i as f64,
            c.method
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `horizon.csv`, `summary.csv` and `curve.svg` into `out_dir`.
pub fn emit_report(report: &HorizonReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_bytes(out_dir.join("horizon.csv"), horizon_csv(report).as_bytes())?;
    write_bytes(out_dir.join("summary.csv"), summary_csv(report).as_bytes())?;
    write_bytes(out_dir.join("curve.svg"), curve_svg(report).as_bytes())
}
