//! Command line front end: `gen`, `propagate`, `train-refiner`, `eval`,
//! `report`, `tau-sweep` and `gradcheck`.
//!
//! Settings resolve in three layers: built-in defaults, then values taken
//! from the dataset manifest, then flags and `--set key=value` overrides.
//! Every run writes `run.json` with the resolved settings and where each
//! non-default value came from.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::eval::{
    emit_report, horizon_curve, tau_sweep, tau_sweep_csv, EvalJob, HorizonConfig, HorizonReport, IgnorePolicy,
};
use crate::flowio::{
    load_manifest, read_sequence, save_manifest, write_bytes, write_label_image, write_sequence, DatasetManifest,
    MANIFEST_VERSION,
};
use crate::oracles::{mix_seed, MotionNoiseConfig, Oracles, SemanticNoiseConfig};
use crate::propagation::{propagate, GateConfig, LabelRepresentation, Method, PropagateConfig};
use crate::refine::{
    gradient_check, random_sample, training_frames, train, write_loss_trace, RefinerParams, TrainConfig,
};
use crate::synth::{generate, standard_benchmark, Sequence, STANDARD_CLASS_NAMES};

#[derive(Debug, Parser)]
#[command(name = "labelprop", version, about = "Dense label propagation through video")]
pub struct Cli {
    /// Worker threads for evaluation; 1 is bit-deterministic, 0 uses every core.
    #[arg(long, global = true, env = "LABELPROP_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate standard-benchmark sequences and a manifest.
    Gen(GenArgs),
    /// Propagate the annotated frame of every sequence with one method.
    Propagate(PropagateArgs),
    /// Train the label refiner with cycle consistency.
    TrainRefiner(TrainArgs),
    /// Score methods against ground truth over the horizon.
    Eval(EvalArgs),
    /// Re-emit CSV and SVG files from a saved report.
    Report(ReportArgs),
    /// Warp-inpaint grand-mean mIoU as a function of the gate threshold.
    TauSweep(TauArgs),
    /// Compare analytic and finite-difference refiner gradients.
    Gradcheck(GradArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of sequences.
    #[arg(long)]
    pub count: Option<usize>,
    /// Oracle noise recorded in the manifest: standard or perfect.
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub tau: Option<f32>,
    /// Refiner parameters; required for warp-refine.
    #[arg(long)]
    pub refiner: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output params file; `loss_trace.csv` and `run.json` go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated methods.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub tau: Option<f32>,
    #[arg(long)]
    pub refiner: Option<PathBuf>,
    /// Skip pixels whose ground truth is ignore instead of scoring ignore as a class.
    #[arg(long)]
    pub exclude_ignore: bool,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A `report.json` written by `eval`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub exclude_ignore: bool,
}

#[derive(Debug, Args)]
pub struct TauArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long)]
    pub taus: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub exclude_ignore: bool,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLevel {
    Standard,
    Perfect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenSettings {
    seed: u64,
    count: usize,
    noise: NoiseLevel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseSettings {
    motion_noise: MotionNoiseConfig,
    semantic_noise: SemanticNoiseConfig,
    /// Base seed from which per-sequence oracle seeds are derived.
    noise_seed: u64,
    /// Independent noise draws per sequence.
    noise_seeds: usize,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        let o = Oracles::perfect();
        Self { motion_noise: o.motion, semantic_noise: o.semantic, noise_seed: 0, noise_seeds: 1 }
    }
}

impl NoiseSettings {
    fn oracles(&self, sequence: usize, draw: usize) -> Oracles {
        Oracles { motion: self.motion_noise.clone(), semantic: self.semantic_noise.clone() }
            .reseeded(mix_seed(self.noise_seed, sequence as u64, draw as u64))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PropagateSettings {
    method: Method,
    horizon: usize,
    gate: GateConfig,
    refine_every_step: bool,
    label_representation: LabelRepresentation,
    noise: NoiseSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSettings {
    train: TrainConfig,
    init_seed: u64,
    noise: NoiseSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSettings {
    methods: Vec<Method>,
    horizon: usize,
    gate: GateConfig,
    refine_every_step: bool,
    label_representation: LabelRepresentation,
    policy: IgnorePolicy,
    noise: NoiseSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TauSettings {
    taus: Vec<f32>,
    horizon: usize,
    policy: IgnorePolicy,
    noise: NoiseSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradSettings {
    seed: u64,
    tolerance: f64,
    width: usize,
    height: usize,
    num_classes: usize,
}

/// Layered settings: defaults, then manifest values, then overrides.
struct Layers {
    value: Value,
    sources: BTreeMap<String, &'static str>,
}

impl Layers {
    fn new<T: Serialize>(defaults: &T) -> Self {
        Self { value: serde_json::to_value(defaults).expect("settings serialize"), sources: BTreeMap::new() }
    }

    fn set(&mut self, key: &str, v: Value, source: &'static str) -> Result<()> {
        let mut node = &mut self.value;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Validation(format!("setting {key:?}: {p:?} is not inside an object")))?;
            if !obj.contains_key(*p) {
                return Err(Error::Validation(format!("unknown setting {key:?}")));
            }
            if i + 1 == parts.len() {
                obj.insert(p.to_string(), v);
                self.sources.insert(key.to_string(), source);
                return Ok(());
            }
            node = obj.get_mut(*p).expect("checked");
        }
        unreachable!("split yields at least one part")
    }

    fn manifest(&mut self, key: &str, v: Value) -> Result<()> {
        self.set(key, v, "manifest")
    }

    fn flag<T: Serialize>(&mut self, key: &str, v: Option<T>) -> Result<()> {
        match v {
            Some(v) => self.set(key, serde_json::to_value(v).expect("flag serializes"), "override"),
            None => Ok(()),
        }
    }

    fn overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("override {pair:?} is not key=value")))?;
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            self.set(k.trim(), parsed, "override")?;
        }
        Ok(())
    }

    fn resolve<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.value.clone()).map_err(|e| Error::Validation(format!("settings: {e}")))
    }
}

fn list<T: std::str::FromStr<Err = Error>>(s: &Option<String>) -> Result<Option<Vec<T>>> {
    s.as_ref().map(|s| s.split(',').map(|p| p.trim().parse()).collect()).transpose()
}

fn parse_f32s(s: &Option<String>) -> Result<Option<Vec<f32>>> {
    s.as_ref()
        .map(|s| {
            s.split(',')
                .map(|p| p.trim().parse::<f32>().map_err(|e| Error::Validation(format!("tau {p:?}: {e}"))))
                .collect()
        })
        .transpose()
}

fn log(msg: impl AsRef<str>) {
    eprintln!("labelprop: {}", msg.as_ref());
}

fn write_run_json(dir: &Path, subcommand: &str, threads: usize, inputs: Value, layers: &Layers) -> Result<()> {
    let run = json!({
        "tool": "labelprop",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "threads": threads,
        "inputs": inputs,
        "config": layers.value,
        "sources": layers.sources,
    });
    let mut body = serde_json::to_vec_pretty(&run).expect("run metadata serializes");
    body.push(b'\n');
    write_bytes(dir.join("run.json"), &body)
}

fn noise_from_manifest(layers: &mut Layers, m: &DatasetManifest) -> Result<()> {
    layers.manifest("noise.motion_noise", serde_json::to_value(&m.motion_noise).expect("serializes"))?;
    layers.manifest("noise.semantic_noise", serde_json::to_value(&m.semantic_noise).expect("serializes"))?;
    if let Some(seed) = m.generator_seed {
        layers.manifest("noise.noise_seed", json!(seed))?;
    }
    Ok(())
}

fn load_sequences(m: &DatasetManifest) -> Result<Vec<Sequence>> {
    m.sequences.iter().map(|e| read_sequence(m, e)).collect()
}

fn jobs<'a>(m: &DatasetManifest, seqs: &'a [Sequence], noise: &NoiseSettings) -> Vec<EvalJob<'a>> {
    let mut out = Vec::new();
    for (i, (s, e)) in seqs.iter().zip(&m.sequences).enumerate() {
        for d in 0..noise.noise_seeds {
            out.push(EvalJob {
                name: format!("{}#{d}", e.name),
                sequence: s,
                annotated_index: e.annotated_index,
                oracles: noise.oracles(i, d),
            });
        }
    }
    out
}

fn cmd_gen(a: &GenArgs, threads: usize) -> Result<()> {
    let mut layers = Layers::new(&GenSettings { seed: 0, count: 1, noise: NoiseLevel::Standard });
    layers.flag("seed", a.seed)?;
    layers.flag("count", a.count)?;
    layers.flag("noise", a.noise.clone())?;
    layers.overrides(&a.set)?;
    let s: GenSettings = layers.resolve()?;
    if s.count == 0 {
        return Err(Error::Validation("count must be >= 1".into()));
    }
    let oracles = match s.noise {
        NoiseLevel::Standard => Oracles::benchmark(s.seed),
        NoiseLevel::Perfect => Oracles::perfect(),
    };
    let mut entries = Vec::new();
    for i in 0..s.count {
        let name = format!("seq_{i:03}");
        let seq = generate(&standard_benchmark(s.seed.wrapping_add(i as u64)))?;
        entries.push(write_sequence(&seq, &a.out, &name)?);
        log(format!("wrote {name} ({} frames)", seq.len()));
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION.to_string(),
        generator_seed: Some(s.seed),
        num_classes: STANDARD_CLASS_NAMES.len(),
        ignore_id: crate::grid::DEFAULT_IGNORE_ID,
        class_names: STANDARD_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        motion_noise: oracles.motion,
        semantic_noise: oracles.semantic,
        sequences: entries,
        root: a.out.clone(),
    };
    save_manifest(&manifest, a.out.join("manifest.json"))?;
    write_run_json(&a.out, "gen", threads, json!({}), &layers)
}

fn load_refiner(path: &Option<PathBuf>, method_needs: bool) -> Result<Option<RefinerParams>> {
    match (path, method_needs) {
        (None, true) => Err(Error::Validation("warp-refine requires --refiner <params-file>".into())),
        (Some(p), true) => Ok(Some(RefinerParams::load(p)?)),
        _ => Ok(None),
    }
}

fn cmd_propagate(a: &PropagateArgs, threads: usize) -> Result<()> {
    let defaults = PropagateSettings {
        method: Method::WarpInpaint,
        horizon: 10,
        gate: GateConfig::default(),
        refine_every_step: true,
        label_representation: LabelRepresentation::Hard,
        noise: NoiseSettings::default(),
    };
    let mut layers = Layers::new(&defaults);
    let method: Option<Method> = a.method.as_deref().map(str::parse).transpose()?;
    layers.flag("method", method)?;
    layers.flag("horizon", a.horizon)?;
    layers.flag("gate.tau", a.tau)?;
    layers.overrides(&a.set)?;
    let pre: PropagateSettings = layers.resolve()?;
    let refiner = load_refiner(&a.refiner, pre.method == Method::WarpRefine)?;
    let m = load_manifest(&a.manifest)?;
    noise_from_manifest(&mut layers, &m)?;
    layers.overrides(&a.set)?;
    let s: PropagateSettings = layers.resolve()?;
    let cfg = PropagateConfig {
        horizon: s.horizon,
        method: s.method,
        gate: s.gate,
        refine_every_step: s.refine_every_step,
        label_representation: s.label_representation,
    };
    let seqs = load_sequences(&m)?;
    for (i, (seq, e)) in seqs.iter().zip(&m.sequences).enumerate() {
        let out = propagate(seq, e.annotated_index, &cfg, &s.noise.oracles(i, 0), refiner.as_ref())?;
        for (off, labels) in out {
            let frame = (e.annotated_index as i64 + off) as usize;
            write_label_image(&labels, a.out_dir.join(&e.name).join(format!("{frame:03}_{}.png", s.method)))?;
        }
        log(format!("propagated {} with {}", e.name, s.method));
    }
    let inputs = json!({ "manifest": a.manifest, "refiner": a.refiner });
    write_run_json(&a.out_dir, "propagate", threads, inputs, &layers)
}

fn cmd_train(a: &TrainArgs, threads: usize) -> Result<()> {
    let defaults = TrainSettings { train: TrainConfig::default(), init_seed: 0, noise: NoiseSettings::default() };
    let mut layers = Layers::new(&defaults);
    let m = load_manifest(&a.manifest)?;
    noise_from_manifest(&mut layers, &m)?;
    layers.flag("train.steps", a.steps)?;
    layers.flag("train.lr", a.lr)?;
    layers.flag("train.seed", a.seed)?;
    layers.flag("init_seed", a.seed)?;
    layers.overrides(&a.set)?;
    let s: TrainSettings = layers.resolve()?;
    let seqs = load_sequences(&m)?;
    let frames = training_frames(&seqs, s.train.max_cycle_length);
    if frames.is_empty() {
        return Err(Error::Config(format!(
            "no labelled frame has {} frames of context on both sides",
            s.train.max_cycle_length
        )));
    }
    let oracles = s.noise.oracles(0, 0);
    log(format!("training on {} annotated frames for {} steps", frames.len(), s.train.steps));
    let out = train(&RefinerParams::init(m.num_classes, s.init_seed)?, &frames, &s.train, &oracles)?;
    out.params.save(&a.out)?;
    let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    write_loss_trace(&dir.join("loss_trace.csv"), &out.loss_trace)?;
    if let (Some(first), Some(last)) = (out.loss_trace.first(), out.loss_trace.last()) {
        log(format!("loss {first:.4} -> {last:.4}"));
    }
    write_run_json(&dir, "train-refiner", threads, json!({ "manifest": a.manifest }), &layers)
}

fn cmd_eval(a: &EvalArgs, threads: usize) -> Result<()> {
    let defaults = EvalSettings {
        methods: vec![Method::MotionOnly, Method::SemanticOnly, Method::WarpInpaint],
        horizon: 10,
        gate: GateConfig::default(),
        refine_every_step: true,
        label_representation: LabelRepresentation::Hard,
        policy: IgnorePolicy::AsClass,
        noise: NoiseSettings::default(),
    };
    let mut layers = Layers::new(&defaults);
    let methods: Option<Vec<Method>> = list(&a.methods)?;
    layers.flag("methods", methods.clone())?;
    if a.refiner.is_some() && methods.is_none() {
        layers.flag("methods", Some(Method::ALL.to_vec()))?;
    }
    layers.flag("horizon", a.horizon)?;
    layers.flag("gate.tau", a.tau)?;
    layers.flag("policy", a.exclude_ignore.then_some(IgnorePolicy::Excluded))?;
    layers.overrides(&a.set)?;
    let pre: EvalSettings = layers.resolve()?;
    let refiner = load_refiner(&a.refiner, pre.methods.contains(&Method::WarpRefine))?;
    let m = load_manifest(&a.manifest)?;
    noise_from_manifest(&mut layers, &m)?;
    layers.overrides(&a.set)?;
    let s: EvalSettings = layers.resolve()?;
    let seqs = load_sequences(&m)?;
    let cfg = HorizonConfig {
        methods: s.methods.clone(),
        horizon: s.horizon,
        gate: s.gate,
        refine_every_step: s.refine_every_step,
        label_representation: s.label_representation,
        policy: s.policy,
    };
    let report = horizon_curve(&jobs(&m, &seqs, &s.noise), &cfg, &m.class_names, refiner.as_ref(), threads)?;
    report.save(&a.out_dir.join("report.json"))?;
    emit_report(&report, &a.out_dir)?;
    for c in &report.curves {
        log(format!("{}: grand mean mIoU {:.4}", c.method, c.grand_mean().unwrap_or(0.0)));
    }
    let inputs = json!({ "manifest": a.manifest, "refiner": a.refiner });
    write_run_json(&a.out_dir, "eval", threads, inputs, &layers)
}

fn cmd_report(a: &ReportArgs, threads: usize) -> Result<()> {
    let mut report = HorizonReport::load(&a.input)?;
    if a.exclude_ignore {
        report = report.with_policy(IgnorePolicy::Excluded)?;
    }
    emit_report(&report, &a.out_dir)?;
    let layers = Layers::new(&json!({ "policy": report.config.policy }));
    write_run_json(&a.out_dir, "report", threads, json!({ "input": a.input }), &layers)
}

fn cmd_tau(a: &TauArgs, threads: usize) -> Result<()> {
    let defaults = TauSettings {
        taus: vec![0.0, 0.05, 0.1, 0.2, 1.8],
        horizon: 10,
        policy: IgnorePolicy::AsClass,
        noise: NoiseSettings::default(),
    };
    let mut layers = Layers::new(&defaults);
    let m = load_manifest(&a.manifest)?;
    noise_from_manifest(&mut layers, &m)?;
    layers.flag("taus", parse_f32s(&a.taus)?)?;
    layers.flag("horizon", a.horizon)?;
    layers.flag("policy", a.exclude_ignore.then_some(IgnorePolicy::Excluded))?;
    layers.overrides(&a.set)?;
    let s: TauSettings = layers.resolve()?;
    let seqs = load_sequences(&m)?;
    let rows = tau_sweep(&jobs(&m, &seqs, &s.noise), &s.taus, s.horizon, s.policy, threads)?;
    write_bytes(a.out_dir.join("tau_sweep.csv"), tau_sweep_csv(&rows).as_bytes())?;
    write_run_json(&a.out_dir, "tau-sweep", threads, json!({ "manifest": a.manifest }), &layers)
}

fn cmd_gradcheck(a: &GradArgs, threads: usize) -> Result<()> {
    let mut layers = Layers::new(&GradSettings { seed: 0, tolerance: 1e-3, width: 8, height: 8, num_classes: 3 });
    layers.flag("seed", a.seed)?;
    layers.flag("tolerance", a.tolerance)?;
    layers.overrides(&a.set)?;
    let s: GradSettings = layers.resolve()?;
    let params = RefinerParams::init_dense(s.num_classes, s.seed)?;
    let sample = random_sample(s.width, s.height, s.num_classes, crate::grid::DEFAULT_IGNORE_ID, s.seed)?;
    let report = gradient_check(&params, &sample, s.tolerance)?;
    let mut body = serde_json::to_vec_pretty(&report).expect("report serializes");
    body.push(b'\n');
    write_bytes(a.out_dir.join("gradcheck.json"), &body)?;
    write_run_json(&a.out_dir, "gradcheck", threads, json!({}), &layers)?;
    for t in &report.tensors {
        log(format!("{}: max relative error {:.3e}", t.name, t.max_rel_error));
    }
    if !report.passed() {
        return Err(Error::Validation(format!("gradient check failed at tolerance {}", s.tolerance)));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let t = cli.threads;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, t),
        Command::Propagate(a) => cmd_propagate(a, t),
        Command::TrainRefiner(a) => cmd_train(a, t),
        Command::Eval(a) => cmd_eval(a, t),
        Command::Report(a) => cmd_report(a, t),
        Command::TauSweep(a) => cmd_tau(a, t),
        Command::Gradcheck(a) => cmd_gradcheck(a, t),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log(format!("error: {e}"));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order_and_reject_unknown_keys() {
        let mut l = Layers::new(&GenSettings { seed: 0, count: 1, noise: NoiseLevel::Standard });
        l.manifest("seed", json!(5)).unwrap();
        l.overrides(&["seed=9".into(), "noise=perfect".into()]).unwrap();
        let s: GenSettings = l.resolve().unwrap();
        assert_eq!((s.seed, s.noise), (9, NoiseLevel::Perfect));
        assert_eq!(l.sources["seed"], "override");
        assert!(matches!(l.overrides(&["nope=1".into()]), Err(Error::Validation(_))));
        assert!(matches!(l.overrides(&["seed".into()]), Err(Error::Validation(_))));
    }

    #[test]
    fn nested_override() {
        let mut l = Layers::new(&TauSettings {
            taus: vec![0.1],
            horizon: 3,
            policy: IgnorePolicy::AsClass,
            noise: NoiseSettings::default(),
        });
        l.overrides(&["noise.motion_noise.gaussian_sigma=0.25".into(), "taus=[0,1]".into()]).unwrap();
        let s: TauSettings = l.resolve().unwrap();
        assert_eq!(s.noise.motion_noise.gaussian_sigma, 0.25);
        assert_eq!(s.taus, vec![0.0, 1.0]);
    }

    #[test]
    fn parse_errors() {
        use clap::error::ErrorKind;
        let kind = |args: &[&str]| Cli::try_parse_from(args).unwrap_err().kind();
        assert_eq!(kind(&["labelprop", "gen", "--out", "x", "--bogus"]), ErrorKind::UnknownArgument);
        assert_eq!(kind(&["labelprop", "--help"]), ErrorKind::DisplayHelp);
        let cli = Cli::try_parse_from(["labelprop", "--threads", "3", "gradcheck", "--out-dir", "g"]).unwrap();
        assert_eq!(cli.threads, 3);
    }
}
