//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use labelprop::eval::pixel_accuracy;
use labelprop::flowio::{decode_flo, encode_flo, read_flo, read_label_image, write_flo, write_label_image};
use labelprop::oracles::motion_oracle;
use labelprop::propagation::{remap_labels, Fill};
use labelprop::refine::{
    gradient_check, gradient_check_with, random_sample, refine_hard, sample_loss_grad, training_frames, Mutation,
    TrainOutput,
};
use labelprop::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IGN: u8 = 255;
const K: usize = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn sequences(seeds: std::ops::Range<u64>) -> Vec<Sequence> {
    seeds.map(|s| generate(&standard_benchmark(s)).unwrap()).collect()
}

fn train_refiner(oracles: &Oracles, steps: usize) -> TrainOutput {
    let seqs = sequences(1000..1008);
    let frames = training_frames(&seqs, refine::MAX_CYCLE_LENGTH);
    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    train(&RefinerParams::init(8, 1).unwrap(), &frames, &cfg, oracles).unwrap()
}

fn jobs<'a>(seqs: &'a [Sequence], base: &Oracles) -> Vec<EvalJob<'a>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| EvalJob {
            name: format!("seed{i}"),
            sequence: s,
            annotated_index: s.annotated_index,
            oracles: base.reseeded(10_000 + i as u64),
        })
        .collect()
}

fn perfect_oracle_sanity() -> Outcome {
    let t0 = Instant::now();
    // Trained on perfect-oracle cycles; 200 steps keeps the whole run inside the budget.
    let refiner = train_refiner(&Oracles::perfect(), 200).params;
    let seqs = sequences(0..10);
    let cfg = HorizonConfig::new(vec![Method::SemanticOnly, Method::WarpInpaint, Method::WarpRefine], K);
    let report = horizon_curve(&jobs(&seqs, &Oracles::perfect()), &cfg, &[], Some(&refiner), 1).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let mut worst = 1.0f64;
    for c in &report.curves {
        for o in &c.offsets {
            worst = worst.min(o.matrix.miou().unwrap_or(0.0));
        }
        if c.offsets.len() != 2 * K {
            return outcome(false, format!("{} has {} offsets", c.method, c.offsets.len()));
        }
    }
    outcome(worst == 1.0 && secs < 60.0, format!("min mIoU {worst:.6}, {secs:.1}s (train + eval)"))
}

fn fig1_shape(refiner: &RefinerParams, train_secs: f64) -> Outcome {
    let t0 = Instant::now();
    let seqs = sequences(0..30);
    let cfg = HorizonConfig::new(Method::ALL.to_vec(), K);
    let report = horizon_curve(&jobs(&seqs, &Oracles::benchmark(0)), &cfg, &[], Some(refiner), 1).unwrap();
    let secs = t0.elapsed().as_secs_f64() + train_secs;
    let curve = |m| report.curve(m).unwrap();
    let (mo, so, wi, wr) =
        (curve(Method::MotionOnly), curve(Method::SemanticOnly), curve(Method::WarpInpaint), curve(Method::WarpRefine));
    let drift = mo.miou_abs(1).unwrap() - mo.miou_abs(K as u64).unwrap();
    let sem: Vec<f64> = so.offsets.iter().map(|o| o.matrix.miou().unwrap()).collect();
    let spread = sem.iter().cloned().fold(f64::MIN, f64::max) - sem.iter().cloned().fold(f64::MAX, f64::min);
    let inpaint_wins = (3..=K as u64).all(|d| wi.miou_abs(d).unwrap() > mo.miou_abs(d).unwrap());
    let margin = wr.grand_mean().unwrap() - wi.grand_mean().unwrap();
    let refine_beats_sem = wr.offsets.iter().zip(&so.offsets).all(|(r, s)| {
        assert_eq!(r.offset, s.offset);
        r.matrix.miou().unwrap() > s.matrix.miou().unwrap()
    });
    let a = drift >= 0.10;
    let b = spread <= 0.02;
    let d = margin >= 0.02 && refine_beats_sem;
    let mut detail = format!(
        "(a) drift {drift:.3} {} (b) semantic spread {spread:.4} {} (c) inpaint>motion at |k|>=3 {} \
         (d) refine-inpaint {margin:+.3}, refine>semantic everywhere {refine_beats_sem} {}; {secs:.1}s",
        mark(a),
        mark(b),
        mark(inpaint_wins),
        mark(d)
    );
    let excluded = report.with_policy(IgnorePolicy::Excluded).unwrap();
    let ex = |m| excluded.curve(m).unwrap().grand_mean().unwrap();
    detail.push_str(&format!(
        "\n         ignore excluded: grand means motion {:.3} semantic {:.3} inpaint {:.3} refine {:.3}",
        ex(Method::MotionOnly),
        ex(Method::SemanticOnly),
        ex(Method::WarpInpaint),
        ex(Method::WarpRefine)
    ));
    outcome(a && b && inpaint_wins && d && secs < 900.0, detail)
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

/// Pure motion chain from `t` with, per step, whether each pixel's source stayed in frame
/// at every step so far.
fn motion_chain(seq: &Sequence, t: usize, dir: Direction, oracles: &Oracles) -> Vec<(LabelMap, Vec<bool>)> {
    let mut out = Vec::new();
    let mut labels = seq.labels[t].clone();
    let (w, h) = labels.dims();
    let mut valid = LabelMap::filled(w, h, 2, IGN, 1).unwrap();
    for j in 1..=K {
        let target = (t as i64 + dir.sign() * j as i64) as usize;
        let flow = motion_oracle(seq, &oracles.motion, target, dir).unwrap();
        labels = remap_labels(&labels, &flow, Fill::Invalid).unwrap().0;
        valid = remap_labels(&valid, &flow, Fill::Invalid).unwrap().0;
        out.push((labels.clone(), valid.data().iter().map(|&v| v == 1).collect()));
    }
    out
}

fn degeneracy() -> Outcome {
    let (mut zero_ok, mut wide_ok, mut compared) = (true, true, 0u64);
    for seed in 0..3 {
        let seq = generate(&standard_benchmark(seed)).unwrap();
        let t = seq.annotated_index;
        let o = Oracles::benchmark(0).reseeded(seed);
        let run = |method, tau| {
            let mut cfg = PropagateConfig::new(method, K);
            cfg.gate = GateConfig::with_tau(tau);
            propagate(&seq, t, &cfg, &o, None).unwrap()
        };
        zero_ok &= run(Method::WarpInpaint, 0.0) == run(Method::SemanticOnly, 0.1);
        let wide = run(Method::WarpInpaint, 1e3);
        for dir in [Direction::Forward, Direction::Backward] {
            for (j, (chain, valid)) in motion_chain(&seq, t, dir, &o).iter().enumerate() {
                let got = &wide[&(dir.sign() * (j as i64 + 1))];
                for ((&c, &g), &v) in chain.data().iter().zip(got.data()).zip(valid) {
                    if v {
                        compared += 1;
                        wide_ok &= c == g;
                    }
                }
            }
        }
    }
    outcome(
        zero_ok && wide_ok && compared > 0,
        format!(
            "tau=0 == semantic-only {}; tau=1e3 == motion chain on {compared} valid pixels {}",
            mark(zero_ok),
            mark(wide_ok)
        ),
    )
}

fn training_efficacy(out: &TrainOutput) -> Outcome {
    let tr = &out.loss_trace;
    let first = tr[..50].iter().sum::<f64>() / 50.0;
    let last = tr[tr.len() - 50..].iter().sum::<f64>() / 50.0;
    let ratio = last / first;

    let held = sequences(2000..2010);
    let frames = training_frames(&held, refine::MAX_CYCLE_LENGTH);
    let base = Oracles::benchmark(0);
    let gate = GateConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut raw_hits, mut refined_hits, mut kept_hits, mut total) = (0u64, 0u64, 0u64, 0u64);
    for _ in 0..50 {
        let f = frames[rng.random_range(0..frames.len())];
        let length = rng.random_range(1..=refine::MAX_CYCLE_LENGTH);
        let dir = if rng.random::<bool>() { Direction::Forward } else { Direction::Backward };
        let c = cycle_propagate(f.sequence, f.annotated_index, length, dir, &gate, &base.reseeded(rng.random()))
            .unwrap();
        let (probs, kept) =
            refine_hard(&out.params, &c.cyclic_labels, &c.cyclic_mask, &c.annotated_image, &c.warped_image).unwrap();
        let refined = argmax_decode(&probs, IGN).unwrap();
        let (h0, n) = pixel_accuracy(&c.cyclic_labels, &c.target_labels).unwrap();
        let (h1, _) = pixel_accuracy(&refined, &c.target_labels).unwrap();
        let (h2, _) = pixel_accuracy(&kept, &c.target_labels).unwrap();
        raw_hits += h0;
        refined_hits += h1;
        kept_hits += h2;
        total += n;
    }
    let acc = |h: u64| h as f64 / total as f64;
    let (a0, a1) = (acc(raw_hits), acc(refined_hits));
    let gain_pp = 100.0 * (a1 - a0);
    outcome(
        ratio <= 0.60 && gain_pp >= 2.0,
        format!(
            "(a) loss {first:.4} -> {last:.4}, ratio {ratio:.3} {} (b) held-out accuracy {a0:.4} -> {a1:.4}, \
             {gain_pp:+.2} pp {}; with gate-kept ignore preserved {:.4}",
            mark(ratio <= 0.60),
            mark(gain_pp >= 2.0),
            acc(kept_hits)
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let params = RefinerParams::init_dense(3, 11).unwrap();
    let sample = random_sample(8, 8, 3, IGN, 11).unwrap();
    let report = gradient_check(&params, &sample, 1e-3).unwrap();
    let worst = report.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let (_, g) = sample_loss_grad::<f64>(&params.net.cast(), &sample).unwrap();
    let mut caught = 0;
    for (ti, tensor) in g.tensors().iter().enumerate() {
        let idx = (0..tensor.len()).max_by(|&a, &b| tensor[a].abs().total_cmp(&tensor[b].abs())).unwrap();
        let bad =
            gradient_check_with(&params, &sample, 1e-3, Some(Mutation { tensor: ti, index: idx, factor: 1.1 })).unwrap();
        caught += usize::from(!bad.passed());
    }
    let n = g.tensors().len();
    outcome(
        report.passed() && caught == n,
        format!("max relative error {worst:.2e} over {} tensors; mutation caught {caught}/{n}", report.tensors.len()),
    )
}

fn brute_miou(pred: &[u8], gt: &[u8], c: usize, policy: IgnorePolicy) -> Option<f64> {
    let mut classes: Vec<u8> = (0..c as u8).collect();
    if policy == IgnorePolicy::AsClass {
        classes.push(IGN);
    }
    let mut ious = Vec::new();
    for k in classes {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in pred.iter().zip(gt) {
            if policy == IgnorePolicy::Excluded && g == IGN {
                continue;
            }
            inter += u64::from(p == k && g == k);
            union += u64::from(p == k || g == k);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn metric_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let c = rng.random_range(2..=8usize);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..256).map(|_| if rng.random_bool(0.1) { IGN } else { rng.random_range(0..c as u8) }).collect()
        };
        let (p, g) = (draw(&mut rng), draw(&mut rng));
        let pm = LabelMap::new(16, 16, c, IGN, p.clone()).unwrap();
        let gm = LabelMap::new(16, 16, c, IGN, g.clone()).unwrap();
        for policy in [IgnorePolicy::AsClass, IgnorePolicy::Excluded] {
            let mut cm = ConfusionMatrix::new(c, IGN, policy);
            cm.accumulate(&pm, &gm).unwrap();
            mismatches += usize::from(cm.miou() != brute_miou(&p, &g, c, policy));
        }
    }
    let mut cm = ConfusionMatrix::new(2, IGN, IgnorePolicy::AsClass);
    cm.accumulate(
        &LabelMap::new(2, 2, 2, IGN, vec![0, 0, 1, 1]).unwrap(),
        &LabelMap::new(2, 2, 2, IGN, vec![0, 1, 1, 1]).unwrap(),
    )
    .unwrap();
    let err = (cm.miou().unwrap() - 7.0 / 12.0).abs();
    outcome(
        mismatches == 0 && err <= f64::EPSILON,
        format!("{mismatches} mismatches over 200 matrix/policy pairs; 2x2 case error {err:.1e}"),
    )
}

fn io_exactness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut flo_ok = 0;
    for i in 0..100 {
        let (w, h) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let data: Vec<[f32; 2]> =
            (0..w * h).map(|_| [rng.random_range(-50.0f32..50.0), rng.random_range(-50.0f32..50.0)]).collect();
        let field = FlowField::new(w, h, data).unwrap();
        let path = dir.path().join(format!("f{i}.flo"));
        write_flo(&field, &path).unwrap();
        let back = read_flo(&path).unwrap();
        let bits = |f: &FlowField| -> Vec<u32> { f.data().iter().flat_map(|v| [v[0].to_bits(), v[1].to_bits()]).collect() };
        flo_ok += usize::from(back.dims() == field.dims() && bits(&back) == bits(&field));
    }
    let mut raster_ok = 0;
    for i in 0..20 {
        let c = rng.random_range(1..=20usize);
        let (w, h) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let data = (0..w * h).map(|_| if rng.random_bool(0.1) { IGN } else { rng.random_range(0..c as u8) }).collect();
        let labels = LabelMap::new(w, h, c, IGN, data).unwrap();
        let path = dir.path().join(format!("l{i}.png"));
        write_label_image(&labels, &path).unwrap();
        raster_ok += usize::from(read_label_image(&path, c, IGN).unwrap() == labels);
    }
    let tiny = encode_flo(&FlowField::zeros(1, 1));
    let tiny_ok = tiny.len() == 20 && decode_flo(&tiny).unwrap() == FlowField::zeros(1, 1);
    outcome(
        flo_ok == 100 && raster_ok == 20 && tiny_ok,
        format!("flo {flo_ok}/100 bit-identical; label rasters {raster_ok}/20 exact; 1x1 zero flow {} bytes", tiny.len()),
    )
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let bin = env!("CARGO_BIN_EXE_labelprop");
    let run = |args: &[&str]| {
        let st = Command::new(bin).args(args).arg("--threads").arg("1").current_dir(root).output().unwrap();
        assert!(st.status.success(), "{args:?}: {}", String::from_utf8_lossy(&st.stderr));
    };
    run(&["gen", "--seed", "5", "--count", "2", "--out", "data"]);
    run(&["train-refiner", "--manifest", "data/manifest.json", "--steps", "40", "--seed", "3", "--out", "model/params.lprf"]);
    for m in ["motion-only", "semantic-only", "warp-inpaint"] {
        run(&["propagate", "--manifest", "data/manifest.json", "--method", m, "--horizon", "4", "--out-dir", "prop"]);
    }
    run(&[
        "propagate", "--manifest", "data/manifest.json", "--method", "warp-refine", "--refiner", "model/params.lprf",
        "--horizon", "4", "--out-dir", "prop",
    ]);
    run(&["eval", "--manifest", "data/manifest.json", "--refiner", "model/params.lprf", "--horizon", "4", "--out-dir", "eval"]);
    let mut files = Vec::new();
    collect(root, root, &mut files);
    files.sort();
    files
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (pipeline(a.path()), pipeline(b.path()));
    let csv = |f: &[(String, Vec<u8>)]| f.iter().filter(|(n, _)| n.ends_with(".csv")).cloned().collect::<Vec<_>>();
    let (ca, cb) = (csv(&fa), csv(&fb));
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    outcome(
        ca == cb && ca.len() >= 3 && fa.len() == fb.len() && differing.is_empty(),
        format!("{} CSV files identical; {} of {} files differ overall", ca.len(), differing.len(), fa.len()),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "perfect-oracle sanity", perfect_oracle_sanity());
    let t0 = Instant::now();
    let trained = train_refiner(&Oracles::benchmark(0), 500);
    let train_secs = t0.elapsed().as_secs_f64();
    report(2, "horizon curve shape", fig1_shape(&trained.params, train_secs));
    report(3, "gate degeneracy", degeneracy());
    report(4, "cycle-consistency training", training_efficacy(&trained));
    report(5, "gradient correctness", gradient_correctness());
    report(6, "metric oracle equivalence", metric_equivalence());
    report(7, "I/O exactness", io_exactness());
    report(8, "determinism", determinism());
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed in {:.1}s", results.len() - failed.len(), results.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
