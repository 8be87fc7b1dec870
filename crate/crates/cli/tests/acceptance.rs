//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use tagv_core::certify::{micro_sample, model_grad_check};
use tagv_core::corpus::{
    generate_splits, parse_srt, write_srt, Corpus, GenConfig, Split, SubtitleTrack, TimeSpan, VisualFeatures,
};
use tagv_core::eval::{evaluate_model, iou, miou, random_guess_baseline, recall_at_iou};
use tagv_core::highlight::build_extended_mask;
use tagv_core::model::{forward, init_params, prepare, ForwardOptions, ParamVars};
use tagv_core::selection::select_subtitle_span;
use tagv_core::spanpred::Vocabulary;
use tagv_core::trainer::{train_loop, Checkpoint, Trainer};
use tagv_core::{DecodeMode, TrainConfig};
use tagv_tensor::{RngState, Tape};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let trained = std::cell::OnceCell::new();
    let criteria: Vec<Criterion> = vec![
        ("subtitle span selection matches brute force", Box::new(selection_fidelity)),
        ("IoU and recall match independent oracles", Box::new(metric_oracle)),
        ("full-model gradients certified", Box::new(gradient_certification)),
        ("prompt mechanism is live", Box::new(mechanism_liveness)),
        ("desk-scale learnability", Box::new(|| learnability(trained.get_or_init(train_reference)))),
        ("beats random guessing", Box::new(|| beats_random(trained.get_or_init(train_reference)))),
        ("extended highlight mask law", Box::new(mask_law)),
        ("CLI reruns are byte-identical", Box::new(determinism)),
        ("file formats round-trip bitwise", Box::new(round_trips)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("criterion {}: PASS  {name} ({detail}; {secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_track(rng: &mut RngState, n_cues: usize, grid: f64) -> SubtitleTrack {
    let mut t = 0.0;
    let spans: Vec<(f64, f64, String)> = (0..n_cues)
        .map(|i| {
            t += rng.int_in(0, 6) as f64 * grid;
            let len = rng.int_in(1, 12) as f64 * grid;
            (t, t + len, format!("cue {i}"))
        })
        .collect();
    SubtitleTrack::from_spans(spans).unwrap()
}

fn selection_fidelity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = RngState::new(1);
    for case in 0..1000 {
        // A coarse grid makes distance ties common.
        let n_cues = rng.int_in(5, 50);
        let track = random_track(&mut rng, n_cues, 0.5);
        let end = track.cues().last().unwrap().span.end_s;
        let ts = (rng.uniform() * end * 4.0).round() / 4.0;
        let te = (rng.uniform() * end * 4.0).round() / 4.0;
        let got = select_subtitle_span(&track, ts, te).map_err(|e| e.to_string())?;

        let ds: Vec<f64> = track.cues().iter().map(|c| (c.span.start_s - ts).abs()).collect();
        let de: Vec<f64> = track.cues().iter().map(|c| (c.span.end_s - te).abs()).collect();
        let min_s = ds.iter().cloned().fold(f64::INFINITY, f64::min);
        let min_e = de.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = (0..ds.len()).find(|&i| ds[i] == min_s).unwrap();
        let last = (0..de.len()).rev().find(|&i| de[i] == min_e).unwrap();
        let want = (
            track.cues()[first].span.start_s,
            track.cues()[last].span.end_s,
            first + 1,
            last + 1,
        );
        ensure!(
            (got.r_s, got.r_e, got.start_cue, got.end_cue) == want,
            "case {case}: got {got:?}, oracle {want:?}"
        );
    }
    let elapsed = t0.elapsed();

    let tie = SubtitleTrack::from_spans([(0.0, 9.0, "a"), (9.0, 10.0, "b")]).unwrap();
    let r = select_subtitle_span(&tie, 0.0, 9.5).unwrap();
    ensure!(r.r_e == 10.0 && r.end_cue == 2, "tie example gave {r:?}");
    ensure!(elapsed < Duration::from_secs(1), "1000 tracks took {elapsed:?}");
    Ok(format!("1000/1000 agree, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

/// Counts grid cells of width 1 ms whose midpoints fall inside each span.
fn grid_iou(a: &TimeSpan, b: &TimeSpan, horizon: f64) -> f64 {
    let cells = (horizon * 1000.0).ceil() as usize;
    let (mut inter, mut union) = (0usize, 0usize);
    for k in 0..cells {
        let t = (k as f64 + 0.5) * 1e-3;
        let ina = t >= a.start_s && t <= a.end_s;
        let inb = t >= b.start_s && t <= b.end_s;
        inter += (ina && inb) as usize;
        union += (ina || inb) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = RngState::new(2);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let span = |rng: &mut RngState| {
            let s = rng.uniform_in(0.0, 60.0);
            TimeSpan::new(s, s + rng.uniform_in(5.0, 30.0)).unwrap()
        };
        let (a, b) = (span(&mut rng), span(&mut rng));
        let d = (iou(&a, &b) - grid_iou(&a, &b, 91.0)).abs();
        worst = worst.max(d);
        ensure!(d <= 1e-3, "case {case}: {a:?} {b:?} differs by {d}");
    }
    let ious = [1.0, 0.25, 0.0];
    let m = (miou(&ious).unwrap() * 100.0).round() / 100.0;
    ensure!(m == 41.67, "worked mIoU {m}");
    for mu in [0.3, 0.5, 0.7] {
        let r = (recall_at_iou(&ious, mu, false).unwrap() * 100.0).round() / 100.0;
        ensure!(r == 33.33, "worked R@1 at {mu} is {r}");
    }
    Ok(format!("max |Δ| {worst:.1e} over 1000 pairs; worked set 41.67/33.33"))
}

fn gradient_certification() -> Outcome {
    let t0 = Instant::now();
    let cfg = TrainConfig::micro();
    let f32c = model_grad_check::<f32>(&cfg).map_err(|e| e.to_string())?;
    let f64c = model_grad_check::<f64>(&cfg).map_err(|e| e.to_string())?;
    for c in [&f32c, &f64c] {
        ensure!(c.dead_groups.is_empty(), "no gradient in {:?}", c.dead_groups);
    }
    let (e32, e64) = (f32c.report.max_rel_err, f64c.report.max_rel_err);
    ensure!(e32 < 1e-3, "32-bit error {e32:.3e} at {:?}", f32c.report.worst);
    ensure!(e64 < 1e-5, "64-bit error {e64:.3e} at {:?}", f64c.report.worst);
    ensure!(t0.elapsed() < Duration::from_secs(120), "took {:?}", t0.elapsed());
    Ok(format!(
        "32-bit {e32:.2e}, 64-bit {e64:.2e}, {} coordinates",
        f32c.report.coords_checked
    ))
}

fn micro_setup() -> (TrainConfig, Vocabulary, tagv_core::model::Prepared) {
    let cfg = TrainConfig::micro();
    let s = micro_sample(cfg.d_v).unwrap();
    let vocab = Vocabulary::from_corpus(&Corpus::new(Split::Train, vec![s.clone()]).unwrap());
    let x = prepare(&s, &vocab, &cfg).unwrap();
    (cfg, vocab, x)
}

fn mechanism_liveness() -> Outcome {
    let (cfg, vocab, x) = micro_setup();
    // Decay alone would move every weight, so it is off here.
    let live = TrainConfig { lambda: 0.0, weight_decay: 0.0, ..cfg.clone() };
    let mut t = Trainer::new(live, vocab.clone()).map_err(|e| e.to_string())?;
    let before = t.store.clone();
    t.train_step(&[&x]).map_err(|e| e.to_string())?;
    let mut moved = 0;
    for name in ["highlight.conv.weight", "highlight.conv.bias"] {
        let (a, b) = (before.get(name).unwrap().data(), t.store.get(name).unwrap().data());
        moved += a.iter().zip(b).filter(|(p, q)| (*p - *q).abs() > 0.0).count();
    }
    ensure!(moved > 0, "highlight conv unchanged after a step with lambda = 0");

    let store = init_params(&cfg, vocab.len()).unwrap();
    let probs = |zero_prompt| {
        let mut tape = Tape::<f32>::new();
        let p = ParamVars::bind(&mut tape, &store).unwrap();
        let o = forward(&mut tape, &p, &cfg, &x, ForwardOptions { zero_prompt, ..Default::default() }).unwrap();
        (tape.value(o.logits.start_probs).to_vec(), tape.value(o.logits.end_probs).to_vec())
    };
    let (with, without) = (probs(false), probs(true));
    let diff = with
        .0
        .iter()
        .chain(&with.1)
        .zip(without.0.iter().chain(&without.1))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure!(diff > 0.0, "zeroing the prompt left l1/l2 unchanged");
    Ok(format!("{moved} highlight-conv coordinates moved; prompt ablation max |Δp| {diff:.2e}"))
}

struct Trained {
    train: Corpus,
    valid: Corpus,
    ck: Checkpoint,
    steps: usize,
    elapsed: Duration,
}

fn train_reference() -> Result<Trained, String> {
    let t0 = Instant::now();
    let [train, valid, _] = generate_splits(16, 7, &GenConfig::default()).map_err(|e| e.to_string())?;
    let out = train_loop(&train, Some(&valid), &TrainConfig::default()).map_err(|e| e.to_string())?;
    Ok(Trained {
        train,
        valid,
        ck: out.best,
        steps: out.log.len(),
        elapsed: t0.elapsed(),
    })
}

fn learnability(t: &Result<Trained, String>) -> Outcome {
    let t = t.as_ref().map_err(Clone::clone)?;
    ensure!(t.valid.len() == 8, "valid split has {} samples", t.valid.len());
    ensure!(t.steps <= 2000, "{} steps", t.steps);
    let tr = evaluate_model(&t.train, &t.ck, DecodeMode::Joint).map_err(|e| e.to_string())?;
    let va = evaluate_model(&t.valid, &t.ck, DecodeMode::Joint).map_err(|e| e.to_string())?;
    let (mt, mv) = (tr.report.miou, va.report.miou);
    ensure!(mt >= 90.0, "train mIoU {mt:.2} < 90");
    ensure!(mv >= 60.0, "valid mIoU {mv:.2} < 60");
    ensure!(t.elapsed < Duration::from_secs(600), "training took {:?}", t.elapsed);
    Ok(format!(
        "train mIoU {mt:.2}, valid mIoU {mv:.2}, {} steps in {:.0}s",
        t.steps,
        t.elapsed.as_secs_f64()
    ))
}

fn beats_random(t: &Result<Trained, String>) -> Outcome {
    let t = t.as_ref().map_err(Clone::clone)?;
    let model = evaluate_model(&t.valid, &t.ck, DecodeMode::Joint)
        .map_err(|e| e.to_string())?
        .report
        .miou;
    let mut total = 0.0;
    for seed in 0..100 {
        total += random_guess_baseline(&t.valid, seed).map_err(|e| e.to_string())?.miou;
    }
    let random = total / 100.0;
    ensure!(model >= 2.0 * random, "model {model:.2} vs random {random:.2}");
    Ok(format!("model {model:.2} vs random {random:.2}"))
}

fn mask_law() -> Outcome {
    let ans = TimeSpan::new(15.0, 19.0).unwrap();
    let m = build_extended_mask(&ans, 20.0, 10, 0.25).map_err(|e| e.to_string())?;
    let bits: Vec<u8> = m.mask.iter().map(|&b| b as u8).collect();
    ensure!(bits == [0, 0, 0, 0, 0, 0, 0, 1, 1, 1], "mask {bits:?}");
    ensure!(m.t_extend == m.t_highlight * 1.25, "T_extend {} vs {}", m.t_extend, m.t_highlight);

    let mut rng = RngState::new(7);
    for case in 0..100 {
        let dur = rng.uniform_in(5.0, 120.0);
        let s = rng.uniform_in(0.0, dur * 0.9);
        let ans = TimeSpan::new(s, rng.uniform_in(s, dur)).unwrap();
        let n = rng.int_in(1, 128);
        let a1 = rng.uniform_in(-1.0, 2.0);
        let a2 = a1 + rng.uniform_in(0.0, 2.0);
        let m1 = build_extended_mask(&ans, dur, n, a1).unwrap();
        let m2 = build_extended_mask(&ans, dur, n, a2).unwrap();
        ensure!(
            m1.mask.iter().zip(&m2.mask).all(|(&x, &y)| !x || y),
            "case {case}: mask at α={a1} not inside mask at α={a2}"
        );
        ensure!(m1.t_extend == m1.t_highlight * (a1 + 1.0), "case {case}: T_extend");
    }
    Ok("running example, 100-case monotone sweep".into())
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn tagv(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tagv"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "`tagv {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        let dir = tmp.path().join(tag);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        tagv(&["gen", "--out", "corpus", "--n", "8", "--seed", "7"], &dir)?;
        tagv(
            &[
                "train", "--corpus", "corpus", "--set", "max_steps=40", "--set", "warmup_steps=10", "--out-ckpt",
                "model.ckpt", "--log", "train.log",
            ],
            &dir,
        )?;
        tagv(
            &["eval", "--corpus", "corpus", "--split", "valid", "--ckpt", "model.ckpt", "--report", "report.json"],
            &dir,
        )?;
        Ok(read_tree(&dir))
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure!(a.len() > 3, "only {} files produced", a.len());
    for (p, bytes) in &a {
        ensure!(b.get(p) == Some(bytes), "{} differs between runs", p.display());
    }
    ensure!(a.len() == b.len(), "file sets differ");
    Ok(format!("{} files identical across two runs", a.len()))
}

fn round_trips() -> Outcome {
    let mut rng = RngState::new(9);
    let punct = ["", ",", "!", "?", " - ok", "'s"];
    for case in 0..100 {
        let n = rng.int_in(1, 30);
        let mut t = 0u64;
        let spans: Vec<(f64, f64, String)> = (0..n)
            .map(|i| {
                t += rng.int_in(0, 5000) as u64;
                let len = rng.int_in(1, 8000) as u64;
                let text = format!("line {i}{}", rng.choose(&punct));
                (t as f64 / 1000.0, (t + len) as f64 / 1000.0, text)
            })
            .collect();
        let track = SubtitleTrack::from_spans(spans).unwrap();
        let text = write_srt(&track);
        let back = parse_srt(text.as_bytes()).map_err(|e| format!("SRT case {case}: {e}"))?;
        ensure!(back.track == track, "SRT case {case}: track differs");
        ensure!(write_srt(&back.track) == text, "SRT case {case}: bytes differ");
    }
    for case in 0..100 {
        let (n, d) = (rng.int_in(1, 40), rng.int_in(1, 16));
        let f = VisualFeatures::new(n, d, (0..n * d).map(|_| (rng.normal() * 10.0) as f32).collect()).unwrap();
        let b = f.to_bytes();
        let back = VisualFeatures::from_bytes(&b).map_err(|e| format!("feature case {case}: {e}"))?;
        ensure!(back == f && back.to_bytes() == b, "feature case {case} differs");
    }
    let (_, vocab, _) = micro_setup();
    let sample = micro_sample(TrainConfig::micro().d_v).unwrap();
    for case in 0..100u64 {
        let cfg = TrainConfig {
            seed: case,
            n_layers: rng.int_in(0, 2),
            n: rng.int_in(2, 12),
            lambda: rng.uniform(),
            ..TrainConfig::micro()
        };
        let x = prepare(&sample, &vocab, &cfg).unwrap();
        let mut t = Trainer::new(cfg, vocab.clone()).unwrap();
        if case % 2 == 1 {
            t.train_step(&[&x]).map_err(|e| e.to_string())?;
        }
        let ck = t.checkpoint();
        let b = ck.to_bytes().map_err(|e| e.to_string())?;
        let back = Checkpoint::from_bytes(&b).map_err(|e| format!("checkpoint case {case}: {e}"))?;
        ensure!(back == ck && back.to_bytes().unwrap() == b, "checkpoint case {case} differs");
    }
    Ok("100 SRT, 100 feature, 100 checkpoint instances".into())
}
