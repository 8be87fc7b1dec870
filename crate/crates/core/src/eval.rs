//! Temporal IoU metrics, model evaluation, the random-guess baseline and
//! raw attention dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tagv_tensor::{ParamStore, RngState, Tape};

use crate::config::{DecodeMode, TrainConfig};
use crate::corpus::{Corpus, Sample, SubtitleTrack, TimeSpan};
use crate::error::{io_err, CoreError, Result};
use crate::model::{forward, prepare, ForwardOptions, ParamVars, Prepared};
use crate::spanpred::{decode_span, Seg, SpanPrediction};
use crate::trainer::Checkpoint;

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
const RANDOM_STREAM: u64 = 0x7A4D;

/// Interval intersection over union; 0 when the union has no length.
pub fn iou(a: &TimeSpan, b: &TimeSpan) -> f64 {
    let inter = (a.end_s.min(b.end_s) - a.start_s.max(b.start_s)).max(0.0);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn non_empty(ious: &[f64]) -> Result<()> {
    if ious.is_empty() {
        return Err(CoreError::Invalid("no IoU values to aggregate".into()));
    }
    Ok(())
}

/// Mean IoU as a percentage.
pub fn miou(ious: &[f64]) -> Result<f64> {
    non_empty(ious)?;
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Percentage of IoUs reaching `mu` (`≥`, or `>` when `strict`).
pub fn recall_at_iou(ious: &[f64], mu: f64, strict: bool) -> Result<f64> {
    non_empty(ious)?;
    let hits = ious.iter().filter(|&&x| if strict { x > mu } else { x >= mu }).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn threshold_key(mu: f64) -> String {
    format!("{mu:.1}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIou {
    pub id: String,
    pub iou: f64,
}

/// Percentages are rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub miou: f64,
    /// R@1 at each IoU threshold, keyed `"0.3"`, `"0.5"`, `"0.7"`.
    pub r1_at: BTreeMap<String, f64>,
    /// Whether recall counted `iou > μ` rather than `iou ≥ μ`.
    pub strict: bool,
    pub per_sample: Vec<SampleIou>,
}

impl MetricsReport {
    pub fn from_ious(per_sample: Vec<SampleIou>, strict: bool) -> Result<Self> {
        let ious: Vec<f64> = per_sample.iter().map(|s| s.iou).collect();
        let mut r1_at = BTreeMap::new();
        for mu in IOU_THRESHOLDS {
            r1_at.insert(threshold_key(mu), round2(recall_at_iou(&ious, mu, strict)?));
        }
        Ok(Self {
            n: ious.len(),
            miou: round2(miou(&ious)?),
            r1_at,
            strict,
            per_sample,
        })
    }

    pub fn r1(&self, mu: f64) -> Option<f64> {
        self.r1_at.get(&threshold_key(mu)).copied()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Best,
}

/// Summary over repeated runs, labelled with how it was aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub aggregation: Aggregation,
    pub runs: usize,
    pub miou: f64,
    pub r1_at: BTreeMap<String, f64>,
}

/// Mean of every metric, or the run with the highest mIoU (first on ties).
pub fn aggregate(reports: &[MetricsReport], how: Aggregation) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(CoreError::Invalid("no reports to aggregate".into()));
    }
    let (miou, r1_at) = match how {
        Aggregation::Mean => {
            let k = reports.len() as f64;
            let miou = round2(reports.iter().map(|r| r.miou).sum::<f64>() / k);
            let r1 = reports[0]
                .r1_at
                .keys()
                .map(|key| {
                    let m = reports.iter().map(|r| r.r1_at.get(key).copied().unwrap_or(0.0)).sum::<f64>() / k;
                    (key.clone(), round2(m))
                })
                .collect();
            (miou, r1)
        }
        Aggregation::Best => {
            let best = reports
                .iter()
                .fold(&reports[0], |b, r| if r.miou > b.miou { r } else { b });
            (best.miou, best.r1_at.clone())
        }
    };
    Ok(AggregateReport {
        aggregation: how,
        runs: reports.len(),
        miou,
        r1_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub s: usize,
    pub e: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub start_cue: usize,
    pub end_cue: usize,
    pub truncated: bool,
}

impl PredictionRecord {
    pub fn new(id: &str, p: &SpanPrediction, truncated: bool) -> Self {
        Self {
            id: id.to_string(),
            s: p.s,
            e: p.e,
            start_s: p.start_s,
            end_s: p.end_s,
            start_cue: p.start_cue,
            end_cue: p.end_cue,
            truncated,
        }
    }
}

/// Writes `<id>.json` per record into `dir`.
pub fn write_predictions(dir: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    records
        .iter()
        .map(|r| {
            let p = dir.join(format!("{}.json", r.id));
            let mut s = serde_json::to_string_pretty(r).expect("record serializes");
            s.push('\n');
            std::fs::write(&p, s).map_err(io_err(&p))?;
            Ok(p)
        })
        .collect()
}

/// Eval-mode prediction for one prepared sample.
pub fn predict_prepared(
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    x: &Prepared,
    track: &SubtitleTrack,
    mode: DecodeMode,
) -> Result<SpanPrediction> {
    let mut tape = Tape::<f32>::new();
    let p = ParamVars::bind(&mut tape, store)?;
    let out = forward(&mut tape, &p, cfg, x, ForwardOptions::default())?;
    let l1: Vec<f64> = tape.value(out.logits.start_probs).iter().map(|&v| v as f64).collect();
    let l2: Vec<f64> = tape.value(out.logits.end_probs).iter().map(|&v| v as f64).collect();
    decode_span(&l1, &l2, &x.tokens, track, mode, cfg.max_span_tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Dropout-free prediction and scoring of every sample, reported in corpus
/// order.
pub fn evaluate_model(corpus: &Corpus, ck: &Checkpoint, mode: DecodeMode) -> Result<Evaluation> {
    if corpus.is_empty() {
        return Err(CoreError::EmptySplit {
            split: corpus.split.to_string(),
        });
    }
    let rows = corpus
        .samples
        .par_iter()
        .map(|s| {
            let x = prepare(s, &ck.vocab, &ck.config)?;
            let pred = predict_prepared(&ck.params, &ck.config, &x, &s.track, mode)?;
            let span = TimeSpan::new(pred.start_s, pred.end_s)?;
            Ok((
                SampleIou {
                    id: s.id.clone(),
                    iou: iou(&span, &s.answer),
                },
                PredictionRecord::new(&s.id, &pred, x.tokens.truncated),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (per_sample, predictions): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(Evaluation {
        report: MetricsReport::from_ious(per_sample, false)?,
        predictions,
    })
}

/// Scores two sorted uniform draws in `[0, duration]` per sample.
pub fn random_guess_baseline(corpus: &Corpus, seed: u64) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(CoreError::EmptySplit {
            split: corpus.split.to_string(),
        });
    }
    let mut rng = RngState::derive(seed, &[RANDOM_STREAM]);
    let per_sample = corpus
        .samples
        .iter()
        .map(|s| {
            let a = rng.uniform() * s.duration_s;
            let b = rng.uniform() * s.duration_s;
            let guess = TimeSpan::new(a.min(b), a.max(b))?;
            Ok(SampleIou {
                id: s.id.clone(),
                iou: iou(&guess, &s.answer),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_ious(per_sample, false)
}

fn write_csv_matrix(path: &Path, data: &[f32], rows: usize, cols: usize) -> Result<()> {
    let mut s = String::with_capacity(rows * cols * 12);
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", data[r * cols + c]);
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(io_err(path))
}

/// Writes, for one sample, the encoder attention of every layer and head
/// (`attn_l{l}_h{h}.csv`, `|x| × |x|`), the row-normalized similarity
/// (`s_r.csv`, `n × m`), the highlight scores (`s_h.csv`, one per line) and
/// `legend.csv` mapping positions to tokens and segments.
pub fn dump_attention(ck: &Checkpoint, sample: &Sample, out_dir: impl AsRef<Path>, zero_prompt: bool) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let x = prepare(sample, &ck.vocab, &ck.config)?;
    let mut tape = Tape::<f32>::new();
    let p = ParamVars::bind(&mut tape, &ck.params)?;
    let out = forward(
        &mut tape,
        &p,
        &ck.config,
        &x,
        ForwardOptions {
            zero_prompt,
            ..ForwardOptions::default()
        },
    )?;
    let mut files = Vec::new();
    for (l, heads) in out.attn.iter().enumerate() {
        for (h, &a) in heads.iter().enumerate() {
            let path = dir.join(format!("attn_l{l}_h{h}.csv"));
            let (r, c) = tape.shape(a);
            write_csv_matrix(&path, tape.value(a), r, c)?;
            files.push(path);
        }
    }
    let path = dir.join("s_r.csv");
    let (r, c) = tape.shape(out.similarity.s_r);
    write_csv_matrix(&path, tape.value(out.similarity.s_r), r, c)?;
    files.push(path);
    let path = dir.join("s_h.csv");
    let n = tape.value(out.scores).len();
    write_csv_matrix(&path, tape.value(out.scores), n, 1)?;
    files.push(path);

    let mut legend = String::from("pos,token,segment\n");
    for (i, (&id, seg)) in x.tokens.ids.iter().zip(&x.tokens.seg).enumerate() {
        let seg = match seg {
            Seg::Special => "special".to_string(),
            Seg::Question => "question".to_string(),
            Seg::Cue(k) => format!("cue{k}"),
        };
        let tok = ck.vocab.token(id).replace('"', "\"\"");
        let _ = writeln!(legend, "{i},\"{tok}\",{seg}");
    }
    let path = dir.join("legend.csv");
    std::fs::write(&path, legend).map_err(io_err(&path))?;
    files.push(path);
    Ok(files)
}
