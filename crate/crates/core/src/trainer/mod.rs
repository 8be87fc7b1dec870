//! Joint optimization of the span and highlight losses.

mod checkpoint;

use rayon::prelude::*;
use tagv_tensor::{AdamW, ParamStore, Real, RngState, Tape, TensorError, Var};

use crate::config::TrainConfig;
use crate::corpus::Corpus;
use crate::error::{CoreError, Result};
use crate::eval::{miou, predict_prepared};
use crate::model::{forward, init_params, prepare, ForwardOptions, ParamVars, Prepared};
use crate::spanpred::Vocabulary;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

const SHUFFLE_STREAM: u64 = 0x5348;
const DROPOUT_STREAM: u64 = 0xD409;

/// `λ·hl + span` on the tape.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, span: Var, hl: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(hl, T::lit(lambda))?;
    Ok(tape.add(weighted, span)?)
}

/// `λ·hl + span` on plain numbers; non-finite inputs are an error.
pub fn total_loss_value(span: f64, hl: f64, lambda: f64, step: usize) -> Result<f64> {
    if !span.is_finite() || !hl.is_finite() {
        return Err(CoreError::NonFiniteLoss { step, span, hl });
    }
    Ok(lambda * hl + span)
}

/// Linear warm-up from 0 to `cfg.lr` over `warmup_steps`, then linear decay
/// to 0 at `max_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.max_steps {
        return 0.0;
    }
    let span = (cfg.max_steps - cfg.warmup_steps) as f64;
    cfg.lr * (cfg.max_steps - step) as f64 / span
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub span: f64,
    pub hl: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepLosses {
    /// Tab-separated `step, span_loss, hl_loss, total, lr`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}",
            self.step, self.span, self.hl, self.total, self.lr
        )
    }
}

/// Parameters, optimizer state and step counter of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<f32>,
    pub step: usize,
}

struct SampleGrad {
    span: f64,
    hl: f64,
    grads: Vec<Vec<f32>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let store = init_params(&cfg, vocab.len())?;
        Ok(Self {
            cfg,
            vocab,
            store,
            step: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.store.clone(),
        }
    }

    fn sample_grad(&self, x: &Prepared, pad_to: usize, slot: usize, step: usize) -> Result<SampleGrad> {
        let mut rng = RngState::derive(self.cfg.seed, &[DROPOUT_STREAM, step as u64, slot as u64]);
        let train = self.cfg.dropout > 0.0;
        let mut tape = Tape::<f32>::new();
        let p = ParamVars::bind(&mut tape, &self.store)?;
        let out = forward(
            &mut tape,
            &p,
            &self.cfg,
            x,
            ForwardOptions {
                rng: train.then_some(&mut rng),
                pad_to: Some(pad_to),
                zero_prompt: false,
            },
        )?;
        let (span, total) = match (out.span_loss, out.total) {
            (Some(s), Some(t)) => (s, t),
            _ => return Err(CoreError::Invalid(format!("{}: sample has no span targets", x.id))),
        };
        let mut g = tape.backward(total)?;
        let grads = p
            .iter()
            .map(|(name, v)| {
                g.take(v)
                    .ok_or_else(|| CoreError::Tensor(TensorError::MissingGrad(name.to_string())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleGrad {
            span: tape.scalar(span) as f64,
            hl: tape.scalar(out.hl_loss) as f64,
            grads,
        })
    }

    /// One optimizer update on the mean loss of `batch`. Samples run on
    /// worker threads; gradients are summed in batch order.
    pub fn train_step(&mut self, batch: &[&Prepared]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(CoreError::Invalid("empty batch".into()));
        }
        let step = self.step + 1;
        let pad_to = batch.iter().map(|x| x.tokens.len()).max().unwrap_or(0);
        let results: Vec<Result<SampleGrad>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, x)| self.sample_grad(x, pad_to, slot, step))
            .collect();
        let nan = |e: CoreError| match e {
            CoreError::Tensor(TensorError::NonFinite { .. }) => CoreError::NonFiniteLoss {
                step,
                span: f64::NAN,
                hl: f64::NAN,
            },
            e => e,
        };
        let mut iter = results.into_iter();
        let mut acc = iter.next().unwrap().map_err(nan)?;
        for r in iter {
            let r = r.map_err(nan)?;
            acc.span += r.span;
            acc.hl += r.hl;
            for (a, b) in acc.grads.iter_mut().zip(&r.grads) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let (span, hl) = (acc.span * inv, acc.hl * inv);
        let total = total_loss_value(span, hl, self.cfg.lambda, step)?;
        for ((_, t), mut g) in self.store.iter_mut().zip(acc.grads) {
            g.iter_mut().for_each(|x| *x *= inv as f32);
            t.set_grad(g)?;
        }
        let lr = lr_at(step, &self.cfg);
        let opt = AdamW {
            lr,
            weight_decay: self.cfg.weight_decay,
            clip_norm: Some(self.cfg.clip_norm),
            ..AdamW::default()
        };
        let stats = opt.step(&mut self.store)?;
        self.store.clear_grads();
        self.step = step;
        Ok(StepLosses {
            step,
            span,
            hl,
            total,
            lr,
            grad_norm: stats.grad_norm,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub last_step: usize,
    pub valid_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the highest validation mIoU (the last
    /// such epoch on ties), or the final ones without a validation split.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub epochs: Vec<EpochSummary>,
    /// One line per step, see [`StepLosses::log_line`].
    pub log: Vec<String>,
    /// Training samples without usable span targets.
    pub skipped: usize,
}

fn mean_iou(ck: &Trainer, valid: &[(Prepared, &crate::corpus::Sample)]) -> Result<f64> {
    let ious = valid
        .par_iter()
        .map(|(x, s)| {
            let pred = predict_prepared(&ck.store, &ck.cfg, x, &s.track, ck.cfg.decode_mode)?;
            let span = crate::corpus::TimeSpan::new(pred.start_s, pred.end_s)?;
            Ok(crate::eval::iou(&span, &s.answer))
        })
        .collect::<Result<Vec<f64>>>()?;
    miou(&ious)
}

/// Epoch-based training for `cfg.max_steps` updates, validating after every
/// epoch and keeping the best checkpoint by validation mIoU.
pub fn train_loop(train: &Corpus, valid: Option<&Corpus>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(CoreError::EmptySplit {
            split: train.split.to_string(),
        });
    }
    cfg.validate()?;
    let vocab = Vocabulary::from_corpus(train);
    let prepared = train
        .samples
        .iter()
        .map(|s| prepare(s, &vocab, cfg))
        .collect::<Result<Vec<_>>>()?;
    let usable: Vec<&Prepared> = prepared.iter().filter(|p| p.targets.is_some()).collect();
    let skipped = prepared.len() - usable.len();
    if skipped > 0 {
        log::warn!("{skipped} training samples lost their answer cues to truncation and are skipped");
    }
    if usable.is_empty() {
        return Err(CoreError::EmptySplit {
            split: format!("{} (after truncation)", train.split),
        });
    }
    let valid: Vec<(Prepared, &crate::corpus::Sample)> = match valid {
        Some(v) => v
            .samples
            .iter()
            .map(|s| Ok((prepare(s, &vocab, cfg)?, s)))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let mut t = Trainer::new(cfg.clone(), vocab)?;
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut epoch = 0;
    while t.step < cfg.max_steps {
        epoch += 1;
        let mut order: Vec<usize> = (0..usable.len()).collect();
        RngState::derive(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| usable[i]).collect();
            let losses = t.train_step(&batch)?;
            log.push(losses.log_line());
            if t.step >= cfg.max_steps {
                break;
            }
        }
        let valid_miou = if valid.is_empty() { None } else { Some(mean_iou(&t, &valid)?) };
        log::info!(
            "epoch {epoch} step {} valid mIoU {}",
            t.step,
            valid_miou.map_or("-".to_string(), |m| format!("{m:.2}"))
        );
        epochs.push(EpochSummary {
            epoch,
            last_step: t.step,
            valid_miou,
        });
        let score = valid_miou.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score >= *b) {
            best = Some((score, epoch, t.checkpoint()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        best,
        best_epoch,
        epochs,
        log,
        skipped,
    })
}
