//! Finite-difference certification of the full model gradient on a tiny
//! fixed sample.

use std::collections::BTreeMap;

use tagv_tensor::gradcheck::{analytic_grads, grad_check, GradCheckOptions, GradCheckReport, Objective};
use tagv_tensor::{ParamStore, Real, RngState, Tape, Var};

use crate::config::TrainConfig;
use crate::corpus::{Corpus, Sample, Split, SubtitleTrack, TimeSpan, VisualFeatures};
use crate::error::{CoreError, Result};
use crate::model::{forward, init_params, prepare, ForwardOptions, ParamVars, Prepared};
use crate::spanpred::Vocabulary;

const NOISE_STREAM: u64 = 0x6C4E;
const NOISE_STD: f64 = 0.1;

/// Parameter groups that must all receive gradient, as name prefixes.
pub const PARAM_GROUPS: [&str; 8] = [
    "visual.conv.",
    "cqa.w_s",
    "cqa.ffn.",
    "highlight.pool.",
    "highlight.conv.",
    "prompt.proj.",
    "encoder.",
    "span.",
];

/// Two cues over 8 s, a six-token question and 8 source frames of width
/// `d_v`.
pub fn micro_sample(d_v: usize) -> Result<Sample> {
    let track = SubtitleTrack::from_spans([(0.0, 4.0, "rinse the cut"), (4.0, 8.0, "clean a knee")])?;
    let mut rng = RngState::derive(0, &[NOISE_STREAM]);
    let rows = (0..8 * d_v).map(|_| rng.normal() as f32).collect();
    let sample = Sample {
        id: "micro".into(),
        duration_s: 8.0,
        question: "how to clean a knee ?".into(),
        answer: TimeSpan::new(4.5, 8.0)?,
        track,
        features: VisualFeatures::new(8, d_v, rows)?,
    };
    sample.validate()?;
    Ok(sample)
}

fn micro_vocab(sample: &Sample) -> Result<Vocabulary> {
    Ok(Vocabulary::from_corpus(&Corpus::new(Split::Train, vec![sample.clone()])?))
}

/// Total loss of one prepared sample, without dropout.
pub struct ModelObjective {
    pub cfg: TrainConfig,
    pub x: Prepared,
}

impl Objective for ModelObjective {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, params: &BTreeMap<String, Var>) -> tagv_tensor::Result<Var> {
        let p = ParamVars::new(params.clone());
        let out = forward(tape, &p, &self.cfg, &self.x, ForwardOptions::default())
            .map_err(|e| tagv_tensor::TensorError::Config(e.to_string()))?;
        out.total
            .ok_or_else(|| tagv_tensor::TensorError::Config("micro sample has no span targets".into()))
    }
}

/// Freshly initialized parameters with seeded noise on every coordinate,
/// so that unit gains and zero biases are not special points.
pub fn perturbed_params(cfg: &TrainConfig, vocab_len: usize) -> Result<ParamStore<f32>> {
    let mut store = init_params(cfg, vocab_len)?;
    let mut rng = RngState::derive(cfg.seed, &[NOISE_STREAM]);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += (rng.normal() * NOISE_STD) as f32;
        }
    }
    Ok(store)
}

pub struct ModelCheck {
    pub report: GradCheckReport,
    /// Groups from [`PARAM_GROUPS`] whose analytic gradient is exactly zero.
    pub dead_groups: Vec<&'static str>,
}

/// Checks the full model gradient in precision `T` on [`micro_sample`].
pub fn model_grad_check<T: Real>(cfg: &TrainConfig) -> Result<ModelCheck> {
    cfg.validate()?;
    let sample = micro_sample(cfg.d_v)?;
    let vocab = micro_vocab(&sample)?;
    let x = prepare(&sample, &vocab, cfg)?;
    if x.targets.is_none() {
        return Err(CoreError::NoCueTokens);
    }
    let store: ParamStore<T> = perturbed_params(cfg, vocab.len())?.cast();
    let obj = ModelObjective { cfg: cfg.clone(), x };
    let grads = analytic_grads(&store, &obj)?;
    let dead_groups = PARAM_GROUPS
        .into_iter()
        .filter(|g| {
            !grads
                .iter()
                .filter(|(name, _)| name.starts_with(g))
                .any(|(_, v)| v.iter().any(|x| !x.is_zero()))
        })
        .collect();
    let report = grad_check(&store, &obj, GradCheckOptions::for_precision::<T>())?;
    Ok(ModelCheck { report, dead_groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_sample_fits_micro_config() {
        let cfg = TrainConfig::micro();
        let s = micro_sample(cfg.d_v).unwrap();
        let vocab = micro_vocab(&s).unwrap();
        let x = prepare(&s, &vocab, &cfg).unwrap();
        assert!(x.question_ids.len() <= 6);
        assert_eq!(x.targets.map(|(s, e)| x.tokens.cue_of(s) == x.tokens.cue_of(e)), Some(true));
    }
}
