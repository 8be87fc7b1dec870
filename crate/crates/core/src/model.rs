//! Parameter layout, per-sample input preparation and the full forward pass
//! (cross-modal fusion, highlighting, prompted span prediction).

use std::collections::BTreeMap;

use tagv_tensor::{ParamStore, Real, RngState, Tape, Tensor, TensorError, Var};

use crate::config::TrainConfig;
use crate::corpus::{resample_features, Sample};
use crate::crossmodal::{context_query_attention, text_projection, trilinear_similarity, visual_projection, Similarity, VISUAL_KERNEL};
use crate::error::{CoreError, Result};
use crate::highlight::{
    build_extended_mask, highlight_loss, highlight_scores, pool_question, project_prompt_token, HighlightMask,
    HIGHLIGHT_KERNEL,
};
use crate::selection::{select_subtitle_span, SelectedSpan};
use crate::spanpred::{
    assemble_input, encode, sinusoidal_positions, span_logits, span_loss, span_targets, SpanLogitVars, TokenSequence,
    Vocabulary, PAD,
};
use crate::trainer::total_loss;

/// Parameters bound onto one tape, by name.
#[derive(Debug, Clone, Default)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn new(map: BTreeMap<String, Var>) -> Self {
        Self(map)
    }

    pub fn bind<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, t) in store.iter() {
            map.insert(name.to_string(), tape.param(t)?);
        }
        Ok(Self(map))
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()).into())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    Fan(usize),
    Normal(f64),
    Zeros,
    Ones,
}

fn param_specs(cfg: &TrainConfig, vocab_len: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
        ("visual.conv.weight".into(), vec![VISUAL_KERNEL, cfg.d_v, d], Init::Fan(VISUAL_KERNEL * cfg.d_v)),
        ("visual.conv.bias".into(), vec![d], Init::Zeros),
        ("text.proj.weight".into(), vec![d, d], Init::Fan(d)),
        ("text.proj.bias".into(), vec![d], Init::Zeros),
        ("cqa.w_s".into(), vec![3 * d], Init::Fan(d)),
        ("cqa.ffn.weight".into(), vec![4 * d, d], Init::Fan(4 * d)),
        ("cqa.ffn.bias".into(), vec![d], Init::Zeros),
        ("highlight.pool.u".into(), vec![d], Init::Fan(d)),
        ("highlight.conv.weight".into(), vec![HIGHLIGHT_KERNEL, 2 * d, 1], Init::Fan(HIGHLIGHT_KERNEL * 2 * d)),
        ("highlight.conv.bias".into(), vec![1], Init::Zeros),
        ("prompt.proj.weight".into(), vec![cfg.n, d], Init::Fan(cfg.n)),
        ("prompt.proj.bias".into(), vec![d], Init::Zeros),
        ("encoder.tok_embed".into(), vec![vocab_len, d], Init::Normal(1.0)),
        ("span.start.weight".into(), vec![d, 1], Init::Fan(d)),
        ("span.start.bias".into(), vec![1], Init::Zeros),
        ("span.end.weight".into(), vec![d, 1], Init::Fan(d)),
        ("span.end.bias".into(), vec![1], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("encoder.layer{l}.{s}");
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((name(&format!("attn.{w}")), vec![d, d], Init::Fan(d)));
            specs.push((name(&format!("attn.b{}", &w[1..])), vec![d], Init::Zeros));
        }
        specs.push((name("ln1.gamma"), vec![d], Init::Ones));
        specs.push((name("ln1.beta"), vec![d], Init::Zeros));
        specs.push((name("ffn.w1"), vec![d, cfg.ffn_dim], Init::Fan(d)));
        specs.push((name("ffn.b1"), vec![cfg.ffn_dim], Init::Zeros));
        specs.push((name("ffn.w2"), vec![cfg.ffn_dim, d], Init::Fan(cfg.ffn_dim)));
        specs.push((name("ffn.b2"), vec![d], Init::Zeros));
        specs.push((name("ln2.gamma"), vec![d], Init::Ones));
        specs.push((name("ln2.beta"), vec![d], Init::Zeros));
    }
    specs
}

const INIT_STREAM: u64 = 0x1417;

/// Freshly initialized parameters; a pure function of `cfg` and the
/// vocabulary size.
pub fn init_params(cfg: &TrainConfig, vocab_len: usize) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, dims, init) in param_specs(cfg, vocab_len) {
        let mut rng = RngState::derive(cfg.seed, &[INIT_STREAM, fnv1a(&name)]);
        let t = match init {
            Init::Fan(f) => {
                let std = 1.0 / (f as f64).sqrt();
                Tensor::from_fn(dims, |_| (rng.normal() * std) as f32)
            }
            Init::Normal(std) => Tensor::from_fn(dims, |_| (rng.normal() * std) as f32),
            Init::Zeros => Tensor::zeros(dims),
            Init::Ones => Tensor::from_fn(dims, |_| 1.0),
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Names and shapes a checkpoint for `cfg` must contain.
pub fn expected_shapes(cfg: &TrainConfig, vocab_len: usize) -> BTreeMap<String, Vec<usize>> {
    param_specs(cfg, vocab_len).into_iter().map(|(n, d, _)| (n, d)).collect()
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Everything about a sample that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    /// `n × d_v`, resampled.
    pub frames: Vec<f32>,
    pub question_ids: Vec<usize>,
    pub tokens: TokenSequence,
    pub mask: HighlightMask,
    pub selected: SelectedSpan,
    /// `None` when truncation cut a target cue.
    pub targets: Option<(usize, usize)>,
}

pub fn prepare(sample: &Sample, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<Prepared> {
    if sample.features.d_v() != cfg.d_v {
        return Err(CoreError::Invalid(format!(
            "{}: features have d_v {}, configuration expects {}",
            sample.id,
            sample.features.d_v(),
            cfg.d_v
        )));
    }
    let frames = resample_features(&sample.features, cfg.n)?.rows().to_vec();
    let tokens = assemble_input(&sample.question, &sample.track, vocab, cfg.max_tokens)?;
    let question_ids = tokens.ids[1..tokens.vis_pos - 1].to_vec();
    if question_ids.is_empty() {
        return Err(CoreError::Invalid(format!("{}: question has no tokens", sample.id)));
    }
    let mask = build_extended_mask(&sample.answer, sample.duration_s, cfg.n, cfg.alpha)?;
    let selected = select_subtitle_span(&sample.track, sample.answer.start_s, sample.answer.end_s)?;
    let targets = span_targets(&tokens, &selected);
    Ok(Prepared {
        id: sample.id.clone(),
        frames,
        question_ids,
        tokens,
        mask,
        selected,
        targets,
    })
}

#[derive(Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Enables dropout.
    pub rng: Option<&'a mut RngState>,
    /// Pads the token sequence with `[PAD]` to this length.
    pub pad_to: Option<usize>,
    /// Replaces the prompt token with zeros.
    pub zero_prompt: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub similarity: Similarity,
    /// `n × 1` highlight probabilities.
    pub scores: Var,
    pub prompt: Var,
    pub hidden: Var,
    pub attn: Vec<Vec<Var>>,
    pub logits: SpanLogitVars,
    pub hl_loss: Var,
    pub span_loss: Option<Var>,
    /// `λ·hl + span`, when the sample has targets.
    pub total: Option<Var>,
}

pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &TrainConfig,
    x: &Prepared,
    mut opts: ForwardOptions<'_>,
) -> Result<ForwardOut> {
    let d = cfg.d_model;
    let frames = tape.constant(cfg.n, cfg.d_v, x.frames.iter().map(|&v| T::lit(v as f64)).collect())?;
    let v = visual_projection(tape, p, cfg, frames, opts.rng.as_deref_mut())?;

    let m = x.question_ids.len();
    let qe = tape.gather_rows(p.get("encoder.tok_embed")?, &x.question_ids)?;
    let qpos = tape.constant(m, d, sinusoidal_positions(m, d).into_iter().map(T::lit).collect())?;
    let qe = tape.add(qe, qpos)?;
    let q = text_projection(tape, p, qe)?;

    let similarity = trilinear_similarity(tape, p, v, q)?;
    let fused = context_query_attention(tape, p, v, q, &similarity)?;
    let h_q = pool_question(tape, p, q)?;
    let scores = highlight_scores(tape, p, h_q, fused)?;
    let hl_loss = highlight_loss(tape, scores, &x.mask)?;
    let prompt = if opts.zero_prompt {
        tape.constant(1, d, vec![T::zero(); d])?
    } else {
        project_prompt_token(tape, p, scores)?
    };

    let len = x.tokens.len();
    let padded = opts.pad_to.unwrap_or(len).max(len);
    let mut ids = x.tokens.ids.clone();
    ids.resize(padded, PAD);
    let key_mask: Vec<bool> = (0..padded).map(|i| i < len).collect();
    let mut valid = x.tokens.cue_mask();
    valid.resize(padded, false);

    let enc = encode(tape, p, cfg, &ids, x.tokens.vis_pos, prompt, &key_mask, opts.rng)?;
    let logits = span_logits(tape, p, enc.hidden, &valid)?;
    let (span, total) = match x.targets {
        Some(t) => {
            let s = span_loss(tape, &logits, t, &valid)?;
            (Some(s), Some(total_loss(tape, s, hl_loss, cfg.lambda)?))
        }
        None => (None, None),
    };
    Ok(ForwardOut {
        similarity,
        scores,
        prompt,
        hidden: enc.hidden,
        attn: enc.attn,
        logits,
        hl_loss,
        span_loss: span,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = TrainConfig::micro();
        let a = init_params(&cfg, 20).unwrap();
        let b = init_params(&cfg, 20).unwrap();
        assert_eq!(a, b);
        let shapes = expected_shapes(&cfg, 20);
        assert_eq!(a.len(), shapes.len());
        for (name, t) in a.iter() {
            assert_eq!(t.dims(), shapes[name].as_slice(), "{name}");
        }
        assert_eq!(a.get("encoder.layer0.ln1.gamma").unwrap().data()[0], 1.0);
        let other = init_params(&TrainConfig { seed: 8, ..cfg }, 20).unwrap();
        assert_ne!(a.get("cqa.w_s").unwrap(), other.get("cqa.w_s").unwrap());
    }
}
