//! Text input assembly around the visual prompt slot, the span encoder and
//! heads, and decoding of token spans back to subtitle timestamps.

mod encoder;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::DecodeMode;
use crate::corpus::{Corpus, SubtitleTrack};
use crate::error::{CoreError, Result};
use crate::selection::SelectedSpan;

pub use encoder::{encode, sinusoidal_positions, span_logits, span_loss, EncoderOutput, SpanLogitVars};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const VIS: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[VIS]"];

/// Lowercases, splits on whitespace and emits every character that is
/// neither alphanumeric nor whitespace as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token to id map; ids are dense and the five specials come first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by `words` (deduplicated, in sorted order).
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut rest: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        rest.sort();
        rest.dedup();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Every token of every question and cue in `corpus`.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut words = Vec::new();
        for s in &corpus.samples {
            words.extend(tokenize(&s.question));
            for c in s.track.cues() {
                words.extend(tokenize(&c.text));
            }
        }
        Self::new(words)
    }

    /// Rebuilds from a full token list as stored in a checkpoint.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(CoreError::Invalid("vocabulary must start with the special tokens".into()));
        }
        let index: BTreeMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(CoreError::Invalid("vocabulary has duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Seg {
    Special,
    Question,
    /// Token of the cue with this 1-based ordinal.
    Cue(usize),
}

/// `[CLS] q… [SEP] [VIS] [SEP] cue₁… [SEP] cue₂… [SEP] …`
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub seg: Vec<Seg>,
    pub vis_pos: usize,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True at tokens that belong to a cue.
    pub fn cue_mask(&self) -> Vec<bool> {
        self.seg.iter().map(|s| matches!(s, Seg::Cue(_))).collect()
    }

    pub fn cue_of(&self, pos: usize) -> Option<usize> {
        match self.seg.get(pos) {
            Some(Seg::Cue(k)) => Some(*k),
            _ => None,
        }
    }
}

/// Lays out question and cue tokens around the prompt slot, cutting tokens
/// from the tail beyond `max_tokens`.
pub fn assemble_input(question: &str, track: &SubtitleTrack, vocab: &Vocabulary, max_tokens: usize) -> Result<TokenSequence> {
    let q = vocab.encode(question);
    let needed = q.len() + 4;
    if needed > max_tokens {
        return Err(CoreError::QuestionTooLong { needed, max: max_tokens });
    }
    let mut ids = Vec::with_capacity(max_tokens.min(256));
    let mut seg = Vec::with_capacity(ids.capacity());
    ids.push(CLS);
    seg.push(Seg::Special);
    for &t in &q {
        ids.push(t);
        seg.push(Seg::Question);
    }
    ids.extend([SEP, VIS, SEP]);
    seg.extend([Seg::Special; 3]);
    let vis_pos = q.len() + 2;
    let mut truncated = false;
    'cues: for c in track.cues() {
        let toks = vocab.encode(&c.text);
        for (t, s) in toks.into_iter().map(|t| (t, Seg::Cue(c.index))).chain([(SEP, Seg::Special)]) {
            if ids.len() == max_tokens {
                truncated = true;
                break 'cues;
            }
            ids.push(t);
            seg.push(s);
        }
    }
    Ok(TokenSequence {
        ids,
        seg,
        vis_pos,
        truncated,
    })
}

/// Token targets for a selected span: the first token of the start cue and
/// the last token of the end cue. An inverted selection is swapped. `None`
/// when truncation removed a target cue.
pub fn span_targets(tokens: &TokenSequence, selected: &SelectedSpan) -> Option<(usize, usize)> {
    let (a, b) = if selected.end_cue < selected.start_cue {
        (selected.end_cue, selected.start_cue)
    } else {
        (selected.start_cue, selected.end_cue)
    };
    let s = tokens.seg.iter().position(|&g| g == Seg::Cue(a))?;
    let e = tokens.seg.iter().rposition(|&g| g == Seg::Cue(b))?;
    Some((s, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub s: usize,
    pub e: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub start_cue: usize,
    pub end_cue: usize,
}

fn first_argmax(p: &[f64], valid: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in (0..p.len()).filter(|&i| valid[i]) {
        if best.is_none_or(|b| p[i] > p[b]) {
            best = Some(i);
        }
    }
    best
}

/// Best ordered pair `s ≤ e < s + window` of cue tokens by `l1[s]·l2[e]`;
/// the first maximum in `(s, e)` order wins.
fn joint_argmax(l1: &[f64], l2: &[f64], valid: &[bool], window: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for s in (0..l1.len()).filter(|&s| valid[s]) {
        let hi = (s + window).min(l2.len());
        for e in (s..hi).filter(|&e| valid[e]) {
            let score = l1[s] * l2[e];
            if best.is_none_or(|(_, _, b)| score > b) {
                best = Some((s, e, score));
            }
        }
    }
    best.map(|(s, e, _)| (s, e))
}

/// Maps start/end probabilities over `tokens` to a cue-aligned time span.
pub fn decode_span(
    l1: &[f64],
    l2: &[f64],
    tokens: &TokenSequence,
    track: &SubtitleTrack,
    mode: DecodeMode,
    max_span_tokens: usize,
) -> Result<SpanPrediction> {
    if l1.len() < tokens.len() || l2.len() < tokens.len() {
        return Err(CoreError::Invalid(format!(
            "span distributions of length {}/{} for {} tokens",
            l1.len(),
            l2.len(),
            tokens.len()
        )));
    }
    let (l1, l2) = (&l1[..tokens.len()], &l2[..tokens.len()]);
    let valid = tokens.cue_mask();
    let joint = || joint_argmax(l1, l2, &valid, max_span_tokens.max(1)).ok_or(CoreError::NoCueTokens);
    let (s, e) = match mode {
        DecodeMode::Joint => joint()?,
        DecodeMode::Independent => {
            let s = first_argmax(l1, &valid).ok_or(CoreError::NoCueTokens)?;
            let e = first_argmax(l2, &valid).ok_or(CoreError::NoCueTokens)?;
            if e < s {
                joint()?
            } else {
                (s, e)
            }
        }
    };
    let (start_cue, end_cue) = (tokens.cue_of(s).unwrap(), tokens.cue_of(e).unwrap());
    let cue = |k: usize| {
        track
            .cue(k)
            .ok_or_else(|| CoreError::Invalid(format!("token refers to cue {k} missing from the track")))
    };
    Ok(SpanPrediction {
        s,
        e,
        start_s: cue(start_cue)?.span.start_s,
        end_s: cue(end_cue)?.span.end_s,
        start_cue,
        end_cue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(tokenize("how to examine lymph nodes ? first check the neck then armpit"))
    }

    fn track() -> SubtitleTrack {
        SubtitleTrack::from_spans([(0.0, 2.0, "first check"), (2.0, 5.0, "the neck then armpit")]).unwrap()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("How to examine lymph nodes?"), ["how", "to", "examine", "lymph", "nodes", "?"]);
        assert!(tokenize("").is_empty());
        let t = tokenize("Don't  stop, OK!");
        assert_eq!(t, ["don", "'", "t", "stop", ",", "ok", "!"]);
        assert_eq!(tokenize(&t.join(" ")), t);
    }

    #[test]
    fn vocab_specials_and_unknowns() {
        let v = vocab();
        assert_eq!(&v.tokens()[..5], SPECIALS);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.token(v.id("neck")), "neck");
        assert_eq!(Vocabulary::from_tokens(v.tokens().to_vec()).unwrap(), v);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn layout_of_two_cue_sample() {
        let v = vocab();
        let ts = assemble_input("How to examine lymph nodes?", &track(), &v, 100).unwrap();
        assert_eq!(ts.ids.iter().filter(|&&i| i == SEP).count(), 4);
        assert_eq!(ts.vis_pos, 6 + 2);
        assert_eq!(ts.ids[ts.vis_pos], VIS);
        assert_eq!(ts.ids[0], CLS);
        assert!(!ts.truncated);
        assert_eq!(ts.len(), 1 + 6 + 3 + 2 + 1 + 4 + 1);
        assert_eq!(ts.seg[11], Seg::Cue(1));
        assert_eq!(ts.seg[14], Seg::Cue(2));
    }

    #[test]
    fn truncation_and_overlong_question() {
        let v = vocab();
        let ts = assemble_input("how to", &track(), &v, 9).unwrap();
        assert!(ts.truncated);
        assert_eq!(ts.len(), 9);
        assert!(matches!(
            assemble_input("how to examine lymph nodes ?", &track(), &v, 9),
            Err(CoreError::QuestionTooLong { needed: 10, max: 9 })
        ));
    }

    #[test]
    fn targets_swap_inversions_and_skip_missing() {
        let v = vocab();
        let ts = assemble_input("how to", &track(), &v, 100).unwrap();
        let sel = |a, b| SelectedSpan { r_s: 0.0, r_e: 0.0, start_cue: a, end_cue: b };
        let (s, e) = span_targets(&ts, &sel(1, 2)).unwrap();
        assert_eq!((ts.seg[s], ts.seg[e]), (Seg::Cue(1), Seg::Cue(2)));
        assert_eq!(span_targets(&ts, &sel(2, 1)), Some((s, e)));
        let cut = assemble_input("how to", &track(), &v, 8).unwrap();
        assert_eq!(span_targets(&cut, &sel(1, 2)), None);
    }

    #[test]
    fn decode_single_token_mass_and_independent_fallback() {
        let v = vocab();
        let ts = assemble_input("how to", &track(), &v, 100).unwrap();
        let n = ts.len();
        let mut l1 = vec![0.0; n];
        let mut l2 = vec![0.0; n];
        // tokens: [CLS] how to [SEP] [VIS] [SEP] first check [SEP] the neck then armpit [SEP]
        l1[7] = 1.0;
        l2[7] = 1.0;
        let p = decode_span(&l1, &l2, &ts, &track(), DecodeMode::Joint, 64).unwrap();
        assert_eq!((p.s, p.e, p.start_s, p.end_s), (7, 7, 0.0, 2.0));

        // Independent argmaxes inverted: start peak at 10, end peak at 6.
        let mut l1 = vec![0.0; n];
        let mut l2 = vec![0.0; n];
        l1[10] = 0.6;
        l1[6] = 0.4;
        l2[6] = 0.7;
        l2[11] = 0.3;
        let p = decode_span(&l1, &l2, &ts, &track(), DecodeMode::Independent, 64).unwrap();
        // Pairs: (6,6)=0.28, (6,11)=0.12, (10,11)=0.18
        assert_eq!((p.s, p.e), (6, 6));
    }
}
