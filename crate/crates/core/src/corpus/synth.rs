//! Seeded synthetic corpus whose answers are recoverable from both text and
//! visual features.
//!
//! Each question names a verb and a noun. The first answer cue opens with the
//! verb and the last answer cue closes with the noun; other cues draw only
//! from a filler pool unless distractors are enabled. Frames inside the
//! answer carry a positive offset on feature channel 0 and frames outside
//! carry a non-positive one.

use serde::{Deserialize, Serialize};
use tagv_tensor::RngState;

use super::{quantize_ms, Corpus, Sample, Split, SubtitleTrack, TimeSpan, VisualFeatures};
use crate::error::{CoreError, Result};

pub const VERBS: [&str; 6] = ["examine", "clean", "bandage", "stretch", "measure", "massage"];
pub const NOUNS: [&str; 6] = ["knee", "wound", "wrist", "ankle", "shoulder", "neck"];
pub const FILLERS: [&str; 24] = [
    "okay", "so", "now", "we", "you", "will", "just", "then", "here", "this", "is", "going", "to",
    "see", "very", "gently", "next", "all", "right", "keep", "it", "there", "slowly", "again",
];
const TEMPLATES: [(&str, &str, &str); 3] = [
    ("how do i", "the", "?"),
    ("how to", "a", "?"),
    ("what is the way to", "my", "?"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    pub cues_min: usize,
    pub cues_max: usize,
    pub answer_max_cues: usize,
    pub cue_tokens_min: usize,
    pub cue_tokens_max: usize,
    pub frames_per_s: f64,
    pub d_v: usize,
    /// Minimum gap between in-answer and out-of-answer values on channel 0.
    pub signature_shift: f64,
    /// Probability that a non-answer cue carries a random keyword.
    pub distractor_rate: f64,
    /// Split sizes for [`generate_splits`]; `None` means half the train size.
    pub n_valid: Option<usize>,
    pub n_test: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            duration_min_s: 30.0,
            duration_max_s: 90.0,
            cues_min: 4,
            cues_max: 20,
            answer_max_cues: 3,
            cue_tokens_min: 3,
            cue_tokens_max: 6,
            frames_per_s: 2.0,
            d_v: 32,
            signature_shift: 1.5,
            distractor_rate: 0.0,
            n_valid: None,
            n_test: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.duration_min_s > 0.0 && self.duration_min_s <= self.duration_max_s) {
            return bad("need 0 < duration_min_s <= duration_max_s");
        }
        if !(1 <= self.cues_min && self.cues_min <= self.cues_max) {
            return bad("need 1 <= cues_min <= cues_max");
        }
        if self.answer_max_cues == 0 {
            return bad("answer_max_cues must be at least 1");
        }
        if !(2 <= self.cue_tokens_min && self.cue_tokens_min <= self.cue_tokens_max) {
            return bad("need 2 <= cue_tokens_min <= cue_tokens_max");
        }
        if self.d_v == 0 || !(self.frames_per_s > 0.0) || !(self.signature_shift >= 0.0) {
            return bad("d_v, frames_per_s must be positive and signature_shift non-negative");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("distractor_rate must be in [0, 1]");
        }
        // Shortest cue is 0.6 of the mean length; it must still contain a
        // frame centre so every answer has in-answer frames.
        let shortest = 0.6 * self.duration_min_s / self.cues_max as f64;
        if shortest * self.frames_per_s < 1.0 {
            return bad("cues too short for the frame rate; raise frames_per_s or duration_min_s");
        }
        Ok(())
    }
}

fn split_code(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Valid => 2,
        Split::Test => 3,
    }
}

fn gen_sample(i: usize, seed: u64, split: Split, cfg: &GenConfig) -> Result<Sample> {
    let offsets = RngState::derive(seed, &[split_code(split)]).int_in(0, 35);
    let mut rng = RngState::derive(seed, &[split_code(split), i as u64]);

    let dur_ms = (rng.uniform_in(cfg.duration_min_s, cfg.duration_max_s) * 1000.0).round() as u64;
    let duration_s = dur_ms as f64 / 1000.0;
    let n_cues = rng.int_in(cfg.cues_min, cfg.cues_max);

    // Cue lengths vary within ±25% of the mean; cumulative sums give the
    // boundaries, with the last pinned to the video end.
    let weights: Vec<f64> = (0..n_cues).map(|_| rng.uniform_in(0.75, 1.25)).collect();
    let total: f64 = weights.iter().sum();
    let mut bounds = vec![0u64];
    let mut acc = 0.0;
    for w in &weights[..n_cues - 1] {
        acc += w;
        bounds.push((acc / total * dur_ms as f64).round() as u64);
    }
    bounds.push(dur_ms);

    let run = rng.int_in(1, cfg.answer_max_cues.min(n_cues));
    let first = rng.int_in(0, n_cues - run);
    let last = first + run - 1;
    let answer = TimeSpan::new(bounds[first] as f64 / 1000.0, bounds[last + 1] as f64 / 1000.0)?;

    // Keywords cycle through the pools so any six consecutive samples
    // cover every verb and noun.
    let verb = VERBS[(i + offsets % 6) % VERBS.len()];
    let noun = NOUNS[(i + i / 6 + offsets / 6) % NOUNS.len()];
    let (pre, det, post) = *rng.choose(&TEMPLATES);
    let question = format!("{pre} {verb} {det} {noun} {post}");

    let mut cues = Vec::with_capacity(n_cues);
    for k in 0..n_cues {
        let n_tok = rng.int_in(cfg.cue_tokens_min, cfg.cue_tokens_max);
        let mut words: Vec<&str> = (0..n_tok).map(|_| *rng.choose(&FILLERS)).collect();
        if k == first {
            words[0] = verb;
        }
        if k == last {
            words[n_tok - 1] = noun;
        }
        if !(first..=last).contains(&k) && rng.bernoulli(cfg.distractor_rate) {
            let pool = if rng.bernoulli(0.5) { &VERBS } else { &NOUNS };
            let at = rng.int_in(0, n_tok - 1);
            words[at] = *rng.choose(pool);
        }
        cues.push((bounds[k] as f64 / 1000.0, bounds[k + 1] as f64 / 1000.0, words.join(" ")));
    }
    let track = SubtitleTrack::from_spans(cues)?;

    let n_src = ((duration_s * cfg.frames_per_s).round() as usize).max(1);
    let mut rows = Vec::with_capacity(n_src * cfg.d_v);
    for f in 0..n_src {
        let centre = quantize_ms((f as f64 + 0.5) / cfg.frames_per_s);
        let inside = centre >= answer.start_s && centre <= answer.end_s;
        for c in 0..cfg.d_v {
            let z = rng.normal();
            let v = match (c, inside) {
                (0, true) => cfg.signature_shift + 0.25 * z.abs(),
                (0, false) => -0.25 * z.abs(),
                _ => z,
            };
            rows.push(v as f32);
        }
    }

    Ok(Sample {
        id: format!("{split}-{i:04}"),
        duration_s,
        question,
        answer,
        track,
        features: VisualFeatures::new(n_src, cfg.d_v, rows)?,
    })
}

/// Pure function of its arguments: equal inputs give equal corpora.
pub fn generate_synthetic_corpus(n_samples: usize, seed: u64, split: Split, cfg: &GenConfig) -> Result<Corpus> {
    if n_samples == 0 {
        return Err(CoreError::Config("n_samples must be at least 1".into()));
    }
    cfg.validate()?;
    let samples = (0..n_samples)
        .map(|i| gen_sample(i, seed, split, cfg))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(split, samples)
}

/// Train, valid and test corpora from one seed.
pub fn generate_splits(n_train: usize, seed: u64, cfg: &GenConfig) -> Result<[Corpus; 3]> {
    let half = (n_train / 2).max(1);
    Ok([
        generate_synthetic_corpus(n_train, seed, Split::Train, cfg)?,
        generate_synthetic_corpus(cfg.n_valid.unwrap_or(half), seed, Split::Valid, cfg)?,
        generate_synthetic_corpus(cfg.n_test.unwrap_or(half), seed, Split::Test, cfg)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = GenConfig::default();
        let a = generate_synthetic_corpus(8, 7, Split::Train, &cfg).unwrap();
        let b = generate_synthetic_corpus(8, 7, Split::Train, &cfg).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            let n = s.track.len();
            assert!((cfg.cues_min..=cfg.cues_max).contains(&n));
            assert_eq!(s.track.cues()[0].span.start_s, 0.0);
            assert_eq!(s.track.cues()[n - 1].span.end_s, s.duration_s);
            for w in s.track.cues().windows(2) {
                assert_eq!(w[0].span.end_s, w[1].span.start_s);
            }
            let starts: Vec<f64> = s.track.cues().iter().map(|c| c.span.start_s).collect();
            let ends: Vec<f64> = s.track.cues().iter().map(|c| c.span.end_s).collect();
            assert!(starts.contains(&s.answer.start_s));
            assert!(ends.contains(&s.answer.end_s));
        }
    }

    #[test]
    fn different_splits_differ() {
        let cfg = GenConfig::default();
        let a = generate_synthetic_corpus(2, 7, Split::Train, &cfg).unwrap();
        let b = generate_synthetic_corpus(2, 7, Split::Valid, &cfg).unwrap();
        assert_ne!(a.samples[0].duration_s, b.samples[0].duration_s);
        assert_eq!(b.samples[1].id, "valid-0001");
    }

    #[test]
    fn six_samples_cover_every_keyword() {
        let c = generate_synthetic_corpus(6, 3, Split::Train, &GenConfig::default()).unwrap();
        for v in VERBS {
            assert!(c.samples.iter().any(|s| s.question.contains(v)), "{v}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GenConfig {
            cue_tokens_min: 1,
            ..GenConfig::default()
        };
        assert!(generate_synthetic_corpus(1, 0, Split::Train, &cfg).is_err());
        assert!(generate_synthetic_corpus(0, 0, Split::Train, &GenConfig::default()).is_err());
    }
}
