//! Samples, subtitle tracks, visual features and their on-disk formats.

mod features;
mod manifest;
mod srt;
mod synth;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use features::{load_features, resample_features, save_features, VisualFeatures};
pub use manifest::{load_corpus, manifest_path, save_corpus, LoadedCorpus, Manifest, ManifestEntry};
pub use srt::{parse_srt, write_srt, ParsedSrt};
pub use synth::{generate_splits, generate_synthetic_corpus, GenConfig, FILLERS, NOUNS, VERBS};

/// Slack allowed for cues that overshoot the video end.
pub const CUE_OVERSHOOT_S: f64 = 0.5;

/// Rounds seconds to the millisecond quantum used by subtitle files.
pub fn quantize_ms(s: f64) -> f64 {
    (s * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !start_s.is_finite() || !end_s.is_finite() {
            return Err(CoreError::Invalid(format!("non-finite span ({start_s}, {end_s})")));
        }
        if start_s < 0.0 || start_s > end_s {
            return Err(CoreError::Invalid(format!("bad span ({start_s}, {end_s})")));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn len(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0.0
    }

    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.start_s >= lo && self.end_s <= hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtitleCue {
    pub index: usize,
    pub span: TimeSpan,
    pub text: String,
}

/// Cues sorted by start time and numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtitleTrack {
    cues: Vec<SubtitleCue>,
}

impl SubtitleTrack {
    /// Builds a track from `(start, end, text)` triples in the given order.
    pub fn from_spans<S: Into<String>>(spans: impl IntoIterator<Item = (f64, f64, S)>) -> Result<Self> {
        let cues = spans
            .into_iter()
            .enumerate()
            .map(|(i, (s, e, text))| {
                Ok(SubtitleCue {
                    index: i + 1,
                    span: TimeSpan::new(s, e)?,
                    text: text.into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cues)
    }

    pub fn new(cues: Vec<SubtitleCue>) -> Result<Self> {
        if cues.is_empty() {
            return Err(CoreError::EmptyTrack);
        }
        for (i, c) in cues.iter().enumerate() {
            if c.index != i + 1 {
                return Err(CoreError::Invalid(format!(
                    "cue at position {} has index {}",
                    i + 1,
                    c.index
                )));
            }
            if c.text.trim().is_empty() {
                return Err(CoreError::Invalid(format!("cue {} has empty text", c.index)));
            }
            if c.span.start_s >= c.span.end_s {
                return Err(CoreError::Invalid(format!("cue {} has zero or negative length", c.index)));
            }
            if i > 0 && cues[i - 1].span.start_s > c.span.start_s {
                return Err(CoreError::Invalid(format!("cue {} starts before its predecessor", c.index)));
            }
        }
        Ok(Self { cues })
    }

    pub fn cues(&self) -> &[SubtitleCue] {
        &self.cues
    }

    pub fn len(&self) -> usize {
        self.cues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cues.is_empty()
    }

    /// The cue with 1-based ordinal `index`.
    pub fn cue(&self, index: usize) -> Option<&SubtitleCue> {
        index.checked_sub(1).and_then(|i| self.cues.get(i))
    }

    /// Copy with every cue end clipped to `limit`; returns the indices
    /// that were clipped.
    pub(crate) fn clip_to(&self, limit: f64) -> Result<(Self, Vec<usize>)> {
        let mut clipped = Vec::new();
        let mut cues = self.cues.clone();
        for c in &mut cues {
            if c.span.end_s > limit {
                clipped.push(c.index);
                c.span = TimeSpan::new(c.span.start_s, limit)?;
            }
        }
        Ok((Self::new(cues)?, clipped))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(CoreError::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub duration_s: f64,
    pub question: String,
    pub answer: TimeSpan,
    pub track: SubtitleTrack,
    pub features: VisualFeatures,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(CoreError::Invalid(format!("{}: bad duration {}", self.id, self.duration_s)));
        }
        if !self.answer.within(0.0, self.duration_s) {
            return Err(CoreError::Invalid(format!("{}: answer outside the video", self.id)));
        }
        let limit = self.duration_s + CUE_OVERSHOOT_S;
        if let Some(c) = self.track.cues().iter().find(|c| !c.span.within(0.0, limit)) {
            return Err(CoreError::Invalid(format!(
                "{}: cue {} ends at {} past duration {}",
                self.id, c.index, c.span.end_s, self.duration_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(split: Split, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(CoreError::Invalid(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Self { split, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_validation() {
        assert!(TimeSpan::new(1.0, 1.0).is_ok());
        assert!(TimeSpan::new(2.0, 1.0).is_err());
        assert!(TimeSpan::new(-0.1, 1.0).is_err());
        assert!(TimeSpan::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn track_rejects_unsorted_and_blank() {
        assert!(SubtitleTrack::from_spans([(3.0, 4.0, "b"), (1.0, 2.0, "a")]).is_err());
        assert!(SubtitleTrack::from_spans([(1.0, 2.0, "  ")]).is_err());
        assert!(matches!(
            SubtitleTrack::from_spans(Vec::<(f64, f64, String)>::new()),
            Err(CoreError::EmptyTrack)
        ));
    }

    #[test]
    fn quantize_is_idempotent() {
        let x = quantize_ms(14.9104);
        assert_eq!(x, 14.910);
        assert_eq!(quantize_ms(x), x);
    }
}
