use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_features, parse_srt, save_features, write_srt, Corpus, Sample, Split, TimeSpan, CUE_OVERSHOOT_S};
use crate::error::{io_err, CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub duration_s: f64,
    pub question: String,
    pub answer: TimeSpan,
    /// Relative to the manifest's directory.
    pub srt_path: String,
    pub feat_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub warnings: Vec<String>,
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.json"))
}

/// Loads a manifest and the files it references. Cues ending past the
/// video (within the overshoot slack) are clipped and reported.
pub fn load_corpus(manifest: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let path = manifest.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| CoreError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut warnings = Vec::new();
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in m.samples {
        let srt_file = base.join(&e.srt_path);
        let srt = std::fs::read(&srt_file).map_err(io_err(&srt_file))?;
        let parsed = parse_srt(&srt).map_err(|err| CoreError::Invalid(format!("{}: {err}", srt_file.display())))?;
        if parsed.reordered {
            warnings.push(format!("{}: cues were out of order and have been sorted", e.id));
        }
        let limit = e.duration_s + CUE_OVERSHOOT_S;
        if let Some(c) = parsed.track.cues().iter().find(|c| c.span.end_s > limit) {
            return Err(CoreError::Invalid(format!(
                "{}: cue {} ends at {}s, beyond duration {}s",
                e.id, c.index, c.span.end_s, e.duration_s
            )));
        }
        let (track, clipped) = parsed.track.clip_to(e.duration_s)?;
        if !clipped.is_empty() {
            warnings.push(format!("{}: clipped cues {:?} to the video end", e.id, clipped));
        }
        let features = load_features(base.join(&e.feat_path))?;
        samples.push(Sample {
            id: e.id,
            duration_s: e.duration_s,
            question: e.question,
            answer: e.answer,
            track,
            features,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LoadedCorpus {
        corpus: Corpus::new(m.split, samples)?,
        warnings,
    })
}

/// Writes `<split>.json` plus `srt/<id>.srt` and `feat/<id>.feat` under
/// `dir`, returning the manifest path.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["srt", "feat"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut entries = Vec::with_capacity(corpus.len());
    for s in &corpus.samples {
        let srt_path = format!("srt/{}.srt", s.id);
        let feat_path = format!("feat/{}.feat", s.id);
        let p = dir.join(&srt_path);
        std::fs::write(&p, write_srt(&s.track)).map_err(io_err(&p))?;
        save_features(dir.join(&feat_path), &s.features)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            duration_s: s.duration_s,
            question: s.question.clone(),
            answer: s.answer,
            srt_path,
            feat_path,
        });
    }
    let m = Manifest {
        split: corpus.split,
        samples: entries,
    };
    let path = manifest_path(dir, corpus.split);
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}
