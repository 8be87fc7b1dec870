//! Mapping a visual answer span onto subtitle boundaries.

use crate::corpus::SubtitleTrack;
use crate::error::{CoreError, Result};

/// Subtitle-aligned span. `r_e < r_s` is possible and returned as is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedSpan {
    pub r_s: f64,
    pub r_e: f64,
    pub start_cue: usize,
    pub end_cue: usize,
}

/// Picks the cue start nearest `tau_s` (first cue on ties) and the cue end
/// nearest `tau_e` (last cue on ties), scanning cues in track order.
pub fn select_subtitle_span(track: &SubtitleTrack, tau_s: f64, tau_e: f64) -> Result<SelectedSpan> {
    if track.is_empty() {
        return Err(CoreError::EmptyTrack);
    }
    if !tau_s.is_finite() || !tau_e.is_finite() {
        return Err(CoreError::Invalid(format!("non-finite answer span ({tau_s}, {tau_e})")));
    }
    let mut start_min = f64::INFINITY;
    let mut end_min = f64::INFINITY;
    let (mut r_s, mut r_e, mut start_cue, mut end_cue) = (0.0, 0.0, 0, 0);
    for c in track.cues() {
        let ds = (c.span.start_s - tau_s).abs();
        if ds < start_min {
            start_min = ds;
            r_s = c.span.start_s;
            start_cue = c.index;
        }
        let de = (c.span.end_s - tau_e).abs();
        if de <= end_min {
            end_min = de;
            r_e = c.span.end_s;
            end_cue = c.index;
        }
    }
    Ok(SelectedSpan {
        r_s,
        r_e,
        start_cue,
        end_cue,
    })
}

/// Brute-force reference for [`select_subtitle_span`]: collects all
/// distances, then takes the first minimum for the start and the last
/// minimum for the end.
pub fn oracle_select(track: &SubtitleTrack, tau_s: f64, tau_e: f64) -> Result<SelectedSpan> {
    if track.is_empty() {
        return Err(CoreError::EmptyTrack);
    }
    if !tau_s.is_finite() || !tau_e.is_finite() {
        return Err(CoreError::Invalid(format!("non-finite answer span ({tau_s}, {tau_e})")));
    }
    let cues = track.cues();
    let ds: Vec<f64> = cues.iter().map(|c| (c.span.start_s - tau_s).abs()).collect();
    let de: Vec<f64> = cues.iter().map(|c| (c.span.end_s - tau_e).abs()).collect();
    let min_s = ds.iter().copied().fold(f64::INFINITY, f64::min);
    let min_e = de.iter().copied().fold(f64::INFINITY, f64::min);
    let i = ds.iter().position(|&d| d == min_s).expect("non-empty");
    let j = de.iter().rposition(|&d| d == min_e).expect("non-empty");
    Ok(SelectedSpan {
        r_s: cues[i].span.start_s,
        r_e: cues[j].span.end_s,
        start_cue: cues[i].index,
        end_cue: cues[j].index,
    })
}
