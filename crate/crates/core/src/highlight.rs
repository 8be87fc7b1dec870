//! Frame highlight scores, their extended ground-truth mask, and the prompt
//! token projected from the scores.

use tagv_tensor::nn::linear;
use tagv_tensor::{Axis, Real, Tape, Var};

use crate::corpus::TimeSpan;
use crate::error::{CoreError, Result};
use crate::model::ParamVars;

pub const HIGHLIGHT_KERNEL: usize = 7;
pub const BCE_EPS: f64 = 1e-7;

/// Binary frame mask over an answer window widened by `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct HighlightMask {
    pub mask: Vec<bool>,
    pub t_highlight: f64,
    pub t_extend: f64,
    pub alpha: f64,
}

impl HighlightMask {
    pub fn targets<T: Real>(&self) -> Vec<T> {
        self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
    }
}

/// Marks frame `i` (centre `(i + ½)·duration/n`) when its centre lies in
/// the window of width `T_extend = (t_e − t_s)(α + 1)` centred on the
/// answer, clipped to the video.
pub fn build_extended_mask(answer: &TimeSpan, duration_s: f64, n: usize, alpha: f64) -> Result<HighlightMask> {
    if n == 0 {
        return Err(CoreError::Config("highlight mask needs at least one frame".into()));
    }
    if !(alpha >= -1.0) {
        return Err(CoreError::Config(format!("alpha must be at least -1, got {alpha}")));
    }
    let t_highlight = answer.end_s - answer.start_s;
    let t_extend = t_highlight * (alpha + 1.0);
    let c = (answer.start_s + answer.end_s) / 2.0;
    let lo = (c - t_extend / 2.0).max(0.0);
    let hi = (c + t_extend / 2.0).min(duration_s);
    let mask = (0..n)
        .map(|i| {
            let centre = (2 * i + 1) as f64 * duration_s / (2 * n) as f64;
            centre >= lo && centre <= hi
        })
        .collect();
    Ok(HighlightMask {
        mask,
        t_highlight,
        t_extend,
        alpha,
    })
}

/// `a = softmax(Q·u)` over tokens, `h_Q = aᵀ·Q` (`1 × d`).
pub fn pool_question<T: Real>(tape: &mut Tape<T>, p: &ParamVars, q: Var) -> Result<Var> {
    let u = p.get("highlight.pool.u")?;
    let ut = tape.transpose(u)?;
    let scores = tape.matmul(q, ut)?;
    let a = tape.softmax(scores, Axis::Rows, None)?;
    let at = tape.transpose(a)?;
    Ok(tape.matmul(at, q)?)
}

/// `σ(Conv1D([h_Q; ṽ_i]))` per frame, as an `n × 1` column.
pub fn highlight_scores<T: Real>(tape: &mut Tape<T>, p: &ParamVars, h_q: Var, fused: Var) -> Result<Var> {
    let n = tape.shape(fused).0;
    let ones = tape.constant(n, 1, vec![T::one(); n])?;
    let rep = tape.matmul(ones, h_q)?;
    let x = tape.concat(&[rep, fused], Axis::Cols)?;
    let logits = tape.conv1d_same(
        x,
        p.get("highlight.conv.weight")?,
        p.get("highlight.conv.bias")?,
        HIGHLIGHT_KERNEL,
    )?;
    Ok(tape.sigmoid(logits)?)
}

/// Mean BCE of the scores against the mask.
pub fn highlight_loss<T: Real>(tape: &mut Tape<T>, scores: Var, mask: &HighlightMask) -> Result<Var> {
    let n = tape.shape(scores).0 * tape.shape(scores).1;
    if n != mask.mask.len() {
        return Err(CoreError::Invalid(format!(
            "{n} highlight scores for a mask of {} frames",
            mask.mask.len()
        )));
    }
    Ok(tape.bce(scores, &mask.targets::<T>(), T::lit(BCE_EPS))?)
}

/// `S′_h = S_hᵀ·W + b`, a `1 × d_model` token.
pub fn project_prompt_token<T: Real>(tape: &mut Tape<T>, p: &ParamVars, scores: Var) -> Result<Var> {
    let w = p.get("prompt.proj.weight")?;
    let (n, _) = tape.shape(scores);
    if tape.shape(w).0 != n {
        return Err(CoreError::Invalid(format!(
            "{n} highlight scores for a projection expecting {}",
            tape.shape(w).0
        )));
    }
    let st = tape.transpose(scores)?;
    Ok(linear(tape, st, w, p.get("prompt.proj.bias")?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(a: f64, b: f64) -> TimeSpan {
        TimeSpan::new(a, b).unwrap()
    }

    #[test]
    fn running_example_mask() {
        let m = build_extended_mask(&span(15.0, 19.0), 20.0, 10, 0.25).unwrap();
        let bits: Vec<u8> = m.mask.iter().map(|&b| b as u8).collect();
        assert_eq!(bits, [0, 0, 0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(m.t_highlight, 4.0);
        assert_eq!(m.t_extend, 5.0);
    }

    #[test]
    fn zero_alpha_is_answer_window() {
        let m = build_extended_mask(&span(4.0, 8.0), 20.0, 10, 0.0).unwrap();
        // centres 1,3,5,...: inside [4,8] are 5 and 7
        let on: Vec<usize> = (0..10).filter(|&i| m.mask[i]).collect();
        assert_eq!(on, [2, 3]);
    }

    #[test]
    fn alpha_minus_one_collapses() {
        let m = build_extended_mask(&span(4.0, 8.0), 20.0, 10, -1.0).unwrap();
        assert_eq!(m.t_extend, 0.0);
        assert!(m.mask.iter().all(|&b| !b));
        // Centre 7 coincides with frame 3's centre.
        let m = build_extended_mask(&span(6.0, 8.0), 20.0, 10, -1.0).unwrap();
        let on: Vec<usize> = (0..10).filter(|&i| m.mask[i]).collect();
        assert_eq!(on, [3]);
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(build_extended_mask(&span(0.0, 1.0), 2.0, 0, 0.0).is_err());
    }
}
