//! Visual and text projections and context-query attention.

use tagv_tensor::nn::{dropout, linear};
use tagv_tensor::{Axis, Real, RngState, Tape, Var};

use crate::config::TrainConfig;
use crate::error::{CoreError, Result};
use crate::model::ParamVars;

pub const VISUAL_KERNEL: usize = 7;

/// Similarity scores and their row (`s_r`) and column (`s_c`) softmaxes,
/// all `n × m`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub s: Var,
    pub s_r: Var,
    pub s_c: Var,
}

/// Conv1D (kernel 7) from `d_v` to `d_model` channels, then dropout when
/// `rng` is given.
pub fn visual_projection<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &TrainConfig,
    frames: Var,
    rng: Option<&mut RngState>,
) -> Result<Var> {
    let (n, d_v) = tape.shape(frames);
    if n != cfg.n || d_v != cfg.d_v {
        return Err(CoreError::Invalid(format!(
            "features are {n}x{d_v}, configuration expects {}x{}",
            cfg.n, cfg.d_v
        )));
    }
    let v = tape.conv1d_same(frames, p.get("visual.conv.weight")?, p.get("visual.conv.bias")?, VISUAL_KERNEL)?;
    Ok(match rng {
        Some(r) => dropout(tape, v, cfg.dropout, r, true)?,
        None => v,
    })
}

/// Single linear map of question token features to `d_model`.
pub fn text_projection<T: Real>(tape: &mut Tape<T>, p: &ParamVars, q: Var) -> Result<Var> {
    Ok(linear(tape, q, p.get("text.proj.weight")?, p.get("text.proj.bias")?)?)
}

/// `S_ij = w_s · [v_i ; q_j ; v_i ⊙ q_j]`, computed as
/// `V·w₁ + (Q·w₂)ᵀ + (V ⊙ w₃)·Qᵀ`.
pub fn trilinear_similarity<T: Real>(tape: &mut Tape<T>, p: &ParamVars, v: Var, q: Var) -> Result<Similarity> {
    let d = tape.shape(v).1;
    if tape.shape(q).1 != d {
        return Err(CoreError::Invalid("visual and text widths differ".into()));
    }
    let w = p.get("cqa.w_s")?;
    let w1 = tape.slice_cols(w, 0, d)?;
    let w2 = tape.slice_cols(w, d, d)?;
    let w3 = tape.slice_cols(w, 2 * d, d)?;
    let w1t = tape.transpose(w1)?;
    let w2t = tape.transpose(w2)?;
    let col = tape.matmul(v, w1t)?;
    let qw = tape.matmul(q, w2t)?;
    let row = tape.transpose(qw)?;
    let vw = tape.mul(v, w3)?;
    let qt = tape.transpose(q)?;
    let s = tape.matmul(vw, qt)?;
    let s = tape.add(s, col)?;
    let s = tape.add(s, row)?;
    let s_r = tape.softmax(s, Axis::Cols, None)?;
    let s_c = tape.softmax(s, Axis::Rows, None)?;
    Ok(Similarity { s, s_r, s_c })
}

/// `A = S_r·Q`, `B = S_r·S_cᵀ·V`, `Ṽ = [V; A; V⊙A; V⊙B]·W + b`.
pub fn context_query_attention<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    v: Var,
    q: Var,
    sim: &Similarity,
) -> Result<Var> {
    let a = tape.matmul(sim.s_r, q)?;
    let sct = tape.transpose(sim.s_c)?;
    let sctv = tape.matmul(sct, v)?;
    let b = tape.matmul(sim.s_r, sctv)?;
    let va = tape.mul(v, a)?;
    let vb = tape.mul(v, b)?;
    let cat = tape.concat(&[v, a, va, vb], Axis::Cols)?;
    Ok(linear(tape, cat, p.get("cqa.ffn.weight")?, p.get("cqa.ffn.bias")?)?)
}
