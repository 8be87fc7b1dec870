use tagv_tensor::nn::{dropout, linear, multi_head_attention, AttentionWeights};
use tagv_tensor::{Axis, Real, RngState, Tape, Var};

use crate::config::TrainConfig;
use crate::error::{CoreError, Result};
use crate::model::ParamVars;

/// Row-major `len × d` table with `sin(p/10000^(2i/d))` in even columns and
/// the matching `cos` in odd ones.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let rate = 10000f64.powf((j - j % 2) as f64 / d as f64);
            let a = p as f64 / rate;
            out.push(if j % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `|x| × d_model`.
    pub hidden: Var,
    /// Attention probabilities per layer, per head.
    pub attn: Vec<Vec<Var>>,
}

/// Token embeddings plus positions, with the `[VIS]` row replaced by
/// `prompt`, run through post-norm transformer blocks. `key_mask[j] ==
/// false` hides position `j` from attention. Dropout is active when `rng`
/// is given.
#[allow(clippy::too_many_arguments)]
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &TrainConfig,
    ids: &[usize],
    vis_pos: usize,
    prompt: Var,
    key_mask: &[bool],
    mut rng: Option<&mut RngState>,
) -> Result<EncoderOutput> {
    let d = cfg.d_model;
    if tape.shape(prompt) != (1, d) {
        let (r, c) = tape.shape(prompt);
        return Err(CoreError::Invalid(format!("prompt token is {r}x{c}, expected 1x{d}")));
    }
    if vis_pos >= ids.len() || key_mask.len() != ids.len() {
        return Err(CoreError::Invalid("token sequence, mask and prompt slot disagree".into()));
    }
    let emb = tape.gather_rows(p.get("encoder.tok_embed")?, ids)?;
    let mut rows = Vec::with_capacity(3);
    if vis_pos > 0 {
        rows.push(tape.slice_rows(emb, 0, vis_pos)?);
    }
    rows.push(prompt);
    if vis_pos + 1 < ids.len() {
        rows.push(tape.slice_rows(emb, vis_pos + 1, ids.len() - vis_pos - 1)?);
    }
    let x = tape.concat(&rows, Axis::Rows)?;
    let pos = sinusoidal_positions(ids.len(), d).into_iter().map(T::lit).collect();
    let pos = tape.constant(ids.len(), d, pos)?;
    let mut x = tape.add(x, pos)?;

    let train = rng.is_some();
    let eps = T::lit(1e-5);
    let mut attn = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("encoder.layer{l}.{s}");
        let w = AttentionWeights {
            wq: p.get(&name("attn.wq"))?,
            bq: p.get(&name("attn.bq"))?,
            wk: p.get(&name("attn.wk"))?,
            bk: p.get(&name("attn.bk"))?,
            wv: p.get(&name("attn.wv"))?,
            bv: p.get(&name("attn.bv"))?,
            wo: p.get(&name("attn.wo"))?,
            bo: p.get(&name("attn.bo"))?,
        };
        let a = multi_head_attention(tape, x, x, &w, cfg.n_heads, Some(key_mask))?;
        attn.push(a.probs);
        let a = match rng.as_deref_mut() {
            Some(r) => dropout(tape, a.out, cfg.dropout, r, train)?,
            None => a.out,
        };
        let res = tape.add(x, a)?;
        x = tape.layer_norm(res, p.get(&name("ln1.gamma"))?, p.get(&name("ln1.beta"))?, eps)?;

        let h = linear(tape, x, p.get(&name("ffn.w1"))?, p.get(&name("ffn.b1"))?)?;
        let h = tape.gelu(h)?;
        let h = linear(tape, h, p.get(&name("ffn.w2"))?, p.get(&name("ffn.b2"))?)?;
        let h = match rng.as_deref_mut() {
            Some(r) => dropout(tape, h, cfg.dropout, r, train)?,
            None => h,
        };
        let res = tape.add(x, h)?;
        x = tape.layer_norm(res, p.get(&name("ln2.gamma"))?, p.get(&name("ln2.beta"))?, eps)?;
    }
    Ok(EncoderOutput { hidden: x, attn })
}

/// Start/end logits (`1 × |x|`) and their masked softmaxes.
#[derive(Debug, Clone, Copy)]
pub struct SpanLogitVars {
    pub start: Var,
    pub end: Var,
    pub start_probs: Var,
    pub end_probs: Var,
}

/// Two dense heads over the hidden states; positions where `valid` is
/// false get zero probability.
pub fn span_logits<T: Real>(tape: &mut Tape<T>, p: &ParamVars, h: Var, valid: &[bool]) -> Result<SpanLogitVars> {
    if !valid.iter().any(|&v| v) {
        return Err(CoreError::NoCueTokens);
    }
    let mut head = |which: &str| -> Result<(Var, Var)> {
        let l = linear(
            tape,
            h,
            p.get(&format!("span.{which}.weight"))?,
            p.get(&format!("span.{which}.bias"))?,
        )?;
        let l = tape.transpose(l)?;
        let probs = tape.softmax(l, Axis::Cols, Some(valid))?;
        Ok((l, probs))
    };
    let (start, start_probs) = head("start")?;
    let (end, end_probs) = head("end")?;
    Ok(SpanLogitVars {
        start,
        end,
        start_probs,
        end_probs,
    })
}

/// Mean of the start and end cross-entropies over valid positions.
pub fn span_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &SpanLogitVars,
    target: (usize, usize),
    valid: &[bool],
) -> Result<Var> {
    for t in [target.0, target.1] {
        if !valid.get(t).copied().unwrap_or(false) {
            return Err(CoreError::Invalid(format!("span target {t} is not a subtitle token")));
        }
    }
    let ls = tape.cross_entropy(logits.start, target.0, Some(valid))?;
    let le = tape.cross_entropy(logits.end, target.1, Some(valid))?;
    let both = tape.add(ls, le)?;
    Ok(tape.scale(both, T::lit(0.5))?)
}
