//! Layers composed from tape primitives.

use crate::error::{Result, TensorError};
use crate::rng::RngState;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Real;

/// `x · W + b` with `W: d_in × d_out` and `b: 1 × d_out`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Inverted dropout. Identity when `train` is false or `p == 0`.
pub fn dropout<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    rng: &mut RngState,
    train: bool,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Config(format!("dropout p must be in [0, 1), got {p}")));
    }
    if !train || p == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.shape(x);
    let keep = T::lit(1.0 / (1.0 - p));
    let mask = (0..r * c)
        .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
        .collect();
    let m = tape.constant(r, c, mask)?;
    tape.mul(x, m)
}

/// Projection weights of one attention layer (all `d × d`, biases `1 × d`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Output of [`multi_head_attention`]: the projected result and the
/// per-head attention probability matrices (`|q| × |kv|`).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Vec<Var>,
}

/// Scaled dot-product attention over `n_heads` heads, concatenated and
/// output-projected. `key_mask[j] == false` hides key position `j`.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    w: &AttentionWeights,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let d = tape.shape(q_in).1;
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(TensorError::Config(format!(
            "model dim {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = linear(tape, q_in, w.wq, w.bq)?;
    let k = linear(tape, kv_in, w.wk, w.bk)?;
    let v = linear(tape, kv_in, w.wv, w.bv)?;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.softmax(scores, Axis::Cols, key_mask)?;
        heads.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, Axis::Cols)?
    };
    let out = linear(tape, cat, w.wo, w.bo)?;
    Ok(AttentionOutput { out, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn c(t: &mut Tape<f64>, r: usize, cc: usize, v: Vec<f64>) -> Var {
        t.constant(r, cc, v).unwrap()
    }

    #[test]
    fn dropout_identity_cases() {
        let mut t = Tape::<f64>::new();
        let x = c(&mut t, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = RngState::new(0);
        assert_eq!(dropout(&mut t, x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&mut t, x, 0.5, &mut rng, false).unwrap(), x);
        assert!(dropout(&mut t, x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_rescales_survivors() {
        let mut t = Tape::<f64>::new();
        let x = c(&mut t, 1, 1000, vec![1.0; 1000]);
        let mut rng = RngState::new(3);
        let y = dropout(&mut t, x, 0.25, &mut rng, true).unwrap();
        let v = t.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-12));
        let dropped = v.iter().filter(|&&e| e == 0.0).count();
        assert!((180..320).contains(&dropped), "dropped {dropped}");
    }

    fn weights(t: &mut Tape<f64>, d: usize, seed: u64) -> AttentionWeights {
        let mut rng = RngState::new(seed);
        let mut m = |r: usize, cc: usize| {
            let v = (0..r * cc).map(|_| rng.normal() * 0.5).collect();
            t.param(&Tensor::new(vec![r, cc], v).unwrap()).unwrap()
        };
        AttentionWeights {
            wq: m(d, d),
            bq: m(1, d),
            wk: m(d, d),
            bk: m(1, d),
            wv: m(d, d),
            bv: m(1, d),
            wo: m(d, d),
            bo: m(1, d),
        }
    }

    #[test]
    fn one_position_attention_is_projected_value() {
        let mut t = Tape::<f64>::new();
        let w = weights(&mut t, 4, 1);
        let x = c(&mut t, 1, 4, vec![0.3, -0.2, 0.9, 0.1]);
        let out = multi_head_attention(&mut t, x, x, &w, 1, None).unwrap();
        assert_eq!(t.value(out.probs[0]), &[1.0]);
        let v = linear(&mut t, x, w.wv, w.bv).unwrap();
        let expect = linear(&mut t, v, w.wo, w.bo).unwrap();
        for (a, b) in t.value(out.out).iter().zip(t.value(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_hides_keys() {
        let mut t = Tape::<f64>::new();
        let w = weights(&mut t, 4, 2);
        let x = c(&mut t, 3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let mask = [true, true, false];
        let out = multi_head_attention(&mut t, x, x, &w, 2, Some(&mask)).unwrap();
        assert_eq!(out.probs.len(), 2);
        for &p in &out.probs {
            let v = t.value(p);
            for i in 0..3 {
                let s: f64 = v[i * 3..i * 3 + 3].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert_eq!(v[i * 3 + 2], 0.0);
            }
        }
    }

    #[test]
    fn head_divisibility_is_checked() {
        let mut t = Tape::<f64>::new();
        let w = weights(&mut t, 4, 2);
        let x = c(&mut t, 2, 4, vec![0.0; 8]);
        assert!(matches!(
            multi_head_attention(&mut t, x, x, &w, 3, None),
            Err(TensorError::Config(_))
        ));
    }
}
