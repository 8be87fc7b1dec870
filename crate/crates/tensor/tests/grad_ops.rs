//! Finite-difference certification of every differentiable tape op.

use std::collections::BTreeMap;

use tagv_tensor::nn::{linear, multi_head_attention, AttentionWeights};
use tagv_tensor::{
    grad_check, Axis, GradCheckOptions, Objective, ParamStore, Real, Result, RngState, Tape,
    Tensor, Var,
};

fn store<T: Real>(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore<T> {
    let mut rng = RngState::new(seed);
    let mut s = ParamStore::new();
    for (name, dims) in shapes {
        s.insert(*name, Tensor::from_fn(dims.clone(), |_| T::lit(rng.normal() * 0.7)))
            .unwrap();
    }
    s
}

/// Contracts `y` with fixed pseudo-random weights into a scalar so every
/// output coordinate contributes a distinct sensitivity.
fn probe<T: Real>(t: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(y);
    let mut rng = RngState::new(seed);
    let w = t.constant(r, c, (0..r * c).map(|_| T::lit(rng.uniform_in(-1.0, 1.0))).collect())?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check<T: Real, O: Objective>(s: &ParamStore<T>, obj: &O) -> f64 {
    let rep = grad_check(s, obj, GradCheckOptions::for_precision::<T>()).unwrap();
    eprintln!("max rel err {:.3e} at {:?}", rep.max_rel_err, rep.worst);
    rep.max_rel_err
}

const F32_TOL: f64 = 1e-4;
const F64_TOL: f64 = 1e-6;

macro_rules! both_precisions {
    ($name:ident, $shapes:expr, |$t:ident, $v:ident| $body:block) => {
        mod $name {
            use super::*;

            struct Obj;

            impl Objective for Obj {
                fn loss<T: Real>(&self, $t: &mut Tape<T>, $v: &BTreeMap<String, Var>) -> Result<Var> {
                    $body
                }
            }

            #[test]
            fn f32() {
                let s = store::<f32>(&$shapes, 11);
                assert!(check(&s, &Obj) < F32_TOL);
            }

            #[test]
            fn f64() {
                let s = store::<f64>(&$shapes, 11);
                assert!(check(&s, &Obj) < F64_TOL);
            }
        }
    };
}

both_precisions!(softmax_rows, [("x", vec![3, 4])], |t, v| {
    let y = t.softmax(v["x"], Axis::Cols, None)?;
    probe(t, y, 1)
});

both_precisions!(softmax_cols_masked, [("x", vec![4, 3])], |t, v| {
    let y = t.softmax(v["x"], Axis::Rows, Some(&[true, false, true, true]))?;
    probe(t, y, 2)
});

both_precisions!(sigmoid, [("x", vec![2, 5])], |t, v| {
    let y = t.sigmoid(v["x"])?;
    probe(t, y, 3)
});

both_precisions!(gelu, [("x", vec![2, 5])], |t, v| {
    let y = t.gelu(v["x"])?;
    probe(t, y, 4)
});

both_precisions!(
    conv1d_same,
    [("x", vec![6, 3]), ("w", vec![7, 3, 2]), ("b", vec![2])],
    |t, v| {
        let y = t.conv1d_same(v["x"], v["w"], v["b"], 7)?;
        probe(t, y, 5)
    }
);

both_precisions!(
    linear_layer,
    [("x", vec![3, 4]), ("w", vec![4, 2]), ("b", vec![2])],
    |t, v| {
        let y = linear(t, v["x"], v["w"], v["b"])?;
        probe(t, y, 6)
    }
);

both_precisions!(
    layer_norm,
    [("x", vec![3, 5]), ("g", vec![5]), ("b", vec![5])],
    |t, v| {
        let y = t.layer_norm(v["x"], v["g"], v["b"], T::lit(1e-5))?;
        probe(t, y, 7)
    }
);

both_precisions!(
    broadcast_add_mul_concat_slices,
    [("a", vec![3, 4]), ("row", vec![4]), ("col", vec![3, 1])],
    |t, v| {
        let x = t.add(v["a"], v["row"])?;
        let x = t.mul(x, v["col"])?;
        let tr = t.transpose(x)?;
        let left = t.slice_cols(x, 1, 2)?;
        let top = t.slice_rows(tr, 0, 3)?;
        let cat = t.concat(&[left, top], Axis::Cols)?;
        let sc = t.scale(cat, T::lit(0.5))?;
        probe(t, sc, 8)
    }
);

both_precisions!(gather_and_mean, [("table", vec![5, 3])], |t, v| {
    let g = t.gather_rows(v["table"], &[4, 1, 4, 0])?;
    let sq = t.mul(g, g)?;
    t.mean(sq)
});

both_precisions!(cross_entropy_masked, [("l", vec![1, 6])], |t, v| {
    t.cross_entropy(v["l"], 3, Some(&[false, true, true, true, false, true]))
});

both_precisions!(bce, [("x", vec![1, 6])], |t, v| {
    let p = t.sigmoid(v["x"])?;
    t.bce(p, &[T::lit(1.0), T::lit(0.0), T::lit(1.0), T::lit(1.0), T::lit(0.0), T::lit(0.0)], T::lit(1e-7))
});

both_precisions!(
    attention_two_heads,
    [
        ("x", vec![3, 4]),
        ("wq", vec![4, 4]),
        ("bq", vec![4]),
        ("wk", vec![4, 4]),
        ("bk", vec![4]),
        ("wv", vec![4, 4]),
        ("bv", vec![4]),
        ("wo", vec![4, 4]),
        ("bo", vec![4])
    ],
    |t, v| {
        let w = AttentionWeights {
            wq: v["wq"],
            bq: v["bq"],
            wk: v["wk"],
            bk: v["bk"],
            wv: v["wv"],
            bv: v["bv"],
            wo: v["wo"],
            bo: v["bo"],
        };
        let out = multi_head_attention(t, v["x"], v["x"], &w, 2, Some(&[true, true, false]))?;
        probe(t, out.out, 9)
    }
);
