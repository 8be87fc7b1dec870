use crate::error::{Result, TensorError};
use crate::tensor::{Real, Tensor};

/// Handle to a matrix recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis of a 2-D matrix. `Cols` normalizes along each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, T),
    Concat(Vec<Var>, Axis),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Softmax(Var, Axis),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    Bce {
        p: Var,
        y: Vec<T>,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode recording of one forward pass.
///
/// Nodes are append-only; a tape is built per sample and discarded after
/// `backward`. Every op checks its output for NaN/Inf.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        rows: usize,
        cols: usize,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(rows * cols, value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, rows: usize, cols: usize, value: Vec<T>, needs_grad: bool) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(shape_err("leaf", (rows, cols), (value.len(), 1)));
        }
        self.push("leaf", rows, cols, value, Op::Leaf, needs_grad)
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, t: &Tensor<T>) -> Result<Var> {
        let (r, c) = t.matrix_shape();
        self.leaf(r, c, t.data().to_vec(), true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var> {
        self.leaf(rows, cols, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (r, k), (k2, c)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), r, k, c);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", r, c, out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = kernels::transpose(self.value(a), r, c);
        let ng = self.needs(a);
        self.push("transpose", c, r, out, Op::Transpose(a), ng)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb == (1, 1) {
            Ok(Bcast::Scalar)
        } else if sb.0 == 1 && sb.1 == sa.1 {
            Ok(Bcast::Row)
        } else if sb.1 == 1 && sb.0 == sa.0 {
            Ok(Bcast::Col)
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    /// `a + b`, where `b` may be a matrix of the same shape, a `1 × c` row,
    /// an `r × 1` column or a `1 × 1` scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast("add", a, b)?;
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let bv = self.value(b);
        let out = (0..r * c)
            .map(|i| av[i] + bv[bidx(bc, i, c)])
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", r, c, out, Op::Add(a, b, bc), ng)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast("mul", a, b)?;
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let bv = self.value(b);
        let out = (0..r * c)
            .map(|i| av[i] * bv[bidx(bc, i, c)])
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", r, c, out, Op::Mul(a, b, bc), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.needs(a);
        self.push("scale", r, c, out, Op::Scale(a, s), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Config("concat of zero parts".into()))?;
        let (r0, c0) = self.shape(first);
        let ng = parts.iter().any(|&p| self.needs(p));
        match axis {
            Axis::Rows => {
                let mut rows = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if c != c0 {
                        return Err(shape_err("concat", (r0, c0), (r, c)));
                    }
                    rows += r;
                    out.extend_from_slice(self.value(p));
                }
                self.push("concat", rows, c0, out, Op::Concat(parts.to_vec(), axis), ng)
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if r != r0 {
                        return Err(shape_err("concat", (r0, c0), (r, c)));
                    }
                    cols += c;
                }
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        let c = self.shape(p).1;
                        out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                self.push("concat", r0, cols, out, Op::Concat(parts.to_vec(), axis), ng)
            }
        }
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r || len == 0 {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(a);
        self.push("slice_rows", len, c, out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c || len == 0 {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(a);
        self.push("slice_cols", r, len, out, Op::SliceCols(a, start), ng)
    }

    /// Max-stabilized softmax. `Axis::Cols` normalizes each row,
    /// `Axis::Rows` each column. Masked positions (`false`) receive zero
    /// probability; the mask runs along the normalized axis.
    pub fn softmax(&mut self, a: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        let line_len = match axis {
            Axis::Cols => c,
            Axis::Rows => r,
        };
        if let Some(m) = mask {
            if m.len() != line_len {
                return Err(shape_err("softmax", (r, c), (m.len(), 1)));
            }
            if !m.iter().any(|&x| x) {
                return Err(TensorError::Config("softmax with every position masked".into()));
            }
        }
        let mut out = self.value(a).to_vec();
        for_each_line(r, c, axis, |idx| kernels::softmax_line(&mut out, idx, mask));
        let ng = self.needs(a);
        self.push(
            "softmax",
            r,
            c,
            out,
            Op::Softmax(a, axis),
            ng,
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.needs(a);
        self.push("sigmoid", r, c, out, Op::Sigmoid(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let ng = self.needs(a);
        self.push("gelu", r, c, out, Op::Gelu(a), ng)
    }

    /// Per-row normalization followed by `gamma ⊙ x̂ + beta`
    /// (`gamma`, `beta` are `1 × c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(shape_err("layer_norm", (r, c), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let n = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Zero-padded, length-preserving 1-D convolution along rows (time).
    ///
    /// `x` is `n × c_in`, `w` is the flattened `k × c_in × c_out` kernel
    /// (`(k·c_in) × c_out`), `b` is `1 × c_out`. `k` must be odd.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var, k: usize) -> Result<Var> {
        if k.is_multiple_of(2) {
            return Err(TensorError::Config(format!("conv kernel size must be odd, got {k}")));
        }
        let (n, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        if wr != k * cin {
            return Err(shape_err("conv1d_same", (n, cin), (wr, cout)));
        }
        if self.shape(b) != (1, cout) {
            return Err(shape_err("conv1d_same", (1, cout), self.shape(b)));
        }
        let out = kernels::conv1d(self.value(x), self.value(w), self.value(b), n, cin, cout, k);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("conv1d_same", n, cout, out, Op::Conv1d { x, w, b, k }, ng)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if ids.is_empty() {
            return Err(TensorError::Config("gather of zero rows".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    len: r,
                });
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let ng = self.needs(table);
        self.push("gather_rows", ids.len(), c, out, Op::Gather(table, ids.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.needs(a);
        self.push("sum", 1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let ng = self.needs(a);
        self.push("mean", 1, 1, vec![s], Op::Mean(a), ng)
    }

    /// `−log softmax(logits)[target]` over the unmasked entries of a
    /// flattened logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, mask: Option<&[bool]>) -> Result<Var> {
        let lv = self.value(logits);
        let len = lv.len();
        if target >= len {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: target,
                len,
            });
        }
        if let Some(m) = mask {
            if m.len() != len {
                return Err(shape_err("cross_entropy", self.shape(logits), (m.len(), 1)));
            }
            if !m[target] {
                return Err(TensorError::Config(format!(
                    "cross_entropy target {target} is masked"
                )));
            }
        }
        let mut probs = lv.to_vec();
        kernels::softmax_line(&mut probs, (0..len).map(|i| (i, i)), mask);
        let valid = |i: usize| mask.is_none_or(|m| m[i]);
        let max = (0..len)
            .filter(|&i| valid(i))
            .map(|i| lv[i])
            .fold(T::neg_infinity(), T::max);
        let lse = (0..len)
            .filter(|&i| valid(i))
            .map(|i| (lv[i] - max).exp())
            .sum::<T>()
            .ln()
            + max;
        let loss = lse - lv[target];
        let ng = self.needs(logits);
        self.push(
            "cross_entropy",
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets,
    /// with `p` clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, p: Var, targets: &[T], eps: T) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(shape_err("bce", self.shape(p), (targets.len(), 1)));
        }
        let n = T::from_usize(pv.len()).unwrap();
        let one = T::one();
        let loss = pv
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| {
                let pc = pi.max(eps).min(one - eps);
                -(y * pc.ln() + (one - y) * (one - pc).ln())
            })
            .sum::<T>()
            / n;
        let ng = self.needs(p);
        self.push(
            "bce",
            1,
            1,
            vec![loss],
            Op::Bce {
                p,
                y: targets.to_vec(),
                eps,
            },
            ng,
        )
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        // Only leaves keep gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Grads { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::acc_a_bt(g, bv, ga, r, k, c);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::acc_at_b(av, g, gb, r, k, c);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    // node is c_a × r_a where a is r × c; here r = cols of a.
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b, bc) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[bidx(*bc, i, c)] += y;
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] += y * bv[bidx(*bc, i, c)];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[bidx(*bc, i, c)] += y * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * *s;
                    }
                }
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        if let Some(gp) = self.acc(grads, p) {
                            for (x, &y) in gp.iter_mut().zip(&g[off..off + len]) {
                                *x += y;
                            }
                        }
                        off += len;
                    }
                }
                Axis::Cols => {
                    let mut col_off = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        if let Some(gp) = self.acc(grads, p) {
                            for i in 0..r {
                                for j in 0..pc {
                                    gp[i * pc + j] += g[i * c + col_off + j];
                                }
                            }
                        }
                        col_off += pc;
                    }
                }
            },
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &y) in ga[start * c..].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.shape(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * ac + start + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for_each_line(r, c, *axis, |idx| {
                        let idx: Vec<(usize, usize)> = idx.collect();
                        let dot: T = idx.iter().map(|&(_, f)| y[f] * g[f]).sum();
                        for &(_, f) in &idx {
                            ga[f] += y[f] * (g[f] - dot);
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..y.len() {
                        ga[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..av.len() {
                        ga[i] += g[i] * gelu(av[i]).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let n = T::from_usize(c).unwrap();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let gh: Vec<T> = (0..c).map(|j| g[row.start + j] * gam[j]).collect();
                        let mean_gh = gh.iter().copied().sum::<T>() / n;
                        let mean_ghx = (0..c).map(|j| gh[j] * xhat[row.start + j]).sum::<T>() / n;
                        for j in 0..c {
                            gx[row.start + j] +=
                                inv_std[i] * (gh[j] - mean_gh - xhat[row.start + j] * mean_ghx);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, k } => {
                let (n, cin) = self.shape(*x);
                let cout = c;
                let xv = self.value(*x);
                let wv = self.value(*w);
                let pad = k / 2;
                if let Some(gx) = self.acc(grads, *x) {
                    for t in 0..n {
                        for j in 0..*k {
                            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < n) else {
                                continue;
                            };
                            for ci in 0..cin {
                                let wrow = &wv[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                                let grow = &g[t * cout..(t + 1) * cout];
                                let s: T = wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                                gx[src * cin + ci] += s;
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for t in 0..n {
                        for j in 0..*k {
                            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < n) else {
                                continue;
                            };
                            for ci in 0..cin {
                                let xval = xv[src * cin + ci];
                                let base = (j * cin + ci) * cout;
                                for o in 0..cout {
                                    gw[base + o] += xval * g[t * cout + o];
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for t in 0..n {
                        for o in 0..cout {
                            gb[o] += g[t * cout + o];
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = T::from_usize(ga.len()).unwrap();
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &p) in probs.iter().enumerate() {
                        let y = if i == *target { T::one() } else { T::zero() };
                        gl[i] += g[0] * (p - y);
                    }
                }
            }
            Op::Bce { p, y, eps } => {
                let pv = self.value(*p);
                let n = T::from_usize(pv.len()).unwrap();
                let one = T::one();
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..pv.len() {
                        let pi = pv[i];
                        if pi <= *eps || pi >= one - *eps {
                            continue;
                        }
                        gp[i] += g[0] * (-y[i] / pi + (one - y[i]) / (one - pi)) / n;
                    }
                }
            }
        }
    }
}

#[inline]
fn bidx(bc: Bcast, i: usize, cols: usize) -> usize {
    match bc {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

/// Calls `f` once per normalization line with `(position, flat index)` pairs.
fn for_each_line<F>(r: usize, c: usize, axis: Axis, mut f: F)
where
    F: FnMut(Box<dyn Iterator<Item = (usize, usize)>>),
{
    match axis {
        Axis::Cols => {
            for i in 0..r {
                f(Box::new((0..c).map(move |j| (j, i * c + j))));
            }
        }
        Axis::Rows => {
            for j in 0..c {
                f(Box::new((0..r).map(move |i| (i, i * c + j))));
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Returns `(gelu(x), gelu'(x))`.
fn gelu<T: Real>(x: T) -> (T, T) {
    let half = T::lit(0.5);
    let one = T::one();
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let u = k * (x + a * x * x * x);
    let th = u.tanh();
    let du = k * (one + T::lit(3.0) * a * x * x);
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * du;
    (y, dy)
}

mod kernels {
    use crate::tensor::Real;

    pub fn matmul<T: Real>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[kk * c..(kk + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// `ga += g · bᵀ` with `g: r × c`, `b: k × c`.
    pub fn acc_a_bt<T: Real>(g: &[T], b: &[T], ga: &mut [T], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let grow = &g[i * c..(i + 1) * c];
            for kk in 0..k {
                let brow = &b[kk * c..(kk + 1) * c];
                let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                ga[i * k + kk] += s;
            }
        }
    }

    /// `gb += aᵀ · g` with `a: r × k`, `g: r × c`.
    pub fn acc_at_b<T: Real>(a: &[T], g: &[T], gb: &mut [T], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let grow = &g[i * c..(i + 1) * c];
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let brow = &mut gb[kk * c..(kk + 1) * c];
                for (o, &gv) in brow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }

    pub fn transpose<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }

    pub fn softmax_line<T: Real>(
        buf: &mut [T],
        idx: impl Iterator<Item = (usize, usize)>,
        mask: Option<&[bool]>,
    ) {
        let idx: Vec<(usize, usize)> = idx.collect();
        let valid = |pos: usize| mask.is_none_or(|m| m[pos]);
        let max = idx
            .iter()
            .filter(|&&(p, _)| valid(p))
            .map(|&(_, f)| buf[f])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for &(p, f) in &idx {
            if valid(p) {
                let e = (buf[f] - max).exp();
                buf[f] = e;
                total += e;
            } else {
                buf[f] = T::zero();
            }
        }
        for &(p, f) in &idx {
            if valid(p) {
                buf[f] /= total;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d<T: Real>(
        x: &[T],
        w: &[T],
        b: &[T],
        n: usize,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Vec<T> {
        let pad = k / 2;
        let mut out = vec![T::zero(); n * cout];
        for t in 0..n {
            let orow = &mut out[t * cout..(t + 1) * cout];
            orow.copy_from_slice(b);
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < n) else {
                    continue;
                };
                for ci in 0..cin {
                    let xv = x[src * cin + ci];
                    let wrow = &w[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        out
    }
}
