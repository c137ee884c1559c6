//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a dynamic tape rebuilt every step: ops append nodes in
//! topological order (inputs always precede consumers) and [`Graph::backward`]
//! walks the tape once in reverse. One graph per thread; nothing is shared.
//!
//! Every forward op validates shapes, checks the output for NaN/Inf and
//! reports both as errors instead of letting them propagate silently.

use super::counters;
use super::{Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    HardTanh,
    Sigmoid,
    Gelu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Var,
    SumSq,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Unary { kind: UnaryKind, a: Var },
    MatMul { a: Var, b: Var },
    TransposeLast { a: Var },
    Reshape { a: Var },
    SliceC { a: Var, from: usize, to: usize },
    ConcatC { parts: Vec<Var> },
    TakeToken { a: Var, t: usize },
    PrependToken { x: Var, tok: Var },
    Embed { table: Var, ids: Vec<usize> },
    Reduce { kind: ReduceKind, a: Var, axis: usize },
    SumAll { a: Var },
    Softmax { a: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved },
    RmsNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, saved: NormSaved },
    BatchNormEval { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64>, mean: Vec<f64> },
    Dyt { x: Var, alpha: Var, gamma: Var, beta: Var, squasher: UnaryKind, pre: Vec<f64> },
}

/// Values saved by a normalization forward for its analytic backward:
/// the pre-affine output and the per-row (or per-channel for BN) 1/std.
struct NormSaved {
    pre_affine: Vec<f64>,
    inv_std: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient map produced by [`Graph::backward`]. Nodes the loss never
/// reached read back as zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of the loss w.r.t. `v`, zeros if the node was unreached.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Suffix broadcast: `b` must be a scalar or match the trailing dims of `a`.
/// Row-major layout makes the broadcast index simply `i % b.numel()`.
fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Ok(());
    }
    if b.len() <= a.len() && &a[a.len() - b.len()..] == b {
        return Ok(());
    }
    Err(TensorError::ShapeMismatch {
        op,
        detail: format!("{a:?} vs {b:?} (suffix broadcast)"),
    })
}

// Accumulating matmul kernels, row-major. `c` is (m, n) and is added into.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c (m, k) += a (m, n) * b^T where b is (k, n)
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

// c (k, n) += a^T * b where a is (m, k), b is (m, n)
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (j, &av) in arow.iter().enumerate() {
            let crow = &mut c[j * n..(j + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn unary_apply(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::HardTanh => x.clamp(-1.0, 1.0),
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryKind::Gelu => {
            let inner = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + inner.tanh())
        }
        UnaryKind::Identity => x,
    }
}

/// d out / d x given the input `x` and the already-computed output `y`.
fn unary_grad(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::HardTanh => {
            if x.abs() < 1.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Gelu => {
            let inner = GELU_C * (x + 0.044715 * x * x * x);
            let t = inner.tanh();
            let sech2 = 1.0 - t * t;
            let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
        }
        UnaryKind::Identity => 1.0,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input value as a leaf node.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    // ---- elementwise --------------------------------------------------

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_broadcast(op_name, av.shape(), bv.shape())?;
        let bn = bv.numel();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bn]))
            .collect();
        counters::count_elementwise(data.len());
        ensure_finite(op_name, &data)?;
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape as input");
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let data: Vec<f64> = av.data().iter().map(|&x| x * c).collect();
        counters::count_elementwise(data.len());
        ensure_finite("scale", &data)?;
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        Ok(self.push(out, Op::Scale { a, c }))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let data: Vec<f64> = av.data().iter().map(|&x| unary_apply(kind, x)).collect();
        counters::count_elementwise(data.len());
        ensure_finite("unary", &data)?;
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        Ok(self.push(out, Op::Unary { kind, a }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn hardtanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::HardTanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn identity(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Identity, a)
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product with optional shared leading batch dim:
    /// `(M,K)x(K,N)`, `(B,M,K)x(K,N)` or `(B,M,K)x(B,K,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ad, bd) = (
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
        );
        let mismatch = |d: String| TensorError::ShapeMismatch { op: "matmul", detail: d };
        let (out_shape, data) = match (ash.as_slice(), bsh.as_slice()) {
            ([m, k], [k2, n]) => {
                if k != k2 {
                    return Err(mismatch(format!("{ash:?} x {bsh:?}")));
                }
                let mut c = vec![0.0; m * n];
                mm_nn(ad, bd, *m, *k, *n, &mut c);
                (vec![*m, *n], c)
            }
            ([bb, m, k], [k2, n]) => {
                if k != k2 {
                    return Err(mismatch(format!("{ash:?} x {bsh:?}")));
                }
                let mut c = vec![0.0; bb * m * n];
                mm_nn(ad, bd, bb * m, *k, *n, &mut c);
                (vec![*bb, *m, *n], c)
            }
            ([bb, m, k], [bb2, k2, n]) => {
                if k != k2 || bb != bb2 {
                    return Err(mismatch(format!("{ash:?} x {bsh:?}")));
                }
                let mut c = vec![0.0; bb * m * n];
                for i in 0..*bb {
                    mm_nn(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        *m,
                        *k,
                        *n,
                        &mut c[i * m * n..(i + 1) * m * n],
                    );
                }
                (vec![*bb, *m, *n], c)
            }
            _ => return Err(mismatch(format!("{ash:?} x {bsh:?}"))),
        };
        ensure_finite("matmul", &data)?;
        let out = Tensor::new(out_shape, data).expect("matmul shape");
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    /// Swap the last two axes: `(M,N)` -> `(N,M)` or `(B,M,N)` -> `(B,N,M)`.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose_last",
                detail: format!("need rank >= 2, got {sh:?}"),
            });
        }
        let (lead, m, n) = match sh.as_slice() {
            [m, n] => (1, *m, *n),
            [b, m, n] => (*b, *m, *n),
            _ => unreachable!(),
        };
        let ad = self.nodes[a.0].value.data();
        let mut data = vec![0.0; ad.len()];
        for l in 0..lead {
            let src = &ad[l * m * n..(l + 1) * m * n];
            let dst = &mut data[l * m * n..(l + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut out_shape = sh;
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        let out = Tensor::new(out_shape, data).expect("transpose shape");
        Ok(self.push(out, Op::TransposeLast { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != av.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", av.shape()),
            });
        }
        let out = Tensor::new(shape, av.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Slice of the channel (last) axis, `from..to`.
    pub fn slice_c(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let sh = av.shape().to_vec();
        let c = *sh.last().expect("rank >= 1");
        if from >= to || to > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_c",
                detail: format!("range {from}..{to} of C={c}"),
            });
        }
        let width = to - from;
        let rows = av.numel() / c;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * c + from..r * c + to]);
        }
        let mut out_shape = sh;
        *out_shape.last_mut().unwrap() = width;
        let out = Tensor::new(out_shape, data).expect("slice shape");
        Ok(self.push(out, Op::SliceC { a, from, to }))
    }

    /// Concatenate along the channel (last) axis.
    pub fn concat_c(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_c of no parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.shape(p);
            if &sh[..sh.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_c",
                    detail: format!("{first:?} vs {sh:?}"),
                });
            }
            widths.push(*sh.last().unwrap());
        }
        let total_c: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total_c);
        for r in 0..rows {
            for (i, &p) in parts.iter().enumerate() {
                let w = widths[i];
                let pd = self.nodes[p.0].value.data();
                data.extend_from_slice(&pd[r * w..(r + 1) * w]);
            }
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(total_c);
        let out = Tensor::new(out_shape, data).expect("concat shape");
        Ok(self.push(out, Op::ConcatC { parts: parts.to_vec() }))
    }

    /// Select one token position: `(B,T,C)` -> `(B,C)`.
    pub fn take_token(&mut self, a: Var, t: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        let [b, tt, c] = sh.as_slice() else {
            return Err(TensorError::ShapeMismatch {
                op: "take_token",
                detail: format!("need (B,T,C), got {sh:?}"),
            });
        };
        if t >= *tt {
            return Err(TensorError::Invalid(format!("token {t} out of {tt}")));
        }
        let ad = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(b * c);
        for bi in 0..*b {
            let base = (bi * tt + t) * c;
            data.extend_from_slice(&ad[base..base + c]);
        }
        let out = Tensor::new(vec![*b, *c], data).expect("take_token shape");
        Ok(self.push(out, Op::TakeToken { a, t }))
    }

    /// Prepend a shared token vector: `(B,T,C)` + `(C,)` -> `(B,T+1,C)`.
    pub fn prepend_token(&mut self, x: Var, tok: Var) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        let tsh = self.shape(tok).to_vec();
        let [b, t, c] = xsh.as_slice() else {
            return Err(TensorError::ShapeMismatch {
                op: "prepend_token",
                detail: format!("need (B,T,C), got {xsh:?}"),
            });
        };
        if tsh != vec![*c] {
            return Err(TensorError::ShapeMismatch {
                op: "prepend_token",
                detail: format!("token {tsh:?} vs C={c}"),
            });
        }
        let xd = self.nodes[x.0].value.data();
        let td = self.nodes[tok.0].value.data();
        let mut data = Vec::with_capacity(b * (t + 1) * c);
        for bi in 0..*b {
            data.extend_from_slice(td);
            data.extend_from_slice(&xd[bi * t * c..(bi + 1) * t * c]);
        }
        let out = Tensor::new(vec![*b, t + 1, *c], data).expect("prepend shape");
        Ok(self.push(out, Op::PrependToken { x, tok }))
    }

    /// Row lookup into an embedding table: ids `(B*T)` -> `(B,T,C)`.
    pub fn embed(&mut self, table: Var, ids: &[usize], b: usize, t: usize) -> Result<Var> {
        let tsh = self.shape(table).to_vec();
        let [vocab, c] = tsh.as_slice() else {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                detail: format!("table must be (V,C), got {tsh:?}"),
            });
        };
        if ids.len() != b * t {
            return Err(TensorError::Invalid(format!(
                "embed: {} ids for B*T={}",
                ids.len(),
                b * t
            )));
        }
        let td = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(b * t * c);
        for &id in ids {
            if id >= *vocab {
                return Err(TensorError::Invalid(format!("token id {id} >= vocab {vocab}")));
            }
            data.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let out = Tensor::new(vec![b, t, *c], data).expect("embed shape");
        Ok(self.push(out, Op::Embed { table, ids: ids.to_vec() }))
    }

    // ---- reductions ----------------------------------------------------

    /// Reduce one axis with mean, population variance, or sum of squares.
    /// The axis is removed from the shape (a full reduce yields `[1]`).
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let sh = av.shape().to_vec();
        if axis >= sh.len() {
            return Err(TensorError::BadAxis { axis, rank: sh.len() });
        }
        let len = sh[axis];
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "reduce" });
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let ad = av.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| ad[(o * len + j) * inner + i];
                let out = &mut data[o * inner + i];
                match kind {
                    ReduceKind::Mean => {
                        let mut s = 0.0;
                        for j in 0..len {
                            s += idx(j);
                        }
                        *out = s / len as f64;
                    }
                    ReduceKind::Var => {
                        let mut s = 0.0;
                        for j in 0..len {
                            s += idx(j);
                        }
                        let mu = s / len as f64;
                        let mut v = 0.0;
                        for j in 0..len {
                            let d = idx(j) - mu;
                            v += d * d;
                        }
                        *out = v / len as f64;
                    }
                    ReduceKind::SumSq => {
                        let mut s = 0.0;
                        for j in 0..len {
                            let x = idx(j);
                            s += x * x;
                        }
                        *out = s;
                    }
                }
            }
        }
        counters::count_reductions(outer * inner);
        ensure_finite("reduce", &data)?;
        let mut out_shape: Vec<usize> = sh.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, data).expect("reduce shape");
        Ok(self.push(out, Op::Reduce { kind, a, axis }))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        counters::count_reductions(1);
        ensure_finite("sum_all", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }))
    }

    /// Numerically stable softmax along `axis` (max subtraction applied).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let sh = av.shape().to_vec();
        if axis >= sh.len() {
            return Err(TensorError::BadAxis { axis, rank: sh.len() });
        }
        let len = sh[axis];
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let ad = av.data();
        let mut data = vec![0.0; ad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(ad[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (ad[at(j)] - mx).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] /= sum;
                }
            }
        }
        counters::count_reductions(2 * outer * inner); // max + sum per lane
        ensure_finite("softmax", &data)?;
        let out = Tensor::new(sh, data).expect("softmax shape");
        Ok(self.push(out, Op::Softmax { a, axis }))
    }

    /// Mean negative log-likelihood of `targets` under `logits (N, V)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let sh = lv.shape().to_vec();
        let [n, v] = sh.as_slice() else {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits must be (N,V), got {sh:?}"),
            });
        };
        if targets.len() != *n {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} targets for N={n}",
                targets.len()
            )));
        }
        let ld = lv.data();
        let mut total = 0.0;
        for (row, &tgt) in targets.iter().enumerate() {
            if tgt >= *v {
                return Err(TensorError::Invalid(format!("target {tgt} >= classes {v}")));
            }
            let r = &ld[row * v..(row + 1) * v];
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = r.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
            total -= r[tgt] - lse;
        }
        counters::count_reductions(2 * n); // max + logsumexp per row
        let loss = total / *n as f64;
        ensure_finite("cross_entropy", &[loss])?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask already scaled by
    /// `1/(1-rate)`. Rate zero short-circuits to the input var.
    pub fn dropout<R: rand::Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!("dropout rate {rate}")));
        }
        let av = &self.nodes[a.0].value;
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..av.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        counters::count_elementwise(data.len());
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        Ok(self.push(out, Op::Dropout { a, mask }))
    }

    // ---- normalization layers -------------------------------------------
    //
    // These are fused primitives: forward runs the per-row statistics and
    // returns the pre-affine output alongside the node, and backward applies
    // the exact analytic gradients (including the mean/variance dependence
    // on x). Each returns `(y, pre_affine)`.

    fn norm_common(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xsh = self.shape(x);
        let c = *xsh.last().expect("rank >= 1");
        if xsh.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("need rank >= 2, got {xsh:?}"),
            });
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    detail: format!("affine params must be ({c},), got {:?}", self.shape(p)),
                });
            }
        }
        Ok((self.nodes[x.0].value.numel() / c, c))
    }

    /// Per-token standardization over the channel axis (Layer Norm).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Tensor)> {
        let (rows, c) = self.norm_common("layer_norm", x, gamma, beta)?;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let mut pre = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for k in 0..c {
                let p = (row[k] - mu) * inv;
                pre[r * c + k] = p;
                y[r * c + k] = gd[k] * p + bd[k];
            }
        }
        counters::count_reductions(2 * rows); // mean + variance per token
        counters::count_elementwise(rows * c);
        ensure_finite("layer_norm", &y)?;
        let shape = self.shape(x).to_vec();
        let pre_t = Tensor::new(shape.clone(), pre.clone()).expect("norm shape");
        let out = Tensor::new(shape, y).expect("norm shape");
        let v = self.push(
            out,
            Op::LayerNorm { x, gamma, beta, saved: NormSaved { pre_affine: pre, inv_std } },
        );
        Ok((v, pre_t))
    }

    /// Layer Norm without mean-centering: divide by the token RMS.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Tensor)> {
        let (rows, c) = self.norm_common("rms_norm", x, gamma, beta)?;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let mut pre = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let ms = row.iter().map(|&v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_std[r] = inv;
            for k in 0..c {
                let p = row[k] * inv;
                pre[r * c + k] = p;
                y[r * c + k] = gd[k] * p + bd[k];
            }
        }
        counters::count_reductions(rows); // sum of squares per token
        counters::count_elementwise(rows * c);
        ensure_finite("rms_norm", &y)?;
        let shape = self.shape(x).to_vec();
        let pre_t = Tensor::new(shape.clone(), pre.clone()).expect("norm shape");
        let out = Tensor::new(shape, y).expect("norm shape");
        let v = self.push(
            out,
            Op::RmsNorm { x, gamma, beta, saved: NormSaved { pre_affine: pre, inv_std } },
        );
        Ok((v, pre_t))
    }

    /// Batch Norm with statistics over all rows (batch x tokens) per channel.
    /// Returns `(y, pre_affine, batch_mean, batch_var)`; the caller owns the
    /// running-statistics update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor, Tensor)> {
        let (rows, c) = self.norm_common("batch_norm", x, gamma, beta)?;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let n = rows as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for k in 0..c {
                mean[k] += xd[r * c + k];
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for r in 0..rows {
            for k in 0..c {
                let d = xd[r * c + k] - mean[k];
                var[k] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= n;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut pre = vec![0.0; rows * c];
        let mut y = vec![0.0; rows * c];
        for r in 0..rows {
            for k in 0..c {
                let p = (xd[r * c + k] - mean[k]) * inv_std[k];
                pre[r * c + k] = p;
                y[r * c + k] = gd[k] * p + bd[k];
            }
        }
        counters::count_reductions(2 * c); // mean + variance per channel
        counters::count_elementwise(rows * c);
        ensure_finite("batch_norm", &y)?;
        let shape = self.shape(x).to_vec();
        let pre_t = Tensor::new(shape.clone(), pre.clone()).expect("norm shape");
        let out = Tensor::new(shape, y).expect("norm shape");
        let mean_t = Tensor::new(vec![c], mean).expect("stat shape");
        let var_t = Tensor::new(vec![c], var.clone()).expect("stat shape");
        let v = self.push(
            out,
            Op::BatchNormTrain { x, gamma, beta, saved: NormSaved { pre_affine: pre, inv_std } },
        );
        Ok((v, pre_t, mean_t, var_t))
    }

    /// Batch Norm using frozen running statistics (inference mode). No
    /// reduction is performed; the running stats enter as constants.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<(Var, Tensor)> {
        let (rows, c) = self.norm_common("batch_norm", x, gamma, beta)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: "running stats must be (C,)".into(),
            });
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let inv_std: Vec<f64> = running_var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.data().to_vec();
        let mut pre = vec![0.0; rows * c];
        let mut y = vec![0.0; rows * c];
        for r in 0..rows {
            for k in 0..c {
                let p = (xd[r * c + k] - mean[k]) * inv_std[k];
                pre[r * c + k] = p;
                y[r * c + k] = gd[k] * p + bd[k];
            }
        }
        counters::count_elementwise(rows * c);
        ensure_finite("batch_norm", &y)?;
        let shape = self.shape(x).to_vec();
        let pre_t = Tensor::new(shape.clone(), pre).expect("norm shape");
        let out = Tensor::new(shape, y).expect("norm shape");
        let v = self.push(out, Op::BatchNormEval { x, gamma, beta, inv_std, mean });
        Ok((v, pre_t))
    }

    /// Dynamic Tanh layer: `y = gamma * squash(alpha * x) + beta`, a purely
    /// elementwise op (no reductions, observable on the op counter). `alpha`
    /// is a scalar node; `squasher` is tanh, hardtanh, sigmoid or identity.
    pub fn dyt(
        &mut self,
        x: Var,
        alpha: Var,
        gamma: Var,
        beta: Var,
        squasher: UnaryKind,
    ) -> Result<(Var, Tensor)> {
        if squasher == UnaryKind::Gelu {
            return Err(TensorError::Invalid("gelu is not a DyT squasher".into()));
        }
        let (rows, c) = self.norm_common("dyt", x, gamma, beta)?;
        if self.nodes[alpha.0].value.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "dyt",
                detail: "alpha must be a scalar".into(),
            });
        }
        let al = self.nodes[alpha.0].value.item();
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let mut pre = vec![0.0; rows * c];
        let mut y = vec![0.0; rows * c];
        for r in 0..rows {
            for k in 0..c {
                let p = unary_apply(squasher, al * xd[r * c + k]);
                pre[r * c + k] = p;
                y[r * c + k] = gd[k] * p + bd[k];
            }
        }
        counters::count_elementwise(rows * c);
        ensure_finite("dyt", &y)?;
        let shape = self.shape(x).to_vec();
        let pre_t = Tensor::new(shape.clone(), pre.clone()).expect("dyt shape");
        let out = Tensor::new(shape, y).expect("dyt shape");
        let v = self.push(out, Op::Dyt { x, alpha, gamma, beta, squasher, pre });
        Ok((v, pre_t))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Every node reachable from the
    /// loss is visited exactly once, in reverse insertion order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward: loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], v: Var, upd: &dyn Fn(&mut [f64])| {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
            }
            upd(slot.as_mut().unwrap());
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                add_into(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                let bn = self.nodes[b.0].value.numel();
                add_into(grads, *b, &|gb| {
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % bn] += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                add_into(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                let bn = self.nodes[b.0].value.numel();
                add_into(grads, *b, &|gb| {
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % bn] -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let bn = bd.len();
                add_into(grads, *a, &|ga| {
                    for (idx, &gv) in g.iter().enumerate() {
                        ga[idx] += gv * bd[idx % bn];
                    }
                });
                add_into(grads, *b, &|gb| {
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % bn] += gv * ad[idx];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                add_into(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv * c;
                    }
                });
            }
            Op::Unary { kind, a } => {
                let xd = self.nodes[a.0].value.data();
                let yd = self.nodes[i].value.data();
                let kind = *kind;
                add_into(grads, *a, &|ga| {
                    for (idx, &gv) in g.iter().enumerate() {
                        ga[idx] += gv * unary_grad(kind, xd[idx], yd[idx]);
                    }
                });
            }
            Op::MatMul { a, b } => {
                let ash = self.nodes[a.0].value.shape().to_vec();
                let bsh = self.nodes[b.0].value.shape().to_vec();
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                match (ash.as_slice(), bsh.as_slice()) {
                    ([m, k], [_, n]) => {
                        add_into(grads, *a, &|ga| mm_nt(g, bd, *m, *n, *k, ga));
                        add_into(grads, *b, &|gb| mm_tn(ad, g, *m, *k, *n, gb));
                    }
                    ([bb, m, k], [_, n]) => {
                        add_into(grads, *a, &|ga| mm_nt(g, bd, bb * m, *n, *k, ga));
                        add_into(grads, *b, &|gb| mm_tn(ad, g, bb * m, *k, *n, gb));
                    }
                    ([bb, m, k], [_, k2, n]) => {
                        add_into(grads, *a, &|ga| {
                            for l in 0..*bb {
                                mm_nt(
                                    &g[l * m * n..(l + 1) * m * n],
                                    &bd[l * k2 * n..(l + 1) * k2 * n],
                                    *m,
                                    *n,
                                    *k,
                                    &mut ga[l * m * k..(l + 1) * m * k],
                                );
                            }
                        });
                        add_into(grads, *b, &|gb| {
                            for l in 0..*bb {
                                mm_tn(
                                    &ad[l * m * k..(l + 1) * m * k],
                                    &g[l * m * n..(l + 1) * m * n],
                                    *m,
                                    *k,
                                    *n,
                                    &mut gb[l * k2 * n..(l + 1) * k2 * n],
                                );
                            }
                        });
                    }
                    _ => unreachable!("validated in forward"),
                }
            }
            Op::TransposeLast { a } => {
                let sh = self.nodes[i].value.shape();
                let (lead, m, n) = match sh {
                    [m, n] => (1, *m, *n),
                    [b, m, n] => (*b, *m, *n),
                    _ => unreachable!(),
                };
                add_into(grads, *a, &|ga| {
                    for l in 0..lead {
                        let src = &g[l * m * n..(l + 1) * m * n];
                        let dst = &mut ga[l * m * n..(l + 1) * m * n];
                        for r in 0..m {
                            for c in 0..n {
                                dst[c * m + r] += src[r * n + c];
                            }
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                add_into(grads, *a, &|ga| {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
            Op::SliceC { a, from, to } => {
                let c = *self.nodes[a.0].value.shape().last().unwrap();
                let width = to - from;
                let rows = self.nodes[a.0].value.numel() / c;
                let from = *from;
                add_into(grads, *a, &|ga| {
                    for r in 0..rows {
                        for w in 0..width {
                            ga[r * c + from + w] += g[r * width + w];
                        }
                    }
                });
            }
            Op::ConcatC { parts } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *self.nodes[p.0].value.shape().last().unwrap())
                    .collect();
                let total_c: usize = widths.iter().sum();
                let rows = self.nodes[i].value.numel() / total_c;
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    let off = offset;
                    add_into(grads, p, &|gp| {
                        for r in 0..rows {
                            for x in 0..w {
                                gp[r * w + x] += g[r * total_c + off + x];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::TakeToken { a, t } => {
                let sh = self.nodes[a.0].value.shape();
                let (tt, c) = (sh[1], sh[2]);
                let b = sh[0];
                let t = *t;
                add_into(grads, *a, &|ga| {
                    for bi in 0..b {
                        let base = (bi * tt + t) * c;
                        for k in 0..c {
                            ga[base + k] += g[bi * c + k];
                        }
                    }
                });
            }
            Op::PrependToken { x, tok } => {
                let sh = self.nodes[i].value.shape();
                let (b, t1, c) = (sh[0], sh[1], sh[2]);
                add_into(grads, *x, &|gx| {
                    for bi in 0..b {
                        for t in 1..t1 {
                            for k in 0..c {
                                gx[(bi * (t1 - 1) + t - 1) * c + k] += g[(bi * t1 + t) * c + k];
                            }
                        }
                    }
                });
                add_into(grads, *tok, &|gt| {
                    for bi in 0..b {
                        for k in 0..c {
                            gt[k] += g[(bi * t1) * c + k];
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let c = self.nodes[table.0].value.shape()[1];
                add_into(grads, *table, &|gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for k in 0..c {
                            gt[id * c + k] += g[row * c + k];
                        }
                    }
                });
            }
            Op::Reduce { kind, a, axis } => {
                let sh = self.nodes[a.0].value.shape();
                let len = sh[*axis];
                let outer: usize = sh[..*axis].iter().product();
                let inner: usize = sh[*axis + 1..].iter().product();
                let ad = self.nodes[a.0].value.data();
                let kind = *kind;
                add_into(grads, *a, &|ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let go = g[o * inner + ii];
                            match kind {
                                ReduceKind::Mean => {
                                    let w = go / len as f64;
                                    for j in 0..len {
                                        ga[(o * len + j) * inner + ii] += w;
                                    }
                                }
                                ReduceKind::Var => {
                                    let mut mu = 0.0;
                                    for j in 0..len {
                                        mu += ad[(o * len + j) * inner + ii];
                                    }
                                    mu /= len as f64;
                                    let w = 2.0 * go / len as f64;
                                    for j in 0..len {
                                        let idx = (o * len + j) * inner + ii;
                                        ga[idx] += w * (ad[idx] - mu);
                                    }
                                }
                                ReduceKind::SumSq => {
                                    for j in 0..len {
                                        let idx = (o * len + j) * inner + ii;
                                        ga[idx] += 2.0 * go * ad[idx];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let gv = g[0];
                add_into(grads, *a, &|ga| {
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let sh = self.nodes[i].value.shape();
                let len = sh[*axis];
                let outer: usize = sh[..*axis].iter().product();
                let inner: usize = sh[*axis + 1..].iter().product();
                let yd = self.nodes[i].value.data();
                add_into(grads, *a, &|ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[at(j)] * yd[at(j)];
                            }
                            for j in 0..len {
                                ga[at(j)] += yd[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let sh = self.nodes[logits.0].value.shape();
                let (n, v) = (sh[0], sh[1]);
                let ld = self.nodes[logits.0].value.data();
                let gs = g[0] / n as f64;
                add_into(grads, *logits, &|gl| {
                    for (row, &tgt) in targets.iter().enumerate() {
                        let r = &ld[row * v..(row + 1) * v];
                        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = r.iter().map(|&x| (x - mx).exp()).sum();
                        for k in 0..v {
                            let p = (r[k] - mx).exp() / sum;
                            let onehot = if k == tgt { 1.0 } else { 0.0 };
                            gl[row * v + k] += gs * (p - onehot);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                add_into(grads, *a, &|ga| {
                    for (idx, &gv) in g.iter().enumerate() {
                        ga[idx] += gv * mask[idx];
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let c = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = self.nodes[x.0].value.numel() / c;
                let gd = self.nodes[gamma.0].value.data();
                self.norm_affine_grads(grads, *gamma, *beta, &saved.pre_affine, g, rows, c, &add_into);
                add_into(grads, *x, &|gx| {
                    for r in 0..rows {
                        let inv = saved.inv_std[r];
                        let pre = &saved.pre_affine[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for k in 0..c {
                            let dxh = gr[k] * gd[k];
                            m1 += dxh;
                            m2 += dxh * pre[k];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for k in 0..c {
                            let dxh = gr[k] * gd[k];
                            gx[r * c + k] += inv * (dxh - m1 - pre[k] * m2);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gamma, beta, saved } => {
                let c = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = self.nodes[x.0].value.numel() / c;
                let gd = self.nodes[gamma.0].value.data();
                self.norm_affine_grads(grads, *gamma, *beta, &saved.pre_affine, g, rows, c, &add_into);
                add_into(grads, *x, &|gx| {
                    for r in 0..rows {
                        let inv = saved.inv_std[r];
                        let pre = &saved.pre_affine[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mut m2 = 0.0;
                        for k in 0..c {
                            m2 += gr[k] * gd[k] * pre[k];
                        }
                        m2 /= c as f64;
                        for k in 0..c {
                            let dxh = gr[k] * gd[k];
                            gx[r * c + k] += inv * (dxh - pre[k] * m2);
                        }
                    }
                });
            }
            Op::BatchNormTrain { x, gamma, beta, saved } => {
                let c = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = self.nodes[x.0].value.numel() / c;
                let gd = self.nodes[gamma.0].value.data();
                self.norm_affine_grads(grads, *gamma, *beta, &saved.pre_affine, g, rows, c, &add_into);
                add_into(grads, *x, &|gx| {
                    let n = rows as f64;
                    for k in 0..c {
                        let inv = saved.inv_std[k];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for r in 0..rows {
                            let dxh = g[r * c + k] * gd[k];
                            m1 += dxh;
                            m2 += dxh * saved.pre_affine[r * c + k];
                        }
                        m1 /= n;
                        m2 /= n;
                        for r in 0..rows {
                            let dxh = g[r * c + k] * gd[k];
                            gx[r * c + k] += inv * (dxh - m1 - saved.pre_affine[r * c + k] * m2);
                        }
                    }
                });
            }
            Op::BatchNormEval { x, gamma, beta, inv_std, mean: _ } => {
                let c = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = self.nodes[x.0].value.numel() / c;
                let gd = self.nodes[gamma.0].value.data();
                let xd = self.nodes[x.0].value.data();
                // pre_affine is reconstructible but we need it for dgamma;
                // recompute from x, mean, inv_std.
                let Op::BatchNormEval { mean, .. } = &self.nodes[i].op else { unreachable!() };
                add_into(grads, *gamma, &|gg| {
                    for r in 0..rows {
                        for k in 0..c {
                            gg[k] += g[r * c + k] * (xd[r * c + k] - mean[k]) * inv_std[k];
                        }
                    }
                });
                add_into(grads, *beta, &|gb| {
                    for r in 0..rows {
                        for k in 0..c {
                            gb[k] += g[r * c + k];
                        }
                    }
                });
                add_into(grads, *x, &|gx| {
                    for r in 0..rows {
                        for k in 0..c {
                            gx[r * c + k] += g[r * c + k] * gd[k] * inv_std[k];
                        }
                    }
                });
            }
            Op::Dyt { x, alpha, gamma, beta, squasher, pre } => {
                let c = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = self.nodes[x.0].value.numel() / c;
                let gd = self.nodes[gamma.0].value.data();
                let xd = self.nodes[x.0].value.data();
                let al = self.nodes[alpha.0].value.item();
                let squasher = *squasher;
                self.norm_affine_grads(grads, *gamma, *beta, pre, g, rows, c, &add_into);
                let sprime = |idx: usize| unary_grad(squasher, al * xd[idx], pre[idx]);
                add_into(grads, *alpha, &|ga| {
                    let mut s = 0.0;
                    for r in 0..rows {
                        for k in 0..c {
                            let idx = r * c + k;
                            s += g[idx] * gd[k] * sprime(idx) * xd[idx];
                        }
                    }
                    ga[0] += s;
                });
                add_into(grads, *x, &|gx| {
                    for r in 0..rows {
                        for k in 0..c {
                            let idx = r * c + k;
                            gx[idx] += g[idx] * gd[k] * sprime(idx) * al;
                        }
                    }
                });
            }
        }
    }

    /// Shared gamma/beta gradients for all norm-family layers:
    /// per channel, dgamma = sum over rows of g*pre, dbeta = sum of g.
    #[allow(clippy::too_many_arguments)]
    fn norm_affine_grads(
        &self,
        grads: &mut [Option<Vec<f64>>],
        gamma: Var,
        beta: Var,
        pre: &[f64],
        g: &[f64],
        rows: usize,
        c: usize,
        add_into: &dyn Fn(&mut [Option<Vec<f64>>], Var, &dyn Fn(&mut [f64])),
    ) {
        add_into(grads, gamma, &|gg| {
            for r in 0..rows {
                for k in 0..c {
                    gg[k] += g[r * c + k] * pre[r * c + k];
                }
            }
        });
        add_into(grads, beta, &|gb| {
            for r in 0..rows {
                for k in 0..c {
                    gb[k] += g[r * c + k];
                }
            }
        });
    }
}
