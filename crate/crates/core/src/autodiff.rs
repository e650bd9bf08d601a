//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! The tape records a topologically ordered list of nodes; `backward` sweeps
//! it in reverse, pushing adjoints into parent nodes. The primitive set is
//! exactly what a small two-tower transformer needs: matrix multiply,
//! add/sub/scale, embedding lookup, layer normalization, GELU, softmax,
//! scaled dot-product attention, row concatenation/slicing, L2 row
//! normalization, log/exp, and scalar reductions.
//!
//! [`finite_difference_check`] is the independent oracle: it never touches
//! the tape, only a scalar function of the parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// A named trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.lookup(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

enum Op {
    Leaf {
        param: Option<usize>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// a `[n,k]` times b-transposed where b is `[m,k]`.
    MatMulNt {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// Row-broadcast bias add: `[n,m]` + [m].
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    ScaleConst {
        a: NodeId,
        c: f64,
    },
    /// Elementwise multiply by a one-element node.
    MulScalar {
        a: NodeId,
        s: NodeId,
    },
    Exp {
        a: NodeId,
    },
    Log {
        a: NodeId,
    },
    Gelu {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
    },
    LogSoftmax {
        a: NodeId,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        rows: usize,
    },
    L2NormRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    SumAll {
        a: NodeId,
    },
    MeanAll {
        a: NodeId,
    },
    PickPerRow {
        x: NodeId,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// GELU with the tanh approximation:
/// 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3))).
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const CUBIC: f64 = 0.044715;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const CUBIC: f64 = 0.044715;
    let u = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x)
}

// out[n,m] += a[n,k] * b[k,m]
fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[n,m] += a[n,k] * b[m,k]^T
fn mm_nt(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o += crate::tensor::dot(arow, brow);
        }
    }
}

// out[k,m] += a[n,k]^T * b[n,m]
fn mm_tn(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.data()[0]
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, shaped
    /// `[heads, t, t]` row-major.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&[f64], usize)> {
        match &self.nodes[id].op {
            Op::Attention { heads, probs, .. } => Some((probs.as_slice(), *heads)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        id
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf bound to `params[idx]`; gradients flowing into it can later be
    /// accumulated back via [`Gradients::param_grads`].
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> NodeId {
        self.push(params.get(idx).value.clone(), Op::Leaf { param: Some(idx) })
    }

    fn mat(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let t = &self.nodes[id].value;
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "{what} expects a matrix, got {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.mat(a, "matmul lhs")?;
        let (k2, m) = self.mat(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; n * m];
        mm_nn(
            &mut out,
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            n,
            k,
            m,
        );
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul { a, b }))
    }

    /// a `[n,k]` times transpose(b) where b is `[m,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.mat(a, "matmul_nt lhs")?;
        let (m, k2) = self.mat(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; n * m];
        mm_nt(
            &mut out,
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            n,
            k,
            m,
        );
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulNt { a, b }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what} shapes {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub { a, b }))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = self.mat(a, "add_bias lhs")?;
        let bt = &self.nodes[bias].value;
        if bt.rank() != 1 || bt.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} does not match row length {m}",
                bt.shape()
            )));
        }
        let mut data = self.nodes[a].value.data().to_vec();
        let bd = self.nodes[bias].value.data();
        for i in 0..n {
            for (x, &b) in data[i * m..(i + 1) * m].iter_mut().zip(bd) {
                *x += b;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|x| x * c).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::ScaleConst { a, c })
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.len() != 1 {
            return Err(Error::ShapeMismatch(
                "mul_scalar multiplier must have one element".into(),
            ));
        }
        let sv = self.nodes[s].value.data()[0];
        let data = self.nodes[a].value.data().iter().map(|x| x * sv).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulScalar { a, s }))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Log { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu { a })
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.mat(a, "softmax")?;
        let mut data = self.nodes[a].value.data().to_vec();
        for i in 0..n {
            softmax_row(&mut data[i * m..(i + 1) * m]);
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Softmax { a }))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.mat(a, "log_softmax")?;
        let mut data = self.nodes[a].value.data().to_vec();
        for i in 0..n {
            let row = &mut data[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::LogSoftmax { a }))
    }

    /// Embedding lookup: gathers `ids` rows of a `[v,d]` table.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let (v, d) = self.mat(table, "gather table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: v,
            });
        }
        let src = self.nodes[table].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather { table, ids },
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let (n, d) = self.mat(x, "layer_norm input")?;
        if self.nodes[gamma].value.len() != d || self.nodes[beta].value.len() != d {
            return Err(Error::ShapeMismatch(
                "layer_norm gain/bias must match row length".into(),
            ));
        }
        let src = self.nodes[x].value.data();
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        let mut data = vec![0.0; n * d];
        let mut mean = vec![0.0; n];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            mean[i] = mu;
            rstd[i] = rs;
            let out = &mut data[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] = (row[j] - mu) * rs * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], data),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    /// Full (non-causal) multi-head scaled dot-product attention over one
    /// sequence; q, k, v are `[t,c]` with c divisible by `heads`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (t, c) = self.mat(q, "attention query")?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention width {c} not divisible by {heads} heads"
            )));
        }
        let hs = c / heads;
        let scale = 1.0 / (hs as f64).sqrt();
        let qd = self.nodes[q].value.data();
        let kd = self.nodes[k].value.data();
        let vd = self.nodes[v].value.data();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * c];
        for h in 0..heads {
            let off = h * hs;
            for i in 0..t {
                let prow = &mut probs[h * t * t + i * t..h * t * t + (i + 1) * t];
                let qrow = &qd[i * c + off..i * c + off + hs];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &kd[j * c + off..j * c + off + hs];
                    *p = scale * crate::tensor::dot(qrow, krow);
                }
                softmax_row(prow);
                let orow = &mut out[i * c + off..i * c + off + hs];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &vd[j * c + off..j * c + off + hs];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![t, c], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of zero parts".into()));
        }
        let (_, cols) = self.mat(parts[0], "concat part")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.mat(p, "concat part")?;
            if c != cols {
                return Err(Error::ShapeMismatch(format!(
                    "concat column mismatch {c} vs {cols}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.nodes[p].value.data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let (n, m) = self.mat(x, "slice_rows")?;
        if start + rows > n {
            return Err(Error::ShapeMismatch(format!(
                "slice rows {start}..{} out of {n}",
                start + rows
            )));
        }
        let data = self.nodes[x].value.data()[start * m..(start + rows) * m].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![rows, m], data),
            Op::SliceRows { x, start, rows },
        ))
    }

    /// Normalize every row of `[n,d]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.mat(x, "l2_normalize_rows")?;
        let src = self.nodes[x].value.data();
        let mut norms = vec![0.0; n];
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let nn = crate::tensor::norm(row);
            if nn <= 1e-12 {
                return Err(Error::ZeroNorm);
            }
            norms[i] = nn;
            for (o, &v) in data[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / nn;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], data),
            Op::L2NormRows { x, norms },
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len() as f64;
        let s: f64 = self.nodes[a].value.data().iter().sum::<f64>() / n;
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::MeanAll { a })
    }

    /// `out[i] = x[i, idx[i]]` for a `[n,m]` input; result is rank-1 `[n]`.
    pub fn pick_per_row(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (n, m) = self.mat(x, "pick_per_row")?;
        if idx.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "pick_per_row wants {n} indices, got {}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(Error::ShapeMismatch(format!(
                "pick index {bad} out of row length {m}"
            )));
        }
        let src = self.nodes[x].value.data();
        let data = idx.iter().enumerate().map(|(i, &j)| src[i * m + j]).collect();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::PickPerRow { x, idx }))
    }

    /// Reverse sweep from a scalar node, seeding its adjoint with 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::ShapeMismatch(
                "backward root must be a scalar node".into(),
            ));
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Reverse sweep with explicit output adjoints; used when a later stage
    /// (a separate loss tape) supplies the gradients of this tape's outputs.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            if seed.len() != self.nodes[*id].value.len() {
                return Err(Error::ShapeMismatch(format!(
                    "seed length {} vs node size {}",
                    seed.len(),
                    self.nodes[*id].value.len()
                )));
            }
            let slot = grads[*id].get_or_insert_with(|| vec![0.0; seed.len()]);
            for (g, s) in slot.iter_mut().zip(seed) {
                *g += s;
            }
        }

        for id in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.push_adjoints(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> &'a mut Vec<f64> {
        let len = self.nodes[id].value.len();
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn push_adjoints(&self, id: NodeId, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (n, k) = (self.nodes[*a].value.shape()[0], self.nodes[*a].value.shape()[1]);
                let m = self.nodes[*b].value.shape()[1];
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                // da[n,k] += g[n,m] * b[k,m]^T
                mm_nt(self.grad_slot(grads, *a), gout, bd, n, m, k);
                // db[k,m] += a[n,k]^T * g[n,m]
                mm_tn(self.grad_slot(grads, *b), ad, gout, n, k, m);
            }
            Op::MatMulNt { a, b } => {
                let (n, k) = (self.nodes[*a].value.shape()[0], self.nodes[*a].value.shape()[1]);
                let m = self.nodes[*b].value.shape()[0];
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                // da[n,k] += g[n,m] * b[m,k]
                mm_nn(self.grad_slot(grads, *a), gout, bd, n, m, k);
                // db[m,k] += g[n,m]^T * a[n,k]
                mm_tn(self.grad_slot(grads, *b), gout, ad, n, m, k);
            }
            Op::Add { a, b } => {
                for (g, &v) in self.grad_slot(grads, *a).iter_mut().zip(gout) {
                    *g += v;
                }
                for (g, &v) in self.grad_slot(grads, *b).iter_mut().zip(gout) {
                    *g += v;
                }
            }
            Op::Sub { a, b } => {
                for (g, &v) in self.grad_slot(grads, *a).iter_mut().zip(gout) {
                    *g += v;
                }
                for (g, &v) in self.grad_slot(grads, *b).iter_mut().zip(gout) {
                    *g -= v;
                }
            }
            Op::AddBias { a, bias } => {
                let m = self.nodes[*bias].value.len();
                for (g, &v) in self.grad_slot(grads, *a).iter_mut().zip(gout) {
                    *g += v;
                }
                let gb = self.grad_slot(grads, *bias);
                for (i, &v) in gout.iter().enumerate() {
                    gb[i % m] += v;
                }
            }
            Op::ScaleConst { a, c } => {
                let c = *c;
                for (g, &v) in self.grad_slot(grads, *a).iter_mut().zip(gout) {
                    *g += c * v;
                }
            }
            Op::MulScalar { a, s } => {
                let sv = self.nodes[*s].value.data()[0];
                let ad = self.nodes[*a].value.data();
                let mut ds = 0.0;
                for (&g, &x) in gout.iter().zip(ad) {
                    ds += g * x;
                }
                for (g, &v) in self.grad_slot(grads, *a).iter_mut().zip(gout) {
                    *g += sv * v;
                }
                self.grad_slot(grads, *s)[0] += ds;
            }
            Op::Exp { a } => {
                let yd = self.nodes[id].value.data();
                for ((g, &y), &v) in self.grad_slot(grads, *a).iter_mut().zip(yd).zip(gout) {
                    *g += y * v;
                }
            }
            Op::Log { a } => {
                let xd = self.nodes[*a].value.data();
                for ((g, &x), &v) in self.grad_slot(grads, *a).iter_mut().zip(xd).zip(gout) {
                    *g += v / x;
                }
            }
            Op::Gelu { a } => {
                let xd = self.nodes[*a].value.data();
                for ((g, &x), &v) in self.grad_slot(grads, *a).iter_mut().zip(xd).zip(gout) {
                    *g += gelu_grad(x) * v;
                }
            }
            Op::Softmax { a } => {
                let (n, m) = (self.nodes[id].value.shape()[0], self.nodes[id].value.shape()[1]);
                let p = self.nodes[id].value.data();
                let ga = self.grad_slot(grads, *a);
                for i in 0..n {
                    let prow = &p[i * m..(i + 1) * m];
                    let grow = &gout[i * m..(i + 1) * m];
                    let inner: f64 = prow.iter().zip(grow).map(|(&pp, &gg)| pp * gg).sum();
                    for j in 0..m {
                        ga[i * m + j] += prow[j] * (grow[j] - inner);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let (n, m) = (self.nodes[id].value.shape()[0], self.nodes[id].value.shape()[1]);
                let y = self.nodes[id].value.data();
                let ga = self.grad_slot(grads, *a);
                for i in 0..n {
                    let yrow = &y[i * m..(i + 1) * m];
                    let grow = &gout[i * m..(i + 1) * m];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..m {
                        ga[i * m + j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[*table].value.shape()[1];
                let gt = self.grad_slot(grads, *table);
                for (l, &row) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[row * d + j] += gout[l * d + j];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (n, d) = (self.nodes[id].value.shape()[0], self.nodes[id].value.shape()[1]);
                let xd = self.nodes[*x].value.data();
                let gd = self.nodes[*gamma].value.data();
                {
                    let ggamma = self.grad_slot(grads, *gamma);
                    for i in 0..n {
                        for j in 0..d {
                            let xhat = (xd[i * d + j] - mean[i]) * rstd[i];
                            ggamma[j] += gout[i * d + j] * xhat;
                        }
                    }
                }
                {
                    let gbeta = self.grad_slot(grads, *beta);
                    for i in 0..n {
                        for j in 0..d {
                            gbeta[j] += gout[i * d + j];
                        }
                    }
                }
                let gx = self.grad_slot(grads, *x);
                for i in 0..n {
                    let mut dnorm_mean = 0.0;
                    let mut dnorm_xhat_mean = 0.0;
                    for j in 0..d {
                        let xhat = (xd[i * d + j] - mean[i]) * rstd[i];
                        let dnorm = gd[j] * gout[i * d + j];
                        dnorm_mean += dnorm;
                        dnorm_xhat_mean += dnorm * xhat;
                    }
                    dnorm_mean /= d as f64;
                    dnorm_xhat_mean /= d as f64;
                    for j in 0..d {
                        let xhat = (xd[i * d + j] - mean[i]) * rstd[i];
                        let dnorm = gd[j] * gout[i * d + j];
                        gx[i * d + j] += (dnorm - dnorm_mean - xhat * dnorm_xhat_mean) * rstd[i];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, c) = (self.nodes[id].value.shape()[0], self.nodes[id].value.shape()[1]);
                let hs = c / heads;
                let scale = 1.0 / (hs as f64).sqrt();
                let qd = self.nodes[*q].value.data();
                let kd = self.nodes[*k].value.data();
                let vd = self.nodes[*v].value.data();
                // Adjoints computed head by head into dense scratch, then
                // spread into the parents.
                let mut dq = vec![0.0; t * c];
                let mut dk = vec![0.0; t * c];
                let mut dv = vec![0.0; t * c];
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let off = h * hs;
                    let pslab = &probs[h * t * t..(h + 1) * t * t];
                    for i in 0..t {
                        let prow = &pslab[i * t..(i + 1) * t];
                        let grow = &gout[i * c + off..i * c + off + hs];
                        // dv[j] += p[i,j] * gout[i]
                        for (j, &p) in prow.iter().enumerate() {
                            let dvrow = &mut dv[j * c + off..j * c + off + hs];
                            for (o, &g) in dvrow.iter_mut().zip(grow) {
                                *o += p * g;
                            }
                        }
                        // dp[j] = gout[i] . v[j]
                        for (j, dpj) in dp.iter_mut().enumerate() {
                            let vrow = &vd[j * c + off..j * c + off + hs];
                            *dpj = crate::tensor::dot(grow, vrow);
                        }
                        let inner: f64 = prow.iter().zip(&dp).map(|(&p, &d)| p * d).sum();
                        // dlogits = p .* (dp - inner); then into q and k
                        for j in 0..t {
                            let dl = prow[j] * (dp[j] - inner) * scale;
                            let krow = &kd[j * c + off..j * c + off + hs];
                            let qrow = &qd[i * c + off..i * c + off + hs];
                            let dqrow = &mut dq[i * c + off..i * c + off + hs];
                            for (o, &kk) in dqrow.iter_mut().zip(krow) {
                                *o += dl * kk;
                            }
                            let dkrow = &mut dk[j * c + off..j * c + off + hs];
                            for (o, &qq) in dkrow.iter_mut().zip(qrow) {
                                *o += dl * qq;
                            }
                        }
                    }
                }
                for (g, v2) in self.grad_slot(grads, *q).iter_mut().zip(&dq) {
                    *g += v2;
                }
                for (g, v2) in self.grad_slot(grads, *k).iter_mut().zip(&dk) {
                    *g += v2;
                }
                for (g, v2) in self.grad_slot(grads, *v).iter_mut().zip(&dv) {
                    *g += v2;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = self.nodes[id].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.shape()[0];
                    let gp = self.grad_slot(grads, p);
                    for (g, &v) in gp
                        .iter_mut()
                        .zip(&gout[offset * cols..(offset + rows) * cols])
                    {
                        *g += v;
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start, rows } => {
                let cols = self.nodes[id].value.shape()[1];
                let gx = self.grad_slot(grads, *x);
                for (g, &v) in gx[start * cols..(start + rows) * cols]
                    .iter_mut()
                    .zip(gout)
                {
                    *g += v;
                }
            }
            Op::L2NormRows { x, norms } => {
                let (n, d) = (self.nodes[id].value.shape()[0], self.nodes[id].value.shape()[1]);
                let y = self.nodes[id].value.data();
                let gx = self.grad_slot(grads, *x);
                for i in 0..n {
                    let yrow = &y[i * d..(i + 1) * d];
                    let grow = &gout[i * d..(i + 1) * d];
                    let inner: f64 = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[i * d + j] += (grow[j] - yrow[j] * inner) / norms[i];
                    }
                }
            }
            Op::SumAll { a } => {
                let g0 = gout[0];
                for g in self.grad_slot(grads, *a).iter_mut() {
                    *g += g0;
                }
            }
            Op::MeanAll { a } => {
                let n = self.nodes[*a].value.len() as f64;
                let g0 = gout[0] / n;
                for g in self.grad_slot(grads, *a).iter_mut() {
                    *g += g0;
                }
            }
            Op::PickPerRow { x, idx } => {
                let m = self.nodes[*x].value.shape()[1];
                let gx = self.grad_slot(grads, *x);
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * m + j] += gout[i];
                }
            }
        }
    }
}

/// Node adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter-bound leaf, as (param index, grad buffer).
    pub fn param_grads(&self, tape: &Tape) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        for (id, node) in tape.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if let Some(g) = self.wrt(id) {
                    out.push((p, g.to_vec()));
                }
            }
        }
        out
    }

    /// Add every parameter-bound leaf gradient into `params`.
    pub fn accumulate_into(&self, tape: &Tape, params: &mut ParamSet) {
        for (p, g) in self.param_grads(tape) {
            let dst = params.get_mut(p).grad.data_mut();
            for (d, v) in dst.iter_mut().zip(&g) {
                *d += v;
            }
        }
    }
}

/// Central-difference gradient verification.
///
/// `params.grad` must already hold the analytic gradients for `f`. Every
/// parameter entry is probed with `(f(x+eps) - f(x-eps)) / (2 eps)` and the
/// worst relative error `|analytic - numeric| / max(1, |analytic|)` is
/// returned. The probe path only calls `f`; it never consults the tape that
/// produced the analytic gradients.
pub fn finite_difference_check<F>(f: F, params: &mut ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        for e in 0..params.get(p).value.len() {
            let orig = params.get(p).value.data()[e];
            params.get_mut(p).value.data_mut()[e] = orig + eps;
            let fp = f(params)?;
            params.get_mut(p).value.data_mut()[e] = orig - eps;
            let fm = f(params)?;
            params.get_mut(p).value.data_mut()[e] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at probe of {}[{e}]",
                    params.get(p).name
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = params.get(p).grad.data()[e];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_parts(shape, data)
    }

    /// Builds a nontrivial composite touching every primitive the encoders
    /// use, returns the loss, and (on a recording pass) fills param grads.
    fn composite(params: &ParamSet, record: Option<&mut ParamSet>) -> f64 {
        let mut tape = Tape::new();
        let table = tape.param(params, params.lookup("table").unwrap());
        let w = tape.param(params, params.lookup("w").unwrap());
        let b = tape.param(params, params.lookup("b").unwrap());
        let gamma = tape.param(params, params.lookup("gamma").unwrap());
        let beta = tape.param(params, params.lookup("beta").unwrap());
        let s = tape.param(params, params.lookup("s").unwrap());

        let x = tape.gather(table, vec![0, 2, 1, 3]).unwrap();
        let x = tape.layer_norm(x, gamma, beta).unwrap();
        let att = tape.attention(x, x, x, 2).unwrap();
        let x = tape.add(x, att).unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_bias(h, b).unwrap();
        let h = tape.gelu(h);
        let top = tape.slice_rows(h, 0, 2).unwrap();
        let bottom = tape.slice_rows(h, 2, 2).unwrap();
        let joined = tape.concat_rows(&[bottom, top]).unwrap();
        let nrm = tape.l2_normalize_rows(joined).unwrap();
        let sims = tape.matmul_nt(nrm, nrm).unwrap();
        let sims = tape.mul_scalar(sims, s).unwrap();
        let ls = tape.log_softmax(sims).unwrap();
        let diag = tape.pick_per_row(ls, vec![0, 1, 2, 3]).unwrap();
        let total = tape.sum_all(diag);
        let loss = tape.scale(total, -1.0);
        let loss = tape.mean_all(loss);

        if let Some(ps) = record {
            let grads = tape.backward(loss).unwrap();
            grads.accumulate_into(&tape, ps);
        }
        tape.scalar_value(loss)
    }

    #[test]
    fn composite_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        params.add("table", rand_tensor(&mut rng, vec![5, 4])).unwrap();
        params.add("w", rand_tensor(&mut rng, vec![4, 4])).unwrap();
        params.add("b", rand_tensor(&mut rng, vec![4])).unwrap();
        params.add("gamma", rand_tensor(&mut rng, vec![4])).unwrap();
        params.add("beta", rand_tensor(&mut rng, vec![4])).unwrap();
        params.add("s", Tensor::scalar(1.3)).unwrap();

        params.zero_grads();
        let mut rec = params.clone();
        composite(&params, Some(&mut rec));
        // Copy the recorded grads back so the checker sees them.
        for i in 0..params.len() {
            params.get_mut(i).grad = rec.get(i).grad.clone();
        }
        let err = finite_difference_check(|p| Ok(composite(p, None)), &mut params, 1e-4).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn quadratic_gradient_is_exact_for_central_differences() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(3.0)).unwrap();
        // f(x) = x^2, analytic gradient 6 at x = 3.
        params.get_mut(0).grad = Tensor::scalar(6.0);
        let err = finite_difference_check(
            |p| Ok(p.get(0).value.data()[0] * p.get(0).value.data()[0]),
            &mut params,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(3.0)).unwrap();
        params.get_mut(0).grad = Tensor::scalar(12.0); // analytic x2
        let err = finite_difference_check(
            |p| Ok(p.get(0).value.data()[0] * p.get(0).value.data()[0]),
            &mut params,
            1e-4,
        )
        .unwrap();
        assert!(err > 0.4, "corruption not detected, error {err}");
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(1.0)).unwrap();
        assert!(finite_difference_check(|_| Ok(0.0), &mut params, 1e-2).is_err());
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(0.0)).unwrap();
        let res = finite_difference_check(
            |p| Ok(1.0 / p.get(0).value.data()[0].abs().ln()),
            &mut params,
            1e-4,
        );
        // ln of a tiny number is finite, but 1/ln(|eps|) at x=+-eps is fine;
        // force a NaN instead.
        drop(res);
        let res = finite_difference_check(
            |p| Ok((p.get(0).value.data()[0] - 1e-4).sqrt()),
            &mut params,
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(1.0)).unwrap();
        assert!(params.add("x", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn gather_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let t = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert!(matches!(
            tape.gather(t, vec![0, 2]),
            Err(Error::TokenOutOfRange { id: 2, .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let s = tape.softmax(x).unwrap();
        for i in 0..2 {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
