//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation of a forward pass in
//! topological order. [`Tape::backward`] then walks the record once in
//! reverse to produce exact gradients for every parameter leaf. Tapes are
//! rebuilt per training step because sequence length and neighbor count
//! vary per batch.
//!
//! Tapes are single-threaded; a tape and its variables must not be shared
//! across workers. Parameter values are copied onto the tape when a
//! [`ParamStore`] leaf is created, so the store itself may be read
//! concurrently by workers that each own their own tape.

use crate::error::{RadflowError, Result};
use crate::tensor::Tensor;
use rand::Rng;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF via the exact erf form. The erfc branch keeps the
/// deep negative tail from underflowing to zero.
pub fn norm_cdf(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * statrs::function::erf::erfc(-x * INV_SQRT_2)
    } else {
        0.5 * (1.0 + statrs::function::erf::erf(x * INV_SQRT_2))
    }
}

/// GELU(x) = x Φ(x) with Φ the standard normal CDF (exact, not the tanh
/// approximation).
pub fn gelu_scalar(x: f64) -> f64 {
    x * norm_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    norm_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Owns all learnable tensors of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }
}

/// Per-parameter gradient accumulator. Accumulation across samples happens
/// here, in a fixed order, which keeps training deterministic.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, shape: &[usize], grad: &[f64]) {
        match &mut self.grads[id.0] {
            Some(t) => {
                for (g, d) in t.data_mut().iter_mut().zip(grad) {
                    *g += d;
                }
            }
            slot => {
                *slot = Some(Tensor::new(shape.to_vec(), grad.to_vec()).expect("grad shape"));
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Global L2 norm over every stored gradient.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// If the global L2 norm exceeds `threshold`, scale every gradient by
    /// `threshold / norm`; otherwise leave them unchanged.
    pub fn clip_global_norm(&mut self, threshold: f64) -> f64 {
        assert!(threshold > 0.0, "clip threshold must be positive");
        let norm = self.global_norm();
        if norm > threshold {
            self.scale(threshold / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}

/// Handle into the active tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    /// y = W x (+ b)
    MatVec {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    #[allow(dead_code)]
    AddConst(Var, f64),
    /// x scaled by a scalar variable
    ScaleByScalar {
        x: Var,
        s: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Expm1(Var),
    Abs(Var),
    Relu(Var),
    Softmax(Var),
    Dot(Var, Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        offset: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations; every input handle precedes its
/// consumer, so one reverse sweep yields all gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn leaf_vec(&mut self, data: Vec<f64>) -> Var {
        self.leaf(Tensor::vector(data))
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.leaf(Tensor::zeros(vec![n]))
    }

    /// Parameter leaf; its gradient is reported under the given id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// y = W x (+ b) for W of shape [m, n] and x of shape [n].
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.value(w).shape();
        if ws.len() != 2 {
            return Err(RadflowError::ShapeMismatch(format!(
                "linear weight must be 2-d, got {ws:?}"
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        if self.value(x).len() != n {
            return Err(RadflowError::ShapeMismatch(format!(
                "linear: weight [{m},{n}] vs input [{}]",
                self.value(x).len()
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != m {
                return Err(RadflowError::ShapeMismatch(format!(
                    "linear: bias [{}] vs output [{m}]",
                    self.value(b).len()
                )));
            }
        }
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = match b {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![0.0; m],
        };
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xd[j];
            }
            out[i] += acc;
        }
        Ok(self.push(Tensor::vector(out), Op::MatVec { w, x, b }))
    }

    fn zip_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(RadflowError::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data).unwrap(), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v + c, Op::AddConst(x, c))
    }

    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(RadflowError::ShapeMismatch(
                "scale_by_scalar needs a scalar".into(),
            ));
        }
        let sv = self.value(s).data()[0];
        Ok(self.map_unary(x, |v| v * sv, Op::ScaleByScalar { x, s }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn expm1(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::exp_m1, Op::Expm1(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::abs, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Numerically stable softmax (max-subtraction) over a k ≥ 1 vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(RadflowError::ShapeMismatch("softmax on empty vector".into()));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data = exps.into_iter().map(|e| e / total).collect();
        Ok(self.push(Tensor::vector(data), Op::Softmax(x)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(RadflowError::ShapeMismatch("dot length mismatch".into()));
        }
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(v), Op::Mean(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    /// Contiguous sub-vector [offset, offset+len).
    pub fn narrow(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if offset + len > t.len() {
            return Err(RadflowError::ShapeMismatch(format!(
                "narrow [{offset}, {}) out of [{})",
                offset + len,
                t.len()
            )));
        }
        let data = t.data()[offset..offset + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Narrow { x, offset }))
    }

    /// Inverted dropout: zero with probability p and scale survivors by
    /// 1/(1-p) in train mode; identity in eval mode.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(RadflowError::InvalidConfig(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Dropout { x, mask }))
    }

    /// Reverse sweep from a scalar loss. Returns per-node adjoints; use
    /// [`NodeGrads::accumulate_params`] to fold parameter gradients into a
    /// [`Gradients`] accumulator.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(RadflowError::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        macro_rules! grad_slot {
            ($g:expr, $v:expr, $len:expr) => {
                $g[$v.0].get_or_insert_with(|| vec![0.0; $len])
            };
        }

        for idx in (0..self.nodes.len()).rev() {
            let dz = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(dz);
                    continue;
                }
                Op::MatVec { w, x, b } => {
                    let (m, n) = {
                        let ws = self.value(*w).shape();
                        (ws[0], ws[1])
                    };
                    let wd = self.value(*w).data().to_vec();
                    let xd = self.value(*x).data().to_vec();
                    {
                        let gw = grad_slot!(grads, w, m * n);
                        for i in 0..m {
                            let d = dz[i];
                            if d != 0.0 {
                                let row = &mut gw[i * n..(i + 1) * n];
                                for j in 0..n {
                                    row[j] += d * xd[j];
                                }
                            }
                        }
                    }
                    {
                        let gx = grad_slot!(grads, x, n);
                        for i in 0..m {
                            let d = dz[i];
                            if d != 0.0 {
                                let row = &wd[i * n..(i + 1) * n];
                                for j in 0..n {
                                    gx[j] += d * row[j];
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = grad_slot!(grads, b, m);
                        for i in 0..m {
                            gb[i] += dz[i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let g = grad_slot!(grads, a, dz.len());
                    for (g, d) in g.iter_mut().zip(&dz) {
                        *g += d;
                    }
                    let g = grad_slot!(grads, b, dz.len());
                    for (g, d) in g.iter_mut().zip(&dz) {
                        *g += d;
                    }
                }
                Op::Sub(a, b) => {
                    let g = grad_slot!(grads, a, dz.len());
                    for (g, d) in g.iter_mut().zip(&dz) {
                        *g += d;
                    }
                    let g = grad_slot!(grads, b, dz.len());
                    for (g, d) in g.iter_mut().zip(&dz) {
                        *g -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    let g = grad_slot!(grads, a, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * bv[i];
                    }
                    let g = grad_slot!(grads, b, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * av[i];
                    }
                }
                Op::Div(a, b) => {
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    let g = grad_slot!(grads, a, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] / bv[i];
                    }
                    let g = grad_slot!(grads, b, dz.len());
                    for i in 0..dz.len() {
                        g[i] -= dz[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
                Op::Scale(x, s) => {
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * s;
                    }
                }
                Op::AddConst(x, _) => {
                    let g = grad_slot!(grads, x, dz.len());
                    for (g, d) in g.iter_mut().zip(&dz) {
                        *g += d;
                    }
                }
                Op::ScaleByScalar { x, s } => {
                    let sv = self.value(*s).data()[0];
                    let xv = self.value(*x).data().to_vec();
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * sv;
                    }
                    let gs = grad_slot!(grads, s, 1);
                    gs[0] += dz.iter().zip(&xv).map(|(d, x)| d * x).sum::<f64>();
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data().to_vec();
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
                Op::Tanh(x) => {
                    let yv = node.value.data().to_vec();
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data().to_vec();
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * gelu_grad(xv[i]);
                    }
                }
                Op::Expm1(x) => {
                    let xv = self.value(*x).data().to_vec();
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * xv[i].exp();
                    }
                }
                Op::Abs(x) => {
                    let xv = self.value(*x).data().to_vec();
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * xv[i].signum() * (xv[i] != 0.0) as u8 as f64;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data().to_vec();
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * (xv[i] > 0.0) as u8 as f64;
                    }
                }
                Op::Softmax(x) => {
                    let yv = node.value.data().to_vec();
                    let inner: f64 = dz.iter().zip(&yv).map(|(d, y)| d * y).sum();
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += yv[i] * (dz[i] - inner);
                    }
                }
                Op::Dot(a, b) => {
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    let d = dz[0];
                    let g = grad_slot!(grads, a, av.len());
                    for i in 0..av.len() {
                        g[i] += d * bv[i];
                    }
                    let g = grad_slot!(grads, b, bv.len());
                    for i in 0..bv.len() {
                        g[i] += d * av[i];
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let g = grad_slot!(grads, x, n);
                    for v in g.iter_mut() {
                        *v += dz[0];
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let d = dz[0] / n as f64;
                    let g = grad_slot!(grads, x, n);
                    for v in g.iter_mut() {
                        *v += d;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let g = grad_slot!(grads, p, n);
                        for i in 0..n {
                            g[i] += dz[offset + i];
                        }
                        offset += n;
                    }
                }
                Op::Narrow { x, offset } => {
                    let n = self.value(*x).len();
                    let g = grad_slot!(grads, x, n);
                    for i in 0..dz.len() {
                        g[offset + i] += dz[i];
                    }
                }
                Op::Dropout { x, mask } => {
                    let g = grad_slot!(grads, x, dz.len());
                    for i in 0..dz.len() {
                        g[i] += dz[i] * mask[i];
                    }
                }
            }
        }
        Ok(NodeGrads { grads })
    }
}

/// Adjoints of every tape node after a backward pass.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient of the loss with respect to a specific variable; zero if the
    /// loss does not depend on it.
    pub fn get(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; tape.value(v).len()],
        }
    }

    /// Fold all parameter-leaf gradients into `acc`.
    pub fn accumulate_params(&self, tape: &Tape, acc: &mut Gradients) {
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[idx] {
                    acc.accumulate(id, node.value.shape(), g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_zero_weights_returns_bias() {
        let mut tape = Tape::new();
        let w = tape.leaf(matrix(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let x = tape.leaf_vec(vec![1.0, 2.0]);
        let b = tape.leaf_vec(vec![3.0, 4.0]);
        let y = tape.linear(w, x, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = Tape::new();
        let w = tape.leaf(matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = tape.leaf_vec(vec![1.0, 0.0]);
        let y = tape.linear(w, x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn linear_hand_multiply() {
        let mut tape = Tape::new();
        let w = tape.leaf(matrix(&[&[1.0, 1.0], &[2.0, 0.0]]));
        let x = tape.leaf_vec(vec![2.0, 3.0]);
        let y = tape.linear(w, x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let w = tape.leaf(matrix(&[&[1.0, 1.0]]));
        let x = tape.leaf_vec(vec![1.0, 2.0, 3.0]);
        assert!(tape.linear(w, x, None).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.8413447460685429).abs() < 1e-9);
        let tail = gelu_scalar(-10.0);
        assert!((tail - -7.619853024160593e-23).abs() / 7.62e-23 < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let single = tape.leaf_vec(vec![123.45]);
        let y = tape.softmax(single).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);

        let x = tape.leaf_vec(vec![1.0, 2.0]);
        let y = tape.softmax(x).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 0.2689414213699951).abs() < 1e-12);
        assert!((got[1] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![1.0, -2.0, 0.5]);
        let shifted = tape.add_const(x, 1000.0);
        let a = tape.softmax(x).unwrap();
        let b = tape.softmax(shifted).unwrap();
        let (va, vb) = (tape.value(a).data().to_vec(), tape.value(b).data().to_vec());
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((va.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_eval_and_p0_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![1.0, -2.0, 3.0]);
        let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(eval).data(), tape.value(x).data());
        let p0 = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(p0).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_seeded_mask_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut tape = Tape::new();
            let x = tape.leaf_vec(vec![1.0; 64]);
            let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().any(|&v| v == 0.0));
        assert!(a.iter().any(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![1.0]);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn backward_linear_grad_is_outer_structure() {
        let mut store = ParamStore::new();
        let w = store.add("w", matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.leaf_vec(vec![5.0, 7.0]);
        let y = tape.linear(wv, x, None).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        // d(sum(Wx))/dW_{ij} = x_j for every row i.
        assert_eq!(grads.get(&tape, wv), vec![5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn backward_unused_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(vec![2.0]));
        let unused = store.add("unused", Tensor::vector(vec![9.0]));
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _n = tape.param(&store, unused);
        let loss = tape.sum(u);
        let grads = tape.backward(loss).unwrap();
        let mut acc = Gradients::new(store.len());
        grads.accumulate_params(&tape, &mut acc);
        assert_eq!(acc.get(used).unwrap().data(), &[1.0]);
        assert!(acc.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    /// Central-difference check across every primitive in one composite
    /// graph, h = 1e-5, relative tolerance 1e-4.
    #[test]
    fn backward_matches_finite_differences() {
        fn forward(values: &[f64]) -> f64 {
            let mut store = ParamStore::new();
            let w = store.add("w", Tensor::new(vec![2, 2], values[..4].to_vec()).unwrap());
            let v = store.add("v", Tensor::new(vec![4], values[4..].to_vec()).unwrap());
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let vv = tape.param(&store, v);
            let x = tape.leaf_vec(vec![0.3, -0.7]);
            let y = tape.linear(wv, x, None).unwrap();
            let s = tape.sigmoid(y);
            let t = tape.tanh(y);
            let m = tape.mul(s, t).unwrap();
            let g = tape.gelu(m);
            let head = tape.narrow(vv, 0, 2).unwrap();
            let tail = tape.narrow(vv, 2, 2).unwrap();
            let sm = tape.softmax(head).unwrap();
            let mixed = tape.mul(sm, g).unwrap();
            let e = tape.expm1(mixed);
            let diff = tape.sub(e, tail).unwrap();
            let a = tape.abs(diff);
            let d = tape.dot(a, tail).unwrap();
            let cat = tape.concat(&[a, d]);
            let q = tape.div(cat, vv).unwrap_or(cat);
            let out = tape.mean(q);
            tape.value(out).data()[0]
        }

        let base = vec![0.4, -0.2, 0.9, 0.1, 0.6, -0.3, 0.8, 1.2];
        // Analytic gradients.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 2], base[..4].to_vec()).unwrap());
        let v = store.add("v", Tensor::new(vec![4], base[4..].to_vec()).unwrap());
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let vv = tape.param(&store, v);
        let x = tape.leaf_vec(vec![0.3, -0.7]);
        let y = tape.linear(wv, x, None).unwrap();
        let s = tape.sigmoid(y);
        let t = tape.tanh(y);
        let m = tape.mul(s, t).unwrap();
        let g = tape.gelu(m);
        let head = tape.narrow(vv, 0, 2).unwrap();
        let tail = tape.narrow(vv, 2, 2).unwrap();
        let sm = tape.softmax(head).unwrap();
        let mixed = tape.mul(sm, g).unwrap();
        let e = tape.expm1(mixed);
        let diff = tape.sub(e, tail).unwrap();
        let a = tape.abs(diff);
        let d = tape.dot(a, tail).unwrap();
        let cat = tape.concat(&[a, d]);
        let q = tape.div(cat, vv).unwrap_or(cat);
        let loss = tape.mean(q);
        let grads = tape.backward(loss).unwrap();
        let mut analytic = grads.get(&tape, wv);
        analytic.extend(grads.get(&tape, vv));

        let h = 1e-5;
        for (i, &g_a) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let g_n = (forward(&plus) - forward(&minus)) / (2.0 * h);
            let rel = (g_a - g_n).abs() / (g_a.abs() + g_n.abs()).max(1e-3);
            assert!(rel < 1e-4, "param {i}: analytic {g_a} numeric {g_n}");
        }
    }

    #[test]
    fn clip_norm_below_threshold_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.03, 0.04]));
        let mut grads = Gradients::new(1);
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let s = tape.scale(p, 1.0);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap().accumulate_params(&tape, &mut grads);
        grads.scale(0.05 / grads.global_norm());
        let before: Vec<f64> = grads.get(id).unwrap().data().to_vec();
        let norm = grads.clip_global_norm(0.1);
        assert!((norm - 0.05).abs() < 1e-12);
        assert_eq!(grads.get(id).unwrap().data(), before.as_slice());
    }

    #[test]
    fn clip_norm_above_threshold_scales() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0, 1.0]));
        let mut grads = Gradients::new(1);
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum(p);
        tape.backward(loss).unwrap().accumulate_params(&tape, &mut grads);
        grads.scale(0.2 / grads.global_norm());
        let norm = grads.clip_global_norm(0.1);
        assert!((norm - 0.2).abs() < 1e-12);
        for &g in grads.get(id).unwrap().data() {
            assert!((g - 0.2 / 2f64.sqrt() * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_norm_zero_grads_unchanged() {
        let mut grads = Gradients::new(3);
        assert_eq!(grads.clip_global_norm(0.1), 0.0);
        assert!(grads.iter().all(|(_, g)| g.is_none()));
    }
}
