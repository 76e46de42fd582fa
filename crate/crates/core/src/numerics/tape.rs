//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node holding its output value and, when any
//! input needs a gradient, whatever it must remember for the backward sweep.
//! A [`Tape`] built with [`Tape::no_grad`] records values only.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative slope of the leaky ReLU.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "leaky_relu" => Ok(Self::LeakyRelu),
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
    Mse,
}

enum Op {
    Leaf,
    Reshape(Var),
    WeightedSum(Vec<(Var, f64)>),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        dims: MatDims,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    Permute0213 {
        x: Var,
        dims: [usize; 4],
    },
    Softmax {
        x: Var,
        scale: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
        temperature: f64,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    BceWithLogits {
        z: Var,
        targets: Vec<f64>,
    },
    Mse {
        x: Var,
        targets: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        rows: Vec<usize>,
        dim: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass; consumed by [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    /// Rows where the cosine loss met a zero vector.
    pub zero_norm_rows: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            zero_norm_rows: 0,
        }
    }

    /// A tape that records values but never gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Leaf };
        let mut value = value;
        value.grad = None;
        value.requires_grad = needs_grad;
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Tensor::new(t.shape(), t.data().to_vec()).unwrap(), Op::Leaf, needs)
    }

    /// Records a leaf that always receives a gradient (if the tape allows).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Tensor::new(t.shape(), t.data().to_vec()).unwrap(), Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Contract("weighted_sum of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, self.shape(v)));
            }
            for (o, x) in out.iter_mut().zip(self.data(v)) {
                *o += w * x;
            }
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::WeightedSum(terms.to_vec()), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_sum(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_sum(&[(a, 1.0), (b, -1.0)])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.weighted_sum(&[(a, s)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), needs))
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias { x, bias }, needs))
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let dims = MatDims {
            batch: 1,
            m: sa[0],
            k: sa[1],
            n: sb[1],
            ta: false,
            tb: false,
        };
        self.matmul_impl(a, b, dims, vec![sa[0], sb[1]])
    }

    /// Batched product over rank-3 values `[batch, m, k] × [batch, k, n]`,
    /// optionally reading either side transposed in its last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let dims = MatDims {
            batch: sa[0],
            m,
            k,
            n,
            ta: trans_a,
            tb: trans_b,
        };
        self.matmul_impl(a, b, dims, vec![sa[0], m, n])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, d: MatDims, shape: Vec<usize>) -> Result<Var> {
        let mut out = vec![0.0; d.batch * d.m * d.n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            let (rsa, csa) = a_strides(d);
            let (rsb, csb) = b_strides(d);
            for i in 0..d.batch {
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    &ad[i * d.m * d.k..],
                    (rsa, csa),
                    &bd[i * d.k * d.n..],
                    (rsb, csb),
                    0.0,
                    &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
                    (d.n as isize, 1),
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, dims: d }, needs))
    }

    /// `x·w + b` with `x: [..., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != fan_in {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let fan_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::dim("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            rows,
            fan_in,
            fan_out,
            self.data(x),
            (fan_in as isize, 1),
            self.data(w),
            (fan_out as isize, 1),
            1.0,
            &mut out,
            (fan_out as isize, 1),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = fan_out;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let op = Op::Linear {
            x,
            w,
            b,
            rows,
            fan_in,
            fan_out,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, needs))
    }

    /// Selects rows of `src` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let c = t.last_dim();
        let nrows = t.numel() / c;
        if let Some(&bad) = idx.iter().find(|&&i| i >= nrows) {
            return Err(Error::Input(format!("row index {bad} out of range for {nrows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let needs = self.needs(src);
        let op = Op::GatherRows { src, idx: idx.to_vec() };
        Ok(self.push(Tensor::new(&[idx.len(), c], out)?, op, needs))
    }

    /// Swaps axes 1 and 2 of a rank-4 value.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("permute_0213", &s, &[4]));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute_0213(self.data(x), dims);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[s[0], s[2], s[1], s[3]], out)?,
            Op::Permute0213 { x, dims },
            needs,
        ))
    }

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let scale = 1.0 / temperature;
        let mut out = self.data(x).to_vec();
        let c = self.value(x).last_dim();
        for row in out.chunks_mut(c) {
            softmax_in_place(row, scale);
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, scale }, needs))
    }

    /// Attention softmax over `scores: [batch, heads, q, k]` with padded keys
    /// (`key_mask[b][j] == false`) given exactly zero weight.
    pub fn masked_softmax(&mut self, scores: Var, key_mask: &[bool], scale: f64) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 4 || key_mask.len() != s[0] * s[3] {
            return Err(Error::dim("masked_softmax", &s, &[key_mask.len()]));
        }
        let (heads, q, k) = (s[1], s[2], s[3]);
        let mut out = self.data(scores).to_vec();
        for (r, row) in out.chunks_mut(k).enumerate() {
            let b = r / (heads * q);
            let mask = &key_mask[b * k..(b + 1) * k];
            for (x, &keep) in row.iter_mut().zip(mask) {
                if !keep {
                    *x = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row, scale);
        }
        let needs = self.needs(scores);
        Ok(self.push(Tensor::new(&s, out)?, Op::Softmax { x: scores, scale }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let rows = xs.len() / c;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + bt[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| act_forward(kind, v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Act { x, kind }, needs))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dropout { x, mask }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean cross-entropy of `logits: [N, C]` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let c = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / c;
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Domain(format!("class index {t} >= {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            loss -= log_softmax_at(row, t);
            softmax_in_place(row, 1.0);
        }
        loss /= rows as f64;
        let needs = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Mean over rows of `−Σ tᵢ log softmax(z / T)ᵢ` with constant targets `t`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if self.shape(logits) != target.shape() {
            return Err(Error::dim("soft_cross_entropy", self.shape(logits), target.shape()));
        }
        let c = target.last_dim();
        let rows = target.numel() / c;
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, t) in probs.chunks_mut(c).zip(target.rows()) {
            let logp = log_softmax(row, 1.0 / temperature);
            loss -= t
                .iter()
                .zip(&logp)
                .filter(|(ti, _)| **ti > 0.0)
                .map(|(ti, lp)| ti * lp)
                .sum::<f64>();
            row.iter_mut().zip(&logp).for_each(|(p, lp)| *p = lp.exp());
        }
        loss /= rows as f64;
        let needs = self.needs(logits);
        let op = Op::SoftCrossEntropy {
            logits,
            target: target.data().to_vec(),
            probs,
            temperature,
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Mean binary cross-entropy of probabilities in `(0, 1)`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        if self.value(p).numel() != targets.len() {
            return Err(Error::dim("binary_cross_entropy", self.shape(p), &[targets.len()]));
        }
        if let Some(bad) = self.data(p).iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::Domain(format!("probability {bad} outside (0,1)")));
        }
        let n = targets.len() as f64;
        let loss = self
            .data(p)
            .iter()
            .zip(targets)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / n;
        let needs = self.needs(p);
        let op = Op::Bce {
            p,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Binary cross-entropy taking logits, stable for saturated outputs.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        if self.value(z).numel() != targets.len() {
            return Err(Error::dim("bce_with_logits", self.shape(z), &[targets.len()]));
        }
        let n = targets.len() as f64;
        // max(z,0) − z·y + log(1 + e^{−|z|})
        let loss = self
            .data(z)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let needs = self.needs(z);
        let op = Op::BceWithLogits {
            z,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    pub fn mse(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        if self.value(x).numel() != targets.len() {
            return Err(Error::dim("mse", self.shape(x), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss = self
            .data(x)
            .iter()
            .zip(targets)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let needs = self.needs(x);
        let op = Op::Mse {
            x,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Dispatches on [`LossKind`]. Cross-entropy reads `pred` as logits and
    /// `target` as class indices; the other kinds compare elementwise.
    pub fn loss(&mut self, pred: Var, target: &Tensor, kind: LossKind) -> Result<Var> {
        match kind {
            LossKind::CrossEntropy => {
                let idx = target
                    .data()
                    .iter()
                    .map(|&t| {
                        if t >= 0.0 && t.fract() == 0.0 {
                            Ok(t as usize)
                        } else {
                            Err(Error::Domain(format!("class index {t} is not a whole number")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.cross_entropy(pred, &idx)
            }
            LossKind::BinaryCrossEntropy => {
                self.check_same_numel("binary_cross_entropy", pred, target)?;
                self.binary_cross_entropy(pred, target.data())
            }
            LossKind::Mse => {
                self.check_same_numel("mse", pred, target)?;
                self.mse(pred, target.data())
            }
        }
    }

    fn check_same_numel(&self, op: &'static str, v: Var, t: &Tensor) -> Result<()> {
        if self.value(v).numel() != t.numel() {
            return Err(Error::dim(op, self.shape(v), t.shape()));
        }
        Ok(())
    }

    /// Mean of `1 − cos(aᵢ, bᵢ)` over the listed rows of two `[N, D]` values.
    /// A zero-norm row contributes 1 and bumps [`Tape::zero_norm_rows`].
    pub fn cosine_loss(&mut self, a: Var, b: Var, rows: &[usize]) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("cosine_loss", self.shape(a), self.shape(b)));
        }
        if rows.is_empty() {
            return Err(Error::Contract("cosine_loss over no rows".into()));
        }
        let dim = self.value(a).last_dim();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut total = 0.0;
        let mut zero = 0;
        for &r in rows {
            let (x, y) = (&ad[r * dim..(r + 1) * dim], &bd[r * dim..(r + 1) * dim]);
            match cosine(x, y) {
                Some(c) => total += 1.0 - c,
                None => {
                    total += 1.0;
                    zero += 1;
                }
            }
        }
        self.zero_norm_rows += zero;
        let loss = total / rows.len() as f64;
        let needs = self.needs(a) || self.needs(b);
        let op = Op::Cosine {
            a,
            b,
            rows: rows.to_vec(),
            dim,
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Interior gradients are released once propagated; leaves keep theirs.
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(grads, v, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += w * g));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * b;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * a;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, |d| add_into(d, g));
                let n = self.value(*bias).numel();
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::MatMul { a, b, dims } => {
                let d = *dims;
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (rsa, csa) = a_strides(d);
                let (rsb, csb) = b_strides(d);
                // dA = dC · Bᵀ, written straight into A's storage layout.
                self.acc(grads, *a, |da| {
                    for i in 0..d.batch {
                        gemm(
                            d.m,
                            d.n,
                            d.k,
                            &g[i * d.m * d.n..],
                            (d.n as isize, 1),
                            &bd[i * d.k * d.n..],
                            (csb, rsb),
                            1.0,
                            &mut da[i * d.m * d.k..(i + 1) * d.m * d.k],
                            (rsa, csa),
                        );
                    }
                });
                // dB = Aᵀ · dC
                self.acc(grads, *b, |db| {
                    for i in 0..d.batch {
                        gemm(
                            d.k,
                            d.m,
                            d.n,
                            &ad[i * d.m * d.k..],
                            (csa, rsa),
                            &g[i * d.m * d.n..],
                            (d.n as isize, 1),
                            1.0,
                            &mut db[i * d.k * d.n..(i + 1) * d.k * d.n],
                            (rsb, csb),
                        );
                    }
                });
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                let (rows, fi, fo) = (*rows, *fan_in, *fan_out);
                let (xd, wd) = (self.data(*x), self.data(*w));
                self.acc(grads, *x, |dx| {
                    gemm(
                        rows,
                        fo,
                        fi,
                        g,
                        (fo as isize, 1),
                        wd,
                        (1, fo as isize),
                        1.0,
                        dx,
                        (fi as isize, 1),
                    )
                });
                self.acc(grads, *w, |dw| {
                    gemm(
                        fi,
                        rows,
                        fo,
                        xd,
                        (1, fi as isize),
                        g,
                        (fo as isize, 1),
                        1.0,
                        dw,
                        (fo as isize, 1),
                    )
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for row in g.chunks(fo) {
                            add_into(db, row);
                        }
                    });
                }
            }
            Op::GatherRows { src, idx } => {
                let c = self.value(*src).last_dim();
                self.acc(grads, *src, |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Permute0213 { x, dims } => {
                let [a, b, c, e] = *dims;
                let back = permute_0213(g, [a, c, b, e]);
                self.acc(grads, *x, |d| add_into(d, &back));
            }
            Op::Softmax { x, scale } => {
                let c = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += scale * y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let gm = self.data(*gamma);
                self.acc(grads, *x, |d| {
                    let mut dxhat = vec![0.0; c];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gm[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(hrow).map(|(a, h)| a * h).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[r * c + j] += is * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, g), h) in d.iter_mut().zip(grow).zip(hrow) {
                            *d += g * h;
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
            }
            Op::Act { x, kind } => {
                let xd = self.data(*x);
                self.acc(grads, *x, |d| {
                    for (((d, g), &xv), &yv) in d.iter_mut().zip(g).zip(xd).zip(y) {
                        *d += g * act_derivative(*kind, xv, yv);
                    }
                });
            }
            Op::Dropout { x, mask } => self.acc(grads, *x, |d| {
                for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::SumAll(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).last_dim();
                let s = g[0] / targets.len() as f64;
                self.acc(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
                temperature,
            } => {
                let c = self.value(*logits).last_dim();
                let rows = target.len() / c;
                let s = g[0] / (rows as f64 * temperature);
                self.acc(grads, *logits, |d| {
                    for r in 0..rows {
                        let t = &target[r * c..(r + 1) * c];
                        let mass: f64 = t.iter().sum();
                        for j in 0..c {
                            d[r * c + j] += s * (mass * probs[r * c + j] - t[j]);
                        }
                    }
                });
            }
            Op::Bce { p, targets } => {
                let pd = self.data(*p);
                let n = targets.len() as f64;
                self.acc(grads, *p, |d| {
                    for ((d, &p), &y) in d.iter_mut().zip(pd).zip(targets) {
                        *d += g[0] * (p - y) / (p * (1.0 - p)) / n;
                    }
                });
            }
            Op::BceWithLogits { z, targets } => {
                let zd = self.data(*z);
                let n = targets.len() as f64;
                self.acc(grads, *z, |d| {
                    for ((d, &z), &y) in d.iter_mut().zip(zd).zip(targets) {
                        *d += g[0] * (sigmoid(z) - y) / n;
                    }
                });
            }
            Op::Mse { x, targets } => {
                let xd = self.data(*x);
                let n = targets.len() as f64;
                self.acc(grads, *x, |d| {
                    for ((d, &x), &t) in d.iter_mut().zip(xd).zip(targets) {
                        *d += g[0] * 2.0 * (x - t) / n;
                    }
                });
            }
            Op::Cosine { a, b, rows, dim } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let s = -g[0] / rows.len() as f64;
                let dim = *dim;
                let grad_of = |x: &[f64], y: &[f64], out: &mut [f64]| {
                    // ∂cos/∂y = x/(|x||y|) − cos·y/|y|²
                    let nx = norm(x);
                    let ny = norm(y);
                    if nx == 0.0 || ny == 0.0 {
                        return;
                    }
                    let c = dot(x, y) / (nx * ny);
                    for j in 0..dim {
                        out[j] += s * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                };
                self.acc(grads, *a, |d| {
                    for &r in rows {
                        let span = r * dim..(r + 1) * dim;
                        grad_of(&bd[span.clone()], &ad[span.clone()], &mut d[span]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for &r in rows {
                        let span = r * dim..(r + 1) * dim;
                        grad_of(&ad[span.clone()], &bd[span.clone()], &mut d[span]);
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }
}

fn a_strides(d: MatDims) -> (isize, isize) {
    if d.ta {
        (1, d.m as isize)
    } else {
        (d.k as isize, 1)
    }
}

fn b_strides(d: MatDims) -> (isize, isize) {
    if d.tb {
        (1, d.k as isize)
    } else {
        (d.n as isize, 1)
    }
}

/// `C = A·B + beta·C` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn permute_0213(x: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, `None` when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| dot(a, b) / (na * nb))
}

/// Softmax of `scale·row` in place, max-subtracted. `-inf` entries get 0.
pub fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) * scale).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// `log softmax(scale·row)`.
pub fn log_softmax(row: &[f64], scale: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| ((x - max) * scale).exp()).sum::<f64>().ln();
    row.iter().map(|x| (x - max) * scale - lse).collect()
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[t] - max - lse
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact-erf GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn act_forward(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => gelu(x),
        Activation::LeakyRelu => {
            if x >= 0.0 {
                x
            } else {
                LEAKY_RELU_SLOPE * x
            }
        }
        Activation::Sigmoid => sigmoid(x),
        Activation::Tanh => x.tanh(),
    }
}

fn act_derivative(kind: Activation, x: f64, y: f64) -> f64 {
    match kind {
        Activation::Gelu => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        Activation::LeakyRelu => {
            if x >= 0.0 {
                1.0
            } else {
                LEAKY_RELU_SLOPE
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Tanh => 1.0 - y * y,
    }
}
