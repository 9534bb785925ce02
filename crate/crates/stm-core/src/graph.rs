//! Reverse-mode differentiation over tensor-level operations.
//!
//! A [`Graph`] records every forward operation as a node; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients. Operations treat a
//! tensor as `rows x cols` (last extent = cols). Distribution terms used by
//! the losses are fused row-reducing nodes with hand-derived adjoints; the
//! test suite checks each against central finite differences.

use crate::error::{Result, StmError};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside every log
/// term so losses stay finite for saturated predictions.
pub const PROB_EPS: f64 = 1e-6;

pub const LN_2PIE: f64 = 2.837877066409345; // ln(2*pi*e)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative given the input `x` and the already-computed output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// Tracked leaf bound to parameter `index` of the set registered as `set`.
    Param { set: usize, index: usize },
    MatMul { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddScalar { a: NodeId },
    Scale { a: NodeId, c: f64 },
    Act { a: NodeId, kind: Activation },
    Dropout { a: NodeId, scale: f64, mask: Vec<f64> },
    Concat { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    SoftmaxRows { a: NodeId },
    BernoulliLlRows { probs: NodeId, target: Tensor },
    BernoulliEntropyRows { probs: NodeId },
    GaussianKlRows { mu_q: NodeId, sigma_q: NodeId, mu_p: NodeId, sigma_p: NodeId },
    GaussianEntropyRows { sigma: NodeId },
    CategoricalKlRows { q: NodeId, p: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Create one per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(NodeId, usize, usize)>,
    track: bool,
}

impl Graph {
    /// Graph that records parameter leaves for a later backward pass.
    pub fn training() -> Self {
        Self {
            nodes: Vec::with_capacity(64),
            grads: Vec::new(),
            params: Vec::new(),
            track: true,
        }
    }

    /// Forward-only graph; `param` nodes degrade to plain leaves.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::with_capacity(64),
            grads: Vec::new(),
            params: Vec::new(),
            track: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward target w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients stop here.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. `set` tags which `ParamSet` the caller will pass to
    /// gradient accumulation, `index` is the parameter slot inside it.
    pub fn param(&mut self, set: usize, index: usize, value: &Tensor) -> NodeId {
        if self.track {
            let id = self.push(value.clone(), Op::Param { set, index });
            self.params.push((id, set, index));
            id
        } else {
            self.leaf(value.clone())
        }
    }

    /// `a [.., k] @ b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, k) = (av.rows(), av.cols());
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be rank 2");
        assert_eq!(bv.shape()[0], k, "matmul inner extents differ");
        let n = bv.shape()[1];
        let mut out = vec![0.0; ra * n];
        matmul_into(av.data(), ra, k, bv.data(), n, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(shape, out).expect("matmul shape");
        self.push(value, Op::MatMul { a, b })
    }

    /// Adds a `[c]` bias to every row of a `[.., c]` tensor.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let c = av.cols();
        assert_eq!(bv.len(), c, "bias width differs from input cols");
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::from_vec(av.shape().to_vec(), data).unwrap();
        self.push(value, Op::AddRow { a, bias })
    }

    fn zip_elementwise(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes differ");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(av.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip_elementwise(a, b, |x, y| x + y);
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip_elementwise(a, b, |x, y| x - y);
        self.push(value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.zip_elementwise(a, b, |x, y| x * y);
        self.push(value, Op::Mul { a, b })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x + c).collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data).unwrap();
        self.push(value, Op::AddScalar { a })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x * c).collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data).unwrap();
        self.push(value, Op::Scale { a, c })
    }

    pub fn activate(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| kind.apply(x)).collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data).unwrap();
        self.push(value, Op::Act { a, kind })
    }

    /// Inverted dropout with an explicit 0/1 mask; survivors are scaled by
    /// `1/(1-rate)`. The mask length must match the input.
    pub fn dropout_masked(&mut self, a: NodeId, rate: f64, mask: Vec<f64>) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(mask.len(), av.len(), "dropout mask length");
        assert!(rate < 1.0, "dropout rate must be < 1");
        let scale = 1.0 / (1.0 - rate);
        let data = av
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m * scale)
            .collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data).unwrap();
        self.push(value, Op::Dropout { a, scale, mask })
    }

    /// Concatenation along the last extent.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, ca) = (av.rows(), av.cols());
        let (rb, cb) = (bv.rows(), bv.cols());
        assert_eq!(ra, rb, "concat row counts differ");
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::from_vec(shape, data).unwrap();
        self.push(value, Op::Concat { a, b })
    }

    /// Column slice `[.., start..start+len]` of the last extent.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        assert!(start + len <= c, "slice out of range");
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&av.data()[row * c + start..row * c + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(shape, data).unwrap();
        self.push(value, Op::SliceCols { a, start })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll { a })
    }

    /// Row-wise softmax over the last extent.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let x = &av.data()[row * c..(row + 1) * c];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &xi) in data[row * c..(row + 1) * c].iter_mut().zip(x) {
                *o = (xi - m).exp();
                z += *o;
            }
            for o in &mut data[row * c..(row + 1) * c] {
                *o /= z;
            }
        }
        let value = Tensor::from_vec(av.shape().to_vec(), data).unwrap();
        self.push(value, Op::SoftmaxRows { a })
    }

    /// Per-row Bernoulli log-likelihood of `target` under `probs`:
    /// `sum_i t_i ln p_i + (1 - t_i) ln (1 - p_i)` with probability clamping.
    pub fn bernoulli_ll_rows(&mut self, probs: NodeId, target: Tensor) -> NodeId {
        let pv = &self.nodes[probs.0].value;
        assert_eq!(pv.shape(), target.shape(), "target shape differs");
        let (r, c) = (pv.rows(), pv.cols());
        let mut out = vec![0.0; r];
        for row in 0..r {
            let mut acc = 0.0;
            for i in row * c..(row + 1) * c {
                let p = clamp_prob(pv.data()[i]);
                let t = target.data()[i];
                acc += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
            out[row] = acc;
        }
        let value = Tensor::from_vec(vec![r], out).unwrap();
        self.push(value, Op::BernoulliLlRows { probs, target })
    }

    /// Per-row sum of Bernoulli entropies in nats.
    pub fn bernoulli_entropy_rows(&mut self, probs: NodeId) -> NodeId {
        let pv = &self.nodes[probs.0].value;
        let (r, c) = (pv.rows(), pv.cols());
        let mut out = vec![0.0; r];
        for row in 0..r {
            let mut acc = 0.0;
            for i in row * c..(row + 1) * c {
                let p = clamp_prob(pv.data()[i]);
                acc -= p * p.ln() + (1.0 - p) * (1.0 - p).ln();
            }
            out[row] = acc;
        }
        let value = Tensor::from_vec(vec![r], out).unwrap();
        self.push(value, Op::BernoulliEntropyRows { probs })
    }

    /// Per-row KL between diagonal Gaussians,
    /// `sum_i ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2`.
    pub fn gaussian_kl_rows(
        &mut self,
        mu_q: NodeId,
        sigma_q: NodeId,
        mu_p: NodeId,
        sigma_p: NodeId,
    ) -> NodeId {
        let shape = self.nodes[mu_q.0].value.shape().to_vec();
        for id in [sigma_q, mu_p, sigma_p] {
            assert_eq!(self.nodes[id.0].value.shape(), &shape[..], "kl shapes differ");
        }
        let (r, c) = (self.nodes[mu_q.0].value.rows(), self.nodes[mu_q.0].value.cols());
        let (mq, sq, mp, sp) = (
            self.nodes[mu_q.0].value.data(),
            self.nodes[sigma_q.0].value.data(),
            self.nodes[mu_p.0].value.data(),
            self.nodes[sigma_p.0].value.data(),
        );
        let mut out = vec![0.0; r];
        for row in 0..r {
            let mut acc = 0.0;
            for i in row * c..(row + 1) * c {
                debug_assert!(sq[i] > 0.0 && sp[i] > 0.0, "non-positive sigma in kl");
                let d = mq[i] - mp[i];
                acc += (sp[i] / sq[i]).ln() + (sq[i] * sq[i] + d * d) / (2.0 * sp[i] * sp[i]) - 0.5;
            }
            out[row] = acc;
        }
        let value = Tensor::from_vec(vec![r], out).unwrap();
        self.push(
            value,
            Op::GaussianKlRows { mu_q, sigma_q, mu_p, sigma_p },
        )
    }

    /// Per-row diagonal-Gaussian entropy, `sum_i (ln(2 pi e)/2 + ln s_i)`.
    pub fn gaussian_entropy_rows(&mut self, sigma: NodeId) -> NodeId {
        let sv = &self.nodes[sigma.0].value;
        let (r, c) = (sv.rows(), sv.cols());
        let mut out = vec![0.0; r];
        for row in 0..r {
            let mut acc = 0.0;
            for i in row * c..(row + 1) * c {
                debug_assert!(sv.data()[i] > 0.0, "non-positive sigma in entropy");
                acc += 0.5 * LN_2PIE + sv.data()[i].ln();
            }
            out[row] = acc;
        }
        let value = Tensor::from_vec(vec![r], out).unwrap();
        self.push(value, Op::GaussianEntropyRows { sigma })
    }

    /// Per-row categorical KL `sum_i q_i ln(q_i / p_i)` (0 ln 0 = 0).
    pub fn categorical_kl_rows(&mut self, q: NodeId, p: NodeId) -> NodeId {
        let (qv, pv) = (&self.nodes[q.0].value, &self.nodes[p.0].value);
        assert_eq!(qv.shape(), pv.shape(), "categorical shapes differ");
        let (r, c) = (qv.rows(), qv.cols());
        let mut out = vec![0.0; r];
        for row in 0..r {
            let mut acc = 0.0;
            for i in row * c..(row + 1) * c {
                let qi = qv.data()[i];
                if qi > 0.0 {
                    acc += qi * (qi.max(PROB_EPS).ln() - pv.data()[i].max(PROB_EPS).ln());
                }
            }
            out[row] = acc;
        }
        let value = Tensor::from_vec(vec![r], out).unwrap();
        self.push(value, Op::CategoricalKlRows { q, p })
    }

    /// Scalar conveniences over the row-reducing distribution ops.
    pub fn bernoulli_ll(&mut self, probs: NodeId, target: Tensor) -> NodeId {
        let rows = self.bernoulli_ll_rows(probs, target);
        self.sum_all(rows)
    }

    pub fn gaussian_kl(
        &mut self,
        mu_q: NodeId,
        sigma_q: NodeId,
        mu_p: NodeId,
        sigma_p: NodeId,
    ) -> NodeId {
        let rows = self.gaussian_kl_rows(mu_q, sigma_q, mu_p, sigma_p);
        self.sum_all(rows)
    }

    pub fn categorical_kl(&mut self, q: NodeId, p: NodeId) -> NodeId {
        let rows = self.categorical_kl_rows(q, p);
        self.sum_all(rows)
    }

    /// Propagates `d loss / d node` for every node reachable from `loss`,
    /// which must be a `[1]` tensor. Returns the tracked parameter leaves as
    /// `(set tag, parameter index, gradient)` triples.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<(usize, usize, Tensor)>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(StmError::Usage(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match &self.grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            // Split borrows: everything below idx is an input to node idx.
            let (before, rest) = self.nodes.split_at(idx);
            let node = &rest[0];
            let value = |id: NodeId| -> &Tensor { &before[id.0].value };
            let mut adds: Vec<(usize, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf | Op::Param { .. } => {}
                Op::MatMul { a, b } => {
                    let (av, bv) = (value(*a), value(*b));
                    let (ra, k) = (av.rows(), av.cols());
                    let n = bv.shape()[1];
                    let mut da = vec![0.0; ra * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..ra {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += grow[j] * brow[j];
                            }
                            da[i * k + p] = dot;
                            let aip = av.data()[i * k + p];
                            if aip != 0.0 {
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    dbrow[j] += aip * grow[j];
                                }
                            }
                        }
                    }
                    adds.push((a.0, da));
                    adds.push((b.0, db));
                }
                Op::AddRow { a, bias } => {
                    let c = value(*bias).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                    adds.push((a.0, g.clone()));
                    adds.push((bias.0, db));
                }
                Op::Add { a, b } => {
                    adds.push((a.0, g.clone()));
                    adds.push((b.0, g.clone()));
                }
                Op::Sub { a, b } => {
                    adds.push((a.0, g.clone()));
                    adds.push((b.0, g.iter().map(|x| -x).collect()));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (value(*a).data(), value(*b).data());
                    adds.push((a.0, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
                    adds.push((b.0, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
                }
                Op::AddScalar { a } => adds.push((a.0, g.clone())),
                Op::Scale { a, c } => {
                    adds.push((a.0, g.iter().map(|gi| gi * c).collect()));
                }
                Op::Act { a, kind } => {
                    let xin = value(*a).data();
                    let yout = node.value.data();
                    let da = g
                        .iter()
                        .zip(xin.iter().zip(yout))
                        .map(|(&gi, (&x, &y))| gi * kind.derivative(x, y))
                        .collect();
                    adds.push((a.0, da));
                }
                Op::Dropout { a, scale, mask } => {
                    let da = g
                        .iter()
                        .zip(mask)
                        .map(|(&gi, &m)| gi * m * scale)
                        .collect();
                    adds.push((a.0, da));
                }
                Op::Concat { a, b } => {
                    let (ca, cb) = (value(*a).cols(), value(*b).cols());
                    let rows = value(*a).rows();
                    let mut da = vec![0.0; rows * ca];
                    let mut db = vec![0.0; rows * cb];
                    for r in 0..rows {
                        let grow = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                        da[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                        db[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                    }
                    adds.push((a.0, da));
                    adds.push((b.0, db));
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = (value(*a).rows(), value(*a).cols());
                    let len = node.value.cols();
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        da[row * c + start..row * c + start + len]
                            .copy_from_slice(&g[row * len..(row + 1) * len]);
                    }
                    adds.push((a.0, da));
                }
                Op::SumAll { a } => {
                    adds.push((a.0, vec![g[0]; value(*a).len()]));
                }
                Op::MeanAll { a } => {
                    let n = value(*a).len();
                    adds.push((a.0, vec![g[0] / n as f64; n]));
                }
                Op::SoftmaxRows { a } => {
                    let y = node.value.data();
                    let (r, c) = (value(*a).rows(), value(*a).cols());
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                        for i in 0..c {
                            da[row * c + i] = ys[i] * (gs[i] - dot);
                        }
                    }
                    adds.push((a.0, da));
                }
                Op::BernoulliLlRows { probs, target } => {
                    let pv = value(*probs);
                    let (r, c) = (pv.rows(), pv.cols());
                    let mut dp = vec![0.0; r * c];
                    for row in 0..r {
                        let gr = g[row];
                        for i in row * c..(row + 1) * c {
                            let praw = pv.data()[i];
                            if inside_clamp(praw) {
                                let t = target.data()[i];
                                dp[i] = gr * (t / praw - (1.0 - t) / (1.0 - praw));
                            }
                        }
                    }
                    adds.push((probs.0, dp));
                }
                Op::BernoulliEntropyRows { probs } => {
                    let pv = value(*probs);
                    let (r, c) = (pv.rows(), pv.cols());
                    let mut dp = vec![0.0; r * c];
                    for row in 0..r {
                        let gr = g[row];
                        for i in row * c..(row + 1) * c {
                            let praw = pv.data()[i];
                            if inside_clamp(praw) {
                                dp[i] = gr * ((1.0 - praw).ln() - praw.ln());
                            }
                        }
                    }
                    adds.push((probs.0, dp));
                }
                Op::GaussianKlRows { mu_q, sigma_q, mu_p, sigma_p } => {
                    let (mq, sq, mp, sp) = (
                        value(*mu_q).data(),
                        value(*sigma_q).data(),
                        value(*mu_p).data(),
                        value(*sigma_p).data(),
                    );
                    let (r, c) = (value(*mu_q).rows(), value(*mu_q).cols());
                    let mut dmq = vec![0.0; r * c];
                    let mut dsq = vec![0.0; r * c];
                    let mut dmp = vec![0.0; r * c];
                    let mut dsp = vec![0.0; r * c];
                    for row in 0..r {
                        let gr = g[row];
                        for i in row * c..(row + 1) * c {
                            let d = mq[i] - mp[i];
                            let sp2 = sp[i] * sp[i];
                            dmq[i] = gr * d / sp2;
                            dmp[i] = -gr * d / sp2;
                            dsq[i] = gr * (sq[i] / sp2 - 1.0 / sq[i]);
                            dsp[i] = gr * (1.0 / sp[i] - (sq[i] * sq[i] + d * d) / (sp2 * sp[i]));
                        }
                    }
                    adds.push((mu_q.0, dmq));
                    adds.push((sigma_q.0, dsq));
                    adds.push((mu_p.0, dmp));
                    adds.push((sigma_p.0, dsp));
                }
                Op::GaussianEntropyRows { sigma } => {
                    let sv = value(*sigma);
                    let (r, c) = (sv.rows(), sv.cols());
                    let mut ds = vec![0.0; r * c];
                    for row in 0..r {
                        let gr = g[row];
                        for i in row * c..(row + 1) * c {
                            ds[i] = gr / sv.data()[i];
                        }
                    }
                    adds.push((sigma.0, ds));
                }
                Op::CategoricalKlRows { q, p } => {
                    let (qv, pv) = (value(*q), value(*p));
                    let (r, c) = (qv.rows(), qv.cols());
                    let mut dq = vec![0.0; r * c];
                    let mut dp = vec![0.0; r * c];
                    for row in 0..r {
                        let gr = g[row];
                        for i in row * c..(row + 1) * c {
                            let qi = qv.data()[i];
                            let pc = pv.data()[i].max(PROB_EPS);
                            if qi > 0.0 {
                                dq[i] = gr * ((qi.max(PROB_EPS)).ln() - pc.ln() + 1.0);
                                dp[i] = -gr * qi / pc;
                            }
                        }
                    }
                    adds.push((q.0, dq));
                    adds.push((p.0, dp));
                }
            }
            drop(node);
            for (target, delta) in adds {
                match &mut self.grads[target] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }

        let mut out = Vec::with_capacity(self.params.len());
        for &(node, set, index) in &self.params {
            if let Some(g) = &self.grads[node.0] {
                let shape = self.nodes[node.0].value.shape().to_vec();
                out.push((set, index, Tensor::from_vec(shape, g.clone()).unwrap()));
            }
        }
        Ok(out)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn inside_clamp(p: f64) -> bool {
    (PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

fn matmul_into(a: &[f64], ra: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..ra {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(leaf) for a scalar-valued build.
    fn fd_check(build: impl Fn(&mut Graph, &Tensor) -> NodeId, x0: Tensor) {
        let mut g = Graph::training();
        let leaf = g.param(0, 0, &x0);
        let loss = build(&mut g, &x0);
        let _ = loss;
        let grads = g.backward(loss).unwrap();
        let analytic = &grads[0].2;
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let f = |t: &Tensor| {
                let mut gg = Graph::inference();
                let l = gg.leaf(t.clone());
                // rebuild with the perturbed leaf standing in for the param
                let out = rebuild(&mut gg, l);
                gg.value(out).item()
            };
            // The closure trick below: tests instead use dedicated builders.
            let _ = (f, &plus, &minus, leaf, analytic);
            unreachable!("fd_check is replaced by builder-specific tests");
        }
    }

    // fd_check above is intentionally unused; builder-specific closures below
    // keep the perturbed forward pass and the taped pass visibly identical.
    #[allow(dead_code)]
    fn rebuild(_g: &mut Graph, id: NodeId) -> NodeId {
        id
    }

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x0: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x0.len())
            .map(|i| {
                let mut p = x0.to_vec();
                p[i] += h;
                let fp = f(&p);
                p[i] -= 2.0 * h;
                let fm = f(&p);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-3);
            assert!(rel < 1e-4, "grad[{i}]: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    #[test]
    fn matmul_bias_activation_grads_match_fd() {
        let x0: Vec<f64> = vec![0.3, -0.7, 1.2, 0.5, -0.1, 0.9]; // [2,3] input
        let w0: Vec<f64> = vec![0.2, -0.4, 0.8, 0.1, -0.6, 0.5]; // [3,2]
        let b0: Vec<f64> = vec![0.05, -0.3];

        let loss_of = |w: &[f64]| {
            let mut g = Graph::inference();
            let x = g.leaf(Tensor::from_vec(vec![2, 3], x0.clone()).unwrap());
            let wn = g.leaf(Tensor::from_vec(vec![3, 2], w.to_vec()).unwrap());
            let bn = g.leaf(Tensor::vector(&b0));
            let h = g.matmul(x, wn);
            let hb = g.add_row(h, bn);
            let y = g.activate(hb, Activation::Tanh);
            let s = g.sum_all(y);
            g.value(s).item()
        };
        let numeric = numeric_grad(loss_of, &w0);

        let mut g = Graph::training();
        let x = g.leaf(Tensor::from_vec(vec![2, 3], x0.clone()).unwrap());
        let wn = g.param(0, 0, &Tensor::from_vec(vec![3, 2], w0.clone()).unwrap());
        let bn = g.leaf(Tensor::vector(&b0));
        let h = g.matmul(x, wn);
        let hb = g.add_row(h, bn);
        let y = g.activate(hb, Activation::Tanh);
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_close(grads[0].2.data(), &numeric);
    }

    #[test]
    fn square_loss_gradient_is_two_x() {
        // loss = w^2 at w = 3 -> dloss/dw = 6
        let mut g = Graph::training();
        let w = g.param(0, 0, &Tensor::scalar(3.0));
        let sq = g.mul(w, w);
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads[0].2.data(), &[6.0]);
    }

    #[test]
    fn unused_param_gets_no_gradient() {
        let mut g = Graph::training();
        let w = g.param(0, 0, &Tensor::scalar(3.0));
        let u = g.param(0, 1, &Tensor::scalar(5.0));
        let _ = u;
        let sq = g.mul(w, w);
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.len(), 1, "only the used parameter appears");
        assert_eq!(grads[0].1, 0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::training();
        let w = g.param(0, 0, &Tensor::vector(&[1.0, 2.0]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn gaussian_kl_rows_grads_match_fd() {
        let mq = vec![0.2, -0.5, 1.0];
        let sq = vec![0.8, 1.3, 0.6];
        let mp = vec![-0.1, 0.4, 0.9];
        let sp = vec![1.1, 0.7, 1.4];
        // gradient w.r.t. every argument, packed [mq sq mp sp]
        let packed: Vec<f64> = [mq.clone(), sq.clone(), mp.clone(), sp.clone()].concat();
        let loss_of = |x: &[f64]| {
            let mut g = Graph::inference();
            let a = g.leaf(Tensor::vector(&x[0..3]));
            let b = g.leaf(Tensor::vector(&x[3..6]));
            let c = g.leaf(Tensor::vector(&x[6..9]));
            let d = g.leaf(Tensor::vector(&x[9..12]));
            let kl = g.gaussian_kl(a, b, c, d);
            g.value(kl).item()
        };
        let numeric = numeric_grad(loss_of, &packed);

        let mut g = Graph::training();
        let a = g.param(0, 0, &Tensor::vector(&mq));
        let b = g.param(0, 1, &Tensor::vector(&sq));
        let c = g.param(0, 2, &Tensor::vector(&mp));
        let d = g.param(0, 3, &Tensor::vector(&sp));
        let kl = g.gaussian_kl(a, b, c, d);
        let grads = g.backward(kl).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn bernoulli_and_entropy_grads_match_fd() {
        let p0 = vec![0.2, 0.55, 0.9, 0.35];
        let t = Tensor::vector(&[1.0, 0.0, 1.0, 0.0]);

        let ll_of = |p: &[f64]| {
            let mut g = Graph::inference();
            let pn = g.leaf(Tensor::vector(p));
            let ll = g.bernoulli_ll(pn, Tensor::vector(&[1.0, 0.0, 1.0, 0.0]));
            g.value(ll).item()
        };
        let numeric = numeric_grad(ll_of, &p0);
        let mut g = Graph::training();
        let pn = g.param(0, 0, &Tensor::vector(&p0));
        let ll = g.bernoulli_ll(pn, t);
        let grads = g.backward(ll).unwrap();
        assert_close(grads[0].2.data(), &numeric);

        let ent_of = |p: &[f64]| {
            let mut g = Graph::inference();
            let pn = g.leaf(Tensor::vector(p));
            let rows = g.bernoulli_entropy_rows(pn);
            let s = g.sum_all(rows);
            g.value(s).item()
        };
        let numeric = numeric_grad(ent_of, &p0);
        let mut g = Graph::training();
        let pn = g.param(0, 0, &Tensor::vector(&p0));
        let rows = g.bernoulli_entropy_rows(pn);
        let s = g.sum_all(rows);
        let grads = g.backward(s).unwrap();
        assert_close(grads[0].2.data(), &numeric);
    }

    #[test]
    fn softmax_and_categorical_kl_grads_match_fd() {
        let logits = vec![0.4, -0.2, 0.9];
        let target = [0.5, 0.3, 0.2];
        let loss_of = |x: &[f64]| {
            let mut g = Graph::inference();
            let l = g.leaf(Tensor::row(x));
            let q = g.softmax_rows(l);
            let p = g.leaf(Tensor::row(&target));
            let kl = g.categorical_kl(q, p);
            g.value(kl).item()
        };
        let numeric = numeric_grad(loss_of, &logits);

        let mut g = Graph::training();
        let l = g.param(0, 0, &Tensor::row(&logits));
        let q = g.softmax_rows(l);
        let p = g.leaf(Tensor::row(&target));
        let kl = g.categorical_kl(q, p);
        let grads = g.backward(kl).unwrap();
        assert_close(grads[0].2.data(), &numeric);
    }

    #[test]
    fn concat_slice_dropout_roundtrip_grads() {
        let x0 = vec![0.3, -0.4, 0.7, 0.2];
        let mask = vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        let loss_of = |x: &[f64]| {
            let mut g = Graph::inference();
            let a = g.leaf(Tensor::row(&x[..2]));
            let b = g.leaf(Tensor::row(&x[2..]));
            let cat = g.concat(a, b);
            let doubled = g.concat(cat, cat);
            let dropped = g.dropout_masked(doubled, 0.25, mask.clone());
            let s = g.slice_cols(dropped, 1, 6);
            let m = g.mean_all(s);
            g.value(m).item()
        };
        let numeric = numeric_grad(loss_of, &x0);

        let mut g = Graph::training();
        let a = g.param(0, 0, &Tensor::row(&x0[..2]));
        let b = g.param(0, 1, &Tensor::row(&x0[2..]));
        let cat = g.concat(a, b);
        let doubled = g.concat(cat, cat);
        let dropped = g.dropout_masked(doubled, 0.25, mask);
        let s = g.slice_cols(dropped, 1, 6);
        let m = g.mean_all(s);
        let grads = g.backward(m).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::inference();
        let w = g.param(0, 0, &Tensor::scalar(2.0));
        let y = g.mul(w, w);
        let grads = g.backward(y).unwrap();
        assert!(grads.is_empty());
    }
}
