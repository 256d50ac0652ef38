//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Graph::backward`] walks the tape in exact
//! reverse order, so a node's gradient is complete before it is propagated.

use super::kernels::{self, ConvGeom, PoolKind};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Identity(Var),
    Zero(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        k: usize,
        argmax: Vec<u32>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum {
        terms: Vec<(Var, usize)>,
        weights: Var,
    },
    Softmax(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Triplet {
        anchor: Var,
        positive: Var,
        negative: Var,
        active: Vec<bool>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Same as [`Graph::grad`] but returns zeros when nothing flowed.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        let shape = self.value(v).shape();
        match self.grad(v) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("grad has value shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn identity(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, Op::Identity(x), rg)
    }

    pub fn zero(&mut self, x: Var) -> Var {
        let value = Tensor::zeros(self.value(x).shape());
        let rg = self.rg(x);
        self.push(value, Op::Zero(x), rg)
    }

    /// Stride-1 "same" convolution without bias. `kernel` is
    /// `[C_out, C_in, k_h, k_w]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let [n, c_in, h, w] = self.value(input).shape();
        let [c_out, kc_in, kh, kw] = self.value(kernel).shape();
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Contract("conv2d dilation must be >= 1".into()));
        }
        let geom = ConvGeom {
            n,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            dilation,
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), geom);
        let value = Tensor::from_vec([n, c_out, h, w], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    pub fn pool2d(&mut self, input: Var, kind: PoolKind, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::Contract("pool window must be >= 1".into()));
        }
        let shape = self.value(input).shape();
        let [n, c, h, w] = shape;
        let (out, argmax) =
            kernels::pool2d_forward(self.value(input).data(), n * c, h, w, k, kind);
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::Pool {
                input,
                kind,
                k,
                argmax,
            },
            rg,
        ))
    }

    fn check_channel_param(&self, input: Var, p: Var, what: &str) -> Result<()> {
        let c = self.value(input).shape()[1];
        if self.value(p).len() != c {
            return Err(Error::Shape(format!(
                "batchnorm {what} has {} entries, input has {c} channels",
                self.value(p).len()
            )));
        }
        Ok(())
    }

    /// Training-mode batch norm over (N, H, W). Returns the output and the
    /// batch statistics it used.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        self.check_channel_param(input, gamma, "gamma")?;
        self.check_channel_param(input, beta, "beta")?;
        let shape = self.value(input).shape();
        let [n, c, h, w] = shape;
        let plane = h * w;
        let x = self.value(input).data();
        let (mean, var) = kernels::channel_moments(x, n, c, plane);
        let eps_t = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|v| (*v + eps_t).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let stats = BatchStats {
            mean: mean.iter().map(|v| v.as_f64()).collect(),
            var: var.iter().map(|v| v.as_f64()).collect(),
        };
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.check_channel_param(input, gamma, "gamma")?;
        self.check_channel_param(input, beta, "beta")?;
        let shape = self.value(input).shape();
        let [n, c, h, w] = shape;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("batchnorm running statistics length".into()));
        }
        let plane = h * w;
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
            .collect();
        let mean: Vec<T> = running_mean.iter().map(|m| T::from_f64_lossy(*m)).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.max(T::zero())).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, what: &str) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_map(a, b, |x, y| x + y, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_map(a, b, |x, y| x - y, "sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_map(a, b, |x, y| x * y, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| *v * factor).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| *v + c).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| *v * *v).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64_lossy(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// `Σ_k weights[idx_k] · x_k` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, usize)], weights: Var) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Contract("weighted_sum needs at least one term".into()));
        };
        let shape = self.value(first).shape();
        let w = self.value(weights).data();
        let mut out = vec![T::zero(); self.value(first).len()];
        for &(v, idx) in terms {
            let t = self.value(v);
            if t.shape() != shape {
                return Err(Error::Shape("weighted_sum terms differ in shape".into()));
            }
            let wk = *w
                .get(idx)
                .ok_or_else(|| Error::Shape(format!("weight index {idx} out of range")))?;
            for (o, x) in out.iter_mut().zip(t.data()) {
                *o += wk * *x;
            }
        }
        let rg = self.rg(weights) || terms.iter().any(|(v, _)| self.rg(*v));
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(
            value,
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Softmax over every element of `x` treated as one vector.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let values = softmax_values(src.data());
        let value = Tensor::from_vec(src.shape(), values).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let plane = h * w;
        let denom = T::from_f64_lossy(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::from_vec([n, c, 1, 1], data).expect("pooled shape");
        let rg = self.rg(x);
        self.push(value, Op::GlobalAvgPool(x), rg)
    }

    /// Affine map on flattened samples. `weight` is `[out, in, 1, 1]`,
    /// `bias` has `out` entries; the output is `[N, out, 1, 1]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape()[0];
        let fan_in = x.sample_len();
        let out = self.value(weight).shape()[0];
        if self.value(weight).len() != out * fan_in {
            return Err(Error::Shape(format!(
                "linear weight {:?} does not accept {fan_in} inputs",
                self.value(weight).shape()
            )));
        }
        if self.value(bias).len() != out {
            return Err(Error::Shape(format!(
                "linear bias has {} entries, expected {out}",
                self.value(bias).len()
            )));
        }
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut data = vec![T::zero(); n * out];
        for s in 0..n {
            let xs = &x.data()[s * fan_in..][..fan_in];
            for o in 0..out {
                let row = &wd[o * fan_in..][..fan_in];
                let dot: T = row.iter().zip(xs).map(|(a, b)| *a * *b).sum();
                data[s * out + o] = dot + bd[o];
            }
        }
        let value = Tensor::from_vec([n, out, 1, 1], data)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let n = t.shape()[0];
        let k = t.sample_len();
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (s, &label) in labels.iter().enumerate() {
            let row = &t.data()[s * k..][..k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
            total += (lse - row[label]).as_f64();
            probs.extend(row.iter().map(|v| (*v - lse).exp()));
        }
        let loss = T::from_f64_lossy(total / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over the batch of `max(0, |a−p|² − |a−n|² + margin)`.
    pub fn triplet_loss(
        &mut self,
        anchor: Var,
        positive: Var,
        negative: Var,
        margin: f64,
    ) -> Result<Var> {
        let (a, p, ng) = (self.value(anchor), self.value(positive), self.value(negative));
        if a.shape() != p.shape() || a.shape() != ng.shape() {
            return Err(Error::Shape(format!(
                "triplet embeddings differ: {:?} {:?} {:?}",
                a.shape(),
                p.shape(),
                ng.shape()
            )));
        }
        if margin <= 0.0 {
            return Err(Error::Contract("triplet margin must be positive".into()));
        }
        let n = a.shape()[0];
        let d = a.sample_len();
        let mut active = Vec::with_capacity(n);
        let mut total = 0.0f64;
        for s in 0..n {
            let (ar, pr, nr) = (
                &a.data()[s * d..][..d],
                &p.data()[s * d..][..d],
                &ng.data()[s * d..][..d],
            );
            let dap: f64 = ar.iter().zip(pr).map(|(x, y)| (*x - *y).as_f64().powi(2)).sum();
            let dan: f64 = ar.iter().zip(nr).map(|(x, y)| (*x - *y).as_f64().powi(2)).sum();
            let l = dap - dan + margin;
            active.push(l > 0.0);
            total += l.max(0.0);
        }
        let loss = T::from_f64_lossy(total / n as f64);
        let rg = self.rg(anchor) || self.rg(positive) || self.rg(negative);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Triplet {
                anchor,
                positive,
                negative,
                active,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Back-propagates from a scalar `loss`, replacing any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[T]) -> Result<()> {
        // Contributions are computed while `self.nodes` is borrowed immutably,
        // then accumulated.
        let mut pending: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Identity(x) => pending.push((*x, g.to_vec())),
            Op::Zero(x) => pending.push((*x, vec![T::zero(); g.len()])),
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (gi, gk) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    *geom,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(gi) = gi {
                    pending.push((*input, gi));
                }
                if let Some(gk) = gk {
                    pending.push((*kernel, gk));
                }
            }
            Op::Pool {
                input,
                kind,
                k,
                argmax,
            } => {
                let [n, c, h, w] = node.value.shape();
                let gi = kernels::pool2d_backward(g, argmax, n * c, h, w, *k, *kind);
                pending.push((*input, gi));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = node.value.shape();
                let plane = h * w;
                let m = T::from_f64_lossy((n * plane) as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        // Σ dxhat = γ Σ g, Σ dxhat·xhat = γ Σ g·xhat
                        let sum_dxhat = gam[ch] * dbeta[ch];
                        let sum_dxhat_xhat = gam[ch] * dgamma[ch];
                        let k = inv_std[ch] / m;
                        for b in 0..n {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                let dxhat = g[i] * gam[ch];
                                dx[i] = k * (m * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                            }
                        }
                    }
                    pending.push((*input, dx));
                }
                pending.push((*gamma, dgamma));
                pending.push((*beta, dbeta));
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = node.value.shape();
                let plane = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                            dx[i] = g[i] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                pending.push((*input, dx));
                pending.push((*gamma, dgamma));
                pending.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, xi)| if *xi > T::zero() { *gi } else { T::zero() })
                    .collect();
                pending.push((*x, d));
            }
            Op::Add(a, b) => {
                pending.push((*a, g.to_vec()));
                pending.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.to_vec()));
                pending.push((*b, g.iter().map(|v| -*v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                pending.push((*a, g.iter().zip(bv).map(|(gi, y)| *gi * *y).collect()));
                pending.push((*b, g.iter().zip(av).map(|(gi, x)| *gi * *x).collect()));
            }
            Op::Scale(x, f) => pending.push((*x, g.iter().map(|v| *v * *f).collect())),
            Op::AddScalar(x) => pending.push((*x, g.to_vec())),
            Op::Square(x) => {
                let two = T::from_f64_lossy(2.0);
                let xv = self.value(*x).data();
                pending.push((*x, g.iter().zip(xv).map(|(gi, v)| two * *gi * *v).collect()));
            }
            Op::Sum(x) => pending.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let share = g[0] / T::from_f64_lossy(len as f64);
                pending.push((*x, vec![share; len]));
            }
            Op::WeightedSum { terms, weights } => {
                let w = self.value(*weights).data();
                let mut dw = vec![T::zero(); w.len()];
                for &(v, k) in terms {
                    let xv = self.value(v).data();
                    dw[k] += xv.iter().zip(g).map(|(a, b)| *a * *b).sum::<T>();
                    if self.rg(v) {
                        pending.push((v, g.iter().map(|gi| *gi * w[k]).collect()));
                    }
                }
                pending.push((*weights, dw));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: T = y.iter().zip(g).map(|(a, b)| *a * *b).sum();
                pending.push((*x, y.iter().zip(g).map(|(yi, gi)| *yi * (*gi - dot)).collect()));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(*x).shape();
                let plane = h * w;
                let denom = T::from_f64_lossy(plane as f64);
                let mut d = Vec::with_capacity(g.len() * plane);
                for gi in g {
                    d.extend(std::iter::repeat_n(*gi / denom, plane));
                }
                pending.push((*x, d));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let n = x.shape()[0];
                let fan_in = x.sample_len();
                let out = self.value(*bias).len();
                let wd = self.value(*weight).data();
                let mut dw = vec![T::zero(); wd.len()];
                let mut db = vec![T::zero(); out];
                let mut dx = vec![T::zero(); x.len()];
                for s in 0..n {
                    let xs = &x.data()[s * fan_in..][..fan_in];
                    let dxs = &mut dx[s * fan_in..][..fan_in];
                    for o in 0..out {
                        let go = g[s * out + o];
                        db[o] += go;
                        let row = &wd[o * fan_in..][..fan_in];
                        let drow = &mut dw[o * fan_in..][..fan_in];
                        for i in 0..fan_in {
                            drow[i] += go * xs[i];
                            dxs[i] += go * row[i];
                        }
                    }
                }
                pending.push((*input, dx));
                pending.push((*weight, dw));
                pending.push((*bias, db));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = g[0] / T::from_f64_lossy(n as f64);
                let mut d: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (s, &l) in labels.iter().enumerate() {
                    d[s * k + l] -= scale;
                }
                pending.push((*logits, d));
            }
            Op::Triplet {
                anchor,
                positive,
                negative,
                active,
            } => {
                let (a, p, ng) = (
                    self.value(*anchor).data(),
                    self.value(*positive).data(),
                    self.value(*negative).data(),
                );
                let n = active.len();
                let d = a.len() / n.max(1);
                let scale = T::from_f64_lossy(2.0) * g[0] / T::from_f64_lossy(n as f64);
                let mut da = vec![T::zero(); a.len()];
                let mut dp = vec![T::zero(); a.len()];
                let mut dn = vec![T::zero(); a.len()];
                for (s, on) in active.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for i in s * d..(s + 1) * d {
                        da[i] = scale * (ng[i] - p[i]);
                        dp[i] = scale * (p[i] - a[i]);
                        dn[i] = scale * (a[i] - ng[i]);
                    }
                }
                pending.push((*anchor, da));
                pending.push((*positive, dp));
                pending.push((*negative, dn));
            }
        }
        for (v, contrib) in pending {
            self.accumulate(v, contrib);
        }
        Ok(())
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_values<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|v| (*v - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}
