use rand::Rng;

use super::{LossKind, SearchConfig};
use crate::data::Dataset;
use crate::engine::{BatchStats, Graph, Scalar, Sgd, Tensor, Var};
use crate::error::{Error, Result};
use crate::supernet::{Bound, Mode, Supernet};

/// Inputs for one loss evaluation.
#[derive(Debug, Clone)]
pub enum Batch<T> {
    Labeled {
        x: Tensor<T>,
        labels: Vec<usize>,
    },
    Triplets {
        anchor: Tensor<T>,
        positive: Tensor<T>,
        negative: Tensor<T>,
    },
}

impl<T: Scalar> Batch<T> {
    pub fn labeled(ds: &Dataset, idx: &[usize]) -> Self {
        Batch::Labeled {
            x: ds.batch(idx),
            labels: ds.batch_labels(idx),
        }
    }

    /// Uses `idx` as anchors, drawing a same-label positive and a
    /// different-label negative for each. Anchors without a partner are
    /// skipped.
    pub fn triplets<R: Rng + ?Sized>(ds: &Dataset, idx: &[usize], rng: &mut R) -> Result<Self> {
        let groups = ds.by_label();
        let (mut a, mut p, mut n) = (Vec::new(), Vec::new(), Vec::new());
        for &i in idx {
            let same = &groups[&ds.labels[i]];
            if same.len() < 2 || groups.len() < 2 {
                continue;
            }
            let mut pos = same[rng.random_range(0..same.len() - 1)];
            if pos == i {
                pos = same[same.len() - 1];
            }
            let neg = loop {
                let j = rng.random_range(0..ds.len());
                if ds.labels[j] != ds.labels[i] {
                    break j;
                }
            };
            a.push(i);
            p.push(pos);
            n.push(neg);
        }
        if a.is_empty() {
            return Err(Error::InsufficientData(
                "no anchor in the batch has both a positive and a negative".into(),
            ));
        }
        Ok(Batch::Triplets {
            anchor: ds.batch(&a),
            positive: ds.batch(&p),
            negative: ds.batch(&n),
        })
    }

    pub fn sample<R: Rng + ?Sized>(
        ds: &Dataset,
        idx: &[usize],
        loss: LossKind,
        rng: &mut R,
    ) -> Result<Self> {
        match loss {
            LossKind::CrossEntropy => Ok(Self::labeled(ds, idx)),
            LossKind::Triplet => Self::triplets(ds, idx, rng),
        }
    }
}

/// A loss recorded on a graph.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub bound: Bound,
    pub loss: Var,
    pub stats: Vec<(usize, BatchStats)>,
}

/// Records the network and its loss on `batch`.
pub fn batch_loss<T: Scalar>(
    net: &Supernet<T>,
    batch: &Batch<T>,
    mode: Mode,
    margin: f64,
) -> Result<LossGraph<T>> {
    let mut graph = Graph::new();
    let bound = net.bind(&mut graph);
    let mut stats = Vec::new();
    let loss = match batch {
        Batch::Labeled { x, labels } => {
            let xv = graph.leaf(x.clone(), false);
            let out = net.forward_on(&mut graph, &bound, xv, mode, &mut stats)?;
            graph.cross_entropy(out, labels)?
        }
        Batch::Triplets {
            anchor,
            positive,
            negative,
        } => {
            let mut emb = Vec::with_capacity(3);
            for t in [anchor, positive, negative] {
                let v = graph.leaf(t.clone(), false);
                emb.push(net.forward_on(&mut graph, &bound, v, mode, &mut stats)?);
            }
            graph.triplet_loss(emb[0], emb[1], emb[2], margin)?
        }
    };
    Ok(LossGraph {
        graph,
        bound,
        loss,
        stats,
    })
}

/// Training-mode loss with weight and logit gradients.
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub loss: f64,
    pub params: Vec<Tensor<T>>,
    pub logits: Vec<Vec<f64>>,
    pub stats: Vec<(usize, BatchStats)>,
}

pub fn loss_and_grads<T: Scalar>(
    net: &Supernet<T>,
    batch: &Batch<T>,
    margin: f64,
) -> Result<LossGrads<T>> {
    let mut lg = batch_loss(net, batch, Mode::Train, margin)?;
    let loss = lg.graph.value(lg.loss).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {loss} (batch of {} samples)",
            batch_len(batch)
        )));
    }
    lg.graph.backward(lg.loss)?;
    Ok(LossGrads {
        loss,
        params: lg.bound.param_grads(&lg.graph, net),
        logits: lg.bound.logit_grads(&lg.graph, net),
        stats: lg.stats,
    })
}

fn batch_len<T: Scalar>(b: &Batch<T>) -> usize {
    match b {
        Batch::Labeled { labels, .. } => labels.len(),
        Batch::Triplets { anchor, .. } => anchor.shape()[0],
    }
}

/// One optimizer step on the weights. Logits are not touched. Returns the
/// training loss before the step.
pub fn weight_step<T: Scalar>(
    net: &mut Supernet<T>,
    batch: &Batch<T>,
    opt: &mut Sgd,
    margin: f64,
) -> Result<f64> {
    let g = loss_and_grads(net, batch, margin)?;
    if g.params.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!(
            "weight gradient (loss {})",
            g.loss
        )));
    }
    if !net.is_frozen() {
        opt.step(net.params_mut(), &g.params)?;
        net.update_running_stats(&g.stats);
    }
    Ok(g.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchStep {
    /// Validation loss at the (possibly virtually stepped) weights.
    pub val_loss: f64,
    /// Gradient applied to the logits, penalty included.
    pub grads: Vec<Vec<f64>>,
}

fn axpy<T: Scalar>(params: &mut [Tensor<T>], dir: &[Tensor<T>], a: f64) {
    for (p, d) in params.iter_mut().zip(dir) {
        for (w, g) in p.data_mut().iter_mut().zip(d.data()) {
            *w = T::from_f64_lossy(w.as_f64() + a * g.as_f64());
        }
    }
}

fn norm<T: Scalar>(ts: &[Tensor<T>]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One descent step on the logits against the validation loss plus the L1
/// penalty. With `xi > 0` the validation gradient is taken at the virtually
/// stepped weights `w − ξ∇w L_train`, and the second-order term is estimated
/// by central differences of `∇α L_train` around `w ± ε∇w' L_val`.
pub fn arch_step<T: Scalar>(
    net: &mut Supernet<T>,
    train: &Batch<T>,
    val: &Batch<T>,
    config: &SearchConfig,
) -> Result<ArchStep> {
    let (val_loss, mut grads) = if config.xi == 0.0 {
        let v = loss_and_grads(net, val, config.margin)?;
        (v.loss, v.logits)
    } else {
        let t = loss_and_grads(net, train, config.margin)?;
        let mut virt = net.clone();
        axpy(virt.params_mut(), &t.params, -config.xi);
        let v = loss_and_grads(&virt, val, config.margin)?;
        let n = norm(&v.params);
        let mut g = v.logits;
        if n > 0.0 && n.is_finite() {
            let eps = 0.01 / n;
            let mut plus = net.clone();
            axpy(plus.params_mut(), &v.params, eps);
            let mut minus = net.clone();
            axpy(minus.params_mut(), &v.params, -eps);
            let gp = loss_and_grads(&plus, train, config.margin)?.logits;
            let gm = loss_and_grads(&minus, train, config.margin)?.logits;
            for ((ge, pe), me) in g.iter_mut().zip(&gp).zip(&gm) {
                for ((gk, pk), mk) in ge.iter_mut().zip(pe).zip(me) {
                    *gk -= config.xi * (pk - mk) / (2.0 * eps);
                }
            }
        }
        (v.loss, g)
    };
    for (ge, e) in grads.iter_mut().zip(net.edges()) {
        for (gk, a) in ge.iter_mut().zip(&e.logits) {
            *gk += config.alpha_l1 * sign(*a);
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "architecture gradient (validation loss {val_loss})"
        )));
    }
    for (e, ge) in grads.iter().enumerate() {
        for (a, g) in net.edge_logits_mut(e).iter_mut().zip(ge) {
            *a -= config.lr_alpha * g;
        }
    }
    Ok(ArchStep { val_loss, grads })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
