//! Constrained bi-level architecture search: alternate weight descent on the
//! training loss, logit descent on the validation loss, and projection of the
//! logits onto the budget.

mod project;
mod split;
mod steps;
mod train;

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use project::{project, Projection};
pub use split::{split_dataset, Split, SplitScheme, SplitSpec};
pub use steps::{arch_step, batch_loss, loss_and_grads, weight_step, ArchStep, Batch, LossGrads};
pub use train::{train_final, TrainConfig, TrainOutcome, TrainTraceRow};

use crate::cost::{check_constraints, Budget, Constraint, CostModel, OpCost};
use crate::data::Dataset;
use crate::engine::Sgd;
use crate::error::{Error, Result};
use crate::supernet::{
    DiscreteArchitecture, DiscreteEdge, HeadKind, NetSpec, OpKind, OperationSet, Supernet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Triplet,
}

impl LossKind {
    pub fn head(self) -> HeadKind {
        match self {
            LossKind::CrossEntropy => HeadKind::Softmax,
            LossKind::Triplet => HeadKind::Embedding,
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xent" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::Parse(format!("unknown loss \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub budget: Budget,
    /// Unroll coefficient; 0 is first-order.
    pub xi: f64,
    pub lr_w: f64,
    pub lr_alpha: f64,
    /// Weight of the L1 penalty on logits.
    pub alpha_l1: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub margin: f64,
    /// Joint gradient-norm limit for weight steps; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Relative tolerance of the projection bisection.
    pub projection_tol: f64,
    /// Stop after this many epochs without a validation improvement of
    /// `min_delta`.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: Budget::unbounded(),
            xi: 0.0,
            lr_w: 0.2,
            lr_alpha: 0.05,
            alpha_l1: 1e-3,
            momentum: 0.9,
            weight_decay: 3e-4,
            epochs: 20,
            batch_size: 32,
            loss: LossKind::CrossEntropy,
            margin: 1.0,
            grad_clip: Some(5.0),
            seed: 0,
            projection_tol: 1e-6,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if !(self.lr_w > 0.0) || !(self.lr_alpha > 0.0) {
            return bad(format!(
                "learning rates must be positive (lr_w={}, lr_alpha={})",
                self.lr_w, self.lr_alpha
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1".into());
        }
        if !(self.xi >= 0.0) || !(self.alpha_l1 >= 0.0) || !(self.margin > 0.0) {
            return bad("xi and alpha_l1 must be >= 0 and margin > 0".into());
        }
        Budget::new(self.budget.flops, self.budget.params)?;
        Ok(())
    }
}

/// One line of the search trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchTraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub expected_flops: f64,
    pub expected_params: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub arch: DiscreteArchitecture,
    pub supernet: Supernet<f32>,
    pub trace: Vec<SearchTraceRow>,
    /// Edges changed by the post-discretization repair.
    pub repairs: usize,
    pub cost: OpCost,
}

/// Errors unless the edgeless network (stem and head) fits the budget.
pub fn check_fixed_cost(channels: usize, cost: &CostModel, budget: &Budget) -> Result<()> {
    let fixed = cost.fixed(channels);
    if check_constraints(fixed.to_expected(), budget).feasible() {
        Ok(())
    } else {
        Err(Error::Infeasible {
            min_flops: fixed.flops as f64,
            min_params: fixed.params as f64,
            budget: budget.to_string(),
        })
    }
}

/// Batches of indices covering `0..n` in a shuffled order.
pub(crate) fn shuffled_batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

/// Runs the search loop, discretizes and repairs the result.
pub fn run_search(
    config: &SearchConfig,
    spec: &NetSpec,
    train: &Dataset,
    val: &Dataset,
    cost: &CostModel,
) -> Result<SearchOutcome> {
    config.validate()?;
    check_fixed_cost(spec.channels, cost, &config.budget)?;
    if val.is_empty() || train.is_empty() {
        return Err(Error::InsufficientData(
            "search needs non-empty training and validation sets".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Supernet::<f32>::new(spec, &mut rng)?;
    let mut opt = Sgd::new(config.lr_w, config.momentum, config.weight_decay);
    opt.clip_norm = config.grad_clip;
    project(&mut net, &config.budget, cost, config.projection_tol)?;
    let mut trace = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let train_batches = shuffled_batches(train.len(), config.batch_size, &mut rng);
        let mut val_batches = Vec::new();
        let (mut tl, mut vl) = (0.0, 0.0);
        for tb in &train_batches {
            if val_batches.is_empty() {
                val_batches = shuffled_batches(val.len(), config.batch_size, &mut rng);
            }
            let vb = val_batches.pop().expect("refilled");
            let tbatch = Batch::sample(train, tb, config.loss, &mut rng)?;
            let vbatch = Batch::sample(val, &vb, config.loss, &mut rng)?;
            tl += weight_step(&mut net, &tbatch, &mut opt, config.margin)?;
            vl += arch_step(&mut net, &tbatch, &vbatch, config)?.val_loss;
            project(&mut net, &config.budget, cost, config.projection_tol)?;
        }
        let nb = train_batches.len() as f64;
        let ex = cost.expected_cost(&net);
        let row = SearchTraceRow {
            epoch,
            train_loss: tl / nb,
            val_loss: vl / nb,
            expected_flops: ex.flops,
            expected_params: ex.params,
        };
        trace.push(row);
        if row.val_loss < best_val - config.min_delta {
            best_val = row.val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (arch, repairs) = repair(net.discretize(cost), &net, cost, &config.budget)?;
    let final_cost = cost.discrete_cost(&arch);
    Ok(SearchOutcome {
        arch,
        supernet: net,
        trace,
        repairs,
        cost: final_cost,
    })
}

fn pressure(c: OpCost, violated: &[Constraint], budget: &Budget) -> f64 {
    violated
        .iter()
        .map(|v| match v {
            Constraint::Flops => c.flops as f64 / budget.flops,
            Constraint::Params => c.params as f64 / budget.params,
        })
        .sum()
}

/// Downgrades edges until the architecture fits: the costliest edge (in the
/// violated resources) moves to the strictly cheaper candidate with the
/// highest logit; a downgrade to zero removes the edge.
pub fn repair<T: crate::engine::Scalar>(
    mut arch: DiscreteArchitecture,
    net: &Supernet<T>,
    cost: &CostModel,
    budget: &Budget,
) -> Result<(DiscreteArchitecture, usize)> {
    check_fixed_cost(arch.channels, cost, budget)?;
    let c = arch.channels;
    let mut changes = 0;
    loop {
        let report = check_constraints(cost.discrete_cost(&arch).to_expected(), budget);
        if report.feasible() {
            return Ok((arch, changes));
        }
        let violated: Vec<Constraint> = report.violations.iter().map(|v| v.constraint).collect();
        let p = |op: OpKind| pressure(cost.edge_op(op, c), &violated, budget);
        let (pos, _) = arch
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| (i, p(e.op)))
            .filter(|(_, v)| *v > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("an over-budget architecture has a costly edge");
        let e = arch.edges[pos];
        let current = p(e.op);
        let (ops, logits) = match net.edge_index(e.from, e.to) {
            Some(i) => (net.edges()[i].ops().to_vec(), net.edges()[i].logits.clone()),
            None => (net.op_set().ops().to_vec(), vec![0.0; net.op_set().len()]),
        };
        let mut best: Option<(usize, f64, f64)> = None;
        for (k, op) in ops.iter().enumerate() {
            let pk = p(*op);
            if pk >= current {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bl, bp)) => logits[k] > bl || (logits[k] == bl && pk < bp),
            };
            if better {
                best = Some((k, logits[k], pk));
            }
        }
        match best.map(|(k, _, _)| ops[k]) {
            Some(op) if op != OpKind::Zero => arch.edges[pos].op = op,
            _ => {
                arch.edges.remove(pos);
            }
        }
        changes += 1;
    }
}

/// Uniformly random operation per edge (zero drops the edge), redrawn until
/// the architecture fits the budget.
pub fn random_architecture<R: Rng + ?Sized>(
    nodes: usize,
    channels: usize,
    head: HeadKind,
    ops: &OperationSet,
    budget: &Budget,
    cost: &CostModel,
    rng: &mut R,
) -> Result<DiscreteArchitecture> {
    check_fixed_cost(channels, cost, budget)?;
    for _ in 0..100_000 {
        let mut edges = Vec::new();
        for to in 1..nodes {
            for from in 0..to {
                let op = ops.ops()[rng.random_range(0..ops.len())];
                if op != OpKind::Zero {
                    edges.push(DiscreteEdge { from, to, op });
                }
            }
        }
        let arch = DiscreteArchitecture::new(nodes, channels, head, edges)?;
        if check_constraints(cost.discrete_cost(&arch).to_expected(), budget).feasible() {
            return Ok(arch);
        }
    }
    Err(Error::Contract(
        "no random architecture within budget after 100000 draws".into(),
    ))
}
