use std::collections::BTreeMap;

use rand::Rng;

use super::arch::{edge_key, DiscreteArchitecture, DiscreteEdge, HeadKind, SupernetState};
use super::ops::{OpKind, OpShape, OperationSet};
use crate::cost::CostModel;
use crate::engine::checkpoint::NamedTensor;
use crate::engine::{softmax_values, BatchStats, Graph, Scalar, Tensor, Var, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};

/// Shape of a supernet before its weights exist.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    /// Node count including node 0, the stem output.
    pub nodes: usize,
    pub channels: usize,
    pub head: HeadKind,
    /// Number of classes or embedding width.
    pub out_dim: usize,
    pub ops: OperationSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    kernel: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
    dilation: usize,
}

/// A connection bundle: every candidate operation on one edge, mixed by the
/// softmax of the edge's logits.
#[derive(Debug, Clone)]
pub struct ArchEdge {
    pub from: usize,
    pub to: usize,
    ops: Vec<OpKind>,
    pub logits: Vec<f64>,
    convs: Vec<Option<ConvBn>>,
}

impl ArchEdge {
    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    /// Softmax of the logits.
    pub fn weights(&self) -> Vec<f64> {
        softmax_values(&self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Graph handles for one network's parameters and logits.
#[derive(Debug, Clone)]
pub struct Bound {
    params: Vec<Var>,
    logits: Vec<Option<Var>>,
}

/// A recorded forward pass. Attach a loss to `graph` with `output` as the
/// network output, call `graph.backward`, then read gradients back.
pub struct Forward<T> {
    pub graph: Graph<T>,
    pub output: Var,
    pub bound: Bound,
    pub stats: Vec<(usize, BatchStats)>,
}

impl Bound {
    /// Weight gradients from `g` after `backward`, zero where none flowed.
    pub fn param_grads<T: Scalar, U: Scalar>(&self, g: &Graph<T>, net: &Supernet<U>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&net.params)
            .map(|(v, p)| match g.grad(*v) {
                Some(gr) => Tensor::from_vec(p.shape(), gr.to_vec()).expect("grad shape"),
                None => Tensor::zeros(p.shape()),
            })
            .collect()
    }

    /// Logit gradients per edge.
    pub fn logit_grads<T: Scalar, U: Scalar>(&self, g: &Graph<T>, net: &Supernet<U>) -> Vec<Vec<f64>> {
        self.logits
            .iter()
            .zip(&net.edges)
            .map(|(v, e)| match v.and_then(|v| g.grad(v)) {
                Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; e.logits.len()],
            })
            .collect()
    }
}

impl<T: Scalar> Forward<T> {
    pub fn output_value(&self) -> &Tensor<T> {
        self.graph.value(self.output)
    }

    pub fn param_grads<U: Scalar>(&self, net: &Supernet<U>) -> Vec<Tensor<T>> {
        self.bound.param_grads(&self.graph, net)
    }

    pub fn logit_grads<U: Scalar>(&self, net: &Supernet<U>) -> Vec<Vec<f64>> {
        self.bound.logit_grads(&self.graph, net)
    }
}

/// An L-node DAG. Node 0 is the stem output; node `j > 0` is the sum of the
/// bundles on its incoming edges; the last node feeds the head
/// (ReLU, global average pooling, linear).
#[derive(Debug, Clone)]
pub struct Supernet<T> {
    nodes: usize,
    channels: usize,
    head: HeadKind,
    out_dim: usize,
    op_set: OperationSet,
    params: Vec<Tensor<T>>,
    param_names: Vec<String>,
    running: Vec<RunningStats>,
    running_names: Vec<String>,
    stem: ConvBn,
    edges: Vec<ArchEdge>,
    head_w: usize,
    head_b: usize,
    frozen: bool,
}

struct Builder<T> {
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    running: Vec<RunningStats>,
    running_names: Vec<String>,
}

impl<T: Scalar> Builder<T> {
    fn param(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn conv_bn<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        op: OpKind,
        rng: &mut R,
    ) -> ConvBn {
        let OpShape::Conv { kh, kw, dilation } = op.shape() else {
            unreachable!("conv_bn on {op}");
        };
        let std = (2.0 / (c_in * kh * kw) as f64).sqrt();
        let kernel = self.param(
            format!("{prefix}.conv"),
            Tensor::randn([c_out, c_in, kh, kw], std, rng),
        );
        let gamma = self.param(
            format!("{prefix}.bn.gamma"),
            Tensor::full([1, 1, 1, c_out], T::one()),
        );
        let beta = self.param(format!("{prefix}.bn.beta"), Tensor::zeros([1, 1, 1, c_out]));
        self.running.push(RunningStats {
            mean: vec![0.0; c_out],
            var: vec![1.0; c_out],
        });
        self.running_names.push(format!("{prefix}.bn"));
        ConvBn {
            kernel,
            gamma,
            beta,
            stats: self.running.len() - 1,
            dilation,
        }
    }
}

impl<T: Scalar> Supernet<T> {
    /// Full supernet: a bundle over the whole operation set on every `i < j`,
    /// logits zero.
    pub fn new<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        let mut edges = Vec::new();
        for to in 1..spec.nodes {
            for from in 0..to {
                edges.push((from, to, spec.ops.ops().to_vec()));
            }
        }
        Self::build(spec, edges, rng)
    }

    /// Network with exactly the edges of `arch`, one operation each.
    pub fn from_architecture<R: Rng + ?Sized>(
        arch: &DiscreteArchitecture,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ops: Vec<OpKind> = Vec::new();
        for e in &arch.edges {
            if !ops.contains(&e.op) {
                ops.push(e.op);
            }
        }
        if ops.is_empty() {
            ops.push(OpKind::Identity);
        }
        let spec = NetSpec {
            nodes: arch.nodes,
            channels: arch.channels,
            head: arch.head,
            out_dim,
            ops: OperationSet::new(ops)?,
        };
        let edges = arch
            .edges
            .iter()
            .map(|e| (e.from, e.to, vec![e.op]))
            .collect();
        Self::build(&spec, edges, rng)
    }

    fn build<R: Rng + ?Sized>(
        spec: &NetSpec,
        edge_ops: Vec<(usize, usize, Vec<OpKind>)>,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.nodes < 2 || spec.channels == 0 || spec.out_dim == 0 {
            return Err(Error::Contract(format!(
                "need nodes >= 2, channels >= 1, out_dim >= 1 (got {}, {}, {})",
                spec.nodes, spec.channels, spec.out_dim
            )));
        }
        let c = spec.channels;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            running: Vec::new(),
            running_names: Vec::new(),
        };
        let stem = b.conv_bn("stem", 1, c, OpKind::Conv3x3, rng);
        let mut edges = Vec::with_capacity(edge_ops.len());
        for (from, to, ops) in edge_ops {
            let convs = ops
                .iter()
                .map(|op| {
                    op.is_parametric().then(|| {
                        let prefix = format!("edge.{}.{}", edge_key(from, to), op.name());
                        b.conv_bn(&prefix, c, c, *op, rng)
                    })
                })
                .collect();
            edges.push(ArchEdge {
                from,
                to,
                logits: vec![0.0; ops.len()],
                ops,
                convs,
            });
        }
        let head_w = b.param(
            "head.weight".into(),
            Tensor::randn([spec.out_dim, c, 1, 1], (1.0 / c as f64).sqrt(), rng),
        );
        let head_b = b.param("head.bias".into(), Tensor::zeros([1, 1, 1, spec.out_dim]));
        Ok(Supernet {
            nodes: spec.nodes,
            channels: c,
            head: spec.head,
            out_dim: spec.out_dim,
            op_set: spec.ops.clone(),
            params: b.params,
            param_names: b.names,
            running: b.running,
            running_names: b.running_names,
            stem,
            edges,
            head_w,
            head_b,
            frozen: false,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn op_set(&self) -> &OperationSet {
        &self.op_set
    }

    pub fn edges(&self) -> &[ArchEdge] {
        &self.edges
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.from == from && e.to == to)
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn logits(&self) -> Vec<Vec<f64>> {
        self.edges.iter().map(|e| e.logits.clone()).collect()
    }

    pub fn set_logits(&mut self, logits: &[Vec<f64>]) -> Result<()> {
        if logits.len() != self.edges.len()
            || logits
                .iter()
                .zip(&self.edges)
                .any(|(l, e)| l.len() != e.logits.len())
        {
            return Err(Error::Shape("logit layout does not match the edges".into()));
        }
        for (e, l) in self.edges.iter_mut().zip(logits) {
            e.logits.clone_from(l);
        }
        Ok(())
    }

    pub fn edge_logits_mut(&mut self, edge: usize) -> &mut [f64] {
        &mut self.edges[edge].logits
    }

    /// A frozen network records no weight gradients.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Puts the network's parameters and logits on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let params = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), !self.frozen))
            .collect();
        let logits = self
            .edges
            .iter()
            .map(|e| {
                (e.ops.len() > 1).then(|| {
                    let l: Vec<T> = e.logits.iter().map(|v| T::from_f64_lossy(*v)).collect();
                    g.leaf(Tensor::vector(&l), true)
                })
            })
            .collect();
        Bound { params, logits }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = input.shape();
        if c != 1 || n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "network input must be [N>0, 1, H>0, W>0], got {:?}",
                input.shape()
            )));
        }
        Ok(())
    }

    fn conv_bn(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        cb: ConvBn,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let y = g.conv2d(x, b.params[cb.kernel], cb.dilation)?;
        let (gamma, beta) = (b.params[cb.gamma], b.params[cb.beta]);
        match mode {
            Mode::Train => {
                let (out, s) = g.batchnorm_train(y, gamma, beta, BN_EPS)?;
                stats.push((cb.stats, s));
                Ok(out)
            }
            Mode::Eval => {
                let r = &self.running[cb.stats];
                g.batchnorm_eval(y, gamma, beta, &r.mean, &r.var, BN_EPS)
            }
        }
    }

    fn op_forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        edge: usize,
        k: usize,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let e = &self.edges[edge];
        match e.ops[k].shape() {
            OpShape::Conv { .. } => {
                let cb = e.convs[k].expect("parametric op has weights");
                self.conv_bn(g, b, cb, x, mode, stats)
            }
            OpShape::Pool { kind, k } => g.pool2d(x, kind, k),
            OpShape::Identity => Ok(x),
            OpShape::Zero => Ok(g.zero(x)),
        }
    }

    fn bundle_forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        edge: usize,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let e = &self.edges[edge];
        let Some(logits) = b.logits[edge] else {
            return self.op_forward(g, b, edge, 0, x, mode, stats);
        };
        let w = g.softmax(logits);
        let mut terms = Vec::with_capacity(e.ops.len());
        for k in 0..e.ops.len() {
            // A zero term adds nothing; its logit still enters through the
            // softmax normalizer.
            if e.ops[k] != OpKind::Zero {
                terms.push((self.op_forward(g, b, edge, k, x, mode, stats)?, k));
            }
        }
        if terms.is_empty() {
            return Ok(g.zero(x));
        }
        g.weighted_sum(&terms, w)
    }

    /// Records the network on `g` and returns the head output
    /// (`[N, out_dim, 1, 1]`).
    pub fn forward_on(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: Var,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        self.check_input(g.value(input))?;
        let mut nodes = Vec::with_capacity(self.nodes);
        nodes.push(self.conv_bn(g, b, self.stem, input, mode, stats)?);
        for j in 1..self.nodes {
            let mut acc: Option<Var> = None;
            for (ei, e) in self.edges.iter().enumerate() {
                if e.to != j {
                    continue;
                }
                let y = self.bundle_forward(g, b, ei, nodes[e.from], mode, stats)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, y)?,
                    None => y,
                });
            }
            let node = match acc {
                Some(v) => v,
                None => g.zero(nodes[0]),
            };
            nodes.push(node);
        }
        self.head_on(g, b, nodes[self.nodes - 1])
    }

    fn head_on(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let r = g.relu(x);
        let p = g.global_avg_pool(r);
        g.linear(p, b.params[self.head_w], b.params[self.head_b])
    }

    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let x = graph.leaf(input.clone(), false);
        let mut stats = Vec::new();
        let output = self.forward_on(&mut graph, &bound, x, mode, &mut stats)?;
        Ok(Forward {
            graph,
            output,
            bound,
            stats,
        })
    }

    /// Head output for `input`, without keeping the graph.
    pub fn predict(&self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let f = self.forward(input, mode)?;
        Ok(f.graph.value(f.output).clone())
    }

    /// Stem output (node 0) for `input`.
    pub fn stem_output(&self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = g.leaf(input.clone(), false);
        let y = self.conv_bn(&mut g, &b, self.stem, x, mode, &mut Vec::new())?;
        Ok(g.value(y).clone())
    }

    /// Output of candidate `k` of bundle `edge` applied to node features `x`.
    pub fn candidate_output(
        &self,
        edge: usize,
        k: usize,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xv = g.leaf(x.clone(), false);
        let y = self.op_forward(&mut g, &b, edge, k, xv, mode, &mut Vec::new())?;
        Ok(g.value(y).clone())
    }

    /// Softmax-weighted mix of every candidate on bundle `edge`.
    pub fn mixed_op_output(&self, edge: usize, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xv = g.leaf(x.clone(), false);
        let y = self.bundle_forward(&mut g, &b, edge, xv, mode, &mut Vec::new())?;
        Ok(g.value(y).clone())
    }

    /// Head applied to final-node features `x`.
    pub fn head_output(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xv = g.leaf(x.clone(), false);
        let y = self.head_on(&mut g, &b, xv)?;
        Ok(g.value(y).clone())
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (idx, s) in stats {
            let r = &mut self.running[*idx];
            for (rm, m) in r.mean.iter_mut().zip(&s.mean) {
                *rm = round_to::<T>((1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m);
            }
            for (rv, v) in r.var.iter_mut().zip(&s.var) {
                *rv = round_to::<T>((1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v);
            }
        }
    }

    /// Argmax operation per bundle; an argmax of zero drops the edge. Logit
    /// ties go to the cheaper operation, then to the earlier one in the set.
    pub fn discretize(&self, cost: &CostModel) -> DiscreteArchitecture {
        let edges = self
            .edges
            .iter()
            .filter_map(|e| {
                let k = argmax_op(e, cost, self.channels);
                (e.ops[k] != OpKind::Zero).then_some(DiscreteEdge {
                    from: e.from,
                    to: e.to,
                    op: e.ops[k],
                })
            })
            .collect();
        DiscreteArchitecture::new(self.nodes, self.channels, self.head, edges)
            .expect("supernet edges are valid")
    }

    /// Logits of every bundle alongside the current argmax architecture.
    pub fn state(&self, cost: &CostModel) -> Result<SupernetState> {
        let mut logits = BTreeMap::new();
        for e in &self.edges {
            if e.ops != self.op_set.ops() {
                return Err(Error::Contract(
                    "state export needs full bundles on every edge".into(),
                ));
            }
            logits.insert((e.from, e.to), e.logits.clone());
        }
        Ok(SupernetState {
            arch: self.discretize(cost),
            ops: self.op_set.clone(),
            logits,
        })
    }

    pub fn load_state(&mut self, state: &SupernetState) -> Result<()> {
        if state.ops != self.op_set
            || state.arch.nodes != self.nodes
            || state.arch.channels != self.channels
        {
            return Err(Error::Contract(
                "supernet state has a different shape or operation set".into(),
            ));
        }
        if state.logits.len() != self.edges.len() {
            return Err(Error::Contract(format!(
                "state has {} bundles, network has {}",
                state.logits.len(),
                self.edges.len()
            )));
        }
        for e in &mut self.edges {
            let l = state.logits.get(&(e.from, e.to)).ok_or_else(|| {
                Error::Contract(format!("state lacks edge {}", edge_key(e.from, e.to)))
            })?;
            e.logits.clone_from(l);
        }
        Ok(())
    }

    /// Parameters and running statistics as named tensors.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out: Vec<NamedTensor<T>> = self
            .param_names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| NamedTensor {
                name: n.clone(),
                tensor: t.clone(),
            })
            .collect();
        for (n, r) in self.running_names.iter().zip(&self.running) {
            for (suffix, v) in [("running_mean", &r.mean), ("running_var", &r.var)] {
                let vals: Vec<T> = v.iter().map(|x| T::from_f64_lossy(*x)).collect();
                out.push(NamedTensor {
                    name: format!("{n}.{suffix}"),
                    tensor: Tensor::vector(&vals),
                });
            }
        }
        out
    }

    pub fn load_named_tensors(&mut self, tensors: &[NamedTensor<T>]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks tensor {name}")))
        };
        for (i, name) in self.param_names.iter().enumerate() {
            let t = find(name)?;
            if t.tensor.shape() != self.params[i].shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.tensor.shape(),
                    self.params[i].shape()
                )));
            }
        }
        for (i, name) in self.running_names.iter().enumerate() {
            for (suffix, is_mean) in [("running_mean", true), ("running_var", false)] {
                let t = find(&format!("{name}.{suffix}"))?;
                let c = self.running[i].mean.len();
                if t.tensor.len() != c {
                    return Err(Error::Shape(format!("tensor {name}.{suffix} length")));
                }
                let v = t.tensor.to_f64_vec();
                if is_mean {
                    self.running[i].mean = v;
                } else {
                    self.running[i].var = v;
                }
            }
        }
        for (i, name) in self.param_names.clone().iter().enumerate() {
            self.params[i] = find(name)?.tensor.clone();
        }
        Ok(())
    }
}

fn round_to<T: Scalar>(v: f64) -> f64 {
    T::from_f64_lossy(v).as_f64()
}

fn argmax_op(e: &ArchEdge, cost: &CostModel, channels: usize) -> usize {
    let mut best = 0;
    for k in 1..e.ops.len() {
        let (a, b) = (e.logits[k], e.logits[best]);
        if a > b {
            best = k;
        } else if a == b {
            let ck = cost.edge_op(e.ops[k], channels);
            let cb = cost.edge_op(e.ops[best], channels);
            if (ck.flops, ck.params) < (cb.flops, cb.params) {
                best = k;
            }
        }
    }
    best
}
