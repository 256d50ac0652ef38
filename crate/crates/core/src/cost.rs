//! Analytic FLOP and parameter counts.
//!
//! One multiply-accumulate is two FLOPs. Batch norm after a convolution is
//! folded into a per-element scale and shift (two FLOPs per output element,
//! two parameters per channel). Pooling costs one FLOP per window tap,
//! including taps that fall on padding.

use std::fmt;
use std::io::Write;

use crate::engine::Scalar;
use crate::error::{Error, Result};
use crate::supernet::{DiscreteArchitecture, OpKind, OpShape, Supernet};

/// Exact cost of one operation, or of a discrete network, for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCost {
    pub flops: u64,
    pub params: u64,
}

impl OpCost {
    pub const ZERO: OpCost = OpCost { flops: 0, params: 0 };

    pub fn to_expected(self) -> ExpectedCost {
        ExpectedCost {
            flops: self.flops as f64,
            params: self.params as f64,
        }
    }
}

impl std::ops::Add for OpCost {
    type Output = OpCost;
    fn add(self, o: OpCost) -> OpCost {
        OpCost {
            flops: self.flops + o.flops,
            params: self.params + o.params,
        }
    }
}

impl std::iter::Sum for OpCost {
    fn sum<I: Iterator<Item = OpCost>>(iter: I) -> OpCost {
        iter.fold(OpCost::ZERO, |a, b| a + b)
    }
}

/// Softmax-weighted cost of a supernet.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExpectedCost {
    pub flops: f64,
    pub params: f64,
}

impl std::ops::Add for ExpectedCost {
    type Output = ExpectedCost;
    fn add(self, o: ExpectedCost) -> ExpectedCost {
        ExpectedCost {
            flops: self.flops + o.flops,
            params: self.params + o.params,
        }
    }
}

pub fn op_cost(op: OpKind, c_in: usize, c_out: usize, h: usize, w: usize) -> OpCost {
    let (c_in, c_out, h, w) = (c_in as u64, c_out as u64, h as u64, w as u64);
    match op.shape() {
        OpShape::Conv { kh, kw, .. } => {
            let taps = (kh * kw) as u64;
            OpCost {
                flops: 2 * taps * c_in * c_out * h * w + 2 * h * w * c_out,
                params: taps * c_in * c_out + 2 * c_out,
            }
        }
        OpShape::Pool { k, .. } => OpCost {
            flops: (k * k) as u64 * h * w * c_in,
            params: 0,
        },
        OpShape::Identity | OpShape::Zero => OpCost::ZERO,
    }
}

/// FLOP and parameter limits. `f64::INFINITY` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub flops: f64,
    pub params: f64,
}

impl Budget {
    /// FLOPs and parameter count of the classic IrisCode matcher.
    pub const IRISCODE: Budget = Budget {
        flops: 0.5e6,
        params: 5.0,
    };

    pub fn new(flops: f64, params: f64) -> Result<Self> {
        for (name, v) in [("FLOPs", flops), ("parameter", params)] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Contract(format!(
                    "{name} budget must be positive, got {v}"
                )));
            }
        }
        Ok(Budget { flops, params })
    }

    pub fn unbounded() -> Self {
        Budget {
            flops: f64::INFINITY,
            params: f64::INFINITY,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.flops.is_infinite() && self.params.is_infinite()
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: f64| {
            if v.is_finite() {
                format!("{v}")
            } else {
                "unbounded".to_string()
            }
        };
        write!(f, "FLOPs <= {}, params <= {}", show(self.flops), show(self.params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Flops,
    Params,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub constraint: Constraint,
    pub value: f64,
    pub limit: f64,
    /// `limit − value`; negative for a violation.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintReport {
    pub violations: Vec<Violation>,
}

impl ConstraintReport {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn margin(&self, c: Constraint) -> Option<f64> {
        self.violations
            .iter()
            .find(|v| v.constraint == c)
            .map(|v| v.margin)
    }
}

impl fmt::Display for ConstraintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.feasible() {
            return f.write_str("feasible");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            let name = match v.constraint {
                Constraint::Flops => "FLOPs",
                Constraint::Params => "params",
            };
            write!(f, "{name} {} exceeds {} by {}", v.value, v.limit, -v.margin)?;
        }
        Ok(())
    }
}

pub fn check_constraints(cost: ExpectedCost, budget: &Budget) -> ConstraintReport {
    let mut violations = Vec::new();
    for (constraint, value, limit) in [
        (Constraint::Flops, cost.flops, budget.flops),
        (Constraint::Params, cost.params, budget.params),
    ] {
        if value > limit {
            violations.push(Violation {
                constraint,
                value,
                limit,
                margin: limit - value,
            });
        }
    }
    ConstraintReport { violations }
}

/// Per-edge cost row for reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCostRow {
    pub from: usize,
    pub to: usize,
    pub op: String,
    pub flops: f64,
    pub params: f64,
}

/// Costs of networks whose feature maps are `height × width` and whose head
/// has `out_dim` outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub height: usize,
    pub width: usize,
    pub out_dim: usize,
}

impl CostModel {
    pub fn new(height: usize, width: usize, out_dim: usize) -> Self {
        CostModel {
            height,
            width,
            out_dim,
        }
    }

    /// Cost of `op` on a `channels`-wide edge.
    pub fn edge_op(&self, op: OpKind, channels: usize) -> OpCost {
        op_cost(op, channels, channels, self.height, self.width)
    }

    /// 3×3 convolution from the single input channel, with batch norm.
    pub fn stem(&self, channels: usize) -> OpCost {
        op_cost(OpKind::Conv3x3, 1, channels, self.height, self.width)
    }

    /// ReLU (one FLOP per element), global average pooling (one add per
    /// element, the scale is folded into the weights) and the linear layer.
    pub fn head(&self, channels: usize) -> OpCost {
        let (c, hw, out) = (
            channels as u64,
            (self.height * self.width) as u64,
            self.out_dim as u64,
        );
        OpCost {
            flops: 2 * c * hw + 2 * c * out + out,
            params: c * out + out,
        }
    }

    /// Stem plus head: the cost of a network without edges.
    pub fn fixed(&self, channels: usize) -> OpCost {
        self.stem(channels) + self.head(channels)
    }

    pub fn expected_cost<T: Scalar>(&self, net: &Supernet<T>) -> ExpectedCost {
        let c = net.channels();
        net.edges()
            .iter()
            .map(|e| self.expected_edge(e.ops(), &e.weights(), c))
            .fold(self.fixed(c).to_expected(), |a, b| a + b)
    }

    /// Softmax-weighted cost of one bundle.
    pub fn expected_edge(&self, ops: &[OpKind], weights: &[f64], channels: usize) -> ExpectedCost {
        let mut out = ExpectedCost::default();
        for (op, w) in ops.iter().zip(weights) {
            let c = self.edge_op(*op, channels);
            out.flops += w * c.flops as f64;
            out.params += w * c.params as f64;
        }
        out
    }

    pub fn discrete_cost(&self, arch: &DiscreteArchitecture) -> OpCost {
        let c = arch.channels;
        self.fixed(c)
            + arch
                .edges
                .iter()
                .map(|e| self.edge_op(e.op, c))
                .sum::<OpCost>()
    }

    pub fn supernet_rows<T: Scalar>(&self, net: &Supernet<T>) -> Vec<EdgeCostRow> {
        let c = net.channels();
        net.edges()
            .iter()
            .map(|e| {
                let ex = self.expected_edge(e.ops(), &e.weights(), c);
                let op = if e.ops().len() == 1 {
                    e.ops()[0].name().to_string()
                } else {
                    "mixed".to_string()
                };
                EdgeCostRow {
                    from: e.from,
                    to: e.to,
                    op,
                    flops: ex.flops,
                    params: ex.params,
                }
            })
            .collect()
    }

    pub fn architecture_rows(&self, arch: &DiscreteArchitecture) -> Vec<EdgeCostRow> {
        arch.edges
            .iter()
            .map(|e| {
                let c = self.edge_op(e.op, arch.channels);
                EdgeCostRow {
                    from: e.from,
                    to: e.to,
                    op: e.op.name().to_string(),
                    flops: c.flops as f64,
                    params: c.params as f64,
                }
            })
            .collect()
    }

    /// Tab-separated table: stem, edges, head, total.
    pub fn write_tsv<W: Write + ?Sized>(
        &self,
        out: &mut W,
        channels: usize,
        rows: &[EdgeCostRow],
    ) -> std::io::Result<()> {
        writeln!(out, "part\top\tflops\tparams")?;
        let stem = self.stem(channels);
        let head = self.head(channels);
        writeln!(out, "stem\tconv3x3\t{}\t{}", stem.flops, stem.params)?;
        let (mut f, mut p) = ((stem.flops + head.flops) as f64, (stem.params + head.params) as f64);
        for r in rows {
            writeln!(out, "{}-{}\t{}\t{}\t{}", r.from, r.to, r.op, r.flops, r.params)?;
            f += r.flops;
            p += r.params;
        }
        writeln!(out, "head\tlinear\t{}\t{}", head.flops, head.params)?;
        writeln!(out, "total\t-\t{f}\t{p}")
    }
}
