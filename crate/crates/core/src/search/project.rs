use crate::cost::{check_constraints, Budget, CostModel, ExpectedCost};
use crate::engine::{softmax_values, Scalar};
use crate::error::{Error, Result};
use crate::supernet::Supernet;

/// Result of [`project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Shift applied; 0 when the input was already feasible.
    pub lambda: f64,
    pub before: ExpectedCost,
    pub after: ExpectedCost,
}

struct EdgeTable {
    logits: Vec<f64>,
    flops: Vec<f64>,
    params: Vec<f64>,
    /// Shift direction: candidate cost over the bundle's max, summed over the
    /// bounded constraints.
    dir: Vec<f64>,
}

fn normalized(costs: &[f64]) -> Vec<f64> {
    let max = costs.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        costs.iter().map(|c| c / max).collect()
    } else {
        vec![0.0; costs.len()]
    }
}

fn tables<T: Scalar>(net: &Supernet<T>, cost: &CostModel, budget: &Budget) -> Vec<EdgeTable> {
    let c = net.channels();
    net.edges()
        .iter()
        .map(|e| {
            let oc: Vec<_> = e.ops().iter().map(|op| cost.edge_op(*op, c)).collect();
            let flops: Vec<f64> = oc.iter().map(|x| x.flops as f64).collect();
            let params: Vec<f64> = oc.iter().map(|x| x.params as f64).collect();
            let mut dir = vec![0.0; oc.len()];
            if budget.flops.is_finite() {
                for (d, n) in dir.iter_mut().zip(normalized(&flops)) {
                    *d += n;
                }
            }
            if budget.params.is_finite() {
                for (d, n) in dir.iter_mut().zip(normalized(&params)) {
                    *d += n;
                }
            }
            EdgeTable {
                logits: e.logits.clone(),
                flops,
                params,
                dir,
            }
        })
        .collect()
}

fn shifted(t: &EdgeTable, lambda: f64) -> Vec<f64> {
    t.logits
        .iter()
        .zip(&t.dir)
        .map(|(a, d)| a - lambda * d)
        .collect()
}

fn cost_at(fixed: ExpectedCost, tables: &[EdgeTable], lambda: f64) -> ExpectedCost {
    // Same summation order as `CostModel::expected_cost`, so a projected
    // network re-checks as feasible bit for bit.
    let mut out = fixed;
    for t in tables {
        let w = softmax_values(&shifted(t, lambda));
        let mut edge = ExpectedCost::default();
        for k in 0..w.len() {
            edge.flops += w[k] * t.flops[k];
            edge.params += w[k] * t.params[k];
        }
        out = out + edge;
    }
    out
}

/// Cost as λ → ∞: each bundle's mass spread over its minimum-direction
/// candidates in proportion to their current weights.
fn limit_cost(fixed: ExpectedCost, tables: &[EdgeTable]) -> ExpectedCost {
    let mut out = fixed;
    for t in tables {
        let min = t.dir.iter().cloned().fold(f64::INFINITY, f64::min);
        let keep: Vec<usize> = (0..t.dir.len()).filter(|k| t.dir[*k] == min).collect();
        let w = softmax_values(&keep.iter().map(|k| t.logits[*k]).collect::<Vec<_>>());
        for (wk, k) in w.iter().zip(&keep) {
            out.flops += wk * t.flops[*k];
            out.params += wk * t.params[*k];
        }
    }
    out
}

/// Smallest λ (to within `tol`) bringing `value(λ)` down to `limit`, or
/// `None` if even the largest probed λ is not enough.
fn solve_lambda(value: impl Fn(f64) -> f64, limit: f64, tol: f64) -> Option<f64> {
    if value(0.0) <= limit {
        return Some(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while value(hi) > limit {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return None;
        }
    }
    for _ in 0..200 {
        let v = value(hi);
        if v >= limit * (1.0 - tol) || hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if value(mid) <= limit {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Shifts every bundle's logits by `−λ·ĉ` with one global λ so the expected
/// cost fits the budget. Feasible inputs are left untouched. Operation
/// weights are never modified.
pub fn project<T: Scalar>(
    net: &mut Supernet<T>,
    budget: &Budget,
    cost: &CostModel,
    tol: f64,
) -> Result<Projection> {
    let before = cost.expected_cost(net);
    if check_constraints(before, budget).feasible() {
        return Ok(Projection {
            lambda: 0.0,
            before,
            after: before,
        });
    }
    let fixed = cost.fixed(net.channels()).to_expected();
    let tabs = tables(net, cost, budget);
    let limit = limit_cost(fixed, &tabs);
    let infeasible = || Error::Infeasible {
        min_flops: limit.flops,
        min_params: limit.params,
        budget: budget.to_string(),
    };
    if limit.flops > budget.flops * (1.0 + tol) || limit.params > budget.params * (1.0 + tol) {
        return Err(infeasible());
    }
    let mut lambda = 0.0f64;
    if budget.flops.is_finite() {
        let l = solve_lambda(|l| cost_at(fixed, &tabs, l).flops, budget.flops, tol);
        lambda = lambda.max(l.unwrap_or(1e12));
    }
    if budget.params.is_finite() {
        let l = solve_lambda(|l| cost_at(fixed, &tabs, l).params, budget.params, tol);
        lambda = lambda.max(l.unwrap_or(1e12));
    }
    let after = cost_at(fixed, &tabs, lambda);
    if after.flops > budget.flops * (1.0 + tol) || after.params > budget.params * (1.0 + tol) {
        return Err(infeasible());
    }
    for (e, t) in tabs.iter().enumerate() {
        net.edge_logits_mut(e).copy_from_slice(&shifted(t, lambda));
    }
    Ok(Projection {
        lambda,
        before,
        after: cost.expected_cost(net),
    })
}
