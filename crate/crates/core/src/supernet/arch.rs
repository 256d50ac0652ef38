use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ops::{OpKind, OperationSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Linear layer producing class logits, trained with cross-entropy.
    Softmax,
    /// Linear layer producing an embedding, trained with a triplet loss.
    Embedding,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Embedding => "embedding",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "embedding" => Ok(HeadKind::Embedding),
            other => Err(Error::Parse(format!("unknown head kind \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteEdge {
    pub from: usize,
    pub to: usize,
    pub op: OpKind,
}

/// A searched network with one operation per retained edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawArchitecture")]
pub struct DiscreteArchitecture {
    pub nodes: usize,
    pub channels: usize,
    pub head: HeadKind,
    pub edges: Vec<DiscreteEdge>,
}

impl DiscreteArchitecture {
    /// Validates and sorts the edges by `(from, to)`.
    pub fn new(
        nodes: usize,
        channels: usize,
        head: HeadKind,
        mut edges: Vec<DiscreteEdge>,
    ) -> Result<Self> {
        check_shape(nodes, channels)?;
        edges.sort_by_key(|e| (e.from, e.to));
        for (i, e) in edges.iter().enumerate() {
            check_edge(e.from, e.to, nodes)?;
            if e.op == OpKind::Zero {
                return Err(Error::Parse(format!(
                    "edge {}-{} uses zero; absent edges are omitted instead",
                    e.from, e.to
                )));
            }
            if i > 0 && (edges[i - 1].from, edges[i - 1].to) == (e.from, e.to) {
                return Err(Error::Parse(format!("duplicate edge {}-{}", e.from, e.to)));
            }
        }
        Ok(DiscreteArchitecture {
            nodes,
            channels,
            head,
            edges,
        })
    }

    pub fn op(&self, from: usize, to: usize) -> Option<OpKind> {
        self.edges
            .iter()
            .find(|e| e.from == from && e.to == to)
            .map(|e| e.op)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawArchitecture = serde_json::from_str(text)?;
        raw.into_architecture()
    }
}

impl TryFrom<RawArchitecture> for DiscreteArchitecture {
    type Error = Error;
    fn try_from(raw: RawArchitecture) -> Result<Self> {
        raw.into_architecture()
    }
}

fn check_shape(nodes: usize, channels: usize) -> Result<()> {
    if nodes < 2 {
        return Err(Error::Parse(format!("need at least 2 nodes, got {nodes}")));
    }
    if channels == 0 {
        return Err(Error::Parse("channel width must be positive".into()));
    }
    Ok(())
}

fn check_edge(from: usize, to: usize, nodes: usize) -> Result<()> {
    if from >= to || to >= nodes {
        return Err(Error::Parse(format!(
            "edge {from}-{to} is not forward within {nodes} nodes"
        )));
    }
    Ok(())
}

/// `"i-j"` key used for logits.
pub fn edge_key(from: usize, to: usize) -> String {
    format!("{from}-{to}")
}

pub fn parse_edge_key(key: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse(format!("bad edge key \"{key}\""));
    let (a, b) = key.split_once('-').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

/// Supernet architecture state: the current argmax architecture plus the
/// logits of every bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetState {
    pub arch: DiscreteArchitecture,
    pub ops: OperationSet,
    pub logits: BTreeMap<(usize, usize), Vec<f64>>,
}

impl SupernetState {
    pub fn to_json(&self) -> String {
        let raw = RawArchitecture {
            nodes: self.arch.nodes,
            channels: self.arch.channels,
            head: self.arch.head,
            edges: self.arch.edges.clone(),
            ops: Some(self.ops.clone()),
            logits: Some(
                self.logits
                    .iter()
                    .map(|((a, b), v)| (edge_key(*a, *b), v.clone()))
                    .collect(),
            ),
        };
        serde_json::to_string_pretty(&raw).expect("state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawArchitecture = serde_json::from_str(text)?;
        let (Some(ops), Some(keyed)) = (raw.ops.clone(), raw.logits.clone()) else {
            return Err(Error::Parse(
                "supernet state needs \"ops\" and \"logits\"".into(),
            ));
        };
        let arch = raw.into_architecture()?;
        let mut logits = BTreeMap::new();
        for (k, v) in keyed {
            let (a, b) = parse_edge_key(&k)?;
            check_edge(a, b, arch.nodes)?;
            if v.len() != ops.len() {
                return Err(Error::Parse(format!(
                    "edge {k} has {} logits for {} operations",
                    v.len(),
                    ops.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parse(format!("edge {k} has non-finite logits")));
            }
            logits.insert((a, b), v);
        }
        Ok(SupernetState { arch, ops, logits })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArchitecture {
    nodes: usize,
    channels: usize,
    head: HeadKind,
    edges: Vec<DiscreteEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ops: Option<OperationSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logits: Option<BTreeMap<String, Vec<f64>>>,
}

impl RawArchitecture {
    fn into_architecture(self) -> Result<DiscreteArchitecture> {
        DiscreteArchitecture::new(self.nodes, self.channels, self.head, self.edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_parses() {
        let a = DiscreteArchitecture::from_json(
            r#"{"nodes": 2, "channels": 8, "head": "softmax",
                "edges": [{"from": 0, "to": 1, "op": "conv3x3"}]}"#,
        )
        .unwrap();
        assert_eq!(a.edges.len(), 1);
        assert_eq!(a.op(0, 1), Some(OpKind::Conv3x3));
        assert_eq!(DiscreteArchitecture::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn parse_errors() {
        let unknown = DiscreteArchitecture::from_json(
            r#"{"nodes": 2, "channels": 8, "head": "softmax",
                "edges": [{"from": 0, "to": 1, "op": "conv7x7"}]}"#,
        )
        .unwrap_err();
        assert!(unknown.to_string().contains("conv7x7"), "{unknown}");

        let dup = DiscreteArchitecture::from_json(
            r#"{"nodes": 3, "channels": 8, "head": "softmax", "edges": [
                {"from": 0, "to": 1, "op": "conv3x3"},
                {"from": 0, "to": 1, "op": "identity"}]}"#,
        )
        .unwrap_err();
        assert!(dup.to_string().contains("duplicate"), "{dup}");

        for bad in [
            "{",
            r#"{"nodes": 2, "channels": 8, "head": "softmax"}"#,
            r#"{"nodes": 2, "channels": 8, "head": "svm", "edges": []}"#,
            r#"{"nodes": 2, "channels": 8, "head": "softmax",
                "edges": [{"from": 1, "to": 0, "op": "identity"}]}"#,
        ] {
            assert!(DiscreteArchitecture::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn edge_keys() {
        assert_eq!(edge_key(0, 3), "0-3");
        assert_eq!(parse_edge_key("2-10").unwrap(), (2, 10));
        assert!(parse_edge_key("2_3").is_err());
    }
}
