use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::PoolKind;
use crate::error::{Error, Result};

/// A candidate operation on a DAG edge. All operations are stride 1 and
/// shape-preserving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv3x3,
    Conv3x5,
    DilConv3x3,
    DilConv3x5,
    MaxPool2x2,
    AvgPool2x2,
    Identity,
    Zero,
}

/// What an operation computes, independent of its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpShape {
    /// Convolution (no bias) followed by batch norm.
    Conv {
        kh: usize,
        kw: usize,
        dilation: usize,
    },
    Pool { kind: PoolKind, k: usize },
    Identity,
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Conv3x3,
        OpKind::Conv3x5,
        OpKind::DilConv3x3,
        OpKind::DilConv3x5,
        OpKind::MaxPool2x2,
        OpKind::AvgPool2x2,
        OpKind::Identity,
        OpKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3x3 => "conv3x3",
            OpKind::Conv3x5 => "conv3x5",
            OpKind::DilConv3x3 => "dilconv3x3",
            OpKind::DilConv3x5 => "dilconv3x5",
            OpKind::MaxPool2x2 => "maxpool2x2",
            OpKind::AvgPool2x2 => "avgpool2x2",
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
        }
    }

    pub fn shape(self) -> OpShape {
        match self {
            OpKind::Conv3x3 => OpShape::Conv {
                kh: 3,
                kw: 3,
                dilation: 1,
            },
            OpKind::Conv3x5 => OpShape::Conv {
                kh: 3,
                kw: 5,
                dilation: 1,
            },
            OpKind::DilConv3x3 => OpShape::Conv {
                kh: 3,
                kw: 3,
                dilation: 2,
            },
            OpKind::DilConv3x5 => OpShape::Conv {
                kh: 3,
                kw: 5,
                dilation: 2,
            },
            OpKind::MaxPool2x2 => OpShape::Pool {
                kind: PoolKind::Max,
                k: 2,
            },
            OpKind::AvgPool2x2 => OpShape::Pool {
                kind: PoolKind::Avg,
                k: 2,
            },
            OpKind::Identity => OpShape::Identity,
            OpKind::Zero => OpShape::Zero,
        }
    }

    pub fn is_parametric(self) -> bool {
        matches!(self.shape(), OpShape::Conv { .. })
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown operation \"{s}\"")))
    }
}

impl Serialize for OpKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered, duplicate-free list of candidate operations. Position `k` in the
/// set is logit index `k` on every edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<OpKind>", into = "Vec<OpKind>")]
pub struct OperationSet(Vec<OpKind>);

impl OperationSet {
    pub fn new(ops: Vec<OpKind>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Contract("operation set is empty".into()));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].contains(op) {
                return Err(Error::Contract(format!("operation {op} listed twice")));
            }
        }
        Ok(OperationSet(ops))
    }

    /// Plain 3×3 / 3×5 convolutions, both 2×2 poolings, identity, zero.
    pub fn basic() -> Self {
        OperationSet(vec![
            OpKind::Conv3x3,
            OpKind::Conv3x5,
            OpKind::MaxPool2x2,
            OpKind::AvgPool2x2,
            OpKind::Identity,
            OpKind::Zero,
        ])
    }

    /// [`OperationSet::basic`] plus dilated 3×3 / 3×5 convolutions.
    pub fn extended() -> Self {
        OperationSet(vec![
            OpKind::Conv3x3,
            OpKind::Conv3x5,
            OpKind::DilConv3x3,
            OpKind::DilConv3x5,
            OpKind::MaxPool2x2,
            OpKind::AvgPool2x2,
            OpKind::Identity,
            OpKind::Zero,
        ])
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, op: OpKind) -> Option<usize> {
        self.0.iter().position(|o| *o == op)
    }
}

impl TryFrom<Vec<OpKind>> for OperationSet {
    type Error = Error;

    fn try_from(v: Vec<OpKind>) -> Result<Self> {
        OperationSet::new(v)
    }
}

impl From<OperationSet> for Vec<OpKind> {
    fn from(s: OperationSet) -> Self {
        s.0
    }
}

impl FromStr for OperationSet {
    type Err = Error;

    /// `basic`, `extended`, or a comma-separated list of operation names.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" | "case1" => Ok(Self::basic()),
            "extended" | "case3" => Ok(Self::extended()),
            list => OperationSet::new(
                list.split(',')
                    .map(|t| t.trim().parse())
                    .collect::<Result<Vec<_>>>()?,
            ),
        }
    }
}
