//! Topology (TSS) and size (SSS) search spaces.
//!
//! TSS points are cells over a 4-node DAG with 6 edges, each edge carrying one
//! of five operations. SSS points are 5-tuples of channel counts. Both spaces
//! are indexed by a mixed-radix code; edge/position 0 is the least significant
//! digit.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TSS_NUM_EDGES: usize = 6;
pub const TSS_SIZE: usize = 15_625;
pub const SSS_NUM_LAYERS: usize = 5;
pub const SSS_SIZE: usize = 32_768;
pub const SSS_CHANNELS: [u32; 8] = [8, 16, 24, 32, 40, 48, 56, 64];

/// Edges `(from, to)` of the cell DAG in the order used by [`TssArch::edge_ops`].
pub const TSS_EDGES: [(usize, usize); TSS_NUM_EDGES] =
    [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpaceError {
    #[error("index {index} out of range for {space} (space size {size})")]
    IndexOutOfRange {
        space: SpaceId,
        index: usize,
        size: usize,
    },
    #[error("invalid architecture id `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    None,
    SkipConnect,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::None,
        OpKind::SkipConnect,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
        OpKind::AvgPool3x3,
    ];

    pub fn digit(self) -> usize {
        self as usize
    }

    pub fn from_digit(d: usize) -> Option<OpKind> {
        Self::ALL.get(d).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Conv1x1 => "conv_1x1",
            OpKind::Conv3x3 => "conv_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| SpaceError::Parse(format!("unknown operation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpaceId {
    #[serde(rename = "tss")]
    Tss,
    #[serde(rename = "sss")]
    Sss,
}

impl SpaceId {
    pub fn size(self) -> usize {
        match self {
            SpaceId::Tss => TSS_SIZE,
            SpaceId::Sss => SSS_SIZE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpaceId::Tss => "tss",
            SpaceId::Sss => "sss",
        }
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpaceId {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tss" => Ok(SpaceId::Tss),
            "sss" => Ok(SpaceId::Sss),
            _ => Err(SpaceError::Parse(format!("unknown search space `{s}`"))),
        }
    }
}

pub fn space_size(space: SpaceId) -> usize {
    space.size()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TssArch {
    pub edge_ops: [OpKind; TSS_NUM_EDGES],
}

impl TssArch {
    pub fn new(edge_ops: [OpKind; TSS_NUM_EDGES]) -> Self {
        Self { edge_ops }
    }

    pub fn decode(index: usize) -> Result<Self, SpaceError> {
        if index >= TSS_SIZE {
            return Err(SpaceError::IndexOutOfRange {
                space: SpaceId::Tss,
                index,
                size: TSS_SIZE,
            });
        }
        let mut rest = index;
        let mut edge_ops = [OpKind::None; TSS_NUM_EDGES];
        for op in edge_ops.iter_mut() {
            *op = OpKind::ALL[rest % 5];
            rest /= 5;
        }
        Ok(Self { edge_ops })
    }

    pub fn encode(&self) -> usize {
        self.edge_ops
            .iter()
            .rev()
            .fold(0, |acc, op| acc * 5 + op.digit())
    }

    /// Operation on edge `(from, to)`, if that edge exists in the cell.
    pub fn op(&self, from: usize, to: usize) -> Option<OpKind> {
        TSS_EDGES
            .iter()
            .position(|&e| e == (from, to))
            .map(|e| self.edge_ops[e])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SssArch {
    pub channels: [u32; SSS_NUM_LAYERS],
}

impl SssArch {
    pub fn new(channels: [u32; SSS_NUM_LAYERS]) -> Result<Self, SpaceError> {
        for c in channels {
            if !SSS_CHANNELS.contains(&c) {
                return Err(SpaceError::Parse(format!(
                    "channel count {c} not in {SSS_CHANNELS:?}"
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn decode(index: usize) -> Result<Self, SpaceError> {
        if index >= SSS_SIZE {
            return Err(SpaceError::IndexOutOfRange {
                space: SpaceId::Sss,
                index,
                size: SSS_SIZE,
            });
        }
        let mut rest = index;
        let mut channels = [0u32; SSS_NUM_LAYERS];
        for c in channels.iter_mut() {
            *c = SSS_CHANNELS[rest % 8];
            rest /= 8;
        }
        Ok(Self { channels })
    }

    pub fn encode(&self) -> usize {
        self.channels.iter().rev().fold(0, |acc, c| {
            let digit = SSS_CHANNELS
                .iter()
                .position(|x| x == c)
                .expect("channel count validated at construction");
            acc * 8 + digit
        })
    }
}

/// A point in either search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "space", rename_all = "snake_case")]
pub enum ArchSpec {
    Tss(TssArch),
    Sss(SssArch),
}

impl ArchSpec {
    pub fn decode(space: SpaceId, index: usize) -> Result<Self, SpaceError> {
        match space {
            SpaceId::Tss => TssArch::decode(index).map(ArchSpec::Tss),
            SpaceId::Sss => SssArch::decode(index).map(ArchSpec::Sss),
        }
    }

    pub fn space(&self) -> SpaceId {
        match self {
            ArchSpec::Tss(_) => SpaceId::Tss,
            ArchSpec::Sss(_) => SpaceId::Sss,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            ArchSpec::Tss(a) => a.encode(),
            ArchSpec::Sss(a) => a.encode(),
        }
    }

    /// Verbose form: `tss:op,op,...` or `sss:c,c,...`.
    pub fn verbose(&self) -> String {
        match self {
            ArchSpec::Tss(a) => {
                let ops: Vec<_> = a.edge_ops.iter().map(|o| o.name()).collect();
                format!("tss:{}", ops.join(","))
            }
            ArchSpec::Sss(a) => {
                let ch: Vec<_> = a.channels.iter().map(|c| c.to_string()).collect();
                format!("sss:{}", ch.join(","))
            }
        }
    }
}

/// Canonical form `tss/<index>` or `sss/<index>`.
impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.space(), self.index())
    }
}

impl FromStr for ArchSpec {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((space, index)) = s.split_once('/') {
            let space: SpaceId = space.parse()?;
            let index: usize = index
                .parse()
                .map_err(|_| SpaceError::Parse(s.to_string()))?;
            return ArchSpec::decode(space, index);
        }
        if let Some((space, body)) = s.split_once(':') {
            let parts: Vec<&str> = body.split(',').map(str::trim).collect();
            return match space.parse::<SpaceId>()? {
                SpaceId::Tss => {
                    if parts.len() != TSS_NUM_EDGES {
                        return Err(SpaceError::Parse(s.to_string()));
                    }
                    let mut edge_ops = [OpKind::None; TSS_NUM_EDGES];
                    for (slot, p) in edge_ops.iter_mut().zip(&parts) {
                        *slot = p.parse()?;
                    }
                    Ok(ArchSpec::Tss(TssArch { edge_ops }))
                }
                SpaceId::Sss => {
                    if parts.len() != SSS_NUM_LAYERS {
                        return Err(SpaceError::Parse(s.to_string()));
                    }
                    let mut channels = [0u32; SSS_NUM_LAYERS];
                    for (slot, p) in channels.iter_mut().zip(&parts) {
                        *slot = p.parse().map_err(|_| SpaceError::Parse(s.to_string()))?;
                    }
                    SssArch::new(channels).map(ArchSpec::Sss)
                }
            };
        }
        Err(SpaceError::Parse(s.to_string()))
    }
}

/// Uniform draw from the whole space.
pub fn sample<R: Rng + ?Sized>(space: SpaceId, rng: &mut R) -> ArchSpec {
    let index = rng.random_range(0..space.size());
    ArchSpec::decode(space, index).expect("index drawn inside the space")
}

/// Resample exactly one coordinate to a different value.
pub fn mutate<R: Rng + ?Sized>(arch: &ArchSpec, rng: &mut R) -> ArchSpec {
    match arch {
        ArchSpec::Tss(a) => {
            let mut out = *a;
            let pos = rng.random_range(0..TSS_NUM_EDGES);
            let current = out.edge_ops[pos].digit();
            // draw from the 4 other values
            let mut d = rng.random_range(0..OpKind::ALL.len() - 1);
            if d >= current {
                d += 1;
            }
            out.edge_ops[pos] = OpKind::ALL[d];
            ArchSpec::Tss(out)
        }
        ArchSpec::Sss(a) => {
            let mut out = *a;
            let pos = rng.random_range(0..SSS_NUM_LAYERS);
            let current = SSS_CHANNELS
                .iter()
                .position(|&c| c == out.channels[pos])
                .expect("valid channel");
            let mut d = rng.random_range(0..SSS_CHANNELS.len() - 1);
            if d >= current {
                d += 1;
            }
            out.channels[pos] = SSS_CHANNELS[d];
            ArchSpec::Sss(out)
        }
    }
}
