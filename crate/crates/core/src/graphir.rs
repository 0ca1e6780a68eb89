//! Computational-graph IR: architectures elaborated into operation DAGs with
//! tensor shapes.
//!
//! Nodes are stored in topological order with dense ids. A node with no inputs
//! reads the graph input tensor. The last node is the single sink.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::searchspace::{ArchSpec, OpKind, SssArch, TssArch};

pub const CONV: &str = "Conv2d";
pub const BATCH_NORM: &str = "BatchNorm";
pub const RELU: &str = "ReLU";
pub const AVG_POOL: &str = "AvgPool2d";
pub const ADD: &str = "Add";
pub const GLOBAL_AVG_POOL: &str = "GlobalAvgPool";
pub const LINEAR: &str = "Linear";

pub const GRAPH_FORMAT: &str = "seval-graph";
pub const GRAPH_VERSION: u32 = 1;
/// Identifies the macro skeleton used by [`elaborate`]; bump when the
/// stem/downsample layout changes.
pub const SKELETON: &str = "cell-stack-v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("cell output is unreachable from the cell input (no non-none path)")]
    NoPath,
    #[error("shape error at node {node}: {reason}")]
    Shape { node: usize, reason: String },
    #[error("node {node}: missing attribute `{attr}` for {op}")]
    MissingAttr {
        node: usize,
        op: String,
        attr: &'static str,
    },
    #[error("node {node}: unknown op `{op}`")]
    UnknownOp { node: usize, op: String },
    #[error("invalid graph: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("graph json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> u64 {
        (self.n * self.c * self.h * self.w) as u64
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GNode {
    pub id: usize,
    pub op: String,
    pub attrs: BTreeMap<String, i64>,
    pub inputs: Vec<usize>,
    pub shape: TensorShape,
}

impl GNode {
    fn attr(&self, key: &'static str) -> Result<usize, GraphError> {
        match self.attrs.get(key) {
            Some(&v) if v >= 0 => Ok(v as usize),
            Some(&v) => Err(GraphError::Shape {
                node: self.id,
                reason: format!("attribute {key}={v} is negative"),
            }),
            None => Err(GraphError::MissingAttr {
                node: self.id,
                op: self.op.clone(),
                attr: key,
            }),
        }
    }

    /// Learnable parameter count of this node (convs carry no bias since a
    /// batch norm always follows).
    pub fn param_count(&self) -> Result<u64, GraphError> {
        Ok(match self.op.as_str() {
            CONV => {
                let k = self.attr("kernel")? as u64;
                k * k * self.attr("in_channels")? as u64 * self.attr("out_channels")? as u64
            }
            BATCH_NORM => 2 * self.shape.c as u64,
            LINEAR => {
                let out = self.attr("out_features")? as u64;
                self.attr("in_features")? as u64 * out + out
            }
            RELU | AVG_POOL | ADD | GLOBAL_AVG_POOL => 0,
            other => {
                return Err(GraphError::UnknownOp {
                    node: self.id,
                    op: other.to_string(),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompGraph {
    pub nodes: Vec<GNode>,
    pub input_shape: TensorShape,
    pub param_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub cells_per_stage: usize,
    pub stage_channels: [usize; 3],
    pub input: TensorShape,
    pub num_classes: usize,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            cells_per_stage: 5,
            stage_channels: [16, 32, 64],
            input: TensorShape::new(1, 3, 32, 32),
            num_classes: 10,
        }
    }
}

impl MacroConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.cells_per_stage == 0
            || self.stage_channels.contains(&0)
            || !self.input.is_valid()
            || self.num_classes == 0
        {
            return Err(format!("macro config has a zero field: {self:?}"));
        }
        Ok(())
    }
}

/// Output shape of `node` given the shapes of its inputs.
fn output_shape(
    node: &GNode,
    inputs: &[TensorShape],
    graph_input: TensorShape,
) -> Result<TensorShape, GraphError> {
    let shape_err = |reason: String| GraphError::Shape {
        node: node.id,
        reason,
    };
    let single = || -> Result<TensorShape, GraphError> {
        match inputs {
            [] => Ok(graph_input),
            [s] => Ok(*s),
            _ => Err(shape_err(format!(
                "{} takes one input, got {}",
                node.op,
                inputs.len()
            ))),
        }
    };
    let window = |x: TensorShape, k: usize, s: usize, p: usize| -> Result<(usize, usize), GraphError> {
        if s == 0 || k == 0 {
            return Err(shape_err("kernel and stride must be positive".into()));
        }
        if x.h + 2 * p < k || x.w + 2 * p < k {
            return Err(shape_err(format!("kernel {k} larger than padded input {x}")));
        }
        Ok(((x.h + 2 * p - k) / s + 1, (x.w + 2 * p - k) / s + 1))
    };
    match node.op.as_str() {
        CONV => {
            let x = single()?;
            let cin = node.attr("in_channels")?;
            if x.c != cin {
                return Err(shape_err(format!(
                    "input has {} channels, conv expects {cin}",
                    x.c
                )));
            }
            let (h, w) = window(x, node.attr("kernel")?, node.attr("stride")?, node.attr("padding")?)?;
            Ok(TensorShape::new(x.n, node.attr("out_channels")?, h, w))
        }
        AVG_POOL => {
            let x = single()?;
            let (h, w) = window(x, node.attr("kernel")?, node.attr("stride")?, node.attr("padding")?)?;
            Ok(TensorShape::new(x.n, x.c, h, w))
        }
        BATCH_NORM | RELU => single(),
        GLOBAL_AVG_POOL => {
            let x = single()?;
            Ok(TensorShape::new(x.n, x.c, 1, 1))
        }
        LINEAR => {
            let x = single()?;
            let fin = node.attr("in_features")?;
            if x.c * x.h * x.w != fin {
                return Err(shape_err(format!(
                    "flattened input {} does not match in_features {fin}",
                    x.c * x.h * x.w
                )));
            }
            Ok(TensorShape::new(x.n, node.attr("out_features")?, 1, 1))
        }
        ADD => {
            let first = *inputs
                .first()
                .ok_or_else(|| shape_err("Add needs at least one input".into()))?;
            if let Some(bad) = inputs.iter().find(|s| **s != first) {
                return Err(shape_err(format!("Add of mismatched shapes {first} and {bad}")));
            }
            Ok(first)
        }
        other => Err(GraphError::UnknownOp {
            node: node.id,
            op: other.to_string(),
        }),
    }
}

/// Recompute every node's output shape and the parameter count.
pub fn infer_shapes(mut graph: CompGraph) -> Result<CompGraph, GraphError> {
    let mut params = 0u64;
    for i in 0..graph.nodes.len() {
        let node = &graph.nodes[i];
        let mut in_shapes = Vec::with_capacity(node.inputs.len());
        for &src in &node.inputs {
            if src >= i {
                return Err(GraphError::Invalid(vec![Violation::ForwardInput {
                    node: i,
                    input: src,
                }]));
            }
            in_shapes.push(graph.nodes[src].shape);
        }
        let shape = output_shape(node, &in_shapes, graph.input_shape)?;
        graph.nodes[i].shape = shape;
        params += graph.nodes[i].param_count()?;
    }
    graph.param_count = params;
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    Empty,
    NonDenseId { position: usize, id: usize },
    /// Input id not strictly smaller than the consuming node's id.
    ForwardInput { node: usize, input: usize },
    DanglingInput { node: usize, input: usize },
    SinkCount { sinks: Vec<usize> },
    /// Node has no path to the sink.
    Unreachable { node: usize },
    BadShape { node: usize },
}

/// Check structural invariants: dense topological ids, a single sink, and
/// every node on a path from the input to the sink.
pub fn validate(graph: &CompGraph) -> Result<(), Vec<Violation>> {
    let n = graph.nodes.len();
    if n == 0 {
        return Err(vec![Violation::Empty]);
    }
    let mut violations = Vec::new();
    let mut consumed = vec![false; n];
    for (pos, node) in graph.nodes.iter().enumerate() {
        if node.id != pos {
            violations.push(Violation::NonDenseId {
                position: pos,
                id: node.id,
            });
        }
        if !node.shape.is_valid() {
            violations.push(Violation::BadShape { node: pos });
        }
        for &src in &node.inputs {
            if src >= n {
                violations.push(Violation::DanglingInput {
                    node: pos,
                    input: src,
                });
            } else {
                if src >= pos {
                    violations.push(Violation::ForwardInput {
                        node: pos,
                        input: src,
                    });
                }
                consumed[src] = true;
            }
        }
    }
    let sinks: Vec<usize> = (0..n).filter(|&i| !consumed[i]).collect();
    if sinks.len() != 1 || sinks[0] != n - 1 {
        violations.push(Violation::SinkCount {
            sinks: sinks.clone(),
        });
    }
    // backward reachability from the last node
    let mut reaches = vec![false; n];
    reaches[n - 1] = true;
    for i in (0..n).rev() {
        if !reaches[i] {
            continue;
        }
        for &src in &graph.nodes[i].inputs {
            if src < i {
                reaches[src] = true;
            }
        }
    }
    violations.extend((0..n).filter(|&i| !reaches[i]).map(|node| Violation::Unreachable { node }));
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

struct Builder {
    nodes: Vec<GNode>,
    input_shape: TensorShape,
}

impl Builder {
    fn new(input_shape: TensorShape) -> Self {
        Self {
            nodes: Vec::new(),
            input_shape,
        }
    }

    fn push(&mut self, op: &str, attrs: &[(&str, usize)], inputs: Vec<usize>) -> usize {
        let id = self.nodes.len();
        let mut node = GNode {
            id,
            op: op.to_string(),
            attrs: attrs.iter().map(|(k, v)| (k.to_string(), *v as i64)).collect(),
            inputs,
            shape: TensorShape::new(1, 1, 1, 1),
        };
        let in_shapes: Vec<TensorShape> = node.inputs.iter().map(|&i| self.nodes[i].shape).collect();
        node.shape = output_shape(&node, &in_shapes, self.input_shape)
            .expect("elaboration builds shape-consistent graphs");
        self.nodes.push(node);
        id
    }

    fn channels(&self, id: Option<usize>) -> usize {
        id.map_or(self.input_shape.c, |i| self.nodes[i].shape.c)
    }

    fn inputs_of(src: Option<usize>) -> Vec<usize> {
        src.into_iter().collect()
    }

    fn conv(&mut self, src: Option<usize>, out: usize, kernel: usize, stride: usize) -> usize {
        let cin = self.channels(src);
        self.push(
            CONV,
            &[
                ("in_channels", cin),
                ("kernel", kernel),
                ("out_channels", out),
                ("padding", kernel / 2),
                ("stride", stride),
            ],
            Self::inputs_of(src),
        )
    }

    fn bn(&mut self, src: usize) -> usize {
        self.push(BATCH_NORM, &[], vec![src])
    }

    fn relu(&mut self, src: usize) -> usize {
        self.push(RELU, &[], vec![src])
    }

    fn conv_bn_relu(&mut self, src: Option<usize>, out: usize, kernel: usize, stride: usize) -> usize {
        let c = self.conv(src, out, kernel, stride);
        let b = self.bn(c);
        self.relu(b)
    }

    fn head(&mut self, src: usize, num_classes: usize) -> usize {
        let c = self.nodes[src].shape.c;
        let g = self.push(GLOBAL_AVG_POOL, &[], vec![src]);
        self.push(
            LINEAR,
            &[("in_features", c), ("out_features", num_classes)],
            vec![g],
        )
    }

    fn finish(self) -> CompGraph {
        let param_count = self
            .nodes
            .iter()
            .map(|n| n.param_count().expect("known ops"))
            .sum();
        canonicalize(&CompGraph {
            nodes: self.nodes,
            input_shape: self.input_shape,
            param_count,
        })
    }
}

/// Which cell nodes lie on a non-none path from node 0 to node 3.
fn live_cell_nodes(arch: &TssArch) -> ([bool; 4], [bool; 4]) {
    let mut fwd = [false; 4];
    fwd[0] = true;
    for j in 1..4 {
        fwd[j] = (0..j).any(|i| fwd[i] && arch.op(i, j) != Some(OpKind::None));
    }
    let mut bwd = [false; 4];
    bwd[3] = true;
    for i in (0..3).rev() {
        bwd[i] = (i + 1..4).any(|j| bwd[j] && arch.op(i, j) != Some(OpKind::None));
    }
    (fwd, bwd)
}

/// True when the cell output has a non-none path from the cell input.
pub fn tss_has_path(arch: &TssArch) -> bool {
    live_cell_nodes(arch).0[3]
}

/// Operations on the edges that survive dead-branch pruning, in edge order.
pub fn tss_active_edges(arch: &TssArch) -> Vec<((usize, usize), OpKind)> {
    let (fwd, bwd) = live_cell_nodes(arch);
    if !fwd[3] {
        return Vec::new();
    }
    crate::searchspace::TSS_EDGES
        .iter()
        .zip(arch.edge_ops.iter())
        .filter(|(&(i, j), &op)| op != OpKind::None && fwd[i] && bwd[j])
        .map(|(&e, &op)| (e, op))
        .collect()
}

fn build_cell(b: &mut Builder, arch: &TssArch, input: usize, channels: usize) -> usize {
    let (fwd, bwd) = live_cell_nodes(arch);
    let mut value = [input; 4];
    for j in 1..4 {
        if !(fwd[j] && bwd[j]) {
            continue;
        }
        let mut terms = Vec::new();
        for i in 0..j {
            let op = arch.op(i, j).expect("cell edge");
            if op == OpKind::None || !fwd[i] {
                continue;
            }
            let src = value[i];
            let out = match op {
                OpKind::None => unreachable!(),
                OpKind::SkipConnect => src,
                OpKind::Conv1x1 => b.conv_bn_relu(Some(src), channels, 1, 1),
                OpKind::Conv3x3 => b.conv_bn_relu(Some(src), channels, 3, 1),
                OpKind::AvgPool3x3 => b.push(
                    AVG_POOL,
                    &[("kernel", 3), ("padding", 1), ("stride", 1)],
                    vec![src],
                ),
            };
            terms.push(out);
        }
        value[j] = match terms.as_slice() {
            [single] => *single,
            _ => b.push(ADD, &[], terms),
        };
    }
    value[3]
}

/// Stem conv, three stages of repeated cells separated by stride-2 conv
/// downsamples, global average pool, linear classifier.
pub fn elaborate_tss(arch: &TssArch, cfg: &MacroConfig) -> Result<CompGraph, GraphError> {
    if !tss_has_path(arch) {
        return Err(GraphError::NoPath);
    }
    let mut b = Builder::new(cfg.input);
    let stem = b.conv(None, cfg.stage_channels[0], 3, 1);
    let mut x = b.bn(stem);
    for (stage, &channels) in cfg.stage_channels.iter().enumerate() {
        if stage > 0 {
            let d = b.conv(Some(x), channels, 3, 2);
            x = b.bn(d);
        }
        for _ in 0..cfg.cells_per_stage {
            x = build_cell(&mut b, arch, x, channels);
        }
    }
    b.head(x, cfg.num_classes);
    Ok(b.finish())
}

/// Five Conv3x3-BN-ReLU blocks (stride 2 on the second and fourth) with the
/// searched output channels, then global average pool and linear classifier.
pub fn elaborate_sss(arch: &SssArch, cfg: &MacroConfig) -> Result<CompGraph, GraphError> {
    let mut b = Builder::new(cfg.input);
    let mut x = None;
    for (block, &c) in arch.channels.iter().enumerate() {
        let stride = if block == 1 || block == 3 { 2 } else { 1 };
        x = Some(b.conv_bn_relu(x, c as usize, 3, stride));
    }
    b.head(x.expect("five blocks"), cfg.num_classes);
    Ok(b.finish())
}

pub fn elaborate(arch: &ArchSpec, cfg: &MacroConfig) -> Result<CompGraph, GraphError> {
    match arch {
        ArchSpec::Tss(a) => elaborate_tss(a, cfg),
        ArchSpec::Sss(a) => elaborate_sss(a, cfg),
    }
}

/// Post-order from the sink: every node after its inputs, inputs visited in
/// ascending id, each node once. Assumes a validated graph.
pub fn postorder(graph: &CompGraph) -> Vec<usize> {
    let n = graph.nodes.len();
    if n == 0 {
        return Vec::new();
    }
    let children: Vec<Vec<usize>> = graph
        .nodes
        .iter()
        .map(|node| {
            let mut c = node.inputs.clone();
            c.sort_unstable();
            c.dedup();
            c
        })
        .collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![(n - 1, 0usize)];
    seen[n - 1] = true;
    while let Some((node, next)) = stack.last_mut() {
        let node = *node;
        if let Some(&child) = children[node].get(*next) {
            *next += 1;
            if !seen[child] {
                seen[child] = true;
                stack.push((child, 0));
            }
        } else {
            order.push(node);
            stack.pop();
        }
    }
    order
}

/// Renumber nodes in [`postorder`] so graphs that differ only in node
/// numbering become equal.
pub fn canonicalize(graph: &CompGraph) -> CompGraph {
    let order = postorder(graph);
    let mut new_id = vec![usize::MAX; graph.nodes.len()];
    for (new, &old) in order.iter().enumerate() {
        new_id[old] = new;
    }
    let nodes = order
        .iter()
        .enumerate()
        .map(|(new, &old)| {
            let node = &graph.nodes[old];
            GNode {
                id: new,
                op: node.op.clone(),
                attrs: node.attrs.clone(),
                inputs: node.inputs.iter().map(|&i| new_id[i]).collect(),
                shape: node.shape,
            }
        })
        .collect();
    CompGraph {
        nodes,
        input_shape: graph.input_shape,
        param_count: graph.param_count,
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    format: String,
    version: u32,
    skeleton: String,
    input_shape: TensorShape,
    param_count: u64,
    nodes: Vec<GNode>,
}

impl CompGraph {
    pub fn to_json(&self) -> String {
        let doc = GraphDocument {
            format: GRAPH_FORMAT.to_string(),
            version: GRAPH_VERSION,
            skeleton: SKELETON.to_string(),
            input_shape: self.input_shape,
            param_count: self.param_count,
            nodes: self.nodes.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }

    /// Parse a graph document; shapes and parameter count are recomputed and
    /// the structure validated.
    pub fn from_json(text: &str) -> Result<CompGraph, GraphError> {
        let doc: GraphDocument =
            serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
        if doc.format != GRAPH_FORMAT || doc.version != GRAPH_VERSION {
            return Err(GraphError::Json(format!(
                "unsupported graph document {} v{}",
                doc.format, doc.version
            )));
        }
        let graph = CompGraph {
            nodes: doc.nodes,
            input_shape: doc.input_shape,
            param_count: 0,
        };
        validate(&graph).map_err(GraphError::Invalid)?;
        infer_shapes(graph)
    }

    /// Ids of the nodes consuming each node's output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for node in &self.nodes {
            for &src in &node.inputs {
                if !out[src].contains(&node.id) {
                    out[src].push(node.id);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{SpaceId, TSS_SIZE};

    fn tss(ops: [OpKind; 6]) -> TssArch {
        TssArch::new(ops)
    }

    fn count_op(g: &CompGraph, op: &str) -> usize {
        g.nodes.iter().filter(|n| n.op == op).count()
    }

    #[test]
    fn identity_cell_has_no_cell_compute() {
        let mut ops = [OpKind::None; 6];
        ops[3] = OpKind::SkipConnect; // edge (0,3)
        let g = elaborate_tss(&tss(ops), &MacroConfig::default()).unwrap();
        let names: Vec<&str> = g.nodes.iter().map(|n| n.op.as_str()).collect();
        assert_eq!(
            names,
            [CONV, BATCH_NORM, CONV, BATCH_NORM, CONV, BATCH_NORM, GLOBAL_AVG_POOL, LINEAR]
        );
        assert!(validate(&g).is_ok());
    }

    #[test]
    fn all_conv3x3_cell_node_counts() {
        let cfg = MacroConfig {
            cells_per_stage: 1,
            ..MacroConfig::default()
        };
        let g = elaborate_tss(&tss([OpKind::Conv3x3; 6]), &cfg).unwrap();
        // stem (2) + 3 cells * (6 triples + 2 adds) + 2 downsamples (2 each) + head (2)
        assert_eq!(count_op(&g, ADD), 3 * 2);
        assert_eq!(count_op(&g, RELU), 3 * 6);
        assert_eq!(count_op(&g, CONV), 1 + 3 * 6 + 2);
        assert_eq!(count_op(&g, BATCH_NORM), 1 + 3 * 6 + 2);
        // node 3 sums three terms, node 2 two
        let arities: Vec<usize> = g
            .nodes
            .iter()
            .filter(|n| n.op == ADD)
            .take(2)
            .map(|n| n.inputs.len())
            .collect();
        assert_eq!(arities, [2, 3]);
    }

    #[test]
    fn stage_shapes() {
        let cfg = MacroConfig::default();
        let g = elaborate_tss(&tss([OpKind::Conv3x3; 6]), &cfg).unwrap();
        // the first stride-2 conv consumes the last stage-1 cell output
        let first_down = g
            .nodes
            .iter()
            .find(|n| n.op == CONV && n.attrs["stride"] == 2)
            .unwrap();
        let before = g.nodes[first_down.inputs[0]].shape;
        assert_eq!(before, TensorShape::new(1, 16, 32, 32));
        assert_eq!(first_down.shape, TensorShape::new(1, 32, 16, 16));
        assert_eq!(g.nodes.last().unwrap().shape, TensorShape::new(1, 10, 1, 1));
    }

    #[test]
    fn no_path_is_rejected() {
        assert_eq!(
            elaborate_tss(&tss([OpKind::None; 6]), &MacroConfig::default()),
            Err(GraphError::NoPath)
        );
        // (0,1) conv but nothing leaves node 1
        let mut ops = [OpKind::None; 6];
        ops[0] = OpKind::Conv3x3;
        assert!(elaborate_tss(&tss(ops), &MacroConfig::default()).is_err());
    }

    #[test]
    fn dead_branches_are_pruned() {
        // (0,3)=conv3x3 only
        let mut a = [OpKind::None; 6];
        a[3] = OpKind::Conv3x3;
        // same plus (0,1)=conv1x1 whose output never reaches node 3
        let mut b = a;
        b[0] = OpKind::Conv1x1;
        let cfg = MacroConfig::default();
        assert_eq!(elaborate_tss(&tss(a), &cfg), elaborate_tss(&tss(b), &cfg));
    }

    #[test]
    fn sss_minimal_params_closed_form() {
        let cfg = MacroConfig::default();
        let g = elaborate_sss(&SssArch::new([8; 5]).unwrap(), &cfg).unwrap();
        let convs = 9 * 3 * 8 + 4 * 9 * 8 * 8;
        let bns = 5 * 2 * 8;
        let linear = 8 * 10 + 10;
        assert_eq!(g.param_count, (convs + bns + linear) as u64);
        let last_block = &g.nodes[g.nodes.len() - 3];
        assert_eq!(last_block.shape, TensorShape::new(1, 8, 8, 8));
    }

    #[test]
    fn sss_doubling_channels_quadruples_interior_convs() {
        let cfg = MacroConfig::default();
        let small = elaborate_sss(&SssArch::new([8; 5]).unwrap(), &cfg).unwrap();
        let big = elaborate_sss(&SssArch::new([16; 5]).unwrap(), &cfg).unwrap();
        let conv_params = |g: &CompGraph| -> Vec<u64> {
            g.nodes
                .iter()
                .filter(|n| n.op == CONV)
                .map(|n| n.param_count().unwrap())
                .collect()
        };
        let (s, b) = (conv_params(&small), conv_params(&big));
        for i in 1..5 {
            assert_eq!(b[i], 4 * s[i]);
        }
        // first block reads the fixed 3-channel input
        assert_eq!(b[0], 2 * s[0]);
        let big64 = elaborate_sss(&SssArch::new([64; 5]).unwrap(), &cfg).unwrap();
        assert_eq!(big64.nodes[big64.nodes.len() - 3].shape, TensorShape::new(1, 64, 8, 8));
    }

    fn node(id: usize, op: &str, attrs: &[(&str, i64)], inputs: Vec<usize>) -> GNode {
        GNode {
            id,
            op: op.to_string(),
            attrs: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            inputs,
            shape: TensorShape::new(1, 1, 1, 1),
        }
    }

    fn conv_attrs(cin: i64, cout: i64, stride: i64) -> Vec<(&'static str, i64)> {
        vec![
            ("in_channels", cin),
            ("kernel", 3),
            ("out_channels", cout),
            ("padding", 1),
            ("stride", stride),
        ]
    }

    #[test]
    fn conv_shape_arithmetic() {
        let g = CompGraph {
            nodes: vec![
                node(0, CONV, &conv_attrs(16, 24, 1), vec![]),
                node(1, CONV, &conv_attrs(24, 24, 2), vec![0]),
            ],
            input_shape: TensorShape::new(1, 16, 32, 32),
            param_count: 0,
        };
        let g = infer_shapes(g).unwrap();
        assert_eq!(g.nodes[0].shape, TensorShape::new(1, 24, 32, 32));
        assert_eq!(g.nodes[1].shape, TensorShape::new(1, 24, 16, 16));
        assert_eq!(g.param_count, 9 * 16 * 24 + 9 * 24 * 24);
    }

    #[test]
    fn add_shape_mismatch_names_node() {
        let g = CompGraph {
            nodes: vec![
                node(0, BATCH_NORM, &[], vec![]),
                node(1, CONV, &conv_attrs(16, 32, 2), vec![0]),
                node(2, ADD, &[], vec![0, 1]),
            ],
            input_shape: TensorShape::new(1, 16, 32, 32),
            param_count: 0,
        };
        match infer_shapes(g) {
            Err(GraphError::Shape { node, .. }) => assert_eq!(node, 2),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn validate_detects_injected_defects() {
        let cfg = MacroConfig::default();
        let g = elaborate(&ArchSpec::decode(SpaceId::Tss, 6_000).unwrap(), &cfg).unwrap();
        assert!(validate(&g).is_ok());

        let mut cyclic = g.clone();
        cyclic.nodes[3].inputs.push(7);
        let v = validate(&cyclic).unwrap_err();
        assert!(v.contains(&Violation::ForwardInput { node: 3, input: 7 }));

        let mut orphan = g.clone();
        let id = orphan.nodes.len();
        orphan.nodes.insert(
            id - 1,
            node(id - 1, RELU, &[], vec![0]),
        );
        // keep ids dense: shift the old sink and rewire it
        let last = orphan.nodes.last_mut().unwrap();
        last.id = id;
        last.inputs = vec![id - 2];
        let v = validate(&orphan).unwrap_err();
        assert!(v.contains(&Violation::Unreachable { node: id - 1 }));
        assert!(matches!(validate(&CompGraph { nodes: vec![], ..g }), Err(v) if v == vec![Violation::Empty]));
    }

    #[test]
    fn json_round_trip() {
        let g = elaborate(&"tss/9876".parse().unwrap(), &MacroConfig::default()).unwrap();
        let back = CompGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        assert!(g.to_json().contains(SKELETON));
    }

    #[test]
    fn elaboration_is_deterministic_and_valid_for_all_tss() {
        let cfg = MacroConfig::default();
        for idx in (0..TSS_SIZE).step_by(7) {
            let arch = ArchSpec::decode(SpaceId::Tss, idx).unwrap();
            match elaborate(&arch, &cfg) {
                Ok(g) => {
                    assert!(validate(&g).is_ok(), "{arch}");
                    assert_eq!(g, elaborate(&arch, &cfg).unwrap());
                    assert_eq!(infer_shapes(g.clone()).unwrap(), g);
                }
                Err(GraphError::NoPath) => {
                    let ArchSpec::Tss(t) = arch else { unreachable!() };
                    assert!(tss_active_edges(&t).is_empty());
                }
                Err(e) => panic!("{arch}: {e}"),
            }
        }
    }
}
