//! Declarative CNN representation: named blocks over a layer DAG, with
//! intermediate-output taps, parameter freezing, and block replacement.

mod exec;
mod file;

pub use exec::{Mode, RunOut};
pub use file::{load, parse_structure, save, serialize, structure_text, FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::ops::{BatchNormParams, ConvParams, LinearParams};
use crate::rng;
use crate::tensor::Tensor;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

/// Name a node's upstream: the block input, or another node in the block.
pub const BLOCK_INPUT: &str = "@in";

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        eps: f32,
        momentum: f32,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        out_features: usize,
    },
    Concat,
    Add,
}

impl LayerKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::GlobalAvgPool => "global_avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
        }
    }

    pub fn is_merge(&self) -> bool {
        matches!(self, LayerKind::Concat | LayerKind::Add)
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::BatchNorm { .. } | LayerKind::Linear { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    Feature,
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub role: BlockRole,
    pub nodes: Vec<LayerSpec>,
}

/// Parameter arrays owned by one node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeParams {
    Conv(ConvParams),
    BatchNorm(BatchNormParams),
    Linear(LinearParams),
}

impl NodeParams {
    /// Parameter arrays in serialization order: `(field tag, tensor)`.
    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            NodeParams::Conv(p) => vec![("w", &p.weight), ("b", &p.bias)],
            NodeParams::BatchNorm(p) => vec![
                ("g", &p.gamma),
                ("beta", &p.beta),
                ("rm", &p.running_mean),
                ("rv", &p.running_var),
            ],
            NodeParams::Linear(p) => vec![("w", &p.weight), ("b", &p.bias)],
        }
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            NodeParams::Conv(p) => vec![("w", &mut p.weight), ("b", &mut p.bias)],
            NodeParams::BatchNorm(p) => vec![
                ("g", &mut p.gamma),
                ("beta", &mut p.beta),
                ("rm", &mut p.running_mean),
                ("rv", &mut p.running_var),
            ],
            NodeParams::Linear(p) => vec![("w", &mut p.weight), ("b", &mut p.bias)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Output extent of a node (batch dimension excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeShape {
    Image { c: usize, h: usize, w: usize },
    Flat { features: usize },
}

impl NodeShape {
    pub fn describe(&self) -> String {
        match self {
            NodeShape::Image { c, h, w } => format!("{c}x{h}x{w}"),
            NodeShape::Flat { features } => format!("{features}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelMeta {
    /// Input image extent as (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
}

/// Where a compiled node reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Src {
    BlockInput,
    Node(usize),
}

/// One node flattened into global execution order (blocks in order, nodes in
/// topological order within each block).
#[derive(Debug, Clone)]
pub(crate) struct CompiledNode {
    pub id: String,
    pub block: usize,
    pub kind: LayerKind,
    pub srcs: Vec<Src>,
    pub out_shape: NodeShape,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Compiled {
    pub nodes: Vec<CompiledNode>,
    /// Global node index of each block's sink.
    pub block_sink: Vec<usize>,
    /// Global node index range `[start, end)` of each block.
    pub block_range: Vec<(usize, usize)>,
}

/// How to obtain parameters when building a graph.
pub enum ParamInit {
    /// Fresh fan-in-scaled uniform initialization, seeded per node id.
    Seed(u64),
    /// Use the provided arrays (extents validated against the structure).
    Provided(BTreeMap<String, NodeParams>),
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    meta: ModelMeta,
    blocks: Vec<BlockSpec>,
    params: BTreeMap<String, NodeParams>,
    frozen: BTreeSet<String>,
    compiled: Compiled,
}

pub fn node_id(block: &str, node: &str) -> String {
    format!("{block}/{node}")
}

impl ModelGraph {
    pub fn build(meta: ModelMeta, blocks: Vec<BlockSpec>, init: ParamInit) -> Result<Self> {
        let compiled = compile(&meta, &blocks)?;
        let params = match init {
            ParamInit::Seed(seed) => init_params(&meta, &blocks, &compiled, seed)?,
            ParamInit::Provided(map) => {
                validate_params(&meta, &blocks, &compiled, &map)?;
                map
            }
        };
        Ok(ModelGraph {
            meta,
            blocks,
            params,
            frozen: BTreeSet::new(),
            compiled,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Result<&BlockSpec> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Graph(format!("unknown block {name:?}")))
    }

    pub fn feature_blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.blocks
            .iter()
            .filter(|b| b.role == BlockRole::Feature)
    }

    pub fn classifier_block(&self) -> &BlockSpec {
        self.blocks
            .last()
            .expect("validated graph has a classifier")
    }

    pub fn params(&self) -> &BTreeMap<String, NodeParams> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, NodeParams> {
        &mut self.params
    }

    pub fn node_params(&self, id: &str) -> Result<&NodeParams> {
        self.params
            .get(id)
            .ok_or_else(|| Error::Graph(format!("no parameters for node {id:?}")))
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub(crate) fn compiled(&self) -> &Compiled {
        &self.compiled
    }

    /// Output extent of a block's exit node (batch excluded).
    pub fn block_output_shape(&self, name: &str) -> Result<NodeShape> {
        let idx = self
            .blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Graph(format!("unknown block {name:?}")))?;
        Ok(self.compiled.nodes[self.compiled.block_sink[idx]].out_shape)
    }

    /// Input extent a block receives (batch excluded).
    pub fn block_input_shape(&self, name: &str) -> Result<NodeShape> {
        let idx = self
            .blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Graph(format!("unknown block {name:?}")))?;
        Ok(if idx == 0 {
            let (c, h, w) = self.meta.input;
            NodeShape::Image { c, h, w }
        } else {
            self.compiled.nodes[self.compiled.block_sink[idx - 1]].out_shape
        })
    }

    // -- freezing ----------------------------------------------------------

    pub fn freeze<I: IntoIterator<Item = S>, S: Into<String>>(&mut self, ids: I) -> Result<()> {
        for id in ids {
            let id = id.into();
            if !self.params.contains_key(&id) {
                return Err(Error::Graph(format!(
                    "cannot freeze {id:?}: not a parameterized node"
                )));
            }
            self.frozen.insert(id);
        }
        Ok(())
    }

    pub fn unfreeze<I: IntoIterator<Item = S>, S: AsRef<str>>(&mut self, ids: I) -> Result<()> {
        for id in ids {
            let id = id.as_ref();
            if !self.params.contains_key(id) {
                return Err(Error::Graph(format!(
                    "cannot unfreeze {id:?}: not a parameterized node"
                )));
            }
            self.frozen.remove(id);
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// Freeze every parameterized node except those of `block`.
    pub fn freeze_all_except_block(&mut self, block: &str) -> Result<()> {
        self.block(block)?;
        let prefix = format!("{block}/");
        let ids: Vec<String> = self
            .params
            .keys()
            .filter(|id| !id.starts_with(&prefix))
            .cloned()
            .collect();
        self.freeze(ids)
    }

    pub fn is_frozen(&self, id: &str) -> bool {
        self.frozen.contains(id)
    }

    // -- bookkeeping --------------------------------------------------------

    pub fn param_count(&self) -> usize {
        self.params.values().map(NodeParams::param_count).sum()
    }

    /// 32-bit storage: 4 bytes per parameter.
    pub fn param_bytes(&self) -> usize {
        4 * self.param_count()
    }

    /// SHA-256 of the serialized model, hex-encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serialize(self);
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            for (_, t) in p.fields_mut() {
                t.zero_grad();
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            for (_, t) in p.fields_mut() {
                t.clear_grad();
            }
        }
    }

    // -- surgery -------------------------------------------------------------

    /// Replace the contiguous run of feature blocks `first..=last` with a new
    /// block. The new block must consume and produce exactly the extents of
    /// the replaced span; everything outside the span is preserved
    /// bit-identically.
    pub fn replace_block_span(
        &self,
        first: &str,
        last: &str,
        new_block: BlockSpec,
        new_params: BTreeMap<String, NodeParams>,
    ) -> Result<ModelGraph> {
        let fi = self
            .blocks
            .iter()
            .position(|b| b.name == first)
            .ok_or_else(|| Error::Graph(format!("unknown block {first:?}")))?;
        let li = self
            .blocks
            .iter()
            .position(|b| b.name == last)
            .ok_or_else(|| Error::Graph(format!("unknown block {last:?}")))?;
        if fi > li {
            return Err(Error::Graph(format!(
                "block span {first:?}..{last:?} is not in graph order"
            )));
        }
        if self.blocks[fi..=li]
            .iter()
            .any(|b| b.role != BlockRole::Feature)
        {
            return Err(Error::Graph(
                "only feature blocks can be replaced".to_string(),
            ));
        }
        let span_in = self.block_input_shape(first)?;
        let span_out = self.block_output_shape(last)?;

        let mut blocks: Vec<BlockSpec> = Vec::with_capacity(self.blocks.len());
        blocks.extend_from_slice(&self.blocks[..fi]);
        blocks.push(new_block.clone());
        blocks.extend_from_slice(&self.blocks[li + 1..]);

        let removed: HashSet<String> = self.blocks[fi..=li]
            .iter()
            .flat_map(|b| b.nodes.iter().map(|n| node_id(&b.name, &n.name)))
            .collect();
        let mut params: BTreeMap<String, NodeParams> = self
            .params
            .iter()
            .filter(|(id, _)| !removed.contains(*id))
            .map(|(id, p)| (id.clone(), p.clone()))
            .collect();
        for (id, p) in new_params {
            if !id.starts_with(&format!("{}/", new_block.name)) {
                return Err(Error::Graph(format!(
                    "replacement parameter {id:?} does not belong to block {:?}",
                    new_block.name
                )));
            }
            params.insert(id, p);
        }

        let graph = ModelGraph::build(self.meta.clone(), blocks, ParamInit::Provided(params))
            .map_err(|e| match e {
                Error::Shape(msg) | Error::Graph(msg) => Error::Interface {
                    context: format!("replace {first:?}..{last:?}"),
                    expected: format!("in {} -> out {}", span_in.describe(), span_out.describe()),
                    actual: msg,
                },
                other => other,
            })?;

        // The splice must preserve the downstream interface exactly.
        let new_out = graph.block_output_shape(&new_block.name)?;
        if new_out != span_out {
            return Err(Error::Interface {
                context: format!("replace {first:?}..{last:?}"),
                expected: span_out.describe(),
                actual: new_out.describe(),
            });
        }
        let mut graph = graph;
        graph.frozen = self
            .frozen
            .iter()
            .filter(|id| !removed.contains(*id))
            .cloned()
            .collect();
        Ok(graph)
    }

    pub fn replace_block(
        &self,
        name: &str,
        new_block: BlockSpec,
        new_params: BTreeMap<String, NodeParams>,
    ) -> Result<ModelGraph> {
        self.replace_block_span(name, name, new_block, new_params)
    }
}

// ---------------------------------------------------------------------------
// compilation: validation + shape propagation + topological order
// ---------------------------------------------------------------------------

fn propagate(kind: &LayerKind, id: &str, inputs: &[NodeShape]) -> Result<NodeShape> {
    use crate::ops::conv_out_extent;
    let image = |s: &NodeShape| -> Result<(usize, usize, usize)> {
        match s {
            NodeShape::Image { c, h, w } => Ok((*c, *h, *w)),
            NodeShape::Flat { .. } => Err(Error::Graph(format!(
                "{id}: expected an image input, got a flat tensor"
            ))),
        }
    };
    match kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (_, h, w) = image(&inputs[0])?;
            let oh = conv_out_extent(h, *kernel, *stride, *padding)
                .map_err(|e| Error::Graph(format!("{id}: {e}")))?;
            let ow = conv_out_extent(w, *kernel, *stride, *padding)
                .map_err(|e| Error::Graph(format!("{id}: {e}")))?;
            Ok(NodeShape::Image {
                c: *out_channels,
                h: oh,
                w: ow,
            })
        }
        LayerKind::BatchNorm { .. } | LayerKind::Relu => Ok(inputs[0]),
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            let (c, h, w) = image(&inputs[0])?;
            let oh = conv_out_extent(h, *kernel, *stride, 0)
                .map_err(|e| Error::Graph(format!("{id}: {e}")))?;
            let ow = conv_out_extent(w, *kernel, *stride, 0)
                .map_err(|e| Error::Graph(format!("{id}: {e}")))?;
            Ok(NodeShape::Image { c, h: oh, w: ow })
        }
        LayerKind::GlobalAvgPool => {
            let (c, _, _) = image(&inputs[0])?;
            Ok(NodeShape::Image { c, h: 1, w: 1 })
        }
        LayerKind::Flatten => {
            let (c, h, w) = image(&inputs[0])?;
            Ok(NodeShape::Flat { features: c * h * w })
        }
        LayerKind::Linear { out_features } => match inputs[0] {
            NodeShape::Flat { .. } => Ok(NodeShape::Flat {
                features: *out_features,
            }),
            NodeShape::Image { .. } => Err(Error::Graph(format!(
                "{id}: linear expects a flat input (insert flatten)"
            ))),
        },
        LayerKind::Concat => {
            let (c0, h0, w0) = image(&inputs[0])?;
            let mut c = c0;
            for s in &inputs[1..] {
                let (ci, hi, wi) = image(s)?;
                if (hi, wi) != (h0, w0) {
                    return Err(Error::Graph(format!(
                        "{id}: concat spatial mismatch {h0}x{w0} vs {hi}x{wi}"
                    )));
                }
                c += ci;
            }
            Ok(NodeShape::Image { c, h: h0, w: w0 })
        }
        LayerKind::Add => {
            let first = inputs[0];
            for s in &inputs[1..] {
                if *s != first {
                    return Err(Error::Graph(format!(
                        "{id}: add extent mismatch {} vs {}",
                        first.describe(),
                        s.describe()
                    )));
                }
            }
            Ok(first)
        }
    }
}

/// Topological order of a block's nodes (deterministic: declaration order
/// breaks ties). Also rejects duplicate names, unknown inputs, and cycles.
pub(crate) fn block_topo_order(block: &BlockSpec) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = block
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.as_str(), i))
        .collect();
    if index.len() != block.nodes.len() {
        return Err(Error::Graph(format!(
            "block {:?} has duplicate node names",
            block.name
        )));
    }
    // Kahn's algorithm, deterministic by node declaration order.
    let n = block.nodes.len();
    let mut indeg = vec![0usize; n];
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in block.nodes.iter().enumerate() {
        for inp in &node.inputs {
            if inp == BLOCK_INPUT {
                continue;
            }
            let &j = index.get(inp.as_str()).ok_or_else(|| {
                Error::Graph(format!(
                    "block {:?}: node {:?} references unknown input {inp:?}",
                    block.name, node.name
                ))
            })?;
            out_edges[j].push(i);
            indeg[i] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|i| indeg[*i] == 0).collect();
    ready.reverse(); // pop from the back keeps declaration order
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(i);
        for &j in &out_edges[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                // insert keeping ascending declaration order at the back
                let pos = ready
                    .iter()
                    .rposition(|&r| r < j)
                    .map(|p| p + 1)
                    .unwrap_or(0);
                ready.insert(pos, j);
            }
        }
    }
    if order.len() != n {
        return Err(Error::Graph(format!(
            "block {:?} contains a cycle",
            block.name
        )));
    }
    Ok(order)
}

pub(crate) fn compile(meta: &ModelMeta, blocks: &[BlockSpec]) -> Result<Compiled> {
    if meta.classes < 2 {
        return Err(Error::Graph("model needs at least 2 classes".into()));
    }
    if blocks.is_empty() {
        return Err(Error::Graph("model has no blocks".into()));
    }
    let n_classifier = blocks
        .iter()
        .filter(|b| b.role == BlockRole::Classifier)
        .count();
    if n_classifier != 1 || blocks.last().unwrap().role != BlockRole::Classifier {
        return Err(Error::Graph(
            "model must have exactly one classifier block, positioned last".into(),
        ));
    }
    let mut seen_blocks = HashSet::new();
    for b in blocks {
        if !seen_blocks.insert(b.name.as_str()) {
            return Err(Error::Graph(format!("duplicate block name {:?}", b.name)));
        }
        if b.nodes.is_empty() {
            return Err(Error::Graph(format!("block {:?} has no nodes", b.name)));
        }
    }

    let mut compiled = Compiled::default();
    let (c, h, w) = meta.input;
    let mut block_input = NodeShape::Image { c, h, w };

    for (bi, block) in blocks.iter().enumerate() {
        let order = block_topo_order(block)?;
        let start = compiled.nodes.len();
        // consumed-by count to find the single sink
        let mut consumed: HashMap<&str, usize> = HashMap::new();
        let mut uses_input = false;
        for node in &block.nodes {
            match (&node.kind, node.inputs.len()) {
                (k, n) if k.is_merge() && n < 2 => {
                    return Err(Error::Graph(format!(
                        "{}: {} requires >= 2 inputs, got {n}",
                        node_id(&block.name, &node.name),
                        k.keyword()
                    )))
                }
                (k, n) if !k.is_merge() && n != 1 => {
                    return Err(Error::Graph(format!(
                        "{}: {} takes exactly 1 input, got {n}",
                        node_id(&block.name, &node.name),
                        k.keyword()
                    )))
                }
                _ => {}
            }
            for inp in &node.inputs {
                if inp == BLOCK_INPUT {
                    uses_input = true;
                } else {
                    *consumed.entry(inp.as_str()).or_default() += 1;
                }
            }
        }
        if !uses_input {
            return Err(Error::Graph(format!(
                "block {:?} never reads its input",
                block.name
            )));
        }
        let sinks: Vec<&LayerSpec> = block
            .nodes
            .iter()
            .filter(|n| !consumed.contains_key(n.name.as_str()))
            .collect();
        if sinks.len() != 1 {
            return Err(Error::Graph(format!(
                "block {:?} must have exactly one exit node, found {}",
                block.name,
                sinks.len()
            )));
        }
        let sink_name = sinks[0].name.clone();

        // shape propagation in topological order
        let mut shapes: HashMap<&str, NodeShape> = HashMap::new();
        let mut global_of: HashMap<&str, usize> = HashMap::new();
        for &ni in &order {
            let node = &block.nodes[ni];
            let id = node_id(&block.name, &node.name);
            if block.role == BlockRole::Feature
                && matches!(node.kind, LayerKind::Flatten | LayerKind::Linear { .. })
            {
                return Err(Error::Graph(format!(
                    "{id}: {} is not allowed in a feature block",
                    node.kind.keyword()
                )));
            }
            let mut srcs = Vec::with_capacity(node.inputs.len());
            let mut in_shapes = Vec::with_capacity(node.inputs.len());
            for inp in &node.inputs {
                if inp == BLOCK_INPUT {
                    srcs.push(Src::BlockInput);
                    in_shapes.push(block_input);
                } else {
                    srcs.push(Src::Node(global_of[inp.as_str()]));
                    in_shapes.push(shapes[inp.as_str()]);
                }
            }
            let out_shape = propagate(&node.kind, &id, &in_shapes)?;
            shapes.insert(node.name.as_str(), out_shape);
            global_of.insert(node.name.as_str(), compiled.nodes.len());
            compiled.nodes.push(CompiledNode {
                id,
                block: bi,
                kind: node.kind.clone(),
                srcs,
                out_shape,
            });
        }
        let sink_global = global_of[sink_name.as_str()];
        let sink_shape = compiled.nodes[sink_global].out_shape;
        if block.role == BlockRole::Feature && !matches!(sink_shape, NodeShape::Image { .. }) {
            return Err(Error::Graph(format!(
                "feature block {:?} must produce an image tensor",
                block.name
            )));
        }
        compiled.block_sink.push(sink_global);
        compiled.block_range.push((start, compiled.nodes.len()));
        block_input = sink_shape;
    }

    match block_input {
        NodeShape::Flat { features } if features == meta.classes => {}
        other => {
            return Err(Error::Graph(format!(
                "classifier must produce {} logits, got {}",
                meta.classes,
                other.describe()
            )))
        }
    }
    Ok(compiled)
}

/// Input channels (or features) each parameterized node receives, derived
/// from the compiled shapes.
fn node_input_channels(compiled: &Compiled, idx: usize, meta: &ModelMeta) -> usize {
    let node = &compiled.nodes[idx];
    let shape = match node.srcs[0] {
        Src::BlockInput => {
            if node.block == 0 {
                let (c, h, w) = meta.input;
                NodeShape::Image { c, h, w }
            } else {
                compiled.nodes[compiled.block_sink[node.block - 1]].out_shape
            }
        }
        Src::Node(j) => compiled.nodes[j].out_shape,
    };
    match shape {
        NodeShape::Image { c, .. } => c,
        NodeShape::Flat { features } => features,
    }
}

fn init_params(
    meta: &ModelMeta,
    _blocks: &[BlockSpec],
    compiled: &Compiled,
    seed: u64,
) -> Result<BTreeMap<String, NodeParams>> {
    let mut params = BTreeMap::new();
    for (idx, node) in compiled.nodes.iter().enumerate() {
        let p = match &node.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let ic = node_input_channels(compiled, idx, meta);
                let fan_in = ic * kernel * kernel;
                let bound = (6.0 / fan_in as f32).sqrt();
                let mut rng = rng::stream(seed, &format!("init/{}", node.id), 0);
                let conv = match &node.kind {
                    LayerKind::Conv {
                        stride, padding, ..
                    } => ConvParams {
                        weight: Tensor::uniform(
                            vec![*out_channels, ic, *kernel, *kernel],
                            bound,
                            &mut rng,
                        ),
                        bias: Tensor::zeros(vec![*out_channels]),
                        stride: *stride,
                        padding: *padding,
                    },
                    _ => unreachable!(),
                };
                NodeParams::Conv(conv)
            }
            LayerKind::BatchNorm { eps, momentum } => {
                let c = node_input_channels(compiled, idx, meta);
                let mut bn = BatchNormParams::identity(c);
                bn.eps = *eps;
                bn.momentum = *momentum;
                NodeParams::BatchNorm(bn)
            }
            LayerKind::Linear { out_features } => {
                let fin = node_input_channels(compiled, idx, meta);
                let bound = (6.0 / fin as f32).sqrt();
                let mut rng = rng::stream(seed, &format!("init/{}", node.id), 0);
                NodeParams::Linear(LinearParams {
                    weight: Tensor::uniform(vec![*out_features, fin], bound, &mut rng),
                    bias: Tensor::zeros(vec![*out_features]),
                })
            }
            _ => continue,
        };
        params.insert(node.id.clone(), p);
    }
    Ok(params)
}

fn validate_params(
    meta: &ModelMeta,
    _blocks: &[BlockSpec],
    compiled: &Compiled,
    params: &BTreeMap<String, NodeParams>,
) -> Result<()> {
    let mut needed = 0usize;
    for (idx, node) in compiled.nodes.iter().enumerate() {
        if !node.kind.has_params() {
            continue;
        }
        needed += 1;
        let p = params.get(&node.id).ok_or_else(|| {
            Error::Graph(format!("missing parameters for node {:?}", node.id))
        })?;
        let ic = node_input_channels(compiled, idx, meta);
        match (&node.kind, p) {
            (
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                NodeParams::Conv(cp),
            ) => {
                cp.validate()?;
                let want = [*out_channels, ic, *kernel, *kernel];
                if cp.weight.shape() != want {
                    return Err(Error::Graph(format!(
                        "{}: conv weight extent {:?} does not match declared {:?}",
                        node.id,
                        cp.weight.shape(),
                        want
                    )));
                }
                if cp.stride != *stride || cp.padding != *padding {
                    return Err(Error::Graph(format!(
                        "{}: conv stride/padding {}/{} do not match declared {}/{}",
                        node.id, cp.stride, cp.padding, stride, padding
                    )));
                }
            }
            (LayerKind::BatchNorm { eps, momentum }, NodeParams::BatchNorm(bp)) => {
                bp.validate()?;
                if bp.channels() != ic {
                    return Err(Error::Graph(format!(
                        "{}: batchnorm has {} channels, input has {ic}",
                        node.id,
                        bp.channels()
                    )));
                }
                if bp.eps != *eps || bp.momentum != *momentum {
                    return Err(Error::Graph(format!(
                        "{}: batchnorm eps/momentum {}/{} do not match declared {}/{}",
                        node.id, bp.eps, bp.momentum, eps, momentum
                    )));
                }
            }
            (LayerKind::Linear { out_features }, NodeParams::Linear(lp)) => {
                lp.validate()?;
                let want = [*out_features, ic];
                if lp.weight.shape() != want {
                    return Err(Error::Graph(format!(
                        "{}: linear weight extent {:?} does not match declared {:?}",
                        node.id,
                        lp.weight.shape(),
                        want
                    )));
                }
            }
            (kind, _) => {
                return Err(Error::Graph(format!(
                    "{}: parameter kind does not match {} node",
                    node.id,
                    kind.keyword()
                )))
            }
        }
    }
    if params.len() != needed {
        let known: HashSet<&String> = compiled.nodes.iter().map(|n| &n.id).collect();
        let extra: Vec<&String> = params.keys().filter(|k| !known.contains(k)).collect();
        return Err(Error::Graph(format!(
            "parameter store has {} entries, structure needs {needed} (unmatched: {extra:?})",
            params.len()
        )));
    }
    Ok(())
}
