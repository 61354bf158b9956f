//! Receptive-field calculus over blocks, exact collapse of linear
//! convolutional compositions, and simulator-architecture planning.
//!
//! Sequential composition grows the field as `h <- h + (h2 - 1) * s_cum` and
//! the cumulative stride as `s_cum <- s_cum * s2`; parallel branches merged
//! by concat or add take the elementwise maximum. Pooling counts as a
//! convolution of its window.

use crate::error::{Error, Result};
use crate::graph::{
    node_id, BlockRole, BlockSpec, LayerKind, LayerSpec, ModelGraph, NodeParams, NodeShape,
    BLOCK_INPUT,
};
use crate::ops::ConvParams;
use crate::tensor::Tensor;
use std::collections::{BTreeMap, HashMap};

/// Input patch one output pixel depends on, with the cumulative stride and
/// padding accumulated on the way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ReceptiveField {
    fn unit() -> Self {
        ReceptiveField {
            height: 1,
            width: 1,
            stride: 1,
            padding: 0,
        }
    }

    /// `self` followed by a kernel op of extent `k`, stride `s`, padding `p`.
    fn then(&self, kh: usize, kw: usize, s: usize, p: usize) -> Self {
        ReceptiveField {
            height: self.height + (kh - 1) * self.stride,
            width: self.width + (kw - 1) * self.stride,
            stride: self.stride * s,
            padding: self.padding + self.stride * p,
        }
    }

    /// Sequential composition of two fields (`self` first, `next` second).
    pub fn compose(&self, next: &ReceptiveField) -> Self {
        ReceptiveField {
            height: self.height + (next.height - 1) * self.stride,
            width: self.width + (next.width - 1) * self.stride,
            stride: self.stride * next.stride,
            padding: self.padding + self.stride * next.padding,
        }
    }

    fn merge_max(&self, other: &ReceptiveField) -> Result<Self> {
        if self.stride != other.stride {
            return Err(Error::Analyzer(format!(
                "parallel branches have mismatched cumulative strides {} vs {}",
                self.stride, other.stride
            )));
        }
        Ok(ReceptiveField {
            height: self.height.max(other.height),
            width: self.width.max(other.width),
            stride: self.stride,
            padding: self.padding.max(other.padding),
        })
    }
}

fn block_topo(block: &BlockSpec) -> Result<Vec<usize>> {
    // validated blocks are already checkable through graph compilation, but
    // the analyzer also accepts standalone specs
    crate::graph::block_topo_order(block)
}

/// Receptive field of a block's exit pixel w.r.t. the block input.
pub fn receptive_field(block: &BlockSpec) -> Result<ReceptiveField> {
    let order = block_topo(block)?;
    let mut fields: HashMap<&str, ReceptiveField> = HashMap::new();
    let mut last: Option<(&str, ReceptiveField)> = None;
    let mut consumed: HashMap<&str, usize> = HashMap::new();
    for node in &block.nodes {
        for i in &node.inputs {
            if i != BLOCK_INPUT {
                *consumed.entry(i.as_str()).or_default() += 1;
            }
        }
    }
    for &ni in &order {
        let node = &block.nodes[ni];
        let input_rf = |name: &str| -> ReceptiveField {
            if name == BLOCK_INPUT {
                ReceptiveField::unit()
            } else {
                fields[name]
            }
        };
        let rf = match &node.kind {
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                ..
            } => input_rf(&node.inputs[0]).then(*kernel, *kernel, *stride, *padding),
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                input_rf(&node.inputs[0]).then(*kernel, *kernel, *stride, 0)
            }
            LayerKind::BatchNorm { .. } | LayerKind::Relu => input_rf(&node.inputs[0]),
            LayerKind::Concat | LayerKind::Add => {
                let mut acc = input_rf(&node.inputs[0]);
                for i in &node.inputs[1..] {
                    acc = acc.merge_max(&input_rf(i))?;
                }
                acc
            }
            LayerKind::Flatten | LayerKind::Linear { .. } | LayerKind::GlobalAvgPool => {
                return Err(Error::Analyzer(format!(
                    "{}: {} is not a kernel-calculus op",
                    node_id(&block.name, &node.name),
                    node.kind.keyword()
                )))
            }
        };
        fields.insert(&node.name, rf);
        if !consumed.contains_key(node.name.as_str()) {
            last = Some((&node.name, rf));
        }
    }
    last.map(|(_, rf)| rf)
        .ok_or_else(|| Error::Analyzer(format!("block {:?} has no exit", block.name)))
}

/// Receptive field of a run of blocks executed in order.
pub fn receptive_field_span(blocks: &[BlockSpec]) -> Result<ReceptiveField> {
    let mut acc = ReceptiveField::unit();
    for b in blocks {
        acc = acc.compose(&receptive_field(b)?);
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// exact collapse of linear blocks
// ---------------------------------------------------------------------------

/// Equivalent convolution accumulated in f64 while composing.
#[derive(Debug, Clone)]
struct EqConv {
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    weight: Vec<f64>, // [out_c, in_c, kh, kw]
    bias: Vec<f64>,   // [out_c]
}

impl EqConv {
    fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for c in 0..channels {
            weight[c * channels + c] = 1.0;
        }
        EqConv {
            out_c: channels,
            in_c: channels,
            kh: 1,
            kw: 1,
            stride: 1,
            padding: 0,
            weight,
            bias: vec![0.0; channels],
        }
    }

    fn from_params(p: &ConvParams) -> Self {
        let (oc, ic, kh, kw) = p.weight.dims4().expect("conv weight is 4-D");
        EqConv {
            out_c: oc,
            in_c: ic,
            kh,
            kw,
            stride: p.stride,
            padding: p.padding,
            weight: p.weight.data().iter().map(|v| *v as f64).collect(),
            bias: p.bias.data().iter().map(|v| *v as f64).collect(),
        }
    }

    fn into_params(self) -> Result<ConvParams> {
        Ok(ConvParams {
            weight: Tensor::new(
                vec![self.out_c, self.in_c, self.kh, self.kw],
                self.weight.iter().map(|v| *v as f32).collect(),
            )?,
            bias: Tensor::new(vec![self.out_c], self.bias.iter().map(|v| *v as f32).collect())?,
            stride: self.stride,
            padding: self.padding,
        })
    }

    fn at(&self, o: usize, c: usize, i: usize, j: usize) -> f64 {
        self.weight[((o * self.in_c + c) * self.kh + i) * self.kw + j]
    }

    fn bias_is_zero(&self) -> bool {
        self.bias.iter().all(|b| *b == 0.0)
    }
}

/// `first` then `second`: kernel convolution-of-kernels with bias folding.
/// Kernel extent follows `h = h1 + (h2 - 1) * s1`.
fn compose(first: &EqConv, second: &EqConv) -> Result<EqConv> {
    if second.in_c != first.out_c {
        return Err(Error::Analyzer(format!(
            "cannot compose: second layer expects {} channels, first produces {}",
            second.in_c, first.out_c
        )));
    }
    if second.padding > 0 && !first.bias_is_zero() {
        return Err(Error::Analyzer(
            "cannot exactly collapse: nonzero bias feeds a padded convolution (the \
             zero-padding ring would have to carry the bias)"
                .into(),
        ));
    }
    let kh = first.kh + (second.kh - 1) * first.stride;
    let kw = first.kw + (second.kw - 1) * first.stride;
    let mut out = EqConv {
        out_c: second.out_c,
        in_c: first.in_c,
        kh,
        kw,
        stride: first.stride * second.stride,
        padding: first.padding + first.stride * second.padding,
        weight: vec![0.0; second.out_c * first.in_c * kh * kw],
        bias: vec![0.0; second.out_c],
    };
    for o in 0..second.out_c {
        for m in 0..second.in_c {
            for i2 in 0..second.kh {
                for j2 in 0..second.kw {
                    let k2 = second.at(o, m, i2, j2);
                    if k2 == 0.0 {
                        continue;
                    }
                    for c in 0..first.in_c {
                        for i1 in 0..first.kh {
                            let oi = i2 * first.stride + i1;
                            for j1 in 0..first.kw {
                                let oj = j2 * first.stride + j1;
                                out.weight
                                    [((o * out.in_c + c) * kh + oi) * kw + oj] +=
                                    k2 * first.at(m, c, i1, j1);
                            }
                        }
                    }
                }
            }
        }
        let mut b = second.bias[o];
        for m in 0..second.in_c {
            let mut ksum = 0.0;
            for i2 in 0..second.kh {
                for j2 in 0..second.kw {
                    ksum += second.at(o, m, i2, j2);
                }
            }
            b += ksum * first.bias[m];
        }
        out.bias[o] = b;
    }
    Ok(out)
}

/// Check parallel branches can merge into one convolution: equal strides and
/// equal `k - 2p` per dimension (otherwise their output extents differ on
/// some input).
fn check_mergeable(branches: &[EqConv]) -> Result<(usize, usize, usize, usize)> {
    let first = &branches[0];
    let key = |e: &EqConv| {
        (
            e.stride,
            e.kh as isize - 2 * e.padding as isize,
            e.kw as isize - 2 * e.padding as isize,
            e.in_c,
        )
    };
    for b in &branches[1..] {
        if key(b) != key(first) {
            return Err(Error::Analyzer(format!(
                "parallel branches are not alignable: stride/extent signatures \
                 {:?} vs {:?}",
                key(first),
                key(b)
            )));
        }
    }
    let kh = branches.iter().map(|b| b.kh).max().unwrap();
    let kw = branches.iter().map(|b| b.kw).max().unwrap();
    let padding = branches.iter().map(|b| b.padding).max().unwrap();
    Ok((kh, kw, padding, first.stride))
}

/// Embed `src` into a kernel of extent `(kh, kw)` at the given spatial
/// offset, writing output channels starting at `o_base`.
fn embed(
    src: &EqConv,
    dst: &mut [f64],
    out_c_total: usize,
    o_base: usize,
    kh: usize,
    kw: usize,
    off_i: usize,
    off_j: usize,
    sum: bool,
) {
    let _ = out_c_total;
    for o in 0..src.out_c {
        for c in 0..src.in_c {
            for i in 0..src.kh {
                for j in 0..src.kw {
                    let v = src.at(o, c, i, j);
                    let slot = (((o_base + o) * src.in_c + c) * kh + (i + off_i)) * kw
                        + (j + off_j);
                    if sum {
                        dst[slot] += v;
                    } else {
                        dst[slot] = v;
                    }
                }
            }
        }
    }
}

/// Concat merge: stack along output channels, zero-padding smaller kernels
/// to the max extent (channel count sums).
fn merge_concat(branches: &[EqConv]) -> Result<EqConv> {
    let (kh, kw, padding, stride) = check_mergeable(branches)?;
    let in_c = branches[0].in_c;
    let out_c: usize = branches.iter().map(|b| b.out_c).sum();
    let mut weight = vec![0.0; out_c * in_c * kh * kw];
    let mut bias = Vec::with_capacity(out_c);
    let mut o_base = 0;
    for b in branches {
        embed(
            b,
            &mut weight,
            out_c,
            o_base,
            kh,
            kw,
            padding - b.padding,
            padding - b.padding,
            false,
        );
        bias.extend_from_slice(&b.bias);
        o_base += b.out_c;
    }
    Ok(EqConv {
        out_c,
        in_c,
        kh,
        kw,
        stride,
        padding,
        weight,
        bias,
    })
}

/// Add merge: requires an equivalent number of channels on every branch;
/// kernels sum after zero-padded alignment.
fn merge_add(branches: &[EqConv]) -> Result<EqConv> {
    let out_c = branches[0].out_c;
    if branches.iter().any(|b| b.out_c != out_c) {
        return Err(Error::Analyzer(format!(
            "add-merged branches should have an equivalent number of channels, got {:?}",
            branches.iter().map(|b| b.out_c).collect::<Vec<_>>()
        )));
    }
    let (kh, kw, padding, stride) = check_mergeable(branches)?;
    let in_c = branches[0].in_c;
    let mut weight = vec![0.0; out_c * in_c * kh * kw];
    let mut bias = vec![0.0; out_c];
    for b in branches {
        embed(
            b,
            &mut weight,
            out_c,
            0,
            kh,
            kw,
            padding - b.padding,
            padding - b.padding,
            true,
        );
        for (acc, v) in bias.iter_mut().zip(&b.bias) {
            *acc += v;
        }
    }
    Ok(EqConv {
        out_c,
        in_c,
        kh,
        kw,
        stride,
        padding,
        weight,
        bias,
    })
}

/// Collapse a block containing only conv/concat/add nodes into one
/// convolution whose forward equals the block's forward on all inputs.
/// `params` maps node names (unqualified) to their parameters;
/// `in_channels` is the channel count the block receives.
pub fn collapse_linear_block(
    block: &BlockSpec,
    params: &BTreeMap<String, NodeParams>,
    in_channels: usize,
) -> Result<ConvParams> {
    let order = block_topo(block)?;
    let mut eqs: HashMap<&str, EqConv> = HashMap::new();
    let mut consumed: HashMap<&str, usize> = HashMap::new();
    for node in &block.nodes {
        for i in &node.inputs {
            if i != BLOCK_INPUT {
                *consumed.entry(i.as_str()).or_default() += 1;
            }
        }
    }
    let mut sink: Option<&str> = None;
    for &ni in &order {
        let node = &block.nodes[ni];
        let eq_of = |name: &str, eqs: &HashMap<&str, EqConv>| -> EqConv {
            if name == BLOCK_INPUT {
                EqConv::identity(in_channels)
            } else {
                eqs[name].clone()
            }
        };
        let eq = match &node.kind {
            LayerKind::Conv { .. } => {
                let Some(NodeParams::Conv(p)) = params.get(&node.name) else {
                    return Err(Error::Analyzer(format!(
                        "missing conv parameters for node {:?}",
                        node.name
                    )));
                };
                let base = EqConv::from_params(p);
                if node.inputs[0] == BLOCK_INPUT {
                    base
                } else {
                    compose(&eq_of(&node.inputs[0], &eqs), &base)?
                }
            }
            LayerKind::Concat => {
                let branches: Vec<EqConv> =
                    node.inputs.iter().map(|i| eq_of(i, &eqs)).collect();
                merge_concat(&branches)?
            }
            LayerKind::Add => {
                let branches: Vec<EqConv> =
                    node.inputs.iter().map(|i| eq_of(i, &eqs)).collect();
                merge_add(&branches)?
            }
            other => {
                return Err(Error::Analyzer(format!(
                    "block {:?} is not linear: node {:?} is {}",
                    block.name,
                    node.name,
                    other.keyword()
                )))
            }
        };
        eqs.insert(&node.name, eq);
        if !consumed.contains_key(node.name.as_str()) {
            sink = Some(&node.name);
        }
    }
    let sink = sink.ok_or_else(|| Error::Analyzer("block has no exit".into()))?;
    eqs.remove(sink).unwrap().into_params()
}

/// Convenience wrapper: collapse a named block of a model.
pub fn collapse_graph_block(graph: &ModelGraph, block_name: &str) -> Result<ConvParams> {
    let block = graph.block(block_name)?;
    let in_channels = match graph.block_input_shape(block_name)? {
        NodeShape::Image { c, .. } => c,
        NodeShape::Flat { .. } => {
            return Err(Error::Analyzer(format!(
                "block {block_name:?} receives a flat tensor"
            )))
        }
    };
    let prefix = format!("{block_name}/");
    let params: BTreeMap<String, NodeParams> = graph
        .params()
        .iter()
        .filter(|(id, _)| id.starts_with(&prefix))
        .map(|(id, p)| (id[prefix.len()..].to_string(), p.clone()))
        .collect();
    collapse_linear_block(block, &params, in_channels)
}

// ---------------------------------------------------------------------------
// simulator planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PlanLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
    pub batchnorm: bool,
    pub relu: bool,
}

/// Derived architecture for a shallow sequential block that replaces a
/// target block: its composed receptive field covers the target's and its
/// stride product matches the target downsampling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorPlan {
    pub layers: Vec<PlanLayer>,
    pub target: String,
    pub rationale: String,
}

impl SimulatorPlan {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        let mut acc = ReceptiveField::unit();
        for l in &self.layers {
            acc = acc.then(l.kernel, l.kernel, l.stride, l.padding);
        }
        acc
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("plans are non-empty").out_channels
    }

    /// Materialize the plan as a sequential block spec.
    pub fn build_block(&self, block_name: &str) -> BlockSpec {
        let mut nodes = Vec::new();
        let mut prev = BLOCK_INPUT.to_string();
        for (i, l) in self.layers.iter().enumerate() {
            let conv = format!("conv{i}");
            nodes.push(LayerSpec {
                name: conv.clone(),
                kind: LayerKind::Conv {
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    stride: l.stride,
                    padding: l.padding,
                },
                inputs: vec![prev.clone()],
            });
            prev = conv;
            if l.batchnorm {
                let bn = format!("bn{i}");
                nodes.push(LayerSpec {
                    name: bn.clone(),
                    kind: LayerKind::BatchNorm {
                        eps: 1e-5,
                        momentum: 0.1,
                    },
                    inputs: vec![prev.clone()],
                });
                prev = bn;
            }
            if l.relu {
                let act = format!("act{i}");
                nodes.push(LayerSpec {
                    name: act.clone(),
                    kind: LayerKind::Relu,
                    inputs: vec![prev.clone()],
                });
                prev = act;
            }
        }
        BlockSpec {
            name: block_name.to_string(),
            role: BlockRole::Feature,
            nodes,
        }
    }

    /// Fresh fan-in-scaled parameters for the materialized block.
    pub fn init_params(
        &self,
        block_name: &str,
        in_channels: usize,
        seed: u64,
    ) -> BTreeMap<String, NodeParams> {
        use crate::ops::BatchNormParams;
        let mut params = BTreeMap::new();
        let mut ic = in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            let id = node_id(block_name, &format!("conv{i}"));
            let fan_in = ic * l.kernel * l.kernel;
            let bound = (6.0 / fan_in as f32).sqrt();
            let mut rng = crate::rng::stream(seed, &format!("init/{id}"), 0);
            params.insert(
                id,
                NodeParams::Conv(ConvParams {
                    weight: Tensor::uniform(
                        vec![l.out_channels, ic, l.kernel, l.kernel],
                        bound,
                        &mut rng,
                    ),
                    bias: Tensor::zeros(vec![l.out_channels]),
                    stride: l.stride,
                    padding: l.padding,
                }),
            );
            if l.batchnorm {
                params.insert(
                    node_id(block_name, &format!("bn{i}")),
                    NodeParams::BatchNorm(BatchNormParams::identity(l.out_channels)),
                );
            }
            ic = l.out_channels;
        }
        params
    }
}

fn stride_factors(mut s: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for f in [2usize, 3, 5, 7] {
        while s % f == 0 {
            out.push(f);
            s /= f;
        }
    }
    if s > 1 {
        out.push(s);
    }
    out
}

/// Plan a sequential simulator for a target interface. Stacked 3x3 layers by
/// default (the first layer's kernel grows if that is not enough to cover
/// the target field), strided layers placed earliest, channels interpolated
/// linearly from `in_channels` to `out_channels` and rounded up, BN+ReLU
/// after every convolution.
pub fn plan_for_interface(
    target_rf: &ReceptiveField,
    in_channels: usize,
    out_channels: usize,
    depth_hint: Option<usize>,
    channel_override: Option<&[usize]>,
    target_name: &str,
) -> Result<SimulatorPlan> {
    let factors = stride_factors(target_rf.stride);
    let min_depth = factors.len().max(1);
    let depth = match depth_hint {
        Some(d) if d < min_depth => {
            return Err(Error::Analyzer(format!(
                "depth {d} cannot realize stride {} ; minimum feasible depth is {min_depth}",
                target_rf.stride
            )))
        }
        Some(d) => d,
        None => {
            if target_rf.height.max(target_rf.width) <= 1 {
                min_depth
            } else {
                min_depth.max(2)
            }
        }
    };
    let mut strides = vec![1usize; depth];
    strides[..factors.len()].copy_from_slice(&factors);

    let target_extent = target_rf.height.max(target_rf.width);
    let base_kernel = if target_extent <= 1 { 1 } else { 3 };
    let mut kernels = vec![base_kernel; depth];
    let composed = |kernels: &[usize], strides: &[usize]| -> usize {
        let mut r = 1usize;
        let mut s = 1usize;
        for (k, st) in kernels.iter().zip(strides) {
            r += (k - 1) * s;
            s *= st;
        }
        r
    };
    while composed(&kernels, &strides) < target_extent {
        kernels[0] += 2; // first layer has cumulative stride 1: finest control
    }

    let layers: Vec<PlanLayer> = (0..depth)
        .map(|i| {
            let out_c = match channel_override {
                Some(cs) => cs[i],
                None => {
                    let t = (i + 1) as f64 / depth as f64;
                    let c = in_channels as f64 + (out_channels as f64 - in_channels as f64) * t;
                    c.ceil() as usize
                }
            };
            PlanLayer {
                kernel: kernels[i],
                stride: strides[i],
                padding: (kernels[i] - 1) / 2,
                out_channels: out_c,
                batchnorm: true,
                relu: true,
            }
        })
        .collect();
    if let Some(cs) = channel_override {
        if cs.len() != depth {
            return Err(Error::Analyzer(format!(
                "channel override has {} entries for depth {depth}",
                cs.len()
            )));
        }
        if cs[depth - 1] != out_channels {
            return Err(Error::Analyzer(format!(
                "last simulator layer must produce {out_channels} channels, override says {}",
                cs[depth - 1]
            )));
        }
    }
    let plan = SimulatorPlan {
        layers,
        target: target_name.to_string(),
        rationale: format!(
            "covers receptive field {}x{} stride {} with {depth} conv layer(s)",
            target_rf.height, target_rf.width, target_rf.stride
        ),
    };
    debug_assert!(plan.receptive_field().height >= target_rf.height);
    debug_assert_eq!(plan.receptive_field().stride, target_rf.stride);
    Ok(plan)
}

/// Plan a simulator for one block of a model.
pub fn plan_simulator(
    graph: &ModelGraph,
    block_name: &str,
    depth_hint: Option<usize>,
) -> Result<SimulatorPlan> {
    plan_simulator_span(graph, block_name, block_name, depth_hint, None)
}

/// Plan a simulator for a contiguous run of feature blocks.
pub fn plan_simulator_span(
    graph: &ModelGraph,
    first: &str,
    last: &str,
    depth_hint: Option<usize>,
    channel_override: Option<&[usize]>,
) -> Result<SimulatorPlan> {
    let blocks = graph.blocks();
    let fi = blocks
        .iter()
        .position(|b| b.name == first)
        .ok_or_else(|| Error::Graph(format!("unknown block {first:?}")))?;
    let li = blocks
        .iter()
        .position(|b| b.name == last)
        .ok_or_else(|| Error::Graph(format!("unknown block {last:?}")))?;
    if fi > li {
        return Err(Error::Graph(format!(
            "block span {first:?}..{last:?} is not in graph order"
        )));
    }
    let rf = receptive_field_span(&blocks[fi..=li])?;
    let in_c = match graph.block_input_shape(first)? {
        NodeShape::Image { c, .. } => c,
        _ => return Err(Error::Analyzer("span input is not an image".into())),
    };
    let out_c = match graph.block_output_shape(last)? {
        NodeShape::Image { c, .. } => c,
        _ => return Err(Error::Analyzer("span output is not an image".into())),
    };
    let name = if fi == li {
        first.to_string()
    } else {
        format!("{first}..{last}")
    };
    plan_for_interface(&rf, in_c, out_c, depth_hint, channel_override, &name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::BlockRole;

    fn conv_node(name: &str, input: &str, out: usize, k: usize, s: usize, p: usize) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv {
                out_channels: out,
                kernel: k,
                stride: s,
                padding: p,
            },
            inputs: vec![input.into()],
        }
    }

    fn feature_block(name: &str, nodes: Vec<LayerSpec>) -> BlockSpec {
        BlockSpec {
            name: name.into(),
            role: BlockRole::Feature,
            nodes,
        }
    }

    #[test]
    fn two_stacked_3x3_convs_see_5x5() {
        let b = feature_block(
            "rb",
            vec![
                conv_node("c1", "@in", 4, 3, 1, 1),
                conv_node("c2", "c1", 4, 3, 1, 1),
            ],
        );
        let rf = receptive_field(&b).unwrap();
        assert_eq!((rf.height, rf.width, rf.stride), (5, 5, 1));
    }

    #[test]
    fn pointwise_conv_sees_one_pixel() {
        let b = feature_block("p", vec![conv_node("c", "@in", 4, 1, 1, 0)]);
        let rf = receptive_field(&b).unwrap();
        assert_eq!((rf.height, rf.width, rf.stride), (1, 1, 1));
    }

    #[test]
    fn strided_sequence_composes() {
        // 5x5 stride-2 conv then 3x3 stride-1 conv: 5 + (3-1)*2 = 9, stride 2
        let b = feature_block(
            "s",
            vec![
                conv_node("c1", "@in", 4, 5, 2, 2),
                conv_node("c2", "c1", 4, 3, 1, 1),
            ],
        );
        let rf = receptive_field(&b).unwrap();
        assert_eq!((rf.height, rf.width, rf.stride), (9, 9, 2));
    }

    #[test]
    fn pooling_counts_as_convolution() {
        let b = feature_block(
            "mp",
            vec![
                conv_node("c1", "@in", 4, 3, 1, 1),
                LayerSpec {
                    name: "pool".into(),
                    kind: LayerKind::MaxPool {
                        kernel: 2,
                        stride: 2,
                    },
                    inputs: vec!["c1".into()],
                },
            ],
        );
        let rf = receptive_field(&b).unwrap();
        assert_eq!((rf.height, rf.stride), (4, 2));
    }

    #[test]
    fn parallel_branches_take_elementwise_max() {
        let b = feature_block(
            "inc",
            vec![
                conv_node("a", "@in", 4, 1, 1, 0),
                conv_node("b", "@in", 4, 3, 1, 1),
                LayerSpec {
                    name: "cat".into(),
                    kind: LayerKind::Concat,
                    inputs: vec!["a".into(), "b".into()],
                },
            ],
        );
        let rf = receptive_field(&b).unwrap();
        assert_eq!((rf.height, rf.width), (3, 3));
    }

    #[test]
    fn rejects_linear_layer_in_field_calculus() {
        let b = feature_block(
            "bad",
            vec![LayerSpec {
                name: "fl".into(),
                kind: LayerKind::Flatten,
                inputs: vec!["@in".into()],
            }],
        );
        let err = receptive_field(&b).unwrap_err().to_string();
        assert!(err.contains("not a kernel-calculus op"), "{err}");
    }

    #[test]
    fn plan_covers_5x5_with_two_3x3() {
        let rf = ReceptiveField {
            height: 5,
            width: 5,
            stride: 1,
            padding: 2,
        };
        let plan = plan_for_interface(&rf, 16, 32, Some(2), None, "b").unwrap();
        assert_eq!(plan.depth(), 2);
        assert!(plan.layers.iter().all(|l| l.kernel == 3 && l.stride == 1));
        assert_eq!(plan.receptive_field().height, 5);
        assert_eq!(plan.out_channels(), 32);
    }

    #[test]
    fn plan_for_pointwise_block_is_single_1x1() {
        let rf = ReceptiveField {
            height: 1,
            width: 1,
            stride: 1,
            padding: 0,
        };
        let plan = plan_for_interface(&rf, 8, 8, None, None, "b").unwrap();
        assert_eq!(plan.depth(), 1);
        assert_eq!(plan.layers[0].kernel, 1);
    }

    #[test]
    fn plan_self_checks_against_field_calculus() {
        let rf = ReceptiveField {
            height: 9,
            width: 9,
            stride: 2,
            padding: 0,
        };
        let plan = plan_for_interface(&rf, 3, 24, Some(3), None, "b").unwrap();
        let got = plan.receptive_field();
        assert!(got.height >= 9 && got.width >= 9);
        assert_eq!(got.stride, 2);
    }

    #[test]
    fn plan_rejects_insufficient_depth() {
        let rf = ReceptiveField {
            height: 7,
            width: 7,
            stride: 4,
            padding: 0,
        };
        let err = plan_for_interface(&rf, 3, 8, Some(1), None, "b")
            .unwrap_err()
            .to_string();
        assert!(err.contains("minimum feasible depth is 2"), "{err}");
    }

    #[test]
    fn channel_interpolation_rounds_up() {
        let rf = ReceptiveField {
            height: 5,
            width: 5,
            stride: 1,
            padding: 0,
        };
        let plan = plan_for_interface(&rf, 3, 64, Some(3), None, "b").unwrap();
        let cs: Vec<usize> = plan.layers.iter().map(|l| l.out_channels).collect();
        assert_eq!(cs, vec![24, 44, 64]);
    }
}
