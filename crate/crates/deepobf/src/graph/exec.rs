//! Forward and backward execution over a compiled graph. Frozen nodes still
//! propagate gradients (surgery downstream of a simulator needs them) but
//! never receive parameter gradients, and frozen batch-norm nodes normalize
//! by their stored running statistics even in training mode.

use super::{CompiledNode, LayerKind, ModelGraph, NodeParams, Src};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub(crate) enum OpCtx {
    None,
    Conv(ops::Conv2dCtx),
    Bn(ops::BnCtx),
    MaxPool(ops::MaxPoolCtx),
    AvgPool {
        x_dims: (usize, usize, usize, usize),
        kernel: usize,
        stride: usize,
    },
    Gap {
        x_dims: (usize, usize, usize, usize),
    },
    Flatten {
        x_dims: (usize, usize, usize, usize),
    },
}

/// Artifacts of one forward pass: per-node outputs, backward contexts, and
/// pending batch-norm running-statistics updates (unfrozen nodes only).
pub struct RunOut {
    pub(crate) outputs: Vec<Option<Tensor>>,
    pub(crate) ctxs: Vec<OpCtx>,
    pub(crate) pending_bn: Vec<(usize, (Vec<f32>, Vec<f32>))>,
    pub(crate) upto_block: usize,
    pub(crate) input: Tensor,
}

impl RunOut {
    pub fn sink_output(&self, graph: &ModelGraph) -> &Tensor {
        let sink = graph.compiled().block_sink[self.upto_block];
        self.outputs[sink].as_ref().expect("sink was executed")
    }
}

impl ModelGraph {
    pub(crate) fn block_index(&self, name: &str) -> Result<usize> {
        self.blocks()
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Graph(format!("unknown block {name:?}")))
    }

    /// Global node index of a block's exit.
    pub(crate) fn sink_index(&self, block_name: &str) -> Result<usize> {
        Ok(self.compiled().block_sink[self.block_index(block_name)?])
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.meta().input;
        let (_, xc, xh, xw) = x.dims4()?;
        if (xc, xh, xw) != (c, h, w) {
            return Err(Error::Shape(format!(
                "model expects {c}x{h}x{w} input images, got {xc}x{xh}x{xw}"
            )));
        }
        Ok(())
    }

    /// Execute blocks `0..=upto_block`.
    pub(crate) fn run(&self, x: &Tensor, mode: Mode, upto_block: usize) -> Result<RunOut> {
        self.check_input(x)?;
        let compiled = self.compiled();
        let n_nodes = compiled.block_range[upto_block].1;
        let mut outputs: Vec<Option<Tensor>> = Vec::with_capacity(n_nodes);
        let mut ctxs: Vec<OpCtx> = Vec::with_capacity(n_nodes);
        let mut pending_bn = Vec::new();

        for idx in 0..n_nodes {
            let node = &compiled.nodes[idx];
            let gather: Vec<&Tensor> = node
                .srcs
                .iter()
                .map(|s| match s {
                    Src::BlockInput => {
                        if node.block == 0 {
                            x
                        } else {
                            outputs[compiled.block_sink[node.block - 1]]
                                .as_ref()
                                .expect("previous block sink executed")
                        }
                    }
                    Src::Node(j) => outputs[*j].as_ref().expect("topological order"),
                })
                .collect();
            let (out, ctx) = self.eval_node(node, &gather, mode, idx, &mut pending_bn)?;
            outputs.push(Some(out));
            ctxs.push(ctx);
        }
        Ok(RunOut {
            outputs,
            ctxs,
            pending_bn,
            upto_block,
            input: x.clone(),
        })
    }

    fn eval_node(
        &self,
        node: &CompiledNode,
        inputs: &[&Tensor],
        mode: Mode,
        _idx: usize,
        pending_bn: &mut Vec<(usize, (Vec<f32>, Vec<f32>))>,
    ) -> Result<(Tensor, OpCtx)> {
        match &node.kind {
            LayerKind::Conv { .. } => {
                let NodeParams::Conv(p) = self.node_params(&node.id)? else {
                    unreachable!("validated param kind");
                };
                let (y, ctx) = ops::conv2d_forward(inputs[0], p)?;
                Ok((y, OpCtx::Conv(ctx)))
            }
            LayerKind::BatchNorm { .. } => {
                let NodeParams::BatchNorm(p) = self.node_params(&node.id)? else {
                    unreachable!("validated param kind");
                };
                let training = mode == Mode::Train && !self.is_frozen(&node.id);
                let fwd = ops::batchnorm_forward(inputs[0], p, training)?;
                if let Some(update) = fwd.running_update {
                    pending_bn.push((_idx, update));
                }
                Ok((fwd.y, OpCtx::Bn(fwd.ctx)))
            }
            LayerKind::Relu => Ok((ops::relu_forward(inputs[0]), OpCtx::None)),
            LayerKind::MaxPool { kernel, stride } => {
                let (y, ctx) = ops::maxpool_forward(inputs[0], *kernel, *stride)?;
                Ok((y, OpCtx::MaxPool(ctx)))
            }
            LayerKind::AvgPool { kernel, stride } => {
                let y = ops::avgpool_forward(inputs[0], *kernel, *stride)?;
                Ok((
                    y,
                    OpCtx::AvgPool {
                        x_dims: inputs[0].dims4()?,
                        kernel: *kernel,
                        stride: *stride,
                    },
                ))
            }
            LayerKind::GlobalAvgPool => {
                let y = ops::global_avgpool_forward(inputs[0])?;
                Ok((
                    y,
                    OpCtx::Gap {
                        x_dims: inputs[0].dims4()?,
                    },
                ))
            }
            LayerKind::Flatten => {
                let y = ops::flatten_forward(inputs[0])?;
                Ok((
                    y,
                    OpCtx::Flatten {
                        x_dims: inputs[0].dims4()?,
                    },
                ))
            }
            LayerKind::Linear { .. } => {
                let NodeParams::Linear(p) = self.node_params(&node.id)? else {
                    unreachable!("validated param kind");
                };
                Ok((ops::linear_forward(inputs[0], p)?, OpCtx::None))
            }
            LayerKind::Concat => Ok((ops::concat_forward(inputs)?, OpCtx::None)),
            LayerKind::Add => Ok((ops::add_forward(inputs)?, OpCtx::None)),
        }
    }

    /// Apply pending batch-norm running-statistics updates from a
    /// training-mode run.
    pub(crate) fn apply_bn_updates(&mut self, run: RunOut) {
        let ids: Vec<(String, (Vec<f32>, Vec<f32>))> = run
            .pending_bn
            .into_iter()
            .map(|(idx, upd)| (self.compiled().nodes[idx].id.clone(), upd))
            .collect();
        for (id, upd) in ids {
            if let Some(NodeParams::BatchNorm(p)) = self.params_mut().get_mut(&id) {
                ops::batchnorm_apply_update(p, upd);
            }
        }
    }

    /// Back-propagate from one or more seed gradients (`(global node index,
    /// gradient w.r.t. that node's output)`), accumulating parameter
    /// gradients for unfrozen nodes. Returns the gradient w.r.t. the model
    /// input.
    pub(crate) fn backward(
        &mut self,
        run: &RunOut,
        seeds: Vec<(usize, Tensor)>,
    ) -> Result<Tensor> {
        let compiled = self.compiled().clone();
        let n_nodes = compiled.block_range[run.upto_block].1;
        let mut d_out: Vec<Option<Tensor>> = (0..n_nodes).map(|_| None).collect();
        for (idx, g) in seeds {
            debug_assert!(idx < n_nodes, "seed beyond executed range");
            accumulate(&mut d_out[idx], g);
        }
        let mut d_input: Option<Tensor> = None;

        for bi in (0..=run.upto_block).rev() {
            let (start, end) = compiled.block_range[bi];
            for idx in (start..end).rev() {
                let Some(dy) = d_out[idx].take() else {
                    continue;
                };
                let node = &compiled.nodes[idx];
                let din = self.node_backward(node, run, idx, &dy)?;
                debug_assert_eq!(din.len(), node.srcs.len());
                for (src, g) in node.srcs.iter().zip(din) {
                    match src {
                        Src::Node(j) => accumulate(&mut d_out[*j], g),
                        Src::BlockInput => {
                            if bi == 0 {
                                accumulate(&mut d_input, g);
                            } else {
                                accumulate(&mut d_out[compiled.block_sink[bi - 1]], g);
                            }
                        }
                    }
                }
            }
        }
        d_input.ok_or_else(|| Error::Graph("no gradient reached the model input".into()))
    }

    fn node_backward(
        &mut self,
        node: &CompiledNode,
        run: &RunOut,
        idx: usize,
        dy: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let need = !self.is_frozen(&node.id);
        match &node.kind {
            LayerKind::Conv { .. } => {
                let NodeParams::Conv(p) = self.node_params(&node.id)? else {
                    unreachable!()
                };
                let OpCtx::Conv(ctx) = &run.ctxs[idx] else {
                    return Err(Error::Graph(format!("{}: missing conv context", node.id)));
                };
                let grads = ops::conv2d_backward(p, ctx, dy, need)?;
                if need {
                    let id = node.id.clone();
                    if let Some(NodeParams::Conv(p)) = self.params_mut().get_mut(&id) {
                        p.weight.accumulate_grad(&grads.dweight.unwrap());
                        p.bias.accumulate_grad(&grads.dbias.unwrap());
                    }
                }
                Ok(vec![grads.dx])
            }
            LayerKind::BatchNorm { .. } => {
                let NodeParams::BatchNorm(p) = self.node_params(&node.id)? else {
                    unreachable!()
                };
                let OpCtx::Bn(ctx) = &run.ctxs[idx] else {
                    return Err(Error::Graph(format!("{}: missing bn context", node.id)));
                };
                let grads = ops::batchnorm_backward(p, ctx, dy, need)?;
                if need {
                    let id = node.id.clone();
                    if let Some(NodeParams::BatchNorm(p)) = self.params_mut().get_mut(&id) {
                        if let Some(dg) = grads.dgamma {
                            p.gamma.accumulate_grad(&dg);
                        }
                        if let Some(db) = grads.dbeta {
                            p.beta.accumulate_grad(&db);
                        }
                    }
                }
                Ok(vec![grads.dx])
            }
            LayerKind::Relu => {
                let y = run.outputs[idx].as_ref().expect("executed");
                Ok(vec![ops::relu_backward(y, dy)])
            }
            LayerKind::MaxPool { .. } => {
                let OpCtx::MaxPool(ctx) = &run.ctxs[idx] else {
                    return Err(Error::Graph(format!("{}: missing pool context", node.id)));
                };
                Ok(vec![ops::maxpool_backward(ctx, dy)])
            }
            LayerKind::AvgPool { .. } => {
                let OpCtx::AvgPool {
                    x_dims,
                    kernel,
                    stride,
                } = &run.ctxs[idx]
                else {
                    return Err(Error::Graph(format!("{}: missing pool context", node.id)));
                };
                Ok(vec![ops::avgpool_backward(*x_dims, *kernel, *stride, dy)])
            }
            LayerKind::GlobalAvgPool => {
                let OpCtx::Gap { x_dims } = &run.ctxs[idx] else {
                    return Err(Error::Graph(format!("{}: missing pool context", node.id)));
                };
                Ok(vec![ops::global_avgpool_backward(*x_dims, dy)])
            }
            LayerKind::Flatten => {
                let OpCtx::Flatten { x_dims } = &run.ctxs[idx] else {
                    return Err(Error::Graph(format!("{}: missing context", node.id)));
                };
                Ok(vec![ops::flatten_backward(*x_dims, dy)])
            }
            LayerKind::Linear { .. } => {
                let NodeParams::Linear(p) = self.node_params(&node.id)? else {
                    unreachable!()
                };
                let x = self.resolve_input(run, node, 0);
                let grads = ops::linear_backward(x, p, dy, need)?;
                if need {
                    let id = node.id.clone();
                    if let Some(NodeParams::Linear(p)) = self.params_mut().get_mut(&id) {
                        p.weight.accumulate_grad(&grads.dweight.unwrap());
                        p.bias.accumulate_grad(&grads.dbias.unwrap());
                    }
                }
                Ok(vec![grads.dx])
            }
            LayerKind::Concat => {
                let channels: Vec<usize> = node
                    .srcs
                    .iter()
                    .enumerate()
                    .map(|(i, _)| self.resolve_input(run, node, i).shape()[1])
                    .collect();
                ops::concat_backward(dy, &channels)
            }
            LayerKind::Add => Ok(node.srcs.iter().map(|_| dy.clone()).collect()),
        }
    }

    fn resolve_input<'r>(&self, run: &'r RunOut, node: &CompiledNode, i: usize) -> &'r Tensor {
        match node.srcs[i] {
            Src::BlockInput => {
                if node.block == 0 {
                    &run.input
                } else {
                    run.outputs[self.compiled().block_sink[node.block - 1]]
                        .as_ref()
                        .expect("executed")
                }
            }
            Src::Node(j) => run.outputs[j].as_ref().expect("executed"),
        }
    }

    // -- public forward API --------------------------------------------------

    /// Execute all blocks in order, classifier last, and return the logits.
    /// Inference mode is deterministic; training mode uses batch statistics
    /// in unfrozen batch-norm nodes but does not persist them (the training
    /// loop owns that).
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let last = self.blocks().len() - 1;
        let run = self.run(x, mode, last)?;
        Ok(run.sink_output(self).clone())
    }

    /// Return the named block's exit tensor (inference mode); the classifier
    /// is not executed.
    pub fn forward_to_block(&self, x: &Tensor, block_name: &str) -> Result<Tensor> {
        let bi = self.block_index(block_name)?;
        let run = self.run(x, Mode::Infer, bi)?;
        Ok(run.sink_output(self).clone())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}
