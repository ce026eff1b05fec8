//! Directed acyclic layer graphs.
//!
//! Nodes are appended in topological order by [`GraphBuilder`]; every node
//! knows its per-sample output shape, so shape errors surface at build time.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::layers::{BatchNormState, Conv2d, Dense, ForwardCtx, LayerKind, LayerNode, PoolSpec};
use crate::linalg::Real;
use crate::ops::{Padding, PoolKind};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum GraphOp<T> {
    Input,
    Layer(LayerNode<T>),
    Concat,
    Add,
}

#[derive(Clone, Debug)]
pub struct GraphNode<T> {
    pub op: GraphOp<T>,
    pub inputs: Vec<NodeId>,
    /// Output shape excluding the batch axis.
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<GraphNode<T>>,
    output: NodeId,
}

pub struct GraphBuilder<'r, T, R: ?Sized> {
    nodes: Vec<GraphNode<T>>,
    names: HashSet<String>,
    rng: &'r mut R,
}

impl<'r, T: Real, R: Rng + ?Sized> GraphBuilder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            nodes: Vec::new(),
            names: HashSet::new(),
            rng,
        }
    }

    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err(format!("invalid graph input shape {shape:?}")));
        }
        self.nodes.push(GraphNode {
            op: GraphOp::Input,
            inputs: Vec::new(),
            shape: shape.to_vec(),
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    pub fn channels(&self, node: NodeId) -> usize {
        self.nodes[node].shape[0]
    }

    pub fn nodes(&self) -> &[GraphNode<T>] {
        &self.nodes
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn layer(&mut self, name: impl Into<String>, kind: LayerKind<T>, input: NodeId) -> Result<NodeId> {
        let name = name.into();
        if !self.names.insert(name.clone()) {
            return Err(invalid(format!("duplicate layer name {name}")));
        }
        let layer = LayerNode::new(name, kind);
        let shape = layer.output_shape(&self.nodes[input].shape)?;
        self.nodes.push(GraphNode {
            op: GraphOp::Layer(layer),
            inputs: vec![input],
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Result<NodeId> {
        let cin = self.channels(input);
        let conv = Conv2d::new(cin, filters, kernel, stride, padding, bias, &mut *self.rng)?;
        self.layer(name, LayerKind::Conv2d(conv), input)
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, input: NodeId) -> Result<NodeId> {
        let c = self.channels(input);
        self.layer(name, LayerKind::BatchNorm(BatchNormState::new(c)?), input)
    }

    pub fn relu(&mut self, name: impl Into<String>, input: NodeId) -> Result<NodeId> {
        self.layer(name, LayerKind::Relu, input)
    }

    pub fn dropout(&mut self, name: impl Into<String>, input: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.layer(name, LayerKind::Dropout { rate }, input)
    }

    pub fn pool(
        &mut self,
        name: impl Into<String>,
        input: NodeId,
        kind: PoolKind,
        size: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        if size == 0 || stride == 0 {
            return Err(invalid("pool size and stride must be positive"));
        }
        let spec = PoolSpec {
            kind,
            size,
            stride,
            padding,
        };
        self.layer(name, LayerKind::Pool(spec), input)
    }

    pub fn dense(&mut self, name: impl Into<String>, input: NodeId, units: usize) -> Result<NodeId> {
        let features = match self.shape(input) {
            &[f] => f,
            other => return Err(shape_err(format!("dense layer needs flat input, got {other:?}"))),
        };
        let d = Dense::new(features, units, &mut *self.rng)?;
        self.layer(name, LayerKind::Dense(d), input)
    }

    /// Convolution followed by batch norm and ReLU. The convolution has no
    /// bias because batch norm would cancel it.
    pub fn conv_bn_relu(&mut self, prefix: &str, input: NodeId, filters: usize, kernel: usize) -> Result<NodeId> {
        let c = self.conv(
            format!("{prefix}.conv"),
            input,
            filters,
            kernel,
            1,
            Padding::Same,
            false,
        )?;
        let b = self.batch_norm(format!("{prefix}.bn"), c)?;
        self.relu(format!("{prefix}.relu"), b)
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| invalid("concat needs at least one input"))?;
        let spatial = self.nodes[first].shape[1..].to_vec();
        let mut channels = 0;
        for &i in inputs {
            let s = &self.nodes[i].shape;
            if s.len() != 3 || s[1..] != spatial[..] {
                return Err(shape_err(format!(
                    "concat inputs disagree on spatial extents: {s:?} vs {:?}",
                    self.nodes[first].shape
                )));
            }
            channels += s[0];
        }
        let mut shape = vec![channels];
        shape.extend(spatial);
        self.nodes.push(GraphNode {
            op: GraphOp::Concat,
            inputs: inputs.to_vec(),
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(format!(
                "add inputs differ: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let shape = self.nodes[a].shape.clone();
        self.nodes.push(GraphNode {
            op: GraphOp::Add,
            inputs: vec![a, b],
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn finish(self, output: NodeId) -> Result<Graph<T>> {
        if output >= self.nodes.len() {
            return Err(invalid("graph output node does not exist"));
        }
        if !matches!(self.nodes.first().map(|n| &n.op), Some(GraphOp::Input)) {
            return Err(invalid("graph must start with its input node"));
        }
        Ok(Graph {
            nodes: self.nodes,
            output,
        })
    }
}

impl<T: Real> Graph<T> {
    /// Builds a graph with a single input of the given per-sample shape.
    pub fn build<R, F>(input_shape: &[usize], rng: &mut R, body: F) -> Result<Self>
    where
        R: Rng + ?Sized,
        F: FnOnce(&mut GraphBuilder<'_, T, R>, NodeId) -> Result<NodeId>,
    {
        let mut b = GraphBuilder::new(rng);
        let x = b.input(input_shape)?;
        let out = body(&mut b, x)?;
        b.finish(out)
    }

    pub fn nodes(&self) -> &[GraphNode<T>] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerNode<T>> {
        self.nodes.iter().filter_map(|n| match &n.op {
            GraphOp::Layer(l) => Some(l),
            _ => None,
        })
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerNode<T>> {
        self.nodes.iter_mut().filter_map(|n| match &mut n.op {
            GraphOp::Layer(l) => Some(l),
            _ => None,
        })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerNode<T>> {
        self.layers().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerNode<T>> {
        self.layers_mut().find(|l| l.name == name)
    }

    /// Index of the node holding the named layer.
    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, GraphOp::Layer(l) if l.name == name))
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records the graph on `tape` for a batch `x`. In training mode the
    /// batch statistics of each batch-norm node are returned with its id.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Var, Vec<(NodeId, BatchStats)>)> {
        let shape = tape.value(x)?.shape();
        if shape[1..] != self.nodes[0].shape[..] {
            return Err(shape_err(format!(
                "graph expects per-sample input {:?}, got batch {:?}",
                self.nodes[0].shape, shape
            )));
        }
        let mut vars: Vec<Option<Var>> = vec![None; self.nodes.len()];
        let mut stats = Vec::new();
        for (id, node) in self.nodes.iter().enumerate().take(self.output + 1) {
            let input = |k: usize| vars[node.inputs[k]].expect("topological order");
            let v = match &node.op {
                GraphOp::Input => x,
                GraphOp::Layer(l) => {
                    let (v, s) = l.forward(tape, input(0), ctx)?;
                    if let Some(s) = s {
                        stats.push((id, s));
                    }
                    v
                }
                GraphOp::Concat => {
                    let ins: Vec<Var> = node
                        .inputs
                        .iter()
                        .map(|&i| vars[i].expect("topological order"))
                        .collect();
                    tape.concat_channels(&ins)?
                }
                GraphOp::Add => tape.add(input(0), input(1))?,
            };
            vars[id] = Some(v);
        }
        Ok((vars[self.output].expect("output computed"), stats))
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[(NodeId, BatchStats)]) {
        for (id, s) in stats {
            if let GraphOp::Layer(LayerNode {
                kind: LayerKind::BatchNorm(bn),
                ..
            }) = &mut self.nodes[*id].op
            {
                bn.update_running(s);
            }
        }
    }
}
