//! Typed layer graph and its forward interpreter.
//!
//! A [`NetworkGraph`] is a DAG of [`LayerNode`]s built through
//! [`GraphBuilder`], which validates wiring (existing inputs, channel
//! agreement) as nodes are added. Node ids are dense and equal to insertion
//! order, which is already a topological order; `finish` re-checks it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tape, Tensor};

use super::masked_bn::MaskedBnState;

pub type NodeId = usize;

/// Convolution parameters shared by the three conv node kinds.
pub struct ConvSpec<T> {
    /// `[Cout,Cin,K,K]` for standard/pointwise, `[C,1,K,K]` for depthwise.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvSpec<T> {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub enum LayerKind<T> {
    Input { channels: usize },
    Conv(ConvSpec<T>),
    DepthwiseConv(ConvSpec<T>),
    PointwiseConv(ConvSpec<T>),
    MaskedBn(MaskedBnState<T>),
    Relu,
    AvgPool { factor: usize },
    Upsample { factor: usize },
    Add,
    Concat,
    Output,
}

impl<T> LayerKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv(_) => "conv",
            LayerKind::DepthwiseConv(_) => "depthwise_conv",
            LayerKind::PointwiseConv(_) => "pointwise_conv",
            LayerKind::MaskedBn(_) => "masked_bn",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::Output => "output",
        }
    }
}

pub struct LayerNode<T> {
    pub id: NodeId,
    pub kind: LayerKind<T>,
    pub inputs: Vec<NodeId>,
    pub out_channels: usize,
    /// User-assigned module tag, used for grouped complexity reporting.
    pub tag: String,
}

/// Incrementally builds a validated [`NetworkGraph`].
pub struct GraphBuilder<T> {
    nodes: Vec<LayerNode<T>>,
    input: Option<NodeId>,
    output: Option<NodeId>,
}

impl<T: Real> GraphBuilder<T> {
    pub fn new() -> Self {
        GraphBuilder { nodes: Vec::new(), input: None, output: None }
    }

    fn channels_of(&self, id: NodeId) -> Result<usize> {
        self.nodes
            .get(id)
            .map(|n| n.out_channels)
            .ok_or_else(|| Error::Graph(format!("node {id} does not exist")))
    }

    fn push(&mut self, kind: LayerKind<T>, inputs: Vec<NodeId>, out_channels: usize, tag: &str) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(LayerNode { id, kind, inputs, out_channels, tag: tag.to_string() });
        id
    }

    pub fn input(&mut self, channels: usize, tag: &str) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(Error::Graph("graph already has an input node".into()));
        }
        if channels == 0 {
            return Err(Error::Graph("input channels must be positive".into()));
        }
        let id = self.push(LayerKind::Input { channels }, vec![], channels, tag);
        self.input = Some(id);
        Ok(id)
    }

    pub fn conv(&mut self, from: NodeId, spec: ConvSpec<T>, tag: &str) -> Result<NodeId> {
        let cin = self.channels_of(from)?;
        if spec.in_channels() != cin {
            return Err(Error::Graph(format!(
                "conv after node {from}: weight expects {} input channels, producer has {cin}",
                spec.in_channels()
            )));
        }
        let cout = spec.out_channels();
        Ok(self.push(LayerKind::Conv(spec), vec![from], cout, tag))
    }

    pub fn depthwise_conv(&mut self, from: NodeId, spec: ConvSpec<T>, tag: &str) -> Result<NodeId> {
        let cin = self.channels_of(from)?;
        if spec.weight.shape()[1] != 1 {
            return Err(Error::Graph(format!("node {}: depthwise weight must be [C,1,K,K]", self.nodes.len())));
        }
        if spec.out_channels() != cin {
            return Err(Error::Graph(format!(
                "depthwise conv after node {from}: weight has {} channels, producer has {cin}",
                spec.out_channels()
            )));
        }
        let cout = spec.out_channels();
        Ok(self.push(LayerKind::DepthwiseConv(spec), vec![from], cout, tag))
    }

    pub fn pointwise_conv(&mut self, from: NodeId, spec: ConvSpec<T>, tag: &str) -> Result<NodeId> {
        let cin = self.channels_of(from)?;
        if spec.kernel() != 1 {
            return Err(Error::Graph(format!("node {}: pointwise kernel must be 1x1", self.nodes.len())));
        }
        if spec.in_channels() != cin {
            return Err(Error::Graph(format!(
                "pointwise conv after node {from}: weight expects {} input channels, producer has {cin}",
                spec.in_channels()
            )));
        }
        let cout = spec.out_channels();
        Ok(self.push(LayerKind::PointwiseConv(spec), vec![from], cout, tag))
    }

    pub fn masked_bn(&mut self, from: NodeId, state: MaskedBnState<T>, tag: &str) -> Result<NodeId> {
        let cin = self.channels_of(from)?;
        if state.channels() != cin {
            return Err(Error::Graph(format!(
                "batch norm after node {from}: state has {} channels, producer has {cin}",
                state.channels()
            )));
        }
        Ok(self.push(LayerKind::MaskedBn(state), vec![from], cin, tag))
    }

    pub fn relu(&mut self, from: NodeId, tag: &str) -> Result<NodeId> {
        let c = self.channels_of(from)?;
        Ok(self.push(LayerKind::Relu, vec![from], c, tag))
    }

    pub fn avg_pool(&mut self, from: NodeId, factor: usize, tag: &str) -> Result<NodeId> {
        let c = self.channels_of(from)?;
        if factor < 2 {
            return Err(Error::Graph("avg_pool factor must be >= 2".into()));
        }
        Ok(self.push(LayerKind::AvgPool { factor }, vec![from], c, tag))
    }

    pub fn upsample(&mut self, from: NodeId, factor: usize, tag: &str) -> Result<NodeId> {
        let c = self.channels_of(from)?;
        if factor < 2 {
            return Err(Error::Graph("upsample factor must be >= 2".into()));
        }
        Ok(self.push(LayerKind::Upsample { factor }, vec![from], c, tag))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, tag: &str) -> Result<NodeId> {
        let ca = self.channels_of(a)?;
        let cb = self.channels_of(b)?;
        if ca != cb {
            return Err(Error::Graph(format!(
                "add of node {a} ({ca} channels) and node {b} ({cb} channels): channel counts must match"
            )));
        }
        Ok(self.push(LayerKind::Add, vec![a, b], ca, tag))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, tag: &str) -> Result<NodeId> {
        let ca = self.channels_of(a)?;
        let cb = self.channels_of(b)?;
        Ok(self.push(LayerKind::Concat, vec![a, b], ca + cb, tag))
    }

    pub fn output(&mut self, from: NodeId) -> Result<NodeId> {
        if self.output.is_some() {
            return Err(Error::Graph("graph already has an output node".into()));
        }
        let c = self.channels_of(from)?;
        let id = self.push(LayerKind::Output, vec![from], c, "output");
        self.output = Some(id);
        Ok(id)
    }

    pub fn finish(self) -> Result<NetworkGraph<T>> {
        let input = self.input.ok_or_else(|| Error::Graph("graph has no input node".into()))?;
        let output = self.output.ok_or_else(|| Error::Graph("graph has no output node".into()))?;
        // Insertion order is topological by construction (inputs must already
        // exist); verify rather than trust it.
        for node in &self.nodes {
            for &i in &node.inputs {
                if i >= node.id {
                    return Err(Error::Graph(format!("node {} consumes later node {i}: graph must be acyclic", node.id)));
                }
            }
        }
        let topo: Vec<NodeId> = (0..self.nodes.len()).collect();
        Ok(NetworkGraph { nodes: self.nodes, input, output, topo })
    }
}

impl<T: Real> Default for GraphBuilder<T> {
    fn default() -> Self {
        GraphBuilder::new()
    }
}

/// Result of one forward evaluation.
pub struct ForwardPass<T> {
    pub output: Tensor<T>,
    /// Mask tensors of every masked batch-norm layer, in topological order.
    pub masks: Vec<(NodeId, Tensor<T>)>,
}

/// A validated DAG of layers holding its own parameters.
pub struct NetworkGraph<T> {
    nodes: Vec<LayerNode<T>>,
    input: NodeId,
    output: NodeId,
    topo: Vec<NodeId>,
}

impl<T: Real> NetworkGraph<T> {
    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode<T> {
        &self.nodes[id]
    }

    pub fn input_id(&self) -> NodeId {
        self.input
    }

    pub fn output_id(&self) -> NodeId {
        self.output
    }

    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn input_channels(&self) -> usize {
        self.nodes[self.input].out_channels
    }

    pub fn output_channels(&self) -> usize {
        self.nodes[self.output].out_channels
    }

    /// Evaluate the graph on a `[N,C,H,W]` batch.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>, training: bool) -> Result<ForwardPass<T>> {
        let (_, c, _, _) = x.dims4("graph forward")?;
        if c != self.input_channels() {
            return Err(Error::ShapeMismatch {
                op: "graph forward",
                detail: format!("graph expects {} input channels, batch has shape {:?}", self.input_channels(), x.shape()),
            });
        }
        let mut values: HashMap<NodeId, Tensor<T>> = HashMap::with_capacity(self.nodes.len());
        let mut masks = Vec::new();
        for &id in &self.topo {
            let node = &self.nodes[id];
            let value = match &node.kind {
                LayerKind::Input { .. } => x.clone(),
                LayerKind::Conv(spec) => {
                    ops::conv2d(tape, &values[&node.inputs[0]], &spec.weight, spec.bias.as_ref(), spec.stride, spec.padding)?
                }
                LayerKind::DepthwiseConv(spec) => ops::depthwise_conv2d(
                    tape, &values[&node.inputs[0]], &spec.weight, spec.bias.as_ref(), spec.stride, spec.padding,
                )?,
                LayerKind::PointwiseConv(spec) => {
                    ops::pointwise_conv2d(tape, &values[&node.inputs[0]], &spec.weight, spec.bias.as_ref())?
                }
                LayerKind::MaskedBn(state) => {
                    let (out, mask) = state.forward(tape, &values[&node.inputs[0]], training)?;
                    if let Some(m) = mask {
                        masks.push((id, m));
                    }
                    out
                }
                LayerKind::Relu => ops::relu(tape, &values[&node.inputs[0]])?,
                LayerKind::AvgPool { factor } => ops::avgpool2d(tape, &values[&node.inputs[0]], *factor)?,
                LayerKind::Upsample { factor } => ops::upsample_nearest2d(tape, &values[&node.inputs[0]], *factor)?,
                LayerKind::Add => ops::add(tape, &values[&node.inputs[0]], &values[&node.inputs[1]])?,
                LayerKind::Concat => ops::concat_channels(tape, &values[&node.inputs[0]], &values[&node.inputs[1]])?,
                LayerKind::Output => values[&node.inputs[0]].clone(),
            };
            values.insert(id, value);
        }
        Ok(ForwardPass { output: values.remove(&self.output).expect("output evaluated"), masks })
    }

    /// All trainable tensors in stable (node id, role) order.
    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Trainable tensors with stable names (`node{id}.{role}`).
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.kind {
                LayerKind::Conv(spec) | LayerKind::DepthwiseConv(spec) | LayerKind::PointwiseConv(spec) => {
                    out.push((format!("node{}.weight", node.id), spec.weight.clone()));
                    if let Some(b) = &spec.bias {
                        out.push((format!("node{}.bias", node.id), b.clone()));
                    }
                }
                LayerKind::MaskedBn(state) => {
                    out.push((format!("node{}.gamma", node.id), state.gamma.clone()));
                    out.push((format!("node{}.beta", node.id), state.beta.clone()));
                    if state.masked {
                        out.push((format!("node{}.tau", node.id), state.tau.clone()));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Parameters plus non-trained state (running statistics, frozen tau):
    /// everything a checkpoint must carry.
    pub fn named_state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.kind {
                LayerKind::Conv(spec) | LayerKind::DepthwiseConv(spec) | LayerKind::PointwiseConv(spec) => {
                    out.push((format!("node{}.weight", node.id), spec.weight.clone()));
                    if let Some(b) = &spec.bias {
                        out.push((format!("node{}.bias", node.id), b.clone()));
                    }
                }
                LayerKind::MaskedBn(state) => {
                    out.push((format!("node{}.gamma", node.id), state.gamma.clone()));
                    out.push((format!("node{}.beta", node.id), state.beta.clone()));
                    out.push((format!("node{}.tau", node.id), state.tau.clone()));
                    out.push((format!("node{}.running_mean", node.id), state.running_mean.clone()));
                    out.push((format!("node{}.running_var", node.id), state.running_var.clone()));
                }
                _ => {}
            }
        }
        out
    }

    /// Copy of every state tensor's values, for best-epoch snapshots.
    pub fn snapshot_state(&self) -> Vec<(String, Vec<T>)> {
        self.named_state().into_iter().map(|(n, t)| (n, t.to_vec())).collect()
    }

    pub fn restore_state(&self, snapshot: &[(String, Vec<T>)]) {
        let state = self.named_state();
        assert_eq!(state.len(), snapshot.len(), "snapshot does not match graph state");
        for ((name, tensor), (snap_name, values)) in state.iter().zip(snapshot) {
            assert_eq!(name, snap_name, "snapshot entry order mismatch");
            tensor.assign(values);
        }
    }

    /// Masked batch-norm layers (the prunable ones), in node order.
    pub fn masked_bn_nodes(&self) -> Vec<(NodeId, &MaskedBnState<T>)> {
        self.bn_nodes().into_iter().filter(|(_, s)| s.masked).collect()
    }

    /// All batch-norm layers, masked or not.
    pub fn bn_nodes(&self) -> Vec<(NodeId, &MaskedBnState<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                LayerKind::MaskedBn(state) => Some((n.id, state)),
                _ => None,
            })
            .collect()
    }

    /// Total and active prunable channel counts across masked layers.
    pub fn channel_census(&self) -> (usize, usize) {
        let mut total = 0;
        let mut active = 0;
        for (_, state) in self.masked_bn_nodes() {
            total += state.channels();
            active += state.active_channels();
        }
        (total, active)
    }

    /// Fraction of prunable channels still active; 1.0 when nothing is
    /// prunable.
    pub fn active_fraction(&self) -> f64 {
        let (total, active) = self.channel_census();
        if total == 0 {
            1.0
        } else {
            active as f64 / total as f64
        }
    }

    /// Clamp every trainable threshold to `[0, inf)`.
    pub fn clamp_thresholds(&self) {
        for (_, state) in self.masked_bn_nodes() {
            state.clamp_tau();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::masked_bn::BnOptions;

    fn conv_spec(cout: usize, cin: usize, k: usize) -> ConvSpec<f64> {
        ConvSpec {
            weight: Tensor::from_vec(&[cout, cin, k, k], vec![0.1; cout * cin * k * k]).unwrap().with_grad(),
            bias: None,
            stride: 1,
            padding: k / 2,
        }
    }

    #[test]
    fn builder_rejects_channel_mismatch() {
        let mut b = GraphBuilder::<f64>::new();
        let input = b.input(3, "in").unwrap();
        assert!(b.conv(input, conv_spec(4, 2, 3), "x").is_err());
    }

    #[test]
    fn builder_rejects_add_of_unequal_channels() {
        let mut b = GraphBuilder::<f64>::new();
        let input = b.input(2, "in").unwrap();
        let c1 = b.conv(input, conv_spec(4, 2, 3), "a").unwrap();
        let c2 = b.conv(input, conv_spec(3, 2, 3), "b").unwrap();
        assert!(b.add(c1, c2, "sum").is_err());
    }

    #[test]
    fn concat_sums_channels() {
        let mut b = GraphBuilder::<f64>::new();
        let input = b.input(2, "in").unwrap();
        let c1 = b.conv(input, conv_spec(4, 2, 3), "a").unwrap();
        let c2 = b.conv(input, conv_spec(3, 2, 3), "b").unwrap();
        let cat = b.concat(c1, c2, "cat").unwrap();
        let out = b.output(cat).unwrap();
        let g = b.finish().unwrap();
        assert_eq!(g.node(cat).out_channels, 7);
        assert_eq!(g.output_channels(), 7);
        assert_eq!(g.node(out).inputs, vec![cat]);
    }

    #[test]
    fn forward_runs_a_small_chain() {
        let mut b = GraphBuilder::<f64>::new();
        let input = b.input(1, "in").unwrap();
        let c = b.conv(input, conv_spec(2, 1, 3), "conv").unwrap();
        let bn = b
            .masked_bn(c, MaskedBnState::with_unit_gamma(2, &BnOptions::default()).unwrap(), "bn")
            .unwrap();
        let r = b.relu(bn, "relu").unwrap();
        b.output(r).unwrap();
        let g = b.finish().unwrap();

        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f64 * 0.25).collect()).unwrap();
        let mut tape = Tape::new();
        let pass = g.forward(&mut tape, &x, true).unwrap();
        assert_eq!(pass.output.shape(), &[1, 2, 4, 4]);
        assert_eq!(pass.masks.len(), 1);
        assert!(pass.output.all_finite());
    }

    #[test]
    fn missing_output_is_an_error() {
        let mut b = GraphBuilder::<f64>::new();
        b.input(1, "in").unwrap();
        assert!(b.finish().is_err());
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut b = GraphBuilder::<f64>::new();
        let input = b.input(1, "in").unwrap();
        let c = b.conv(input, conv_spec(2, 1, 3), "conv").unwrap();
        b.output(c).unwrap();
        let g = b.finish().unwrap();
        let snap = g.snapshot_state();
        let w = match &g.node(1).kind {
            LayerKind::Conv(spec) => spec.weight.clone(),
            _ => unreachable!(),
        };
        w.assign(&vec![9.0; w.numel()]);
        g.restore_state(&snap);
        assert!(w.to_vec().iter().all(|&v| (v - 0.1).abs() < 1e-12));
    }
}
