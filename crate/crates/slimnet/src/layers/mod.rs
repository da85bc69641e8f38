//! Layer and block library: masked batch norm with straight-through
//! threshold gradients, network graphs, and hourglass assembly.

mod graph;
mod hourglass;
mod masked_bn;

pub use graph::{ConvSpec, ForwardPass, GraphBuilder, LayerKind, LayerNode, NetworkGraph, NodeId};
pub use hourglass::{add_conv, build_hourglass, make_depthwise_separable, GammaInit, HourglassConfig};
pub use masked_bn::{ste_mask, BnOptions, MaskedBnState};
