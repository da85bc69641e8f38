//! Hourglass encoder-decoder assembly and depthwise-separable blocks.
//!
//! The hourglass mirrors the high-cost structures this toolkit targets:
//! conv (or separable) + BN + ReLU down blocks with average pooling,
//! residual bottleneck blocks in the middle, and a symmetric decoder with
//! nearest upsampling and skip concatenation. Every conv is followed by a
//! batch norm (masked when pruning is enabled) except the regression head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tensor};

use super::graph::{ConvSpec, GraphBuilder, NetworkGraph, NodeId};
use super::masked_bn::{BnOptions, MaskedBnState};

/// Initial distribution of batch-norm scale parameters.
///
/// `Constant(1.0)` keeps every channel far from the default threshold;
/// pruning runs draw from a uniform range instead so that masks are actually
/// exercised during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaInit {
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
}

impl GammaInit {
    fn draw<T: Real>(&self, channels: usize, rng: &mut impl Rng) -> Vec<T> {
        match *self {
            GammaInit::Constant(v) => vec![real(v); channels],
            GammaInit::Uniform { lo, hi } => (0..channels).map(|_| real(rng.gen_range(lo..hi))).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HourglassConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width per resolution level, outermost first. Needs >= 2
    /// levels; the encoder pools once per level transition.
    pub channels: Vec<usize>,
    pub bottleneck_blocks: usize,
    /// Replace 3x3 convolutions with depthwise-separable pairs.
    pub use_separable: bool,
    /// Attach trainable prune masks to every batch norm.
    pub masked_bn: bool,
    pub kernel: usize,
    pub bn: BnOptions,
    pub gamma_init: GammaInit,
}

impl HourglassConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidArg { op: "hourglass", detail };
        if self.channels.len() < 2 {
            return Err(bad(format!("need at least 2 levels, got {:?}", self.channels)));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(bad(format!("channel widths must be positive, got {:?}", self.channels)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(bad("in/out channels must be positive".into()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(bad(format!("kernel must be odd, got {}", self.kernel)));
        }
        if let GammaInit::Uniform { lo, hi } = self.gamma_init {
            if !(lo < hi) || lo <= 0.0 {
                return Err(bad(format!("gamma_init uniform range must satisfy 0 < lo < hi, got [{lo}, {hi})")));
            }
        }
        if self.bn.tau_init < 0.0 || self.bn.epsilon_band < 0.0 {
            return Err(bad("tau_init and epsilon_band must be >= 0".into()));
        }
        Ok(())
    }

    fn bn_options(&self) -> BnOptions {
        BnOptions { masked: self.masked_bn, ..self.bn }
    }
}

/// Uniform Kaiming-style init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn init_weight<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| real(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("init weight shape").with_grad()
}

/// A standard convolution node with fresh weights.
pub fn add_conv<T: Real>(
    b: &mut GraphBuilder<T>,
    from: NodeId,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias: bool,
    tag: &str,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let fan_in = cin * k * k;
    let spec = ConvSpec {
        weight: init_weight(&[cout, cin, k, k], fan_in, rng),
        bias: bias.then(|| init_weight(&[cout], fan_in, rng)),
        stride,
        padding,
    };
    b.conv(from, spec, tag)
}

/// Depthwise KxK over `cin` channels followed by a pointwise 1x1 to `cout`:
/// same output shape as the standard convolution it replaces, at
/// `cin*K^2 + cin*cout` weights instead of `cin*cout*K^2`.
#[allow(clippy::too_many_arguments)]
pub fn make_depthwise_separable<T: Real>(
    b: &mut GraphBuilder<T>,
    from: NodeId,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias: bool,
    tag: &str,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let dw_fan_in = k * k;
    let dw = ConvSpec {
        weight: init_weight(&[cin, 1, k, k], dw_fan_in, rng),
        bias: bias.then(|| init_weight(&[cin], dw_fan_in, rng)),
        stride,
        padding,
    };
    let dw_id = b.depthwise_conv(from, dw, tag)?;
    let pw = ConvSpec {
        weight: init_weight(&[cout, cin, 1, 1], cin, rng),
        bias: bias.then(|| init_weight(&[cout], cin, rng)),
        stride: 1,
        padding: 0,
    };
    b.pointwise_conv(dw_id, pw, tag)
}

/// conv (or separable) -> BN -> ReLU.
#[allow(clippy::too_many_arguments)]
fn conv_bn_relu<T: Real>(
    b: &mut GraphBuilder<T>,
    cfg: &HourglassConfig,
    from: NodeId,
    cin: usize,
    cout: usize,
    tag: &str,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let bn = conv_bn(b, cfg, from, cin, cout, tag, rng)?;
    b.relu(bn, tag)
}

fn conv_bn<T: Real>(
    b: &mut GraphBuilder<T>,
    cfg: &HourglassConfig,
    from: NodeId,
    cin: usize,
    cout: usize,
    tag: &str,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let k = cfg.kernel;
    let pad = k / 2;
    let conv = if cfg.use_separable && k > 1 {
        make_depthwise_separable(b, from, cin, cout, k, 1, pad, false, tag, rng)?
    } else {
        add_conv(b, from, cin, cout, k, 1, pad, false, tag, rng)?
    };
    let state = MaskedBnState::new(cfg.gamma_init.draw(cout, rng), &cfg.bn_options())?;
    b.masked_bn(conv, state, tag)
}

/// Build the encoder-decoder graph described by `cfg`.
///
/// Spatial contract: with L levels the encoder pools L-1 times, so inputs
/// must be divisible by 2^(L-1); the decoder restores the input resolution
/// exactly and the head maps back to `out_channels`.
pub fn build_hourglass<T: Real>(cfg: &HourglassConfig, rng: &mut impl Rng) -> Result<NetworkGraph<T>> {
    cfg.validate()?;
    let levels = cfg.channels.len();
    let mut b = GraphBuilder::new();
    let input = b.input(cfg.in_channels, "input")?;

    // Encoder: conv block per level, pooling between levels. The pre-pool
    // activation is kept as the skip for the matching decoder level.
    let mut cur = input;
    let mut cur_ch = cfg.in_channels;
    let mut skips: Vec<(NodeId, usize)> = Vec::new();
    for (i, &ch) in cfg.channels.iter().enumerate() {
        let tag = format!("encoder.{i}");
        cur = conv_bn_relu(&mut b, cfg, cur, cur_ch, ch, &tag, rng)?;
        cur_ch = ch;
        if i + 1 < levels {
            skips.push((cur, ch));
            cur = b.avg_pool(cur, 2, &tag)?;
        }
    }

    // Residual bottleneck blocks at the innermost width.
    for j in 0..cfg.bottleneck_blocks {
        let tag = format!("bottleneck.{j}");
        let mid = conv_bn_relu(&mut b, cfg, cur, cur_ch, cur_ch, &tag, rng)?;
        let branch = conv_bn(&mut b, cfg, mid, cur_ch, cur_ch, &tag, rng)?;
        let sum = b.add(cur, branch, &tag)?;
        cur = b.relu(sum, &tag)?;
    }

    // Decoder: upsample, concat the skip, conv block back to the skip width.
    for i in (0..levels - 1).rev() {
        let tag = format!("decoder.{i}");
        cur = b.upsample(cur, 2, &tag)?;
        let (skip, skip_ch) = skips[i];
        cur = b.concat(cur, skip, &tag)?;
        let cat_ch = cur_ch + skip_ch;
        cur = conv_bn_relu(&mut b, cfg, cur, cat_ch, cfg.channels[i], &tag, rng)?;
        cur_ch = cfg.channels[i];
    }

    // Regression head: plain conv with bias, no BN.
    let head = add_conv(&mut b, cur, cur_ch, cfg.out_channels, cfg.kernel, 1, cfg.kernel / 2, true, "head", rng)?;
    b.output(head)?;
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base_cfg() -> HourglassConfig {
        HourglassConfig {
            in_channels: 1,
            out_channels: 1,
            channels: vec![4, 6],
            bottleneck_blocks: 1,
            use_separable: false,
            masked_bn: true,
            kernel: 3,
            bn: BnOptions::default(),
            gamma_init: GammaInit::Uniform { lo: 0.02, hi: 1.0 },
        }
    }

    #[test]
    fn invalid_configs_fail_before_building() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = base_cfg();
        cfg.channels = vec![4];
        assert!(build_hourglass::<f32>(&cfg, &mut rng).is_err());
        let mut cfg = base_cfg();
        cfg.kernel = 4;
        assert!(build_hourglass::<f32>(&cfg, &mut rng).is_err());
        let mut cfg = base_cfg();
        cfg.channels = vec![4, 0];
        assert!(build_hourglass::<f32>(&cfg, &mut rng).is_err());
    }

    #[test]
    fn forward_preserves_spatial_dims_and_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = build_hourglass::<f32>(&base_cfg(), &mut rng).unwrap();
        let x = Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|v| (v as f32 * 0.71).sin()).collect()).unwrap();
        let mut tape = Tape::no_grad();
        let pass = g.forward(&mut tape, &x, true).unwrap();
        assert_eq!(pass.output.shape(), &[2, 1, 16, 16]);
        assert!(pass.output.all_finite());
        // one mask per masked BN: 2 encoder, 2 bottleneck, 1 decoder
        assert_eq!(pass.masks.len(), 5);
    }

    #[test]
    fn separable_block_shape_matches_standard_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, stride, padding, h, w) in
            &[(3usize, 8usize, 3usize, 1usize, 1usize, 9usize, 11usize), (2, 5, 5, 2, 2, 12, 8), (4, 4, 1, 1, 0, 6, 6), (1, 1, 1, 1, 0, 3, 3)]
        {
            let mut b1 = GraphBuilder::<f32>::new();
            let i1 = b1.input(cin, "in").unwrap();
            let s = make_depthwise_separable(&mut b1, i1, cin, cout, k, stride, padding, false, "sep", &mut rng).unwrap();
            b1.output(s).unwrap();
            let g1 = b1.finish().unwrap();

            let mut b2 = GraphBuilder::<f32>::new();
            let i2 = b2.input(cin, "in").unwrap();
            let c = add_conv(&mut b2, i2, cin, cout, k, stride, padding, false, "conv", &mut rng).unwrap();
            b2.output(c).unwrap();
            let g2 = b2.finish().unwrap();

            let x = Tensor::from_vec(&[1, cin, h, w], vec![0.5; cin * h * w]).unwrap();
            let mut tape = Tape::no_grad();
            let y1 = g1.forward(&mut tape, &x, false).unwrap().output;
            let y2 = g2.forward(&mut tape, &x, false).unwrap().output;
            assert_eq!(y1.shape(), y2.shape(), "cin={cin} cout={cout} k={k} s={stride} p={padding}");
        }
    }

    #[test]
    fn pointwise_identity_embedding_reproduces_depthwise_output() {
        // Separable block with identity pointwise weight == bare depthwise.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 3;
        let mut b = GraphBuilder::<f32>::new();
        let input = b.input(c, "in").unwrap();
        let sep = make_depthwise_separable(&mut b, input, c, c, 3, 1, 1, false, "sep", &mut rng).unwrap();
        b.output(sep).unwrap();
        let g = b.finish().unwrap();

        // overwrite the pointwise weight with the identity embedding
        let pw = match &g.node(sep).kind {
            crate::layers::LayerKind::PointwiseConv(spec) => spec.weight.clone(),
            _ => unreachable!(),
        };
        let mut ident = vec![0.0f32; c * c];
        for i in 0..c {
            ident[i * c + i] = 1.0;
        }
        pw.assign(&ident);

        let x = Tensor::from_vec(&[1, c, 5, 5], (0..75).map(|v| (v as f32 * 0.13).cos()).collect()).unwrap();
        let mut tape = Tape::no_grad();
        let y_sep = g.forward(&mut tape, &x, false).unwrap().output;

        // bare depthwise with the same weights
        let dw_weight = match &g.node(g.node(sep).inputs[0]).kind {
            crate::layers::LayerKind::DepthwiseConv(spec) => spec.weight.clone(),
            _ => unreachable!(),
        };
        let y_dw = crate::ops::depthwise_conv2d(&mut tape, &x, &dw_weight, None, 1, 1).unwrap();
        assert_eq!(y_sep.to_vec(), y_dw.to_vec());
    }

    #[test]
    fn gamma_init_is_deterministic_under_seed() {
        let g1 = build_hourglass::<f32>(&base_cfg(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let g2 = build_hourglass::<f32>(&base_cfg(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        for ((n1, t1), (n2, t2)) in g1.named_state().iter().zip(g2.named_state().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec());
        }
    }
}
