//! The depth-estimation network: a ResNet-style encoder whose 3x3 block
//! convolutions are ACDConv layers, and a decoder that upsamples with
//! up-convolution modules and emits the multi-scale depth pyramid.
//!
//! The encoder produces five feature scales (1/2 .. 1/32). The decoder walks
//! back up with upsample -> 3x3 conv -> relu modules and channel-concatenated
//! skip connections. With iterative prediction on, a coarse depth map starts
//! at 1/8 resolution and residual maps refine it: D_i = upsample(D_{i-1}) +
//! R_i, with D_3 at full resolution; otherwise a single full-resolution head
//! predicts D_3 directly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acdconv::{AcdConv, FusionStrategy, DEFAULT_DILATIONS};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, TensorId};
use crate::ops::SeamMode;
use crate::pad::{PadMode, PadSpec};
use crate::tensor::{Shape, Tensor};

/// Structural configuration of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Input height; width is always twice the height (equirectangular 2:1).
    pub input_height: usize,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    /// Stem output channels (feature scale 1/2).
    pub stem_width: usize,
    /// Channels of the four striding stages (scales 1/4 .. 1/32).
    pub stage_widths: Vec<usize>,
    pub fusion: FusionStrategy,
    pub padding: PadMode,
    /// Iterative multi-scale depth prediction (off = single head at 1/1).
    pub iterative: bool,
    /// Branch dilations of every ACDConv layer.
    pub dilations: Vec<(usize, usize)>,
    /// Bottleneck reduction of the fusion heads.
    pub reduction: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_height: 64,
            blocks: vec![2, 2, 2, 2],
            stem_width: 16,
            stage_widths: vec![16, 32, 64, 128],
            fusion: FusionStrategy::ChannelWise,
            padding: PadMode::Circular,
            iterative: true,
            dilations: DEFAULT_DILATIONS.to_vec(),
            reduction: 4,
        }
    }
}

impl NetConfig {
    pub fn input_width(&self) -> usize {
        self.input_height * 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height % 32 != 0 || self.input_height < 64 {
            return Err(Error::Config(format!(
                "input height must be a multiple of 32 and at least 64, got {}",
                self.input_height
            )));
        }
        if self.blocks.len() != 4 || self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config(format!("need 4 non-empty stages, got {:?}", self.blocks)));
        }
        if self.stage_widths.len() != 4 || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "need 4 positive stage widths, got {:?}",
                self.stage_widths
            )));
        }
        if self.stem_width == 0 {
            return Err(Error::Config("stem width must be positive".into()));
        }
        if self.dilations.is_empty() {
            return Err(Error::Config("at least one dilation branch required".into()));
        }
        if self.dilations.iter().any(|&(dy, dx)| dy == 0 || dx == 0) {
            return Err(Error::Config(format!("dilations must be >= 1, got {:?}", self.dilations)));
        }
        if self.reduction == 0 {
            return Err(Error::Config("fusion reduction must be >= 1".into()));
        }
        Ok(())
    }

    /// Seam handling for upsampling follows the padding mode: wrap whenever
    /// the padding treats the width axis as periodic.
    pub fn seam(&self) -> SeamMode {
        match self.padding {
            PadMode::Zero => SeamMode::Clamp,
            PadMode::LeftRight | PadMode::Circular => SeamMode::Wrap,
        }
    }
}

/// Plain convolution layer with bias. 3x3 kernels are padded (in the
/// network's padding mode) so stride-1 layers preserve size and stride-2
/// layers halve it exactly.
#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: Tensor,
    bias: Tensor,
    stride: (usize, usize),
}

impl ConvLayer {
    fn new<R: Rng>(in_ch: usize, out_ch: usize, ksize: usize, stride: usize, rng: &mut R) -> Self {
        ConvLayer {
            kernel: Tensor::kaiming(
                Shape::new(out_ch, in_ch, ksize, ksize),
                in_ch * ksize * ksize,
                rng,
            )
            .with_grad(),
            bias: Tensor::zeros(Shape::new(1, out_ch, 1, 1)).with_grad(),
            stride: (stride, stride),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        prefix: &str,
        x: TensorId,
        mode: PadMode,
    ) -> Result<TensorId> {
        let k = binds.bind(g, format!("{prefix}.kernel"), &self.kernel);
        let b = binds.bind(g, format!("{prefix}.bias"), &self.bias);
        let x = if self.kernel.shape().height == 3 {
            g.pad(x, PadSpec::uniform(1, 1, mode))?
        } else {
            x
        };
        g.conv2d(x, k, Some(b), self.stride, (1, 1))
    }

    fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        out.push((format!("{prefix}.kernel"), &self.kernel));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn params_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        out.push((format!("{prefix}.kernel"), &mut self.kernel));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// First convolution of a residual block: strided stage entries keep a plain
/// convolution (branch combination at stride 2 is not defined), stride-1
/// blocks use ACDConv.
#[derive(Clone, Debug)]
enum BlockConv {
    Plain(ConvLayer),
    Acd(AcdConv),
}

impl BlockConv {
    fn forward(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        prefix: &str,
        x: TensorId,
        mode: PadMode,
    ) -> Result<TensorId> {
        match self {
            BlockConv::Plain(c) => c.forward(g, binds, prefix, x, mode),
            BlockConv::Acd(c) => c.forward(g, binds, prefix, x, mode),
        }
    }

    fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        match self {
            BlockConv::Plain(c) => c.params(prefix, out),
            BlockConv::Acd(c) => c.params(prefix, out),
        }
    }

    fn params_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        match self {
            BlockConv::Plain(c) => c.params_mut(prefix, out),
            BlockConv::Acd(c) => c.params_mut(prefix, out),
        }
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: BlockConv,
    conv2: AcdConv,
    shortcut: Option<ConvLayer>,
}

impl BasicBlock {
    fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        feat: (usize, usize),
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = if stride == 2 {
            BlockConv::Plain(ConvLayer::new(in_ch, out_ch, 3, 2, rng))
        } else {
            BlockConv::Acd(AcdConv::new(
                in_ch,
                out_ch,
                &cfg.dilations,
                cfg.fusion,
                cfg.reduction,
                feat,
                rng,
            )?)
        };
        let conv2 =
            AcdConv::new(out_ch, out_ch, &cfg.dilations, cfg.fusion, cfg.reduction, feat, rng)?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some(ConvLayer::new(in_ch, out_ch, 1, stride, rng))
        } else {
            None
        };
        Ok(BasicBlock { conv1, conv2, shortcut })
    }

    fn forward(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        prefix: &str,
        x: TensorId,
        mode: PadMode,
    ) -> Result<TensorId> {
        let h = self.conv1.forward(g, binds, &format!("{prefix}.conv1"), x, mode)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, binds, &format!("{prefix}.conv2"), h, mode)?;
        let sc = match &self.shortcut {
            Some(proj) => proj.forward(g, binds, &format!("{prefix}.shortcut"), x, mode)?,
            None => x,
        };
        let sum = g.add(h, sc)?;
        Ok(g.relu(sum))
    }

    fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        if let Some(sc) = &self.shortcut {
            sc.params(&format!("{prefix}.shortcut"), out);
        }
    }

    fn params_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        self.conv1.params_mut(&format!("{prefix}.conv1"), out);
        self.conv2.params_mut(&format!("{prefix}.conv2"), out);
        if let Some(sc) = &mut self.shortcut {
            sc.params_mut(&format!("{prefix}.shortcut"), out);
        }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stem: ConvLayer,
    stages: Vec<Vec<BasicBlock>>,
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv: ConvLayer,
}

impl UpBlock {
    fn forward(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        prefix: &str,
        x: TensorId,
        mode: PadMode,
        seam: SeamMode,
    ) -> Result<TensorId> {
        let up = g.upsample2x(x, seam);
        let c = self.conv.forward(g, binds, &format!("{prefix}.conv"), up, mode)?;
        Ok(g.relu(c))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    ups: Vec<UpBlock>,
    heads: Vec<ConvLayer>,
}

/// Node ids of the depth pyramid inside a graph. With iterative prediction,
/// `depths` holds D_0..D_3 and `residuals` R_1..R_3; without it only D_3.
#[derive(Clone, Debug)]
pub struct PyramidIds {
    pub depths: Vec<TensorId>,
    pub residuals: Vec<TensorId>,
}

impl PyramidIds {
    pub fn d3(&self) -> TensorId {
        *self.depths.last().expect("pyramid never empty")
    }
}

/// Extracted depth pyramid values.
#[derive(Clone, Debug)]
pub struct DepthPyramid {
    pub depths: Vec<Tensor>,
    pub residuals: Vec<Tensor>,
}

impl DepthPyramid {
    pub fn d3(&self) -> &Tensor {
        self.depths.last().expect("pyramid never empty")
    }
}

/// The full network with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: NetConfig,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    /// Deterministic construction: the same config and seed always produce
    /// bit-identical parameters.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.input_height;
        let w = config.input_width();

        let stem = ConvLayer::new(3, config.stem_width, 3, 2, &mut rng);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = config.stem_width;
        for (stage_ix, (&count, &width)) in
            config.blocks.iter().zip(&config.stage_widths).enumerate()
        {
            // stage s runs at scale 1/2^(s+2)
            let scale = 1usize << (stage_ix + 2);
            let feat = (h / scale, w / scale);
            let mut blocks = Vec::with_capacity(count);
            for b in 0..count {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(in_ch, width, stride, feat, config, &mut rng)?);
                in_ch = width;
            }
            stages.push(blocks);
        }
        let encoder = Encoder { stem, stages };

        let c = [
            config.stem_width,
            config.stage_widths[0],
            config.stage_widths[1],
            config.stage_widths[2],
            config.stage_widths[3],
        ];
        let final_ch = (c[0] / 2).max(4);
        // up path: 1/32 -> 1/16 -> 1/8 -> 1/4 -> 1/2 -> 1/1 with skip concats
        let ups = vec![
            UpBlock { conv: ConvLayer::new(c[4], c[3], 3, 1, &mut rng) },
            UpBlock { conv: ConvLayer::new(2 * c[3], c[2], 3, 1, &mut rng) },
            UpBlock { conv: ConvLayer::new(2 * c[2], c[1], 3, 1, &mut rng) },
            UpBlock { conv: ConvLayer::new(2 * c[1], c[0], 3, 1, &mut rng) },
            UpBlock { conv: ConvLayer::new(2 * c[0], final_ch, 3, 1, &mut rng) },
        ];
        let heads = if config.iterative {
            vec![
                ConvLayer::new(2 * c[2], 1, 3, 1, &mut rng), // D0 at 1/8
                ConvLayer::new(2 * c[1], 1, 3, 1, &mut rng), // R1 at 1/4
                ConvLayer::new(2 * c[0], 1, 3, 1, &mut rng), // R2 at 1/2
                ConvLayer::new(final_ch, 1, 3, 1, &mut rng), // R3 at 1/1
            ]
        } else {
            vec![ConvLayer::new(final_ch, 1, 3, 1, &mut rng)]
        };
        let decoder = Decoder { ups, heads };

        Ok(Model { config: config.clone(), encoder, decoder })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Encoder features at scales 1/2, 1/4, 1/8, 1/16, 1/32.
    pub fn encode(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        image: TensorId,
    ) -> Result<Vec<TensorId>> {
        let mode = self.config.padding;
        let stem = self.encoder.stem.forward(g, binds, "encoder.stem", image, mode)?;
        let mut features = vec![g.relu(stem)];
        let mut x = features[0];
        for (s, stage) in self.encoder.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                x = block.forward(g, binds, &format!("encoder.stage{s}.block{b}"), x, mode)?;
            }
            features.push(x);
        }
        Ok(features)
    }

    /// Decoder: upsample with skip connections and emit the depth pyramid.
    pub fn decode(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        features: &[TensorId],
    ) -> Result<PyramidIds> {
        if features.len() != 5 {
            return Err(Error::invalid(format!("decode expects 5 features, got {}", features.len())));
        }
        let mode = self.config.padding;
        let seam = self.config.seam();
        let dec = &self.decoder;

        let mut x = features[4];
        x = dec.ups[0].forward(g, binds, "decoder.up0", x, mode, seam)?;
        x = g.concat_channels(&[x, features[3]])?;
        x = dec.ups[1].forward(g, binds, "decoder.up1", x, mode, seam)?;
        x = g.concat_channels(&[x, features[2]])?;

        if self.config.iterative {
            let d0 = dec.heads[0].forward(g, binds, "decoder.head0", x, mode)?;

            x = dec.ups[2].forward(g, binds, "decoder.up2", x, mode, seam)?;
            x = g.concat_channels(&[x, features[1]])?;
            let r1 = dec.heads[1].forward(g, binds, "decoder.head1", x, mode)?;
            let d0_up = g.upsample2x(d0, seam);
            let d1 = g.add(d0_up, r1)?;

            x = dec.ups[3].forward(g, binds, "decoder.up3", x, mode, seam)?;
            x = g.concat_channels(&[x, features[0]])?;
            let r2 = dec.heads[2].forward(g, binds, "decoder.head2", x, mode)?;
            let d1_up = g.upsample2x(d1, seam);
            let d2 = g.add(d1_up, r2)?;

            x = dec.ups[4].forward(g, binds, "decoder.up4", x, mode, seam)?;
            let r3 = dec.heads[3].forward(g, binds, "decoder.head3", x, mode)?;
            let d2_up = g.upsample2x(d2, seam);
            let d3 = g.add(d2_up, r3)?;

            Ok(PyramidIds { depths: vec![d0, d1, d2, d3], residuals: vec![r1, r2, r3] })
        } else {
            x = dec.ups[2].forward(g, binds, "decoder.up2", x, mode, seam)?;
            x = g.concat_channels(&[x, features[1]])?;
            x = dec.ups[3].forward(g, binds, "decoder.up3", x, mode, seam)?;
            x = g.concat_channels(&[x, features[0]])?;
            x = dec.ups[4].forward(g, binds, "decoder.up4", x, mode, seam)?;
            let d3 = dec.heads[0].forward(g, binds, "decoder.head0", x, mode)?;
            Ok(PyramidIds { depths: vec![d3], residuals: vec![] })
        }
    }

    /// Full forward pass from an image tensor (B, 3, H, 2H).
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<(PyramidIds, Bindings)> {
        let sh = image.shape();
        if sh.channels != 3
            || sh.height != self.config.input_height
            || sh.width != self.config.input_width()
        {
            return Err(Error::shape(
                "Model::forward",
                format!("(B, 3, {}, {})", self.config.input_height, self.config.input_width()),
                format!("{sh}"),
            ));
        }
        let mut binds = Bindings::new();
        let image_id = g.constant(image.clone());
        let features = self.encode(g, &mut binds, image_id)?;
        let pyramid = self.decode(g, &mut binds, &features)?;
        Ok((pyramid, binds))
    }

    pub fn extract_pyramid(&self, g: &Graph, ids: &PyramidIds) -> DepthPyramid {
        DepthPyramid {
            depths: ids.depths.iter().map(|&id| g.value(id).clone()).collect(),
            residuals: ids.residuals.iter().map(|&id| g.value(id).clone()).collect(),
        }
    }

    /// Parameters in a fixed traversal order (the same order `forward` binds
    /// them into a graph).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.stem.params("encoder.stem", &mut out);
        for (s, stage) in self.encoder.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.params(&format!("encoder.stage{s}.block{b}"), &mut out);
            }
        }
        let dec = &self.decoder;
        dec.ups[0].conv.params("decoder.up0.conv", &mut out);
        dec.ups[1].conv.params("decoder.up1.conv", &mut out);
        if self.config.iterative {
            dec.heads[0].params("decoder.head0", &mut out);
            dec.ups[2].conv.params("decoder.up2.conv", &mut out);
            dec.heads[1].params("decoder.head1", &mut out);
            dec.ups[3].conv.params("decoder.up3.conv", &mut out);
            dec.heads[2].params("decoder.head2", &mut out);
            dec.ups[4].conv.params("decoder.up4.conv", &mut out);
            dec.heads[3].params("decoder.head3", &mut out);
        } else {
            dec.ups[2].conv.params("decoder.up2.conv", &mut out);
            dec.ups[3].conv.params("decoder.up3.conv", &mut out);
            dec.ups[4].conv.params("decoder.up4.conv", &mut out);
            dec.heads[0].params("decoder.head0", &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder.stem.params_mut("encoder.stem", &mut out);
        for (s, stage) in self.encoder.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.params_mut(&format!("encoder.stage{s}.block{b}"), &mut out);
            }
        }
        let iterative = self.config.iterative;
        let Decoder { ups, heads } = &mut self.decoder;
        let [up0, up1, up2, up3, up4] = ups.as_mut_slice() else {
            unreachable!("decoder always has five up blocks")
        };
        up0.conv.params_mut("decoder.up0.conv", &mut out);
        up1.conv.params_mut("decoder.up1.conv", &mut out);
        if iterative {
            let [h0, h1, h2, h3] = heads.as_mut_slice() else {
                unreachable!("iterative decoder has four heads")
            };
            h0.params_mut("decoder.head0", &mut out);
            up2.conv.params_mut("decoder.up2.conv", &mut out);
            h1.params_mut("decoder.head1", &mut out);
            up3.conv.params_mut("decoder.up3.conv", &mut out);
            h2.params_mut("decoder.head2", &mut out);
            up4.conv.params_mut("decoder.up4.conv", &mut out);
            h3.params_mut("decoder.head3", &mut out);
        } else {
            let [h0] = heads.as_mut_slice() else {
                unreachable!("single-head decoder")
            };
            up2.conv.params_mut("decoder.up2.conv", &mut out);
            up3.conv.params_mut("decoder.up3.conv", &mut out);
            up4.conv.params_mut("decoder.up4.conv", &mut out);
            h0.params_mut("decoder.head0", &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}
