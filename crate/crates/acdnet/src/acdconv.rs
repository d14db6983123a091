//! Adaptively combined dilated convolution.
//!
//! Four (configurable) parallel dilated 3x3 convolutions extract feature maps
//! from the same input; a learned fusion head weights the branches and sums
//! them. The default channel-wise head pools the mean feature map to a
//! vector, runs a two-layer bottleneck, and softmax-normalizes one logit per
//! (branch, channel), so every channel can prefer a different receptive-field
//! shape. Row-wise, pixel-wise, and plain-average fusion exist as ablation
//! variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, TensorId};
use crate::pad::{PadMode, PadSpec};
use crate::tensor::{Shape, Tensor};

/// Dilation settings of the default four branches: identity, two horizontal
/// extensions for the azimuth axis, one vertical.
pub const DEFAULT_DILATIONS: [(usize, usize); 4] = [(1, 1), (1, 2), (1, 4), (2, 1)];

/// Extra branch used by the five-branch ablation.
pub const FIFTH_DILATION: (usize, usize) = (1, 8);

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    ChannelWise,
    SimpleAverage,
    RowWise,
    PixelWise,
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionStrategy::ChannelWise => "channelwise",
            FusionStrategy::SimpleAverage => "simpleaverage",
            FusionStrategy::RowWise => "rowwise",
            FusionStrategy::PixelWise => "pixelwise",
        };
        f.write_str(s)
    }
}

/// One fully connected layer of a fusion head.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        LinearLayer {
            weight: Tensor::kaiming(Shape::new(out_dim, in_dim, 1, 1), in_dim, rng).with_grad(),
            bias: Tensor::zeros(Shape::new(1, out_dim, 1, 1)).with_grad(),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        prefix: &str,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = binds.bind(g, format!("{prefix}.weight"), &self.weight);
        let b = binds.bind(g, format!("{prefix}.bias"), &self.bias);
        g.linear(x, w, Some(b))
    }
}

/// One dilated branch: a 3x3 kernel with bias.
#[derive(Clone, Debug)]
struct Branch {
    kernel: Tensor,
    bias: Tensor,
    dilation: (usize, usize),
}

#[derive(Clone, Debug)]
enum FusionHead {
    /// Pool -> bottleneck -> per-(branch, channel) logits.
    Channel { fc1: LinearLayer, fc2: LinearLayer },
    /// Row squeeze -> bottleneck -> per-(branch, row) logits.
    Row { fc1: LinearLayer, fc2: LinearLayer },
    /// 1x1 convolution -> per-(branch, channel, pixel) logits.
    Pixel { weight: Tensor, bias: Tensor },
    Average,
}

/// The adaptively combined dilated convolution layer.
#[derive(Clone, Debug)]
pub struct AcdConv {
    in_channels: usize,
    out_channels: usize,
    branches: Vec<Branch>,
    head: FusionHead,
    strategy: FusionStrategy,
}

impl AcdConv {
    /// Build a layer for feature maps of spatial size `feat` (needed to size
    /// the row-wise head and to keep branch padding within the source
    /// extent: dilations larger than the feature map shrinks to fit).
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        dilations: &[(usize, usize)],
        strategy: FusionStrategy,
        reduction: usize,
        feat: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if dilations.is_empty() {
            return Err(Error::invalid("AcdConv needs at least one dilation branch"));
        }
        if reduction == 0 {
            return Err(Error::invalid("fusion head reduction must be >= 1"));
        }
        let (feat_h, feat_w) = feat;
        if feat_h < 2 || feat_w < 2 {
            return Err(Error::invalid(format!(
                "AcdConv needs a feature map of at least 2x2, got {feat_h}x{feat_w}"
            )));
        }
        let n = dilations.len();
        let branches = dilations
            .iter()
            .map(|&(dy, dx)| Branch {
                kernel: Tensor::kaiming(
                    Shape::new(out_channels, in_channels, 3, 3),
                    in_channels * 9,
                    rng,
                )
                .with_grad(),
                bias: Tensor::zeros(Shape::new(1, out_channels, 1, 1)).with_grad(),
                dilation: (dy.min(feat_h - 1).max(1), dx.min(feat_w - 1).max(1)),
            })
            .collect();
        let head = match strategy {
            FusionStrategy::ChannelWise => {
                let hidden = (out_channels / reduction).max(1);
                FusionHead::Channel {
                    fc1: LinearLayer::new(out_channels, hidden, rng),
                    fc2: LinearLayer::new(hidden, n * out_channels, rng),
                }
            }
            FusionStrategy::RowWise => {
                let hidden = (feat_h / reduction).max(1);
                FusionHead::Row {
                    fc1: LinearLayer::new(feat_h, hidden, rng),
                    fc2: LinearLayer::new(hidden, n * feat_h, rng),
                }
            }
            FusionStrategy::PixelWise => FusionHead::Pixel {
                weight: Tensor::kaiming(
                    Shape::new(n * out_channels, out_channels, 1, 1),
                    out_channels,
                    rng,
                )
                .with_grad(),
                bias: Tensor::zeros(Shape::new(1, n * out_channels, 1, 1)).with_grad(),
            },
            FusionStrategy::SimpleAverage => FusionHead::Average,
        };
        Ok(AcdConv { in_channels, out_channels, branches, head, strategy })
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.strategy
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Effective (possibly shrunk) dilations in branch order.
    pub fn dilations(&self) -> Vec<(usize, usize)> {
        self.branches.iter().map(|b| b.dilation).collect()
    }

    /// Run every branch: pad so the dilated 3x3 is size-preserving, convolve.
    pub fn branch_forward(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        prefix: &str,
        x: TensorId,
        mode: PadMode,
    ) -> Result<Vec<TensorId>> {
        let mut features = Vec::with_capacity(self.branches.len());
        for (i, branch) in self.branches.iter().enumerate() {
            let k = binds.bind(g, format!("{prefix}.branch{i}.kernel"), &branch.kernel);
            let b = binds.bind(g, format!("{prefix}.branch{i}.bias"), &branch.bias);
            let padded = g.pad(x, PadSpec::for_branch(branch.dilation, mode))?;
            features.push(g.conv2d(padded, k, Some(b), (1, 1), branch.dilation)?);
        }
        Ok(features)
    }

    /// Per-branch fusion weights, normalized across branches. Shapes by
    /// strategy: channel-wise (B, C', 1, 1), row-wise (B, 1, H, 1),
    /// pixel-wise (B, C', H, W). `None` for the plain average.
    pub fn fusion_weights(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        prefix: &str,
        features: &[TensorId],
    ) -> Result<Option<Vec<TensorId>>> {
        let n = features.len();
        if n != self.branches.len() {
            return Err(Error::invalid(format!(
                "fusion_weights: {n} features for {} branches",
                self.branches.len()
            )));
        }
        match &self.head {
            FusionHead::Average => Ok(None),
            FusionHead::Channel { fc1, fc2 } => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    acc = g.add(acc, f)?;
                }
                let mean = g.scale(acc, 1.0 / n as f64);
                let pooled = g.global_avg_pool(mean)?;
                let hidden = fc1.forward(g, binds, &format!("{prefix}.fc1"), pooled)?;
                let hidden = g.relu(hidden);
                let logits = fc2.forward(g, binds, &format!("{prefix}.fc2"), hidden)?;
                let soft = g.softmax_groups(logits, n)?;
                let c = self.out_channels;
                (0..n).map(|i| g.slice_channels(soft, i * c, c)).collect::<Result<Vec<_>>>().map(Some)
            }
            FusionHead::Row { fc1, fc2 } => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    acc = g.add(acc, f)?;
                }
                let rows = g.row_mean(acc)?; // (B, H, 1, 1)
                let h = g.shape(rows).channels;
                let hidden = fc1.forward(g, binds, &format!("{prefix}.fc1"), rows)?;
                let hidden = g.relu(hidden);
                let logits = fc2.forward(g, binds, &format!("{prefix}.fc2"), hidden)?;
                let soft = g.softmax_groups(logits, n)?;
                let batch = g.shape(soft).batch;
                (0..n)
                    .map(|i| {
                        let s = g.slice_channels(soft, i * h, h)?;
                        g.reshape(s, Shape::new(batch, 1, h, 1))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            }
            FusionHead::Pixel { weight, bias } => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    acc = g.add(acc, f)?;
                }
                let w = binds.bind(g, format!("{prefix}.pixel.weight"), weight);
                let b = binds.bind(g, format!("{prefix}.pixel.bias"), bias);
                let logits = g.conv2d(acc, w, Some(b), (1, 1), (1, 1))?;
                let soft = g.softmax_groups(logits, n)?;
                let c = self.out_channels;
                (0..n).map(|i| g.slice_channels(soft, i * c, c)).collect::<Result<Vec<_>>>().map(Some)
            }
        }
    }

    /// Weighted branch sum; plain mean when no weights are given.
    pub fn fuse(
        &self,
        g: &mut Graph,
        features: &[TensorId],
        weights: Option<&[TensorId]>,
    ) -> Result<TensorId> {
        match weights {
            None => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    acc = g.add(acc, f)?;
                }
                Ok(g.scale(acc, 1.0 / features.len() as f64))
            }
            Some(ws) => {
                if ws.len() != features.len() {
                    return Err(Error::invalid(format!(
                        "fuse: {} weights for {} features",
                        ws.len(),
                        features.len()
                    )));
                }
                let mut acc: Option<TensorId> = None;
                for (&f, &w) in features.iter().zip(ws) {
                    let term = g.mul_broadcast(f, w)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(a, term)?,
                    });
                }
                Ok(acc.expect("at least one feature"))
            }
        }
    }

    /// Full layer: branches, fusion weights, weighted sum.
    pub fn forward(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        prefix: &str,
        x: TensorId,
        mode: PadMode,
    ) -> Result<TensorId> {
        let features = self.branch_forward(g, binds, prefix, x, mode)?;
        let weights = self.fusion_weights(g, binds, prefix, &features)?;
        self.fuse(g, &features, weights.as_deref())
    }

    pub fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        for (i, b) in self.branches.iter().enumerate() {
            out.push((format!("{prefix}.branch{i}.kernel"), &b.kernel));
            out.push((format!("{prefix}.branch{i}.bias"), &b.bias));
        }
        match &self.head {
            FusionHead::Channel { fc1, fc2 } | FusionHead::Row { fc1, fc2 } => {
                out.push((format!("{prefix}.fc1.weight"), &fc1.weight));
                out.push((format!("{prefix}.fc1.bias"), &fc1.bias));
                out.push((format!("{prefix}.fc2.weight"), &fc2.weight));
                out.push((format!("{prefix}.fc2.bias"), &fc2.bias));
            }
            FusionHead::Pixel { weight, bias } => {
                out.push((format!("{prefix}.pixel.weight"), weight));
                out.push((format!("{prefix}.pixel.bias"), bias));
            }
            FusionHead::Average => {}
        }
    }

    pub fn params_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            out.push((format!("{prefix}.branch{i}.kernel"), &mut b.kernel));
            out.push((format!("{prefix}.branch{i}.bias"), &mut b.bias));
        }
        match &mut self.head {
            FusionHead::Channel { fc1, fc2 } | FusionHead::Row { fc1, fc2 } => {
                out.push((format!("{prefix}.fc1.weight"), &mut fc1.weight));
                out.push((format!("{prefix}.fc1.bias"), &mut fc1.bias));
                out.push((format!("{prefix}.fc2.weight"), &mut fc2.weight));
                out.push((format!("{prefix}.fc2.bias"), &mut fc2.bias));
            }
            FusionHead::Pixel { weight, bias } => {
                out.push((format!("{prefix}.pixel.weight"), weight));
                out.push((format!("{prefix}.pixel.bias"), bias));
            }
            FusionHead::Average => {}
        }
    }

    /// Zero every fusion-head parameter; the head then emits equal logits and
    /// channel-wise fusion degenerates to the plain average.
    pub fn zero_head(&mut self) {
        match &mut self.head {
            FusionHead::Channel { fc1, fc2 } | FusionHead::Row { fc1, fc2 } => {
                for t in [&mut fc1.weight, &mut fc1.bias, &mut fc2.weight, &mut fc2.bias] {
                    t.data_mut().fill(0.0);
                }
            }
            FusionHead::Pixel { weight, bias } => {
                weight.data_mut().fill(0.0);
                bias.data_mut().fill(0.0);
            }
            FusionHead::Average => {}
        }
    }

    /// Zero the branch biases (used by tests that need zero inputs to map to
    /// zero features).
    pub fn zero_branch_biases(&mut self) {
        for b in &mut self.branches {
            b.bias.data_mut().fill(0.0);
        }
    }
}
