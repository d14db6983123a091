//! Run configuration: the network structure plus training hyperparameters
//! and dataset paths, serialized as plain TOML. Every output artifact embeds
//! the resolved config so no run is ambiguous.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acdconv::{FusionStrategy, DEFAULT_DILATIONS};
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::pad::PadMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // network
    pub input_height: usize,
    pub blocks: Vec<usize>,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub fusion: FusionStrategy,
    pub padding: PadMode,
    pub iterative: bool,
    pub dilations: Vec<(usize, usize)>,
    pub reduction: usize,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: Option<u64>,
    pub seed: u64,

    // paths
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        RunConfig {
            input_height: net.input_height,
            blocks: net.blocks,
            stem_width: net.stem_width,
            stage_widths: net.stage_widths,
            fusion: net.fusion,
            padding: net.padding,
            iterative: net.iterative,
            dilations: net.dilations,
            reduction: net.reduction,
            epochs: 500,
            batch_size: 2,
            learning_rate: 1e-4,
            max_steps: None,
            seed: 0,
            train_dir: None,
            eval_dir: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn net(&self) -> NetConfig {
        NetConfig {
            input_height: self.input_height,
            blocks: self.blocks.clone(),
            stem_width: self.stem_width,
            stage_widths: self.stage_widths.clone(),
            fusion: self.fusion,
            padding: self.padding,
            iterative: self.iterative,
            dilations: self.dilations.clone(),
            reduction: self.reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net().validate()?;
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    /// The shipped default config with a comment per key.
    pub fn default_commented_toml() -> String {
        let d = RunConfig::default();
        let dilations = d
            .dilations
            .iter()
            .map(|(dy, dx)| format!("[{dy}, {dx}]"))
            .collect::<Vec<_>>()
            .join(", ");
        format!(
            r#"# Network and training configuration. Unset keys fall back to these
# defaults; flags of the command line override both.

# Input height in pixels; the width is always twice the height.
# Must be a multiple of 32 and at least 64.
input_height = {input_height}

# Residual blocks per encoder stage (four stages at scales 1/4 .. 1/32).
blocks = {blocks:?}

# Channels of the stem convolution (feature scale 1/2).
stem_width = {stem_width}

# Channels of the four encoder stages.
stage_widths = {stage_widths:?}

# Branch fusion: "channelwise" (adaptive channel-wise fusion),
# "simpleaverage", "rowwise", or "pixelwise".
fusion = "{fusion}"

# Feature padding: "circular" (spherical wrap), "leftright", or "zero".
padding = "{padding}"

# Iterative multi-scale depth prediction. When false a single head
# predicts the full-resolution depth directly.
iterative = {iterative}

# Dilation (dy, dx) of each parallel branch in every ACDConv layer.
dilations = [{dilations}]

# Bottleneck reduction ratio of the fusion heads.
reduction = {reduction}

# Passes over the training set.
epochs = {epochs}

# Frames per optimization step.
batch_size = {batch_size}

# Adam learning rate.
learning_rate = {learning_rate}

# Optional hard cap on optimization steps, e.g. max_steps = 2000.
#max_steps = 2000

# Seed for parameter initialization (and synthetic data, where relevant).
seed = {seed}

# Dataset directories (NNNN.rgb.png / NNNN.depth.png pairs) and outputs.
#train_dir = "data/train"
#eval_dir = "data/eval"
out_dir = "runs/default"
"#,
            input_height = d.input_height,
            blocks = d.blocks,
            stem_width = d.stem_width,
            stage_widths = d.stage_widths,
            fusion = d.fusion,
            padding = d.padding,
            iterative = d.iterative,
            dilations = dilations,
            reduction = d.reduction,
            epochs = d.epochs,
            batch_size = d.batch_size,
            learning_rate = d.learning_rate,
            seed = d.seed,
        )
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "channelwise" | "channel" | "acf" => Ok(FusionStrategy::ChannelWise),
            "simpleaverage" | "simple" | "average" => Ok(FusionStrategy::SimpleAverage),
            "rowwise" | "row" => Ok(FusionStrategy::RowWise),
            "pixelwise" | "pixel" => Ok(FusionStrategy::PixelWise),
            other => Err(Error::Config(format!("unknown fusion strategy: {other}"))),
        }
    }
}

impl std::str::FromStr for PadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" | "zeropad" => Ok(PadMode::Zero),
            "leftright" | "lrpad" | "lr" => Ok(PadMode::LeftRight),
            "circular" | "cirpad" => Ok(PadMode::Circular),
            other => Err(Error::Config(format!("unknown padding mode: {other}"))),
        }
    }
}

/// Make sure the default dilation list stays in sync with the layer module.
#[allow(dead_code)]
const _: [(usize, usize); 4] = DEFAULT_DILATIONS;
