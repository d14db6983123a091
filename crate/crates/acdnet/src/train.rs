//! Deterministic training loop: BerHu on the full-resolution depth map,
//! Adam updates, plain-text loss log, checkpoint per epoch.
//!
//! Frames are visited in index order and batched without shuffling, so a
//! (config, seed) pair fixes the whole trajectory; resuming from a
//! checkpoint replays the remaining schedule bit-identically.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::adam::{Adam, AdamParams};
use crate::checkpoint::{self, Checkpoint, OptState};
use crate::config::RunConfig;
use crate::dataset::DatasetDir;
use crate::error::{Error, Result};
use crate::geometry::PanoFrame;
use crate::graph::Graph;
use crate::loss::ValidMask;
use crate::net::Model;
use crate::tensor::{Shape, Tensor};

/// Stack frames into batched image/depth/mask tensors.
pub fn stack_frames(frames: &[&PanoFrame]) -> Result<(Tensor, Tensor, ValidMask)> {
    if frames.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let rgb0 = frames[0].rgb.shape();
    let d0 = frames[0].depth.shape();
    let b = frames.len();
    let mut rgb = Vec::with_capacity(b * rgb0.numel());
    let mut depth = Vec::with_capacity(b * d0.numel());
    let mut mask = Vec::with_capacity(b * d0.numel());
    for f in frames {
        if f.rgb.shape() != rgb0 || f.depth.shape() != d0 {
            return Err(Error::shape("stack_frames", format!("{rgb0}"), format!("{}", f.rgb.shape())));
        }
        rgb.extend_from_slice(f.rgb.data());
        depth.extend_from_slice(f.depth.data());
        mask.extend_from_slice(f.mask.data());
    }
    Ok((
        Tensor::from_vec(Shape::new(b, 3, rgb0.height, rgb0.width), rgb)?,
        Tensor::from_vec(Shape::new(b, 1, d0.height, d0.width), depth)?,
        ValidMask::from_vec(Shape::new(b, 1, d0.height, d0.width), mask)?,
    ))
}

/// Model + optimizer + step counter.
pub struct Trainer {
    pub config: RunConfig,
    model: Model,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::build(&config.net(), config.seed)?;
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
        let adam = Adam::new(AdamParams::with_lr(config.learning_rate), &sizes);
        Ok(Trainer { config, model, adam, step: 0 })
    }

    /// Restore parameters, optimizer moments, and the step counter from a
    /// checkpoint. The checkpoint's network structure must match.
    pub fn resume(config: RunConfig, ckpt_path: &Path) -> Result<Self> {
        config.validate()?;
        let ckpt = checkpoint::load(ckpt_path)?;
        let stored = RunConfig::from_toml(&ckpt.config_toml)?;
        if stored.net() != config.net() {
            return Err(Error::Checkpoint(
                "checkpoint was built with a different network configuration".into(),
            ));
        }
        let mut model = Model::build(&config.net(), config.seed)?;
        ckpt.apply_to(&mut model)?;
        let adam = match ckpt.opt {
            Some(OptState { m, v }) => {
                Adam::from_state(AdamParams::with_lr(config.learning_rate), ckpt.step, m, v)
            }
            None => {
                let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
                Adam::new(AdamParams::with_lr(config.learning_rate), &sizes)
            }
        };
        Ok(Trainer { config, model, adam, step: ckpt.step })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One forward/backward/update on a batch; returns the BerHu loss.
    pub fn train_step(&mut self, images: &Tensor, gt: &Tensor, mask: &ValidMask) -> Result<f64> {
        let mut g = Graph::new();
        let (pyramid, binds) = self.model.forward(&mut g, images)?;
        let loss_id = g.berhu_loss(pyramid.d3(), gt, mask)?;
        let loss = g.value(loss_id).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step + 1)));
        }
        let grads = g.backward(loss_id)?;
        let grad_refs: Vec<&Tensor> = binds
            .entries()
            .iter()
            .map(|(name, id)| {
                grads.get(*id).ok_or_else(|| {
                    Error::invalid(format!("parameter {name} received no gradient"))
                })
            })
            .collect::<Result<_>>()?;
        let mut params = self.model.params_mut();
        debug_assert!(params
            .iter()
            .zip(binds.entries())
            .all(|((pn, _), (bn, _))| pn == bn));
        self.adam.step(&mut params, &grad_refs)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn save_checkpoint(&self, path: &Path, steps_per_epoch: u64) -> Result<()> {
        let (m, v) = self.adam.moments();
        let ckpt = Checkpoint::from_model(
            &self.config.to_toml(),
            &self.model,
            self.step,
            (self.step / steps_per_epoch.max(1)) as u32,
            Some(OptState { m: m.to_vec(), v: v.to_vec() }),
        );
        checkpoint::save(path, &ckpt)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one step")
    }
}

/// Full training run over a dataset directory. `resume` continues a previous
/// run's trajectory exactly: the batch schedule is derived from the stored
/// step counter.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let train_dir = config
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::Config("train_dir is required for training".into()))?;
    let ds = DatasetDir::open(train_dir)?;
    let frames: Vec<PanoFrame> = ds.frames.iter().map(|e| ds.load(e)).collect::<Result<_>>()?;
    let (h, w) = (config.input_height, config.input_height * 2);
    for (f, entry) in frames.iter().zip(&ds.frames) {
        if f.depth.shape().spatial() != (h, w) {
            return Err(Error::Dataset {
                path: entry.depth_path.clone(),
                message: format!(
                    "frame is {:?}, config expects {h}x{w}",
                    f.depth.shape().spatial()
                ),
            });
        }
    }

    let mut trainer = match resume {
        Some(path) => Trainer::resume(config.clone(), path)?,
        None => Trainer::new(config.clone())?,
    };

    std::fs::create_dir_all(&config.out_dir)?;
    let log_path = config.out_dir.join("loss.log");
    let mut log = if resume.is_some() {
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        let mut f = std::fs::File::create(&log_path)?;
        for line in config.to_toml().lines() {
            writeln!(f, "# {line}")?;
        }
        f
    };
    let ckpt_path = config.out_dir.join("checkpoint.acdn");

    let batches: Vec<Vec<usize>> =
        (0..frames.len()).collect::<Vec<_>>().chunks(config.batch_size).map(|c| c.to_vec()).collect();
    let steps_per_epoch = batches.len() as u64;
    let mut losses = Vec::new();

    let start_epoch = (trainer.step / steps_per_epoch) as usize;
    let mut skip_in_epoch = (trainer.step % steps_per_epoch) as usize;
    'epochs: for epoch in start_epoch..config.epochs {
        for batch in batches.iter().skip(std::mem::take(&mut skip_in_epoch)) {
            if let Some(cap) = config.max_steps {
                if trainer.step >= cap {
                    break 'epochs;
                }
            }
            let refs: Vec<&PanoFrame> = batch.iter().map(|&i| &frames[i]).collect();
            let (images, gt, mask) = stack_frames(&refs)?;
            let loss = trainer.train_step(&images, &gt, &mask)?;
            writeln!(log, "step={} epoch={} loss={:.12e}", trainer.step, epoch, loss)?;
            losses.push(loss);
        }
        trainer.save_checkpoint(&ckpt_path, steps_per_epoch)?;
    }
    trainer.save_checkpoint(&ckpt_path, steps_per_epoch)?;
    log.flush()?;

    Ok(TrainOutcome { steps: trainer.step, losses, checkpoint_path: ckpt_path, log_path })
}
