use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use acdnet::ablate::{self, AblationAxis};
use acdnet::acdconv::FusionStrategy;
use acdnet::config::RunConfig;
use acdnet::dataset::DatasetDir;
use acdnet::eval;
use acdnet::geometry::{self, ply};
use acdnet::gradcheck;
use acdnet::metrics::{DEPTH_CLIP_M, DEPTH_MIN_M};
use acdnet::pad::PadMode;
use acdnet::synth::{self, SynthOptions};
use acdnet::tensor::Tensor;
use acdnet::train;

#[derive(Parser)]
#[command(
    name = "acdnet",
    about = "Panoramic monocular depth estimation with adaptively combined dilated convolutions",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Default)]
struct ConfigArgs {
    /// TOML config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    eval_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Hard cap on optimization steps.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    input_height: Option<usize>,
    /// channelwise | simpleaverage | rowwise | pixelwise
    #[arg(long)]
    fusion: Option<String>,
    /// circular | leftright | zero
    #[arg(long)]
    padding: Option<String>,
    #[arg(long)]
    iterative: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.train_dir {
            cfg.train_dir = Some(v.clone());
        }
        if let Some(v) = &self.eval_dir {
            cfg.eval_dir = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = Some(v);
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.input_height {
            cfg.input_height = v;
        }
        if let Some(v) = &self.fusion {
            cfg.fusion = v.parse::<FusionStrategy>()?;
        }
        if let Some(v) = &self.padding {
            cfg.padding = v.parse::<PadMode>()?;
        }
        if let Some(v) = self.iterative {
            cfg.iterative = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic box-room RGB-D dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Panorama height; width is twice this.
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Put a box occluder inside each room.
        #[arg(long)]
        occluders: bool,
    },
    /// Train a model; writes loss.log and checkpoint.acdn under out_dir.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for metrics.txt / metrics.csv (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Number of random seeds.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a point cloud (ground truth or prediction) as ASCII PLY.
    ExportPcd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: u32,
        #[arg(long)]
        out: PathBuf,
        /// Predict depth with this checkpoint instead of using ground truth.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and compare the variants of one study axis.
    Ablate {
        /// fusion | dilation-direction | dilation-count | padding |
        /// iterative | backbone
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn config_echo(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for line in cfg.to_toml().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { out, count, height, seed, occluders } => {
            let n = synth::generate(&out, &SynthOptions { count, height, seed, occluders })?;
            println!("wrote {n} frames to {}", out.display());
        }
        Command::Train { config, resume } => {
            let cfg = config.resolve()?;
            let outcome = train::train(&cfg, resume.as_deref())?;
            println!(
                "trained {} steps, final loss {:.6e}",
                outcome.steps,
                outcome.final_loss()
            );
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("loss log:   {}", outcome.log_path.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let (model, run_cfg) = eval::model_from_checkpoint(&checkpoint)?;
            let ds = DatasetDir::open(&data)?;
            let outcome = eval::evaluate_model(&model, &ds)?;
            print!("{}", outcome.table());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let echo = config_echo(&run_cfg);
                std::fs::write(dir.join("metrics.txt"), format!("{echo}{}", outcome.table()))?;
                std::fs::write(dir.join("metrics.csv"), format!("{echo}{}", outcome.delimited()))?;
                println!("wrote {}/metrics.{{txt,csv}}", dir.display());
            }
        }
        Command::Gradcheck { seeds, seed } => {
            let report = gradcheck::run(&gradcheck::default_seeds(seeds, seed));
            print!("{}", report.render());
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::ExportPcd { data, frame, out, checkpoint } => {
            let ds = DatasetDir::open(&data)?;
            let entry = ds
                .by_index(frame)
                .with_context(|| format!("frame {frame:04} not found in {}", data.display()))?;
            let pano = ds.load(entry)?;
            let mut comments = vec![format!("frame {frame:04} of {}", data.display())];
            let depth = match checkpoint {
                None => {
                    comments.push("depth source: ground truth".to_string());
                    pano.depth.clone()
                }
                Some(ckpt) => {
                    comments.push(format!("depth source: prediction from {}", ckpt.display()));
                    let (model, _) = eval::model_from_checkpoint(&ckpt)?;
                    let raw = eval::predict_depth(&model, &pano)?;
                    let clipped: Vec<f64> = raw
                        .data()
                        .iter()
                        .map(|v| v.clamp(DEPTH_MIN_M, DEPTH_CLIP_M))
                        .collect();
                    Tensor::from_vec(raw.shape(), clipped)?
                }
            };
            let (cloud, skipped) = geometry::depth_to_pointcloud(&depth, &pano.rgb, &pano.mask)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            ply::write_with_comments(&mut file, &cloud, &comments)?;
            println!("wrote {} vertices to {}", cloud.points.len(), out.display());
            if skipped > 0 {
                println!("skipped {skipped} negative-depth pixels");
            }
        }
        Command::Ablate { axis, config } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = config.resolve()?;
            let outcome = ablate::run_ablation(axis, &cfg)?;
            print!("{}", outcome.table());
            let table_path = cfg.out_dir.join(axis.name()).join("table.txt");
            std::fs::create_dir_all(table_path.parent().expect("joined path"))?;
            std::fs::write(&table_path, format!("{}{}", config_echo(&cfg), outcome.table()))?;
            println!("wrote {}", table_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
