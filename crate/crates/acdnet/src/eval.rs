//! Evaluation: per-frame and pixel-weighted aggregate metrics over a dataset,
//! rendered as an aligned text table and a delimited machine-readable file.

use std::path::Path;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::DatasetDir;
use crate::error::{Error, Result};
use crate::geometry::PanoFrame;
use crate::graph::Graph;
use crate::metrics::{self, MetricsRecord};
use crate::net::Model;
use crate::tensor::Tensor;

/// Rebuild the model stored in a checkpoint.
pub fn model_from_checkpoint(path: &Path) -> Result<(Model, RunConfig)> {
    let ckpt = checkpoint::load(path)?;
    let config = RunConfig::from_toml(&ckpt.config_toml)?;
    let mut model = Model::build(&config.net(), config.seed)?;
    ckpt.apply_to(&mut model)?;
    Ok((model, config))
}

/// Full-resolution depth prediction (D_3) for one frame, unclipped.
pub fn predict_depth(model: &Model, frame: &PanoFrame) -> Result<Tensor> {
    let mut g = Graph::new();
    let (pyramid, _) = model.forward(&mut g, &frame.rgb)?;
    Ok(g.value(pyramid.d3()).clone())
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub per_frame: Vec<(u32, MetricsRecord)>,
    pub aggregate: MetricsRecord,
}

impl EvalOutcome {
    /// Aligned text table, one row per frame plus the aggregate.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8} {:>9}\n",
            "frame", "MAE", "RMSE", "RMSElog", "AbsRel", "d1", "d2", "d3", "pixels"
        ));
        let row = |label: &str, m: &MetricsRecord| {
            format!(
                "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.2} {:>8.2} {:>8.2} {:>9}\n",
                label, m.mae, m.rmse, m.rmse_log, m.abs_rel, m.delta1, m.delta2, m.delta3,
                m.pixel_count
            )
        };
        for (ix, m) in &self.per_frame {
            out.push_str(&row(&format!("{ix:04}"), m));
        }
        out.push_str(&row("all", &self.aggregate));
        out
    }

    /// Comma-delimited records with full precision.
    pub fn delimited(&self) -> String {
        let mut out =
            String::from("frame,mae,rmse,rmse_log,abs_rel,delta1,delta2,delta3,pixel_count\n");
        let row = |label: &str, m: &MetricsRecord| {
            format!(
                "{label},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}\n",
                m.mae, m.rmse, m.rmse_log, m.abs_rel, m.delta1, m.delta2, m.delta3, m.pixel_count
            )
        };
        for (ix, m) in &self.per_frame {
            out.push_str(&row(&format!("{ix:04}"), m));
        }
        out.push_str(&row("all", &self.aggregate));
        out
    }
}

/// Score a model on every frame of a dataset. Predictions are clipped inside
/// the metric computation; ground truth is masked where invalid.
pub fn evaluate_model(model: &Model, ds: &DatasetDir) -> Result<EvalOutcome> {
    let mut per_frame = Vec::with_capacity(ds.len());
    for entry in &ds.frames {
        let frame = ds.load(entry)?;
        if frame.depth.shape().spatial()
            != (model.config().input_height, model.config().input_width())
        {
            return Err(Error::Dataset {
                path: entry.depth_path.clone(),
                message: format!(
                    "frame is {:?}, model expects {}x{}",
                    frame.depth.shape().spatial(),
                    model.config().input_height,
                    model.config().input_width()
                ),
            });
        }
        let pred = predict_depth(model, &frame)?;
        let mask = frame.mask.and_positive(&frame.depth)?;
        let record = metrics::compute_metrics(&pred, &frame.depth, &mask)?;
        per_frame.push((entry.index, record));
    }
    let aggregate = metrics::aggregate(
        &per_frame.iter().map(|(_, m)| *m).collect::<Vec<_>>(),
    )?;
    Ok(EvalOutcome { per_frame, aggregate })
}

/// Evaluate a checkpoint on a dataset directory.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Path) -> Result<EvalOutcome> {
    let (model, _) = model_from_checkpoint(ckpt)?;
    let ds = DatasetDir::open(data)?;
    evaluate_model(&model, &ds)
}
