//! Ablation studies: retrain a small model per variant under a shared seed
//! and tabulate the metrics side by side.

use std::str::FromStr;

use crate::acdconv::{FusionStrategy, DEFAULT_DILATIONS, FIFTH_DILATION};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalOutcome};
use crate::metrics::MetricsRecord;
use crate::pad::PadMode;
use crate::train;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AblationAxis {
    Fusion,
    DilationDirection,
    DilationCount,
    Padding,
    Iterative,
    Backbone,
}

impl AblationAxis {
    pub fn all() -> [AblationAxis; 6] {
        [
            AblationAxis::Fusion,
            AblationAxis::DilationDirection,
            AblationAxis::DilationCount,
            AblationAxis::Padding,
            AblationAxis::Iterative,
            AblationAxis::Backbone,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Fusion => "fusion",
            AblationAxis::DilationDirection => "dilation-direction",
            AblationAxis::DilationCount => "dilation-count",
            AblationAxis::Padding => "padding",
            AblationAxis::Iterative => "iterative",
            AblationAxis::Backbone => "backbone",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::all()
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown ablation axis {s:?}; expected one of {}",
                    AblationAxis::all().map(|a| a.name()).join(", ")
                ))
            })
    }
}

/// One trained-and-scored variant.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    /// Training loss at the final step.
    pub final_loss: f64,
    /// Mean training loss over the final epoch.
    pub last_epoch_loss: f64,
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>10} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}\n",
            self.axis.name(),
            "loss@end",
            "MAE",
            "RMSE",
            "RMSElog",
            "AbsRel",
            "d1",
            "d2",
            "d3"
        );
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{:<16} {:>10.5} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.2} {:>8.2} {:>8.2}\n",
                r.name, r.final_loss, m.mae, m.rmse, m.rmse_log, m.abs_rel, m.delta1, m.delta2,
                m.delta3
            ));
        }
        out
    }
}

fn variants(axis: AblationAxis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let named = |name: &str, cfg: RunConfig| (name.to_string(), cfg);
    match axis {
        AblationAxis::Fusion => [
            FusionStrategy::ChannelWise,
            FusionStrategy::SimpleAverage,
            FusionStrategy::RowWise,
            FusionStrategy::PixelWise,
        ]
        .into_iter()
        .map(|f| {
            let label = match f {
                FusionStrategy::ChannelWise => "ChannelWise",
                FusionStrategy::SimpleAverage => "SimpleAverage",
                FusionStrategy::RowWise => "RowWise",
                FusionStrategy::PixelWise => "PixelWise",
            };
            named(label, RunConfig { fusion: f, ..base.clone() })
        })
        .collect(),
        AblationAxis::DilationDirection => vec![
            named(
                "X-axis",
                RunConfig {
                    dilations: vec![(1, 1), (1, 2), (1, 3), (1, 4)],
                    ..base.clone()
                },
            ),
            named(
                "Y-axis",
                RunConfig {
                    dilations: vec![(1, 1), (2, 1), (3, 1), (4, 1)],
                    ..base.clone()
                },
            ),
            named("Both", RunConfig { dilations: DEFAULT_DILATIONS.to_vec(), ..base.clone() }),
        ],
        AblationAxis::DilationCount => {
            let mut five = DEFAULT_DILATIONS.to_vec();
            five.push(FIFTH_DILATION);
            vec![
                named("Two", RunConfig { dilations: DEFAULT_DILATIONS[..2].to_vec(), ..base.clone() }),
                named("Three", RunConfig { dilations: DEFAULT_DILATIONS[..3].to_vec(), ..base.clone() }),
                named("Four", RunConfig { dilations: DEFAULT_DILATIONS.to_vec(), ..base.clone() }),
                named("Five", RunConfig { dilations: five, ..base.clone() }),
            ]
        }
        AblationAxis::Padding => vec![
            named("ZeroPad", RunConfig { padding: PadMode::Zero, ..base.clone() }),
            named("LRPad", RunConfig { padding: PadMode::LeftRight, ..base.clone() }),
            named("CirPad", RunConfig { padding: PadMode::Circular, ..base.clone() }),
        ],
        AblationAxis::Iterative => vec![
            named("w/ iter", RunConfig { iterative: true, ..base.clone() }),
            named("w/o iter", RunConfig { iterative: false, ..base.clone() }),
        ],
        AblationAxis::Backbone => vec![
            named("toy10", RunConfig { blocks: vec![1, 1, 1, 1], ..base.clone() }),
            named("toy18", RunConfig { blocks: vec![2, 2, 2, 2], ..base.clone() }),
            named("toy34", RunConfig { blocks: vec![3, 4, 6, 3], ..base.clone() }),
        ],
    }
}

/// Train and evaluate every variant of one axis. Each variant trains from
/// scratch under the shared seed and is scored on its training set (or
/// `eval_dir` when set).
pub fn run_ablation(axis: AblationAxis, base: &RunConfig) -> Result<AblationOutcome> {
    base.validate()?;
    if base.train_dir.is_none() {
        return Err(Error::Config("ablation needs train_dir".into()));
    }
    let mut rows = Vec::new();
    for (name, mut cfg) in variants(axis, base) {
        let slug: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
            .collect();
        cfg.out_dir = base.out_dir.join(axis.name()).join(slug);
        let outcome = train::train(&cfg, None)?;

        let eval_dir = cfg.eval_dir.clone().or_else(|| cfg.train_dir.clone()).expect("checked");
        let ds = crate::dataset::DatasetDir::open(&eval_dir)?;
        let (model, _) = crate::eval::model_from_checkpoint(&outcome.checkpoint_path)?;
        let EvalOutcome { aggregate, .. } = evaluate_model(&model, &ds)?;

        let steps_per_epoch =
            (ds.len() + cfg.batch_size - 1) / cfg.batch_size;
        let tail = outcome.losses.len().saturating_sub(steps_per_epoch);
        let last_epoch_loss =
            outcome.losses[tail..].iter().sum::<f64>() / outcome.losses[tail..].len() as f64;
        rows.push(AblationRow {
            name,
            final_loss: outcome.final_loss(),
            last_epoch_loss,
            metrics: aggregate,
        });
    }
    Ok(AblationOutcome { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        assert_eq!("fusion".parse::<AblationAxis>().unwrap(), AblationAxis::Fusion);
        assert_eq!(
            "dilation-count".parse::<AblationAxis>().unwrap(),
            AblationAxis::DilationCount
        );
        assert!("nonsense".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn variant_sets_match_the_study_tables() {
        let base = RunConfig::default();
        let names = |axis: AblationAxis| -> Vec<String> {
            variants(axis, &base).into_iter().map(|(n, _)| n).collect()
        };
        assert_eq!(
            names(AblationAxis::Fusion),
            vec!["ChannelWise", "SimpleAverage", "RowWise", "PixelWise"]
        );
        assert_eq!(names(AblationAxis::Padding), vec!["ZeroPad", "LRPad", "CirPad"]);
        assert_eq!(names(AblationAxis::DilationCount), vec!["Two", "Three", "Four", "Five"]);
        assert_eq!(names(AblationAxis::DilationDirection), vec!["X-axis", "Y-axis", "Both"]);
        assert_eq!(names(AblationAxis::Iterative).len(), 2);
        assert_eq!(names(AblationAxis::Backbone).len(), 3);
    }

    #[test]
    fn dilation_count_variants_have_expected_branches() {
        let base = RunConfig::default();
        let v = variants(AblationAxis::DilationCount, &base);
        assert_eq!(v[0].1.dilations.len(), 2);
        assert_eq!(v[3].1.dilations.len(), 5);
        assert_eq!(*v[3].1.dilations.last().unwrap(), (1, 8));
    }

    // end-to-end ablation runs live in the acceptance suite; they train
    // real models and take minutes
}
