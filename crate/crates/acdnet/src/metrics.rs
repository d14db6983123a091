//! Depth evaluation metrics: MAE, RMSE, RMSElog, AbsRel, and the three
//! 1.25^n threshold percentages.
//!
//! Predictions are clipped to [DEPTH_MIN_M, DEPTH_CLIP_M] before scoring (no
//! scale calibration); pixels with invalid or non-positive ground truth are
//! excluded. RMSElog uses the natural logarithm and the delta thresholds are
//! strict inequalities.

use crate::error::{Error, Result};
use crate::loss::ValidMask;
use crate::tensor::Tensor;

/// Evaluation clip ceiling, meters.
pub const DEPTH_CLIP_M: f64 = 10.0;
/// Floor applied before logs and ratios, meters.
pub const DEPTH_MIN_M: f64 = 1e-4;

/// One evaluation run. Errors are meters (log-meters for `rmse_log`, a ratio
/// for `abs_rel`); deltas are percentages in [0, 100].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub mae: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [self.mae, self.rmse, self.rmse_log, self.abs_rel, self.delta1, self.delta2, self.delta3]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Score a prediction against ground truth over the valid pixels.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor, mask: &ValidMask) -> Result<MetricsRecord> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{}", gt.shape()),
            format!("{}", pred.shape()),
        ));
    }
    let sh = pred.shape();
    let mut n = 0usize;
    let (mut abs_sum, mut sq_sum, mut log_sq_sum, mut rel_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for b in 0..sh.batch {
        for y in 0..sh.height {
            for x in 0..sh.width {
                let g = gt.at(b, 0, y, x);
                if !mask.get(b, y, x) || g <= 0.0 {
                    continue;
                }
                let d = pred.at(b, 0, y, x).clamp(DEPTH_MIN_M, DEPTH_CLIP_M);
                let err = d - g;
                abs_sum += err.abs();
                sq_sum += err * err;
                let log_err = d.ln() - g.ln();
                log_sq_sum += log_err * log_err;
                rel_sum += err.abs() / g;
                let ratio = (d / g).max(g / d);
                if ratio < 1.25 {
                    d1 += 1;
                }
                if ratio < 1.25f64.powi(2) {
                    d2 += 1;
                }
                if ratio < 1.25f64.powi(3) {
                    d3 += 1;
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(MetricsRecord {
        mae: abs_sum / nf,
        rmse: (sq_sum / nf).sqrt(),
        rmse_log: (log_sq_sum / nf).sqrt(),
        abs_rel: rel_sum / nf,
        delta1: 100.0 * d1 as f64 / nf,
        delta2: 100.0 * d2 as f64 / nf,
        delta3: 100.0 * d3 as f64 / nf,
        pixel_count: n,
    })
}

/// Pixel-weighted mean of per-frame records.
pub fn aggregate(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    let total: usize = records.iter().map(|r| r.pixel_count).sum();
    if records.is_empty() || total == 0 {
        return Err(Error::EmptyMask);
    }
    let mut out = MetricsRecord {
        mae: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        abs_rel: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
        pixel_count: total,
    };
    for r in records {
        let w = r.pixel_count as f64 / total as f64;
        out.mae += w * r.mae;
        out.rmse += w * r.rmse;
        out.rmse_log += w * r.rmse_log;
        out.abs_rel += w * r.abs_rel;
        out.delta1 += w * r.delta1;
        out.delta2 += w * r.delta2;
        out.delta3 += w * r.delta3;
    }
    Ok(out)
}
