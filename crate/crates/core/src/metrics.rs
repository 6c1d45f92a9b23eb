//! Forecast accuracy in original units and selection diversity.

use serde::{Deserialize, Serialize};
use vip_tensor::Tensor;

use crate::error::{Error, Result};

/// Entries whose ground truth is smaller than this in magnitude are left
/// out of MAPE.
pub const DEFAULT_MAPE_EPS: f64 = 1.0;

fn check_len(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "metric inputs must be equal-length and non-empty ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred, truth)?;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Mean absolute percentage error in percent, and the number of entries
/// excluded for having `|truth| < eps`.
pub fn mape(pred: &[f64], truth: &[f64], eps: f64) -> Result<(f64, usize)> {
    check_len(pred, truth)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if t.abs() < eps {
            continue;
        }
        total += ((p - t) / t).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric(format!(
            "every ground-truth entry is below {eps} in magnitude"
        )));
    }
    Ok((100.0 * total / used as f64, pred.len() - used))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every entry was excluded.
    pub mape_pct: Option<f64>,
    pub mape_excluded: usize,
}

impl MetricRow {
    pub fn compute(pred: &[f64], truth: &[f64], mape_eps: f64) -> Result<Self> {
        let (mape_pct, mape_excluded) = match mape(pred, truth, mape_eps) {
            Ok((v, ex)) => (Some(v), ex),
            Err(Error::UndefinedMetric(_)) => (None, pred.len()),
            Err(e) => return Err(e),
        };
        Ok(MetricRow {
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            mape_pct,
            mape_excluded,
        })
    }
}

/// One row per forecast step plus the pooled average over all steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub steps: Vec<MetricRow>,
    pub average: MetricRow,
}

impl HorizonMetrics {
    /// `pred` and `truth` are `W x n x l'` in original units.
    pub fn compute(pred: &Tensor, truth: &Tensor, mape_eps: f64) -> Result<Self> {
        if pred.shape() != truth.shape() || pred.ndim() != 3 {
            return Err(Error::Contract(format!(
                "forecast {:?} and truth {:?} must be equal W x n x l' tensors",
                pred.shape(),
                truth.shape()
            )));
        }
        let lo = pred.shape()[2];
        let mut steps = Vec::with_capacity(lo);
        for j in 0..lo {
            let p: Vec<f64> = pred.data().iter().skip(j).step_by(lo).copied().collect();
            let t: Vec<f64> = truth.data().iter().skip(j).step_by(lo).copied().collect();
            steps.push(MetricRow::compute(&p, &t, mape_eps)?);
        }
        let average = MetricRow::compute(pred.data(), truth.data(), mape_eps)?;
        Ok(HorizonMetrics { steps, average })
    }

    /// CSV with header `horizon,mae,rmse,mape_pct,mape_excluded`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape_pct,mape_excluded\n");
        let fmt = |label: String, r: &MetricRow| {
            let mape = r.mape_pct.map_or_else(|| "nan".to_string(), |v| format!("{v:?}"));
            format!("{label},{:?},{:?},{mape},{}\n", r.mae, r.rmse, r.mape_excluded)
        };
        for (j, r) in self.steps.iter().enumerate() {
            out.push_str(&fmt((j + 1).to_string(), r));
        }
        out.push_str(&fmt("avg".to_string(), &self.average));
        out
    }
}

fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    inter as f64 / union as f64
}

/// One minus the mean pairwise Jaccard similarity of the masks within each
/// group, averaged over groups.
pub fn jaccard_distance(groups: &[Vec<Vec<bool>>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Contract("no mask groups".into()));
    }
    let mut total = 0.0;
    for group in groups {
        if group.len() < 2 {
            return Err(Error::Contract("each group needs at least two masks".into()));
        }
        if group.iter().any(|m| !m.iter().any(|&b| b)) {
            return Err(Error::Contract("all-zero mask in log".into()));
        }
        let width = group[0].len();
        if group.iter().any(|m| m.len() != width) {
            return Err(Error::Contract("masks in a group differ in length".into()));
        }
        let b = group.len();
        let mut sum = 0.0;
        for i in 0..b {
            for j in i + 1..b {
                sum += jaccard(&group[i], &group[j]);
            }
        }
        total += 2.0 * sum / (b * (b - 1)) as f64;
    }
    Ok(1.0 - total / groups.len() as f64)
}
