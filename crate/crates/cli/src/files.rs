//! On-disk formats owned by the command line: selection files, the
//! line-delimited training record and run summaries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vip_core::training::{IterationRecord, TrainRecord};
use vip_core::{Error, Result};

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `# method=...`, then `index,score` rows sorted by index. Scores are
/// empty when the method has none.
pub fn selection_text(method: &str, indices: &[usize], scores: Option<&[f64]>) -> String {
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    let mut out = format!("# method={method}\nindex,score\n");
    for i in idx {
        let s = scores.map(|s| format!("{:?}", s[i])).unwrap_or_default();
        out.push_str(&format!("{i},{s}\n"));
    }
    out
}

/// Reads the indices of a selection file, checking they are distinct and
/// below `n`.
pub fn read_selection(path: &Path, n: usize) -> Result<Vec<usize>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("index") {
            continue;
        }
        let field = line.split(',').next().unwrap_or("").trim();
        let idx: usize = field
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad index {field:?}")))?;
        if idx >= n {
            return Err(Error::parse(path, i + 1, format!("index {idx} outside 0..{n}")));
        }
        if out.contains(&idx) {
            return Err(Error::parse(path, i + 1, format!("index {idx} repeated")));
        }
        out.push(idx);
    }
    if out.is_empty() {
        return Err(Error::parse(path, 0, "selection is empty"));
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordLine {
    Iteration(IterationRecord),
    Final {
        best_epoch: usize,
        best_val_mae: f64,
        seconds: f64,
    },
}

pub fn record_jsonl(record: &TrainRecord) -> Result<String> {
    let mut out = String::new();
    let enc = |line: &RecordLine| serde_json::to_string(line).map_err(|e| Error::Contract(format!("record encoding: {e}")));
    for it in &record.iterations {
        out.push_str(&enc(&RecordLine::Iteration(it.clone()))?);
        out.push('\n');
    }
    out.push_str(&enc(&RecordLine::Final {
        best_epoch: record.best_epoch,
        best_val_mae: record.best_val_mae,
        seconds: record.seconds,
    })?);
    out.push('\n');
    Ok(out)
}

pub fn read_record(path: &Path) -> Result<TrainRecord> {
    let mut record = TrainRecord::default();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        match parsed {
            RecordLine::Iteration(it) => record.iterations.push(it),
            RecordLine::Final {
                best_epoch,
                best_val_mae,
                seconds,
            } => {
                record.best_epoch = best_epoch;
                record.best_val_mae = best_val_mae;
                record.seconds = seconds;
            }
        }
    }
    Ok(record)
}

/// What `evaluate` and `train-vip` report about a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub q_kept: usize,
    pub split: String,
    pub selected: Vec<usize>,
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: Option<f64>,
    pub params: usize,
    pub inference_ms_per_window: f64,
    pub jaccard_distance: Option<f64>,
}

impl Summary {
    pub fn sparsity(&self) -> f64 {
        1.0 - self.m as f64 / self.n as f64
    }
}

pub fn write_summary(path: &Path, s: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(s).map_err(|e| Error::Contract(format!("summary encoding: {e}")))?;
    write(path, &(text + "\n"))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::parse(path, 0, e.to_string()))
}
