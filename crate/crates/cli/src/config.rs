//! Run configuration: every training, model and synthetic-data key plus
//! paths and evaluation options, from a `key=value` file with overrides.

use std::path::{Path, PathBuf};

use vip_core::data::synth::SynthConfig;
use vip_core::kv;
use vip_core::metrics::DEFAULT_MAPE_EPS;
use vip_core::model::ModelDims;
use vip_core::training::TrainingConfig;
use vip_core::{Error, Result};

const SYNTH_KEYS: &[&str] = &[
    "n",
    "T_total",
    "t_total",
    "k_d",
    "noise",
    "period",
    "interval_seconds",
    "ar_coef",
    "ar_std",
    "max_parents",
];

/// Desk-scale model used when no model keys are given.
pub fn desk_dims() -> ModelDims {
    ModelDims {
        q: 16,
        d: 4,
        d_tod: 4,
        d_dow: 4,
        d_v: 4,
        heads: 4,
        temporal_layers: 1,
        spatial_layers: 1,
        ffn_hidden: 16,
        output_hidden: 32,
        ..ModelDims::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    /// Model shape; `n`, window lengths and calendar sizes come from data.
    pub model: ModelDims,
    pub synth: SynthConfig,
    /// Directory holding `values.csv`, `adjacency.csv` and optionally
    /// `coords.csv`; the explicit path keys take precedence.
    pub data_dir: Option<PathBuf>,
    pub values: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub coords: Option<PathBuf>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub selection: Option<PathBuf>,
    /// Selection file whose indices are pinned during `train-vip`.
    pub pinned: Option<PathBuf>,
    pub method: Option<String>,
    /// Split used by `evaluate`: `val` or `test`.
    pub split: String,
    pub mape_eps: f64,
    /// Continue pretraining from `checkpoint`.
    pub resume: bool,
    /// Label written into summaries; defaults to the command's method.
    pub label: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            training: TrainingConfig {
                lr: 0.01,
                batch_size: 32,
                epochs_per_iteration: 1,
                final_epochs: 3,
                pretrain_epochs: 15,
                patience: 3,
                train_stride: 4,
                eval_stride: 4,
                ..TrainingConfig::default()
            },
            model: desk_dims(),
            synth: SynthConfig::default(),
            data_dir: None,
            values: None,
            adjacency: None,
            coords: None,
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            selection: None,
            pinned: None,
            method: None,
            split: "test".into(),
            mape_eps: DEFAULT_MAPE_EPS,
            resume: false,
            label: None,
        }
    }
}

fn path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = path(raw),
            "values" => self.values = path(raw),
            "adjacency" => self.adjacency = path(raw),
            "coords" => self.coords = path(raw),
            "train_ratio" => self.train_ratio = kv::value(key, raw)?,
            "val_ratio" => self.val_ratio = kv::value(key, raw)?,
            "test_ratio" => self.test_ratio = kv::value(key, raw)?,
            "out_dir" => self.out_dir = PathBuf::from(raw),
            "checkpoint" => self.checkpoint = path(raw),
            "selection" => self.selection = path(raw),
            "pinned" => self.pinned = path(raw),
            "method" => self.method = (!raw.is_empty()).then(|| raw.to_string()),
            "split" => {
                if raw != "val" && raw != "test" {
                    return Err(Error::Config(format!("split must be val or test, got {raw:?}")));
                }
                self.split = raw.to_string();
            }
            "mape_eps" => self.mape_eps = kv::value(key, raw)?,
            "resume" => self.resume = kv::flag(key, raw)?,
            "label" => self.label = (!raw.is_empty()).then(|| raw.to_string()),
            _ if SYNTH_KEYS.contains(&key) => self.synth.set(key, raw)?,
            _ => {
                if !self.training.set(key, raw)? && !self.model.set(key, raw)? {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            for (line, key, value) in kv::read(f)? {
                cfg.set(&key, &value).map_err(|e| Error::parse(f, line, e.to_string()))?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every key with its effective value, loadable by [`RunConfig::load`].
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let m = &self.model;
        let mut pairs: Vec<(String, String)> = vec![
            ("data_dir".into(), show(&self.data_dir)),
            ("values".into(), show(&self.values)),
            ("adjacency".into(), show(&self.adjacency)),
            ("coords".into(), show(&self.coords)),
            ("train_ratio".into(), self.train_ratio.to_string()),
            ("val_ratio".into(), self.val_ratio.to_string()),
            ("test_ratio".into(), self.test_ratio.to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
            ("checkpoint".into(), show(&self.checkpoint)),
            ("selection".into(), show(&self.selection)),
            ("pinned".into(), show(&self.pinned)),
            ("method".into(), self.method.clone().unwrap_or_default()),
            ("split".into(), self.split.clone()),
            ("mape_eps".into(), self.mape_eps.to_string()),
            ("resume".into(), self.resume.to_string()),
            ("label".into(), self.label.clone().unwrap_or_default()),
            ("n".into(), s.n.to_string()),
            ("T_total".into(), s.t_total.to_string()),
            ("k_d".into(), s.k_d.to_string()),
            ("noise".into(), s.noise.to_string()),
            ("period".into(), s.period.to_string()),
            ("interval_seconds".into(), s.interval_seconds.to_string()),
            ("ar_coef".into(), s.ar_coef.to_string()),
            ("ar_std".into(), s.ar_std.to_string()),
            ("max_parents".into(), s.max_parents.to_string()),
        ];
        // n, steps_per_day and days_per_week are derived from the data.
        pairs.extend(
            m.to_pairs()
                .into_iter()
                .filter(|(k, _)| !matches!(k.as_str(), "n" | "steps_per_day" | "days_per_week")),
        );
        pairs.extend(self.training.to_pairs());
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn ratios(&self) -> [f64; 3] {
        [self.train_ratio, self.val_ratio, self.test_ratio]
    }

    fn data_file(&self, explicit: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
        explicit.clone().or_else(|| self.data_dir.as_ref().map(|d| d.join(name)))
    }

    /// Value and adjacency files; both must exist.
    pub fn dataset_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let values = self
            .data_file(&self.values, "values.csv")
            .ok_or_else(|| Error::Config("no dataset: set data_dir or values/adjacency".into()))?;
        let adjacency = self
            .data_file(&self.adjacency, "adjacency.csv")
            .ok_or_else(|| Error::Config("no adjacency file: set data_dir or adjacency".into()))?;
        require_file(&values)?;
        require_file(&adjacency)?;
        Ok((values, adjacency))
    }

    /// Coordinates file when configured or present in `data_dir`.
    pub fn coords_path(&self) -> Result<Option<PathBuf>> {
        if let Some(p) = &self.coords {
            require_file(p)?;
            return Ok(Some(p.clone()));
        }
        Ok(self.data_dir.as_ref().map(|d| d.join("coords.csv")).filter(|p| p.is_file()))
    }
}

pub fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", p.display())))
    }
}

/// Config file, `key=value` overrides and positional arguments.
pub type Parsed = (Option<PathBuf>, Vec<(String, String)>, Vec<String>);

/// Splits `--key value` / `--key=value` tokens into overrides and
/// positional arguments. `--config` is returned separately.
pub fn parse_overrides(tokens: &[String]) -> Result<Parsed> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut positional = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            positional.push(tok.clone());
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    Ok((config, pairs, positional))
}
