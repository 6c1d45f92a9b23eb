//! Synthetic datasets with a planted driver set.
//!
//! Drivers follow independent seasonal AR(1) processes. Every other variable
//! is a fixed convex combination of a few drivers plus Gaussian noise, and
//! the graph links each such variable to the drivers that generate it.
//! Drivers differ in how many variables they feed, so the best budgeted
//! selection is the most popular drivers.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use vip_tensor::Tensor;

use super::{AdjacencyMatrix, RawSeries};
use crate::error::{Error, Result};
use crate::{kv, seed};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub t_total: usize,
    /// Number of drivers.
    pub k_d: usize,
    /// Standard deviation of the noise added to non-drivers.
    pub noise: f64,
    /// Seasonal period in steps.
    pub period: usize,
    pub interval_seconds: u32,
    /// AR(1) coefficient of the driver processes.
    pub ar_coef: f64,
    /// Stationary standard deviation of the AR component.
    pub ar_std: f64,
    /// Largest number of drivers mixed into one non-driver.
    pub max_parents: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 40,
            t_total: 4000,
            k_d: 8,
            noise: 0.1,
            period: 288,
            interval_seconds: 300,
            ar_coef: 0.98,
            ar_std: 1.0,
            max_parents: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if self.k_d == 0 || self.k_d >= self.n {
            return Err(Error::Config(format!(
                "driver count k_d={} must be in [1, n={})",
                self.k_d, self.n
            )));
        }
        if self.t_total < 2 {
            return Err(Error::Config("T_total must be at least 2".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config("noise must be finite and nonnegative".into()));
        }
        if self.period == 0 || self.interval_seconds == 0 {
            return Err(Error::Config("period and interval_seconds must be positive".into()));
        }
        if !(self.ar_coef.abs() < 1.0) || !(self.ar_std >= 0.0) {
            return Err(Error::Config("ar_coef must lie in (-1, 1) and ar_std must be nonnegative".into()));
        }
        if self.max_parents == 0 {
            return Err(Error::Config("max_parents must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "n" => self.n = kv::value(key, raw)?,
            "T_total" | "t_total" => self.t_total = kv::value(key, raw)?,
            "k_d" => self.k_d = kv::value(key, raw)?,
            "noise" => self.noise = kv::value(key, raw)?,
            "period" => self.period = kv::value(key, raw)?,
            "interval_seconds" => self.interval_seconds = kv::value(key, raw)?,
            "ar_coef" => self.ar_coef = kv::value(key, raw)?,
            "ar_std" => self.ar_std = kv::value(key, raw)?,
            "max_parents" => self.max_parents = kv::value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown synthetic config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for (line, key, value) in kv::read(path)? {
            cfg.set(&key, &value).map_err(|e| Error::parse(path, line, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub series: RawSeries,
    pub adjacency: AdjacencyMatrix,
    /// Sorted driver indices.
    pub drivers: Vec<usize>,
    /// For each non-driver, its `(driver, weight)` parents; empty for drivers.
    pub parents: Vec<Vec<(usize, f64)>>,
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, seed::DATA);
    let (n, t) = (cfg.n, cfg.t_total);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut drivers = order[..cfg.k_d].to_vec();
    drivers.sort_unstable();

    // Popularity falls off with a random rank so a few drivers feed most
    // of the graph.
    let mut rank: Vec<usize> = (0..cfg.k_d).collect();
    rank.shuffle(&mut rng);
    let popularity: Vec<f64> = rank.iter().map(|&r| 1.0 / (r as f64 + 1.0)).collect();

    let mut values = vec![0.0; n * t];
    let innov = cfg.ar_std * (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    for &d in &drivers {
        let level: f64 = rng.random_range(2.0..10.0);
        let amp: f64 = rng.random_range(0.3..1.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut ar: f64 = cfg.ar_std * rng.sample::<f64, _>(StandardNormal);
        for step in 0..t {
            let season = amp * (std::f64::consts::TAU * step as f64 / cfg.period as f64 + phase).sin();
            values[d * t + step] = level + season + ar;
            ar = cfg.ar_coef * ar + innov * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut parents = vec![Vec::new(); n];
    let mut edges = Vec::new();
    for i in 0..n {
        if drivers.binary_search(&i).is_ok() {
            continue;
        }
        let count = rng.random_range(1..=cfg.max_parents.min(cfg.k_d));
        let mut weights = popularity.clone();
        let mut chosen = Vec::with_capacity(count);
        for _ in 0..count {
            let dist = WeightedIndex::new(&weights).expect("positive weights remain");
            let j = dist.sample(&mut rng);
            weights[j] = 0.0;
            chosen.push(j);
        }
        let raw: Vec<f64> = chosen.iter().map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        for (&j, &w) in chosen.iter().zip(&raw) {
            let d = drivers[j];
            parents[i].push((d, w / total));
            edges.push((i, d, 1.0));
        }
        for step in 0..t {
            let mix: f64 = parents[i].iter().map(|&(d, w)| w * values[d * t + step]).sum();
            values[i * t + step] = mix + cfg.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let series = RawSeries::new(Tensor::new(vec![n, t], values)?, cfg.interval_seconds, 0)?;
    let adjacency = AdjacencyMatrix::from_edges(n, &edges)?;
    Ok(SynthData {
        series,
        adjacency,
        drivers,
        parents,
    })
}
