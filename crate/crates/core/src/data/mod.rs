//! Value matrices, adjacency graphs, normalization and sliding windows.

pub mod io;
pub mod synth;

pub use io::{load_adjacency, load_coords, load_dataset, load_series, save_adjacency, save_series};

use vip_tensor::Tensor;

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: u32 = 86_400;
pub const DAYS_PER_WEEK: usize = 7;

/// Readings of `n` variables over `T_total` consecutive intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    values: Tensor,
    pub interval_seconds: u32,
    /// Interval index of the first reading within the day/week cycle.
    pub start_offset: usize,
}

impl RawSeries {
    pub fn new(values: Tensor, interval_seconds: u32, start_offset: usize) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Contract(format!("value matrix must be 2-D, got {:?}", values.shape())));
        }
        if values.shape()[0] < 2 {
            return Err(Error::Config("need at least two variables".into()));
        }
        if interval_seconds == 0 {
            return Err(Error::Config("interval_seconds must be positive".into()));
        }
        if !values.is_finite() {
            return Err(Error::Degenerate("value matrix contains non-finite readings".into()));
        }
        Ok(RawSeries {
            values,
            interval_seconds,
            start_offset,
        })
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n x T` matrix.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn value(&self, var: usize, t: usize) -> f64 {
        self.values.data()[var * self.len() + t]
    }

    pub fn row(&self, var: usize) -> &[f64] {
        let t = self.len();
        &self.values.data()[var * t..(var + 1) * t]
    }

    pub fn steps_per_day(&self) -> usize {
        ((SECONDS_PER_DAY / self.interval_seconds) as usize).max(1)
    }

    /// Time-of-day and day-of-week index of step `t`.
    pub fn temporal_index(&self, t: usize) -> (usize, usize) {
        let d = self.steps_per_day();
        let abs = self.start_offset + t;
        (abs % d, (abs / d) % DAYS_PER_WEEK)
    }

    /// Steps `[start, end)` as a new series with the cycle offset carried over.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        let n = self.n();
        let t = self.len();
        let len = end - start;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.values.data()[i * t + start..i * t + end]);
        }
        RawSeries {
            values: Tensor::new(vec![n, len], data).expect("slice shape"),
            interval_seconds: self.interval_seconds,
            start_offset: self.start_offset + start,
        }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> RawSeries {
        RawSeries {
            values: self.values.map(f),
            interval_seconds: self.interval_seconds,
            start_offset: self.start_offset,
        }
    }

    /// Time average of each variable.
    pub fn means(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.row(i).iter().sum::<f64>() / self.len().max(1) as f64)
            .collect()
    }
}

/// Static graph over the variables. Edges are undirected; the diagonal is
/// ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    weights: Tensor,
}

impl AdjacencyMatrix {
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Contract(format!("adjacency must be square, got {s:?}")));
        }
        if weights.data().iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("adjacency weights must be finite and nonnegative".into()));
        }
        Ok(AdjacencyMatrix { weights })
    }

    pub fn empty(n: usize) -> Self {
        AdjacencyMatrix {
            weights: Tensor::zeros(&[n, n]),
        }
    }

    /// Builds a symmetric matrix from `(i, j, weight)` edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w = Tensor::zeros(&[n, n]);
        for &(i, j, weight) in edges {
            if i >= n || j >= n {
                return Err(Error::Contract(format!("edge ({i},{j}) outside {n} nodes")));
            }
            w.data_mut()[i * n + j] = weight;
            w.data_mut()[j * n + i] = weight;
        }
        Self::new(w)
    }

    pub fn n(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.data()[i * self.n() + j]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Unweighted degree, self-links excluded.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.n()).filter(|&j| j != i && self.weight(i, j) != 0.0).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.degree(i)).collect()
    }

    /// Undirected edge list `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.weight(i, j).max(self.weight(j, i));
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &AdjacencyMatrix) -> Tensor {
    let n = a.n();
    let mut with_loops = a.weights.clone();
    for i in 0..n {
        with_loops.data_mut()[i * n + i] = 1.0;
    }
    let deg: Vec<f64> = (0..n)
        .map(|i| with_loops.data()[i * n..(i + 1) * n].iter().sum())
        .collect();
    let data = with_loops.data_mut();
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    with_loops
}

/// Global z-score statistics: one mean and one standard deviation over every
/// entry of the training split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn fit(train: &RawSeries) -> Result<Self> {
        let v = train.values().data();
        if v.is_empty() {
            return Err(Error::Degenerate("empty training split".into()));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Degenerate("training values are constant (std = 0)".into()));
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }

    pub fn apply_series(&self, s: &RawSeries) -> RawSeries {
        s.map_values(|x| self.apply(x))
    }

    pub fn invert_series(&self, s: &RawSeries) -> RawSeries {
        s.map_values(|x| self.invert(x))
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|x| self.invert(x))
    }
}

/// Chronological train/val/test split. Train and val lengths are rounded
/// from the ratios; test takes the remainder.
pub fn split(
    series: &RawSeries,
    ratios: [f64; 3],
    min_len: usize,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    if ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Config(format!("split ratios must be positive: {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {total}, not 1")));
    }
    let t = series.len();
    let train = (t as f64 * ratios[0]).round() as usize;
    let val = ((t as f64 * ratios[1]).round() as usize).min(t - train);
    let test = t - train - val;
    for (name, len) in [("train", train), ("val", val), ("test", test)] {
        if len < min_len {
            return Err(Error::Config(format!(
                "{name} split has {len} steps, fewer than one window ({min_len})"
            )));
        }
    }
    Ok((
        series.slice(0, train),
        series.slice(train, train + val),
        series.slice(train + val, t),
    ))
}

/// One input/target window with per-step temporal indices.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `n x l`
    pub x_in: Tensor,
    /// `n x l'`
    pub x_out: Tensor,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
}

/// Sliding windows over one split. Windows are materialized on demand so a
/// long split does not hold `l + l'` copies of every reading.
#[derive(Debug, Clone)]
pub struct WindowSet {
    series: RawSeries,
    starts: Vec<usize>,
    pub input_len: usize,
    pub output_len: usize,
}

/// Windows of `l` inputs followed by `l'` targets, advancing by `stride`.
pub fn make_windows(series: &RawSeries, input_len: usize, output_len: usize, stride: usize) -> Result<WindowSet> {
    if input_len == 0 || output_len == 0 || stride == 0 {
        return Err(Error::Config("window lengths and stride must be at least 1".into()));
    }
    let span = input_len + output_len;
    let starts = if series.len() < span {
        Vec::new()
    } else {
        (0..=series.len() - span).step_by(stride).collect()
    };
    Ok(WindowSet {
        series: series.clone(),
        starts,
        input_len,
        output_len,
    })
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n(&self) -> usize {
        self.series.n()
    }

    pub fn series(&self) -> &RawSeries {
        &self.series
    }

    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn get(&self, i: usize) -> WindowSample {
        let s = self.starts[i];
        let n = self.n();
        let (l, lo) = (self.input_len, self.output_len);
        let mut x_in = Vec::with_capacity(n * l);
        let mut x_out = Vec::with_capacity(n * lo);
        for v in 0..n {
            let row = self.series.row(v);
            x_in.extend_from_slice(&row[s..s + l]);
            x_out.extend_from_slice(&row[s + l..s + l + lo]);
        }
        let (tod, dow) = (s..s + l).map(|t| self.series.temporal_index(t)).unzip();
        WindowSample {
            x_in: Tensor::new(vec![n, l], x_in).expect("window shape"),
            x_out: Tensor::new(vec![n, lo], x_out).expect("window shape"),
            tod,
            dow,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowSample> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Stacks the windows at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::from_samples(indices.iter().map(|&i| self.get(i)))
    }
}

/// A stack of windows: `x_in` is `B x n x l`, `x_out` is `B x n x l'`, and
/// the temporal indices are `B x l` flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x_in: Tensor,
    pub x_out: Tensor,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: impl IntoIterator<Item = WindowSample>) -> Batch {
        let mut x_in = Vec::new();
        let mut x_out = Vec::new();
        let mut tod = Vec::new();
        let mut dow = Vec::new();
        let mut dims = None;
        let mut count = 0;
        for s in samples {
            let d = (s.x_in.shape()[0], s.x_in.shape()[1], s.x_out.shape()[1]);
            assert!(dims.is_none() || dims == Some(d), "windows in a batch must share shape");
            dims = Some(d);
            x_in.extend_from_slice(s.x_in.data());
            x_out.extend_from_slice(s.x_out.data());
            tod.extend_from_slice(&s.tod);
            dow.extend_from_slice(&s.dow);
            count += 1;
        }
        let (n, l, lo) = dims.unwrap_or((0, 0, 0));
        Batch {
            x_in: Tensor::new(vec![count, n, l], x_in).expect("batch shape"),
            x_out: Tensor::new(vec![count, n, lo], x_out).expect("batch shape"),
            tod,
            dow,
        }
    }

    pub fn size(&self) -> usize {
        self.x_in.shape()[0]
    }
}
