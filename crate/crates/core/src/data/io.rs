use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use vip_tensor::Tensor;

use super::{AdjacencyMatrix, RawSeries};
use crate::error::{Error, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("bad {what} {:?}", field.trim())))
}

/// Value file: a header `n,T_total,interval_seconds,start_offset` followed by
/// one comma-separated row of `T_total` readings per variable.
pub fn load_series(path: &Path) -> Result<RawSeries> {
    let text = read_text(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header line"))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 4 {
        return Err(Error::parse(
            path,
            hline,
            "header must be n,T_total,interval_seconds,start_offset",
        ));
    }
    let n: usize = parse_num(path, hline, fields[0], "n")?;
    let t: usize = parse_num(path, hline, fields[1], "T_total")?;
    let interval: u32 = parse_num(path, hline, fields[2], "interval_seconds")?;
    let offset: usize = parse_num(path, hline, fields[3], "start_offset")?;
    if n < 2 {
        return Err(Error::parse(path, hline, "n must be at least 2"));
    }
    if interval == 0 {
        return Err(Error::parse(path, hline, "interval_seconds must be positive"));
    }

    let mut data = Vec::with_capacity(n * t);
    let mut rows = 0;
    let mut last = hline;
    for (lineno, line) in lines {
        last = lineno;
        if rows == n {
            return Err(Error::parse(path, lineno, format!("more than n={n} value rows")));
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = parse_num(path, lineno, field, "reading")?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, "non-finite reading"));
            }
            data.push(v);
        }
        let got = data.len() - before;
        if got != t {
            return Err(Error::parse(path, lineno, format!("expected {t} readings, found {got}")));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::parse(path, last, format!("expected {n} value rows, found {rows}")));
    }
    RawSeries::new(Tensor::new(vec![n, t], data)?, interval, offset)
}

/// Edge list `i,j,weight` (undirected). A `# n=K` comment, when present,
/// must agree with the value file.
pub fn load_adjacency(path: &Path, n: usize) -> Result<AdjacencyMatrix> {
    let text = read_text(path)?;
    let mut w = Tensor::zeros(&[n, n]);
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(declared) = comment.trim().strip_prefix("n=") {
                let k: usize = parse_num(path, lineno, declared, "node count")?;
                if k != n {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("adjacency declares n={k} but value file has n={n}"),
                    ));
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno, "edge must be i,j,weight"));
        }
        let a: usize = parse_num(path, lineno, fields[0], "node index")?;
        let b: usize = parse_num(path, lineno, fields[1], "node index")?;
        let weight: f64 = parse_num(path, lineno, fields[2], "weight")?;
        if a >= n || b >= n {
            return Err(Error::parse(
                path,
                lineno,
                format!("edge ({a},{b}) references a node outside 0..{n}"),
            ));
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::parse(path, lineno, "weight must be finite and nonnegative"));
        }
        w.data_mut()[a * n + b] = weight;
        w.data_mut()[b * n + a] = weight;
    }
    AdjacencyMatrix::new(w)
}

pub fn load_dataset(values_path: &Path, adjacency_path: &Path) -> Result<(RawSeries, AdjacencyMatrix)> {
    let series = load_series(values_path)?;
    let adj = load_adjacency(adjacency_path, series.n())?;
    Ok((series, adj))
}

/// Coordinate file `index,x,y`, one line per variable.
pub fn load_coords(path: &Path, n: usize) -> Result<Vec<(f64, f64)>> {
    let text = read_text(path)?;
    let mut coords = vec![None; n];
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno, "coordinate must be index,x,y"));
        }
        let idx: usize = parse_num(path, lineno, fields[0], "index")?;
        if idx >= n {
            return Err(Error::parse(path, lineno, format!("index {idx} outside 0..{n}")));
        }
        let x: f64 = parse_num(path, lineno, fields[1], "x")?;
        let y: f64 = parse_num(path, lineno, fields[2], "y")?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::parse(path, lineno, "non-finite coordinate"));
        }
        coords[idx] = Some((x, y));
    }
    coords
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::parse(path, text.lines().count(), format!("no coordinate for variable {i}"))))
        .collect()
}

pub fn save_series(series: &RawSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{},{},{},{}",
        series.n(),
        series.len(),
        series.interval_seconds,
        series.start_offset
    );
    for i in 0..series.n() {
        let row: Vec<String> = series.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_adjacency(adj: &AdjacencyMatrix, path: &Path) -> Result<()> {
    let mut out = format!("# n={}\n", adj.n());
    for (i, j, w) in adj.edges() {
        let _ = writeln!(out, "{i},{j},{w:?}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
