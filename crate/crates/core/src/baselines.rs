//! Heuristic variable selections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AdjacencyMatrix, RawSeries};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted, distinct.
    pub indices: Vec<usize>,
    pub method: String,
    pub scores: Option<Vec<f64>>,
}

impl SelectionResult {
    fn new(mut indices: Vec<usize>, method: &str, scores: Option<Vec<f64>>) -> Self {
        indices.sort_unstable();
        SelectionResult {
            indices,
            method: method.to_string(),
            scores,
        }
    }
}

fn check_budget(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::Config(format!("budget m={m} must lie in [1, {n}]")));
    }
    Ok(())
}

/// Indices of the `m` largest scores; equal scores favour the lower index.
fn top_by_score(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Highest time-averaged raw value.
pub fn select_max_value(train: &RawSeries, m: usize) -> Result<SelectionResult> {
    check_budget(train.n(), m)?;
    let means = train.means();
    Ok(SelectionResult::new(top_by_score(&means, m), "max-value", Some(means)))
}

/// Highest unweighted degree.
pub fn select_max_connectivity(a: &AdjacencyMatrix, m: usize) -> Result<SelectionResult> {
    check_budget(a.n(), m)?;
    let deg: Vec<f64> = a.degrees().into_iter().map(|d| d as f64).collect();
    Ok(SelectionResult::new(top_by_score(&deg, m), "max-connectivity", Some(deg)))
}

/// Splits the bounding box into `ceil(sqrt(m))^2` cells and takes the
/// highest-degree variable of each occupied cell. Surplus candidates are
/// trimmed by degree; a shortfall is filled with the highest-degree
/// variables not yet taken.
pub fn select_grid(coords: Option<&[(f64, f64)]>, a: &AdjacencyMatrix, m: usize) -> Result<SelectionResult> {
    let n = a.n();
    check_budget(n, m)?;
    let coords = coords.ok_or_else(|| Error::Config("grid selection needs a coordinates file".into()))?;
    if coords.len() != n {
        return Err(Error::Config(format!("{} coordinates for {n} variables", coords.len())));
    }
    let g = (m as f64).sqrt().ceil() as usize;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in coords {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let cell = |v: f64, lo: f64, hi: f64| -> usize {
        if hi > lo {
            (((v - lo) / (hi - lo) * g as f64).floor() as usize).min(g - 1)
        } else {
            0
        }
    };
    let deg = a.degrees();
    let better = |i: usize, j: usize| deg[i] > deg[j] || (deg[i] == deg[j] && i < j);
    let mut best: Vec<Option<usize>> = vec![None; g * g];
    for (i, &(x, y)) in coords.iter().enumerate() {
        let c = cell(y, y0, y1) * g + cell(x, x0, x1);
        if best[c].is_none_or(|j| better(i, j)) {
            best[c] = Some(i);
        }
    }
    let mut chosen: Vec<usize> = best.into_iter().flatten().collect();
    let by_degree = |v: &mut Vec<usize>| v.sort_by(|&a, &b| deg[b].cmp(&deg[a]).then(a.cmp(&b)));
    by_degree(&mut chosen);
    chosen.truncate(m);
    if chosen.len() < m {
        let mut rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
        by_degree(&mut rest);
        chosen.extend(rest.into_iter().take(m - chosen.len()));
    }
    let scores = deg.iter().map(|&d| d as f64).collect();
    Ok(SelectionResult::new(chosen, "grid", Some(scores)))
}

/// Uniform `m`-subset.
pub fn select_random(n: usize, m: usize, rng: &mut impl Rng) -> Result<SelectionResult> {
    check_budget(n, m)?;
    let picked = rand::seq::index::sample(rng, n, m).into_vec();
    Ok(SelectionResult::new(picked, "random", None))
}

/// Pinned set for the hybrid mode: the first stage fixes `ceil(m/2)`
/// variables and pruning picks the rest.
pub fn hybrid_pin(first_stage: &SelectionResult, m: usize) -> Result<Vec<usize>> {
    let want = m.div_ceil(2);
    if first_stage.indices.len() != want {
        return Err(Error::Config(format!(
            "first stage selected {} variables, the hybrid mode pins {want}",
            first_stage.indices.len()
        )));
    }
    Ok(first_stage.indices.clone())
}
