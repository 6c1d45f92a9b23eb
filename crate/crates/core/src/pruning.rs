//! Importance vectors, exact-count mask selection and the geometric
//! retention schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use vip_tensor::Tensor;

use crate::error::{Error, Result};
use crate::seed;

/// `max(floor(size * (1 - rate)^k), 1)`.
pub fn retained_count(size: usize, rate: f64, k: usize) -> usize {
    let kept = size as f64 * (1.0 - rate).powi(k as i32);
    // absorb representation error such as 10 * 0.9 = 8.999...
    ((kept + 1e-9).floor() as usize).clamp(1, size.max(1))
}

/// Smallest `k` with `retained_count(size, rate, k) <= target`.
pub fn iterations_to_target(size: usize, rate: f64, target: usize) -> Result<usize> {
    if target >= size {
        return Ok(0);
    }
    if target == 0 {
        return Err(Error::Config("target must be at least 1".into()));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("pruning rate {rate} must lie in (0, 1)")));
    }
    let mut k = 0;
    while retained_count(size, rate, k) > target {
        k += 1;
    }
    Ok(k)
}

/// Row sums of the normalized adjacency.
pub fn init_b_hat(a_norm: &Tensor) -> Tensor {
    let n = a_norm.shape()[0];
    let sums = (0..n).map(|i| a_norm.data()[i * n..(i + 1) * n].iter().sum()).collect();
    Tensor::vector(sums)
}

/// `q` standard normal draws.
pub fn init_p_hat(q: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed, seed::MASK_INIT);
    Tensor::vector((0..q).map(|_| rng.sample(StandardNormal)).collect())
}

/// Keeps `keep` entries of `prev`: every pinned index, then the non-pinned
/// survivors with the largest `|importance|`. Equal magnitudes prune the
/// lower index first.
pub fn select_top(importance: &[f64], prev: &[bool], keep: usize, pinned: &[usize]) -> Result<Vec<bool>> {
    if importance.len() != prev.len() {
        return Err(Error::Contract(format!(
            "importance length {} vs mask length {}",
            importance.len(),
            prev.len()
        )));
    }
    let alive = prev.iter().filter(|&&b| b).count();
    if alive == 0 {
        return Err(Error::Contract("previous mask is empty".into()));
    }
    let mut is_pinned = vec![false; prev.len()];
    for &i in pinned {
        if i >= prev.len() || !prev[i] {
            return Err(Error::Contract(format!("pinned index {i} is not in the previous mask")));
        }
        is_pinned[i] = true;
    }
    let n_pinned = is_pinned.iter().filter(|&&b| b).count();
    let keep = keep.clamp(1, alive);
    if n_pinned > keep {
        return Err(Error::Budget(format!("{n_pinned} pinned variables exceed the budget of {keep}")));
    }
    let mut candidates: Vec<usize> = (0..prev.len()).filter(|&i| prev[i] && !is_pinned[i]).collect();
    // descending magnitude; among equals the higher index ranks first
    candidates.sort_by(|&a, &b| importance[b].abs().total_cmp(&importance[a].abs()).then(b.cmp(&a)));
    let mut mask = is_pinned;
    for &i in candidates.iter().take(keep - n_pinned) {
        mask[i] = true;
    }
    Ok(mask)
}

/// One pruning step at `rate`: keeps `retained_count(|prev|, rate, 1)`.
pub fn compute_mask(importance: &[f64], prev: &[bool], rate: f64, pinned: &[usize]) -> Result<Vec<bool>> {
    let alive = prev.iter().filter(|&&b| b).count();
    select_top(importance, prev, retained_count(alive, rate, 1), pinned)
}

/// `count` distinct positions of `size`, uniformly at random.
pub fn random_reg_mask(size: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if count > size {
        return Err(Error::Config(format!("regularizer mask of {count} exceeds size {size}")));
    }
    let mut mask = vec![false; size];
    for i in rand::seq::index::sample(rng, size, count) {
        mask[i] = true;
    }
    Ok(mask)
}

pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

pub fn indices_mask(size: usize, indices: &[usize]) -> Vec<bool> {
    let mut m = vec![false; size];
    for &i in indices {
        m[i] = true;
    }
    m
}

/// Retention targets for one dimension: geometric decay at `rate`, floored
/// at `target`, reaching `target` exactly at the last iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub size: usize,
    pub rate: f64,
    pub target: usize,
}

impl Schedule {
    pub fn new(size: usize, rate: f64, target: usize) -> Result<Self> {
        if target == 0 || target > size {
            return Err(Error::Config(format!("target {target} must lie in [1, {size}]")));
        }
        if target < size && !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Config(format!("pruning rate {rate} must lie in (0, 1)")));
        }
        Ok(Schedule { size, rate, target })
    }

    pub fn iterations(&self) -> usize {
        iterations_to_target(self.size, self.rate, self.target).expect("validated schedule")
    }

    /// The unclamped retention law at iteration `k`.
    pub fn scheduled(&self, k: usize) -> usize {
        retained_count(self.size, self.rate, k)
    }

    /// Entries kept during iteration `k`.
    pub fn count(&self, k: usize) -> usize {
        self.scheduled(k).max(self.target)
    }
}

/// Binary masks, importance vectors and pinned variables.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub b: Vec<bool>,
    pub p: Vec<bool>,
    pub b_hat: Tensor,
    pub p_hat: Tensor,
    pub pinned: Vec<usize>,
}

impl MaskState {
    pub fn new(a_norm: &Tensor, q: usize, pinned: Vec<usize>, seed: u64) -> Result<Self> {
        let n = a_norm.shape()[0];
        if let Some(&bad) = pinned.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!("pinned index {bad} outside 0..{n}")));
        }
        let mut pinned = pinned;
        pinned.sort_unstable();
        pinned.dedup();
        Ok(MaskState {
            b: vec![true; n],
            p: vec![true; q],
            b_hat: init_b_hat(a_norm),
            p_hat: init_p_hat(q, seed),
            pinned,
        })
    }

    pub fn selected(&self) -> Vec<usize> {
        mask_indices(&self.b)
    }

    pub fn kept_dims(&self) -> Vec<usize> {
        mask_indices(&self.p)
    }

    /// Masks for the given counts, drawn from the current importance among
    /// the survivors `prev_b`/`prev_p`.
    pub fn masks_for(&self, prev_b: &[bool], prev_p: &[bool], m: usize, q_kept: usize) -> Result<(Vec<bool>, Vec<bool>)> {
        let b = select_top(self.b_hat.data(), prev_b, m, &self.pinned)?;
        let p = select_top(self.p_hat.data(), prev_p, q_kept, &[])?;
        Ok((b, p))
    }
}
