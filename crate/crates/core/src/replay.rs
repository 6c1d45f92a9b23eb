//! Prioritized replay of past windows together with the importance vectors
//! that were live when they were stored.

use std::str::FromStr;

use rand::Rng;
use vip_tensor::Tensor;

use crate::error::Error;

pub const PRIORITY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplayPolicy {
    /// Priority is the reciprocal loss: well-fit samples come back most.
    #[default]
    Pvr,
    /// Priority is the loss itself.
    InPvr,
    /// Uniform.
    RandEr,
}

impl ReplayPolicy {
    pub fn priority(self, loss: f64) -> f64 {
        let loss = loss.max(PRIORITY_EPS);
        match self {
            ReplayPolicy::Pvr => 1.0 / loss,
            ReplayPolicy::InPvr => loss,
            ReplayPolicy::RandEr => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReplayPolicy::Pvr => "pvr",
            ReplayPolicy::InPvr => "in-pvr",
            ReplayPolicy::RandEr => "rand-er",
        }
    }
}

impl FromStr for ReplayPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pvr" => Ok(ReplayPolicy::Pvr),
            "in-pvr" | "inpvr" => Ok(ReplayPolicy::InPvr),
            "rand-er" | "rander" | "random" => Ok(ReplayPolicy::RandEr),
            _ => Err(Error::Config(format!("unknown replay policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySample {
    pub x_in: Tensor,
    pub x_out: Tensor,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
    pub b_hat: Tensor,
    pub p_hat: Tensor,
    pub priority: f64,
}

#[derive(Debug, Clone)]
struct Entry {
    id: u64,
    sample: ReplaySample,
    /// `priority^alpha`, cached.
    weight: f64,
}

/// Bounded buffer drawing samples with probability `P^alpha / sum P^alpha`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    alpha: f64,
    policy: ReplayPolicy,
    entries: Vec<Entry>,
    next_id: u64,
    /// Ids handed out by `sample_for_replay`, most recent last.
    replayed: Vec<u64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64, policy: ReplayPolicy) -> Result<Self, Error> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be at least 1".into()));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("replay exponent {alpha} must be finite and nonnegative")));
        }
        Ok(ReplayBuffer {
            capacity,
            alpha,
            policy,
            entries: Vec::new(),
            next_id: 0,
            replayed: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> ReplayPolicy {
        self.policy
    }

    pub fn priority(&self, loss: f64) -> f64 {
        self.policy.priority(loss)
    }

    pub fn samples(&self) -> impl Iterator<Item = &ReplaySample> {
        self.entries.iter().map(|e| &e.sample)
    }

    /// Selection probability of every stored sample, in storage order.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        self.entries.iter().map(|e| e.weight / total).collect()
    }

    fn draw_index(&self, rng: &mut impl Rng) -> usize {
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        let mut u = rng.random::<f64>() * total;
        for (i, e) in self.entries.iter().enumerate() {
            if u < e.weight {
                return i;
            }
            u -= e.weight;
        }
        // rounding left u just above the last cumulative weight
        self.entries.iter().rposition(|e| e.weight > 0.0).unwrap_or(self.entries.len() - 1)
    }

    /// Draws one stored sample; `None` when empty.
    pub fn sample_for_replay(&mut self, rng: &mut impl Rng) -> Option<&ReplaySample> {
        if self.entries.is_empty() {
            return None;
        }
        let i = self.draw_index(rng);
        let id = self.entries[i].id;
        self.replayed.retain(|&r| r != id);
        self.replayed.push(id);
        Some(&self.entries[i].sample)
    }

    /// Stores `sample`. At capacity, the most recently replayed sample still
    /// present is evicted first; if none was replayed, a victim is drawn with
    /// the replay probabilities. Returns the evicted sample.
    pub fn push(&mut self, sample: ReplaySample, rng: &mut impl Rng) -> Option<ReplaySample> {
        let mut evicted = None;
        if self.entries.len() >= self.capacity {
            let victim = loop {
                match self.replayed.pop() {
                    Some(id) => {
                        if let Some(pos) = self.entries.iter().position(|e| e.id == id) {
                            break pos;
                        }
                    }
                    None => break self.draw_index(rng),
                }
            };
            evicted = Some(self.entries.swap_remove(victim).sample);
        }
        let weight = if self.alpha == 0.0 {
            1.0
        } else {
            sample.priority.max(0.0).powf(self.alpha)
        };
        self.entries.push(Entry {
            id: self.next_id,
            sample,
            weight,
        });
        self.next_id += 1;
        evicted
    }
}
