//! The base spatio-temporal attention forecaster and its parameters.

mod forward;

pub use forward::{
    attention_layer, bind, embed, encode, forward_stmf, output_mlp, predict_stmf, spatial_attention,
    temporal_attention, AttnMask, Bound,
};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vip_tensor::Tensor;

use crate::error::{Error, Result};
use crate::{kv, seed};

/// Layer sizes. `q` must equal `d + d_tod + d_dow + d_v`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub q: usize,
    pub d: usize,
    pub d_tod: usize,
    pub d_dow: usize,
    pub d_v: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    /// Feed-forward width inside each attention block; 0 disables it.
    pub ffn_hidden: usize,
    pub output_hidden: usize,
    /// Residual connection plus layer norm around each sub-layer.
    pub residual_norm: bool,
    pub steps_per_day: usize,
    pub days_per_week: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            n: 0,
            input_len: 12,
            output_len: 12,
            q: 152,
            d: 24,
            d_tod: 24,
            d_dow: 24,
            d_v: 80,
            heads: 4,
            temporal_layers: 3,
            spatial_layers: 3,
            ffn_hidden: 256,
            output_hidden: 256,
            residual_norm: true,
            steps_per_day: 288,
            days_per_week: 7,
        }
    }
}

impl ModelDims {
    pub fn layers(&self) -> usize {
        self.temporal_layers + self.spatial_layers
    }

    pub fn head_dim(&self) -> usize {
        self.q / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.d + self.d_tod + self.d_dow + self.d_v;
        if sum != self.q {
            return Err(Error::Config(format!(
                "q={} but d + d_tod + d_dow + d_v = {sum}",
                self.q
            )));
        }
        if self.heads == 0 || !self.q.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("q={} is not divisible by heads={}", self.q, self.heads)));
        }
        if self.n == 0 || self.input_len == 0 || self.output_len == 0 {
            return Err(Error::Config("n, input_len and output_len must be positive".into()));
        }
        if self.d == 0 || self.d_v == 0 || self.output_hidden == 0 {
            return Err(Error::Config("d, d_v and output_hidden must be positive".into()));
        }
        if self.steps_per_day == 0 || self.days_per_week == 0 {
            return Err(Error::Config("steps_per_day and days_per_week must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "input_len" | "l" => self.input_len = kv::value(key, raw)?,
            "output_len" | "l_out" => self.output_len = kv::value(key, raw)?,
            "q" => self.q = kv::value(key, raw)?,
            "d" => self.d = kv::value(key, raw)?,
            "d_tod" => self.d_tod = kv::value(key, raw)?,
            "d_dow" => self.d_dow = kv::value(key, raw)?,
            "d_v" => self.d_v = kv::value(key, raw)?,
            "heads" => self.heads = kv::value(key, raw)?,
            "temporal_layers" => self.temporal_layers = kv::value(key, raw)?,
            "spatial_layers" => self.spatial_layers = kv::value(key, raw)?,
            "ffn_hidden" => self.ffn_hidden = kv::value(key, raw)?,
            "output_hidden" => self.output_hidden = kv::value(key, raw)?,
            "residual_norm" => self.residual_norm = kv::flag(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `(key, value)` pairs accepted by [`ModelDims::set`], plus `n` and the
    /// calendar sizes.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("n", self.n.to_string()),
            ("input_len", self.input_len.to_string()),
            ("output_len", self.output_len.to_string()),
            ("q", self.q.to_string()),
            ("d", self.d.to_string()),
            ("d_tod", self.d_tod.to_string()),
            ("d_dow", self.d_dow.to_string()),
            ("d_v", self.d_v.to_string()),
            ("heads", self.heads.to_string()),
            ("temporal_layers", self.temporal_layers.to_string()),
            ("spatial_layers", self.spatial_layers.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("output_hidden", self.output_hidden.to_string()),
            ("residual_norm", self.residual_norm.to_string()),
            ("steps_per_day", self.steps_per_day.to_string()),
            ("days_per_week", self.days_per_week.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut dims = ModelDims::default();
        for (k, v) in pairs {
            match k.as_str() {
                "n" => dims.n = kv::value(k, v)?,
                "steps_per_day" => dims.steps_per_day = kv::value(k, v)?,
                "days_per_week" => dims.days_per_week = kv::value(k, v)?,
                _ => {
                    if !dims.set(k, v)? {
                        return Err(Error::Config(format!("unknown model key {k:?}")));
                    }
                }
            }
        }
        dims.validate()?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Embedding,
    Ones,
    Zeros,
}

pub(crate) fn layer_prefix(i: usize) -> String {
    format!("att{i}")
}

fn base_specs(dims: &ModelDims) -> Vec<(String, Vec<usize>, Init)> {
    let q = dims.q;
    let mut s = vec![
        ("input.w1".to_string(), vec![1, dims.d], Init::FanIn(1)),
        ("input.b1".to_string(), vec![dims.d], Init::FanIn(1)),
        ("input.w2".to_string(), vec![dims.d, dims.d], Init::FanIn(dims.d)),
        ("input.b2".to_string(), vec![dims.d], Init::FanIn(dims.d)),
        ("emb.tod".to_string(), vec![dims.steps_per_day, dims.d_tod], Init::Embedding),
        ("emb.dow".to_string(), vec![dims.days_per_week, dims.d_dow], Init::Embedding),
        ("emb.node".to_string(), vec![dims.n, dims.d_v], Init::Embedding),
    ];
    for i in 0..dims.layers() {
        let p = layer_prefix(i);
        for w in ["wq", "wk", "wv"] {
            s.push((format!("{p}.{w}"), vec![q, q], Init::FanIn(q)));
        }
        if dims.residual_norm {
            s.push((format!("{p}.ln1.g"), vec![q], Init::Ones));
            s.push((format!("{p}.ln1.b"), vec![q], Init::Zeros));
        }
        if dims.ffn_hidden > 0 {
            let h = dims.ffn_hidden;
            s.push((format!("{p}.ff.w1"), vec![q, h], Init::FanIn(q)));
            s.push((format!("{p}.ff.b1"), vec![h], Init::FanIn(q)));
            s.push((format!("{p}.ff.w2"), vec![h, q], Init::FanIn(h)));
            s.push((format!("{p}.ff.b2"), vec![q], Init::FanIn(h)));
            if dims.residual_norm {
                s.push((format!("{p}.ln2.g"), vec![q], Init::Ones));
                s.push((format!("{p}.ln2.b"), vec![q], Init::Zeros));
            }
        }
    }
    let flat = dims.input_len * q;
    let h = dims.output_hidden;
    s.push(("out.w1".to_string(), vec![flat, h], Init::FanIn(flat)));
    s.push(("out.b1".to_string(), vec![h], Init::FanIn(flat)));
    s.push(("out.w2".to_string(), vec![h, dims.output_len], Init::FanIn(h)));
    s.push(("out.b2".to_string(), vec![dims.output_len], Init::FanIn(h)));
    s
}

/// Parameters of the masked model that the base forecaster lacks: the
/// bridge projection, and the learned variable map used when extrapolation
/// is ablated.
pub fn vip_extra_specs(dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
    vec![
        ("bridge.fc".to_string(), vec![dims.d_v, dims.d_v]),
        ("extra.w".to_string(), vec![dims.n, dims.n]),
    ]
}

/// Named tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

fn draw(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    let numel = shape.iter().product();
    let data = match init {
        Init::FanIn(fan) => {
            let bound = 1.0 / (fan.max(1) as f64).sqrt();
            (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::Embedding => (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
        Init::Ones => vec![1.0; numel],
        Init::Zeros => vec![0.0; numel],
    };
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Base forecaster parameters, deterministic per seed.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ParamSet> {
    dims.validate()?;
    let mut rng = seed::rng(seed, seed::INIT);
    let mut set = ParamSet::new();
    for (name, shape, init) in base_specs(dims) {
        set.insert(name, draw(&shape, init, &mut rng));
    }
    Ok(set)
}

/// Adds the bridge and ablation parameters. Existing entries are kept, so
/// calling this on pretrained weights only creates the fresh ones.
pub fn init_vip_extras(params: &mut ParamSet, dims: &ModelDims, seed: u64) {
    let mut rng = seed::rng(seed, "init-bridge");
    for (name, shape) in vip_extra_specs(dims) {
        if !params.contains(&name) {
            let fan = shape[0];
            params.insert(name, draw(&shape, Init::FanIn(fan), &mut rng));
        }
    }
}

/// Checks that `params` holds exactly the base tensors for `dims`, with the
/// right shapes, plus optionally the masked-model extras.
pub fn check_params(params: &ParamSet, dims: &ModelDims) -> Result<()> {
    let mut expected: Vec<(String, Vec<usize>)> = base_specs(dims).into_iter().map(|(n, s, _)| (n, s)).collect();
    let extras = vip_extra_specs(dims);
    for (name, shape) in &extras {
        if params.contains(name) {
            expected.push((name.clone(), shape.clone()));
        }
    }
    if expected.len() != params.len() {
        return Err(Error::Contract(format!(
            "parameter set has {} tensors, dims need {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in expected {
        let t = params.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Contract(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Scalars needed to run the base forecaster.
pub fn stmf_param_count(dims: &ModelDims) -> usize {
    base_specs(dims).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Scalars needed to deploy the pruned model: query and key projections
/// keep only `q_kept` columns, the bridge projection and both importance
/// vectors are added, and the ablation map is not part of the full model.
pub fn pruned_param_count(dims: &ModelDims, q_kept: usize) -> usize {
    let pruned_per_layer = 2 * dims.q * (dims.q - q_kept.min(dims.q));
    stmf_param_count(dims) - dims.layers() * pruned_per_layer + dims.d_v * dims.d_v + dims.n + dims.q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelDims {
        ModelDims {
            n: 4,
            input_len: 4,
            output_len: 3,
            q: 16,
            d: 4,
            d_tod: 4,
            d_dow: 4,
            d_v: 4,
            temporal_layers: 1,
            spatial_layers: 1,
            ffn_hidden: 8,
            output_hidden: 8,
            steps_per_day: 10,
            ..ModelDims::default()
        }
    }

    #[test]
    fn default_widths_add_up() {
        let dims = ModelDims {
            n: 3,
            ..ModelDims::default()
        };
        dims.validate().unwrap();
        assert_eq!(dims.q, 152);
        assert_eq!(dims.head_dim(), 38);
        let bad = ModelDims { d_v: 81, ..dims };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let dims = small();
        let a = init_params(&dims, 5).unwrap();
        assert_eq!(a, init_params(&dims, 5).unwrap());
        assert_ne!(a, init_params(&dims, 6).unwrap());
        let w = a.get("att0.wq").unwrap();
        assert!(w.data().iter().all(|x| x.abs() <= 0.25));
        assert!(a.get("att1.ln1.g").unwrap().data().iter().all(|&x| x == 1.0));
        check_params(&a, &dims).unwrap();
        assert_eq!(a.count(), stmf_param_count(&dims));
    }

    #[test]
    fn extras_leave_existing_weights() {
        let dims = small();
        let mut p = init_params(&dims, 1).unwrap();
        let before = p.clone();
        init_vip_extras(&mut p, &dims, 1);
        assert_eq!(p.get("out.w1").unwrap(), before.get("out.w1").unwrap());
        assert_eq!(p.get("bridge.fc").unwrap().shape(), &[4, 4]);
        check_params(&p, &dims).unwrap();
    }

    #[test]
    fn dims_pairs_round_trip() {
        let dims = small();
        assert_eq!(ModelDims::from_pairs(&dims.to_pairs()).unwrap(), dims);
    }
}
