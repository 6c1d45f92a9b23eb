//! Losses, pretraining of the base forecaster, and the iterative
//! variable/parameter pruning loop with prioritized replay.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vip_tensor::{Graph, Tensor, Var};

use crate::data::{make_windows, normalize_adjacency, split, AdjacencyMatrix, Batch, NormStats, RawSeries, WindowSet};
use crate::error::{Error, Result};
use crate::metrics::HorizonMetrics;
use crate::model::{bind, check_params, forward_stmf, init_params, init_vip_extras, ModelDims, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::pruning::{mask_indices, random_reg_mask, select_top, MaskState, Schedule};
use crate::replay::{ReplayBuffer, ReplayPolicy, ReplaySample};
use crate::vip::{forward_vip, predict_vip, MaskVars, VipOptions};
use crate::{kv, seed};

pub const B_HAT: &str = "mask.b_hat";
pub const P_HAT: &str = "mask.p_hat";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablations {
    pub no_extra: bool,
    pub no_b_reg: bool,
    pub no_p_reg: bool,
    pub no_replay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub r_b: f64,
    pub r_p: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub r1_count: usize,
    pub r2_count: usize,
    pub alpha: f64,
    pub buffer_capacity: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_iteration: usize,
    /// Epochs of the last iteration; 0 means `epochs_per_iteration`.
    pub final_epochs: usize,
    /// Non-final iterations stop after this many epochs without a
    /// validation improvement; 0 never stops early.
    pub plateau_patience: usize,
    /// Budget of selected variables; 0 means `round(0.1 n)`, at least 1.
    pub target_m: usize,
    /// Retained attention dimensions; 0 means `q / 2`.
    pub target_q: usize,
    pub pretrained: bool,
    pub pretrain_epochs: usize,
    pub patience: usize,
    pub ablations: Ablations,
    pub replay_policy: ReplayPolicy,
    pub replay_per_batch: usize,
    pub reset_optimizer: bool,
    pub bridge_softmax: bool,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            r_b: 0.10,
            r_p: 0.05,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1.0,
            r1_count: 2,
            r2_count: 1,
            alpha: 0.6,
            buffer_capacity: 288 * 7,
            lr: 1e-3,
            batch_size: 64,
            epochs_per_iteration: 5,
            final_epochs: 0,
            plateau_patience: 2,
            target_m: 0,
            target_q: 0,
            pretrained: true,
            pretrain_epochs: 100,
            patience: 10,
            ablations: Ablations::default(),
            replay_policy: ReplayPolicy::Pvr,
            replay_per_batch: 1,
            reset_optimizer: false,
            bridge_softmax: false,
            train_stride: 1,
            eval_stride: 1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Applies one `key=value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "r_b" => self.r_b = kv::value(key, raw)?,
            "r_p" => self.r_p = kv::value(key, raw)?,
            "gamma1" => self.gamma1 = kv::value(key, raw)?,
            "gamma2" => self.gamma2 = kv::value(key, raw)?,
            "gamma3" => self.gamma3 = kv::value(key, raw)?,
            "r1_count" => self.r1_count = kv::value(key, raw)?,
            "r2_count" => self.r2_count = kv::value(key, raw)?,
            "alpha" => self.alpha = kv::value(key, raw)?,
            "buffer_capacity" => self.buffer_capacity = kv::value(key, raw)?,
            "lr" => self.lr = kv::value(key, raw)?,
            "batch_size" => self.batch_size = kv::value(key, raw)?,
            "epochs_per_iteration" => self.epochs_per_iteration = kv::value(key, raw)?,
            "final_epochs" => self.final_epochs = kv::value(key, raw)?,
            "plateau_patience" => self.plateau_patience = kv::value(key, raw)?,
            "target_m" => self.target_m = kv::value(key, raw)?,
            "target_q" => self.target_q = kv::value(key, raw)?,
            "pretrained" => self.pretrained = kv::flag(key, raw)?,
            "pretrain_epochs" => self.pretrain_epochs = kv::value(key, raw)?,
            "patience" => self.patience = kv::value(key, raw)?,
            "no_extra" => self.ablations.no_extra = kv::flag(key, raw)?,
            "no_b_reg" => self.ablations.no_b_reg = kv::flag(key, raw)?,
            "no_p_reg" => self.ablations.no_p_reg = kv::flag(key, raw)?,
            "no_replay" => self.ablations.no_replay = kv::flag(key, raw)?,
            "replay_policy" => self.replay_policy = raw.parse()?,
            "replay_per_batch" => self.replay_per_batch = kv::value(key, raw)?,
            "reset_optimizer" => self.reset_optimizer = kv::flag(key, raw)?,
            "bridge_softmax" => self.bridge_softmax = kv::flag(key, raw)?,
            "train_stride" => self.train_stride = kv::value(key, raw)?,
            "eval_stride" => self.eval_stride = kv::value(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let a = self.ablations;
        [
            ("r_b", self.r_b.to_string()),
            ("r_p", self.r_p.to_string()),
            ("gamma1", self.gamma1.to_string()),
            ("gamma2", self.gamma2.to_string()),
            ("gamma3", self.gamma3.to_string()),
            ("r1_count", self.r1_count.to_string()),
            ("r2_count", self.r2_count.to_string()),
            ("alpha", self.alpha.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs_per_iteration", self.epochs_per_iteration.to_string()),
            ("final_epochs", self.final_epochs.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("target_m", self.target_m.to_string()),
            ("target_q", self.target_q.to_string()),
            ("pretrained", self.pretrained.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("no_extra", a.no_extra.to_string()),
            ("no_b_reg", a.no_b_reg.to_string()),
            ("no_p_reg", a.no_p_reg.to_string()),
            ("no_replay", a.no_replay.to_string()),
            ("replay_policy", self.replay_policy.name().to_string()),
            ("replay_per_batch", self.replay_per_batch.to_string()),
            ("reset_optimizer", self.reset_optimizer.to_string()),
            ("bridge_softmax", self.bridge_softmax.to_string()),
            ("train_stride", self.train_stride.to_string()),
            ("eval_stride", self.eval_stride.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn budget(&self, n: usize) -> usize {
        if self.target_m > 0 {
            self.target_m
        } else {
            ((n as f64 * 0.1).round() as usize).max(1)
        }
    }

    pub fn kept_dims(&self, q: usize) -> usize {
        if self.target_q > 0 {
            self.target_q
        } else {
            (q / 2).max(1)
        }
    }

    pub fn vip_options(&self) -> VipOptions {
        VipOptions {
            no_extra: self.ablations.no_extra,
            bridge_softmax: self.bridge_softmax,
        }
    }

    fn validate(&self, n: usize, q: usize) -> Result<()> {
        let m = self.budget(n);
        if m >= n {
            return Err(Error::Config(format!("target_m={m} must be below n={n}")));
        }
        let qk = self.kept_dims(q);
        if qk > q {
            return Err(Error::Config(format!("target_q={qk} exceeds q={q}")));
        }
        if self.batch_size == 0 || self.epochs_per_iteration == 0 {
            return Err(Error::Config("batch_size and epochs_per_iteration must be positive".into()));
        }
        if self.r1_count > n || self.r2_count > q {
            return Err(Error::Config("regularizer mask sizes exceed the vector lengths".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be finite and nonnegative".into()));
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("window strides must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized windows for every split, plus what is needed to map back.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub stats: NormStats,
    pub adjacency: AdjacencyMatrix,
    pub a_norm: Tensor,
    /// Training split in original units.
    pub raw_train: RawSeries,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn prepare(
        series: &RawSeries,
        adjacency: &AdjacencyMatrix,
        ratios: [f64; 3],
        input_len: usize,
        output_len: usize,
        train_stride: usize,
        eval_stride: usize,
    ) -> Result<Self> {
        if adjacency.n() != series.n() {
            return Err(Error::Config(format!(
                "adjacency has {} nodes, series has {}",
                adjacency.n(),
                series.n()
            )));
        }
        let (train, val, test) = split(series, ratios, input_len + output_len)?;
        let stats = NormStats::fit(&train)?;
        Ok(Dataset {
            train: make_windows(&stats.apply_series(&train), input_len, output_len, train_stride)?,
            val: make_windows(&stats.apply_series(&val), input_len, output_len, eval_stride)?,
            test: make_windows(&stats.apply_series(&test), input_len, output_len, eval_stride)?,
            stats,
            adjacency: adjacency.clone(),
            a_norm: normalize_adjacency(adjacency),
            raw_train: train,
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    pub fn dims(&self, base: &ModelDims) -> ModelDims {
        ModelDims {
            n: self.n(),
            input_len: self.train.input_len,
            output_len: self.train.output_len,
            steps_per_day: self.train.series().steps_per_day(),
            ..base.clone()
        }
    }
}

/// Mean absolute error over all entries.
pub fn main_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    Ok(g.mae(pred, target)?)
}

/// `main + g1 * replay + g2 * |b_hat[r1]|_1 + g3 * |p_hat[r2]|_1`. Empty
/// index lists drop their term.
#[allow(clippy::too_many_arguments)]
pub fn sum_loss(
    g: &mut Graph,
    main: Var,
    replay: Option<Var>,
    b_hat: Var,
    p_hat: Var,
    r1: &[usize],
    r2: &[usize],
    gammas: [f64; 3],
) -> Result<Var> {
    let mut total = main;
    if let Some(r) = replay {
        let t = g.scale(r, gammas[0])?;
        total = g.add(total, t)?;
    }
    for (v, idx, gamma) in [(b_hat, r1, gammas[1]), (p_hat, r2, gammas[2])] {
        if idx.is_empty() || gamma == 0.0 {
            continue;
        }
        let sel = g.gather(v, 0, idx)?;
        let l1 = g.l1(sel)?;
        let t = g.scale(l1, gamma)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

fn batches(len: usize, batch_size: usize, order: &[usize]) -> Vec<Vec<usize>> {
    debug_assert_eq!(order.len(), len);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Forecasts every window of `set` with `f` and returns `(forecast, truth)`
/// as `W x n x l'` tensors in normalized units.
pub fn forecast_windows(
    set: &WindowSet,
    batch_size: usize,
    mut f: impl FnMut(&Batch) -> Result<Tensor>,
) -> Result<(Tensor, Tensor)> {
    if set.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk);
        let out = f(&batch)?;
        pred.extend_from_slice(out.data());
        truth.extend_from_slice(batch.x_out.data());
    }
    let shape = vec![set.len(), set.n(), set.output_len];
    Ok((Tensor::new(shape.clone(), pred)?, Tensor::new(shape, truth)?))
}

/// Horizon metrics in original units.
pub fn evaluate(
    set: &WindowSet,
    stats: &NormStats,
    mape_eps: f64,
    f: impl FnMut(&Batch) -> Result<Tensor>,
) -> Result<HorizonMetrics> {
    let (pred, truth) = forecast_windows(set, 64, f)?;
    HorizonMetrics::compute(&stats.invert_tensor(&pred), &stats.invert_tensor(&truth), mape_eps)
}

fn normalized_mae(set: &WindowSet, f: impl FnMut(&Batch) -> Result<Tensor>) -> Result<f64> {
    let (pred, truth) = forecast_windows(set, 64, f)?;
    Ok(pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.numel() as f64)
}

/// Base forecaster with the inputs of variables outside `selected` zeroed.
pub fn predict_stmf_masked(params: &ParamSet, dims: &ModelDims, batch: &Batch, selected: Option<&[usize]>) -> Result<Tensor> {
    match selected {
        None => crate::model::predict_stmf(params, dims, batch),
        Some(sel) => {
            let mut b = batch.clone();
            let keep = crate::pruning::indices_mask(dims.n, sel);
            let l = dims.input_len;
            for (k, v) in b.x_in.data_mut().iter_mut().enumerate() {
                if !keep[(k / l) % dims.n] {
                    *v = 0.0;
                }
            }
            crate::model::predict_stmf(params, dims, &b)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Normalized units.
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epochs: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

fn apply_grads(
    opt: &mut Adam,
    params: &mut ParamSet,
    bound: &crate::model::Bound,
    grads: &mut vip_tensor::Gradients,
) -> Result<()> {
    for (name, &var) in bound.iter() {
        if let Some(gr) = grads.take(var) {
            opt.step(name, params.get_mut(name)?, &gr)?;
        }
    }
    Ok(())
}

/// Trains the base forecaster on every variable and returns the parameters
/// of the epoch with the lowest validation MAE. Stops once `patience`
/// epochs pass without improvement.
pub fn pretrain(
    data: &Dataset,
    dims: &ModelDims,
    init: ParamSet,
    cfg: &TrainingConfig,
) -> Result<(ParamSet, PretrainRecord)> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("pretraining needs training and validation windows".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    check_params(&init, dims)?;
    let mut params = init;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = seed::rng(cfg.seed, "pretrain-shuffle");
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut since_best = 0;
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.pretrain_epochs.max(1) {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in batches(order.len(), cfg.batch_size, &order) {
            let batch = data.train.batch(&idx);
            let mut g = Graph::new();
            let bound = bind(&mut g, &params, true);
            let pred = forward_stmf(&mut g, &bound, dims, &batch)?;
            let target = g.constant(batch.x_out.clone());
            let loss = main_loss(&mut g, pred, target)?;
            total += g.value(loss).item() * idx.len() as f64;
            count += idx.len();
            let mut grads = g.backward(loss)?;
            apply_grads(&mut opt, &mut params, &bound, &mut grads)?;
        }
        let val_mae = normalized_mae(&data.val, |b| crate::model::predict_stmf(&params, dims, b))?;
        epochs.push(PretrainEpoch {
            epoch,
            train_loss: total / count as f64,
            val_mae,
        });
        if val_mae < best.0 {
            best = (val_mae, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    let (best_val_mae, best_params, best_epoch) = best;
    Ok((
        best_params,
        PretrainRecord {
            epochs,
            best_epoch,
            best_val_mae,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub main_loss: f64,
    pub replay_loss: Option<f64>,
    pub total_loss: f64,
    /// Original units, all variables.
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// The geometric retention law at `k`.
    pub scheduled_b: usize,
    pub scheduled_p: usize,
    /// Sizes of the masks finalized at the end of the iteration.
    pub retained_b: usize,
    pub retained_p: usize,
    pub epochs: Vec<EpochRecord>,
    /// Variable mask of every training batch, as `0`/`1` strings.
    pub batch_masks: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainRecord {
    pub iterations: Vec<IterationRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub seconds: f64,
}

pub fn mask_string(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn parse_mask(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::Contract(format!("bad mask character {c:?}"))),
        })
        .collect()
}

impl TrainRecord {
    /// Per-iteration groups of batch masks.
    pub fn mask_groups(&self) -> Result<Vec<Vec<Vec<bool>>>> {
        self.iterations
            .iter()
            .map(|it| it.batch_masks.iter().map(|s| parse_mask(s)).collect())
            .collect()
    }
}

/// State handed to the per-iteration callback.
pub struct IterationSnapshot<'a> {
    pub k: usize,
    pub params: &'a ParamSet,
    pub state: &'a MaskState,
    pub record: &'a IterationRecord,
}

/// Called after every pruning iteration; an error aborts training.
pub type IterationCallback<'a> = dyn FnMut(&IterationSnapshot<'_>) -> Result<()> + 'a;

#[derive(Debug, Clone)]
pub struct VipOutcome {
    pub params: ParamSet,
    pub state: MaskState,
    pub record: TrainRecord,
    pub options: VipOptions,
}

impl VipOutcome {
    pub fn predict(&self, dims: &ModelDims, a_norm: &Tensor, batch: &Batch) -> Result<Tensor> {
        predict_vip(&self.params, dims, a_norm, &self.state, batch, self.options)
    }
}

fn window_losses(pred: &Tensor, target: &Tensor) -> Vec<f64> {
    let b = pred.shape()[0];
    let per = pred.numel() / b.max(1);
    pred.data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / per as f64)
        .collect()
}

fn window_of(batch: &Batch, w: usize, n: usize, l: usize, lo: usize) -> (Tensor, Tensor, Vec<usize>, Vec<usize>) {
    let x_in = Tensor::new(vec![1, n, l], batch.x_in.data()[w * n * l..(w + 1) * n * l].to_vec()).expect("window");
    let x_out = Tensor::new(vec![1, n, lo], batch.x_out.data()[w * n * lo..(w + 1) * n * lo].to_vec()).expect("window");
    (x_in, x_out, batch.tod[w * l..(w + 1) * l].to_vec(), batch.dow[w * l..(w + 1) * l].to_vec())
}

fn val_mae_orig(data: &Dataset, dims: &ModelDims, params: &ParamSet, state: &MaskState, opts: VipOptions) -> Result<f64> {
    let mae = normalized_mae(&data.val, |b| predict_vip(params, dims, &data.a_norm, state, b, opts))?;
    Ok(mae * data.stats.std)
}

/// Runs every pruning iteration until both masks reach their targets and
/// returns the best-validation state of the last iteration.
///
/// `init` supplies pretrained base weights; without it the weights are
/// freshly initialized. `pinned` variables are never pruned.
pub fn train_vip(
    data: &Dataset,
    dims: &ModelDims,
    init: Option<ParamSet>,
    pinned: &[usize],
    cfg: &TrainingConfig,
    mut on_iteration: Option<&mut IterationCallback<'_>>,
) -> Result<VipOutcome> {
    let started = Instant::now();
    let (n, q) = (dims.n, dims.q);
    cfg.validate(n, q)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs training and validation windows".into()));
    }
    let m = cfg.budget(n);
    if pinned.len() > m {
        return Err(Error::Budget(format!("{} pinned variables exceed the budget of {m}", pinned.len())));
    }
    let mut params = match init {
        Some(p) => {
            check_params(&p, dims)?;
            p
        }
        None => init_params(dims, cfg.seed)?,
    };
    init_vip_extras(&mut params, dims, cfg.seed);
    let opts = cfg.vip_options();
    let mut state = MaskState::new(&data.a_norm, q, pinned.to_vec(), cfg.seed)?;
    let sched_b = Schedule::new(n, cfg.r_b, m)?;
    let sched_p = Schedule::new(q, cfg.r_p, cfg.kept_dims(q))?;
    let iterations = sched_b.iterations().max(sched_p.iterations()).max(1);

    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity.max(1), cfg.alpha, cfg.replay_policy)?;
    let mut shuffle_rng = seed::rng(cfg.seed, seed::SHUFFLE);
    let mut replay_rng = seed::rng(cfg.seed, seed::REPLAY);
    let mut reg_rng = seed::rng(cfg.seed, seed::REG_MASKS);
    let gammas = [
        cfg.gamma1,
        if cfg.ablations.no_b_reg { 0.0 } else { cfg.gamma2 },
        if cfg.ablations.no_p_reg { 0.0 } else { cfg.gamma3 },
    ];
    let (l, lo) = (dims.input_len, dims.output_len);

    let mut record = TrainRecord::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut prev_b = vec![true; n];
    let mut prev_p = vec![true; q];

    for k in 1..=iterations {
        let it_start = Instant::now();
        let (mb, mp) = (sched_b.count(k), sched_p.count(k));
        let last = k == iterations;
        if cfg.reset_optimizer && k > 1 {
            opt.reset();
        }
        let epochs = if last && cfg.final_epochs > 0 {
            cfg.final_epochs
        } else {
            cfg.epochs_per_iteration
        };
        let mut it_rec = IterationRecord {
            k,
            scheduled_b: sched_b.scheduled(k),
            scheduled_p: sched_p.scheduled(k),
            retained_b: 0,
            retained_p: 0,
            epochs: Vec::new(),
            batch_masks: Vec::new(),
            seconds: 0.0,
        };
        let mut best: Option<(f64, ParamSet, MaskState, usize)> = None;
        let mut it_best = f64::INFINITY;
        let mut since_best = 0;

        for epoch in 1..=epochs {
            order.shuffle(&mut shuffle_rng);
            let (mut main_sum, mut replay_sum, mut total_sum) = (0.0, 0.0, 0.0);
            let (mut nb, mut nr) = (0usize, 0usize);
            for idx in batches(order.len(), cfg.batch_size, &order) {
                let batch = data.train.batch(&idx);
                let (b, p) = state.masks_for(&prev_b, &prev_p, mb, mp)?;
                let selected = mask_indices(&b);
                let kept = mask_indices(&p);
                it_rec.batch_masks.push(mask_string(&b));

                let mut g = Graph::new();
                let mut bound = bind(&mut g, &params, true);
                let b_hat = g.leaf(state.b_hat.clone());
                let p_hat = g.leaf(state.p_hat.clone());
                bound.insert(B_HAT, b_hat);
                bound.insert(P_HAT, p_hat);
                let mv = MaskVars {
                    selected: &selected,
                    kept: &kept,
                    b_hat,
                    p_hat,
                };
                let pred = forward_vip(&mut g, &bound, dims, &data.a_norm, &batch.x_in, &batch.tod, &batch.dow, mv, opts)?;
                let target = g.constant(batch.x_out.clone());
                let main = main_loss(&mut g, pred, target)?;
                let losses = window_losses(g.value(pred), &batch.x_out);

                let mut replay = None;
                if !cfg.ablations.no_replay && cfg.gamma1 != 0.0 {
                    let mut terms = Vec::new();
                    for _ in 0..cfg.replay_per_batch {
                        let Some(s) = buffer.sample_for_replay(&mut replay_rng) else {
                            break;
                        };
                        let rb = select_top(s.b_hat.data(), &prev_b, mb, &state.pinned)?;
                        let rp = select_top(s.p_hat.data(), &prev_p, mp, &[])?;
                        let (rsel, rkept) = (mask_indices(&rb), mask_indices(&rp));
                        let (x_in, x_out) = (s.x_in.clone(), s.x_out.clone());
                        let (tod, dow) = (s.tod.clone(), s.dow.clone());
                        let rmv = MaskVars {
                            selected: &rsel,
                            kept: &rkept,
                            b_hat,
                            p_hat,
                        };
                        let rpred = forward_vip(&mut g, &bound, dims, &data.a_norm, &x_in, &tod, &dow, rmv, opts)?;
                        let rt = g.constant(x_out);
                        terms.push(main_loss(&mut g, rpred, rt)?);
                    }
                    if !terms.is_empty() {
                        let mut acc = terms[0];
                        for &t in &terms[1..] {
                            acc = g.add(acc, t)?;
                        }
                        replay = Some(g.scale(acc, 1.0 / terms.len() as f64)?);
                    }
                }

                let r1 = mask_indices(&random_reg_mask(n, cfg.r1_count, &mut reg_rng)?);
                let r2 = mask_indices(&random_reg_mask(q, cfg.r2_count, &mut reg_rng)?);
                let total = sum_loss(&mut g, main, replay, b_hat, p_hat, &r1, &r2, gammas)?;

                main_sum += g.value(main).item();
                if let Some(r) = replay {
                    replay_sum += g.value(r).item();
                    nr += 1;
                }
                total_sum += g.value(total).item();
                nb += 1;

                let mut grads = g.backward(total)?;
                for (name, &var) in bound.iter() {
                    let Some(gr) = grads.take(var) else { continue };
                    match name.as_str() {
                        B_HAT => opt.step(name, &mut state.b_hat, &gr)?,
                        P_HAT => opt.step(name, &mut state.p_hat, &gr)?,
                        _ => opt.step(name, params.get_mut(name)?, &gr)?,
                    }
                }

                for (w, &loss) in losses.iter().enumerate() {
                    let (x_in, x_out, tod, dow) = window_of(&batch, w, n, l, lo);
                    let sample = ReplaySample {
                        x_in,
                        x_out,
                        tod,
                        dow,
                        b_hat: state.b_hat.clone(),
                        p_hat: state.p_hat.clone(),
                        priority: buffer.priority(loss),
                    };
                    buffer.push(sample, &mut replay_rng);
                }
            }

            let val = {
                let (b, p) = state.masks_for(&prev_b, &prev_p, mb, mp)?;
                let probe = MaskState {
                    b,
                    p,
                    ..state.clone()
                };
                let v = val_mae_orig(data, dims, &params, &probe, opts)?;
                if last && best.as_ref().is_none_or(|(bv, ..)| v < *bv) {
                    best = Some((v, params.clone(), probe, epoch));
                }
                v
            };
            it_rec.epochs.push(EpochRecord {
                epoch,
                main_loss: main_sum / nb.max(1) as f64,
                replay_loss: (nr > 0).then(|| replay_sum / nr as f64),
                total_loss: total_sum / nb.max(1) as f64,
                val_mae: val,
            });
            if val < it_best {
                it_best = val;
                since_best = 0;
            } else {
                since_best += 1;
                if !last && cfg.plateau_patience > 0 && since_best >= cfg.plateau_patience {
                    break;
                }
            }
        }

        if let Some((v, p, s, epoch)) = best.take() {
            params = p;
            state = s;
            record.best_val_mae = v;
            record.best_epoch = epoch;
        } else {
            let (b, p) = state.masks_for(&prev_b, &prev_p, mb, mp)?;
            state.b = b;
            state.p = p;
        }
        prev_b = state.b.clone();
        prev_p = state.p.clone();
        it_rec.retained_b = prev_b.iter().filter(|&&x| x).count();
        it_rec.retained_p = prev_p.iter().filter(|&&x| x).count();
        it_rec.seconds = it_start.elapsed().as_secs_f64();
        if let Some(cb) = on_iteration.as_mut() {
            cb(&IterationSnapshot {
                k,
                params: &params,
                state: &state,
                record: &it_rec,
            })?;
        }
        record.iterations.push(it_rec);
    }
    record.seconds = started.elapsed().as_secs_f64();
    Ok(VipOutcome {
        params,
        state,
        record,
        options: opts,
    })
}
