//! The subcommands. Each writes its outputs under `out_dir` and overwrites
//! earlier results, so a rerun with the same configuration reproduces them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vip_core::baselines::{select_grid, select_max_connectivity, select_max_value, select_random, SelectionResult};
use vip_core::checkpoint::Checkpoint;
use vip_core::data::io::{load_coords, load_dataset, save_adjacency, save_series};
use vip_core::data::synth::{synth_generate, SynthData};
use vip_core::data::{Batch, WindowSet};
use vip_core::kv;
use vip_core::metrics::{jaccard_distance, HorizonMetrics};
use vip_core::model::{init_params, pruned_param_count, stmf_param_count, ModelDims, ParamSet};
use vip_core::pruning::{indices_mask, MaskState};
use vip_core::training::{self, mask_string, parse_mask, Dataset, IterationSnapshot, TrainRecord, B_HAT, P_HAT};
use vip_core::vip::{predict_vip, VipOptions};
use vip_core::{seed, Error, Result};
use vip_tensor::Tensor;

use crate::config::{require_file, RunConfig};
use crate::files::{self, Summary};

/// A loaded forecaster.
#[derive(Debug, Clone)]
pub enum Model {
    Stmf(ParamSet),
    Vip {
        params: ParamSet,
        state: MaskState,
        options: VipOptions,
    },
}

impl Model {
    /// Forecasts in normalized units. The base forecaster sees zeros for
    /// variables outside `selection`; the masked model ignores it.
    pub fn predict(&self, dims: &ModelDims, a_norm: &Tensor, batch: &Batch, selection: Option<&[usize]>) -> Result<Tensor> {
        match self {
            Model::Stmf(p) => training::predict_stmf_masked(p, dims, batch, selection),
            Model::Vip { params, state, options } => predict_vip(params, dims, a_norm, state, batch, *options),
        }
    }

    /// Scalars the deployed model needs.
    pub fn param_count(&self, dims: &ModelDims) -> usize {
        match self {
            Model::Stmf(_) => stmf_param_count(dims),
            Model::Vip { state, options, .. } => {
                let count = pruned_param_count(dims, state.kept_dims().len());
                if options.no_extra {
                    count - dims.d_v * dims.d_v + dims.n * dims.n
                } else {
                    count
                }
            }
        }
    }
}

fn dims_meta(dims: &ModelDims) -> Vec<(String, String)> {
    dims.to_pairs().into_iter().map(|(k, v)| (format!("dims.{k}"), v)).collect()
}

pub fn stmf_checkpoint(dims: &ModelDims, params: &ParamSet) -> Checkpoint {
    let mut meta = vec![("kind".to_string(), "stmf".to_string())];
    meta.extend(dims_meta(dims));
    Checkpoint {
        meta,
        params: params.clone(),
    }
}

pub fn vip_checkpoint(dims: &ModelDims, params: &ParamSet, state: &MaskState, options: VipOptions) -> Checkpoint {
    let mut meta = vec![("kind".to_string(), "vip".to_string())];
    meta.extend(dims_meta(dims));
    let pinned: Vec<String> = state.pinned.iter().map(usize::to_string).collect();
    meta.extend([
        ("mask.b".to_string(), mask_string(&state.b)),
        ("mask.p".to_string(), mask_string(&state.p)),
        ("pinned".to_string(), pinned.join(" ")),
        ("no_extra".to_string(), options.no_extra.to_string()),
        ("bridge_softmax".to_string(), options.bridge_softmax.to_string()),
    ]);
    let mut params = params.clone();
    params.insert(B_HAT, state.b_hat.clone());
    params.insert(P_HAT, state.p_hat.clone());
    Checkpoint { meta, params }
}

pub fn load_model(path: &Path) -> Result<(ModelDims, Model)> {
    require_file(path)?;
    let ck = Checkpoint::load(path)?;
    let bad = |msg: String| Error::parse(path, 0, msg);
    let pairs: Vec<(String, String)> = ck
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("dims.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let dims = ModelDims::from_pairs(&pairs).map_err(|e| bad(e.to_string()))?;
    let meta = |key: &str| ck.meta_value(key).ok_or_else(|| bad(format!("checkpoint lacks {key}")));
    match meta("kind")? {
        "stmf" => {
            vip_core::model::check_params(&ck.params, &dims).map_err(|e| bad(e.to_string()))?;
            Ok((dims, Model::Stmf(ck.params)))
        }
        "vip" => {
            let mut params = ck.params.clone();
            let b_hat = params.remove(B_HAT).ok_or_else(|| bad("checkpoint lacks b_hat".into()))?;
            let p_hat = params.remove(P_HAT).ok_or_else(|| bad("checkpoint lacks p_hat".into()))?;
            vip_core::model::check_params(&params, &dims).map_err(|e| bad(e.to_string()))?;
            let pinned = meta("pinned")?
                .split_whitespace()
                .map(|s| kv::value("pinned", s))
                .collect::<Result<Vec<usize>>>()?;
            let state = MaskState {
                b: parse_mask(meta("mask.b")?)?,
                p: parse_mask(meta("mask.p")?)?,
                b_hat,
                p_hat,
                pinned,
            };
            if state.b.len() != dims.n || state.p.len() != dims.q {
                return Err(bad("mask lengths do not match the model".into()));
            }
            let options = VipOptions {
                no_extra: kv::flag("no_extra", meta("no_extra")?)?,
                bridge_softmax: kv::flag("bridge_softmax", meta("bridge_softmax")?)?,
            };
            Ok((dims, Model::Vip { params, state, options }))
        }
        other => Err(bad(format!("unknown checkpoint kind {other:?}"))),
    }
}

fn prepare(cfg: &RunConfig, input_len: usize, output_len: usize) -> Result<Dataset> {
    let (values, adjacency) = cfg.dataset_paths()?;
    let (series, adj) = load_dataset(&values, &adjacency)?;
    let t = &cfg.training;
    Dataset::prepare(&series, &adj, cfg.ratios(), input_len, output_len, t.train_stride, t.eval_stride)
}

/// Checkpoint dimensions must fit the data they are applied to.
fn check_fits(ck_dims: &ModelDims, data_dims: &ModelDims) -> Result<()> {
    if ck_dims != data_dims {
        return Err(Error::Config(format!(
            "checkpoint model (n={}, steps_per_day={}) does not fit the dataset (n={}, steps_per_day={})",
            ck_dims.n, ck_dims.steps_per_day, data_dims.n, data_dims.steps_per_day
        )));
    }
    Ok(())
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn snapshot_config(cfg: &RunConfig) -> Result<()> {
    files::write(&out(cfg, "config.txt"), &cfg.to_text())
}

/// Metrics in original units and the forecast time per window.
pub fn evaluate_on(
    data: &Dataset,
    set: &WindowSet,
    dims: &ModelDims,
    model: &Model,
    selection: Option<&[usize]>,
    mape_eps: f64,
) -> Result<(HorizonMetrics, f64)> {
    let started = Instant::now();
    let metrics = training::evaluate(set, &data.stats, mape_eps, |b| model.predict(dims, &data.a_norm, b, selection))?;
    let ms = started.elapsed().as_secs_f64() * 1e3 / set.len() as f64;
    Ok((metrics, ms))
}

fn jaccard_of(record: &TrainRecord) -> Result<Option<f64>> {
    let groups: Vec<_> = record.mask_groups()?.into_iter().filter(|g| g.len() >= 2).collect();
    if groups.is_empty() {
        Ok(None)
    } else {
        jaccard_distance(&groups).map(Some)
    }
}

pub fn synth(cfg: &RunConfig) -> Result<SynthData> {
    let data = synth_generate(&cfg.synth, cfg.training.seed)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    save_series(&data.series, &out(cfg, "values.csv"))?;
    save_adjacency(&data.adjacency, &out(cfg, "adjacency.csv"))?;
    files::write(&out(cfg, "drivers.csv"), &files::selection_text("drivers", &data.drivers, None))?;
    println!(
        "synth: n={} T={} drivers={:?} edges={} -> {}",
        data.series.n(),
        data.series.len(),
        data.drivers,
        data.adjacency.edges().len(),
        cfg.out_dir.display()
    );
    Ok(data)
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let resumed = if cfg.resume {
        let path = cfg
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("resume needs a checkpoint".into()))?;
        match load_model(path)? {
            (dims, Model::Stmf(p)) => Some((dims, p)),
            _ => return Err(Error::Config(format!("{} is not a base-model checkpoint", path.display()))),
        }
    } else {
        None
    };
    let base = resumed.as_ref().map_or(&cfg.model, |(d, _)| d);
    let data = prepare(cfg, base.input_len, base.output_len)?;
    let dims = data.dims(base);
    dims.validate()?;
    let init = match resumed {
        Some((ck_dims, p)) => {
            check_fits(&ck_dims, &dims)?;
            p
        }
        None => init_params(&dims, cfg.training.seed)?,
    };
    snapshot_config(cfg)?;
    let (params, record) = training::pretrain(&data, &dims, init, &cfg.training)?;
    stmf_checkpoint(&dims, &params).save(&out(cfg, "pretrain.ckpt"))?;
    let mut csv = String::from("epoch,train_loss,val_mae_normalized\n");
    for e in &record.epochs {
        csv.push_str(&format!("{},{:?},{:?}\n", e.epoch, e.train_loss, e.val_mae));
    }
    files::write(&out(cfg, "pretrain_epochs.csv"), &csv)?;
    let model = Model::Stmf(params);
    let (val, _) = evaluate_on(&data, &data.val, &dims, &model, None, cfg.mape_eps)?;
    files::write(&out(cfg, "metrics_val.csv"), &val.to_csv())?;
    println!(
        "pretrain: {} epochs, best epoch {} (normalized val MAE {:.4}), val MAE {:.4} RMSE {:.4}",
        record.epochs.len(),
        record.best_epoch,
        record.best_val_mae,
        val.average.mae,
        val.average.rmse
    );
    Ok(())
}

fn vip_label(cfg: &RunConfig, pinned: &[usize]) -> String {
    if let Some(l) = &cfg.label {
        return l.clone();
    }
    let a = cfg.training.ablations;
    let mut label = String::from(if pinned.is_empty() { "vip" } else { "vip-pinned" });
    for (on, tag) in [
        (a.no_extra, "no-extra"),
        (a.no_b_reg, "no-b-reg"),
        (a.no_p_reg, "no-p-reg"),
        (a.no_replay, "no-replay"),
    ] {
        if on {
            label.push('-');
            label.push_str(tag);
        }
    }
    label
}

pub fn train_vip(cfg: &RunConfig) -> Result<Summary> {
    let t = &cfg.training;
    let pretrained = if t.pretrained {
        let path = cfg
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("pretrained=true needs a checkpoint".into()))?;
        match load_model(path)? {
            (dims, Model::Stmf(p)) => Some((dims, p)),
            _ => return Err(Error::Config(format!("{} is not a base-model checkpoint", path.display()))),
        }
    } else {
        None
    };
    let base = pretrained.as_ref().map_or(&cfg.model, |(d, _)| d);
    let data = prepare(cfg, base.input_len, base.output_len)?;
    let dims = data.dims(base);
    dims.validate()?;
    let init = match pretrained {
        Some((ck_dims, p)) => {
            check_fits(&ck_dims, &dims)?;
            Some(p)
        }
        None => None,
    };
    let pinned = match &cfg.pinned {
        Some(p) => files::read_selection(p, dims.n)?,
        None => Vec::new(),
    };
    snapshot_config(cfg)?;

    let ck_dir = out(cfg, "checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let options = t.vip_options();
    let mut save_iteration = |snap: &IterationSnapshot<'_>| -> Result<()> {
        vip_checkpoint(&dims, snap.params, snap.state, options).save(&ck_dir.join(format!("iter_{:03}.ckpt", snap.k)))
    };
    let outcome = training::train_vip(&data, &dims, init, &pinned, t, Some(&mut save_iteration))?;

    files::write(&out(cfg, "record.jsonl"), &files::record_jsonl(&outcome.record)?)?;
    vip_checkpoint(&dims, &outcome.params, &outcome.state, options).save(&out(cfg, "final.ckpt"))?;
    let label = vip_label(cfg, &pinned);
    let selected = outcome.state.selected();
    files::write(
        &out(cfg, "selection.csv"),
        &files::selection_text(&label, &selected, Some(outcome.state.b_hat.data())),
    )?;

    let model = Model::Vip {
        params: outcome.params,
        state: outcome.state,
        options,
    };
    let (val, _) = evaluate_on(&data, &data.val, &dims, &model, None, cfg.mape_eps)?;
    files::write(&out(cfg, "metrics_val.csv"), &val.to_csv())?;
    let (test, ms) = evaluate_on(&data, &data.test, &dims, &model, None, cfg.mape_eps)?;
    files::write(&out(cfg, "metrics_test.csv"), &test.to_csv())?;
    let Model::Vip { state, .. } = &model else { unreachable!() };
    let summary = Summary {
        method: label,
        seed: t.seed,
        n: dims.n,
        m: selected.len(),
        q: dims.q,
        q_kept: state.kept_dims().len(),
        split: "test".into(),
        selected,
        mae: test.average.mae,
        rmse: test.average.rmse,
        mape_pct: test.average.mape_pct,
        params: model.param_count(&dims),
        inference_ms_per_window: ms,
        jaccard_distance: jaccard_of(&outcome.record)?,
    };
    files::write_summary(&out(cfg, "summary.json"), &summary)?;
    println!(
        "train-vip: {} iterations, selected {:?}, test MAE {:.4} RMSE {:.4}",
        outcome.record.iterations.len(),
        summary.selected,
        summary.mae,
        summary.rmse
    );
    Ok(summary)
}

pub fn select(cfg: &RunConfig) -> Result<SelectionResult> {
    let method = cfg
        .method
        .as_deref()
        .ok_or_else(|| Error::Config("select needs --method (max-value, max-connectivity, grid, random)".into()))?;
    let data = prepare(cfg, cfg.model.input_len, cfg.model.output_len)?;
    let n = data.n();
    let m = cfg.training.budget(n);
    let result = match method {
        "max-value" => select_max_value(&data.raw_train, m)?,
        "max-connectivity" => select_max_connectivity(&data.adjacency, m)?,
        "grid" => {
            let coords = cfg.coords_path()?.map(|p| load_coords(&p, n)).transpose()?;
            select_grid(coords.as_deref(), &data.adjacency, m)?
        }
        "random" => select_random(n, m, &mut seed::rng(cfg.training.seed, seed::SELECT))?,
        other => return Err(Error::Config(format!("unknown selection method {other:?}"))),
    };
    let text = files::selection_text(&result.method, &result.indices, result.scores.as_deref());
    files::write(&out(cfg, "selection.csv"), &text)?;
    println!("select: {} picked {:?}", result.method, result.indices);
    Ok(result)
}

pub fn evaluate(cfg: &RunConfig) -> Result<Summary> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate needs --checkpoint".into()))?;
    let (ck_dims, model) = load_model(path)?;
    let data = prepare(cfg, ck_dims.input_len, ck_dims.output_len)?;
    let dims = data.dims(&ck_dims);
    check_fits(&ck_dims, &dims)?;
    let selection = cfg.selection.as_ref().map(|p| files::read_selection(p, dims.n)).transpose()?;
    let (selected, q_kept, default_label) = match &model {
        Model::Stmf(_) => {
            let sel = selection.clone().unwrap_or_else(|| (0..dims.n).collect());
            let label = if selection.is_some() { "stmf-selected" } else { "stmf" };
            (sel, dims.q, label)
        }
        Model::Vip { state, .. } => {
            if let Some(sel) = &selection {
                if indices_mask(dims.n, sel) != state.b {
                    return Err(Error::Config("selection differs from the checkpoint's variable mask".into()));
                }
            }
            (state.selected(), state.kept_dims().len(), "vip")
        }
    };
    let set = if cfg.split == "val" { &data.val } else { &data.test };
    let (metrics, ms) = evaluate_on(&data, set, &dims, &model, selection.as_deref(), cfg.mape_eps)?;
    files::write(&out(cfg, &format!("metrics_{}.csv", cfg.split)), &metrics.to_csv())?;
    let record = path.parent().map(|d| d.join("record.jsonl")).filter(|p| p.is_file());
    let jaccard = match record {
        Some(p) => jaccard_of(&files::read_record(&p)?)?,
        None => None,
    };
    let summary = Summary {
        method: cfg.label.clone().unwrap_or_else(|| default_label.to_string()),
        seed: cfg.training.seed,
        n: dims.n,
        m: selected.len(),
        q: dims.q,
        q_kept,
        split: cfg.split.clone(),
        selected,
        mae: metrics.average.mae,
        rmse: metrics.average.rmse,
        mape_pct: metrics.average.mape_pct,
        params: model.param_count(&dims),
        inference_ms_per_window: ms,
        jaccard_distance: jaccard,
    };
    files::write_summary(&out(cfg, "summary.json"), &summary)?;
    println!(
        "evaluate: {} on {} split, MAE {:.4} RMSE {:.4}, {} params, {:.3} ms/window",
        summary.method, summary.split, summary.mae, summary.rmse, summary.params, summary.inference_ms_per_window
    );
    Ok(summary)
}

/// Merges run summaries into `report.csv` and the mean RMSE per method and
/// sparsity into `sparsity_rmse.csv`. Unreadable runs are skipped with a
/// warning.
pub fn report(cfg: &RunConfig, runs: &[PathBuf]) -> Result<Vec<Summary>> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in runs {
        match files::read_summary(&dir.join("summary.json")) {
            Ok(s) => rows.push(s),
            Err(e) => eprintln!("warning: skipping {}: {e}", dir.display()),
        }
    }
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.seed.cmp(&b.seed)));
    let mut table = String::from("method,seed,n,m,sparsity,q_kept,split,mae,rmse,mape_pct,params,inference_ms_per_window,jaccard_distance\n");
    for s in &rows {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:?}"));
        table.push_str(&format!(
            "{},{},{},{},{:?},{},{},{:?},{:?},{},{},{:?},{}\n",
            s.method,
            s.seed,
            s.n,
            s.m,
            s.sparsity(),
            s.q_kept,
            s.split,
            s.mae,
            s.rmse,
            opt(s.mape_pct),
            s.params,
            s.inference_ms_per_window,
            opt(s.jaccard_distance)
        ));
    }
    files::write(&out(cfg, "report.csv"), &table)?;

    // Sparsity keys are formatted so equal ratios group together.
    let mut curve: BTreeMap<(String, String), (f64, f64, usize)> = BTreeMap::new();
    for s in &rows {
        let key = (format!("{:.6}", s.sparsity()), s.method.clone());
        let e = curve.entry(key).or_insert((s.sparsity(), 0.0, 0));
        e.1 += s.rmse;
        e.2 += 1;
    }
    let mut csv = String::from("sparsity,method,mean_rmse,runs\n");
    for ((_, method), (sp, total, count)) in &curve {
        csv.push_str(&format!("{sp:?},{method},{:?},{count}\n", total / *count as f64));
    }
    files::write(&out(cfg, "sparsity_rmse.csv"), &csv)?;
    println!("report: {} runs -> {}", rows.len(), cfg.out_dir.display());
    Ok(rows)
}
