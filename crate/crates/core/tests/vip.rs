use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vip_core::data::{normalize_adjacency, AdjacencyMatrix, Batch};
use vip_core::model::{
    bind, encode, init_params, init_vip_extras, output_mlp, predict_stmf, temporal_attention, AttnMask, Bound,
    ModelDims, ParamSet,
};
use vip_core::pruning::MaskState;
use vip_core::vip::{forward_vip, masked_attention, predict_vip, MaskVars, VipOptions};
use vip_tensor::{grad_check, Graph, Tensor, Var};

fn tiny(n: usize) -> ModelDims {
    ModelDims {
        n,
        input_len: 4,
        output_len: 3,
        q: 8,
        d: 2,
        d_tod: 2,
        d_dow: 2,
        d_v: 2,
        heads: 2,
        temporal_layers: 1,
        spatial_layers: 1,
        ffn_hidden: 4,
        output_hidden: 4,
        steps_per_day: 6,
        ..ModelDims::default()
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn batch(dims: &ModelDims, b: usize, rng: &mut impl Rng) -> Batch {
    let l = dims.input_len;
    Batch {
        x_in: random(&[b, dims.n, l], rng),
        x_out: random(&[b, dims.n, dims.output_len], rng),
        tod: (0..b * l).map(|k| (k * 5) % dims.steps_per_day).collect(),
        dow: (0..b * l).map(|k| k % dims.days_per_week).collect(),
    }
}

fn ring(n: usize) -> AdjacencyMatrix {
    let edges: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, (i + 1) % n, 1.0 + i as f64 * 0.1)).collect();
    AdjacencyMatrix::from_edges(n, &edges).unwrap()
}

fn erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for k in 1..80 {
        term *= -x * x / k as f64;
        sum += term / (2 * k + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + erf(v / 2f64.sqrt()))
}

fn vip_params(dims: &ModelDims, seed: u64) -> ParamSet {
    let mut p = init_params(dims, seed).unwrap();
    init_vip_extras(&mut p, dims, seed);
    p
}

#[test]
fn full_masks_on_an_empty_graph_reduce_to_the_base_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = tiny(4);
    let mut params = vip_params(&dims, 1);
    // zero bridge projection: gelu(0) = 0, so only the identity graph term remains
    params.insert("bridge.fc", Tensor::zeros(&[2, 2]));
    let a_norm = normalize_adjacency(&AdjacencyMatrix::empty(4));
    let state = MaskState {
        b: vec![true; 4],
        p: vec![true; 8],
        b_hat: Tensor::ones(&[4]),
        p_hat: Tensor::ones(&[8]),
        pinned: vec![],
    };
    let b = batch(&dims, 3, &mut rng);
    let vip = predict_vip(&params, &dims, &a_norm, &state, &b, VipOptions::default()).unwrap();
    let base = predict_stmf(&params, &dims, &b).unwrap();
    assert!(vip.max_abs_diff(&base) < 1e-12);
}

#[test]
fn unit_masks_leave_attention_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..20 {
        let heads = [1, 2, 4][case % 3];
        let dims = ModelDims { heads, ..tiny(3) };
        let params = init_params(&dims, case as u64).unwrap();
        let x = random(&[2, 3, 1 + case % 5, 8], &mut rng);
        let mut g = Graph::new();
        let p = bind(&mut g, &params, false);
        let xv = g.constant(x);
        let ones = g.constant(Tensor::ones(&[8]));
        let all: Vec<usize> = (0..8).collect();
        let masked = masked_attention(&mut g, &p, &dims, 0, xv, &all, ones).unwrap();
        let base = temporal_attention(&mut g, &p, &dims, 0, xv, AttnMask::none()).unwrap();
        assert!(g.value(masked).max_abs_diff(g.value(base)) < 1e-12, "case {case}");
    }
}

#[test]
fn pruned_dimensions_drop_out_of_the_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = tiny(2);
    let mut params = init_params(&dims, 0).unwrap();
    let x = random(&[1, 2, 3, 8], &mut rng);
    let kept = [0, 2, 5, 7];
    let run = |params: &ParamSet| {
        let mut g = Graph::new();
        let p = bind(&mut g, params, false);
        let xv = g.constant(x.clone());
        let ph = g.constant(Tensor::ones(&[8]));
        let out = masked_attention(&mut g, &p, &dims, 0, xv, &kept, ph).unwrap();
        g.value(out).clone()
    };
    let before = run(&params);
    // query/key columns outside the kept set are never read
    for name in ["att0.wq", "att0.wk"] {
        let w = params.get_mut(name).unwrap();
        for r in 0..8 {
            for c in [1, 3, 4, 6] {
                w.data_mut()[r * 8 + c] = 100.0;
            }
        }
    }
    assert_eq!(run(&params), before);
}

/// Dense loop version of the extrapolation: builds the fused `m x n` matrix
/// entry by entry and mixes the encoded selected rows with it.
fn extrapolate_by_hand(params: &ParamSet, a_norm: &Tensor, b_hat: &Tensor, sel: &[usize], h: &Tensor) -> Tensor {
    let e = params.get("emb.node").unwrap();
    let fc = params.get("bridge.fc").unwrap();
    let (n, dv) = (e.shape()[0], e.shape()[1]);
    let proj = |i: usize, c: usize| (0..dv).map(|k| e.at(&[i, k]) * fc.at(&[k, c])).sum::<f64>();
    let m = sel.len();
    let mut fused = vec![0.0; m * n];
    for (r, &i) in sel.iter().enumerate() {
        for j in 0..n {
            let sim: f64 = (0..dv).map(|c| proj(i, c) * proj(j, c)).sum();
            fused[r * n + j] = b_hat.data()[i] * a_norm.at(&[i, j]) + gelu(sim);
        }
    }
    let s = h.shape();
    let (b, l, q) = (s[0], s[2], s[3]);
    let mut out = vec![0.0; b * n * l * q];
    for bi in 0..b {
        for j in 0..n {
            for k in 0..l * q {
                out[(bi * n + j) * l * q + k] =
                    (0..m).map(|r| fused[r * n + j] * h.data()[(bi * m + r) * l * q + k]).sum();
            }
        }
    }
    Tensor::new(vec![b, n, l, q], out).unwrap()
}

#[test]
fn extrapolation_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = tiny(6);
    let params = vip_params(&dims, 2);
    let a_norm = normalize_adjacency(&ring(6));
    let b_hat = random(&[6], &mut rng);
    let p_hat = random(&[8], &mut rng);
    let sel = [1, 4, 5];
    let kept = [0, 1, 3, 4, 6];
    let b = batch(&dims, 2, &mut rng);

    let mut g = Graph::new();
    let p = bind(&mut g, &params, false);
    let bh = g.constant(b_hat.clone());
    let ph = g.constant(p_hat);
    let mv = MaskVars {
        selected: &sel,
        kept: &kept,
        b_hat: bh,
        p_hat: ph,
    };
    let got = forward_vip(&mut g, &p, &dims, &a_norm, &b.x_in, &b.tod, &b.dow, mv, VipOptions::default()).unwrap();
    let got = g.value(got).clone();

    let x = g.constant(b.x_in.select(1, &sel).unwrap());
    let attn = AttnMask {
        kept: Some(&kept),
        p_hat: Some(ph),
    };
    let h = encode(&mut g, &p, &dims, x, &sel, &b.tod, &b.dow, attn).unwrap();
    let mixed = extrapolate_by_hand(&params, &a_norm, &b_hat, &sel, g.value(h));
    let mixed = g.constant(mixed);
    let want = output_mlp(&mut g, &p, &dims, mixed).unwrap();
    assert_eq!(got.shape(), &[2, 6, 3]);
    assert!(got.max_abs_diff(g.value(want)) < 1e-12);
}

fn state_with(sel: &[usize], kept: &[usize], n: usize, q: usize, rng: &mut impl Rng) -> MaskState {
    MaskState {
        b: (0..n).map(|i| sel.contains(&i)).collect(),
        p: (0..q).map(|i| kept.contains(&i)).collect(),
        b_hat: random(&[n], rng),
        p_hat: random(&[q], rng),
        pinned: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unselected_inputs_are_never_read(seed in any::<u64>(), sel_bits in prop::collection::vec(any::<bool>(), 6), no_extra in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bits = sel_bits;
        bits[2] = true;
        let sel: Vec<usize> = (0..6).filter(|&i| bits[i]).collect();
        let dims = tiny(6);
        let params = vip_params(&dims, seed);
        let a_norm = normalize_adjacency(&ring(6));
        let state = state_with(&sel, &[0, 2, 3, 7], 6, 8, &mut rng);
        let opts = VipOptions { no_extra, ..VipOptions::default() };
        let b = batch(&dims, 2, &mut rng);
        let mut noisy = b.clone();
        for (k, v) in noisy.x_in.data_mut().iter_mut().enumerate() {
            if !bits[(k / 4) % 6] {
                *v += 50.0;
            }
        }
        let x = predict_vip(&params, &dims, &a_norm, &state, &b, opts).unwrap();
        let y = predict_vip(&params, &dims, &a_norm, &state, &noisy, opts).unwrap();
        prop_assert_eq!(x, y);
    }
}

#[test]
fn variable_map_rows_follow_selection_slots() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = tiny(6);
    let mut params = vip_params(&dims, 3);
    let a_norm = normalize_adjacency(&ring(6));
    let state = state_with(&[3, 5], &[0, 1, 2, 3], 6, 8, &mut rng);
    let opts = VipOptions {
        no_extra: true,
        ..VipOptions::default()
    };
    let b = batch(&dims, 2, &mut rng);
    let before = predict_vip(&params, &dims, &a_norm, &state, &b, opts).unwrap();
    // two selected variables use rows 0 and 1, whichever variables they are
    for k in 12..36 {
        params.get_mut("extra.w").unwrap().data_mut()[k] = 9.0;
    }
    assert_eq!(predict_vip(&params, &dims, &a_norm, &state, &b, opts).unwrap(), before);
    params.get_mut("extra.w").unwrap().data_mut()[1] += 1.0;
    assert_ne!(predict_vip(&params, &dims, &a_norm, &state, &b, opts).unwrap(), before);
}

#[test]
fn masked_model_gradients_include_importance_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = tiny(5);
    let params = vip_params(&dims, 4);
    let a_norm = normalize_adjacency(&ring(5));
    let b = batch(&dims, 2, &mut rng);
    let sel = [0, 3];
    let kept = [1, 2, 4, 5, 7];
    let mut names = params.names();
    // the ablation map is unused by the full model
    names.retain(|n| n != "extra.w");
    let mut inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    inputs.push(random(&[5], &mut rng));
    inputs.push(random(&[8], &mut rng));
    let err = grad_check(
        |g, leaves: &[Var]| {
            let mut p = Bound::default();
            for (name, &v) in names.iter().zip(leaves) {
                p.insert(name.clone(), v);
            }
            let k = leaves.len();
            let mv = MaskVars {
                selected: &sel,
                kept: &kept,
                b_hat: leaves[k - 2],
                p_hat: leaves[k - 1],
            };
            let out = forward_vip(g, &p, &dims, &a_norm, &b.x_in, &b.tod, &b.dow, mv, VipOptions::default())
                .expect("forward");
            let t = g.constant(b.x_out.clone());
            let d = g.sub(out, t)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}
