use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vip_core::data::Batch;
use vip_core::model::{
    bind, embed, forward_stmf, init_params, predict_stmf, spatial_attention, temporal_attention, AttnMask, Bound,
    ModelDims, ParamSet,
};
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
        tod: (0..b * l).map(|k| (k + 2) % dims.steps_per_day).collect(),
        dow: (0..b * l).map(|k| (k / 3) % dims.days_per_week).collect(),
    }
}

/// Attention weights only, for `q`-wide inputs.
fn attention_params(q: usize, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for w in ["wq", "wk", "wv"] {
        p.insert(format!("att0.{w}"), random(&[q, q], rng));
    }
    p
}

/// Loop-based multi-head attention over axis 2 of `B x S x T x q`.
fn naive_attention(x: &Tensor, p: &ParamSet, heads: usize) -> Tensor {
    let s = x.shape().to_vec();
    let (b, v, t, q) = (s[0], s[1], s[2], s[3]);
    let dh = q / heads;
    let proj = |w: &Tensor| x.clone().reshape(&[b * v * t, q]).unwrap().matmul(w).unwrap();
    let (qm, km, vm) = (
        proj(p.get("att0.wq").unwrap()),
        proj(p.get("att0.wk").unwrap()),
        proj(p.get("att0.wv").unwrap()),
    );
    let mut out = vec![0.0; b * v * t * q];
    for seq in 0..b * v {
        for h in 0..heads {
            for i in 0..t {
                let row = |m: &Tensor, r: usize, c: usize| m.data()[(seq * t + r) * q + h * dh + c];
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|c| row(&qm, i, c) * row(&km, j, c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    out[(seq * t + i) * q + h * dh + c] = (0..t).map(|j| e[j] / z * row(&vm, j, c)).sum();
                }
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

fn run_attention(x: &Tensor, p: &ParamSet, dims: &ModelDims, spatial: bool) -> Tensor {
    let mut g = Graph::new();
    let bound = bind(&mut g, p, false);
    let xv = g.constant(x.clone());
    let out = if spatial {
        spatial_attention(&mut g, &bound, dims, 0, xv, AttnMask::none()).unwrap()
    } else {
        temporal_attention(&mut g, &bound, dims, 0, xv, AttnMask::none()).unwrap()
    };
    g.value(out).clone()
}

#[test]
fn single_step_attention_returns_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = tiny(3);
    let p = attention_params(8, &mut rng);
    let x = random(&[2, 3, 1, 8], &mut rng);
    let got = run_attention(&x, &p, &dims, false);
    let want = x.clone().reshape(&[6, 8]).unwrap().matmul(p.get("att0.wv").unwrap()).unwrap();
    assert!(got.max_abs_diff(&want.reshape(&[2, 3, 1, 8]).unwrap()) < 1e-14);
}

#[test]
fn two_by_two_hand_instance() {
    let dims = ModelDims {
        q: 2,
        heads: 1,
        ..tiny(1)
    };
    let mut p = ParamSet::new();
    p.insert("att0.wq", Tensor::identity(2));
    p.insert("att0.wk", Tensor::identity(2));
    p.insert("att0.wv", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
    // two steps, x0 = (1, 0), x1 = (0, 1)
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let got = run_attention(&x, &p, &dims, false);
    let s = 1.0 / 2f64.sqrt();
    let (hi, lo) = (s.exp() / (s.exp() + 1.0), 1.0 / (s.exp() + 1.0));
    let want = [hi, 2.0 * lo, lo, 2.0 * hi];
    for (a, b) in got.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn spatial_attention_is_transposed_temporal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = tiny(5);
    let p = attention_params(8, &mut rng);
    let x = random(&[2, 5, 3, 8], &mut rng);
    let spatial = run_attention(&x, &p, &dims, true);
    let xt = x.permute(&[0, 2, 1, 3]).unwrap();
    let want = run_attention(&xt, &p, &dims, false).permute(&[0, 2, 1, 3]).unwrap();
    assert!(spatial.max_abs_diff(&want) < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_matches_loop_oracle(seed in any::<u64>(), t in 1usize..6, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims { heads, ..tiny(3) };
        let p = attention_params(8, &mut rng);
        let x = random(&[2, 3, t, 8], &mut rng);
        let got = run_attention(&x, &p, &dims, false);
        prop_assert!(got.max_abs_diff(&naive_attention(&x, &p, heads)) < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = tiny(2);
        let p = attention_params(8, &mut rng);
        let x = random(&[1, 2, 5, 8], &mut rng);
        let shuffle = |t: &Tensor| {
            let mut out = t.clone();
            for s in 0..2 {
                for (i, &j) in perm.iter().enumerate() {
                    for c in 0..8 {
                        out.data_mut()[(s * 5 + i) * 8 + c] = t.data()[(s * 5 + j) * 8 + c];
                    }
                }
            }
            out
        };
        let a = shuffle(&run_attention(&x, &p, &dims, false));
        let b = run_attention(&shuffle(&x), &p, &dims, false);
        prop_assert!(a.max_abs_diff(&b) < 1e-13);
    }
}

#[test]
fn embedding_is_the_four_part_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = tiny(3);
    let params = init_params(&dims, 4).unwrap();
    let b = batch(&dims, 2, &mut rng);
    let mut g = Graph::new();
    let bound = bind(&mut g, &params, false);
    let x = g.constant(b.x_in.clone());
    let nodes = [0, 1, 2];
    let e = embed(&mut g, &bound, &dims, x, &nodes, &b.tod, &b.dow).unwrap();
    let e = g.value(e).clone();
    assert_eq!(e.shape(), &[2, 3, 4, 8]);
    let gelu = |v: f64| 0.5 * v * (1.0 + erf(v / 2f64.sqrt()));
    let w = |name: &str| params.get(name).unwrap().clone();
    for bi in 0..2 {
        for i in 0..3 {
            for t in 0..4 {
                let at = |c: usize| e.at(&[bi, i, t, c]);
                let xv = b.x_in.at(&[bi, i, t]);
                let hidden: Vec<f64> = (0..2).map(|k| gelu(xv * w("input.w1").at(&[0, k]) + w("input.b1").data()[k])).collect();
                for c in 0..2 {
                    let f = w("input.b2").data()[c] + (0..2).map(|k| hidden[k] * w("input.w2").at(&[k, c])).sum::<f64>();
                    assert!((at(c) - f).abs() < 1e-14);
                }
                for c in 0..2 {
                    assert_eq!(at(2 + c), w("emb.node").at(&[i, c]));
                    assert_eq!(at(4 + c), w("emb.tod").at(&[b.tod[bi * 4 + t], c]));
                    assert_eq!(at(6 + c), w("emb.dow").at(&[b.dow[bi * 4 + t], c]));
                }
            }
        }
    }
}

/// Maclaurin series, accurate to rounding for the small inputs used here.
fn erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for k in 1..60 {
        term *= -x * x / k as f64;
        sum += term / (2 * k + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn base_forecaster_shapes_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = tiny(4);
    let params = init_params(&dims, 0).unwrap();
    let b = batch(&dims, 3, &mut rng);
    let out = predict_stmf(&params, &dims, &b).unwrap();
    assert_eq!(out.shape(), &[3, 4, 3]);
    assert!(out.is_finite());
    assert_eq!(out, predict_stmf(&params, &dims, &b).unwrap());
    let default = ModelDims {
        n: 2,
        ..ModelDims::default()
    };
    let big = init_params(&default, 0).unwrap();
    let b = batch(&default, 1, &mut rng);
    assert_eq!(predict_stmf(&big, &default, &b).unwrap().shape(), &[1, 2, 12]);
}

fn bound_from(names: &[String], leaves: &[Var]) -> Bound {
    let mut b = Bound::default();
    for (name, &v) in names.iter().zip(leaves) {
        b.insert(name.clone(), v);
    }
    b
}

#[test]
fn base_forecaster_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = tiny(3);
    let params = init_params(&dims, 1).unwrap();
    let b = batch(&dims, 2, &mut rng);
    let names = params.names();
    let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let err = grad_check(
        |g, leaves| {
            let p = bound_from(&names, leaves);
            let out = forward_stmf(g, &p, &dims, &b).expect("forward");
            let target = g.constant(b.x_out.clone());
            let d = g.sub(out, target)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}
