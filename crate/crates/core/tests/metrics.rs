use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vip_core::metrics::{jaccard_distance, HorizonMetrics};
use vip_tensor::Tensor;

/// Per-horizon and pooled MAE/RMSE/MAPE by explicit indexing.
fn brute(pred: &Tensor, truth: &Tensor, eps: f64) -> Vec<(f64, f64, Option<f64>)> {
    let s = pred.shape();
    let (w, n, lo) = (s[0], s[1], s[2]);
    let row = |steps: &[usize]| {
        let (mut ae, mut se, mut pe, mut cnt, mut used) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for a in 0..w {
            for i in 0..n {
                for &j in steps {
                    let (p, t) = (pred.at(&[a, i, j]), truth.at(&[a, i, j]));
                    ae += (p - t).abs();
                    se += (p - t) * (p - t);
                    cnt += 1.0;
                    if t.abs() >= eps {
                        pe += ((p - t) / t).abs();
                        used += 1.0;
                    }
                }
            }
        }
        (ae / cnt, (se / cnt).sqrt(), (used > 0.0).then(|| 100.0 * pe / used))
    };
    let mut out: Vec<_> = (0..lo).map(|j| row(&[j])).collect();
    out.push(row(&(0..lo).collect::<Vec<_>>()));
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..100 {
        let shape = [rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..13)];
        let len: usize = shape.iter().product();
        let truth: Vec<f64> = (0..len).map(|_| rng.random_range(-20.0..80.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-5.0..5.0)).collect();
        let (p, t) = (Tensor::new(shape.to_vec(), pred).unwrap(), Tensor::new(shape.to_vec(), truth).unwrap());
        let got = HorizonMetrics::compute(&p, &t, 1.0).unwrap();
        let want = brute(&p, &t, 1.0);
        for (r, w) in got.steps.iter().chain([&got.average]).zip(&want) {
            assert!(close(r.mae, w.0) && close(r.rmse, w.1), "case {case}");
            match (r.mape_pct, w.2) {
                (Some(a), Some(b)) => assert!(close(a, b), "case {case}"),
                (None, None) => {}
                other => panic!("case {case}: {other:?}"),
            }
        }
    }
}

fn set_jaccard(a: &[bool], b: &[bool]) -> f64 {
    let sa: BTreeSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: BTreeSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

fn brute_distance(groups: &[Vec<Vec<bool>>]) -> f64 {
    let mut sims = Vec::new();
    for g in groups {
        let mut pairs = Vec::new();
        for i in 0..g.len() {
            for j in 0..g.len() {
                if i != j {
                    pairs.push(set_jaccard(&g[i], &g[j]));
                }
            }
        }
        sims.push(pairs.iter().sum::<f64>() / pairs.len() as f64);
    }
    1.0 - sims.iter().sum::<f64>() / sims.len() as f64
}

fn random_groups(rng: &mut impl Rng) -> Vec<Vec<Vec<bool>>> {
    let width = rng.random_range(2..20);
    (0..rng.random_range(1..5))
        .map(|_| {
            (0..rng.random_range(2..6))
                .map(|_| {
                    let mut m: Vec<bool> = (0..width).map(|_| rng.random_bool(0.4)).collect();
                    let k = rng.random_range(0..width);
                    m[k] = true;
                    m
                })
                .collect()
        })
        .collect()
}

#[test]
fn jaccard_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let groups = random_groups(&mut rng);
        let got = jaccard_distance(&groups).unwrap();
        assert!((got - brute_distance(&groups)).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn identical_and_disjoint_masks() {
    let a = vec![true, false, true, false, false, true];
    let b = vec![false, true, false, true, true, false];
    assert_eq!(jaccard_distance(&[vec![a.clone(); 4]]).unwrap(), 0.0);
    assert_eq!(jaccard_distance(&[vec![a.clone(), b.clone()]]).unwrap(), 1.0);
    assert!(jaccard_distance(&[vec![a.clone(), vec![false; 6]]]).is_err());
    assert!(jaccard_distance(&[]).is_err());
}

proptest! {
    #[test]
    fn jaccard_ignores_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = random_groups(&mut rng);
        let before = jaccard_distance(&groups).unwrap();
        for g in &mut groups {
            g.reverse();
        }
        groups.reverse();
        let after = jaccard_distance(&groups).unwrap();
        prop_assert!((before - after).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&before));
    }
}
