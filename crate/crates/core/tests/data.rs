use std::fs;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vip_core::data::synth::{synth_generate, SynthConfig};
use vip_core::data::{
    load_adjacency, load_dataset, load_series, make_windows, normalize_adjacency, save_adjacency, save_series, split,
    AdjacencyMatrix, NormStats, RawSeries,
};
use vip_core::Error;
use vip_tensor::Tensor;

fn series(n: usize, t: usize, f: impl Fn(usize, usize) -> f64) -> RawSeries {
    let data = (0..n).flat_map(|i| (0..t).map(move |s| (i, s))).map(|(i, s)| f(i, s)).collect();
    RawSeries::new(Tensor::new(vec![n, t], data).unwrap(), 300, 0).unwrap()
}

#[test]
fn two_node_edge_file_is_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("v.csv");
    let a = dir.path().join("a.csv");
    fs::write(&v, "2,3,300,0\n1,2,3\n4,5,6\n").unwrap();
    fs::write(&a, "0,1,1.0\n").unwrap();
    let (s, adj) = load_dataset(&v, &a).unwrap();
    assert_eq!((s.n(), s.len()), (2, 3));
    assert_eq!(adj.weights().data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn out_of_range_edge_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    fs::write(&a, "0,1,1\n# comment\n3,999,1\n").unwrap();
    match load_adjacency(&a, 10) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn malformed_value_row_and_n_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("v.csv");
    fs::write(&v, "2,3,300,0\n1,2,3\n4,x,6\n").unwrap();
    assert!(matches!(load_series(&v), Err(Error::Parse { line: 3, .. })));
    fs::write(&v, "3,2,300,0\n1,2\n4,5\n").unwrap();
    assert!(matches!(load_series(&v), Err(Error::Parse { .. })));
    let a = dir.path().join("a.csv");
    fs::write(&a, "# n=5\n0,1,1\n").unwrap();
    assert!(matches!(load_adjacency(&a, 4), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn pems08_shaped_file_loads() {
    let (n, t) = (170, 17856);
    let s = series(n, t, |i, k| ((i * 31 + k) % 97) as f64);
    let adj = AdjacencyMatrix::from_edges(n, &[(0, 169, 2.5), (3, 4, 1.0)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (v, a) = (dir.path().join("v.csv"), dir.path().join("a.csv"));
    save_series(&s, &v).unwrap();
    save_adjacency(&adj, &a).unwrap();
    let (back, back_adj) = load_dataset(&v, &a).unwrap();
    assert_eq!((back.n(), back.len()), (170, 17856));
    assert_eq!(back.values().data(), s.values().data());
    assert_eq!(back_adj.weights().data(), adj.weights().data());
}

#[test]
fn zscore_examples() {
    let s = RawSeries::new(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap(), 300, 0).unwrap();
    let st = NormStats::fit(&s).unwrap();
    assert_eq!(st.mean, 2.0);
    assert!((st.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    let z = st.apply_series(&s);
    assert!(z.values().data().iter().sum::<f64>().abs() < 1e-15);
    let flat = series(2, 5, |_, _| 7.0);
    assert!(matches!(NormStats::fit(&flat), Err(Error::Degenerate(_))));
}

#[test]
fn split_examples() {
    let s = series(2, 100, |i, k| (i + k) as f64);
    let (a, b, c) = split(&s, [0.6, 0.2, 0.2], 20).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
    assert_eq!(b.row(0)[0], 60.0);
    assert!(matches!(split(&s, [0.6, 0.2, 0.1], 1), Err(Error::Config(_))));
    assert!(matches!(split(&s, [0.9, 0.05, 0.05], 24), Err(Error::Config(_))));

    let long = series(2, 34272, |_, k| k as f64);
    let (a, b, c) = split(&long, [0.7, 0.15, 0.15], 24).unwrap();
    // floor arithmetic oracle, within one step
    let t = 34272f64;
    for (got, want) in [(a.len(), (t * 0.7).floor()), (b.len(), (t * 0.15).floor()), (c.len(), (t * 0.15).floor())] {
        assert!((got as f64 - want).abs() <= 1.0, "{got} vs {want}");
    }
    assert_eq!(a.len() + b.len() + c.len(), 34272);
}

#[test]
fn window_counting_and_boundaries() {
    let s = series(3, 36, |i, k| (100 * i + k) as f64);
    let w = make_windows(&s, 12, 12, 1).unwrap();
    assert_eq!(w.len(), 13);
    let first = w.get(0);
    assert_eq!(first.x_out.data()[0], 12.0);
    assert_eq!(first.x_in.data()[12], 100.0);
    let disjoint = make_windows(&s, 12, 12, 24).unwrap();
    assert_eq!(disjoint.len(), 1);
    let long = series(2, 100, |_, k| k as f64);
    let w = make_windows(&long, 12, 12, 24).unwrap();
    for i in 1..w.len() {
        assert_eq!(w.get(i).x_in.data()[0], w.get(i - 1).x_out.data()[11] + 1.0);
    }
}

proptest! {
    #[test]
    fn window_count_formula(t in 2usize..80, l in 1usize..10, lo in 1usize..10, stride in 1usize..8) {
        let s = series(2, t, |_, k| k as f64);
        let w = make_windows(&s, l, lo, stride).unwrap();
        let want = if t >= l + lo { (t - l - lo) / stride + 1 } else { 0 };
        prop_assert_eq!(w.len(), want);
    }

    #[test]
    fn temporal_indices_advance(offset in 0usize..3000, interval in prop::sample::select(vec![60u32, 300, 900, 3600])) {
        let s = RawSeries::new(Tensor::zeros(&[2, 40]), interval, offset).unwrap();
        let w = make_windows(&s, 20, 1, 1).unwrap();
        let d = s.steps_per_day();
        for i in 0..w.len() {
            let x = w.get(i);
            for k in 1..x.tod.len() {
                prop_assert_eq!(x.tod[k], (x.tod[k - 1] + 1) % d);
                let wrapped = x.tod[k] == 0;
                prop_assert_eq!(x.dow[k], if wrapped { (x.dow[k - 1] + 1) % 7 } else { x.dow[k - 1] });
            }
        }
    }

    #[test]
    fn zscore_round_trip(vals in prop::collection::vec(-1e3f64..1e3, 6..40)) {
        let n = 2;
        let t = vals.len() / n;
        let s = RawSeries::new(Tensor::new(vec![n, t], vals[..n * t].to_vec()).unwrap(), 300, 0).unwrap();
        if let Ok(st) = NormStats::fit(&s) {
            let back = st.invert_series(&st.apply_series(&s));
            for (a, b) in back.values().data().iter().zip(s.values().data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalization_matches_dense_oracle(weights in prop::collection::vec(prop::option::of(0.1f64..5.0), 28)) {
        let n = 8;
        let mut edges = Vec::new();
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                if let Some(w) = weights[k % weights.len()] {
                    if (i + j + k) % 3 != 0 {
                        edges.push((i, j, w));
                    }
                }
                k += 1;
            }
        }
        let a = AdjacencyMatrix::from_edges(n, &edges).unwrap();
        let got = normalize_adjacency(&a);
        let mut m = DMatrix::from_row_slice(n, n, a.weights().data()) + DMatrix::identity(n, n);
        let dinv = DMatrix::from_diagonal(&DVector::from_iterator(n, m.row_iter().map(|r| 1.0 / r.sum().sqrt())));
        m = &dinv * m * &dinv;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                prop_assert!((got.data()[i * n + j] - m[(i, j)]).abs() < 1e-12);
                prop_assert!((got.data()[i * n + j] - got.data()[j * n + i]).abs() < 1e-15);
                row += got.data()[i * n + j];
            }
            prop_assert!(row > 0.0);
        }
    }
}

#[test]
fn no_edges_normalizes_to_identity() {
    let got = normalize_adjacency(&AdjacencyMatrix::empty(4));
    assert_eq!(got.data(), Tensor::identity(4).data());
    let two = normalize_adjacency(&AdjacencyMatrix::from_edges(2, &[(0, 1, 1.0)]).unwrap());
    assert_eq!(two.data(), &[0.5; 4]);
}

/// Least-squares fit of each non-driver on all drivers.
fn driver_residuals(data: &vip_core::data::synth::SynthData) -> Vec<Vec<f64>> {
    let t = data.series.len();
    let k = data.drivers.len();
    let x = DMatrix::from_fn(t, k, |s, c| data.series.value(data.drivers[c], s));
    let svd = x.clone().svd(true, true);
    (0..data.series.n())
        .filter(|i| !data.drivers.contains(i))
        .map(|i| {
            let y = DVector::from_iterator(t, (0..t).map(|s| data.series.value(i, s)));
            let coef = svd.solve(&y, 1e-12).unwrap();
            (y - &x * coef).iter().copied().collect()
        })
        .collect()
}

#[test]
fn noiseless_non_drivers_are_driver_mixtures() {
    let cfg = SynthConfig {
        noise: 0.0,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg, 3).unwrap();
    assert_eq!(data.drivers.len(), 8);
    for r in driver_residuals(&data) {
        let worst = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-10, "residual {worst}");
    }
    for (i, parents) in data.parents.iter().enumerate() {
        for &(d, _) in parents {
            assert!(data.adjacency.weight(i, d) > 0.0);
        }
    }
}

#[test]
fn noise_level_is_recovered() {
    let data = synth_generate(&SynthConfig::default(), 5).unwrap();
    let all: Vec<f64> = driver_residuals(&data).into_iter().flatten().collect();
    let std = (all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64).sqrt();
    assert!((std - 0.1).abs() < 0.02, "residual std {std}");
}

#[test]
fn synthetic_generation_is_deterministic() {
    let cfg = SynthConfig {
        n: 12,
        t_total: 300,
        k_d: 3,
        ..SynthConfig::default()
    };
    let a = synth_generate(&cfg, 11).unwrap();
    let b = synth_generate(&cfg, 11).unwrap();
    let bits = |s: &RawSeries| s.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.series), bits(&b.series));
    assert_eq!(a.adjacency, b.adjacency);
    assert_eq!(a.drivers, b.drivers);
    assert!(matches!(
        synth_generate(&SynthConfig { k_d: 12, ..cfg }, 0),
        Err(Error::Config(_))
    ));
}
