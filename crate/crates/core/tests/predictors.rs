use iclc::numerics::DenseMatrix;
use iclc::predictors::{
    bayes_lambda, bayes_predict, gd_weights, knn_predict, ols_predict, parse_predictor, ridge_predict,
    ridge_weights, sgd_weights, write_dump, CompiledSgd, Dataset, DumpHeader, DumpRecord, ExternalDump, KnnVariant,
    Predictor, QueryKey, SgdOnePass,
};
use iclc::rng;

fn dataset(seed: u64, n: usize, d: usize) -> Dataset {
    let mut r = rng::stream(seed, 0);
    let x = DenseMatrix::from_vec(n, d, rng::normal_vec(&mut r, n * d, 1.0)).unwrap();
    let y = rng::normal_vec(&mut r, n, 1.0);
    Dataset::new(x, y).unwrap()
}

fn query(seed: u64, d: usize) -> Vec<f64> {
    rng::normal_vec(&mut rng::stream(seed, 1), d, 1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn gram(data: &Dataset, lambda: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, d) = data.x.shape();
    let a = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..n).map(|k| data.x[(k, i)] * data.x[(k, j)]).sum::<f64>() + if i == j { lambda } else { 0.0 })
                .collect()
        })
        .collect();
    let b = (0..d).map(|i| (0..n).map(|k| data.x[(k, i)] * data.y[k]).sum()).collect();
    (a, b)
}

#[test]
fn ridge_residual_is_orthogonal_up_to_the_penalty() {
    for (n, d, lambda) in [(3, 5, 0.5), (8, 8, 1e-3), (20, 4, 2.0)] {
        let data = dataset(n as u64, n, d);
        let w = ridge_weights(&data, lambda).unwrap();
        // Xᵀ(y − Xw) = λw
        for j in 0..d {
            let g: f64 = (0..n).map(|i| data.x[(i, j)] * (data.y[i] - dot(data.x.row(i), &w))).sum();
            assert!((g - lambda * w[j]).abs() <= 1e-10, "n={n} d={d} coord {j}");
        }
        let (a, b) = gram(&data, lambda);
        let want = gauss_solve(a, b);
        for (u, v) in w.iter().zip(&want) {
            assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn ols_is_min_norm_when_underdetermined() {
    let (n, d) = (3, 6);
    let data = dataset(21, n, d);
    let w = ridge_weights(&data, 0.0).unwrap();
    // Interpolates.
    for i in 0..n {
        assert!((dot(data.x.row(i), &w) - data.y[i]).abs() <= 1e-10);
    }
    // Lies in the row space: w = Xᵀa with (XXᵀ)a = y.
    let xxt: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(data.x.row(i), data.x.row(j))).collect()).collect();
    let a = gauss_solve(xxt, data.y.clone());
    for j in 0..d {
        let want: f64 = (0..n).map(|i| a[i] * data.x[(i, j)]).sum();
        assert!((w[j] - want).abs() <= 1e-10);
    }
    let q = query(21, d);
    assert!((ols_predict(&data, &q).unwrap() - dot(&w, &q)).abs() <= 1e-12);
}

#[test]
fn overdetermined_ols_matches_normal_equations() {
    let data = dataset(5, 30, 4);
    let (a, b) = gram(&data, 0.0);
    let want = gauss_solve(a, b);
    let q = query(5, 4);
    assert!((ols_predict(&data, &q).unwrap() - dot(&want, &q)).abs() <= 1e-10);
}

#[test]
fn empty_context_predicts_zero_for_linear_predictors() {
    let data = Dataset::empty(3);
    let q = [0.3, -0.2, 0.5];
    assert_eq!(ols_predict(&data, &q).unwrap(), 0.0);
    assert_eq!(ridge_predict(&data, &q, 1.0).unwrap(), 0.0);
    assert!(knn_predict(&data, &q, KnnVariant::Uniform, 3).is_err());
}

#[test]
fn bayes_is_ridge_at_the_noise_ratio_and_tends_to_ols() {
    let data = dataset(8, 3, 5);
    let q = query(8, 5);
    assert_eq!(bayes_lambda(0.5, 2.0).unwrap(), 0.25);
    let b = bayes_predict(&data, &q, 0.5, 2.0).unwrap();
    assert!((b - ridge_predict(&data, &q, 0.25).unwrap()).abs() <= 1e-14);
    let ols = ols_predict(&data, &q).unwrap();
    let near = bayes_predict(&data, &q, 1e-10, 1.0).unwrap();
    assert!((near - ols).abs() <= 1e-4 * (1.0 + ols.abs()));
    assert!(bayes_lambda(1.0, 0.0).is_err());
    assert!(bayes_lambda(-1.0, 1.0).is_err());
}

#[test]
fn linear_predictors_scale_with_targets() {
    let data = dataset(13, 6, 4);
    let q = query(13, 4);
    for spec in ["ols", "ridge(0.7)", "sgd(0.05,0.1)", "gd(0.05)", "knn_uniform", "knn_weighted(2)"] {
        let p = parse_predictor(spec, 0.25, 1.0).unwrap();
        let a = p.predict(&data, &q, QueryKey::default()).unwrap();
        let b = p.predict(&data.scaled_targets(-3.0), &q, QueryKey::default()).unwrap();
        assert!((b + 3.0 * a).abs() <= 1e-12 * (1.0 + a.abs()), "{spec}");
    }
}

fn knn_oracle(data: &Dataset, q: &[f64], weighted: bool, k: usize) -> f64 {
    let mut all: Vec<(f64, usize)> = (0..data.n())
        .map(|i| (data.x.row(i).iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum(), i))
        .collect();
    // Insertion sort keeps ties in index order.
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && all[j - 1].0 > all[j].0 {
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    let top = &all[..k.min(all.len())];
    if weighted {
        let num: f64 = top.iter().map(|&(d, i)| data.y[i] / d).sum();
        let den: f64 = top.iter().map(|&(d, _)| 1.0 / d).sum();
        num / den
    } else {
        top.iter().map(|&(_, i)| data.y[i]).sum::<f64>() / top.len() as f64
    }
}

#[test]
fn knn_matches_brute_force() {
    for seed in 0..20 {
        let data = dataset(100 + seed, 12, 3);
        let q = query(100 + seed, 3);
        for k in [1, 3, 5, 20] {
            let u = knn_predict(&data, &q, KnnVariant::Uniform, k).unwrap();
            let w = knn_predict(&data, &q, KnnVariant::Weighted, k).unwrap();
            assert!((u - knn_oracle(&data, &q, false, k)).abs() <= 1e-12);
            assert!((w - knn_oracle(&data, &q, true, k)).abs() <= 1e-12);
        }
    }
}

#[test]
fn knn_ties_break_by_index() {
    let x = DenseMatrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0]]).unwrap();
    let data = Dataset::new(x, vec![10.0, 20.0, 30.0]).unwrap();
    assert_eq!(knn_predict(&data, &[0.0], KnnVariant::Uniform, 1).unwrap(), 10.0);
    assert_eq!(knn_predict(&data, &[0.0], KnnVariant::Uniform, 2).unwrap(), 15.0);
}

#[test]
fn sgd_matches_explicit_loop() {
    let data = dataset(17, 7, 3);
    let (alpha, lambda) = (0.07, 0.2);
    let mut w = [0.0; 3];
    for i in 0..7 {
        let x = data.x.row(i);
        let e = dot(&w, x) - data.y[i];
        let g: Vec<f64> = (0..3).map(|k| x[k] * e + lambda * w[k]).collect();
        for k in 0..3 {
            w[k] -= 2.0 * alpha * g[k];
        }
    }
    let got = sgd_weights(&data, alpha, lambda);
    for k in 0..3 {
        assert!((got[k] - w[k]).abs() <= 1e-14);
    }
}

#[test]
fn gd_matches_matrix_form() {
    let data = dataset(19, 5, 4);
    let alpha = 0.1;
    let xt = data.x.transpose();
    let want = xt.matvec(&data.y).unwrap();
    let got = gd_weights(&data, alpha, 0.3);
    for k in 0..4 {
        assert!((got[k] - 2.0 * alpha * want[k]).abs() <= 1e-14);
    }
}

#[test]
fn compiled_sgd_tracks_reference_sgd() {
    let compiled = CompiledSgd::new(0.3, 0.1);
    let reference = SgdOnePass {
        alpha: 0.3,
        lambda: 0.1,
    };
    for n in 0..=3 {
        let (data, q) = iclc::metrics::uniform_task(4, n as u64, 2, n, 0.1);
        let a = compiled.predict(&data, &q, QueryKey::default()).unwrap();
        let b = reference.predict(&data, &q, QueryKey::default()).unwrap();
        assert!((a - b).abs() <= 2e-3 * b.abs().max(1e-12), "n={n}: {a} vs {b}");
    }
}

#[test]
fn predictor_names_parse_back() {
    for spec in [
        "ols",
        "ridge(0.5)",
        "bayes(0.25,1)",
        "knn_uniform",
        "knn_weighted(5)",
        "sgd(0.1,0)",
        "gd(0.2,0.1)",
        "compiled_sgd(0.3,0.1)",
    ] {
        let p = parse_predictor(spec, 0.25, 1.0).unwrap();
        assert_eq!(parse_predictor(&p.name(), 0.25, 1.0).unwrap().name(), p.name(), "{spec}");
    }
    for bad in ["", "ridge", "ridge(a)", "knn_uniform(0)", "bayes(1)", "nope", "sgd(0.1"] {
        assert!(parse_predictor(bad, 0.25, 1.0).is_err(), "{bad}");
    }
}

#[test]
fn dump_predictor_serves_recorded_values() {
    let header = DumpHeader {
        d: 2,
        sigma2: 0.25,
        tau2: 1.0,
        seed: 7,
        name: Some("ckpt".into()),
    };
    let records = vec![
        DumpRecord {
            task_id: 3,
            n_context: 4,
            query_index: 1,
            prediction: 0.5,
        },
        DumpRecord {
            task_id: 3,
            n_context: 5,
            query_index: 0,
            prediction: -1.25,
        },
    ];
    let mut buf = Vec::new();
    write_dump(&mut buf, &header, &records).unwrap();
    let dump = ExternalDump::from_reader(buf.as_slice(), "mem").unwrap();
    assert_eq!(dump.len(), 2);
    assert_eq!(dump.header, header);
    let data = Dataset::empty(2);
    let key = QueryKey {
        task_id: 3,
        n_context: 4,
        query_index: 1,
    };
    assert_eq!(dump.predict(&data, &[0.0, 0.0], key).unwrap(), 0.5);
    let missing = QueryKey { task_id: 9, ..key };
    assert!(dump.predict(&data, &[0.0, 0.0], missing).is_err());
    let bad = b"{\"d\":2,\"sigma2\":1,\"tau2\":1,\"seed\":0}\n{\"task_id\":1}\n";
    assert!(ExternalDump::from_reader(&bad[..], "bad").is_err());
}
