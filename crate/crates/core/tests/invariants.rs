use iclc::compiler::{
    apply_ops, approx_mul, gelu_bypass, layer_norm_bypass, MulScheme, RawOp, Span, TimestepMap,
};
use iclc::metrics::TaskDistribution;
use iclc::numerics::{layer_norm, softmax, solve_least_squares, DenseMatrix};
use iclc::predictors::{parse_predictor, QueryKey};
use iclc::probe::Standardizer;
use iclc::transformer::{decode_task, encode_task};
use proptest::prelude::*;

fn span() -> impl Strategy<Value = Span> {
    (0usize..12, 0usize..6).prop_map(|(s, l)| Span::at(s, l))
}

fn timestep_map() -> impl Strategy<Value = TimestepMap> {
    prop_oneof![
        Just(TimestepMap::SelfToken),
        Just(TimestepMap::PreviousToken),
        (0usize..5).prop_map(TimestepMap::FixedToken),
        (0usize..5).prop_map(TimestepMap::EmptyBefore),
    ]
}

proptest! {
    #[test]
    fn span_overlap_is_symmetric_and_means_a_shared_row(a in span(), b in span()) {
        prop_assert_eq!(a.overlaps(&b), b.overlaps(&a));
        let shared = a.rows().any(|r| b.contains(r));
        prop_assert_eq!(a.overlaps(&b), shared);
    }

    #[test]
    fn timestep_maps_are_causal(map in timestep_map(), i in 0usize..10) {
        let m = map.members(i);
        prop_assert!(m.len() <= 1);
        prop_assert!(m.iter().all(|&k| k <= i));
        if m.is_empty() {
            prop_assert!(map.can_be_empty());
        }
    }

    #[test]
    fn layer_norm_centers_and_scales(v in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let z = layer_norm(&v).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-12);
        prop_assert!((var - 1.0).abs() < 1e-10);
        // Invariant under positive affine maps.
        let moved: Vec<f64> = v.iter().map(|x| 3.0 * x - 7.0).collect();
        for (a, b) in layer_norm(&moved).unwrap().iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-30.0f64..30.0, 1..20), shift in -100.0f64..100.0) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        for (a, b) in softmax(&shifted).iter().zip(&p) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_product_error_is_cubic(x in -0.1f64..0.1, y in -0.1f64..0.1) {
        let m = approx_mul(x, y, MulScheme::Gelu);
        prop_assert!(!m.out_of_domain);
        let bound = 2.0 * (x.abs().powi(3) + y.abs().powi(3)) + 1e-12;
        prop_assert!((m.value - x * y).abs() <= bound);
        prop_assert!((m.value - approx_mul(y, x, MulScheme::Gelu).value).abs() <= 1e-15);
    }

    #[test]
    fn product_schemes_flag_the_domain(x in -1.0f64..1.0, y in -1.0f64..1.0) {
        for s in [MulScheme::Gelu, MulScheme::TanhDerivative, MulScheme::ReluPiecewise] {
            prop_assert_eq!(approx_mul(x, y, s).out_of_domain, x.abs() > 0.1 || y.abs() > 0.1);
        }
    }

    #[test]
    fn gelu_bypass_is_identity_near_zero(x in -1.0f64..1.0) {
        prop_assert!((gelu_bypass(x, 30.0) - x).abs() <= 1e-9);
    }

    #[test]
    fn layer_norm_bypass_passes_small_vectors(v in prop::collection::vec(-1.0f64..1.0, 1..77)) {
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assume!(scale > 1e-6);
        let out = layer_norm_bypass(&v, 1e4).unwrap();
        for (o, x) in out.iter().zip(&v) {
            prop_assert!((o - x).abs() <= 1e-3 * scale);
        }
    }

    #[test]
    fn tasks_round_trip_through_tokens(
        d in 1usize..5,
        n in 0usize..5,
        seed in any::<u64>(),
    ) {
        let task = TaskDistribution::new(d, 0.1, 1.0, seed).unwrap().sample(0, n, 1);
        let q = task.queries.row(0).to_vec();
        let tokens = encode_task(&task.context.x, &task.context.y, &q).unwrap();
        prop_assert_eq!(tokens.shape(), (d + 1, 2 * n + 1));
        let back = decode_task(&tokens).unwrap();
        prop_assert_eq!(back.x, task.context.x);
        prop_assert_eq!(back.y, task.context.y);
        prop_assert_eq!(back.query, q);
    }

    #[test]
    fn raw_ops_touch_only_their_write_rows(
        read in 0usize..3,
        write in 3usize..6,
        map in timestep_map(),
        data in prop::collection::vec(-1.0f64..1.0, 8 * 5),
    ) {
        let h = DenseMatrix::from_vec(8, 5, data).unwrap();
        let op = RawOp::mov(Span::at(read, 2), Span::at(write, 2), map);
        let out = apply_ops(&[op], &h).unwrap();
        for row in (0..8).filter(|r| !(write..write + 2).contains(r)) {
            prop_assert_eq!(out.row(row), h.row(row));
        }
        for t in 0..5 {
            let want = map.target(t).map(|k| [h[(read, k)], h[(read + 1, k)]]).unwrap_or([0.0, 0.0]);
            prop_assert_eq!([out[(write, t)], out[(write + 1, t)]], want);
        }
    }

    #[test]
    fn least_squares_residual_is_orthogonal(
        n in 1usize..8,
        d in 1usize..5,
        lambda in 0.01f64..2.0,
        seed in any::<u64>(),
    ) {
        let task = TaskDistribution::new(d, 0.1, 1.0, seed).unwrap().sample(0, n, 0);
        let (x, y) = (&task.context.x, &task.context.y);
        let w = solve_least_squares(x, y, lambda).unwrap();
        for j in 0..d {
            let g: f64 = (0..n).map(|i| x[(i, j)] * (y[i] - x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())).sum();
            prop_assert!((g - lambda * w[j]).abs() <= 1e-9 * (1.0 + w[j].abs()));
        }
    }

    #[test]
    fn linear_predictors_are_equivariant_in_targets(scale in -4.0f64..4.0, seed in any::<u64>()) {
        let task = TaskDistribution::new(3, 0.1, 1.0, seed).unwrap().sample(0, 5, 1);
        let q = task.queries.row(0);
        for spec in ["ols", "ridge(0.3)", "gd(0.1)", "sgd(0.05,0.1)"] {
            let p = parse_predictor(spec, 0.1, 1.0).unwrap();
            let a = p.predict(&task.context, q, QueryKey::default()).unwrap();
            let b = p.predict(&task.context.scaled_targets(scale), q, QueryKey::default()).unwrap();
            prop_assert!((b - scale * a).abs() <= 1e-9 * (1.0 + a.abs() * scale.abs()));
        }
    }

    #[test]
    fn standardizer_inverts(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..10)) {
        let s = Standardizer::fit(3, rows.iter().map(|r| r.as_slice()));
        prop_assert!(s.scale.iter().all(|&v| v > 0.0));
        for r in &rows {
            for (a, b) in s.invert(&s.apply(r)).iter().zip(r) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
