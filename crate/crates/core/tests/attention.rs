//! Attention operators against an explicit-loop reference.

use efaseg::attention::{
    attention_forward, attention_map, efa_forward, embedded_sra_forward, spatial_reduce, standalone, AttentionConfig,
    Pooling, Variant,
};
use efaseg::numerics::gradcheck::{self, distinct_tensor, random_tensor};
use efaseg::numerics::{Graph, Tensor};
use efaseg::params::{Bound, Linear, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{max_diff_to_reference, random_case, reference, run, Case};

fn set_identity(store: &mut ParamStore, lin: &Linear) {
    let n = lin.fan_in;
    store.set(lin.weight, Tensor::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })).unwrap();
    if let Some(b) = lin.bias {
        store.set(b, Tensor::zeros(&[n])).unwrap();
    }
}

// ---- oracle agreement ----

#[test]
fn efa_matches_loop_reference_on_60_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let worst = (0..60)
        .map(|_| max_diff_to_reference(&random_case(&mut rng, Variant::EmbeddingFree), false))
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "worst deviation {worst:e}");
}

#[test]
fn embedded_matches_loop_reference_on_60_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let worst =
        (0..60).map(|_| max_diff_to_reference(&random_case(&mut rng, Variant::Embedded), true)).fold(0.0, f64::max);
    assert!(worst < 1e-6, "worst deviation {worst:e}");
}

#[test]
fn attention_map_matches_reference_and_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..20 {
        let variant = if i % 2 == 0 { Variant::EmbeddingFree } else { Variant::Embedded };
        let case = random_case(&mut rng, variant);
        let att = run(&case, |g, p, x| attention_map(g, p, x, &case.cfg, &case.w, case.r));
        let (_, maps) = reference(&case.x, &case.cfg, &case.store, &case.w, case.r, variant == Variant::Embedded);
        let flat: Vec<f64> = maps.into_iter().flatten().flatten().flatten().collect();
        let diff = flat.iter().zip(att.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
        let keys = *att.shape().last().unwrap();
        for row in att.data().chunks(keys) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

// ---- spatial reduction ----

#[test]
fn spatial_reduce_identity_block_mean_and_token_count() {
    let mut g = Graph::new();
    let p = Bound::from_vars(Vec::new());
    let grid = Tensor::new(&[1, 4, 4, 1], (1..=16).map(f64::from).collect()).unwrap();
    let x = g.constant(grid.clone());
    let same = spatial_reduce(&mut g, &p, x, 1, Pooling::Average, None).unwrap();
    assert_eq!(g.value(same), &grid);
    let pooled = spatial_reduce(&mut g, &p, x, 2, Pooling::Average, None).unwrap();
    assert_eq!(g.value(pooled).data(), &[3.5, 5.5, 11.5, 13.5]);

    let x = g.constant(Tensor::zeros(&[1, 14, 14, 4]));
    let pooled = spatial_reduce(&mut g, &p, x, 2, Pooling::Average, None).unwrap();
    assert_eq!(g.shape(pooled)[1] * g.shape(pooled)[2], 49);
    assert!(spatial_reduce(&mut g, &p, x, 0, Pooling::Average, None).is_err());
}

// ---- structural properties ----

#[test]
fn single_token_with_identity_output_returns_input() {
    let cfg = AttentionConfig::new(5, 1);
    let (mut store, w) = standalone(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    set_identity(&mut store, &w.output);
    let x = random_tensor(&[1, 1, 1, 5], &mut ChaCha8Rng::seed_from_u64(2));
    let case = Case { cfg, store, w, x: x.clone(), r: 1 };
    let out = run(&case, |g, p, v| efa_forward(g, p, v, &case.cfg, &case.w, 1));
    assert!(out.max_abs_diff(&x) < 1e-15);
}

#[test]
fn collapsed_keys_make_every_position_equal() {
    let cfg = AttentionConfig::new(8, 2);
    let (store, w) = standalone(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let x = random_tensor(&[1, 4, 4, 8], &mut ChaCha8Rng::seed_from_u64(4));
    let case = Case { cfg, store, w, x, r: 8 };
    let out = run(&case, |g, p, v| efa_forward(g, p, v, &case.cfg, &case.w, 8));
    let first = out.data()[..8].to_vec();
    for pos in out.data().chunks(8) {
        for (a, b) in pos.iter().zip(&first) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let att = run(&case, |g, p, v| attention_map(g, p, v, &case.cfg, &case.w, 8));
    assert_eq!(att.shape(), &[1, 2, 16, 1]);
    assert!(att.data().iter().all(|&v| v == 1.0));
}

#[test]
fn identity_embeddings_reduce_to_embedding_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for pooling in [Pooling::Average, Pooling::Max, Pooling::Overlapped] {
        let cfg = AttentionConfig { variant: Variant::Embedded, pooling, ..AttentionConfig::new(8, 2) };
        let (mut store, w) = standalone(&cfg, &mut rng).unwrap();
        for lin in [&w.query, &w.key, &w.value].into_iter().flatten() {
            set_identity(&mut store, lin);
        }
        let x = random_tensor(&[2, 5, 3, 8], &mut rng);
        let case = Case { cfg, store, w, x, r: 2 };
        let a = run(&case, |g, p, v| embedded_sra_forward(g, p, v, &case.cfg, &case.w, 2));
        let b = run(&case, |g, p, v| efa_forward(g, p, v, &case.cfg, &case.w, 2));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn embedded_variant_adds_exactly_three_c_squared_parameters() {
    for c in [4, 16, 128] {
        let ef = AttentionConfig::new(c, 1);
        let em = AttentionConfig { variant: Variant::Embedded, ..ef.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s1, w1) = standalone(&ef, &mut rng).unwrap();
        let (s2, w2) = standalone(&em, &mut rng).unwrap();
        assert_eq!(s2.num_scalars() - s1.num_scalars(), 3 * c * c);
        assert_eq!(w2.num_params() - w1.num_params(), 3 * c * c);
        assert!(w1.query.is_none() && w1.key.is_none() && w1.value.is_none());
    }
    let at128 = AttentionConfig { variant: Variant::Embedded, ..AttentionConfig::new(128, 1) };
    let (_, w) = standalone(&at128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(w.num_params() - 128 * 128, 49_152);
}

#[test]
fn output_shape_is_invariant_to_the_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for variant in [Variant::EmbeddingFree, Variant::Embedded] {
        for pooling in [Pooling::Average, Pooling::Max, Pooling::Overlapped] {
            let cfg = AttentionConfig { variant, pooling, sr_projection: true, ..AttentionConfig::new(8, 4) };
            let (store, w) = standalone(&cfg, &mut rng).unwrap();
            let x = random_tensor(&[2, 6, 5, 8], &mut rng);
            let case = Case { cfg, store, w, x, r: 1 };
            for r in [1, 2, 4, 8] {
                let out = run(&case, |g, p, v| attention_forward(g, p, v, &case.cfg, &case.w, r));
                assert_eq!(out.shape(), case.x.shape());
            }
        }
    }
}

#[test]
fn channel_permutation_commutes_with_embedding_free_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = 6;
    let perm = [3, 0, 5, 1, 4, 2];
    for r in [1, 2, 3] {
        let cfg = AttentionConfig::new(c, 1);
        let (store, w) = standalone(&cfg, &mut rng).unwrap();
        let x = random_tensor(&[1, 4, 5, c], &mut rng);
        let case = Case { cfg: cfg.clone(), store: store.clone(), w: w.clone(), x: x.clone(), r };
        let out = run(&case, |g, p, v| efa_forward(g, p, v, &case.cfg, &case.w, r));

        let xp = Tensor::from_fn(x.shape(), |i| x.get(&[i[0], i[1], i[2], perm[i[3]]]));
        let wo = store.get(w.output.weight).clone();
        let mut pstore = store.clone();
        pstore.set(w.output.weight, Tensor::from_fn(&[c, c], |i| wo.get(&[perm[i[0]], perm[i[1]]]))).unwrap();
        let pcase = Case { cfg, store: pstore, w: w.clone(), x: xp, r };
        let pout = run(&pcase, |g, p, v| efa_forward(g, p, v, &pcase.cfg, &pcase.w, r));
        let expect = Tensor::from_fn(out.shape(), |i| out.get(&[i[0], i[1], i[2], perm[i[3]]]));
        assert!(pout.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn constant_input_gives_constant_output_under_average_pooling() {
    let cfg = AttentionConfig::new(4, 2);
    let (store, w) = standalone(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let x = Tensor::from_fn(&[1, 5, 7, 4], |i| [0.3, -1.2, 0.8, 2.0][i[3]]);
    let case = Case { cfg, store, w, x, r: 1 };
    for r in [1, 2, 3, 4, 8] {
        let out = run(&case, |g, p, v| efa_forward(g, p, v, &case.cfg, &case.w, r));
        let first = out.data()[..4].to_vec();
        for pos in out.data().chunks(4) {
            for (a, b) in pos.iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    assert!(AttentionConfig::new(6, 4).validate().is_err());
    assert!(AttentionConfig::new(0, 1).validate().is_err());
    assert!(AttentionConfig { train_ratio: 0, ..AttentionConfig::new(4, 1) }.validate().is_err());
    let cfg = AttentionConfig::new(4, 2);
    let (store, w) = standalone(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
    assert!(matches!(efa_forward(&mut g, &p, x, &cfg, &w, 1), Err(efaseg::Error::Dimension(_))));
    assert!("diagonal".parse::<Pooling>().is_err());
    assert_eq!("embedding-free".parse::<Variant>().unwrap(), Variant::EmbeddingFree);
}

// ---- gradients ----

fn grad_check_layer(cfg: &AttentionConfig, r: usize, seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (store, w) = standalone(cfg, &mut rng).unwrap();
        let shape = [1, 4, 3, cfg.channels];
        // Max pooling has kinks at ties; keep inputs well separated.
        let x = if cfg.pooling == Pooling::Max {
            distinct_tensor(&shape, &mut rng)
        } else {
            random_tensor(&shape, &mut rng)
        };
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let report = gradcheck::check(&inputs, seed, |g, vars| {
            let p = Bound::from_vars(vars[1..].to_vec());
            attention_forward(g, &p, vars[0], cfg, &w, r)
        })
        .unwrap();
        worst = worst.max(report.max_rel_err);
    }
    worst
}

#[test]
fn efa_gradients_match_finite_differences() {
    for (pooling, r) in [(Pooling::Average, 2), (Pooling::Overlapped, 2), (Pooling::Average, 1)] {
        let cfg = AttentionConfig { pooling, ..AttentionConfig::new(4, 2) };
        let err = grad_check_layer(&cfg, r, 20);
        assert!(err < 1e-6, "{pooling:?} r={r}: {err:e}");
    }
}

#[test]
fn embedded_and_projected_gradients_match_finite_differences() {
    let cfg = AttentionConfig {
        variant: Variant::Embedded,
        sr_projection: true,
        bias_free_projections: false,
        ..AttentionConfig::new(4, 2)
    };
    let err = grad_check_layer(&cfg, 2, 20);
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn max_pooled_gradients_match_finite_differences() {
    let cfg = AttentionConfig { pooling: Pooling::Max, ..AttentionConfig::new(4, 1) };
    let err = grad_check_layer(&cfg, 2, 20);
    assert!(err < 1e-6, "{err:e}");
}
