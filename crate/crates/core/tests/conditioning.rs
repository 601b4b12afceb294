mod common;

use common::*;
use pointfuse_core::conditioning::INPUT_FEATURES;
use pointfuse_core::conditioning::{LocalStructure, RawStructure};
use pointfuse_core::degrade::{DegradationSpec, SceneKind};
use pointfuse_core::io::RgbImage;
use pointfuse_tensor::grad_check_store;
use pointfuse_tensor::rng::standard_normal;
use pointfuse_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([rows, cols], standard_normal(&mut rng, rows * cols)).unwrap()
}

#[test]
fn shapes_follow_the_input_sizes() {
    let cfg = toy_config();
    let pair = scene_pair(
        SceneKind::Cube,
        400,
        24,
        &DegradationSpec {
            keep_ratio: 0.5,
            ..Default::default()
        },
    );
    let prep = prepared(&cfg, &pair);
    let n = prep.input_pos.len();
    assert_eq!(prep.local.level_a.len(), n.div_ceil(4));
    assert_eq!(prep.local.level_b.len(), n.div_ceil(16));
    let (model, store) = toy_model(&cfg, 1);
    let mut tape = Tape::no_grad();
    let conds = model.conditions(&mut tape, &store, &prep).unwrap();
    assert_eq!(tape.shape(conds.image), &[24 * 24, cfg.c1]);
    assert_eq!(tape.shape(conds.lifted), &[n, cfg.c2]);
    assert_eq!(tape.shape(conds.c_local), &[n.div_ceil(4), 3 + cfg.c_local]);
    assert_eq!(tape.value(conds.z).len(), cfg.z_dim);

    let points: Vec<_> = prep.input_pos[..50].to_vec();
    let raw =
        RawStructure::build(&cfg, &prep.camera, prep.depth_tol, &prep.input_pos, &points).unwrap();
    let c_raw = model
        .cond
        .build_raw_condition(&mut tape, &raw, &conds, &points)
        .unwrap();
    assert_eq!(tape.shape(c_raw), &[50, 3 + cfg.c1 + cfg.c2]);
}

#[test]
fn small_inputs_are_rejected() {
    let cfg = toy_config();
    let (model, store) = toy_model(&cfg, 1);
    let img = RgbImage::new(8, 8, vec![0.5; 8 * 8 * 3]).unwrap();
    let mut tape = Tape::<f32>::no_grad();
    assert!(model.cond.encode_image(&mut tape, &store, &img).is_err());
    let pts: Vec<_> = (0..10).map(|i| [i as f32, 0.0, 0.0]).collect();
    assert!(LocalStructure::build(&cfg, &pts, 16, 16).is_err());
}

#[test]
fn blank_image_with_zero_biases_gives_a_blank_map() {
    let cfg = toy_config();
    let (model, store) = toy_model(&cfg, 2);
    let mut tape = Tape::<f32>::no_grad();
    let blank = RgbImage::new(16, 16, vec![0.0; 16 * 16 * 3]).unwrap();
    let out = model.cond.encode_image(&mut tape, &store, &blank).unwrap();
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn hidden_points_get_no_image_features() {
    let cfg = toy_config();
    let pair = scene_pair(SceneKind::Cube, 256, 16, &DegradationSpec::default());
    let prep = prepared(&cfg, &pair);
    let (model, mut store) = toy_model(&cfg, 3);
    randomize(&mut store, 3);
    let behind = prep.camera.to_world_frame([0.1, -0.2, -1.0]);
    let points = vec![behind, prep.input_pos[0]];
    let raw =
        RawStructure::build(&cfg, &prep.camera, prep.depth_tol, &prep.input_pos, &points).unwrap();
    assert!(!raw.visible[0]);
    let mut tape = Tape::no_grad();
    let conds = model.conditions(&mut tape, &store, &prep).unwrap();
    let c_raw = model
        .cond
        .build_raw_condition(&mut tape, &raw, &conds, &points)
        .unwrap();
    let width = 3 + cfg.c1 + cfg.c2;
    let row = &tape.value(c_raw)[..width];
    assert!(row[3..3 + cfg.c1].iter().all(|&v| v == 0.0));
}

#[test]
fn coincident_point_takes_the_lifted_features() {
    let cfg = toy_config();
    let pair = scene_pair(SceneKind::TwoRoom, 256, 16, &DegradationSpec::default());
    let prep = prepared(&cfg, &pair);
    let (model, mut store) = toy_model(&cfg, 4);
    randomize(&mut store, 4);
    let picks = [0usize, 17, 40];
    let points: Vec<_> = picks.iter().map(|&i| prep.input_pos[i]).collect();
    let raw =
        RawStructure::build(&cfg, &prep.camera, prep.depth_tol, &prep.input_pos, &points).unwrap();
    let mut tape = Tape::no_grad();
    let conds = model.conditions(&mut tape, &store, &prep).unwrap();
    let c_raw = model
        .cond
        .build_raw_condition(&mut tape, &raw, &conds, &points)
        .unwrap();
    let width = 3 + cfg.c1 + cfg.c2;
    let lifted = tape.value(conds.lifted);
    let got = tape.value(c_raw);
    for (q, &i) in picks.iter().enumerate() {
        let want = &lifted[i * cfg.c2..(i + 1) * cfg.c2];
        let have = &got[q * width + 3 + cfg.c1..(q + 1) * width];
        for (a, b) in have.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn one_token_returns_its_value_row() {
    let cfg = toy_config();
    let (model, mut store) = toy_model(&cfg, 5);
    randomize(&mut store, 5);
    let token = random_tensor(1, cfg.c1, 6);
    let wv = store.get(store.id("local.attn.v.w").unwrap()).clone();
    let want: Vec<f32> = (0..cfg.d_k)
        .map(|j| {
            (0..cfg.c1)
                .map(|i| token.data()[i] * wv.data()[i * cfg.d_k + j])
                .sum()
        })
        .collect();
    let mut tape = Tape::no_grad();
    let tokens = tape.constant(token);
    let queries = tape.constant(random_tensor(7, cfg.local_widths[1], 7));
    let (out, attn) = model
        .cond
        .attend(&mut tape, &store, tokens, queries)
        .unwrap();
    assert!(tape.value(attn).iter().all(|&a| (a - 1.0).abs() < 1e-6));
    for row in tape.value(out).chunks(cfg.d_k) {
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn identical_keys_average_the_values() {
    let cfg = toy_config();
    let (model, mut store) = toy_model(&cfg, 8);
    randomize(&mut store, 8);
    // Zero key weights make every key the same vector.
    let k = store.id("local.attn.k.w").unwrap();
    store.get_mut(k).data_mut().fill(0.0);
    let toks = random_tensor(5, cfg.c1, 9);
    let wv = store.get(store.id("local.attn.v.w").unwrap()).clone();
    let mean_tok: Vec<f32> = (0..cfg.c1)
        .map(|i| (0..5).map(|r| toks.data()[r * cfg.c1 + i]).sum::<f32>() / 5.0)
        .collect();
    let want: Vec<f32> = (0..cfg.d_k)
        .map(|j| {
            (0..cfg.c1)
                .map(|i| mean_tok[i] * wv.data()[i * cfg.d_k + j])
                .sum()
        })
        .collect();
    let mut tape = Tape::no_grad();
    let tokens = tape.constant(toks);
    let queries = tape.constant(random_tensor(4, cfg.local_widths[1], 10));
    let (out, _) = model
        .cond
        .attend(&mut tape, &store, tokens, queries)
        .unwrap();
    for row in tape.value(out).chunks(cfg.d_k) {
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn conditioner_gradients_match_finite_differences() {
    let cfg = toy_config();
    let pair = scene_pair(
        SceneKind::SphereShell,
        96,
        16,
        &DegradationSpec {
            keep_ratio: 0.5,
            ..Default::default()
        },
    );
    let prep = prepared(&cfg, &pair);
    let (model, mut store) = toy_model(&cfg, 11);
    randomize(&mut store, 11);
    let store = store.cast::<f64>();
    let feats = prep.input_feats.cast::<f64>();
    let points: Vec<_> = prep.input_pos[..12]
        .iter()
        .map(|p| [p[0] + 0.01, p[1], p[2] - 0.02])
        .collect();
    let raw =
        RawStructure::build(&cfg, &prep.camera, prep.depth_tol, &prep.input_pos, &points).unwrap();
    let report = grad_check_store(&store, 1e-6, |tape, store| {
        let conds = model
            .cond
            .build(tape, store, &prep.local, &feats, &prep.image)?;
        let c_raw = model
            .cond
            .build_raw_condition(tape, &raw, &conds, &points)?;
        let a = tape.square(c_raw)?;
        let a = tape.sum(a)?;
        let b = tape.square(conds.c_local)?;
        let b = tape.sum(b)?;
        let c = tape.sum(conds.z)?;
        let ab = tape.add(a, b)?;
        Ok::<_, pointfuse_core::Error>(tape.add(ab, c)?)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), tokens in 1usize..20, queries in 1usize..20) {
        let cfg = toy_config();
        let (model, mut store) = toy_model(&cfg, 12);
        randomize(&mut store, seed);
        let mut tape = Tape::no_grad();
        let t = tape.constant(random_tensor(tokens, cfg.c1, seed ^ 1));
        let q = tape.constant(random_tensor(queries, cfg.local_widths[1], seed ^ 2));
        let (_, attn) = model.cond.attend(&mut tape, &store, t, q).unwrap();
        for row in tape.value(attn).chunks(tokens) {
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn global_condition_ignores_order_and_duplicates(seed in any::<u64>(), rows in 1usize..40) {
        let cfg = toy_config();
        let (model, mut store) = toy_model(&cfg, 13);
        randomize(&mut store, seed);
        let width = 3 + cfg.c_local;
        let base = random_tensor(rows, width, seed ^ 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = rand::seq::index::sample(&mut rng, rows, rows).into_vec();
        // Every row appears at least once, some twice.
        let order: Vec<usize> = perm.iter().copied().chain(perm.iter().take(rows / 2 + 1).copied()).collect();
        let shuffled: Vec<f32> = order.iter().flat_map(|&r| base.data()[r * width..(r + 1) * width].to_vec()).collect();
        let z_of = |t: Tensor<f32>| {
            let mut tape = Tape::no_grad();
            let c = tape.constant(t);
            let z = model.cond.build_global_condition(&mut tape, &store, c).unwrap();
            tape.value(z).to_vec()
        };
        let a = z_of(base.clone());
        let b = z_of(Tensor::new([order.len(), width], shuffled).unwrap());
        prop_assert_eq!(a, b);
    }
}

#[test]
fn input_features_have_the_documented_width() {
    let cfg = toy_config();
    let pair = scene_pair(SceneKind::Cube, 128, 16, &DegradationSpec::default());
    let prep = prepared(&cfg, &pair);
    assert_eq!(
        prep.input_feats.shape(),
        &[prep.input_pos.len(), INPUT_FEATURES]
    );
}
