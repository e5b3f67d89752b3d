use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};

use super::*;
use crate::data::{leave_one_out_split, Interaction, InteractionDataset, RawDataset, SplitMode};
use crate::linalg::{matmul, matmul_bt, softmax_rows, Matrix};
use crate::rng::SimRng;

fn toy_shape() -> ModelShape {
    ModelShape {
        num_items: 5,
        text_dim: 6,
        embed_dim: 4,
        heads: 2,
        ffn_dim: 8,
        umlp_hidden: 8,
        score_hidden: [16, 8],
        max_seq_len: 3,
        use_transformer: true,
        use_joint_embedding: true,
        positional: false,
    }
}

fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random parameters with every entry in [−1, 1] (biases included) so no
/// gradient path is trivially zero.
fn random_params(shape: &ModelShape, seed: u64) -> ClientModelParams {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut p = ClientModelParams::init(shape, 0.5, &mut rng).unwrap();
    for (_, m) in p.tensors_mut() {
        m.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    p.item_table.row_mut(0).fill(0.0);
    p
}

fn toy_batch() -> TrainingBatch {
    TrainingBatch {
        sequence: vec![0, 2, 4],
        candidates: vec![3, 5],
        labels: vec![1.0, 0.0],
    }
}

/// Central differences of `total_loss` over every parameter entry.
fn numeric_gradient(
    params: &ClientModelParams,
    shape: &ModelShape,
    text: &[f64],
    batch: &TrainingBatch,
    global: &Matrix,
    lambda: f64,
) -> ClientModelParams {
    let h = 1e-5;
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    let n_tensors = params.tensors().len();
    for t in 0..n_tensors {
        let len = params.tensors()[t].1.len();
        for i in 0..len {
            let orig = probe.tensors()[t].1.as_slice()[i];
            probe.tensors_mut()[t].1.as_mut_slice()[i] = orig + h;
            let up = total_loss(&probe, shape, text, batch, global, lambda).unwrap();
            probe.tensors_mut()[t].1.as_mut_slice()[i] = orig - h;
            let down = total_loss(&probe, shape, text, batch, global, lambda).unwrap();
            probe.tensors_mut()[t].1.as_mut_slice()[i] = orig;
            grad.tensors_mut()[t].1.as_mut_slice()[i] = (up - down) / (2.0 * h);
        }
    }
    grad
}

fn assert_grads_match(analytic: &ClientModelParams, numeric: &ClientModelParams) {
    for ((name, a), (_, n)) in analytic.tensors().iter().zip(numeric.tensors()) {
        for (i, (av, nv)) in a.as_slice().iter().zip(n.as_slice()).enumerate() {
            let tol = 1e-8 + 1e-4 * av.abs().max(nv.abs());
            assert!((av - nv).abs() <= tol, "{name}[{i}]: analytic {av} vs numeric {nv}");
        }
    }
}

fn check_gradients(shape: &ModelShape, seed: u64) {
    let params = random_params(shape, seed);
    let mut rng = SimRng::seed_from_u64(seed + 100);
    let text = random_vec(shape.text_dim, &mut rng);
    let global = Matrix::from_fn(shape.num_items + 1, shape.embed_dim, |r, _| {
        if r == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) }
    });
    let batch = toy_batch();
    let (loss, analytic) = loss_and_grad(&params, shape, &text, &batch, &global, 0.3).unwrap();
    let direct = total_loss(&params, shape, &text, &batch, &global, 0.3).unwrap();
    assert!((loss - direct).abs() < 1e-12);
    let numeric = numeric_gradient(&params, shape, &text, &batch, &global, 0.3);
    assert_grads_match(&analytic, &numeric);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_gradients(&toy_shape(), seed);
    }
}

#[test]
fn ablation_and_positional_gradients_match_finite_differences() {
    let mut shape = toy_shape();
    shape.positional = true;
    check_gradients(&shape, 7);
    let mut shape = toy_shape();
    shape.use_transformer = false;
    check_gradients(&shape, 8);
    let mut shape = toy_shape();
    shape.use_joint_embedding = false;
    check_gradients(&shape, 9);
    shape.use_transformer = false;
    check_gradients(&shape, 10);
}

#[test]
fn joint_embed_examples() {
    let mut shape = toy_shape();
    shape.text_dim = 2;
    shape.embed_dim = 2;
    shape.heads = 1;
    let mut p = ClientModelParams::init(&shape, 0.01, &mut SimRng::seed_from_u64(0)).unwrap();
    p.user_weight = Matrix::zeros(2, 2);
    assert_eq!(joint_embed(&p, &shape, &[0.3, 0.7]).unwrap(), vec![0.0, 0.0]);
    p.user_weight = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
    assert_eq!(joint_embed(&p, &shape, &[1.0, 0.0]).unwrap(), vec![1.0, 2.0]);
    assert!(matches!(joint_embed(&p, &shape, &[1.0, 0.0, 0.0]), Err(crate::Error::Dimension { .. })));
}

fn identity_transformer(shape: &ModelShape) -> ClientModelParams {
    let mut p = random_params(shape, 1);
    let d = shape.embed_dim;
    let t = p.transformer.as_mut().unwrap();
    t.wq = Matrix::identity(d);
    t.wk = Matrix::identity(d);
    t.wv = Matrix::identity(d);
    t.wo = Matrix::identity(d);
    t.ffn1.w.fill(0.0);
    t.ffn1.b.fill(0.0);
    t.ffn2.w.fill(0.0);
    t.ffn2.b.fill(0.0);
    p
}

#[test]
fn single_item_sequence_doubles_embedding() {
    let shape = toy_shape();
    let p = identity_transformer(&shape);
    let out = transformer_forward(&p, &shape, &[0, 0, 3]).unwrap();
    // Attention over one position returns V = x; the residual adds x again;
    // a zero FFN contributes nothing.
    let expected: Vec<f64> = p.item_table.row(3).iter().map(|v| 2.0 * v).collect();
    for (o, e) in out.iter().zip(&expected) {
        assert!((o - e).abs() < 1e-15);
    }
}

#[test]
fn all_padding_yields_zero() {
    let shape = toy_shape();
    let p = random_params(&shape, 2);
    assert_eq!(transformer_forward(&p, &shape, &[0, 0, 0]).unwrap(), vec![0.0; 4]);
    assert_eq!(transformer_forward(&p, &shape, &[]).unwrap(), vec![0.0; 4]);
}

#[test]
fn mean_pooling_is_order_invariant_without_positions() {
    let shape = toy_shape();
    let p = random_params(&shape, 3);
    let a = transformer_forward(&p, &shape, &[1, 2, 5]).unwrap();
    for perm in [[2, 1, 5], [5, 2, 1], [1, 5, 2]] {
        let b = transformer_forward(&p, &shape, &perm).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let mut with_pos = shape.clone();
    with_pos.positional = true;
    let p = random_params(&with_pos, 3);
    let a = transformer_forward(&p, &with_pos, &[1, 2, 5]).unwrap();
    let b = transformer_forward(&p, &with_pos, &[5, 2, 1]).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn padding_never_changes_output() {
    let mut shape = toy_shape();
    shape.max_seq_len = 8;
    for positional in [false, true] {
        shape.positional = positional;
        let p = random_params(&shape, 4);
        let base = transformer_forward(&p, &shape, &[3, 1]).unwrap();
        for seq in [vec![0, 3, 1], vec![0, 0, 0, 0, 0, 3, 1], vec![3, 1, 0, 0]] {
            let other = transformer_forward(&p, &shape, &seq).unwrap();
            let diff = base.iter().zip(&other).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff < 1e-10, "{seq:?}: {diff}");
        }
    }
}

#[test]
fn single_head_matches_direct_attention() {
    let mut shape = toy_shape();
    shape.heads = 1;
    let mut p = random_params(&shape, 5);
    let t = p.transformer.as_mut().unwrap();
    t.wo = Matrix::identity(4);
    let seq = [2u32, 4, 1];
    let t = p.transformer.as_ref().unwrap();

    let x = Matrix::from_fn(3, 4, |r, c| p.item_table.get(seq[r] as usize, c));
    let q = matmul(&x, &t.wq).unwrap();
    let k = matmul(&x, &t.wk).unwrap();
    let v = matmul(&x, &t.wv).unwrap();
    let attn = matmul(&softmax_rows(&matmul_bt(&q, &k).unwrap().scaled(0.5)), &v).unwrap();
    let mut expected = vec![0.0; 4];
    for r in 0..3 {
        let h1: Vec<f64> = (0..4).map(|c| x.get(r, c) + attn.get(r, c)).collect();
        let hidden: Vec<f64> = (0..8)
            .map(|j| {
                let s: f64 = (0..4).map(|i| h1[i] * t.ffn1.w.get(i, j)).sum::<f64>() + t.ffn1.b.get(0, j);
                s.max(0.0)
            })
            .collect();
        for c in 0..4 {
            let f: f64 = (0..8).map(|j| hidden[j] * t.ffn2.w.get(j, c)).sum::<f64>() + t.ffn2.b.get(0, c);
            expected[c] += (h1[c] + f) / 3.0;
        }
    }
    let out = transformer_forward(&p, &shape, &seq).unwrap();
    for (o, e) in out.iter().zip(&expected) {
        assert!((o - e).abs() < 1e-12, "{o} vs {e}");
    }
}

#[test]
fn predict_examples() {
    let shape = toy_shape();
    let mut p = random_params(&shape, 6);
    let text = vec![0.1; 6];
    for layer in &mut p.score {
        layer.w.fill(0.0);
        layer.b.fill(0.0);
    }
    assert_eq!(predict(&p, &shape, &text, &[1, 2, 3], 4).unwrap(), 0.5);

    let p = random_params(&shape, 6);
    for item in 1..=5 {
        let y = predict(&p, &shape, &text, &[1, 2, 3], item).unwrap();
        assert!(y > 0.0 && y < 1.0);
    }
    assert!(matches!(predict(&p, &shape, &text, &[1], 0), Err(crate::Error::ItemId { .. })));
    assert!(matches!(predict(&p, &shape, &text, &[1], 6), Err(crate::Error::ItemId { .. })));
}

#[test]
fn bce_examples() {
    assert!(bce_loss(1.0, 1.0 - 1e-12) < 1e-11);
    assert!((bce_loss(1.0, 0.5) - 2f64.ln()).abs() < 1e-15);
    assert!((bce_loss(0.0, 0.5) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn reg_examples() {
    let a = Matrix::from_rows(&[[1.0, 1.0]]);
    let b = Matrix::from_rows(&[[0.0, 0.0]]);
    assert_eq!(reg_term(&a, &a).unwrap(), 0.0);
    assert_eq!(reg_term(&a, &b).unwrap(), 1.0);
    assert!(reg_term(&a, &Matrix::zeros(2, 2)).is_err());
}

#[test]
fn total_loss_reduces_to_bce() {
    let shape = toy_shape();
    let p = random_params(&shape, 12);
    let text = vec![0.2; 6];
    let batch = toy_batch();

    // Scalar oracle: per-candidate predictions through the public API.
    let bce: f64 = batch
        .candidates
        .iter()
        .zip(&batch.labels)
        .map(|(&c, &y)| bce_loss(y, predict(&p, &shape, &text, &batch.sequence, c).unwrap()))
        .sum::<f64>()
        / 2.0;
    let global_same = p.item_table.clone();
    let mut global_other = p.item_table.clone();
    global_other.row_mut(5).iter_mut().for_each(|v| *v += 1.0);

    let l0 = total_loss(&p, &shape, &text, &batch, &global_other, 0.0).unwrap();
    assert!((l0 - bce).abs() < 1e-12);
    let same = total_loss(&p, &shape, &text, &batch, &global_same, 5.0).unwrap();
    assert!((same - bce).abs() < 1e-12);
    // Only item 5 is a negative; its row differs by 1 in each of 4 entries.
    let reg = total_loss(&p, &shape, &text, &batch, &global_other, 0.5).unwrap();
    assert!((reg - (bce + 0.5 * 1.0)).abs() < 1e-12);
}

fn toy_dataset() -> InteractionDataset {
    let recs: Vec<Interaction> = [(1u32, vec![1u32, 2, 3, 4, 5, 6]), (2, vec![7, 8, 9, 10, 11])]
        .into_iter()
        .flat_map(|(u, items)| {
            items.into_iter().enumerate().map(move |(t, i)| Interaction {
                user: u,
                item: i,
                weight: 1.0,
                timestamp: t as i64,
            })
        })
        .collect();
    let raw = RawDataset::from_interactions(&recs, 30, BTreeMap::new()).unwrap();
    leave_one_out_split(&raw, SplitMode::First).unwrap()
}

fn train_shape() -> ModelShape {
    ModelShape {
        num_items: 30,
        max_seq_len: 5,
        ..toy_shape()
    }
}

#[test]
fn zero_learning_rate_leaves_params() {
    let ds = toy_dataset();
    let shape = train_shape();
    let mut p = ClientModelParams::init(&shape, 0.01, &mut SimRng::seed_from_u64(1)).unwrap();
    let before = p.clone();
    let global = p.item_table.clone();
    let config = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let report = local_train(&mut p, &shape, &[0.4; 6], &ds, 0, &global, &config, 1, &mut SimRng::seed_from_u64(2)).unwrap();
    assert_eq!(p, before);
    assert_eq!(report.steps, 1);
}

#[test]
fn one_small_step_decreases_loss() {
    let shape = toy_shape();
    let p = random_params(&shape, 13);
    let text = vec![0.3; 6];
    let batch = TrainingBatch {
        sequence: vec![1, 2, 3],
        candidates: vec![4],
        labels: vec![1.0],
    };
    let global = p.item_table.clone();
    let (before, grad) = loss_and_grad(&p, &shape, &text, &batch, &global, 0.1).unwrap();
    let mut stepped = p.clone();
    stepped.sgd_step(&grad, 1e-3).unwrap();
    let after = total_loss(&stepped, &shape, &text, &batch, &global, 0.1).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn split_step_scales_only_the_item_table() {
    let shape = toy_shape();
    let p = random_params(&shape, 14);
    let grad = random_params(&shape, 15);
    let mut plain = p.clone();
    plain.sgd_step(&grad, 0.1).unwrap();
    let mut split = p.clone();
    split.sgd_step_split(&grad, 0.1, 0.1).unwrap();
    assert_eq!(plain, split);

    let mut scaled = p.clone();
    scaled.sgd_step_split(&grad, 0.1, 2.0).unwrap();
    assert_eq!(scaled.score, plain.score);
    assert_eq!(scaled.user_weight, plain.user_weight);
    let expect = p.item_table.get(3, 1) - 2.0 * grad.item_table.get(3, 1);
    assert!((scaled.item_table.get(3, 1) - expect).abs() < 1e-15);
    assert!(scaled.item_table.row(0).iter().all(|&v| v == 0.0));
}

#[test]
fn training_is_deterministic_and_keeps_padding_zero() {
    let ds = toy_dataset();
    let shape = train_shape();
    let init = ClientModelParams::init(&shape, 0.01, &mut SimRng::seed_from_u64(1)).unwrap();
    let global = init.item_table.clone();
    let config = TrainConfig {
        learning_rate: 0.5,
        local_epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut p = init.clone();
        local_train(&mut p, &shape, &[0.4; 6], &ds, 1, &global, &config, 1, &mut SimRng::seed_from_u64(9)).unwrap();
        p
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_ne!(a, init);
    assert!(a.item_table.row(0).iter().all(|&v| v == 0.0));
    assert!(a.all_finite());
}

#[test]
fn upload_without_noise_is_exact() {
    let shape = toy_shape();
    let p = random_params(&shape, 14);
    let packet = prepare_upload(&p, 3, 0.0, &mut SimRng::seed_from_u64(0)).unwrap();
    assert_eq!(packet.user_weight, p.user_weight);
    assert_eq!(packet.item_table, p.item_table);
    assert_eq!(packet.client_id, 3);
    assert!(prepare_upload(&p, 3, -1.0, &mut SimRng::seed_from_u64(0)).is_err());
}

#[test]
fn laplace_noise_statistics() {
    let shape = ModelShape {
        num_items: 3124,
        embed_dim: 32,
        text_dim: 100,
        heads: 2,
        ..toy_shape()
    };
    let p = ClientModelParams::init(&shape, 0.01, &mut SimRng::seed_from_u64(0)).unwrap();
    let alpha = 0.2;
    let packet = prepare_upload(&p, 0, alpha, &mut SimRng::seed_from_u64(42)).unwrap();
    let mut diffs: Vec<f64> = packet.user_weight.sub(&p.user_weight).unwrap().into_vec();
    diffs.extend(packet.item_table.sub(&p.item_table).unwrap().as_slice()[32..].iter());
    assert!(diffs.len() >= 100_000);
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    assert!(mean.abs() < 3.0 * alpha * (2.0 / n).sqrt(), "mean {mean}");
    // Laplace(0, b) has variance 2b².
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    assert!((var - 2.0 * alpha * alpha).abs() < 0.05 * 2.0 * alpha * alpha, "var {var}");
    assert!(packet.item_table.row(0).iter().all(|&v| v == 0.0));
}

#[test]
fn noise_differs_across_client_streams() {
    let shape = toy_shape();
    let p = random_params(&shape, 15);
    let a = prepare_upload(&p, 0, 0.1, &mut crate::rng::stream_rng(1, crate::rng::Stream::Noise, 0, 1)).unwrap();
    let b = prepare_upload(&p, 1, 0.1, &mut crate::rng::stream_rng(1, crate::rng::Stream::Noise, 1, 1)).unwrap();
    assert_ne!(a.user_weight, b.user_weight);
}

#[test]
fn ablation_switches_touch_only_their_pathway() {
    let shape = toy_shape();
    let full = ClientModelParams::init(&shape, 0.01, &mut SimRng::seed_from_u64(0)).unwrap();
    let no_t = ClientModelParams::init(&ModelShape { use_transformer: false, ..shape.clone() }, 0.01, &mut SimRng::seed_from_u64(0)).unwrap();
    let no_j = ClientModelParams::init(&ModelShape { use_joint_embedding: false, ..shape.clone() }, 0.01, &mut SimRng::seed_from_u64(0)).unwrap();
    let no_b = ClientModelParams::init(
        &ModelShape {
            use_transformer: false,
            use_joint_embedding: false,
            ..shape.clone()
        },
        0.01,
        &mut SimRng::seed_from_u64(0),
    )
    .unwrap();
    let d = shape.embed_dim;
    let transformer = 4 * d * d + d * shape.ffn_dim + shape.ffn_dim + shape.ffn_dim * d + d;
    let joint = shape.text_dim * d + d;
    assert_eq!(full.parameter_count() - no_t.parameter_count(), transformer);
    assert_eq!(full.parameter_count() - no_j.parameter_count(), joint - d);
    assert_eq!(full.parameter_count() - no_b.parameter_count(), transformer + joint - d);

    // With the transformer off, the user representation ignores the sequence.
    let shape_nt = ModelShape { use_transformer: false, ..shape.clone() };
    let text = vec![0.5; 6];
    let a = predict(&no_t, &shape_nt, &text, &[1, 2, 3], 4).unwrap();
    let b = predict(&no_t, &shape_nt, &text, &[5], 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(transformer_forward(&no_t, &shape_nt, &[1, 2]).unwrap(), vec![0.0; d]);
}

#[test]
fn sequence_padding_helper() {
    assert_eq!(pad_sequence(&[1, 2, 3], 5), vec![0, 0, 1, 2, 3]);
    assert_eq!(pad_sequence(&[1, 2, 3, 4], 2), vec![3, 4]);
}
