mod common;

use std::time::Instant;

use approx::assert_abs_diff_eq;
use common::{hand_set, reference, rows, tiny_config};
use flat_core::data::Task;
use flat_core::encoder::{encode_columns, encode_dataset, pool_rows, ColumnEmbeddings, DatasetEmbedding};
use flat_core::gatnet::{attention_coeffs, build_nodes, gat_layer, predict, predict_with_attention};
use flat_core::hypernet::{generate_weights, normalize_raw_values, raw_outputs, HeadWeights, Theta, ThetaInit};
use flat_core::model::{cross_entropy, task_loss, FlatModel, ModelConfig, ModelParams};
use flat_core::numkernel::{gradient_error, Tape, Tensor};
use flat_core::rng::stream;
use flat_core::trainer::task_gradients;
use flat_core::FlatError;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_task(seed: u64, n_meta: usize, n_target: usize, n_cols: usize) -> Task {
    let mut rng = stream(seed, "task");
    let mut draw = |n: usize| {
        let x: Vec<f64> = (0..n * n_cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..n).map(|i| (x[i * n_cols] > x[i * n_cols + 1]) as usize).collect();
        (Tensor::matrix(n, n_cols, x), y)
    };
    let (mx, my) = draw(n_meta);
    let (tx, ty) = draw(n_target);
    Task::from_splits("random", mx, my, tx, Some(ty), 2)
}

fn default_model(seed: u64) -> FlatModel {
    FlatModel::new(ModelConfig::default(), ThetaInit::Fixed(1.0), &mut stream(seed, "init")).unwrap()
}

fn embeddings(model: &FlatModel, x: &Tensor, y: &[usize]) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let pooled = pool_rows(&mut tape, x, y, &b.encoder, &model.config).unwrap();
    let e = encode_dataset(&mut tape, pooled, &b.encoder).unwrap();
    let p = encode_columns(&mut tape, pooled, &b.encoder).unwrap();
    (tape.value(pooled).clone(), tape.value(e).clone(), tape.value(p).clone())
}

#[test]
fn pooling_with_identity_stub_gives_column_means() {
    let cfg = tiny_config();
    let mut model = FlatModel::new(cfg, ThetaInit::Fixed(1.0), &mut stream(0, "init")).unwrap();
    for (i, layer) in model.params.encoder.f1.layers.iter_mut().enumerate() {
        layer.weight = Tensor::zeros(layer.weight.shape());
        layer.bias = Tensor::zeros(layer.bias.shape());
        if i == 0 {
            layer.weight.data_mut()[0] = 1.0;
        }
    }
    let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 0.5, 3.0, 6.0, 1.5]);
    let (pooled, _, _) = embeddings(&model, &x, &[0, 1]);
    assert_eq!(pooled.shape(), &[3, 8]);
    assert_eq!(pooled.column(0), vec![2.0, 4.0, 1.0]);
    assert!(pooled.data().iter().enumerate().filter(|(i, _)| i % 8 != 0).all(|(_, v)| *v == 0.0));
}

#[test]
fn duplicating_meta_rows_leaves_pooling_unchanged() {
    let model = default_model(1);
    let x = Tensor::matrix(2, 2, vec![0.3, -1.0, 1.2, 0.4]);
    let doubled = Tensor::matrix(4, 2, vec![0.3, -1.0, 1.2, 0.4, 0.3, -1.0, 1.2, 0.4]);
    let (a, _, _) = embeddings(&model, &x, &[0, 1]);
    let (b, _, _) = embeddings(&model, &doubled, &[0, 1, 0, 1]);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn duplicated_column_gives_same_dataset_embedding() {
    let model = default_model(2);
    let single = Tensor::matrix(3, 1, vec![0.3, -1.0, 1.2]);
    let twice = Tensor::matrix(3, 2, vec![0.3, 0.3, -1.0, -1.0, 1.2, 1.2]);
    let (_, e1, p1) = embeddings(&model, &single, &[0, 1, 1]);
    let (_, e2, p2) = embeddings(&model, &twice, &[0, 1, 1]);
    assert!(e1.max_abs_diff(&e2) < 1e-12);
    assert_eq!(p2.row(0), p2.row(1));
    assert!((0..p1.cols()).all(|j| (p1.at(0, j) - p2.at(1, j)).abs() < 1e-12));
}

#[test]
fn encoder_is_row_invariant_and_column_equivariant() {
    let model = default_model(3);
    for seed in 0..20 {
        let task = random_task(seed, 10, 1, 2 + (seed as usize % 6));
        let (_, e, p) = embeddings(&model, &task.meta_x, &task.meta_y);
        let mut rng = stream(seed, "perm");
        let mut rperm: Vec<usize> = (0..task.n_meta()).collect();
        rperm.shuffle(&mut rng);
        let shuffled = task.permute_meta_rows(&rperm);
        let (_, e_r, p_r) = embeddings(&model, &shuffled.meta_x, &shuffled.meta_y);
        assert!(e.max_abs_diff(&e_r) <= 1e-9);
        assert!(p.max_abs_diff(&p_r) <= 1e-9);

        let mut cperm: Vec<usize> = (0..task.n_cols()).collect();
        cperm.shuffle(&mut rng);
        let permuted = task.permute_columns(&cperm);
        let (_, e_c, p_c) = embeddings(&model, &permuted.meta_x, &permuted.meta_y);
        assert!(e.max_abs_diff(&e_c) <= 1e-9);
        assert!(p.select_rows(&cperm).max_abs_diff(&p_c) <= 1e-9);
    }
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let model = FlatModel::new(cfg.clone(), ThetaInit::Fixed(1.0), &mut stream(4, "init")).unwrap();
    let x = Tensor::matrix(3, 2, vec![0.2, -0.7, 1.1, 0.4, -0.9, 0.8]);
    let y = [0, 1, 1];
    let head = Tensor::matrix(1, cfg.dataset_dim, (0..cfg.dataset_dim).map(|i| 0.3 - 0.1 * i as f64).collect());
    let value = |params: &ModelParams| {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let pooled = pool_rows(&mut tape, &x, &y, &b.encoder, &cfg).unwrap();
        let e = encode_dataset(&mut tape, pooled, &b.encoder).unwrap();
        let h = tape.constant(head.clone());
        let prod = tape.mul(e, h).unwrap();
        let s = tape.sum_all(prod);
        (tape, b, s)
    };
    let (mut tape, b, s) = value(&model.params);
    tape.backward(s).unwrap();
    let all: Vec<Tensor> = model.params.tensors().into_iter().cloned().collect();
    let ids = b.tensors();
    let mut worst: f64 = 0.0;
    for (i, name) in model.params.named().iter().map(|(n, _)| n.clone()).enumerate() {
        if !name.starts_with("encoder.f") {
            continue;
        }
        let analytic = tape.grad(*ids[i]).unwrap_or_else(|| Tensor::zeros(all[i].shape()));
        let err = gradient_error(
            |p: &[Tensor]| {
                let mut m = model.params.clone();
                *m.tensors_mut()[i] = p[0].clone();
                let (t, _, s) = value(&m);
                t.value(s).item()
            },
            &all[i..=i],
            &[analytic],
            1e-6,
        );
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn hypernet_matches_hand_evaluation_on_toy_embedding() {
    let cfg = tiny_config();
    let mut params = ModelParams::init(&cfg, &Theta::uniform(1.0), &mut stream(5, "init")).unwrap();
    hand_set(&mut params, 0.2);
    params.decoder.log_theta = Theta {
        attention: Tensor::scalar(0.7f64.ln()),
        bias: Tensor::scalar(1.9f64.ln()),
        transform: Tensor::scalar(2.5f64.ln()),
        classifier: Tensor::scalar(0.4f64.ln()),
    };
    let e: Vec<f64> = (0..8).map(|i| 0.5 - 0.15 * i as f64).collect();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let e_id = tape.constant(Tensor::matrix(1, 8, e.clone()));
    let gw = generate_weights(&mut tape, e_id, &b.decoder, &cfg).unwrap().values(&tape);

    let h0 = &params.decoder.generators[0];
    let width = h0.shape()[1];
    let raw: Vec<f64> = (0..width).map(|c| (0..8).map(|r| e[r] * h0.data()[r * width + c]).sum()).collect();
    // Layer 0, single head: a (16), b (8), W (8 x 5).
    let a = common::unit_scaled(&raw[0..16], 0.7);
    let bias = common::unit_scaled(&raw[16..24], 1.9);
    let w = common::unit_scaled(&raw[24..64], 2.5);
    let head = &gw.layers[0][0];
    for (x, y) in head.attention.data().iter().zip(&a) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
    for (x, y) in head.bias.data().iter().zip(&bias) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
    assert_eq!(head.transform.shape(), &[8, 5]);
    for (x, y) in head.transform.data().iter().zip(&w) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
    assert_eq!(gw.classifier.shape(), &[2, 4]);
    assert_abs_diff_eq!(gw.classifier.l2_norm(), 0.4, epsilon = 1e-12);
}

#[test]
fn scaling_the_embedding_leaves_generated_weights_unchanged() {
    let model = default_model(6);
    let mut rng = stream(6, "e");
    let e = Tensor::matrix(1, 64, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let a = model.generated_weights(&DatasetEmbedding(e.clone())).unwrap();
    let b = model.generated_weights(&DatasetEmbedding(e.map(|v| 2.0 * v))).unwrap();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (ha, hb) in la.iter().zip(lb) {
            assert!(ha.attention.max_abs_diff(&hb.attention) < 1e-12);
            assert!(ha.bias.max_abs_diff(&hb.bias) < 1e-12);
            assert!(ha.transform.max_abs_diff(&hb.transform) < 1e-12);
        }
    }
    assert!(a.classifier.max_abs_diff(&b.classifier) < 1e-12);
}

#[test]
fn unit_transform_norm_gives_unit_frobenius_blocks() {
    let model = default_model(7);
    let e = DatasetEmbedding(Tensor::matrix(1, 64, (0..64).map(|i| (i as f64 * 0.3).cos()).collect()));
    let gw = model.generated_weights(&e).unwrap();
    assert_eq!(gw.layers.len(), 2);
    for layer in &gw.layers {
        assert_eq!(layer.len(), 2);
        for head in layer {
            assert!((head.transform.l2_norm() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(gw.layers[0][0].transform.shape(), &[64, 16]);
    assert_eq!(gw.layers[1][1].transform.shape(), &[8, 128]);
    assert_eq!(gw.classifier.shape(), &[2, 16]);
}

#[test]
fn positive_rescaling_of_raw_outputs_is_ignored() {
    let cfg = ModelConfig::default();
    let mut rng = stream(8, "raw");
    let raw: Vec<Tensor> =
        (0..=cfg.gat_layers()).map(|l| Tensor::vector((0..cfg.generator_width(l)).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
    let theta = Theta { attention: 1.7, bias: 0.3, transform: 2.2, classifier: 0.9 };
    let base = normalize_raw_values(&raw, &theta, &cfg).unwrap();
    for c in [1e-3, 0.5, 7.0, 1e4] {
        let scaled: Vec<Tensor> = raw.iter().map(|r| r.map(|v| c * v)).collect();
        let other = normalize_raw_values(&scaled, &theta, &cfg).unwrap();
        for (la, lb) in base.layers.iter().zip(&other.layers) {
            for (ha, hb) in la.iter().zip(lb) {
                assert!(ha.transform.max_abs_diff(&hb.transform) <= 1e-12);
                assert!(ha.attention.max_abs_diff(&hb.attention) <= 1e-12);
                assert!(ha.bias.max_abs_diff(&hb.bias) <= 1e-12);
            }
        }
        assert!(base.classifier.max_abs_diff(&other.classifier) <= 1e-12);
    }
}

#[test]
fn generator_and_norm_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut params = ModelParams::init(&cfg, &Theta::uniform(1.3), &mut stream(9, "init")).unwrap();
    params.decoder.log_theta.attention = Tensor::scalar(0.2);
    let e = Tensor::matrix(1, 8, (0..8).map(|i| 0.4 - 0.1 * i as f64).collect());
    let weights: Vec<Tensor> =
        (0..=cfg.gat_layers()).map(|l| Tensor::vector((0..cfg.generator_width(l)).map(|i| (i as f64 * 0.7).sin()).collect())).collect();
    let value = |p: &ModelParams| {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let e_id = tape.constant(e.clone());
        assert_eq!(raw_outputs(&mut tape, e_id, &b.decoder).unwrap().len(), cfg.gat_layers() + 1);
        let gw = generate_weights(&mut tape, e_id, &b.decoder, &cfg).unwrap();
        let mut parts = Vec::new();
        for (l, layer) in gw.layers.iter().enumerate() {
            let head = &layer[0];
            let a = tape.reshape(head.attention, &[cfg.head_dims[l] * 2]).unwrap();
            let w = tape.reshape(head.transform, &[cfg.head_dims[l] * cfg.gat_input_dim(l)]).unwrap();
            let flat = tape.concat(&[a, head.bias, w], 0).unwrap();
            let c = tape.constant(weights[l].clone());
            let prod = tape.mul(flat, c).unwrap();
            parts.push(tape.sum_all(prod));
        }
        let cls = tape.reshape(gw.classifier, &[cfg.generator_width(cfg.gat_layers())]).unwrap();
        let c = tape.constant(weights[cfg.gat_layers()].clone());
        let prod = tape.mul(cls, c).unwrap();
        parts.push(tape.sum_all(prod));
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p).unwrap();
        }
        (tape, b, total)
    };
    let (mut tape, b, total) = value(&params);
    tape.backward(total).unwrap();
    let named = params.named();
    let ids = b.tensors();
    let mut checked = 0;
    for (i, (name, t)) in named.iter().enumerate() {
        if !name.starts_with("decoder") {
            continue;
        }
        let analytic = tape.grad(*ids[i]).expect("decoder parameter receives a gradient");
        assert!(analytic.l2_norm() > 0.0, "{name} has zero gradient");
        let err = gradient_error(
            |p: &[Tensor]| {
                let mut m = params.clone();
                *m.tensors_mut()[i] = p[0].clone();
                let (t, _, s) = value(&m);
                t.value(s).item()
            },
            &[(*t).clone()],
            &[analytic],
            1e-6,
        );
        assert!(err < 1e-4, "{name}: {err:e}");
        checked += 1;
    }
    assert_eq!(checked, 3 + 4);
}

fn head_on(tape: &mut Tape, a: Vec<f64>, b: Vec<f64>, w: Vec<Vec<f64>>) -> HeadWeights<flat_core::numkernel::NodeId> {
    HeadWeights {
        attention: tape.constant(Tensor::vector(a)),
        bias: tape.constant(Tensor::vector(b)),
        transform: tape.constant(Tensor::from_rows(&w)),
    }
}

#[test]
fn three_node_attention_matches_direct_evaluation() {
    let h = vec![vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.8, -1.1]];
    let a = vec![0.6, -0.4, 0.9, 0.25];
    let w = vec![vec![0.7, -0.2], vec![0.1, 1.3]];
    let (_, expected) = common::attention(&h, &a, &w);
    let mut tape = Tape::new();
    let nodes = tape.constant(Tensor::new(vec![1, 3, 2], h.concat()).unwrap());
    let head = head_on(&mut tape, a, vec![0.0, 0.0], w);
    let alpha = attention_coeffs(&mut tape, nodes, &head).unwrap();
    let got = tape.value(alpha);
    for j in 0..3 {
        let s: f64 = (0..3).map(|k| got.data()[j * 3 + k]).sum();
        assert!((s - 1.0).abs() < 1e-12);
        for k in 0..3 {
            assert_abs_diff_eq!(got.data()[j * 3 + k], expected[j][k], epsilon = 1e-12);
        }
    }
}

#[test]
fn two_node_layer_matches_hand_computation() {
    // Nodes h0=[1,0], h1=[0,2]; W = I; a = [1,0,0,1].
    // z0=[1,0], z1=[0,2]; logit(j,k) = z_j[0] + z_k[1].
    // row 0: [1+0, 1+2] = [1, 3]; row 1: [0+0, 0+2] = [0, 2].
    let mut tape = Tape::new();
    let nodes = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
    let head = head_on(&mut tape, vec![1.0, 0.0, 0.0, 1.0], vec![0.5, -0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (out, _) = gat_layer(&mut tape, nodes, &[head]).unwrap();
    let s = |x: f64, y: f64| (x.exp() / (x.exp() + y.exp()), y.exp() / (x.exp() + y.exp()));
    let (a00, a01) = s(1.0, 3.0);
    let (a10, a11) = s(0.0, 2.0);
    let expected = [a00 * 1.0 + 0.5, a01 * 2.0 - 0.5, a10 * 1.0 + 0.5, a11 * 2.0 - 0.5];
    for (g, e) in tape.value(out).data().iter().zip(expected) {
        assert_abs_diff_eq!(*g, e, epsilon = 1e-14);
    }
}

#[test]
fn identical_nodes_attend_uniformly_and_stay_identical() {
    let mut tape = Tape::new();
    let nodes = tape.constant(Tensor::new(vec![1, 3, 2], vec![0.4, -0.2, 0.4, -0.2, 0.4, -0.2]).unwrap());
    let head = head_on(&mut tape, vec![0.3, 0.9, -0.5, 0.2], vec![0.1, 0.0], vec![vec![1.0, 2.0], vec![-1.0, 0.5]]);
    let alpha = attention_coeffs(&mut tape, nodes, &head).unwrap();
    assert!(tape.value(alpha).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let (out, _) = gat_layer(&mut tape, nodes, &[head]).unwrap();
    let v = tape.value(out).data().to_vec();
    assert_eq!(&v[0..2], &v[2..4]);
    assert_eq!(&v[0..2], &v[4..6]);
}

#[test]
fn nodes_concatenate_embedding_and_value() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let x = Tensor::matrix(1, 2, vec![7.0, 8.0]);
    let nodes = build_nodes(&mut tape, &x, p).unwrap();
    assert_eq!(tape.value(nodes).data(), &[1.0, 2.0, 3.0, 7.0, 4.0, 5.0, 6.0, 8.0]);
}

#[test]
fn full_forward_matches_straight_line_reference() {
    let cfg = ModelConfig { heads: 2, ..tiny_config() };
    let mut params = ModelParams::init(&cfg, &Theta::uniform(1.0), &mut stream(10, "init")).unwrap();
    hand_set(&mut params, 0.15);
    params.decoder.log_theta.transform = Tensor::scalar(1.4f64.ln());
    let model = FlatModel { config: cfg.clone(), params };
    let meta = Tensor::matrix(3, 2, vec![0.5, -1.0, -0.2, 0.3, 1.1, 0.9]);
    let target = Tensor::matrix(2, 2, vec![0.4, -0.6, -1.3, 0.2]);
    let r = reference(&model.params, &cfg, &rows(&meta), &[1, 0, 1], &rows(&target));

    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let pooled = pool_rows(&mut tape, &meta, &[1, 0, 1], &b.encoder, &cfg).unwrap();
    let e = encode_dataset(&mut tape, pooled, &b.encoder).unwrap();
    let p = encode_columns(&mut tape, pooled, &b.encoder).unwrap();
    let gw = generate_weights(&mut tape, e, &b.decoder, &cfg).unwrap();
    let (probs, attn) = predict_with_attention(&mut tape, &target, p, &gw, &cfg).unwrap();

    let close = |got: &[f64], want: &[f64]| {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    };
    close(tape.value(e).data(), &r.e);
    close(tape.value(p).data(), &r.p.concat());
    let gwv = gw.values(&tape);
    for (l, layer) in gwv.layers.iter().enumerate() {
        for (h, head) in layer.iter().enumerate() {
            close(head.attention.data(), &r.heads[l][h].0);
            close(head.bias.data(), &r.heads[l][h].1);
            close(head.transform.data(), &r.heads[l][h].2.concat());
        }
    }
    close(gwv.classifier.data(), &r.classifier.concat());
    for h in 0..2 {
        let a = tape.value(attn[0][h]);
        for row in 0..2 {
            close(&a.data()[row * 4..(row + 1) * 4], &r.alpha[row][h].concat());
        }
    }
    close(tape.value(probs).data(), &r.probs.concat());
}

#[test]
fn single_row_two_column_predict_matches_reference() {
    let cfg = tiny_config();
    let mut params = ModelParams::init(&cfg, &Theta::uniform(1.0), &mut stream(11, "init")).unwrap();
    hand_set(&mut params, 0.1);
    let model = FlatModel { config: cfg.clone(), params };
    let meta = Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]);
    let target = Tensor::matrix(1, 2, vec![0.25, 0.75]);
    let r = reference(&model.params, &cfg, &rows(&meta), &[1, 0], &rows(&target));
    let (e, p) = {
        let (_, e, p) = embeddings(&model, &meta, &[1, 0]);
        (DatasetEmbedding(e), ColumnEmbeddings(p))
    };
    let probs = model.predict_from_embeddings(&target, &e, &p).unwrap();
    for (g, w) in probs.data().iter().zip(&r.probs[0]) {
        assert!((g - w).abs() < 1e-10);
    }
}

#[test]
fn probabilities_and_attention_rows_sum_to_one() {
    let model = default_model(12);
    for seed in 0..10 {
        let task = random_task(seed, 8, 6, 2 + seed as usize);
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, false);
        let pooled = pool_rows(&mut tape, &task.meta_x, &task.meta_y, &b.encoder, &model.config).unwrap();
        let e = encode_dataset(&mut tape, pooled, &b.encoder).unwrap();
        let p = encode_columns(&mut tape, pooled, &b.encoder).unwrap();
        let gw = generate_weights(&mut tape, e, &b.decoder, &model.config).unwrap();
        let (probs, attn) = predict_with_attention(&mut tape, &task.target_x, p, &gw, &model.config).unwrap();
        let pv = tape.value(probs);
        for i in 0..pv.rows() {
            assert!((pv.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let c = task.n_cols();
        for layer in &attn {
            for &a in layer {
                for chunk in tape.value(a).data().chunks(c) {
                    assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn predict_is_invariant_to_joint_column_permutation() {
    let model = default_model(13);
    for seed in 0..20 {
        let task = random_task(100 + seed, 10, 5, 2 + (seed as usize % 7));
        let base = model.predict_proba(&task).unwrap();
        let mut perm: Vec<usize> = (0..task.n_cols()).collect();
        perm.shuffle(&mut stream(seed, "perm"));
        let permuted = model.predict_proba(&task.permute_columns(&perm)).unwrap();
        assert!(base.max_abs_diff(&permuted) <= 1e-9);
    }
}

#[test]
fn rows_do_not_influence_each_other() {
    let model = default_model(14);
    let task = random_task(15, 10, 6, 4);
    let (e, p) = model.embed(&task).unwrap();
    let base = model.predict_from_embeddings(&task.target_x, &e, &p).unwrap();
    let mut changed = task.target_x.clone();
    for j in 0..4 {
        changed.data_mut()[2 * 4 + j] += 3.0 + j as f64;
    }
    let other = model.predict_from_embeddings(&changed, &e, &p).unwrap();
    for i in [0, 1, 3, 4, 5] {
        assert_eq!(base.row(i), other.row(i), "row {i} changed");
    }
    let mut dup = task.target_x.clone().into_data();
    dup.extend_from_slice(task.target_x.row(0));
    let dup = Tensor::matrix(7, 4, dup);
    let with_dup = model.predict_from_embeddings(&dup, &e, &p).unwrap();
    assert_eq!(flat_core::model::argmax_rows(&with_dup)[6], flat_core::model::argmax_rows(&with_dup)[0]);
    assert!((0..2).all(|k| (with_dup.at(6, k) - with_dup.at(0, k)).abs() < 1e-12));
}

#[test]
fn prediction_time_grows_at_most_quadratically() {
    let model = default_model(16);
    let sizes = [10usize, 20, 40];
    let times: Vec<f64> = sizes
        .iter()
        .map(|&c| {
            let task = random_task(c as u64, 15, 15, c);
            let (e, p) = model.embed(&task).unwrap();
            let mut samples: Vec<f64> = (0..7)
                .map(|_| {
                    let start = Instant::now();
                    for _ in 0..5 {
                        std::hint::black_box(model.predict_from_embeddings(&task.target_x, &e, &p).unwrap());
                    }
                    start.elapsed().as_secs_f64()
                })
                .collect();
            samples.sort_by(f64::total_cmp);
            samples[3]
        })
        .collect();
    // Least-squares fit t = alpha + beta * c^2 with nonnegative coefficients.
    let xs: Vec<f64> = sizes.iter().map(|&c| (c * c) as f64).collect();
    let n = xs.len() as f64;
    let (mx, mt) = (xs.iter().sum::<f64>() / n, times.iter().sum::<f64>() / n);
    let beta = (xs.iter().zip(&times).map(|(x, t)| (x - mx) * (t - mt)).sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>())
    .max(0.0);
    let alpha = (mt - beta * mx).max(0.0);
    for (x, t) in xs.iter().zip(&times) {
        let fit = alpha + beta * x;
        assert!(*t <= 3.0 * fit && *t >= fit / 3.0, "time {t} outside 3x band of fit {fit} (times {times:?})");
    }
}

#[test]
fn loss_examples() {
    let mut tape = Tape::new();
    let probs = tape.constant(Tensor::matrix(2, 2, vec![0.8, 0.2, 0.3, 0.7]));
    let l = cross_entropy(&mut tape, probs, &[0, 1]).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), -(0.8f64.ln() + 0.7f64.ln()) / 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(tape.value(l).item(), 0.28990, epsilon = 1e-5);

    let uniform = tape.constant(Tensor::filled(&[3, 2], 0.5));
    let l = cross_entropy(&mut tape, uniform, &[0, 1, 1]).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), std::f64::consts::LN_2, epsilon = 1e-15);

    let perfect = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let l = cross_entropy(&mut tape, perfect, &[0, 1]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let wrong = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
    let l = cross_entropy(&mut tape, wrong, &[1]).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), -(1e-12f64).ln(), epsilon = 1e-9);
}

#[test]
fn end_to_end_gradient_on_tiny_configuration() {
    let cfg = tiny_config();
    let model = FlatModel::new(cfg, ThetaInit::Fixed(1.3), &mut stream(17, "init")).unwrap();
    let task = Task::from_splits(
        "tiny",
        Tensor::matrix(3, 2, vec![0.1, 0.5, -1.0, 2.0, 0.7, -0.3]),
        vec![0, 1, 1],
        Tensor::matrix(2, 2, vec![0.3, -0.2, 1.1, 0.4]),
        Some(vec![1, 0]),
        2,
    );
    let (_, grads) = task_gradients(&model, &task).unwrap();
    let params: Vec<Tensor> = model.params.tensors().into_iter().cloned().collect();
    let value = |ps: &[Tensor]| {
        let mut m = model.clone();
        for (slot, p) in m.params.tensors_mut().into_iter().zip(ps) {
            *slot = p.clone();
        }
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, false);
        let l = task_loss(&mut tape, &b, &m.config, &task).unwrap();
        tape.value(l).item()
    };
    let err = gradient_error(value, &params, &grads, 1e-6);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn single_column_task_is_rejected() {
    let model = default_model(18);
    let task = Task::from_splits("one", Tensor::matrix(2, 1, vec![0.0, 1.0]), vec![0, 1], Tensor::matrix(1, 1, vec![0.5]), None, 2);
    assert_eq!(model.predict_proba(&task), Err(FlatError::TooFewColumns(1)));
}

#[test]
fn column_embedding_row_mismatch_is_an_error() {
    let model = default_model(19);
    let err = model
        .predict_from_embeddings(
            &Tensor::matrix(1, 3, vec![0.0; 3]),
            &DatasetEmbedding(Tensor::zeros(&[1, 64]).map(|_| 0.1)),
            &ColumnEmbeddings(Tensor::zeros(&[2, 15])),
        )
        .unwrap_err();
    assert!(matches!(err, FlatError::Dimension { .. }));
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::zeros(&[2, 15]));
    let b = model.params.bind(&mut tape, false);
    let e = tape.constant(Tensor::filled(&[1, 64], 0.1));
    let gw = generate_weights(&mut tape, e, &b.decoder, &model.config).unwrap();
    assert!(predict(&mut tape, &Tensor::matrix(1, 3, vec![0.0; 3]), p, &gw, &model.config).is_err());
}
