mod common;

use std::collections::BTreeMap;

use common::*;
use pgs_core::config::{Aggregator, ArchConfig, Metric, Selection};
use pgs_core::deformable_scale::{extract_multiscale_style_nodes, predict_scales, resize_patch, ScaleAssignment};
use pgs_core::feature_codec::{extract_loss_features, random_image, LossNetwork, VggSpec};
use pgs_core::global_refine::{adain, channel_stats};
use pgs_core::graph_builder::{build_graph_from_nodes, euclidean_similarity, knn_edges, ncc};
use pgs_core::message_passing::{
    aggregate, alt_aggregate, attention_coefficients, content_to_content_pass, style_to_content_pass, AltParams,
    AttentionParams,
};
use pgs_core::objective::{content_loss, style_loss};
use pgs_core::params::ModelParameters;
use pgs_core::patch_ops::{compose_overlapping, extract_patches, NodeFeature, Patch};
use pgs_core::{FeatureMap, Tensor};
use rand::Rng;

fn nodes(rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| random_vec(rng, d)).collect()
}

fn feats(v: &[Vec<f64>]) -> Vec<NodeFeature> {
    v.iter().cloned().map(NodeFeature).collect()
}

fn attention_params(rng: &mut rand_chacha::ChaCha8Rng, c: usize, heads: usize, dh: usize) -> AttentionParams {
    AttentionParams {
        wb: random_tensor(rng, &[heads * dh, c], 0.8),
        att_left: random_tensor(rng, &[heads, dh], 0.8),
        att_right: random_tensor(rng, &[heads, dh], 0.8),
        out_weight: random_tensor(rng, &[c, dh], 0.8),
        out_bias: random_tensor(rng, &[c], 0.3),
        negative_slope: 0.2,
    }
}

fn dense(p: &AttentionParams) -> DenseGat<'_> {
    DenseGat {
        wb: &p.wb,
        att_left: &p.att_left,
        att_right: &p.att_right,
        out_weight: &p.out_weight,
        out_bias: &p.out_bias,
        slope: p.negative_slope,
    }
}

#[test]
fn knn_matches_sort_oracle() {
    let mut r = rng(11);
    let q = nodes(&mut r, 50, 12);
    let k = nodes(&mut r, 80, 12);
    for metric in [Metric::Ncc, Metric::Euclidean] {
        let edges = knn_edges(&q, &k, 5, metric, false).unwrap();
        let oracle = brute_knn(&q, &k, 5, metric == Metric::Euclidean, false);
        for (i, want) in oracle.iter().enumerate() {
            let got: Vec<_> = edges[i * 5..(i + 1) * 5]
                .iter()
                .map(|e| (e.source, e.similarity))
                .collect();
            for ((gj, gs), (wj, ws)) in got.iter().zip(want) {
                assert_eq!(gj, wj);
                assert!((gs - ws).abs() < 1e-12);
            }
            assert!(edges[i * 5..(i + 1) * 5].iter().all(|e| e.target == i));
        }
    }
}

#[test]
fn knn_exhaustive_and_duplicates() {
    let mut r = rng(3);
    let keys = nodes(&mut r, 3, 4);
    let q = nodes(&mut r, 4, 4);
    let e = knn_edges(&q, &keys, 3, Metric::Ncc, false).unwrap();
    for i in 0..4 {
        let mut s: Vec<_> = e[i * 3..i * 3 + 3].iter().map(|e| e.source).collect();
        s.sort();
        assert_eq!(s, [0, 1, 2]);
    }
    let mut keys = nodes(&mut r, 6, 4);
    keys[4] = q[0].clone();
    let e = knn_edges(&q[..1], &keys, 2, Metric::Ncc, false).unwrap();
    assert_eq!(e[0].source, 4);
}

#[test]
fn knn_with_ties_matches_oracle() {
    let mut r = rng(5);
    let base = nodes(&mut r, 6, 5);
    // Every key appears three times, so ties are everywhere.
    let keys: Vec<_> = (0..18).map(|i| base[i % 6].clone()).collect();
    let q = nodes(&mut r, 10, 5);
    let e = knn_edges(&q, &keys, 7, Metric::Ncc, false).unwrap();
    let oracle = brute_knn(&q, &keys, 7, false, false);
    for (i, want) in oracle.iter().enumerate() {
        let got: Vec<_> = e[i * 7..(i + 1) * 7].iter().map(|e| e.source).collect();
        let want: Vec<_> = want.iter().map(|w| w.0).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn metrics_disagree_on_crafted_triple() {
    let a = [1.0, 1.0];
    let b = [10.0, 10.0];
    let c = [1.5, 0.5];
    assert!(ncc(&a, &b) > ncc(&a, &c));
    assert!(euclidean_similarity(&a, &c) > euclidean_similarity(&a, &b));
    let keys = vec![b.to_vec(), c.to_vec()];
    let by_ncc = knn_edges(&[a.to_vec()], &keys, 1, Metric::Ncc, false).unwrap();
    let by_l2 = knn_edges(&[a.to_vec()], &keys, 1, Metric::Euclidean, false).unwrap();
    assert_eq!((by_ncc[0].source, by_l2[0].source), (0, 1));
}

#[test]
fn graph_edges_match_oracle() {
    let mut r = rng(17);
    let c = nodes(&mut r, 10, 8);
    let s = nodes(&mut r, 12, 8);
    let g = build_graph_from_nodes(feats(&c), feats(&s), 3, Metric::Ncc).unwrap();
    g.validate().unwrap();
    let inter = brute_knn(&c, &s, 3, false, false);
    let intra = brute_knn(&c, &c, 3, false, true);
    let to_pairs = |o: &Vec<Vec<(usize, f64)>>| {
        o.iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |(j, _)| (*j, i)))
            .collect::<Vec<_>>()
    };
    let got_inter: Vec<_> = g.inter_edges.iter().map(|e| (e.source, e.target)).collect();
    let got_intra: Vec<_> = g.intra_edges.iter().map(|e| (e.source, e.target)).collect();
    assert_eq!(got_inter, to_pairs(&inter));
    assert_eq!(got_intra, to_pairs(&intra));
}

#[test]
fn identical_content_patch_finds_its_style_twin() {
    let mut r = rng(23);
    let s = nodes(&mut r, 6, 9);
    let mut c = nodes(&mut r, 4, 9);
    c[2] = s[5].clone();
    let g = build_graph_from_nodes(feats(&c), feats(&s), 2, Metric::Ncc).unwrap();
    assert_eq!(g.inter_edges[2 * 2].source, 5);
    assert_eq!((g.inter_edges.len(), g.intra_edges.len()), (8, 8));
}

#[test]
fn compose_matches_overlap_mean_oracle() {
    let mut r = rng(29);
    let map = FeatureMap::from_vec(1, 6, 6, random_vec(&mut r, 36)).unwrap();
    let coll = extract_patches(&map, 3, 1).unwrap();
    let out = compose_overlapping(&coll).unwrap();
    assert_eq!(out.tensor().data(), map.tensor().data());
    // Perturbed patches: compare against the accumulate-and-count oracle.
    let mut coll = coll;
    let mut raw = Vec::new();
    for p in &mut coll.patches {
        let v = random_vec(&mut r, 9);
        p.data = Tensor::new(&[1, 3, 3], v.clone()).unwrap();
        raw.push(v);
    }
    let out = compose_overlapping(&coll).unwrap();
    let want = overlap_mean_oracle(&raw, (1, 6, 6), 3, 1);
    for (a, b) in out.tensor().data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn resize_examples() {
    let p = Patch {
        data: Tensor::new(&[1, 2, 2], vec![0.0, 2.0, 0.0, 2.0]).unwrap(),
        origin: (0, 0),
        native_scale: 2,
    };
    let r3 = resize_patch(&p, 3).unwrap();
    let d = r3.data.data();
    for row in 0..3 {
        assert_eq!(d[row * 3 + 1], 1.0);
    }
    let mut r = rng(31);
    let q = Patch {
        data: random_tensor(&mut r, &[2, 5, 5], 1.0),
        origin: (1, 2),
        native_scale: 5,
    };
    assert_eq!(resize_patch(&q, 5).unwrap().data, q.data);
    for t in [1, 3, 4, 7] {
        let got = resize_patch(&q, t).unwrap();
        let want = resize_oracle(q.data.data(), 2, 5, t);
        for (a, b) in got.data.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let flat = Patch {
        data: Tensor::full(&[3, 4, 4], 0.7),
        origin: (0, 0),
        native_scale: 4,
    };
    for t in [1, 2, 6, 9] {
        assert!(resize_patch(&flat, t)
            .unwrap()
            .data
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
    }
}

fn ramp_map(c: usize, h: usize, w: usize) -> FeatureMap {
    let data = (0..c * h * w)
        .map(|i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            0.1 * y as f64 + 0.03 * x as f64 - 0.2 * ch as f64
        })
        .collect();
    FeatureMap::from_vec(c, h, w, data).unwrap()
}

#[test]
fn soft_extraction_matches_resize_oracle() {
    let map = ramp_map(2, 9, 8);
    let (p, s) = (3, 1);
    let gw = (8 - p) / s + 1;
    let n = ((9 - p) / s + 1) * gw;
    let probs = Tensor::new(&[n, 2], vec![0.5; 2 * n]).unwrap();
    let a = ScaleAssignment::new(probs, vec![3, 5]).unwrap();
    let got = extract_multiscale_style_nodes(&map, &a, p, s, Selection::Soft).unwrap();
    for (i, node) in got.iter().enumerate() {
        let (oy, ox) = ((i / gw) * s, (i % gw) * s);
        let w3 = window_oracle(map.tensor().data(), (2, 9, 8), oy, ox, p, 3);
        let w5 = window_oracle(map.tensor().data(), (2, 9, 8), oy, ox, p, 5);
        for (j, v) in node.0.iter().enumerate() {
            assert!((v - 0.5 * (w3[j] + w5[j])).abs() < 1e-12, "location {i} entry {j}");
        }
    }
}

#[test]
fn hard_one_hot_at_p_equals_plain_patches() {
    let mut r = rng(37);
    let map = FeatureMap::from_vec(3, 10, 11, random_vec(&mut r, 330)).unwrap();
    let plain = extract_patches(&map, 5, 2).unwrap().node_features();
    let n = plain.len();
    let mut probs = vec![0.0; n * 3];
    for i in 0..n {
        probs[i * 3 + 1] = 1.0;
    }
    let a = ScaleAssignment::new(Tensor::new(&[n, 3], probs).unwrap(), vec![3, 5, 7]).unwrap();
    let hard = extract_multiscale_style_nodes(&map, &a, 5, 2, Selection::Hard).unwrap();
    assert_eq!(hard, plain);
    let constant = FeatureMap::from_vec(2, 8, 8, vec![0.25; 128]).unwrap();
    let n = 16;
    let probs: Vec<f64> = (0..n)
        .flat_map(|i| [0.2 + 0.01 * i as f64, 0.8 - 0.01 * i as f64])
        .collect();
    let a = ScaleAssignment::new(Tensor::new(&[n, 2], probs).unwrap(), vec![3, 7]).unwrap();
    for sel in [Selection::Soft, Selection::Hard] {
        let nodes = extract_multiscale_style_nodes(&constant, &a, 5, 1, sel).unwrap();
        assert!(nodes.iter().all(|n| n.0.iter().all(|&v| (v - 0.25).abs() < 1e-15)));
    }
}

fn small_model(c: usize, scales: Vec<usize>) -> ModelParameters {
    let arch = ArchConfig {
        scales,
        heads: 2,
        head_dim: 4,
        predictor_hidden: 6,
        ..ArchConfig::tiny(c)
    };
    let net = LossNetwork::for_arch(&arch, None).unwrap();
    ModelParameters::init(&arch, &net, 7).unwrap()
}

#[test]
fn predictor_distribution_examples() {
    let mut r = rng(41);
    let content = FeatureMap::from_vec(4, 7, 7, random_vec(&mut r, 196)).unwrap();
    let style = FeatureMap::from_vec(4, 8, 6, random_vec(&mut r, 192)).unwrap();
    let mut params = small_model(4, vec![3, 5, 7]);
    params.set("prec.out.weight", Tensor::zeros(&[3, 6])).unwrap();
    let a = predict_scales(&content, &style, &params, 3, 1).unwrap();
    assert_eq!(a.locations(), 6 * 4);
    assert!(a.probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    params
        .set("prec.out.bias", Tensor::new(&[3], vec![2.0, 0.0, -2.0]).unwrap())
        .unwrap();
    let a = predict_scales(&content, &style, &params, 3, 1).unwrap();
    let want = softmax(&[2.0, 0.0, -2.0]);
    for row in a.probs.data().chunks(3) {
        for (g, w) in row.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }
    let single = small_model(4, vec![5]);
    let a = predict_scales(&content, &style, &single, 3, 1).unwrap();
    assert!(a.probs.data().iter().all(|&v| v == 1.0));
}

#[test]
fn attention_matches_dense_oracle() {
    let mut r = rng(43);
    let params = attention_params(&mut r, 3, 2, 4);
    let center = random_vec(&mut r, 3 * 4);
    let nbrs = nodes(&mut r, 5, 12);
    let oracle = dense(&params);
    let w = oracle.weights(&center, &nbrs);
    for (h, want) in w.iter().enumerate() {
        let got = attention_coefficients(&NodeFeature(center.clone()), &feats(&nbrs), &params, h).unwrap();
        for (g, o) in got.iter().zip(want) {
            assert!((g - o).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let got = aggregate(&NodeFeature(center.clone()), &feats(&nbrs), &params).unwrap();
    let want = oracle.aggregate(&center, &nbrs);
    for (g, o) in got.0.iter().zip(&want) {
        assert!((g - o).abs() < 1e-10);
    }
}

#[test]
fn attention_trivial_cases() {
    let mut r = rng(47);
    let params = attention_params(&mut r, 2, 3, 2);
    let center = NodeFeature(random_vec(&mut r, 8));
    let v = NodeFeature(random_vec(&mut r, 8));
    let same = vec![v.clone(); 4];
    for h in 0..3 {
        let w = attention_coefficients(&center, &same, &params, h).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        assert_eq!(
            attention_coefficients(&center, &same[..1], &params, h).unwrap(),
            vec![1.0]
        );
    }
    assert!(attention_coefficients(&center, &[], &params, 0).is_err());

    // Zero neighbor with zero output bias leaves only the residual.
    let mut zero_bias = params.clone();
    zero_bias.out_bias = Tensor::zeros(&[2]);
    let out = aggregate(&center, &[NodeFeature(vec![0.0; 8])], &zero_bias).unwrap();
    assert_eq!(out, center);

    // One head, identity W_b and T: identical neighbors give v + center.
    let c = 2;
    let eye = Tensor::new(&[c, c], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let ident = AttentionParams {
        wb: eye.clone(),
        att_left: random_tensor(&mut r, &[1, c], 1.0),
        att_right: random_tensor(&mut r, &[1, c], 1.0),
        out_weight: eye,
        out_bias: Tensor::zeros(&[c]),
        negative_slope: 0.2,
    };
    let out = aggregate(&center, &same, &ident).unwrap();
    for ((o, a), b) in out.0.iter().zip(&v.0).zip(&center.0) {
        assert!((o - (a + b)).abs() < 1e-12);
    }
}

fn alt_params(rng: &mut rand_chacha::ChaCha8Rng, kind: Aggregator, c: usize) -> AltParams {
    let mut arrays = BTreeMap::new();
    let mut put = |n: &str, shape: &[usize]| {
        arrays.insert(n.to_string(), random_tensor(rng, shape, 0.7));
    };
    match kind {
        Aggregator::Gcn => {
            put("weight", &[c, c]);
            put("bias", &[c]);
        }
        Aggregator::Sage => {
            put("weight", &[c, 2 * c]);
            put("bias", &[c]);
        }
        Aggregator::Gin => {
            put("eps", &[1]);
            put("mlp1.weight", &[c, c]);
            put("mlp1.bias", &[c]);
            put("mlp2.weight", &[c, c]);
            put("mlp2.bias", &[c]);
        }
        Aggregator::EdgeConv => {
            put("mlp1.weight", &[c, 2 * c]);
            put("mlp1.bias", &[c]);
            put("mlp2.weight", &[c, c]);
            put("mlp2.bias", &[c]);
        }
        Aggregator::Gat => unreachable!(),
    }
    AltParams { kind, arrays }
}

#[test]
fn alternative_aggregators_match_dense_oracles() {
    let mut r = rng(53);
    for kind in [Aggregator::Gcn, Aggregator::Gin, Aggregator::Sage, Aggregator::EdgeConv] {
        let params = alt_params(&mut r, kind, 3);
        for k in [1, 3] {
            let center = random_vec(&mut r, 3 * 4);
            let nbrs = nodes(&mut r, k, 12);
            let got = alt_aggregate(kind, &NodeFeature(center.clone()), &feats(&nbrs), &params).unwrap();
            let want = dense_alt(&kind.to_string(), &params.arrays, &center, &nbrs);
            for (g, w) in got.0.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "{kind}");
            }
        }
    }
}

#[test]
fn alternative_aggregator_trivial_cases() {
    let mut r = rng(59);
    let gcn = alt_params(&mut r, Aggregator::Gcn, 2);
    let v = random_vec(&mut r, 2 * 9);
    let center = NodeFeature(random_vec(&mut r, 18));
    let out = alt_aggregate(Aggregator::Gcn, &center, &feats(&vec![v.clone(); 3]), &gcn).unwrap();
    let single = alt_aggregate(Aggregator::Gcn, &center, &feats(&[v]), &gcn).unwrap();
    for (a, b) in out.0.iter().zip(&single.0) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut gin = alt_params(&mut r, Aggregator::Gin, 2);
    gin.arrays.insert("eps".into(), Tensor::zeros(&[1]));
    let out = alt_aggregate(Aggregator::Gin, &center, &feats(&[vec![0.0; 18]]), &gin).unwrap();
    let want = dense_alt("gin", &gin.arrays, &center.0, &[center.0.iter().map(|_| 0.0).collect()]);
    assert_eq!(out.0.len(), want.len());
    for (a, b) in out.0.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(alt_aggregate(Aggregator::Sage, &center, &feats(&[vec![0.0; 18]]), &gin).is_err());
}

#[test]
fn passes_match_looped_oracle() {
    let mut r = rng(61);
    let c = nodes(&mut r, 6, 2 * 4);
    let s = nodes(&mut r, 7, 2 * 4);
    let g = build_graph_from_nodes(feats(&c), feats(&s), 3, Metric::Ncc).unwrap();
    let s2c = attention_params(&mut r, 2, 2, 3);
    let c2c = attention_params(&mut r, 2, 2, 3);
    let stage1 = style_to_content_pass(&g, &s2c).unwrap();
    let nb = g.inter_neighbors();
    for i in 0..6 {
        let neigh: Vec<_> = nb.neighbors(i).iter().map(|&j| s[j].clone()).collect();
        let want = dense(&s2c).aggregate(&c[i], &neigh);
        for (a, b) in stage1[i].0.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert_eq!(g.style_nodes, feats(&s));
    let stage2 = content_to_content_pass(&stage1, &g.intra_edges, &c2c).unwrap();
    let nb = g.intra_neighbors();
    for i in 0..6 {
        let neigh: Vec<_> = nb.neighbors(i).iter().map(|&j| stage1[j].0.clone()).collect();
        let want = dense(&c2c).aggregate(&stage1[i].0, &neigh);
        for (a, b) in stage2[i].0.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert_eq!(content_to_content_pass(&stage1, &[], &c2c).unwrap(), stage1);
}

#[test]
fn k1_pass_uses_single_best_match() {
    let mut r = rng(67);
    let s = nodes(&mut r, 5, 6);
    let c = vec![s[3].clone(), s[1].clone(), s[1].clone()];
    let g = build_graph_from_nodes(feats(&c), feats(&s), 1, Metric::Ncc).unwrap();
    assert_eq!(g.inter_edges.iter().map(|e| e.source).collect::<Vec<_>>(), [3, 1, 1]);
    let p = attention_params(&mut r, 3, 2, 2);
    let out = style_to_content_pass(&g, &p).unwrap();
    assert_eq!(out[1], out[2]);
    let want = dense(&p).aggregate(&c[0], &[s[3].clone()]);
    for (a, b) in out[0].0.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn stats_and_adain_examples() {
    let mut r = rng(71);
    let data = random_vec(&mut r, 3 * 5 * 4);
    let map = FeatureMap::from_vec(3, 5, 4, data.clone()).unwrap();
    let st = channel_stats(&map);
    let (m, s) = stats_oracle(&data, 3);
    for i in 0..3 {
        assert!((st.mean[i] - m[i]).abs() < 1e-12 && (st.std[i] - s[i]).abs() < 1e-12);
    }
    let style = FeatureMap::from_vec(3, 6, 6, random_vec(&mut r, 108).iter().map(|v| 2.0 * v + 0.4).collect()).unwrap();
    let out = adain(&map, &style).unwrap();
    let (om, os) = stats_oracle(out.tensor().data(), 3);
    let (sm, ss) = stats_oracle(style.tensor().data(), 3);
    for i in 0..3 {
        assert!((om[i] - sm[i]).abs() < 1e-4 && (os[i] - ss[i]).abs() < 1e-4);
    }
    let same = adain(&style, &style).unwrap();
    let rel =
        same.tensor().max_abs_diff(style.tensor()) / style.tensor().data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(rel < 1e-3);
}

#[test]
fn content_loss_matches_norm_oracle() {
    let net = LossNetwork::tiny(8, 5);
    let a = random_image(16, 16, 1);
    let b = random_image(16, 16, 2);
    let fa = extract_loss_features(&a, &net).unwrap();
    let fb = extract_loss_features(&b, &net).unwrap();
    let want = rms(
        fa.get("relu4_1").unwrap().tensor().data(),
        fb.get("relu4_1").unwrap().tensor().data(),
    );
    let got = content_loss(&a, &b, &net).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert_eq!(got, content_loss(&b, &a, &net).unwrap());
}

#[test]
fn style_loss_matches_stats_oracle() {
    let net = LossNetwork::tiny(8, 5);
    let a = random_image(16, 16, 3);
    let b = random_image(16, 16, 4);
    let fa = extract_loss_features(&a, &net).unwrap();
    let fb = extract_loss_features(&b, &net).unwrap();
    let mut want = 0.0;
    for tag in ["relu1_1", "relu2_1", "relu3_1", "relu4_1"] {
        let (x, y) = (fa.get(tag).unwrap(), fb.get(tag).unwrap());
        let (mx, sx) = stats_oracle(x.tensor().data(), x.channels());
        let (my, sy) = stats_oracle(y.tensor().data(), y.channels());
        want += rms(&mx, &my) + rms(&sx, &sy);
    }
    assert!((style_loss(&a, &b, &net).unwrap() - want).abs() < 1e-6);
}

#[test]
fn style_loss_ignores_pixel_shuffles_at_first_layer() {
    // A pointwise network makes first-layer statistics permutation invariant.
    let net = LossNetwork::random(VggSpec::tiny(8, 1), 9);
    let img = random_image(16, 16, 8);
    let mut r = rng(73);
    let mut order: Vec<usize> = (0..256).collect();
    for i in (1..256).rev() {
        order.swap(i, r.gen_range(0..=i));
    }
    let src = img.tensor().data();
    let shuffled: Vec<f64> = (0..3)
        .flat_map(|ch| order.iter().map(move |&j| src[ch * 256 + j]))
        .collect();
    let shuffled = pgs_core::ImageTensor::from_vec(16, 16, shuffled).unwrap();
    let fa = extract_loss_features(&img, &net).unwrap();
    let fb = extract_loss_features(&shuffled, &net).unwrap();
    let (x, y) = (fa.get("relu1_1").unwrap(), fb.get("relu1_1").unwrap());
    let (mx, sx) = stats_oracle(x.tensor().data(), x.channels());
    let (my, sy) = stats_oracle(y.tensor().data(), y.channels());
    assert!(rms(&mx, &my) < 1e-12 && rms(&sx, &sy) < 1e-12);
}
