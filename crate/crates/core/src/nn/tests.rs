use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::autodiff::Coordinates;
use crate::ingest::{generate_synthetic_cohort, SyntheticCohortSpec};
use crate::connectome::{graphs_from_series, FeatureMode};

fn small_arch(kind: ModelKind, input_dim: usize) -> ArchConfig {
    ArchConfig { head_dim: 3, heads: 2, fc_hidden: 4, ..ArchConfig::new(kind, input_dim) }
}

fn model(arch: ArchConfig, seed: u64) -> Classifier {
    Classifier::new(arch, &mut crate::seeds::stream(seed, crate::seeds::INIT)).unwrap()
}

fn batch_of(graphs: &[BrainGraph]) -> GraphBatch {
    GraphBatch::new(&graphs.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn reference_architecture_sizes() {
    let m = model(ArchConfig::new(ModelKind::Gat, 316), 0);
    assert_eq!(m.blocks.len(), 7);
    assert_eq!(m.blocks[0].weight.shape(), [316, 2048]);
    assert_eq!(m.blocks[6].weight.shape(), [2048, 2048]);
    assert_eq!(m.fc1_weight.shape(), [2048, 1024]);
    assert_eq!(m.fc2_weight.shape(), [1024, 2]);
    assert_eq!(m.arch.dropout_after(0), 0.1);
    assert_eq!(m.arch.dropout_after(3), 0.2);
    let bound = (6.0f64 / (316.0 + 2048.0)).sqrt();
    assert!(m.blocks[0].weight.data().iter().all(|v| v.abs() <= bound));
    assert!(m.fc1_bias.data().iter().all(|&v| v == 0.0));
    assert_eq!(m.param_names().len(), m.params().len());
}

#[test]
fn outputs_are_log_probabilities() {
    for kind in [ModelKind::Gat, ModelKind::Gcn] {
        let m = model(small_arch(kind, 6), 1);
        let graphs: Vec<BrainGraph> =
            (0..4).map(|i| random_graph(&format!("g{i}"), 4 + i, 6, 0.4, Label::Control, i as u64)).collect();
        let p = m.predict(&batch_of(&graphs)).unwrap();
        assert_eq!(p.log_probs.shape(), [4, 2]);
        assert_eq!(p.embeddings.shape(), [4, 4]);
        for r in 0..4 {
            let s = p.log_probs.get(r, 0).exp() + p.log_probs.get(r, 1).exp();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
        }
    }
}

#[test]
fn isomorphic_graphs_get_identical_outputs() {
    let m = model(small_arch(ModelKind::Gat, 5), 2);
    let g = random_graph("a", 7, 5, 0.5, Label::Asd, 3);
    let mut h = g.clone();
    h.id = "b".into();
    let p = m.predict(&batch_of(&[g, h])).unwrap();
    assert_eq!(p.log_probs.row_slice(0), p.log_probs.row_slice(1));
}

#[test]
fn isolated_gcn_block_is_bn_of_hw() {
    let m = model(ArchConfig { n_blocks: 1, ..small_arch(ModelKind::Gcn, 3) }, 4);
    let g = random_graph("a", 4, 3, 0.0, Label::Asd, 5);
    let batch = batch_of(std::slice::from_ref(&g));
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let out = m.forward(&mut tape, &bound, &batch, Mode::Eval, &mut idle_rng(), false).unwrap();
    // recompute ELU(BN(HW)) → pool → head by hand
    let hw = Tensor::from_array(&g.features.dot(&m.blocks[0].weight.to_array())).unwrap();
    let bn = &m.blocks[0].bn;
    let act = Tensor::from_array(&ndarray::Array2::from_shape_fn((4, 6), |(r, c)| {
        let x = (hw.get(r, c) - bn.running_mean.get(0, c)) / (bn.running_var.get(0, c) + bn.eps).sqrt();
        let y = bn.gamma.get(0, c) * x + bn.beta.get(0, c);
        if y > 0.0 { y } else { y.exp_m1() }
    }))
    .unwrap();
    let pooled = act.to_array().mean_axis(ndarray::Axis(0)).unwrap();
    let fc1 = pooled.dot(&m.fc1_weight.to_array()) + m.fc1_bias.to_array().row(0);
    let emb = fc1.mapv(|v| v.max(0.0));
    for (a, b) in tape.value(out.embeddings).data().iter().zip(emb.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn attention_records_are_normalised() {
    let m = model(small_arch(ModelKind::Gat, 4), 6);
    let graphs: Vec<BrainGraph> =
        (0..3).map(|i| random_graph(&format!("g{i}"), 6, 4, 0.3, Label::Asd, 10 + i)).collect();
    let records = m.attention(&batch_of(&graphs)).unwrap();
    assert_eq!(records.len(), 7 * 3);
    for r in &records {
        let n = graphs[r.graph_index].n_nodes();
        let mut per_head = vec![0.0; n * 2];
        let mut avg = vec![0.0; n];
        for (e, &(_, d)) in r.edges.iter().enumerate() {
            avg[d] += r.alpha[e];
            for k in 0..2 {
                per_head[d * 2 + k] += r.alpha_heads[e][k];
            }
        }
        assert!(per_head.iter().chain(&avg).all(|s| (s - 1.0).abs() <= 1e-12));
        // the local edge list is exactly the stored edges, both ways, plus self-loops
        assert_eq!(r.edges.len(), 2 * graphs[r.graph_index].edges.len() + n);
    }
    assert!(model(small_arch(ModelKind::Gcn, 4), 6).attention(&batch_of(&graphs)).is_err());
}

#[test]
fn train_mode_collects_and_commits_statistics() {
    let mut m = model(small_arch(ModelKind::Gat, 4), 7);
    let graphs: Vec<BrainGraph> = (0..2).map(|i| random_graph(&format!("g{i}"), 5, 4, 0.5, Label::Asd, i)).collect();
    let batch = batch_of(&graphs);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, true);
    let mut rng = crate::seeds::stream(0, crate::seeds::DROPOUT);
    let out = m.forward(&mut tape, &bound, &batch, Mode::Train, &mut rng, false).unwrap();
    assert_eq!(out.batch_stats.len(), 7);
    let before = m.blocks[0].bn.running_mean.clone();
    m.commit_batch_stats(&out.batch_stats);
    assert_ne!(m.blocks[0].bn.running_mean, before);
    let expected = before.zip_map(&out.batch_stats[0].mean, |r, b| 0.9 * r + 0.1 * b);
    assert_eq!(m.blocks[0].bn.running_mean, expected);
}

#[test]
fn feature_width_mismatch_is_rejected() {
    let m = model(small_arch(ModelKind::Gat, 4), 8);
    let g = random_graph("a", 5, 3, 0.5, Label::Asd, 0);
    assert!(m.predict(&batch_of(&[g])).is_err());
    let a = random_graph("a", 5, 3, 0.5, Label::Asd, 0);
    let b = random_graph("b", 5, 4, 0.5, Label::Asd, 0);
    assert!(GraphBatch::new(&[&a, &b]).is_err());
}

#[test]
fn nll_examples() {
    let lp = Tensor::from_rows(&[vec![0.9f64.ln(), 0.1f64.ln()], vec![0.2f64.ln(), 0.8f64.ln()]]).unwrap();
    let labels = [Label::Control, Label::Asd];
    assert_abs_diff_eq!(nll_value(&lp, &labels), 0.16425, epsilon = 1e-5);
    let mut tape = Tape::new();
    let v = tape.constant(lp.clone());
    let l = nll(&mut tape, v, &labels).unwrap();
    assert_abs_diff_eq!(tape.value(l).item().unwrap(), nll_value(&lp, &labels), epsilon = 1e-15);
    let half = Tensor::full(3, 2, 0.5f64.ln());
    assert_abs_diff_eq!(nll_value(&half, &[Label::Asd; 3]), std::f64::consts::LN_2, epsilon = 1e-15);
}

#[test]
fn fresh_model_is_uninformative_on_balanced_cohort() {
    let spec = SyntheticCohortSpec { n_subjects_per_class: 8, ..Default::default() };
    let (manifest, series) = generate_synthetic_cohort(&spec).unwrap();
    let graphs = graphs_from_series(&manifest, &series, 0.2, FeatureMode::CorrelationProfile).unwrap();
    let batch = batch_of(&graphs);
    let arch = ArchConfig { head_dim: 8, fc_hidden: 32, ..ArchConfig::new(ModelKind::Gat, 20) };
    let mut losses = Vec::new();
    for seed in 0..5 {
        losses.push(model(arch.clone(), seed).loss(&batch).unwrap());
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((mean - std::f64::consts::LN_2).abs() <= 0.15, "{losses:?}");
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for kind in [ModelKind::Gat, ModelKind::Gcn] {
        let m = model(small_arch(kind, 4), 9);
        let batch = micro_batch(4, 11).unwrap();
        let report = gradient_check_model(&m, &batch, &Coordinates::All).unwrap();
        assert_eq!(report.checked, m.n_params());
        assert!(report.max_rel_error <= 1e-6, "{kind:?}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Gat, ModelKind::Gcn] {
        let mut m = model(small_arch(kind, 5), 12);
        m.blocks[2].bn.running_var = Tensor::full(1, 6, 0.123456789);
        let path = dir.path().join(format!("{kind:?}.ckpt"));
        checkpoint::save(&m, &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint::to_bytes(&back), std::fs::read(&path).unwrap());
    }
    let bytes = checkpoint::to_bytes(&model(small_arch(ModelKind::Gat, 5), 0));
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(checkpoint::from_bytes(&bytes[..4]).is_err());
}

fn permute(g: &BrainGraph, seed: u64) -> BrainGraph {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..g.n_nodes()).collect();
    perm.shuffle(&mut crate::seeds::stream(seed, 9));
    g.permuted(&perm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn node_relabelling_leaves_outputs_unchanged(
        n in 3usize..10,
        seed in 0u64..10_000,
        gcn in proptest::bool::ANY,
    ) {
        let kind = if gcn { ModelKind::Gcn } else { ModelKind::Gat };
        let m = model(small_arch(kind, 4), seed);
        let graphs = [
            random_graph("a", n, 4, 0.4, Label::Asd, seed),
            random_graph("b", n + 2, 4, 0.4, Label::Control, seed + 1),
        ];
        let permuted = [permute(&graphs[0], seed), permute(&graphs[1], seed + 3)];
        let p = m.predict(&batch_of(&graphs)).unwrap();
        let q = m.predict(&batch_of(&permuted)).unwrap();
        prop_assert!(p.log_probs.max_abs_diff(&q.log_probs) <= 1e-9);
    }
}
