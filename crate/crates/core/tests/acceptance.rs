//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits non-zero on any failure only when `BRAINGAT_ACCEPTANCE_STRICT=1`;
//! otherwise failures are reported and the run completes so that the rest
//! of the workspace test output stays usable.

use std::collections::HashSet;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use braingat::autodiff::suite::check_primitives;
use braingat::autodiff::Coordinates;
use braingat::connectome::{graphs_from_series, pearson_matrix, BrainGraph, FeatureMode};
use braingat::eval::{confusion, evaluate_scores, percent, roc_auc, roc_auc_trapezoid, ConfusionMatrix};
use braingat::explain::{
    attention_importance, cohort_shap_ranking, kernel_shap_grouped, singleton_groups, subject_shap, ShapOptions,
};
use braingat::ingest::{generate_synthetic_cohort, zscore_normalize, Label, SyntheticCohortSpec, TimeSeriesMatrix};
use braingat::nn::{checkpoint, gradient_check_model, micro_batch, random_graph, ArchConfig, Classifier, GraphBatch, ModelKind};
use braingat::train::{run_replicates, ReplicateReport, TrainConfig};

type Scalar<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, title: &str, pass: bool, detail: String) -> Outcome {
    println!("{} criterion {id} ({title}): {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, detail }
}

fn planted(coupling: f64, block: Vec<usize>) -> Vec<BrainGraph> {
    let spec = SyntheticCohortSpec { coupling_strength: coupling, planted_block: block, ..Default::default() };
    let (m, s) = generate_synthetic_cohort(&spec).unwrap();
    graphs_from_series(&m, &s, 0.2, FeatureMode::CorrelationProfile).unwrap()
}

fn desk(model: ModelKind) -> TrainConfig {
    TrainConfig { model, ..TrainConfig::compact() }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let prims = check_primitives(10).unwrap();
    let (worst_name, worst_prim) = prims
        .iter()
        .map(|c| (c.name, c.max_rel_error))
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let batch = micro_batch(5, 0).unwrap();
    let desk_arch = TrainConfig::compact().arch(5);
    let desk_model = Classifier::new(desk_arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let desk_err = gradient_check_model(&desk_model, &batch, &Coordinates::All).unwrap();
    let full_model = Classifier::new(ArchConfig::new(ModelKind::Gat, 5), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let full_err =
        gradient_check_model(&full_model, &batch, &Coordinates::Directions { count: 8, seed: 3 }).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = worst_prim <= 1e-4 && desk_err.max_rel_error <= 1e-3 && full_err.max_rel_error <= 1e-3 && secs < 120.0;
    report(
        1,
        "gradient correctness",
        pass,
        format!(
            "primitives max {worst_prim:.2e} ({worst_name}) over {} ops; 7-block GAT desk width {:.2e} over {} coordinates; \
             reference width {:.2e} over {} directions; {secs:.1}s",
            prims.len(),
            desk_err.max_rel_error,
            desk_err.checked,
            full_err.max_rel_error,
            full_err.checked
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let mut destinations = 0usize;
    let model = Classifier::new(TrainConfig::compact().arch(6), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for seed in 0..100u64 {
        let n = 4 + (seed as usize % 17);
        let g = random_graph("g", n, 6, 0.3, Label::Asd, seed);
        for rec in model.attention(&GraphBatch::new(&[&g]).unwrap()).unwrap() {
            let heads = rec.alpha_heads[0].len();
            let mut sums = vec![vec![0.0; heads]; n];
            for (&(_, dst), a) in rec.edges.iter().zip(&rec.alpha_heads) {
                for (s, v) in sums[dst].iter_mut().zip(a) {
                    *s += v;
                }
            }
            for s in sums.iter().flatten() {
                worst = worst.max((s - 1.0).abs());
            }
            destinations += n;
        }
    }
    report(
        2,
        "attention normalisation",
        worst <= 1e-6,
        format!("max |Σα − 1| = {worst:.2e} over {destinations} destination-layer pairs, 8 heads each"),
    )
}

/// Shapley values from the permutation-free subset formula.
fn brute_shapley(f: &dyn Fn(&[f64]) -> f64, reference: &[f64], x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let value = |mask: usize| {
        let z: Vec<f64> = (0..m).map(|i| if mask >> i & 1 == 1 { x[i] } else { reference[i] }).collect();
        f(&z)
    };
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    (0..m)
        .map(|i| {
            (0..1usize << m)
                .filter(|s| s >> i & 1 == 0)
                .map(|s| {
                    let k = s.count_ones() as usize;
                    fact(k) * fact(m - k - 1) / fact(m) * (value(s | 1 << i) - value(s))
                })
                .sum()
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    let mut gap = 0.0f64;
    let mut calls = 0;
    for m in [3usize, 5, 8] {
        for trial in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(m as u64 * 100 + trial);
            let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.5..1.5)).collect() };
            let w = draw(m);
            let hidden: Vec<Vec<f64>> = (0..5).map(|_| draw(m)).collect();
            let out = draw(5);
            let x = draw(m);
            let reference = draw(m);
            let linear = |z: &[f64]| z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.3;
            let mlp = |z: &[f64]| {
                hidden
                    .iter()
                    .zip(&out)
                    .map(|(h, v)| v * h.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().tanh())
                    .sum::<f64>()
            };
            let models: [Scalar; 2] = [&linear, &mlp];
            for f in models {
                let s = kernel_shap_grouped(&f, &reference, &x, &singleton_groups(m), 2048, trial).unwrap();
                assert!(s.exact);
                let exact = brute_shapley(f, &reference, &x);
                for (a, b) in s.phi.iter().zip(&exact) {
                    worst = worst.max((a - b).abs());
                }
                gap = gap.max((s.phi.iter().sum::<f64>() - (f(&x) - f(&reference))).abs());
                calls += 1;
            }
        }
    }
    report(
        3,
        "SHAP oracle equivalence",
        worst <= 1e-6 && gap <= 1e-9,
        format!("max |φ − φ_exact| = {worst:.2e}, max efficiency gap {gap:.2e} over {calls} calls (M ∈ {{3, 5, 8}})"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut auc_gap = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let labels: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.5) { Label::Asd } else { Label::Control }).collect();
        // coarse scores so that ties occur
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0).collect();
        let preds: Vec<Label> = scores.iter().map(|&s| if s >= 0.5 { Label::Asd } else { Label::Control }).collect();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (p, l) in preds.iter().zip(&labels) {
            match (p, l) {
                (Label::Asd, Label::Asd) => tp += 1,
                (Label::Asd, Label::Control) => fp += 1,
                (Label::Control, Label::Control) => tn += 1,
                (Label::Control, Label::Asd) => fn_ += 1,
            }
        }
        let cm = confusion(&preds, &labels).unwrap();
        let r = evaluate_scores(&scores, &labels).unwrap();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let expected = (ConfusionMatrix { tp, fp, tn, fn_ }, (tp + tn) as f64 / n as f64, precision, recall, f1);
        if (cm, r.accuracy, r.precision, r.recall, r.f1) != expected || r.confusion != cm {
            mismatches += 1;
        }
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, l)| **l == Label::Asd).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, l)| **l == Label::Control).map(|(s, _)| *s).collect();
        if !pos.is_empty() && !neg.is_empty() {
            let pairs: f64 = pos
                .iter()
                .flat_map(|p| neg.iter().map(move |q| if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 }))
                .sum();
            let brute = pairs / (pos.len() * neg.len()) as f64;
            let rank = roc_auc(&scores, &labels).unwrap();
            let trap = roc_auc_trapezoid(&scores, &labels).unwrap();
            auc_gap = auc_gap.max((rank - trap).abs()).max((rank - brute).abs());
        }
    }
    // 88 subjects, 85 correct, one false positive and two false negatives
    let cm = ConfusionMatrix { tp: 40, fp: 1, tn: 45, fn_: 2 };
    let shown = percent(cm.accuracy());
    let pass = mismatches == 0 && auc_gap <= 1e-9 && shown == "96.59%" && cm.total() == 88;
    report(
        4,
        "metric oracle",
        pass,
        format!("{mismatches} mismatches in 1000 vectors; max AUC gap {auc_gap:.2e}; 85/88 correct → {shown}"),
    )
}

fn mean_auc(r: &ReplicateReport) -> f64 {
    r.aggregate.auc.map(|a| a.mean).unwrap_or(f64::NAN)
}

struct Planted {
    graphs: Vec<BrainGraph>,
    report: ReplicateReport,
    models: Vec<Classifier>,
}

fn criterion_5() -> (Outcome, Planted) {
    let t = Instant::now();
    let graphs = planted(0.8, (0..5).collect());
    let (replicates, models) = run_replicates(&graphs, &desk(ModelKind::Gat), 10, 1, &|_, _| {}).unwrap();
    let null = planted(0.0, (0..5).collect());
    let (null_report, _) = run_replicates(&null, &desk(ModelKind::Gat), 10, 1, &|_, _| {}).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let acc = replicates.aggregate.accuracy.mean;
    let auc = mean_auc(&replicates);
    let null_acc = null_report.aggregate.accuracy.mean;
    let pass = acc >= 0.90 && auc >= 0.95 && (0.35..=0.65).contains(&null_acc) && secs <= 900.0;
    let outcome = report(
        5,
        "learning-signal separation",
        pass,
        format!(
            "coupling 0.8: mean accuracy {acc:.3}, mean AUC {auc:.3}, accuracy std {:.3}; coupling 0: mean accuracy {null_acc:.3}; \
             20 runs in {secs:.0}s",
            replicates.aggregate.accuracy.std
        ),
    );
    (outcome, Planted { graphs, report: replicates, models })
}

fn criterion_6() -> Outcome {
    let graphs = planted(0.6, vec![0, 1, 2]);
    let (gat, _) = run_replicates(&graphs, &desk(ModelKind::Gat), 10, 1, &|_, _| {}).unwrap();
    let (gcn, _) = run_replicates(&graphs, &desk(ModelKind::Gcn), 10, 1, &|_, _| {}).unwrap();
    let (a, b) = (gat.aggregate.accuracy.mean, gcn.aggregate.accuracy.mean);
    report(
        6,
        "GAT over GCN",
        a - b >= 0.05,
        format!("block of 3/20, coupling 0.6, 10 runs each: GAT {a:.3} (AUC {:.3}), GCN {b:.3} (AUC {:.3}), margin {:+.1} points", mean_auc(&gat), mean_auc(&gcn), 100.0 * (a - b)),
    )
}

fn criterion_7(p: &Planted) -> Outcome {
    let t = Instant::now();
    let block: HashSet<String> = (0..5).map(|i| p.graphs[0].region_names[i].clone()).collect();
    let hits = |names: &[String]| names.iter().take(5).filter(|n| block.contains(*n)).count();
    let by_id = |ids: &[String]| -> Vec<BrainGraph> {
        ids.iter().map(|id| p.graphs.iter().find(|g| &g.id == id).unwrap().clone()).collect()
    };
    let mut att_hits = Vec::new();
    let mut shap_hits = Vec::new();
    for (run, model) in p.report.runs.iter().zip(&p.models) {
        let test = by_id(&run.split.test);
        let train = by_id(&run.split.train);
        let imp = attention_importance(model, &test).unwrap();
        att_hits.push(hits(&imp.iter().map(|r| r.region.clone()).collect::<Vec<_>>()));
        let background: Vec<&BrainGraph> = train.iter().collect();
        let opts = ShapOptions { seed: run.seed, ..Default::default() };
        let reports: Vec<_> = test.iter().map(|g| subject_shap(model, g, &background, &opts).unwrap()).collect();
        let ranking = cohort_shap_ranking(&reports, &test[0].region_names).unwrap();
        shap_hits.push(hits(&ranking.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()));
    }
    let majority = |h: &[usize]| h.iter().filter(|&&k| k >= 3).count();
    let (a, s) = (majority(&att_hits), majority(&shap_hits));
    let runs = att_hits.len();
    report(
        7,
        "explanation grounding",
        2 * a > runs && 2 * s > runs,
        format!(
            "planted regions in top 5 per run, attention {att_hits:?} ({a}/{runs} runs with ≥3), |SHAP| {shap_hits:?} ({s}/{runs} runs with ≥3); {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_8(p: &Planted) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cli = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_braingat")).args(args).env("BRAINGAT_OUT", out).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    cli(&["synth", "--subjects", "50", "--regions", "20", "--seed", "0"]);
    cli(&["build-graphs"]);
    let replicate = ["replicate", "--runs", "5", "--seed", "1", "--head-dim", "8", "--fc-hidden", "32", "--epochs", "15"];
    cli(&replicate);
    let first = std::fs::read(out.join("replicate/summary.json")).unwrap();
    cli(&replicate);
    let second = std::fs::read(out.join("replicate/summary.json")).unwrap();

    let path = out.join("model.ckpt");
    let mut exact = true;
    for model in &p.models {
        checkpoint::save(model, &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        let bits = |m: &Classifier| -> Vec<u64> {
            m.params().iter().chain(m.buffers().iter().map(|(_, t)| t)).flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        exact &= bits(model) == bits(&back) && back.arch == model.arch && checkpoint::to_bytes(&back) == checkpoint::to_bytes(model);
    }
    report(
        8,
        "determinism",
        first == second && exact,
        format!(
            "summary.json {} across two `replicate --runs 5 --seed 1` invocations ({} bytes); {} checkpoints round-trip {}",
            if first == second { "byte-identical" } else { "differs" },
            first.len(),
            p.models.len(),
            if exact { "bit-exactly" } else { "with differences" }
        ),
    )
}

fn criterion_9(p: &Planted) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for (k, model) in p.models.iter().enumerate().take(3) {
        for g in p.graphs.iter().skip(k * 7).take(5) {
            let mut perm: Vec<usize> = (0..g.n_nodes()).collect();
            perm.shuffle(&mut rng);
            let a = model.predict(&GraphBatch::new(&[g]).unwrap()).unwrap();
            let b = model.predict(&GraphBatch::new(&[&g.permuted(&perm)]).unwrap()).unwrap();
            worst = worst.max(a.log_probs.max_abs_diff(&b.log_probs)).max(a.embeddings.max_abs_diff(&b.embeddings));
        }
    }
    let raw = ndarray::Array2::from_shape_fn((50, 6), |_| rng.random_range(-3.0..5.0));
    let once = zscore_normalize(&TimeSeriesMatrix(raw.clone()));
    let twice = zscore_normalize(&once);
    let idem = once.0.iter().zip(twice.0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let base = pearson_matrix(&TimeSeriesMatrix(raw.clone())).unwrap().0;
    let mut affine = 0.0f64;
    for (a, b) in [(2.5, -7.0), (0.01, 3.0), (-1.7, 0.4)] {
        let mut moved = raw.clone();
        moved.column_mut(2).mapv_inplace(|v| a * v + b);
        let r = pearson_matrix(&TimeSeriesMatrix(moved)).unwrap().0;
        for i in 0..6 {
            for j in 0..6 {
                let flips = (i == 2) != (j == 2);
                let want = if a < 0.0 && flips { -base[[i, j]] } else { base[[i, j]] };
                affine = affine.max((r[[i, j]] - want).abs());
            }
        }
    }
    report(
        9,
        "invariance",
        worst <= 1e-9 && idem <= 1e-9 && affine <= 1e-9,
        format!("relabelling Δ {worst:.2e}; z-score idempotence Δ {idem:.2e}; Pearson affine Δ {affine:.2e}"),
    )
}

fn main() {
    // the test harness passes flags such as --nocapture; none are used here
    let only: Option<HashSet<usize>> = std::env::var("BRAINGAT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let started = Instant::now();
    let mut outcomes = Vec::new();
    for (id, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (4, criterion_4)] {
        if wanted(id) {
            outcomes.push(f());
        }
    }
    if [5, 7, 8, 9].into_iter().any(wanted) {
        let (o5, planted) = criterion_5();
        if wanted(5) {
            outcomes.push(o5);
        }
        if wanted(6) {
            outcomes.push(criterion_6());
        }
        if wanted(7) {
            outcomes.push(criterion_7(&planted));
        }
        if wanted(8) {
            outcomes.push(criterion_8(&planted));
        }
        if wanted(9) {
            outcomes.push(criterion_9(&planted));
        }
    } else if wanted(6) {
        outcomes.push(criterion_6());
    }
    outcomes.sort_by_key(|o| o.id);
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed} of {} criteria passed in {:.0}s",
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    for o in outcomes.iter().filter(|o| !o.pass) {
        println!("  failed criterion {}: {}", o.id, o.detail);
    }
    let strict = std::env::var("BRAINGAT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < outcomes.len() {
        std::process::exit(1);
    }
}
