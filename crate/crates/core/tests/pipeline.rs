use diffgda::csbm::{gen_csbm_pair, CsbmSpec, Shift};
use diffgda::graph::Graph;
use diffgda::pipeline::{
    evaluate_f1, generate_graph, metrics_jsonl, mmd, run_generate_stage, run_pipeline, run_score_stage, source_only,
    train_target_gnn, FeatureFrame, Metrics, MmdKernel, RoundMetrics, ScoreStage, TrainConfig,
};
use diffgda::rng::{normal_matrix, rng_from_seed, stream};
use diffgda::score::{ScoreArch, ScoreModel};
use diffgda::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn brute_mmd(a: &Matrix, b: &Matrix, h: &[f64]) -> f64 {
    let k = |x: &[f64], y: &[f64], h: f64| {
        let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
        (-d / (2.0 * h * h)).exp()
    };
    let mut total = 0.0;
    for &bw in h {
        let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
        for i in 0..a.rows() {
            for j in 0..a.rows() {
                aa += k(a.row(i), a.row(j), bw);
            }
            for j in 0..b.rows() {
                ab += k(a.row(i), b.row(j), bw);
            }
        }
        for i in 0..b.rows() {
            for j in 0..b.rows() {
                bb += k(b.row(i), b.row(j), bw);
            }
        }
        let (m, n) = (a.rows() as f64, b.rows() as f64);
        total += aa / (m * m) + bb / (n * n) - 2.0 * ab / (m * n);
    }
    total
}

#[test]
fn mmd_matches_the_double_sum() {
    let mut rng = rng_from_seed(1);
    let a = normal_matrix(100, 8, &mut rng);
    let b = normal_matrix(100, 8, &mut rng).map(|v| 0.7 * v + 0.3);
    let kern = MmdKernel::median_heuristic(&a, &b);
    assert_eq!(kern.bandwidths.len(), 3);
    let got = mmd(&a, &b, &kern).unwrap();
    assert!((got - brute_mmd(&a, &b, &kern.bandwidths)).abs() < 1e-12);
    let single = MmdKernel::new(vec![1.3]).unwrap();
    assert!((mmd(&a, &b, &single).unwrap() - brute_mmd(&a, &b, &[1.3])).abs() < 1e-12);
}

#[test]
fn mmd_single_point_example() {
    let kern = MmdKernel::new(vec![1.0]).unwrap();
    let got = mmd(&Matrix::scalar(0.0), &Matrix::scalar(1.0), &kern).unwrap();
    assert!((got - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
    assert!((got - 0.78694).abs() < 1e-5);
}

#[test]
fn mmd_errors() {
    let kern = MmdKernel::new(vec![1.0]).unwrap();
    assert!(mmd(&Matrix::zeros(3, 2), &Matrix::zeros(3, 3), &kern).is_err());
    assert!(mmd(&Matrix::zeros(0, 2), &Matrix::zeros(3, 2), &kern).is_err());
    assert!(MmdKernel::new(vec![]).is_err());
    assert!(MmdKernel::new(vec![1.0, 0.0]).is_err());
    assert!(MmdKernel::new(vec![f64::NAN]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_symmetric_and_zero_on_itself(seed in 0u64..10_000, m in 1usize..12, k in 1usize..12, d in 1usize..4) {
        let mut rng = rng_from_seed(seed);
        let a = normal_matrix(m, d, &mut rng);
        let b = normal_matrix(k, d, &mut rng);
        let kern = MmdKernel::median_heuristic(&a, &b);
        prop_assert_eq!(mmd(&a, &b, &kern).unwrap(), mmd(&b, &a, &kern).unwrap());
        prop_assert!(mmd(&a, &b, &kern).unwrap() >= 0.0);
        prop_assert!(mmd(&a, &a, &kern).unwrap() <= 1e-12);
    }

    #[test]
    fn micro_f1_is_accuracy(seed in 0u64..10_000, n in 1usize..200, c in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (micro, macro_) = evaluate_f1(&pred, &truth, c).unwrap();
        let acc = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / n as f64;
        prop_assert_eq!(micro, acc);
        prop_assert!((0.0..=1.0).contains(&macro_));
    }

    #[test]
    fn metrics_mean_lies_in_range(values in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..12)) {
        let rounds: Vec<RoundMetrics> = values
            .iter()
            .enumerate()
            .map(|(round, &(mi, ma))| RoundMetrics { round, micro_f1: mi, macro_f1: ma, last_micro_f1: mi, last_macro_f1: ma })
            .collect();
        let m = Metrics::from_rounds(rounds).unwrap();
        let lo = values.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
        let hi = values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.mi_mean >= lo && m.mi_mean <= hi);
        let lo = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let hi = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.ma_mean >= lo && m.ma_mean <= hi);
        prop_assert!(m.mi_std >= 0.0 && m.ma_std >= 0.0);
    }
}

#[test]
fn mmd_matches_the_double_sum_on_small_samples() {
    let mut rng = rng_from_seed(14);
    for _ in 0..100 {
        let m = rng.random_range(1..6);
        let a = normal_matrix(m, 2, &mut rng);
        let b = normal_matrix(rng.random_range(1..6), 2, &mut rng);
        let h = [0.5, 1.0, 2.0];
        let got = mmd(&a, &b, &MmdKernel::new(h.to_vec()).unwrap()).unwrap();
        assert!((got - brute_mmd(&a, &b, &h)).abs() < 1e-12);
    }
}

#[test]
fn f1_examples() {
    assert_eq!(evaluate_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), (1.0, 1.0));
    let (mi, ma) = evaluate_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    assert!((mi - 0.75).abs() < 1e-12);
    assert!((ma - 0.733_333_333_333_333_3).abs() < 1e-12);
    assert_eq!(evaluate_f1(&[1, 1, 1], &[1, 1, 1], 2).unwrap(), (1.0, 0.5));
    assert!(evaluate_f1(&[0, 1], &[0], 2).is_err());
    assert!(evaluate_f1(&[0, 2], &[0, 1], 2).is_err());
    assert!(Metrics::from_rounds(vec![]).is_err());
}

fn shifted_spec(n: usize) -> CsbmSpec {
    let mut spec = CsbmSpec::two_class(n, 4, 2.0, 1.0, 0.2, 0.05);
    spec.shift = Shift {
        rotation: 60f64.to_radians(),
        intra_delta: -0.1,
        inter_delta: 0.0,
    };
    spec
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 30,
        rounds: 2,
        score_epochs: 20,
        classifier_epochs: 20,
        guidance_epochs: 10,
        s_mc: 2,
        t_steps: 10,
        ..TrainConfig::default()
    }
}

fn untrained_stage(source: &Graph, target: &Graph, cfg: &TrainConfig) -> ScoreStage {
    let frame = FeatureFrame::fit(source, target, cfg.feature_scale * cfg.sigma_max).unwrap();
    let arch = ScoreArch {
        gnn_hidden: 4,
        layers: 1,
        powers: 2,
        heads: 1,
        head_dim: 2,
        feat_hidden: 4,
        adj_hidden: 4,
    };
    let mut model = ScoreModel::new(source.f(), source.c(), arch, cfg.schedule().unwrap(), &mut stream(cfg.seed, 0));
    model.fit_scales(&frame.encode(source).unwrap());
    ScoreStage {
        frame,
        model,
        trace: Vec::new(),
    }
}

#[test]
fn alpha_zero_reproduces_the_source() {
    let (s, t) = gen_csbm_pair(&shifted_spec(30), 2).unwrap();
    let cfg = TrainConfig {
        alpha: 0.0,
        ..quick_cfg(3)
    };
    let stage = untrained_stage(&s, &t, &cfg);
    let gen = run_generate_stage(&s, &stage, None, &cfg).unwrap();
    assert!(gen.subset.is_empty());
    assert_eq!(gen.graph, s);

    let aug = stage.frame.encode(&s).unwrap();
    let raw = generate_graph(&aug, &stage.frame, &stage.model, None, 1.0, 0.0, &cfg.schedule().unwrap(), 4).unwrap();
    assert_eq!(raw.graph.adjacency(), s.adjacency());
    assert_eq!(raw.graph.labels(), s.labels());
    for (a, b) in raw.graph.features().as_slice().iter().zip(s.features().as_slice()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_graphs_are_valid(seed in 0u64..10_000, n in 2usize..14, alpha in 0.0f64..=1.0) {
        let (s, t) = gen_csbm_pair(&shifted_spec(n), seed).unwrap();
        let cfg = TrainConfig { alpha, ..quick_cfg(seed) };
        let stage = untrained_stage(&s, &t, &cfg);
        let gen = run_generate_stage(&s, &stage, None, &cfg).unwrap();
        let g = &gen.graph;
        prop_assert_eq!((g.n(), g.f(), g.c()), (s.n(), s.f(), s.c()));
        let a = g.adjacency();
        for u in 0..n {
            prop_assert_eq!(a[(u, u)], 0.0);
            for v in 0..n {
                prop_assert_eq!(a[(u, v)], a[(v, u)]);
                prop_assert!(a[(u, v)] == 0.0 || a[(u, v)] == 1.0);
            }
        }
        prop_assert!(g.features().is_finite());
        prop_assert!(gen.labels().iter().all(|&l| l < g.c()));
        for u in (0..n).filter(|u| !gen.subset.contains(u)) {
            prop_assert_eq!(g.features().row(u), s.features().row(u));
            prop_assert_eq!(g.labels()[u], s.labels()[u]);
            for v in (0..n).filter(|v| !gen.subset.contains(v)) {
                prop_assert_eq!(a[(u, v)], s.adjacency()[(u, v)]);
            }
        }
    }
}

#[test]
fn unguided_generation_keeps_the_label_histogram() {
    let (s, t) = gen_csbm_pair(&CsbmSpec::two_class(100, 4, 2.0, 1.0, 0.2, 0.05), 5).unwrap();
    let cfg = TrainConfig {
        score_epochs: 50,
        ..quick_cfg(6)
    };
    let stage = run_score_stage(&s, &t, &cfg).unwrap();
    let hist = |labels: &[usize]| {
        let mut h = vec![0.0; 2];
        for &l in labels {
            h[l] += 1.0 / labels.len() as f64;
        }
        h
    };
    let want = hist(&s.full_labels().unwrap());
    let mut pooled = Vec::new();
    for run in 0..10 {
        let gen = run_generate_stage(&s, &stage, None, &TrainConfig { seed: 100 + run, ..cfg }).unwrap();
        pooled.extend(gen.labels());
    }
    let got = hist(&pooled);
    let tv = 0.5 * want.iter().zip(&got).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv < 0.1, "{tv}");
}

#[test]
fn zero_eta_ignores_the_target_features() {
    let (s, t) = gen_csbm_pair(&shifted_spec(60), 7).unwrap();
    let other = Graph::new(
        normal_matrix(60, 4, &mut rng_from_seed(8)),
        t.adjacency().clone(),
        t.labels().to_vec(),
        2,
    )
    .unwrap();
    let cfg = TrainConfig {
        eta: 0.0,
        ..quick_cfg(9)
    };
    let a = train_target_gnn(&s, &t, &cfg).unwrap();
    let b = train_target_gnn(&s, &other, &cfg).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.loss_ce, y.loss_ce);
        assert_eq!(x.loss_mmd, 0.0);
    }
    assert_eq!(a.model, b.model);
}

#[test]
fn separable_graph_is_learned() {
    let (g, _) = gen_csbm_pair(&CsbmSpec::two_class(200, 4, 10.0, 1.0, 0.1, 0.02), 10).unwrap();
    let out = train_target_gnn(&g, &g, &TrainConfig::default()).unwrap();
    assert_eq!(out.metrics.rounds.len(), 5);
    assert!(out.metrics.mi_mean >= 0.99, "{}", out.metrics.mi_mean);
    assert_eq!(out.records.len(), 5 * 150);
}

#[test]
fn target_training_rejects_mismatches() {
    let (s, _) = gen_csbm_pair(&shifted_spec(10), 11).unwrap();
    let wide = Graph::new(Matrix::zeros(10, 5), Matrix::zeros(10, 10), vec![Some(0); 10], 2).unwrap();
    let three = Graph::new(Matrix::zeros(10, 4), Matrix::zeros(10, 10), vec![Some(0); 10], 3).unwrap();
    assert!(train_target_gnn(&s, &wide, &quick_cfg(0)).is_err());
    assert!(train_target_gnn(&s, &three, &quick_cfg(0)).is_err());
    assert!(train_target_gnn(&s.unlabeled(), &s, &quick_cfg(0)).is_err());
    assert!(train_target_gnn(&s, &s.unlabeled(), &quick_cfg(0)).is_err());
}

#[test]
fn pipeline_is_deterministic() {
    let (s, t) = gen_csbm_pair(&shifted_spec(40), 12).unwrap();
    let a = run_pipeline(&s, &t, &quick_cfg(13)).unwrap();
    let b = run_pipeline(&s, &t, &quick_cfg(13)).unwrap();
    let text = |o: &diffgda::pipeline::PipelineOutput| metrics_jsonl(o.metrics(), &o.target.records).unwrap();
    assert_eq!(text(&a), text(&b));
    assert_eq!(a.generated, b.generated);
    assert_eq!(a.embeddings, b.embeddings);
    assert_eq!(a.metrics().rounds.len(), 2);
}

#[test]
fn degenerate_pipeline_equals_source_only() {
    let (s, t) = gen_csbm_pair(&shifted_spec(40), 14).unwrap();
    let cfg = TrainConfig {
        alpha: 0.0,
        eta: 0.0,
        ..quick_cfg(15)
    };
    let out = run_pipeline(&s, &t, &cfg).unwrap();
    assert_eq!(out.generated.graph, s);
    let base = source_only(&s, &t, &cfg).unwrap();
    assert_eq!(out.metrics(), &base.metrics);
    assert_eq!(out.target.records, base.records);
}

#[test]
fn pipeline_errors_name_the_stage() {
    let (s, _) = gen_csbm_pair(&shifted_spec(10), 16).unwrap();
    let wide = Graph::new(Matrix::zeros(10, 5), Matrix::zeros(10, 10), vec![None; 10], 2).unwrap();
    let err = run_pipeline(&s, &wide, &quick_cfg(0)).unwrap_err().to_string();
    assert!(err.contains("input"), "{err}");
    let bad = TrainConfig {
        eta: 0.6,
        ..quick_cfg(0)
    };
    let err = run_pipeline(&s, &s, &bad).unwrap_err().to_string();
    assert!(err.contains("config") && err.contains("eta"), "{err}");
}

#[test]
fn generated_embeddings_move_toward_the_target() {
    let mut wins = 0;
    let mut report = Vec::new();
    for seed in 0..10 {
        let (s, t) = gen_csbm_pair(&shifted_spec(100), 20 + seed).unwrap();
        let cfg = TrainConfig {
            seed,
            rounds: 1,
            epochs: 60,
            score_epochs: 100,
            guidance_epochs: 50,
            ..TrainConfig::default()
        };
        let out = run_pipeline(&s, &t, &cfg).unwrap();
        let gnn = &out.target.model;
        let (h_gen, _) = gnn.predict(&out.generated.graph).unwrap();
        let (h_src, _) = gnn.predict(&s).unwrap();
        let (h_tgt, _) = gnn.predict(&t).unwrap();
        let kern = MmdKernel::median_heuristic(&h_src, &h_tgt);
        let gen = mmd(&h_gen, &h_tgt, &kern).unwrap();
        let src = mmd(&h_src, &h_tgt, &kern).unwrap();
        wins += (gen < src) as usize;
        report.push((gen, src));
    }
    assert!(wins >= 8, "{report:?}");
}
