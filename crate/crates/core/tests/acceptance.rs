//! Release gates for the whole pipeline, one test per gate.
//!
//! Gates 6 through 9 share five-seed training bundles over the standard
//! planted-marker fixture (300 cells, 200 genes, 3 types, lift 4, noise 1,
//! dropout 0.2) at default hyperparameters; the bundles are computed once
//! and reused, so the first gate that touches one pays its training cost.
//! Run with `--nocapture` to see the measured values behind each verdict.

use std::time::{Duration, Instant};

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scrcl_core::analysis::deg_scores;
use scrcl_core::cluster::{
    compute_metrics, concat_embed, kmeans, metric_acc, metric_ari, MetricsReport,
};
use scrcl_core::graphs::{
    build_cell_graph_expression, build_gene_graph, normalize_adjacency, CellGraph, Metric,
};
use scrcl_core::ingest::{
    generate_synthetic, preprocess, Dataset, PreprocessConfig, SpatialLayout, SyntheticSpec,
};
use scrcl_core::linalg::Matrix;
use scrcl_core::losses::{
    cross_view_similarity, kappa_matrix, loss_cvc, loss_hea, loss_ndc, skl, LossBreakdown, EPS,
};
use scrcl_core::model::ModelDims;
use scrcl_core::trainer::{
    apply_ablation, evaluate, loss_gradients, parse_ablations, train, write_loss_trace,
    TrainConfig, TrainParams,
};

/// Seeds used by every five-seed bundle.
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Marker-block width of the standard fixture. Three blocks of this many
/// genes are planted at indices `[t * W, (t + 1) * W)` for types t = 0, 1, 2.
const FIXTURE_MARKERS: usize = 10;

/// k-means restarts, the clustering default.
const RESTARTS: usize = 20;

fn standard_fixture(seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_cells: 300,
        n_genes: 200,
        n_types: 3,
        markers_per_type: FIXTURE_MARKERS,
        marker_lift: 4.0,
        noise_sd: 1.0,
        dropout_rate: 0.2,
        spatial_layout: SpatialLayout::None,
        seed,
    };
    let mut ds = generate_synthetic(&spec).expect("fixture generation");
    ds.expression = preprocess(&ds.expression, &PreprocessConfig::default()).expect("preprocess");
    ds
}

/// One trained seed of one variant, with everything later gates inspect.
struct SeedRun {
    seed: u64,
    ari: f64,
    labels: Vec<usize>,
    truth: Vec<usize>,
    trace: Vec<LossBreakdown>,
    metrics: MetricsReport,
}

struct Bundle {
    runs: Vec<SeedRun>,
    /// Wall time of the five train-plus-cluster passes.
    elapsed: Duration,
}

impl Bundle {
    fn aris(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.ari).collect()
    }

    fn median_ari(&self) -> f64 {
        median(&self.aris())
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn config_for(ablate: &str, seed: u64) -> TrainConfig {
    TrainConfig {
        n_clusters: 3,
        seed,
        ablation: parse_ablations(ablate).expect("ablation flags"),
        ..TrainConfig::default()
    }
}

fn run_seed(ablate: &str, seed: u64) -> SeedRun {
    let ds = standard_fixture(seed);
    let truth = ds.labels.clone().expect("fixture labels");
    let cfg = config_for(ablate, seed);
    let cell_graph = build_cell_graph_expression(&ds.expression.values, cfg.k_cell, Metric::Cosine)
        .expect("cell graph");
    let gene_graph = build_gene_graph(&ds.expression.values, cfg.k_gene).expect("gene graph");
    let report = train(&ds, &cell_graph, &gene_graph, &cfg).expect("training");
    let z = concat_embed(&report.z_m, &report.z_g).expect("concat");
    let km = kmeans(&z, cfg.n_clusters, cfg.seed, RESTARTS).expect("kmeans");
    let metrics = compute_metrics(&km.labels, &truth).expect("metrics");
    SeedRun {
        seed,
        ari: metrics.ari,
        labels: km.labels,
        truth,
        trace: report.trace,
        metrics,
    }
}

fn run_bundle(ablate: &str) -> Bundle {
    let start = Instant::now();
    let runs = SEEDS.iter().map(|&s| run_seed(ablate, s)).collect();
    Bundle {
        runs,
        elapsed: start.elapsed(),
    }
}

static FULL: Lazy<Bundle> = Lazy::new(|| run_bundle(""));
static NO_HEA: Lazy<Bundle> = Lazy::new(|| run_bundle("no_hea"));
static NO_NDC: Lazy<Bundle> = Lazy::new(|| run_bundle("no_ndc"));
static NO_CVC: Lazy<Bundle> = Lazy::new(|| run_bundle("no_cvc"));
static MLP_ONLY: Lazy<Bundle> = Lazy::new(|| run_bundle("mlp_only"));
static GCN_ONLY: Lazy<Bundle> = Lazy::new(|| run_bundle("gcn_only"));
static NO_REFINE: Lazy<Bundle> = Lazy::new(|| run_bundle("no_refine"));

// ---- gate 1 ----

/// Published full-scale benchmark numbers need the original datasets and
/// tuning, neither of which exists at desk scale; the gates below verify
/// the implementation by property instead.
#[test]
fn gate_01_full_scale_benchmarks_substituted_by_property_gates() {
    println!("gate 1: full-scale benchmark reproduction out of scope at desk scale; gates 2-10 substitute");
}

// ---- gate 2 ----

/// Tiny full-model instance for the gradient and routing gates.
fn tiny_instance() -> (
    Dataset,
    CellGraph,
    scrcl_core::graphs::GeneGraph,
    TrainConfig,
) {
    let spec = SyntheticSpec {
        n_cells: 6,
        n_genes: 8,
        n_types: 2,
        markers_per_type: 3,
        marker_lift: 4.0,
        noise_sd: 1.0,
        dropout_rate: 0.0,
        spatial_layout: SpatialLayout::None,
        seed: 7,
    };
    let mut ds = generate_synthetic(&spec).expect("tiny fixture");
    ds.expression = preprocess(&ds.expression, &PreprocessConfig::default()).expect("preprocess");
    let cell_graph =
        build_cell_graph_expression(&ds.expression.values, 2, Metric::Cosine).expect("cell graph");
    let gene_graph = build_gene_graph(&ds.expression.values, 2).expect("gene graph");
    let cfg = TrainConfig {
        hidden: 8,
        latent: 5,
        gene_hidden: 4,
        n_clusters: 2,
        k_cell: 2,
        k_gene: 2,
        seed: 7,
        ..TrainConfig::default()
    };
    (ds, cell_graph, gene_graph, cfg)
}

fn init_tiny() -> (Dataset, CellGraph, Matrix, Matrix, TrainConfig, TrainParams) {
    let (ds, cell_graph, gene_graph, cfg) = tiny_instance();
    let setup = apply_ablation(&cfg).expect("setup");
    let dims = ModelDims {
        n_cells: ds.expression.values.rows(),
        n_genes: ds.expression.values.cols(),
        hidden: cfg.hidden,
        latent: cfg.latent,
        gene_hidden: cfg.gene_hidden,
        n_clusters: cfg.n_clusters,
    };
    let params = TrainParams::init(&dims, &setup, cfg.seed);
    let a_hat = normalize_adjacency(&cell_graph);
    let g_hat = normalize_adjacency(&gene_graph);
    (ds, cell_graph, a_hat, g_hat, cfg, params)
}

#[test]
fn gate_02_analytic_gradients_match_central_differences() {
    let started = Instant::now();
    let (ds, cell_graph, a_hat, g_hat, cfg, mut params) = init_tiny();
    let x = ds.expression.values.clone();
    let setup = apply_ablation(&cfg).expect("setup");
    let (_, grads) =
        loss_gradients(&params, &x, &a_hat, Some(&g_hat), &cell_graph, &setup).expect("gradients");

    // central differences of the value-level total, an independent path
    let h = 1e-5;
    let mut max_rel = 0.0_f64;
    let mut checked = 0usize;
    for (mi, g) in grads.iter().enumerate() {
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                let orig = params.matrices()[mi].get(r, c);
                params.matrices_mut()[mi].set(r, c, orig + h);
                let plus = evaluate(
                    &params,
                    &x,
                    &a_hat,
                    Some(&g_hat),
                    &cell_graph,
                    cfg.alpha,
                    cfg.beta,
                )
                .expect("eval+")
                .total;
                params.matrices_mut()[mi].set(r, c, orig - h);
                let minus = evaluate(
                    &params,
                    &x,
                    &a_hat,
                    Some(&g_hat),
                    &cell_graph,
                    cfg.alpha,
                    cfg.beta,
                )
                .expect("eval-")
                .total;
                params.matrices_mut()[mi].set(r, c, orig);
                let fd = (plus - minus) / (2.0 * h);
                let analytic = g.get(r, c);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    println!("gate 2: {checked} parameters, max relative error {max_rel:.3e}, {elapsed:?}");
    assert!(
        max_rel < 1e-4,
        "gradient mismatch: max relative error {max_rel:.3e}"
    );
    assert!(
        elapsed < Duration::from_secs(10),
        "gradient check took {elapsed:?}"
    );
}

// ---- gate 3 ----

fn naive_skl(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        acc += a * ((a + EPS).ln() - (b + EPS).ln());
        acc += b * ((b + EPS).ln() - (a + EPS).ln());
    }
    acc
}

fn naive_row_softmax(e: &Matrix) -> Vec<Vec<f64>> {
    (0..e.rows())
        .map(|i| {
            let row = e.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|v| v / sum).collect()
        })
        .collect()
}

fn naive_col_softmax(e: &Matrix) -> Vec<Vec<f64>> {
    (0..e.cols())
        .map(|j| {
            let col: Vec<f64> = (0..e.rows()).map(|i| e.get(i, j)).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = col.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|v| v / sum).collect()
        })
        .collect()
}

fn naive_hea(e_m: &Matrix, e_g: &Matrix) -> f64 {
    let (pm, pg) = (naive_row_softmax(e_m), naive_row_softmax(e_g));
    let cell: f64 = pm.iter().zip(&pg).map(|(p, q)| naive_skl(p, q)).sum();
    let (gm, gg) = (naive_col_softmax(e_m), naive_col_softmax(e_g));
    let global: f64 = gm.iter().zip(&gg).map(|(p, q)| naive_skl(p, q)).sum();
    cell + global
}

fn naive_kappa(e_m: &Matrix, e_g: &Matrix) -> Vec<Vec<f64>> {
    let (pm, pg) = (naive_row_softmax(e_m), naive_row_softmax(e_g));
    pm.iter()
        .map(|p| pg.iter().map(|q| naive_skl(p, q)).collect())
        .collect()
}

fn naive_ndc(kappa: &[Vec<f64>], graph: &CellGraph) -> f64 {
    let n = graph.node_count();
    let mut acc = 0.0;
    for i in 0..n {
        let mut num = kappa[i][i];
        for &k in graph.neighbors(i) {
            num += kappa[i][k];
        }
        num /= (graph.degree(i) + 1) as f64;
        let den = (kappa[i].iter().sum::<f64>() - kappa[i][i]) / (n - 1) as f64;
        acc += num / (den + EPS);
    }
    acc / n as f64
}

fn naive_similarity(z_m: &Matrix, z_g: &Matrix) -> Vec<Vec<f64>> {
    let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
    (0..z_m.rows())
        .map(|i| {
            (0..z_g.rows())
                .map(|j| {
                    let dot: f64 = z_m.row(i).iter().zip(z_g.row(j)).map(|(a, b)| a * b).sum();
                    dot / (norm(z_m.row(i)) * norm(z_g.row(j)))
                })
                .collect()
        })
        .collect()
}

fn naive_cvc(s: &[Vec<f64>], graph: &CellGraph) -> f64 {
    let n = graph.node_count();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j || graph.has_edge(i, j) {
                1.0
            } else {
                0.0
            };
            acc += (s[i][j] - target) * (s[i][j] - target);
        }
    }
    acc / n as f64
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn random_distribution(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

#[test]
fn gate_03_loss_primitives_match_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tol = 1e-9;
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let len = rng.gen_range(2..=16);
        let p = random_distribution(&mut rng, len);
        let q = random_distribution(&mut rng, len);
        let diff = (skl(&p, &q).expect("skl") - naive_skl(&p, &q)).abs();
        worst = worst.max(diff);
        assert!(diff <= tol, "skl off by {diff:.3e}");
    }
    for case in 0..20 {
        let n = rng.gen_range(4..=24);
        let d = rng.gen_range(2..=8);
        let e_m = random_matrix(&mut rng, n, d);
        let e_g = random_matrix(&mut rng, n, d);
        let k = rng.gen_range(1..=5.min(n - 1));
        let graph = build_cell_graph_expression(&random_matrix(&mut rng, n, 5), k, Metric::Cosine)
            .expect("graph");

        let diff = (loss_hea(&e_m, &e_g).expect("hea") - naive_hea(&e_m, &e_g)).abs();
        worst = worst.max(diff);
        assert!(diff <= tol, "case {case}: hea off by {diff:.3e}");

        let kappa = kappa_matrix(&e_m, &e_g).expect("kappa");
        let naive_k = naive_kappa(&e_m, &e_g);
        for i in 0..n {
            for j in 0..n {
                let diff = (kappa.get(i, j) - naive_k[i][j]).abs();
                worst = worst.max(diff);
                assert!(
                    diff <= tol,
                    "case {case}: kappa[{i}][{j}] off by {diff:.3e}"
                );
            }
        }

        let diff = (loss_ndc(&kappa, &graph).expect("ndc") - naive_ndc(&naive_k, &graph)).abs();
        worst = worst.max(diff);
        assert!(diff <= tol, "case {case}: ndc off by {diff:.3e}");

        let s = cross_view_similarity(&e_m, &e_g).expect("similarity");
        let naive_s = naive_similarity(&e_m, &e_g);
        for i in 0..n {
            for j in 0..n {
                let diff = (s.get(i, j) - naive_s[i][j]).abs();
                worst = worst.max(diff);
                assert!(diff <= tol, "case {case}: s[{i}][{j}] off by {diff:.3e}");
            }
        }

        let diff = (loss_cvc(&s, &graph).expect("cvc") - naive_cvc(&naive_s, &graph)).abs();
        worst = worst.max(diff);
        assert!(diff <= tol, "case {case}: cvc off by {diff:.3e}");
    }
    println!("gate 3: 20 fixtures per primitive, worst absolute deviation {worst:.3e}");
}

// ---- gate 4 ----

#[test]
fn gate_04_consistency_only_parameters_isolated_from_other_terms() {
    let (ds, cell_graph, a_hat, g_hat, cfg, params) = init_tiny();
    let x = &ds.expression.values;
    let base = evaluate(
        &params,
        x,
        &a_hat,
        Some(&g_hat),
        &cell_graph,
        cfg.alpha,
        cfg.beta,
    )
    .expect("base");

    // every entry of both gene-encoder weights and the bridge, which sit at
    // the tail of the flat parameter list in this order
    let gene = params.gene.as_ref().expect("refining model");
    let shielded: Vec<Matrix> = vec![gene.w1.clone(), gene.w2.clone(), params.bridge.clone()];
    let mut perturbed_cvc = 0usize;
    let mut total = 0usize;
    for (which, mat) in shielded.iter().enumerate() {
        for r in 0..mat.rows() {
            for c in 0..mat.cols() {
                let mut p = params.clone();
                {
                    let mut mats = p.matrices_mut();
                    let target = mats.len() - 3 + which;
                    let v = mat.get(r, c);
                    mats[target].set(r, c, v + 1e-3);
                }
                let b = evaluate(
                    &p,
                    x,
                    &a_hat,
                    Some(&g_hat),
                    &cell_graph,
                    cfg.alpha,
                    cfg.beta,
                )
                .expect("perturbed");
                assert!(
                    (b.hea - base.hea).abs() < 1e-12,
                    "alignment term moved by {:.3e}",
                    (b.hea - base.hea).abs()
                );
                assert!(
                    (b.ndc - base.ndc).abs() < 1e-12,
                    "neighborhood term moved by {:.3e}",
                    (b.ndc - base.ndc).abs()
                );
                if (b.cvc - base.cvc).abs() > 0.0 {
                    perturbed_cvc += 1;
                }
                total += 1;
            }
        }
    }
    assert!(
        perturbed_cvc > 0,
        "no perturbation reached the consistency term"
    );

    // gradient form: with the consistency term ablated, those parameters get
    // exactly zero gradient
    let mut no_cvc = cfg.clone();
    no_cvc.ablation = parse_ablations("no_cvc").expect("flags");
    let setup = apply_ablation(&no_cvc).expect("setup");
    let (_, grads) =
        loss_gradients(&params, x, &a_hat, Some(&g_hat), &cell_graph, &setup).expect("gradients");
    let n_mats = grads.len();
    for g in &grads[n_mats - 3..] {
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                assert_eq!(
                    g.get(r, c),
                    0.0,
                    "consistency-only parameter has nonzero gradient"
                );
            }
        }
    }
    println!(
        "gate 4: {total} perturbations, other terms never moved, cvc moved for {perturbed_cvc}"
    );
}

// ---- gate 5 ----

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for rest in permutations(k - 1) {
        for pos in 0..k {
            let mut perm = rest.clone();
            perm.insert(pos, k - 1);
            out.push(perm);
        }
    }
    out
}

fn brute_force_acc(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let n = pred.len();
    let best = permutations(k)
        .into_iter()
        .map(|perm| {
            pred.iter()
                .zip(truth)
                .filter(|&(&p, &t)| perm[p] == t)
                .count()
        })
        .max()
        .unwrap_or(0);
    best as f64 / n as f64
}

fn pair_counting_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut both, mut same_pred, mut same_truth) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let p = pred[i] == pred[j];
            let t = truth[i] == truth[j];
            if p {
                same_pred += 1.0;
            }
            if t {
                same_truth += 1.0;
            }
            if p && t {
                both += 1.0;
            }
        }
    }
    let total = (n * (n - 1) / 2) as f64;
    let expected = same_pred * same_truth / total;
    let max = 0.5 * (same_pred + same_truth);
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

#[test]
fn gate_05_accuracy_and_ari_match_exhaustive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..50 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(k..=40);
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let got = metric_acc(&pred, &truth).expect("acc");
        let want = brute_force_acc(&pred, &truth, k);
        assert!(
            (got - want).abs() <= 1e-12,
            "case {case}: acc {got} vs permutation search {want}"
        );
    }
    for case in 0..50 {
        let k = rng.gen_range(1..=4);
        let n = rng.gen_range(3..=12);
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let got = metric_ari(&pred, &truth).expect("ari");
        let want = pair_counting_ari(&pred, &truth);
        assert!(
            (got - want).abs() <= 1e-12,
            "case {case}: ari {got} vs pair counting {want}"
        );
    }
    println!("gate 5: 50 accuracy fixtures and 50 pair-counting fixtures agree");
}

// ---- gate 6 ----

#[test]
fn gate_06_full_model_recovers_planted_types() {
    let bundle = &*FULL;
    let aris = bundle.aris();
    let med = bundle.median_ari();
    println!(
        "gate 6: per-seed ARI {:?}, median {med:.4}, five runs took {:.1?}",
        aris, bundle.elapsed
    );
    assert!(
        bundle.elapsed < Duration::from_secs(180),
        "five-seed bundle took {:?}",
        bundle.elapsed
    );
    assert!(
        med >= 0.90,
        "median ARI {med:.4} below 0.90 (per-seed {aris:?})"
    );
}

// ---- gate 7 ----

#[test]
fn gate_07_loss_ablations_degrade_clustering_ndc_most() {
    let full = FULL.median_ari();
    let hea = NO_HEA.median_ari();
    let ndc = NO_NDC.median_ari();
    let cvc = NO_CVC.median_ari();
    println!(
        "gate 7: median ARI full {full:.4}, no_hea {hea:.4}, no_ndc {ndc:.4}, no_cvc {cvc:.4}"
    );
    assert!(
        hea < full,
        "no_hea median {hea:.4} not below full {full:.4}"
    );
    assert!(
        ndc < full,
        "no_ndc median {ndc:.4} not below full {full:.4}"
    );
    assert!(
        cvc < full,
        "no_cvc median {cvc:.4} not below full {full:.4}"
    );
    let (drop_hea, drop_ndc, drop_cvc) = (full - hea, full - ndc, full - cvc);
    assert!(
        drop_ndc > drop_hea && drop_ndc > drop_cvc,
        "no_ndc drop {drop_ndc:.4} is not the largest (no_hea {drop_hea:.4}, no_cvc {drop_cvc:.4})"
    );
}

// ---- gate 8 ----

#[test]
fn gate_08_heterogeneous_encoders_meet_or_beat_uniform_variants() {
    let full = FULL.median_ari();
    let mlp = MLP_ONLY.median_ari();
    let gcn = GCN_ONLY.median_ari();
    println!("gate 8: median ARI full {full:.4}, mlp_only {mlp:.4}, gcn_only {gcn:.4}");
    assert!(full >= mlp, "full {full:.4} below mlp_only {mlp:.4}");
    assert!(full >= gcn, "full {full:.4} below gcn_only {gcn:.4}");
}

// ---- gate 9 ----

/// Map clusters to planted types by maximizing overlap over all bijections.
fn match_clusters_to_types(labels: &[usize], truth: &[usize], k: usize) -> Vec<usize> {
    permutations(k)
        .into_iter()
        .max_by_key(|perm| {
            labels
                .iter()
                .zip(truth)
                .filter(|&(&c, &t)| perm[c] == t)
                .count()
        })
        .expect("nonempty permutation set")
}

/// Fraction of (seed, cluster) pairs whose top-3 scored genes hit the matched
/// planted block at least twice, plus the count of seeds where every cluster
/// hits.
fn marker_recovery(bundle: &Bundle) -> (f64, usize) {
    let mut hits = 0usize;
    let mut pairs = 0usize;
    let mut clean_seeds = 0usize;
    for run in &bundle.runs {
        let ds = standard_fixture(run.seed);
        let report = deg_scores(&ds.expression, &run.labels, 3).expect("marker scores");
        let mapping = match_clusters_to_types(&run.labels, &run.truth, 3);
        let mut seed_ok = true;
        for (cluster, top) in report.top(3).iter().enumerate() {
            let block_start = mapping[cluster] * FIXTURE_MARKERS;
            let in_block = top
                .iter()
                .filter(|e| {
                    let idx: usize = e
                        .gene
                        .trim_start_matches('g')
                        .parse()
                        .expect("synthetic gene id");
                    (block_start..block_start + FIXTURE_MARKERS).contains(&idx)
                })
                .count();
            pairs += 1;
            if in_block >= 2 {
                hits += 1;
            } else {
                seed_ok = false;
            }
        }
        if seed_ok {
            clean_seeds += 1;
        }
    }
    (hits as f64 / pairs as f64, clean_seeds)
}

#[test]
fn gate_09_markers_recovered_in_matched_planted_blocks() {
    let (full_rate, full_clean) = marker_recovery(&FULL);
    let (plain_rate, plain_clean) = marker_recovery(&NO_REFINE);
    println!(
        "gate 9: full recovery rate {full_rate:.3} ({full_clean}/5 clean seeds), \
         no_refine {plain_rate:.3} ({plain_clean}/5 clean seeds)"
    );
    assert!(
        full_clean >= 4,
        "only {full_clean}/5 seeds recover markers in every cluster"
    );
    assert!(
        plain_rate <= full_rate,
        "no_refine recovery {plain_rate:.3} outperforms full {full_rate:.3}"
    );
}

// ---- gate 10 ----

#[test]
fn gate_10_identical_configs_reproduce_identical_artifacts() {
    let first = &FULL.runs[0];
    let again = run_seed("", first.seed);

    let dir = tempfile::tempdir().expect("tempdir");
    let trace_a = dir.path().join("a.csv");
    let trace_b = dir.path().join("b.csv");
    write_loss_trace(&trace_a, &first.trace).expect("trace a");
    write_loss_trace(&trace_b, &again.trace).expect("trace b");
    let bytes_a = std::fs::read(&trace_a).expect("read a");
    let bytes_b = std::fs::read(&trace_b).expect("read b");
    assert_eq!(
        bytes_a, bytes_b,
        "loss traces differ between identical runs"
    );

    assert_eq!(
        first.labels, again.labels,
        "labels differ between identical runs"
    );

    let json_a = serde_json::to_string(&first.metrics).expect("metrics a");
    let json_b = serde_json::to_string(&again.metrics).expect("metrics b");
    assert_eq!(json_a, json_b, "metrics differ between identical runs");
    println!("gate 10: rerun of seed {} is byte-identical", first.seed);
}
