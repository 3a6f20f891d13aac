//! Batch entry points wiring the pipeline: synthesize, train, evaluate,
//! markers.
//!
//! `run` is the main path: ingest -> preprocess -> graphs -> train ->
//! concatenate -> k-means -> metrics (when truth is given) -> marker report.
//! A manifest with the resolved config and input digests is written before
//! training so a rerun can be checked byte-for-byte. Errors name the stage
//! that failed; usage errors exit with code 2, everything else with 1.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use scrcl_core::analysis::{deg_scores, write_embeddings_csv, write_markers_tsv};
use scrcl_core::cluster::{compute_metrics, concat_embed, kmeans};
use scrcl_core::graphs::{
    build_cell_graph_expression, build_cell_graph_spatial, build_gene_graph, Metric,
};
use scrcl_core::ingest::{
    generate_synthetic, load_coords, load_expression, load_labels, preprocess, write_coords_csv,
    write_expression_csv, write_labels_csv, Dataset, Format, PreprocessConfig, SpatialLayout,
    SyntheticSpec,
};
use scrcl_core::model::save_checkpoint;
use scrcl_core::trainer::{parse_ablations, train, write_loss_trace, GraphMode, TrainConfig};

#[derive(Parser)]
#[command(
    name = "scrcl",
    version,
    about = "Refinement contrastive learning for cell-type identification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset (expression, coords, labels).
    Synth(SynthArgs),
    /// Train on a dataset, cluster the embeddings, and write all artifacts.
    Run(RunArgs),
    /// Score predicted labels against ground truth (ACC, NMI, ARI).
    Eval(EvalArgs),
    /// Rank marker genes per cluster from a labeled expression matrix.
    Markers(MarkersArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of cells.
    #[arg(long, default_value_t = 300)]
    cells: usize,
    /// Number of genes.
    #[arg(long, default_value_t = 200)]
    genes: usize,
    /// Number of cell types.
    #[arg(long, default_value_t = 3)]
    types: usize,
    /// Marker genes planted per type.
    #[arg(long, default_value_t = 10)]
    markers: usize,
    /// Mean expression lift on a type's marker genes.
    #[arg(long, default_value_t = 4.0)]
    lift: f64,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Per-entry dropout probability, in [0, 1).
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Spatial layout: none or layered-bands.
    #[arg(long, default_value = "layered-bands")]
    layout: SpatialLayout,
    /// RNG seed (falls back to SCRCL_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Expression matrix (CSV or MatrixMarket).
    #[arg(long)]
    data: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<Format>,
    /// Spatial coordinates CSV (required for --graph spatial).
    #[arg(long)]
    coords: Option<PathBuf>,
    /// Ground-truth labels CSV; enables metrics output.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cell graph source: spatial or expression.
    #[arg(long)]
    graph: Option<GraphMode>,
    /// Neighbors per cell in the cell graph.
    #[arg(long)]
    k_cell: Option<usize>,
    /// Neighbors per gene in the gene graph.
    #[arg(long)]
    k_gene: Option<usize>,
    /// Cell-embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Cluster count (defaults to the label class count when labels are given).
    #[arg(long)]
    clusters: Option<usize>,
    /// Weight of the neighborhood-contrast term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the cross-view consistency term.
    #[arg(long)]
    beta: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// RNG seed (falls back to SCRCL_SEED, then the config default).
    #[arg(long)]
    seed: Option<u64>,
    /// k-means restarts.
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    /// Comma-separated ablations: no_hea, no_ndc, no_cvc, mlp_only, gcn_only, no_refine.
    #[arg(long)]
    ablate: Option<String>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted labels CSV (id,label).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth labels CSV (id,label).
    #[arg(long)]
    truth: PathBuf,
    /// Optional metrics JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MarkersArgs {
    /// Expression matrix (CSV or MatrixMarket).
    #[arg(long)]
    data: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<Format>,
    /// Cluster labels CSV (id,label).
    #[arg(long)]
    labels: PathBuf,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Run(args) => cmd_run(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Markers(args) => cmd_markers(args),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match env::var("SCRCL_SEED") {
        Ok(s) => Ok(Some(s.parse::<u64>().with_context(|| {
            format!("SCRCL_SEED must be an unsigned integer, got {s:?}")
        })?)),
        Err(_) => Ok(None),
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

// ---- synth ----

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = SyntheticSpec {
        n_cells: args.cells,
        n_genes: args.genes,
        n_types: args.types,
        markers_per_type: args.markers,
        marker_lift: args.lift,
        noise_sd: args.noise,
        dropout_rate: args.dropout,
        spatial_layout: args.layout,
        seed,
    };
    let ds = generate_synthetic(&spec).context("synthesis stage")?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .context("artifact stage")?;
    let expr_path = args.out.join("expression.csv");
    write_expression_csv(&ds.expression, &expr_path).context("artifact stage")?;
    let mut written = vec![expr_path];
    if let Some(coords) = &ds.coords {
        let path = args.out.join("coords.csv");
        write_coords_csv(&path, &ds.expression.cell_ids, coords).context("artifact stage")?;
        written.push(path);
    }
    if let Some(labels) = &ds.labels {
        let strings: Vec<String> = labels.iter().map(|l| format!("t{l}")).collect();
        let path = args.out.join("labels.csv");
        write_labels_csv(&path, &ds.expression.cell_ids, &strings).context("artifact stage")?;
        written.push(path);
    }
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---- run ----

/// The fixed artifact layout under `--out`.
struct OutPaths {
    manifest: PathBuf,
    loss_trace: PathBuf,
    checkpoint: PathBuf,
    embeddings: PathBuf,
    labels: PathBuf,
    metrics: Option<PathBuf>,
    markers: PathBuf,
}

impl OutPaths {
    fn new(dir: &Path, with_metrics: bool) -> OutPaths {
        OutPaths {
            manifest: dir.join("manifest.json"),
            loss_trace: dir.join("loss_trace.csv"),
            checkpoint: dir.join("checkpoint.bin"),
            embeddings: dir.join("embeddings.csv"),
            labels: dir.join("labels.csv"),
            metrics: with_metrics.then(|| dir.join("metrics.json")),
            markers: dir.join("markers.tsv"),
        }
    }

    fn outputs(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, p: &PathBuf| {
            map.insert(k.to_string(), p.display().to_string());
        };
        put("manifest", &self.manifest);
        put("loss_trace", &self.loss_trace);
        put("checkpoint", &self.checkpoint);
        put("embeddings", &self.embeddings);
        put("labels", &self.labels);
        if let Some(m) = &self.metrics {
            put("metrics", m);
        }
        put("markers", &self.markers);
        map
    }
}

/// Written before training starts; identical manifests reproduce identical
/// outputs.
#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    seed: u64,
    restarts: usize,
    config: &'a TrainConfig,
    preprocess: &'a PreprocessConfig,
    /// input path -> sha256 of its bytes
    inputs: BTreeMap<String, String>,
    /// artifact name -> path
    outputs: BTreeMap<String, String>,
}

/// Merge precedence: flags > config file > SCRCL_SEED / label-derived
/// cluster count > defaults.
fn resolve_config(args: &RunArgs, label_classes: Option<usize>) -> Result<TrainConfig> {
    let mut root: serde_json::Value = match &args.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("bad JSON in {}", p.display()))?
        }
        None => serde_json::json!({}),
    };
    let serde_json::Value::Object(obj) = &mut root else {
        bail!("config file must hold a JSON object");
    };

    fn put<T: Serialize>(
        obj: &mut serde_json::Map<String, serde_json::Value>,
        key: &str,
        v: &Option<T>,
    ) {
        if let Some(v) = v {
            obj.insert(
                key.into(),
                serde_json::to_value(v).expect("config field serializes"),
            );
        }
    }
    put(obj, "latent", &args.dim);
    put(obj, "n_clusters", &args.clusters);
    put(obj, "alpha", &args.alpha);
    put(obj, "beta", &args.beta);
    put(obj, "lr", &args.lr);
    put(obj, "epochs", &args.epochs);
    put(obj, "seed", &args.seed);
    put(obj, "k_cell", &args.k_cell);
    put(obj, "k_gene", &args.k_gene);
    put(obj, "graph_mode", &args.graph);
    if let Some(list) = &args.ablate {
        obj.insert(
            "ablation".into(),
            serde_json::to_value(parse_ablations(list)?)?,
        );
    }
    if !obj.contains_key("seed") {
        if let Some(seed) = env_seed()? {
            obj.insert("seed".into(), seed.into());
        }
    }
    if !obj.contains_key("n_clusters") {
        if let Some(c) = label_classes {
            obj.insert("n_clusters".into(), c.into());
        }
    }
    let cfg: TrainConfig = serde_json::from_value(root).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    // ingest
    let format = match args.format {
        Some(f) => f,
        None => Format::from_path(&args.data).context("ingest stage")?,
    };
    let raw = load_expression(&args.data, format).context("ingest stage")?;
    let coords = args
        .coords
        .as_ref()
        .map(|p| load_coords(p, &raw.cell_ids))
        .transpose()
        .context("ingest stage")?;
    let truth = args
        .labels
        .as_ref()
        .map(|p| load_labels(p, &raw.cell_ids))
        .transpose()
        .context("ingest stage")?;

    // configuration
    let cfg = resolve_config(&args, truth.as_ref().map(|(_, k)| *k)).context("config stage")?;
    if cfg.graph_mode == GraphMode::Spatial && coords.is_none() {
        bail!("config stage: --graph spatial requires --coords");
    }

    // preprocess
    let pre_cfg = PreprocessConfig::default();
    let expr = preprocess(&raw, &pre_cfg).context("preprocess stage")?;

    // manifest goes out before any training work
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .context("artifact stage")?;
    let paths = OutPaths::new(&args.out, truth.is_some());
    let mut inputs = BTreeMap::new();
    inputs.insert(args.data.display().to_string(), sha256_hex(&args.data)?);
    for p in [&args.coords, &args.labels, &args.config]
        .into_iter()
        .flatten()
    {
        inputs.insert(p.display().to_string(), sha256_hex(p)?);
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        restarts: args.restarts,
        config: &cfg,
        preprocess: &pre_cfg,
        inputs,
        outputs: paths.outputs(),
    };
    write_json(&paths.manifest, &manifest).context("artifact stage")?;

    // graphs
    let cell_graph = match cfg.graph_mode {
        GraphMode::Spatial => {
            build_cell_graph_spatial(coords.as_ref().expect("checked above"), cfg.k_cell)
        }
        GraphMode::Expression => {
            build_cell_graph_expression(&expr.values, cfg.k_cell, Metric::Cosine)
        }
    }
    .context("graph stage")?;
    let gene_graph = build_gene_graph(&expr.values, cfg.k_gene).context("graph stage")?;

    // train
    let ds = Dataset {
        expression: expr,
        labels: None,
        coords: None,
        n_types: None,
    };
    let report = train(&ds, &cell_graph, &gene_graph, &cfg).context("training stage")?;
    write_loss_trace(&paths.loss_trace, &report.trace).context("artifact stage")?;
    let config_echo = serde_json::to_string(&cfg)?;
    save_checkpoint(&paths.checkpoint, &config_echo, &report.params.matrices())
        .context("artifact stage")?;

    // cluster
    let z = concat_embed(&report.z_m, &report.z_g).context("clustering stage")?;
    let km = kmeans(&z, cfg.n_clusters, cfg.seed, args.restarts).context("clustering stage")?;
    write_embeddings_csv(
        &paths.embeddings,
        &ds.expression.cell_ids,
        Some(&km.labels),
        &z,
    )
    .context("artifact stage")?;
    let label_strings: Vec<String> = km.labels.iter().map(|l| l.to_string()).collect();
    write_labels_csv(&paths.labels, &ds.expression.cell_ids, &label_strings)
        .context("artifact stage")?;

    // evaluate against truth when available
    if let (Some((truth_labels, _)), Some(metrics_path)) = (&truth, &paths.metrics) {
        let metrics = compute_metrics(&km.labels, truth_labels).context("evaluation stage")?;
        write_json(metrics_path, &metrics).context("artifact stage")?;
        println!("{metrics}");
    }

    // markers on the preprocessed matrix under predicted labels
    let markers =
        deg_scores(&ds.expression, &km.labels, cfg.n_clusters).context("analysis stage")?;
    write_markers_tsv(&paths.markers, &markers).context("artifact stage")?;

    println!("artifacts in {}", args.out.display());
    Ok(())
}

// ---- eval ----

/// Read an `id,label` CSV in file order.
fn read_label_file(path: &Path) -> Result<Vec<(String, String)>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers = r.headers()?.clone();
    let fields: Vec<&str> = headers.iter().collect();
    if fields != ["id", "label"] {
        bail!(
            "{}: header must be id,label, found {:?}",
            path.display(),
            fields.join(",")
        );
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        if record.len() != 2 {
            bail!(
                "{}: expected 2 fields, found {}",
                path.display(),
                record.len()
            );
        }
        rows.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(rows)
}

/// Map arbitrary label strings to dense indices by first appearance.
fn densify(labels: &[&String]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    let mut next = 0usize;
    labels
        .iter()
        .map(|l| {
            *map.entry(l.as_str()).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pred = read_label_file(&args.pred).context("ingest stage")?;
    let truth = read_label_file(&args.truth).context("ingest stage")?;

    let truth_map: BTreeMap<&str, &String> = truth.iter().map(|(id, l)| (id.as_str(), l)).collect();
    let pred_ids: std::collections::BTreeSet<&str> =
        pred.iter().map(|(id, _)| id.as_str()).collect();
    if pred_ids.len() != pred.len() {
        bail!("evaluation stage: duplicate ids in {}", args.pred.display());
    }
    let mut offenders: Vec<String> = pred
        .iter()
        .filter(|(id, _)| !truth_map.contains_key(id.as_str()))
        .map(|(id, _)| format!("{id} (missing from truth)"))
        .collect();
    offenders.extend(
        truth
            .iter()
            .filter(|(id, _)| !pred_ids.contains(id.as_str()))
            .map(|(id, _)| format!("{id} (missing from predictions)")),
    );
    if !offenders.is_empty() {
        let shown = offenders
            .iter()
            .take(5)
            .cloned()
            .collect::<Vec<_>>()
            .join(", ");
        bail!(
            "evaluation stage: label files disagree on {} ids; first offenders: {shown}",
            offenders.len()
        );
    }

    let pred_labels: Vec<&String> = pred.iter().map(|(_, l)| l).collect();
    let truth_labels: Vec<&String> = pred.iter().map(|(id, _)| truth_map[id.as_str()]).collect();
    let metrics = compute_metrics(&densify(&pred_labels), &densify(&truth_labels))
        .context("evaluation stage")?;
    println!("{metrics}");
    if let Some(out) = &args.out {
        write_json(out, &metrics).context("artifact stage")?;
    }
    Ok(())
}

// ---- markers ----

fn cmd_markers(args: MarkersArgs) -> Result<()> {
    let format = match args.format {
        Some(f) => f,
        None => Format::from_path(&args.data).context("ingest stage")?,
    };
    let raw = load_expression(&args.data, format).context("ingest stage")?;
    let (labels, k) = load_labels(&args.labels, &raw.cell_ids).context("ingest stage")?;
    let expr = preprocess(&raw, &PreprocessConfig::default()).context("preprocess stage")?;
    let report = deg_scores(&expr, &labels, k).context("analysis stage")?;
    write_markers_tsv(&args.out, &report).context("artifact stage")?;
    for (c, top) in report.top(3).iter().enumerate() {
        let genes: Vec<&str> = top.iter().map(|e| e.gene.as_str()).collect();
        println!("cluster {c}: {}", genes.join(" "));
    }
    Ok(())
}
