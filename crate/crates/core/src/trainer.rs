//! Full-batch training of the joint objective with Adam.
//!
//! Every epoch rebuilds the computation tape from the current parameters,
//! reads the three loss terms, and applies one Adam step to every learnable
//! matrix. Ablation flags change what gets built: loss terms can be switched
//! off (their gradient paths disappear with them), the heterogeneous encoder
//! pair can be replaced by two same-type encoders, and the cell-gene
//! refinement can be swapped for a plain shared projection.
//!
//! Gradient routing is structural: the alignment and neighborhood terms are
//! functions of the view embeddings only, so the gene encoder and the bridge
//! receive gradient exclusively from the cross-view consistency term. The
//! first epoch asserts this on the built tape rather than trusting it.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{normalize_adjacency, CellGraph, GeneGraph};
use crate::ingest::Dataset;
use crate::linalg::{Matrix, Tape, VarId};
use crate::losses::{self, LossBreakdown};
use crate::model::{self, glorot, GcnParams, MlpParams, ModelDims};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// How the cell graph is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Spatial,
    Expression,
}

impl FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<GraphMode> {
        match s {
            "spatial" => Ok(GraphMode::Spatial),
            "expression" => Ok(GraphMode::Expression),
            other => Err(Error::InvalidParameter(format!(
                "unknown graph mode {other:?}; expected spatial or expression"
            ))),
        }
    }
}

impl fmt::Display for GraphMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphMode::Spatial => "spatial",
            GraphMode::Expression => "expression",
        })
    }
}

/// A single ablation switch. Flags compose as a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drop the embedding-alignment term.
    NoHea,
    /// Drop the neighborhood-contrast term.
    NoNdc,
    /// Drop the cross-view consistency term.
    NoCvc,
    /// Replace the heterogeneous pair with two independent MLPs.
    MlpOnly,
    /// Replace the heterogeneous pair with two independent GCNs.
    GcnOnly,
    /// Replace refinement with a shared learnable projection to c dims.
    NoRefine,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Ablation> {
        match s {
            "no_hea" => Ok(Ablation::NoHea),
            "no_ndc" => Ok(Ablation::NoNdc),
            "no_cvc" => Ok(Ablation::NoCvc),
            "mlp_only" => Ok(Ablation::MlpOnly),
            "gcn_only" => Ok(Ablation::GcnOnly),
            "no_refine" => Ok(Ablation::NoRefine),
            other => Err(Error::InvalidParameter(format!(
                "unknown ablation {other:?}; expected one of \
                 no_hea, no_ndc, no_cvc, mlp_only, gcn_only, no_refine"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::NoHea => "no_hea",
            Ablation::NoNdc => "no_ndc",
            Ablation::NoCvc => "no_cvc",
            Ablation::MlpOnly => "mlp_only",
            Ablation::GcnOnly => "gcn_only",
            Ablation::NoRefine => "no_refine",
        })
    }
}

/// Parse a comma-separated ablation list; empty input means no ablations.
pub fn parse_ablations(s: &str) -> Result<BTreeSet<Ablation>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(Ablation::from_str)
        .collect()
}

/// Everything a run needs beyond the data itself. Serializes to/from the
/// JSON config format; absent fields fall back to these defaults and
/// unknown fields are rejected so config typos cannot pass silently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Cell-encoder hidden width.
    pub hidden: usize,
    /// Cell-embedding dimension.
    pub latent: usize,
    /// Gene-encoder hidden width.
    pub gene_hidden: usize,
    /// Cluster count (also the refined-embedding dimension).
    pub n_clusters: usize,
    /// Weight of the neighborhood-contrast term.
    pub alpha: f64,
    /// Weight of the cross-view consistency term.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Neighbors per cell when building the cell graph.
    pub k_cell: usize,
    /// Neighbors per gene when building the gene graph.
    pub k_gene: usize,
    pub graph_mode: GraphMode,
    pub ablation: BTreeSet<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            hidden: 256,
            latent: 64,
            gene_hidden: 128,
            n_clusters: 2,
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-3,
            epochs: 400,
            seed: 0,
            k_cell: 15,
            k_gene: 10,
            graph_mode: GraphMode::Expression,
            ablation: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        // lr = 0 is allowed as a degenerate no-op run; only sign is checked.
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lr must be nonnegative, got {}",
                self.lr
            )));
        }
        if self.n_clusters < 2 {
            return Err(Error::InvalidParameter(format!(
                "n_clusters must be at least 2, got {}",
                self.n_clusters
            )));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be nonnegative, got alpha = {}, beta = {}",
                self.alpha, self.beta
            )));
        }
        if self.hidden < 1 || self.latent < 1 || self.gene_hidden < 1 {
            return Err(Error::InvalidParameter(
                "encoder widths must be at least 1".into(),
            ));
        }
        if self.k_cell < 1 || self.k_gene < 1 {
            return Err(Error::InvalidParameter(
                "graph neighbor counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The architecture of the two cell views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewArch {
    /// MLP view plus GCN view (the full model).
    Heterogeneous,
    MlpOnly,
    GcnOnly,
}

/// Config after ablation flags are folded in: per-term weights (zero means
/// the term is not even built) and the structural switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveSetup {
    pub hea_weight: f64,
    pub ndc_weight: f64,
    pub cvc_weight: f64,
    pub arch: ViewArch,
    pub refine: bool,
}

/// Fold ablation flags into an [`EffectiveSetup`], rejecting contradictory
/// combinations.
pub fn apply_ablation(cfg: &TrainConfig) -> Result<EffectiveSetup> {
    let has = |a: Ablation| cfg.ablation.contains(&a);
    if has(Ablation::MlpOnly) && has(Ablation::GcnOnly) {
        return Err(Error::InvalidParameter(
            "mlp_only and gcn_only are mutually exclusive".into(),
        ));
    }
    if has(Ablation::NoHea) && has(Ablation::NoNdc) && has(Ablation::NoCvc) {
        return Err(Error::InvalidParameter(
            "ablating all three loss terms leaves nothing to optimize".into(),
        ));
    }
    let arch = if has(Ablation::MlpOnly) {
        ViewArch::MlpOnly
    } else if has(Ablation::GcnOnly) {
        ViewArch::GcnOnly
    } else {
        ViewArch::Heterogeneous
    };
    Ok(EffectiveSetup {
        hea_weight: if has(Ablation::NoHea) { 0.0 } else { 1.0 },
        ndc_weight: if has(Ablation::NoNdc) { 0.0 } else { cfg.alpha },
        cvc_weight: if has(Ablation::NoCvc) { 0.0 } else { cfg.beta },
        arch,
        refine: !has(Ablation::NoRefine),
    })
}

/// One cell-view encoder; the full model uses one of each kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ViewEncoder {
    Mlp(MlpParams),
    Gcn(GcnParams),
}

impl ViewEncoder {
    fn matrices(&self) -> Vec<&Matrix> {
        match self {
            ViewEncoder::Mlp(p) => vec![&p.w1, &p.b1, &p.w2, &p.b2],
            ViewEncoder::Gcn(p) => vec![&p.w1, &p.w2],
        }
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            ViewEncoder::Mlp(p) => vec![&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2],
            ViewEncoder::Gcn(p) => vec![&mut p.w1, &mut p.w2],
        }
    }

    fn forward(&self, x: &Matrix, a_hat: &Matrix) -> Result<Matrix> {
        match self {
            ViewEncoder::Mlp(p) => model::mlp_forward(x, p),
            ViewEncoder::Gcn(p) => model::gcn_forward(x, a_hat, p),
        }
    }
}

/// Every learnable matrix of a (possibly ablated) model.
///
/// `bridge` is the refinement bridge `W` (latent x genes) when refining and
/// the shared projection (latent x clusters) under `no_refine`; `gene` is
/// absent in the latter case.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub view_m: ViewEncoder,
    pub view_g: ViewEncoder,
    pub gene: Option<GcnParams>,
    pub bridge: Matrix,
}

impl TrainParams {
    /// Seed-deterministic init: Glorot-uniform weights, zero biases, and a
    /// small-scale refinement bridge so early refined embeddings stay small.
    pub fn init(dims: &ModelDims, setup: &EffectiveSetup, seed: u64) -> TrainParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (dims.n_cells, dims.n_genes);
        let (h, d, hg, c) = (dims.hidden, dims.latent, dims.gene_hidden, dims.n_clusters);
        let mlp = |rng: &mut ChaCha8Rng| {
            ViewEncoder::Mlp(MlpParams {
                w1: glorot(rng, m, h),
                b1: Matrix::zeros(1, h),
                w2: glorot(rng, h, d),
                b2: Matrix::zeros(1, d),
            })
        };
        let gcn = |rng: &mut ChaCha8Rng| {
            ViewEncoder::Gcn(GcnParams {
                w1: glorot(rng, m, h),
                w2: glorot(rng, h, d),
            })
        };
        let (view_m, view_g) = match setup.arch {
            ViewArch::Heterogeneous => (mlp(&mut rng), gcn(&mut rng)),
            ViewArch::MlpOnly => (mlp(&mut rng), mlp(&mut rng)),
            ViewArch::GcnOnly => (gcn(&mut rng), gcn(&mut rng)),
        };
        let gene = setup.refine.then(|| GcnParams {
            w1: glorot(&mut rng, n, hg),
            w2: glorot(&mut rng, hg, c),
        });
        let bridge = if setup.refine {
            use rand::Rng;
            let data = (0..d * m).map(|_| rng.gen_range(-1e-2..1e-2)).collect();
            Matrix::from_vec(d, m, data).expect("shape")
        } else {
            glorot(&mut rng, d, c)
        };
        TrainParams {
            view_m,
            view_g,
            gene,
            bridge,
        }
    }

    /// All learnable matrices in the fixed checkpoint/update order:
    /// first view, second view, gene encoder (if any), bridge.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = self.view_m.matrices();
        out.extend(self.view_g.matrices());
        if let Some(g) = &self.gene {
            out.extend([&g.w1, &g.w2]);
        }
        out.push(&self.bridge);
        out
    }

    /// Mutable view in the same order as [`TrainParams::matrices`].
    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.view_m.matrices_mut();
        out.extend(self.view_g.matrices_mut());
        if let Some(g) = &mut self.gene {
            out.extend([&mut g.w1, &mut g.w2]);
        }
        out.push(&mut self.bridge);
        out
    }

    /// Rebuild from a flat matrix list (checkpoint order) for the given setup.
    pub fn from_matrices(setup: &EffectiveSetup, mats: Vec<Matrix>) -> Result<TrainParams> {
        let per_view = |arch_is_mlp: bool| if arch_is_mlp { 4 } else { 2 };
        let (m_mlp, g_mlp) = match setup.arch {
            ViewArch::Heterogeneous => (true, false),
            ViewArch::MlpOnly => (true, true),
            ViewArch::GcnOnly => (false, false),
        };
        let expected = per_view(m_mlp) + per_view(g_mlp) + if setup.refine { 3 } else { 1 };
        if mats.len() != expected {
            return Err(Error::Contract(format!(
                "checkpoint holds {} matrices but this setup needs {expected}",
                mats.len()
            )));
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("length checked");
        let mut view = |is_mlp: bool| {
            if is_mlp {
                ViewEncoder::Mlp(MlpParams {
                    w1: next(),
                    b1: next(),
                    w2: next(),
                    b2: next(),
                })
            } else {
                ViewEncoder::Gcn(GcnParams {
                    w1: next(),
                    w2: next(),
                })
            }
        };
        let view_m = view(m_mlp);
        let view_g = view(g_mlp);
        let gene = setup.refine.then(|| GcnParams {
            w1: next(),
            w2: next(),
        });
        Ok(TrainParams {
            view_m,
            view_g,
            gene,
            bridge: next(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.all_finite())
    }
}

/// Tape handles for a registered [`TrainParams`].
#[derive(Debug, Clone, Copy)]
enum ViewIds {
    Mlp([VarId; 4]),
    Gcn([VarId; 2]),
}

#[derive(Debug, Clone, Copy)]
struct ParamIds {
    view_m: ViewIds,
    view_g: ViewIds,
    gene: Option<[VarId; 2]>,
    bridge: VarId,
}

fn register_view(tape: &Tape, v: &ViewEncoder) -> ViewIds {
    match v {
        ViewEncoder::Mlp(p) => ViewIds::Mlp([
            tape.param(p.w1.clone()),
            tape.param(p.b1.clone()),
            tape.param(p.w2.clone()),
            tape.param(p.b2.clone()),
        ]),
        ViewEncoder::Gcn(p) => ViewIds::Gcn([tape.param(p.w1.clone()), tape.param(p.w2.clone())]),
    }
}

/// Put every parameter on the tape; the flat list matches
/// [`TrainParams::matrices`] order.
fn register_params(tape: &Tape, params: &TrainParams) -> (Vec<VarId>, ParamIds) {
    let view_m = register_view(tape, &params.view_m);
    let view_g = register_view(tape, &params.view_g);
    let gene = params
        .gene
        .as_ref()
        .map(|g| [tape.param(g.w1.clone()), tape.param(g.w2.clone())]);
    let bridge = tape.param(params.bridge.clone());
    let mut flat = Vec::new();
    for v in [view_m, view_g] {
        match v {
            ViewIds::Mlp(ids) => flat.extend(ids),
            ViewIds::Gcn(ids) => flat.extend(ids),
        }
    }
    if let Some(ids) = gene {
        flat.extend(ids);
    }
    flat.push(bridge);
    (
        flat,
        ParamIds {
            view_m,
            view_g,
            gene,
            bridge,
        },
    )
}

fn view_forward_tape(tape: &Tape, ids: ViewIds, x: VarId, a_hat: VarId) -> Result<VarId> {
    match ids {
        ViewIds::Mlp([w1, b1, w2, b2]) => model::tape_mlp_forward(tape, x, w1, b1, w2, b2),
        ViewIds::Gcn([w1, w2]) => model::tape_gcn_forward(tape, x, a_hat, w1, w2),
    }
}

/// Data constants registered once per epoch tape.
struct TapeInputs {
    x: VarId,
    a_hat: VarId,
    xt: Option<VarId>,
    g_hat: Option<VarId>,
}

/// The loss nodes of one epoch; absent terms were not built at all.
struct TermIds {
    hea: Option<VarId>,
    ndc: Option<VarId>,
    cvc: Option<VarId>,
    total: VarId,
}

/// Build the weighted objective on the tape. Terms with zero weight are
/// skipped entirely, so their parameters receive no gradient.
fn build_objective(
    tape: &Tape,
    inp: &TapeInputs,
    ids: &ParamIds,
    setup: &EffectiveSetup,
    cell_graph: &CellGraph,
) -> Result<TermIds> {
    let e_m = view_forward_tape(tape, ids.view_m, inp.x, inp.a_hat)?;
    let e_g = view_forward_tape(tape, ids.view_g, inp.x, inp.a_hat)?;

    let hea = if setup.hea_weight != 0.0 {
        Some(losses::tape_loss_hea(tape, e_m, e_g)?)
    } else {
        None
    };
    let ndc = if setup.ndc_weight != 0.0 {
        let kappa = losses::tape_kappa_matrix(tape, e_m, e_g)?;
        Some(losses::tape_loss_ndc(tape, kappa, cell_graph)?)
    } else {
        None
    };
    let cvc = if setup.cvc_weight != 0.0 {
        let (z_m, z_g) = match ids.gene {
            Some([gw1, gw2]) => {
                let (xt, g_hat) = (inp.xt, inp.g_hat);
                let (xt, g_hat) = xt.zip(g_hat).ok_or_else(|| {
                    Error::Contract("refinement needs the transposed data and gene graph".into())
                })?;
                let u = model::tape_gcn_forward(tape, xt, g_hat, gw1, gw2)?;
                let (_, z_m) = model::tape_refine(tape, e_m, ids.bridge, u)?;
                let (_, z_g) = model::tape_refine(tape, e_g, ids.bridge, u)?;
                (z_m, z_g)
            }
            None => (tape.matmul(e_m, ids.bridge)?, tape.matmul(e_g, ids.bridge)?),
        };
        let s = losses::tape_cross_view_similarity(tape, z_m, z_g)?;
        Some(losses::tape_loss_cvc(tape, s, cell_graph)?)
    } else {
        None
    };

    // Accumulate in the same association order as the recorded breakdown:
    // (hea + alpha * ndc) + beta * cvc.
    let mut total: Option<VarId> = hea;
    for (term, weight) in [(ndc, setup.ndc_weight), (cvc, setup.cvc_weight)] {
        if let Some(t) = term {
            let scaled = tape.scale(t, weight);
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
    }
    let total = total.ok_or_else(|| {
        Error::InvalidParameter("objective has no active terms (all weights are zero)".into())
    })?;
    Ok(TermIds {
        hea,
        ndc,
        cvc,
        total,
    })
}

/// Assert on the built tape that the alignment and neighborhood terms do not
/// read the gene encoder or the bridge.
fn check_routing(tape: &Tape, terms: &TermIds, ids: &ParamIds) -> Result<()> {
    let mut shielded = vec![ids.bridge];
    if let Some(g) = ids.gene {
        shielded.extend(g);
    }
    for (name, term) in [("alignment", terms.hea), ("neighborhood", terms.ndc)] {
        if let Some(t) = term {
            for &leaf in &shielded {
                if tape.depends_on(t, leaf) {
                    return Err(Error::Contract(format!(
                        "gradient routing violated: the {name} term depends on a \
                         consistency-only parameter"
                    )));
                }
            }
        }
    }
    Ok(())
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    fn new(lr: f64, shapes: &[&Matrix]) -> Adam {
        let zeros: Vec<Matrix> = shapes
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Adam {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        self.t += 1;
        let mc = 1.0 - BETA1.powi(self.t);
        let vc = 1.0 - BETA2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut *params[i]);
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let gv = g.get(r, c);
                    let mv = BETA1 * m.get(r, c) + (1.0 - BETA1) * gv;
                    let vv = BETA2 * v.get(r, c) + (1.0 - BETA2) * gv * gv;
                    m.set(r, c, mv);
                    v.set(r, c, vv);
                    let step = self.lr * (mv / mc) / ((vv / vc).sqrt() + ADAM_EPS);
                    p.set(r, c, p.get(r, c) - step);
                }
            }
        }
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// One entry per epoch, evaluated before that epoch's update.
    pub trace: Vec<LossBreakdown>,
    pub params: TrainParams,
    pub wall_time: Duration,
    /// Refined embeddings of the final parameters.
    pub z_m: Matrix,
    pub z_g: Matrix,
    /// Gene embedding of the final parameters (absent under `no_refine`).
    pub u: Option<Matrix>,
}

/// Final-parameter embeddings: `(z_m, z_g, u)`. `g_hat` is required exactly
/// when the model refines (has a gene encoder).
pub fn forward_embeddings(
    params: &TrainParams,
    x: &Matrix,
    a_hat: &Matrix,
    g_hat: Option<&Matrix>,
) -> Result<(Matrix, Matrix, Option<Matrix>)> {
    let e_m = params.view_m.forward(x, a_hat)?;
    let e_g = params.view_g.forward(x, a_hat)?;
    match &params.gene {
        Some(gene) => {
            let g_hat = g_hat.ok_or_else(|| {
                Error::Contract("refinement model needs the normalized gene graph".into())
            })?;
            let u = model::gene_encode(&x.transpose(), g_hat, gene)?;
            let z_m = model::refine(&e_m, &params.bridge, &u)?.z;
            let z_g = model::refine(&e_g, &params.bridge, &u)?.z;
            Ok((z_m, z_g, Some(u)))
        }
        None => Ok((
            e_m.matmul(&params.bridge)?,
            e_g.matmul(&params.bridge)?,
            None,
        )),
    }
}

/// Value-level breakdown of the full objective at the given parameters.
/// All three terms are evaluated regardless of ablation flags.
pub fn evaluate(
    params: &TrainParams,
    x: &Matrix,
    a_hat: &Matrix,
    g_hat: Option<&Matrix>,
    cell_graph: &CellGraph,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    let e_m = params.view_m.forward(x, a_hat)?;
    let e_g = params.view_g.forward(x, a_hat)?;
    let hea = losses::loss_hea(&e_m, &e_g)?;
    let ndc = losses::loss_ndc(&losses::kappa_matrix(&e_m, &e_g)?, cell_graph)?;
    let (z_m, z_g, _) = forward_embeddings(params, x, a_hat, g_hat)?;
    let cvc = losses::loss_cvc(&losses::cross_view_similarity(&z_m, &z_g)?, cell_graph)?;
    losses::total_loss(hea, ndc, cvc, alpha, beta)
}

/// One tape build over the weighted objective at the given parameters.
fn build_epoch_tape(
    params: &TrainParams,
    x: &Matrix,
    a_hat: &Matrix,
    xt: Option<&Matrix>,
    g_hat: Option<&Matrix>,
    cell_graph: &CellGraph,
    setup: &EffectiveSetup,
) -> Result<(Tape, Vec<VarId>, ParamIds, TermIds)> {
    let tape = Tape::new();
    let (flat, ids) = register_params(&tape, params);
    let inp = TapeInputs {
        x: tape.constant(x.clone()),
        a_hat: tape.constant(a_hat.clone()),
        xt: xt.map(|v| tape.constant(v.clone())),
        g_hat: g_hat.map(|v| tape.constant(v.clone())),
    };
    let terms = build_objective(&tape, &inp, &ids, setup, cell_graph)?;
    Ok((tape, flat, ids, terms))
}

/// Weighted objective value and its gradient w.r.t. every parameter matrix,
/// in [`TrainParams::matrices`] order. This is the verification surface
/// behind the trainer: one tape, one backward pass, no update.
pub fn loss_gradients(
    params: &TrainParams,
    x: &Matrix,
    a_hat: &Matrix,
    g_hat: Option<&Matrix>,
    cell_graph: &CellGraph,
    setup: &EffectiveSetup,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let needs_gene = setup.cvc_weight != 0.0 && params.gene.is_some();
    let xt = needs_gene.then(|| x.transpose());
    let g_hat = if needs_gene {
        Some(g_hat.ok_or_else(|| {
            Error::Contract("refinement model needs the normalized gene graph".into())
        })?)
    } else {
        None
    };
    let (tape, flat, _, terms) =
        build_epoch_tape(params, x, a_hat, xt.as_ref(), g_hat, cell_graph, setup)?;
    let read = |t: Option<VarId>| {
        t.map(|id| tape.scalar(id))
            .transpose()
            .map(|v| v.unwrap_or(0.0))
    };
    let breakdown = losses::total_loss(
        read(terms.hea)?,
        read(terms.ndc)?,
        read(terms.cvc)?,
        setup.ndc_weight,
        setup.cvc_weight,
    )?;
    let grads = tape.backward(terms.total)?;
    let gmats = flat.iter().map(|&id| grads.wrt(id)).collect();
    Ok((breakdown, gmats))
}

/// Train on a full batch for `cfg.epochs` epochs. The expression matrix is
/// used as-is (preprocessing is the caller's job); graphs must match its
/// shape. Aborts with the epoch and term breakdown if the loss leaves the
/// finite range.
pub fn train(
    dataset: &Dataset,
    cell_graph: &CellGraph,
    gene_graph: &GeneGraph,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let setup = apply_ablation(cfg)?;
    let x = &dataset.expression.values;
    let (n, m) = (x.rows(), x.cols());
    if cell_graph.node_count() != n {
        return Err(Error::Contract(format!(
            "cell graph has {} nodes for {n} cells",
            cell_graph.node_count()
        )));
    }
    if gene_graph.node_count() != m {
        return Err(Error::Contract(format!(
            "gene graph has {} nodes for {m} genes",
            gene_graph.node_count()
        )));
    }
    let dims = ModelDims {
        n_cells: n,
        n_genes: m,
        hidden: cfg.hidden,
        latent: cfg.latent,
        gene_hidden: cfg.gene_hidden,
        n_clusters: cfg.n_clusters,
    };
    let start = Instant::now();
    let mut params = TrainParams::init(&dims, &setup, cfg.seed);
    let a_hat = normalize_adjacency(cell_graph);
    let (xt, g_hat) = if setup.refine {
        (Some(x.transpose()), Some(normalize_adjacency(gene_graph)))
    } else {
        (None, None)
    };

    let mut adam = Adam::new(cfg.lr, &params.matrices());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (tape, flat, ids, terms) = build_epoch_tape(
            &params,
            x,
            &a_hat,
            xt.as_ref(),
            g_hat.as_ref(),
            cell_graph,
            &setup,
        )?;
        if epoch == 0 {
            check_routing(&tape, &terms, &ids)?;
        }
        let read = |t: Option<VarId>| {
            t.map(|id| tape.scalar(id))
                .transpose()
                .map(|v| v.unwrap_or(0.0))
        };
        let breakdown = losses::total_loss(
            read(terms.hea)?,
            read(terms.ndc)?,
            read(terms.cvc)?,
            cfg.alpha,
            cfg.beta,
        )?;
        if !(breakdown.hea.is_finite() && breakdown.ndc.is_finite() && breakdown.cvc.is_finite()) {
            return Err(Error::NonFinite(format!(
                "training aborted at epoch {}: hea = {}, ndc = {}, cvc = {}, total = {}",
                epoch + 1,
                breakdown.hea,
                breakdown.ndc,
                breakdown.cvc,
                breakdown.total
            )));
        }
        let grads = tape.backward(terms.total)?;
        let gmats: Vec<Matrix> = flat.iter().map(|&id| grads.wrt(id)).collect();
        adam.step(&mut params.matrices_mut(), &gmats);
        trace.push(breakdown);
    }
    if !params.all_finite() {
        return Err(Error::NonFinite(
            "parameters are non-finite after training".into(),
        ));
    }
    let (z_m, z_g, u) = forward_embeddings(&params, x, &a_hat, g_hat.as_ref())?;
    Ok(TrainReport {
        trace,
        params,
        wall_time: start.elapsed(),
        z_m,
        z_g,
        u,
    })
}

/// Write the per-epoch loss trace as CSV (`epoch` is 1-based).
pub fn write_loss_trace(path: &Path, trace: &[LossBreakdown]) -> Result<()> {
    let mut out = String::from("epoch,hea,ndc,cvc,total\n");
    for (i, b) in trace.iter().enumerate() {
        writeln!(out, "{},{},{},{},{}", i + 1, b.hea, b.ndc, b.cvc, b.total).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
