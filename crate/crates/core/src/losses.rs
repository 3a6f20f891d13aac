//! The objective: distribution-alignment, neighborhood-contrastive, and
//! cross-view-consistency terms, plus their weighted total.
//!
//! Every term exists twice: as a plain value-level function (evaluation,
//! oracles) and as a tape builder (training). Both share the same epsilon
//! conventions — 1e-12 inside every log and as the cosine norm floor — so the
//! two paths agree to rounding.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graphs::CellGraph;
use crate::linalg::{Matrix, Tape, VarId};

/// Numerical guard used inside logs, under cosine norms, and in the
/// neighborhood-contrast denominator.
pub const EPS: f64 = 1e-12;

/// One evaluation of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub hea: f64,
    pub ndc: f64,
    pub cvc: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn check_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            op,
            lhs_rows: a.rows(),
            lhs_cols: a.cols(),
            rhs_rows: b.rows(),
            rhs_cols: b.cols(),
        });
    }
    Ok(())
}

/// `KL(p || q)` with the epsilon guard inside both logs. Callers guarantee
/// `p` and `q` are distributions.
fn kl_eps(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(&a, &b)| a * ((a + EPS).ln() - (b + EPS).ln()))
        .sum()
}

/// Symmetric KL divergence between two probability vectors.
pub fn skl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "skl needs equal nonempty lengths, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|&x| x < 0.0) {
            return Err(Error::Contract(format!("skl: {name} has a negative entry")));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("skl: {name} sums to {sum}, not 1")));
        }
    }
    Ok(kl_eps(p, q) + kl_eps(q, p))
}

/// Per-cell distribution over latent dimensions (row softmax).
pub fn p_cell(e: &Matrix) -> Matrix {
    e.softmax_rows()
}

/// Per-dimension distribution over the cell population (column softmax).
pub fn p_global(e: &Matrix) -> Matrix {
    e.softmax_cols()
}

/// Sum over matching rows of `skl` between two row-stochastic matrices.
fn skl_rows_sum(p: &Matrix, q: &Matrix) -> f64 {
    (0..p.rows())
        .map(|i| kl_eps(p.row(i), q.row(i)) + kl_eps(q.row(i), p.row(i)))
        .sum()
}

/// Distribution-alignment loss: per-cell row distributions plus per-dimension
/// population distributions, both compared with symmetric KL.
pub fn loss_hea(e_m: &Matrix, e_g: &Matrix) -> Result<f64> {
    check_same_shape("loss_hea", e_m, e_g)?;
    let cell = skl_rows_sum(&p_cell(e_m), &p_cell(e_g));
    // column distributions: compare columns by working on transposes
    let global = skl_rows_sum(&p_global(e_m).transpose(), &p_global(e_g).transpose());
    Ok(cell + global)
}

fn ln_eps(x: &Matrix) -> Matrix {
    x.map(|v| (v + EPS).ln())
}

/// Pairwise cross-view divergences: `kappa[i][j] = skl(p_m_i, p_g_j)` where
/// `p_m`, `p_g` are the per-cell row distributions of the two views.
///
/// Assembled as `h_p 1^T + 1 h_q^T - P ln(Q)^T - ln(P) Q^T` where `h` are
/// row-wise self-information sums, avoiding the N^2 vector loop.
pub fn kappa_matrix(e_m: &Matrix, e_g: &Matrix) -> Result<Matrix> {
    check_same_shape("kappa_matrix", e_m, e_g)?;
    let p = p_cell(e_m);
    let q = p_cell(e_g);
    let lp = ln_eps(&p);
    let lq = ln_eps(&q);
    let h_p = p.zip_map(&lp, |a, b| a * b)?.sum_rows();
    let h_q = q.zip_map(&lq, |a, b| a * b)?.sum_rows();
    let mut kappa = p.matmul_nt(&lq)?.add(&lp.matmul_nt(&q)?)?.scale(-1.0);
    for i in 0..kappa.rows() {
        let hi = h_p.get(i, 0);
        for (j, v) in kappa.row_mut(i).iter_mut().enumerate() {
            *v += hi + h_q.get(j, 0);
        }
    }
    Ok(kappa)
}

fn check_kappa_graph(op: &'static str, kappa: &Matrix, graph: &CellGraph) -> Result<()> {
    let n = graph.node_count();
    if kappa.rows() != n || kappa.cols() != n {
        return Err(Error::DimensionMismatch {
            op,
            lhs_rows: kappa.rows(),
            lhs_cols: kappa.cols(),
            rhs_rows: n,
            rhs_cols: n,
        });
    }
    Ok(())
}

/// Neighborhood-contrast loss: mean over cells of the ratio between the
/// average divergence to self-plus-neighbors and the average divergence to
/// all other cells (epsilon-guarded).
pub fn loss_ndc(kappa: &Matrix, graph: &CellGraph) -> Result<f64> {
    check_kappa_graph("loss_ndc", kappa, graph)?;
    let n = graph.node_count();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "loss_ndc needs at least 2 cells".into(),
        ));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let row = kappa.row(i);
        let mut num = row[i];
        for &k in graph.neighbors(i) {
            num += row[k];
        }
        num /= (graph.degree(i) + 1) as f64;
        let den = (row.iter().sum::<f64>() - row[i]) / (n - 1) as f64;
        acc += num / (den + EPS);
    }
    Ok(acc / n as f64)
}

/// Pairwise cross-view cosine similarities with a 1e-12 norm floor.
pub fn cross_view_similarity(z_m: &Matrix, z_g: &Matrix) -> Result<Matrix> {
    check_same_shape("cross_view_similarity", z_m, z_g)?;
    let norm = |z: &Matrix| -> Vec<f64> {
        (0..z.rows())
            .map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS))
            .collect()
    };
    let nm = norm(z_m);
    let ng = norm(z_g);
    let mut s = z_m.matmul_nt(z_g)?;
    for i in 0..s.rows() {
        for (j, v) in s.row_mut(i).iter_mut().enumerate() {
            *v /= nm[i] * ng[j];
        }
    }
    Ok(s)
}

/// Cross-view-consistency loss: `(1/N) * ||S - (A + I)||_F^2`.
pub fn loss_cvc(s: &Matrix, graph: &CellGraph) -> Result<f64> {
    check_kappa_graph("loss_cvc", s, graph)?;
    let n = graph.node_count();
    let mut acc = 0.0;
    for i in 0..n {
        for (j, &v) in s.row(i).iter().enumerate() {
            let target = if i == j || graph.has_edge(i, j) {
                1.0
            } else {
                0.0
            };
            acc += (v - target) * (v - target);
        }
    }
    Ok(acc / n as f64)
}

/// Weighted total with the breakdown recorded.
pub fn total_loss(hea: f64, ndc: f64, cvc: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "loss weights must be nonnegative, got alpha = {alpha}, beta = {beta}"
        )));
    }
    Ok(LossBreakdown {
        hea,
        ndc,
        cvc,
        total: hea + alpha * ndc + beta * cvc,
        alpha,
        beta,
    })
}

// ---- tape builders (training path) ----

/// `sum of skl` between matching rows of two row-stochastic nodes.
fn tape_skl_sum(tape: &Tape, p: VarId, q: VarId) -> Result<VarId> {
    let lp = tape.ln(tape.add_scalar(p, EPS));
    let lq = tape.ln(tape.add_scalar(q, EPS));
    let fwd = tape.mul(p, tape.sub(lp, lq)?)?;
    let rev = tape.mul(q, tape.sub(lq, lp)?)?;
    Ok(tape.sum_all(tape.add(fwd, rev)?))
}

/// Tape version of [`loss_hea`].
pub fn tape_loss_hea(tape: &Tape, e_m: VarId, e_g: VarId) -> Result<VarId> {
    let cell = tape_skl_sum(tape, tape.softmax_rows(e_m), tape.softmax_rows(e_g))?;
    let global = tape_skl_sum(tape, tape.softmax_cols(e_m), tape.softmax_cols(e_g))?;
    tape.add(cell, global)
}

/// Tape version of [`kappa_matrix`].
pub fn tape_kappa_matrix(tape: &Tape, e_m: VarId, e_g: VarId) -> Result<VarId> {
    let p = tape.softmax_rows(e_m);
    let q = tape.softmax_rows(e_g);
    let lp = tape.ln(tape.add_scalar(p, EPS));
    let lq = tape.ln(tape.add_scalar(q, EPS));
    let h_p = tape.sum_rows(tape.mul(p, lp)?);
    let h_q = tape.sum_rows(tape.mul(q, lq)?);
    let cross = tape.add(
        tape.matmul(p, tape.transpose(lq))?,
        tape.matmul(lp, tape.transpose(q))?,
    )?;
    let base = tape.scale(cross, -1.0);
    tape.add_row(tape.add_col(base, h_p)?, tape.transpose(h_q))
}

/// Tape version of [`loss_ndc`]: neighborhoods enter as constant masks.
pub fn tape_loss_ndc(tape: &Tape, kappa: VarId, graph: &CellGraph) -> Result<VarId> {
    let n = graph.node_count();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "loss_ndc needs at least 2 cells".into(),
        ));
    }
    let mut w_num = Matrix::zeros(n, n);
    let mut w_den = Matrix::filled(n, n, 1.0 / (n - 1) as f64);
    for i in 0..n {
        let inv = 1.0 / (graph.degree(i) + 1) as f64;
        w_num.set(i, i, inv);
        for &k in graph.neighbors(i) {
            w_num.set(i, k, inv);
        }
        w_den.set(i, i, 0.0);
    }
    let num = tape.sum_rows(tape.mul(kappa, tape.constant(w_num))?);
    let den = tape.sum_rows(tape.mul(kappa, tape.constant(w_den))?);
    let ratio = tape.div(num, tape.add_scalar(den, EPS))?;
    Ok(tape.scale(tape.sum_all(ratio), 1.0 / n as f64))
}

/// Tape version of [`cross_view_similarity`].
pub fn tape_cross_view_similarity(tape: &Tape, z_m: VarId, z_g: VarId) -> Result<VarId> {
    let normalize = |z: VarId| -> Result<VarId> {
        let norms = tape.clamp_min(tape.sqrt(tape.sum_rows(tape.mul(z, z)?)), EPS);
        tape.scale_rows(z, tape.recip(norms))
    };
    tape.matmul(normalize(z_m)?, tape.transpose(normalize(z_g)?))
}

/// Tape version of [`loss_cvc`].
pub fn tape_loss_cvc(tape: &Tape, s: VarId, graph: &CellGraph) -> Result<VarId> {
    let n = graph.node_count();
    let mut target = graph.adjacency();
    for i in 0..n {
        target.set(i, i, 1.0);
    }
    let d = tape.sub(s, tape.constant(target))?;
    Ok(tape.scale(tape.sum_all(tape.mul(d, d)?), 1.0 / n as f64))
}
