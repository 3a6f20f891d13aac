//! Encoders and the cell-gene refinement transform.
//!
//! Three independent encoders produce the two cell views and the gene
//! embedding: an MLP over expression rows, a two-layer GCN over the cell
//! graph, and a two-layer GCN over the gene graph (fed the transposed
//! expression matrix). Refinement bridges them: `Z = E * W * U`, with the
//! intermediate `E * W` exposed as the cell-gene association matrix.
//!
//! Forward passes exist at value level (evaluation) and as tape builders
//! (training); both use the same composition so they agree exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tape, VarId};

/// Problem sizes that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_cells: usize,
    pub n_genes: usize,
    /// Cell-encoder hidden width.
    pub hidden: usize,
    /// Cell-embedding dimension (columns of E).
    pub latent: usize,
    /// Gene-encoder hidden width.
    pub gene_hidden: usize,
    /// Cluster count (columns of U and Z).
    pub n_clusters: usize,
}

/// MLP encoder: two affine layers with a ReLU between.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Bias-free two-layer GCN (used for both the cell and gene graphs).
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub w1: Matrix,
    pub w2: Matrix,
}

/// All encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub mlp: MlpParams,
    pub gcn: GcnParams,
    pub gene: GcnParams,
}

/// The learnable bridge `W` of the refinement transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementParams {
    pub w: Matrix,
}

/// Every learnable matrix in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub refinement: RefinementParams,
}

/// The two cell views.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub e_m: Matrix,
    pub e_g: Matrix,
}

/// Refined per-view embeddings and the gene embedding they share.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedEmbeddings {
    pub z_m: Matrix,
    pub z_g: Matrix,
    pub u: Matrix,
}

/// Output of [`refine`]: the association matrix is the read-only
/// intermediate `E * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub association: Matrix,
    pub z: Matrix,
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl ModelParams {
    /// Glorot-uniform weights (zero biases); the refinement bridge starts at
    /// scale 1e-2 to keep early `Z` small. Deterministic given the seed.
    pub fn init(dims: &ModelDims, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, h, d) = (dims.n_genes, dims.hidden, dims.latent);
        let (n, hg, c) = (dims.n_cells, dims.gene_hidden, dims.n_clusters);
        ModelParams {
            encoder: EncoderParams {
                mlp: MlpParams {
                    w1: glorot(&mut rng, m, h),
                    b1: Matrix::zeros(1, h),
                    w2: glorot(&mut rng, h, d),
                    b2: Matrix::zeros(1, d),
                },
                gcn: GcnParams {
                    w1: glorot(&mut rng, m, h),
                    w2: glorot(&mut rng, h, d),
                },
                gene: GcnParams {
                    w1: glorot(&mut rng, n, hg),
                    w2: glorot(&mut rng, hg, c),
                },
            },
            refinement: RefinementParams {
                w: {
                    let data = (0..d * m).map(|_| rng.gen_range(-1e-2..1e-2)).collect();
                    Matrix::from_vec(d, m, data).expect("shape")
                },
            },
        }
    }

    /// All learnable matrices in the fixed checkpoint/update order.
    pub fn matrices(&self) -> [&Matrix; 9] {
        [
            &self.encoder.mlp.w1,
            &self.encoder.mlp.b1,
            &self.encoder.mlp.w2,
            &self.encoder.mlp.b2,
            &self.encoder.gcn.w1,
            &self.encoder.gcn.w2,
            &self.encoder.gene.w1,
            &self.encoder.gene.w2,
            &self.refinement.w,
        ]
    }

    /// Mutable view in the same order as [`ModelParams::matrices`].
    pub fn matrices_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.encoder.mlp.w1,
            &mut self.encoder.mlp.b1,
            &mut self.encoder.mlp.w2,
            &mut self.encoder.mlp.b2,
            &mut self.encoder.gcn.w1,
            &mut self.encoder.gcn.w2,
            &mut self.encoder.gene.w1,
            &mut self.encoder.gene.w2,
            &mut self.refinement.w,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.all_finite())
    }
}

/// `ReLU(x W1 + b1) W2 + b2`.
pub fn mlp_forward(x: &Matrix, p: &MlpParams) -> Result<Matrix> {
    let mut h = x.matmul(&p.w1)?;
    for i in 0..h.rows() {
        for (v, &b) in h.row_mut(i).iter_mut().zip(p.b1.row(0)) {
            *v = (*v + b).max(0.0);
        }
    }
    let mut out = h.matmul(&p.w2)?;
    for i in 0..out.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(p.b2.row(0)) {
            *v += b;
        }
    }
    Ok(out)
}

/// `A_hat ReLU(A_hat x W1) W2` with `A_hat` from `normalize_adjacency`.
pub fn gcn_forward(x: &Matrix, a_hat: &Matrix, p: &GcnParams) -> Result<Matrix> {
    let h = a_hat.matmul(&x.matmul(&p.w1)?)?.map(|v| v.max(0.0));
    a_hat.matmul(&h.matmul(&p.w2)?)
}

/// Gene encoder: the same propagation over the gene graph, fed `X^T`.
pub fn gene_encode(xt: &Matrix, g_hat: &Matrix, p: &GcnParams) -> Result<Matrix> {
    gcn_forward(xt, g_hat, p)
}

/// `Z = (E W) U`; the intermediate is the cell-gene association matrix.
pub fn refine(e: &Matrix, w: &Matrix, u: &Matrix) -> Result<Refined> {
    let association = e.matmul(w)?;
    let z = association.matmul(u)?;
    Ok(Refined { association, z })
}

/// Tape version of [`mlp_forward`].
pub fn tape_mlp_forward(
    tape: &Tape,
    x: VarId,
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
) -> Result<VarId> {
    let h = tape.relu(tape.add_row(tape.matmul(x, w1)?, b1)?);
    tape.add_row(tape.matmul(h, w2)?, b2)
}

/// Tape version of [`gcn_forward`]; also serves [`gene_encode`] when fed
/// the transposed expression matrix and the gene graph.
pub fn tape_gcn_forward(
    tape: &Tape,
    x: VarId,
    a_hat: VarId,
    w1: VarId,
    w2: VarId,
) -> Result<VarId> {
    let h = tape.relu(tape.matmul(a_hat, tape.matmul(x, w1)?)?);
    tape.matmul(a_hat, tape.matmul(h, w2)?)
}

/// Tape version of [`refine`]; returns `(association, z)`.
pub fn tape_refine(tape: &Tape, e: VarId, w: VarId, u: VarId) -> Result<(VarId, VarId)> {
    let association = tape.matmul(e, w)?;
    let z = tape.matmul(association, u)?;
    Ok((association, z))
}

// ---- checkpoint I/O ----

const MAGIC: &[u8; 6] = b"SCRCL1";

/// Serialize the config echo plus every parameter matrix (little-endian).
/// The matrix order is the caller's layout contract; the config echo is
/// expected to carry whatever is needed to reconstruct it.
pub fn save_checkpoint(path: &Path, config_json: &str, matrices: &[&Matrix]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&(matrices.len() as u64).to_le_bytes());
    for m in matrices {
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for i in 0..m.rows() {
            for &v in m.row(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                path: self.path.display().to_string(),
                line: 0,
                msg: format!(
                    "truncated checkpoint (needed {n} bytes at offset {})",
                    self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Inverse of [`save_checkpoint`]: `(config_json, matrices)`, bitwise-exact.
pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<Matrix>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let bad = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg,
    };

    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("bad magic bytes; not a checkpoint".into()));
    }
    let json_len = r.u64()? as usize;
    let config_json = std::str::from_utf8(r.take(json_len)?)
        .map_err(|e| bad(format!("config echo is not UTF-8: {e}")))?
        .to_owned();

    let count = r.u64()? as usize;
    let mut mats = Vec::new();
    for _ in 0..count {
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        // Sized read up front so a corrupt header cannot ask for a huge buffer.
        let bytes = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| bad(format!("implausible matrix shape {rows}x{cols}")))?;
        let data = r
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        mats.push(Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((config_json, mats))
}
