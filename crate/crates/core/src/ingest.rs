//! Dataset loading, validation, preprocessing, and synthetic fixtures.
//!
//! Two on-disk encodings are supported: a dense CSV (header `id,<gene>,...`,
//! one row per cell) and sparse Matrix Market coordinate files with
//! `barcodes.tsv` / `genes.tsv` sidecars (rows are cells). Both encodings of
//! the same data load to identical matrices; values are written with
//! shortest-round-trip formatting so `load(write(x)) == x` exactly.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Validated nonnegative expression matrix with row/column identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub values: Matrix,
    pub cell_ids: Vec<String>,
    pub gene_ids: Vec<String>,
}

impl ExpressionMatrix {
    /// Validates shapes, id uniqueness, and nonnegativity. Loaded data must
    /// also have at least two genes; HVG selection may narrow below that.
    pub fn new(values: Matrix, cell_ids: Vec<String>, gene_ids: Vec<String>) -> Result<Self> {
        if values.rows() != cell_ids.len() || values.cols() != gene_ids.len() {
            return Err(Error::Validation(format!(
                "expression shape {}x{} does not match {} cell ids / {} gene ids",
                values.rows(),
                values.cols(),
                cell_ids.len(),
                gene_ids.len()
            )));
        }
        if values.rows() < 2 {
            return Err(Error::Validation("need at least 2 cells".into()));
        }
        if values.cols() < 1 {
            return Err(Error::Validation("need at least 1 gene".into()));
        }
        let mut seen = HashMap::new();
        for (j, g) in gene_ids.iter().enumerate() {
            if let Some(prev) = seen.insert(g.as_str(), j) {
                return Err(Error::Validation(format!(
                    "duplicate gene id {g:?} at columns {prev} and {j}"
                )));
            }
        }
        for i in 0..values.rows() {
            for (j, &v) in values.row(i).iter().enumerate() {
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "negative expression value {v} at cell {:?}, gene {:?}",
                        cell_ids[i], gene_ids[j]
                    )));
                }
            }
        }
        Ok(ExpressionMatrix {
            values,
            cell_ids,
            gene_ids,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.values.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.cols()
    }
}

/// A dataset as consumed by the pipeline: expression plus optional
/// ground-truth labels and spatial coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub expression: ExpressionMatrix,
    pub labels: Option<Vec<usize>>,
    pub coords: Option<Matrix>,
    pub n_types: Option<usize>,
}

/// On-disk expression encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Mtx,
}

impl Format {
    /// Infer from the file extension.
    pub fn from_path(path: &Path) -> Result<Format> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Format::Csv),
            Some("mtx") => Ok(Format::Mtx),
            other => Err(Error::InvalidParameter(format!(
                "cannot infer format from extension {other:?}; pass csv or mtx explicitly"
            ))),
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Format> {
        match s {
            "csv" => Ok(Format::Csv),
            "mtx" => Ok(Format::Mtx),
            other => Err(Error::InvalidParameter(format!(
                "unknown format {other:?} (expected csv or mtx)"
            ))),
        }
    }
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path_str(path), io),
        kind => Error::Parse {
            path: path_str(path),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

pub fn load_expression(path: &Path, format: Format) -> Result<ExpressionMatrix> {
    let x = match format {
        Format::Csv => load_expression_csv(path),
        Format::Mtx => load_expression_mtx(path),
    }?;
    if x.n_genes() < 2 {
        return Err(Error::Validation(format!(
            "{}: need at least 2 genes",
            path.display()
        )));
    }
    Ok(x)
}

fn load_expression_csv(path: &Path) -> Result<ExpressionMatrix> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?;
    if headers.get(0) != Some("id") {
        return Err(Error::Parse {
            path: path_str(path),
            line: 1,
            msg: format!(
                "first header field must be \"id\", got {:?}",
                headers.get(0)
            ),
        });
    }
    let gene_ids: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();

    let mut cell_ids = Vec::new();
    let mut data = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        cell_ids.push(record.get(0).unwrap_or_default().to_owned());
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path_str(path),
                line,
                msg: format!("invalid number {field:?}"),
            })?;
            data.push(v);
        }
    }
    let values = Matrix::from_vec(cell_ids.len(), gene_ids.len(), data)?;
    ExpressionMatrix::new(values, cell_ids, gene_ids)
}

/// Write the dense CSV encoding.
pub fn write_expression_csv(x: &ExpressionMatrix, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["id".to_owned()];
    header.extend(x.gene_ids.iter().cloned());
    wtr.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..x.n_cells() {
        let mut record = vec![x.cell_ids[i].clone()];
        record.extend(x.values.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

fn read_id_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    Ok(text.lines().map(|l| l.trim_end().to_owned()).collect())
}

fn load_expression_mtx(path: &Path) -> Result<ExpressionMatrix> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path_str(path),
        line,
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (line, banner) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    if !banner.starts_with("%%MatrixMarket matrix coordinate") {
        return Err(parse_err(
            line,
            format!("expected MatrixMarket coordinate banner, got {banner:?}"),
        ));
    }

    // skip comments, then the size line: rows(cells) cols(genes) nnz
    let (line, size) = lines
        .by_ref()
        .find(|(_, l)| !l.starts_with('%') && !l.trim().is_empty())
        .ok_or_else(|| parse_err(0, "missing size line".into()))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| parse_err(line, format!("invalid size line {size:?}")))
        })
        .collect::<Result<_>>()?;
    let [n, m, nnz] = dims[..] else {
        return Err(parse_err(line, format!("invalid size line {size:?}")));
    };

    let mut values = Matrix::zeros(n, m);
    let mut seen = vec![false; n * m];
    let mut count = 0usize;
    for (line, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split_whitespace().collect();
        let [i, j, v] = fields[..] else {
            return Err(parse_err(
                line,
                format!("expected \"i j value\", got {l:?}"),
            ));
        };
        let i: usize = i
            .parse()
            .map_err(|_| parse_err(line, format!("invalid row index {i:?}")))?;
        let j: usize = j
            .parse()
            .map_err(|_| parse_err(line, format!("invalid column index {j:?}")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| parse_err(line, format!("invalid value {v:?}")))?;
        if i < 1 || i > n || j < 1 || j > m {
            return Err(parse_err(line, format!("entry ({i}, {j}) outside {n}x{m}")));
        }
        if std::mem::replace(&mut seen[(i - 1) * m + (j - 1)], true) {
            return Err(parse_err(line, format!("duplicate entry ({i}, {j})")));
        }
        values.set(i - 1, j - 1, v);
        count += 1;
    }
    if count != nnz {
        return Err(parse_err(
            0,
            format!("size line declared {nnz} entries, found {count}"),
        ));
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let cell_ids = read_id_lines(&dir.join("barcodes.tsv"))?;
    let gene_ids = read_id_lines(&dir.join("genes.tsv"))?;
    if cell_ids.len() != n || gene_ids.len() != m {
        return Err(Error::Validation(format!(
            "{}: sidecars list {} barcodes and {} genes for a {n}x{m} matrix",
            path.display(),
            cell_ids.len(),
            gene_ids.len()
        )));
    }
    ExpressionMatrix::new(values, cell_ids, gene_ids)
}

/// Write the sparse encoding: the coordinate file at `path` plus
/// `barcodes.tsv` / `genes.tsv` sidecars in the same directory.
pub fn write_expression_mtx(x: &ExpressionMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("%%MatrixMarket matrix coordinate real general\n");
    let mut entries = Vec::new();
    for i in 0..x.n_cells() {
        for (j, &v) in x.values.row(i).iter().enumerate() {
            if v != 0.0 {
                entries.push((i + 1, j + 1, v));
            }
        }
    }
    out.push_str(&format!(
        "{} {} {}\n",
        x.n_cells(),
        x.n_genes(),
        entries.len()
    ));
    for (i, j, v) in entries {
        out.push_str(&format!("{i} {j} {v}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path_str(path), e))?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    for (name, ids) in [("barcodes.tsv", &x.cell_ids), ("genes.tsv", &x.gene_ids)] {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).map_err(|e| Error::io(path_str(&p), e))?;
        for id in ids {
            writeln!(f, "{id}").map_err(|e| Error::io(path_str(&p), e))?;
        }
    }
    Ok(())
}

/// Map rows of a two-column-plus-id CSV back to cell order. Every cell id
/// must appear exactly once; rows may be in any order.
fn index_by_id<'a>(
    path: &Path,
    cell_ids: &'a [String],
) -> (HashMap<&'a str, usize>, impl Fn(String) -> Error + use<'a>) {
    let map: HashMap<&str, usize> = cell_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let path = path_str(path);
    (map, move |msg| Error::Validation(format!("{path}: {msg}")))
}

/// Load `id,x,y` coordinates aligned to `cell_ids`.
pub fn load_coords(path: &Path, cell_ids: &[String]) -> Result<Matrix> {
    let (index, err) = index_by_id(path, cell_ids);
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "x", "y"] {
        return Err(Error::Parse {
            path: path_str(path),
            line: 1,
            msg: "expected header id,x,y".into(),
        });
    }
    let mut coords = Matrix::zeros(cell_ids.len(), 2);
    let mut filled = vec![false; cell_ids.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let id = record.get(0).unwrap_or_default();
        let &i = index
            .get(id)
            .ok_or_else(|| err(format!("unknown cell id {id:?}")))?;
        if std::mem::replace(&mut filled[i], true) {
            return Err(err(format!("duplicate cell id {id:?}")));
        }
        for (k, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path_str(path),
                line,
                msg: format!("invalid number {field:?}"),
            })?;
            coords.set(i, k, v);
        }
    }
    if let Some(i) = filled.iter().position(|&f| !f) {
        return Err(err(format!(
            "missing coordinates for cell {:?}",
            cell_ids[i]
        )));
    }
    Ok(coords)
}

pub fn write_coords_csv(path: &Path, cell_ids: &[String], coords: &Matrix) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["id", "x", "y"])
        .map_err(|e| csv_error(path, e))?;
    for (i, id) in cell_ids.iter().enumerate() {
        wtr.write_record([
            id.as_str(),
            &coords.get(i, 0).to_string(),
            &coords.get(i, 1).to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

/// Load `id,label` ground truth aligned to `cell_ids`. Label strings are
/// mapped to dense integers in first-appearance (file) order; returns the
/// per-cell assignment and the number of distinct labels.
pub fn load_labels(path: &Path, cell_ids: &[String]) -> Result<(Vec<usize>, usize)> {
    let (index, err) = index_by_id(path, cell_ids);
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "label"] {
        return Err(Error::Parse {
            path: path_str(path),
            line: 1,
            msg: "expected header id,label".into(),
        });
    }
    let mut dense: HashMap<String, usize> = HashMap::new();
    let mut labels = vec![usize::MAX; cell_ids.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let id = record.get(0).unwrap_or_default();
        let &i = index
            .get(id)
            .ok_or_else(|| err(format!("unknown cell id {id:?}")))?;
        if labels[i] != usize::MAX {
            return Err(err(format!("duplicate cell id {id:?}")));
        }
        let label = record.get(1).unwrap_or_default().to_owned();
        let next = dense.len();
        labels[i] = *dense.entry(label).or_insert(next);
    }
    if let Some(i) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(err(format!("missing label for cell {:?}", cell_ids[i])));
    }
    Ok((labels, dense.len()))
}

pub fn write_labels_csv(path: &Path, cell_ids: &[String], labels: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["id", "label"])
        .map_err(|e| csv_error(path, e))?;
    for (id, label) in cell_ids.iter().zip(labels.iter()) {
        wtr.write_record([id.as_str(), label.as_str()])
            .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

/// Preprocessing knobs. `n_hvg: None` keeps all genes; counts are clamped to
/// the number of genes present.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_sum: f64,
    pub log1p: bool,
    pub n_hvg: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_sum: 1e4,
            log1p: true,
            n_hvg: Some(2000),
        }
    }
}

/// Library-size normalization to `target_sum`, optional `log(1 + x)`, then
/// highest-variance gene selection. Cell order is preserved; selected genes
/// keep their original relative order.
pub fn preprocess(x: &ExpressionMatrix, cfg: &PreprocessConfig) -> Result<ExpressionMatrix> {
    if cfg.target_sum <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "target_sum must be positive, got {}",
            cfg.target_sum
        )));
    }
    let (n, m) = (x.n_cells(), x.n_genes());
    let mut values = x.values.clone();
    for i in 0..n {
        let total: f64 = values.row(i).iter().sum();
        if total == 0.0 {
            return Err(Error::Validation(format!(
                "cell {:?} has zero total expression",
                x.cell_ids[i]
            )));
        }
        let f = cfg.target_sum / total;
        for v in values.row_mut(i) {
            *v *= f;
        }
    }
    if cfg.log1p {
        values = values.map(f64::ln_1p);
    }

    let keep: Vec<usize> = match cfg.n_hvg {
        Some(k) if k < m => {
            let mut var: Vec<(f64, usize)> = (0..m)
                .map(|j| {
                    let col = values.col(j);
                    let mean = col.iter().sum::<f64>() / n as f64;
                    let v = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    (v, j)
                })
                .collect();
            var.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut keep: Vec<usize> = var[..k.max(1)].iter().map(|&(_, j)| j).collect();
            keep.sort_unstable();
            keep
        }
        _ => (0..m).collect(),
    };

    let mut out = Matrix::zeros(n, keep.len());
    for i in 0..n {
        for (jj, &j) in keep.iter().enumerate() {
            out.set(i, jj, values.get(i, j));
        }
    }
    let gene_ids = keep.iter().map(|&j| x.gene_ids[j].clone()).collect();
    ExpressionMatrix::new(out, x.cell_ids.clone(), gene_ids)
}

/// Spatial layout for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialLayout {
    None,
    LayeredBands,
}

impl std::str::FromStr for SpatialLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<SpatialLayout> {
        match s {
            "none" => Ok(SpatialLayout::None),
            "layered-bands" => Ok(SpatialLayout::LayeredBands),
            other => Err(Error::InvalidParameter(format!(
                "unknown layout {other:?} (expected none or layered-bands)"
            ))),
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_types: usize,
    pub markers_per_type: usize,
    /// Mean shift applied to a type's marker genes.
    pub marker_lift: f64,
    pub noise_sd: f64,
    pub dropout_rate: f64,
    pub spatial_layout: SpatialLayout,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_cells < 2 || self.n_genes < 2 {
            return Err(Error::Validation(
                "need n_cells >= 2 and n_genes >= 2".into(),
            ));
        }
        if self.n_types == 0 || self.n_types > self.n_cells {
            return Err(Error::Validation(format!(
                "n_types = {} must be in [1, n_cells = {}]",
                self.n_types, self.n_cells
            )));
        }
        if self.markers_per_type == 0 || self.markers_per_type * self.n_types > self.n_genes {
            return Err(Error::Validation(format!(
                "markers_per_type = {} x n_types = {} must fit in n_genes = {}",
                self.markers_per_type, self.n_types, self.n_genes
            )));
        }
        if self.marker_lift <= 0.0 {
            return Err(Error::Validation("marker_lift must be positive".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::Validation("noise_sd must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Generate a labeled dataset: type `t` cells express marker block
/// `[t * markers_per_type, (t+1) * markers_per_type)` at mean `marker_lift`
/// over a zero background, with Gaussian noise clamped at zero and Bernoulli
/// dropout. Deterministic given the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, m, t) = (spec.n_cells, spec.n_genes, spec.n_types);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // round-robin assignment keeps types balanced within one cell
    let labels: Vec<usize> = (0..n).map(|i| i % t).collect();

    let mut values = Matrix::zeros(n, m);
    for i in 0..n {
        let block = labels[i] * spec.markers_per_type..(labels[i] + 1) * spec.markers_per_type;
        for j in 0..m {
            let mean = if block.contains(&j) {
                spec.marker_lift
            } else {
                0.0
            };
            let z: f64 = rng.sample(StandardNormal);
            let mut v = (mean + spec.noise_sd * z).max(0.0);
            if rng.gen::<f64>() < spec.dropout_rate {
                v = 0.0;
            }
            values.set(i, j, v);
        }
    }

    let coords = match spec.spatial_layout {
        SpatialLayout::None => None,
        SpatialLayout::LayeredBands => {
            // type t occupies the horizontal band y in (t, t+1)
            let mut c = Matrix::zeros(n, 2);
            for i in 0..n {
                c.set(i, 0, rng.gen_range(0.0..10.0));
                c.set(i, 1, labels[i] as f64 + rng.gen_range(0.05..0.95));
            }
            Some(c)
        }
    };

    let cell_ids = (0..n).map(|i| format!("c{i:04}")).collect();
    let gene_ids = (0..m).map(|j| format!("g{j:04}")).collect();
    Ok(Dataset {
        expression: ExpressionMatrix::new(values, cell_ids, gene_ids)?,
        labels: Some(labels),
        coords,
        n_types: Some(t),
    })
}
