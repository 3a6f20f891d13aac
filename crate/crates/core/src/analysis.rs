//! Marker-gene scoring and embedding export.
//!
//! Each gene is scored per cluster with a Wilcoxon rank-sum statistic
//! (cluster members vs. all other cells): ties get average ranks, the null
//! variance carries the tie correction, and no continuity correction is
//! applied. The resulting z is the ranking score; positive means the gene
//! runs higher inside the cluster.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::ExpressionMatrix;
use crate::linalg::Matrix;

/// One gene's score card for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerEntry {
    pub gene: String,
    /// Wilcoxon rank-sum z of cluster members against the rest.
    pub z: f64,
    pub mean_in: f64,
    pub mean_out: f64,
    /// Fraction of cluster members expressing the gene (value > 0).
    pub frac_in: f64,
}

/// Every gene ranked per cluster: descending z, ties broken by gene id.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerReport {
    pub clusters: Vec<Vec<MarkerEntry>>,
}

impl MarkerReport {
    /// Per-cluster top-`n` slices (shorter if there are fewer genes).
    pub fn top(&self, n: usize) -> Vec<&[MarkerEntry]> {
        self.clusters.iter().map(|c| &c[..n.min(c.len())]).collect()
    }
}

/// Average ranks (1-based) of `values` and the tie term `sum(t^3 - t)`.
fn average_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // positions i..j (0-based) share ranks i+1..=j; their mean is below
        let avg = (i + 1 + j) as f64 / 2.0;
        for &cell in &idx[i..j] {
            ranks[cell] = avg;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    (ranks, tie_term)
}

/// Score every gene for every cluster. `labels[i]` assigns cell `i` to one
/// of `k` clusters; every cluster must be populated.
pub fn deg_scores(x: &ExpressionMatrix, labels: &[usize], k: usize) -> Result<MarkerReport> {
    let n = x.n_cells();
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{} labels for {n} cells",
            labels.len()
        )));
    }
    if k < 1 {
        return Err(Error::InvalidParameter("need at least one cluster".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for k = {k}"
        )));
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Contract(format!("cluster {empty} has no members")));
    }

    let mut clusters: Vec<Vec<MarkerEntry>> = vec![Vec::with_capacity(x.n_genes()); k];
    let mut column = vec![0.0; n];
    for j in 0..x.n_genes() {
        for (i, v) in column.iter_mut().enumerate() {
            *v = x.values.get(i, j);
        }
        let (ranks, tie_term) = average_ranks(&column);

        // per-cluster accumulators over the shared ranking
        let mut rank_sum = vec![0.0; k];
        let mut value_sum = vec![0.0; k];
        let mut expressed = vec![0usize; k];
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            rank_sum[l] += ranks[i];
            value_sum[l] += column[i];
            if column[i] > 0.0 {
                expressed[l] += 1;
            }
            total += column[i];
        }

        let nf = n as f64;
        let bracket = (nf + 1.0) - tie_term / (nf * (nf - 1.0));
        for c in 0..k {
            let n1 = sizes[c] as f64;
            let n2 = nf - n1;
            let var = n1 * n2 / 12.0 * bracket;
            let z = if var > 0.0 {
                (rank_sum[c] - n1 * (nf + 1.0) / 2.0) / var.sqrt()
            } else {
                0.0
            };
            let mean_out = if n2 > 0.0 {
                (total - value_sum[c]) / n2
            } else {
                0.0
            };
            clusters[c].push(MarkerEntry {
                gene: x.gene_ids[j].clone(),
                z,
                mean_in: value_sum[c] / n1,
                mean_out,
                frac_in: expressed[c] as f64 / n1,
            });
        }
    }
    for entries in &mut clusters {
        entries.sort_by(|a, b| b.z.total_cmp(&a.z).then_with(|| a.gene.cmp(&b.gene)));
    }
    Ok(MarkerReport { clusters })
}

/// Tab-separated marker table, every cluster's genes in rank order.
pub fn write_markers_tsv(path: &Path, report: &MarkerReport) -> Result<()> {
    let mut out = String::from("cluster\trank\tgene\tz\tmean_in\tmean_out\tfrac_in\n");
    for (c, entries) in report.clusters.iter().enumerate() {
        for (rank, e) in entries.iter().enumerate() {
            out.push_str(&format!(
                "{c}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                rank + 1,
                e.gene,
                e.z,
                e.mean_in,
                e.mean_out,
                e.frac_in
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Embedding CSV: `id,label,z_1..z_d`, the label column present exactly when
/// labels are given.
pub fn write_embeddings_csv(
    path: &Path,
    cell_ids: &[String],
    labels: Option<&[usize]>,
    z: &Matrix,
) -> Result<()> {
    if cell_ids.len() != z.rows() {
        return Err(Error::Contract(format!(
            "{} ids for {} embedding rows",
            cell_ids.len(),
            z.rows()
        )));
    }
    if let Some(l) = labels {
        if l.len() != z.rows() {
            return Err(Error::Contract(format!(
                "{} labels for {} embedding rows",
                l.len(),
                z.rows()
            )));
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["id".to_string()];
    if labels.is_some() {
        header.push("label".into());
    }
    header.extend((1..=z.cols()).map(|d| format!("z_{d}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, id) in cell_ids.iter().enumerate() {
        let mut record = vec![id.clone()];
        if let Some(l) = labels {
            record.push(l[i].to_string());
        }
        record.extend(z.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    }
}

/// Inverse of [`write_embeddings_csv`]: `(cell_ids, labels, embedding)`.
pub fn read_embeddings_csv(path: &Path) -> Result<(Vec<String>, Option<Vec<usize>>, Matrix)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let fields: Vec<&str> = header.iter().collect();
    let bad = |line: u64, msg: String| Error::Parse {
        path: path.display().to_string(),
        line: line as usize,
        msg,
    };
    if fields.first() != Some(&"id") {
        return Err(bad(1, "first column must be id".into()));
    }
    let has_labels = fields.get(1) == Some(&"label");
    let z_start = if has_labels { 2 } else { 1 };
    let dim = fields.len() - z_start;

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != fields.len() {
            return Err(bad(
                line,
                format!("expected {} fields, found {}", fields.len(), record.len()),
            ));
        }
        ids.push(record[0].to_string());
        if has_labels {
            labels.push(
                record[1]
                    .parse::<usize>()
                    .map_err(|e| bad(line, format!("bad label {:?}: {e}", &record[1])))?,
            );
        }
        let row: Vec<f64> = record
            .iter()
            .skip(z_start)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| bad(line, format!("bad value {v:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let z = Matrix::from_rows(&rows)
        .map_err(|_| bad(0, format!("no embedding rows of width {dim}")))?;
    Ok((ids, has_labels.then_some(labels), z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_of(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn expr(values: Matrix) -> ExpressionMatrix {
        let cells = (0..values.rows()).map(|i| format!("c{i}")).collect();
        let genes = (0..values.cols()).map(|j| format!("g{j}")).collect();
        ExpressionMatrix::new(values, cells, genes).unwrap()
    }

    #[test]
    fn average_ranks_handle_ties() {
        let (ranks, tie) = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(ranks, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(tie, 6.0); // one pair: 2^3 - 2
        let (ranks, tie) = average_ranks(&[5.0, 5.0, 5.0]);
        assert_eq!(ranks, vec![2.0, 2.0, 2.0]);
        assert_eq!(tie, 24.0);
    }

    #[test]
    fn two_vs_two_matches_the_hand_formula() {
        // cluster 0 = {5, 7} -> ranks {3, 4}, R1 = 7; mu = 5; var = 4/12 * 5
        let x = expr(matrix_of(&[vec![5.0], vec![7.0], vec![1.0], vec![3.0]]));
        let report = deg_scores(&x, &[0, 0, 1, 1], 2).unwrap();
        let z = report.clusters[0][0].z;
        let expect = 2.0 / (5.0_f64 / 3.0).sqrt();
        assert!((z - expect).abs() < 1e-12, "{z} vs {expect}");
        // the complementary cluster gets the mirrored score
        assert!((report.clusters[1][0].z + expect).abs() < 1e-12);
    }

    #[test]
    fn eight_cell_tied_fixture_matches_hand_ranks() {
        // values 4,4,3,2 | 2,1,1,0: ranks 7.5,7.5,6,4.5 | 4.5,2.5,2.5,1
        // R1 = 25.5, mu = 18, tie term = (2^3-2)*3 = 18
        // var = (16/12) * (9 - 18/56) = 4/3 * 243/28
        let vals = [4.0, 4.0, 3.0, 2.0, 2.0, 1.0, 1.0, 0.0];
        let x = expr(matrix_of(
            &vals.iter().map(|&v| vec![v]).collect::<Vec<_>>(),
        ));
        let report = deg_scores(&x, &[0, 0, 0, 0, 1, 1, 1, 1], 2).unwrap();
        let expect = 7.5 / (4.0_f64 / 3.0 * (9.0 - 18.0 / 56.0)).sqrt();
        assert!((report.clusters[0][0].z - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_gene_scores_zero() {
        let x = expr(matrix_of(&[
            vec![2.0, 1.0],
            vec![2.0, 3.0],
            vec![2.0, 0.0],
            vec![2.0, 5.0],
        ]));
        let report = deg_scores(&x, &[0, 0, 1, 1], 2).unwrap();
        for cluster in &report.clusters {
            let g0 = cluster.iter().find(|e| e.gene == "g0").unwrap();
            assert_eq!(g0.z, 0.0);
            assert_eq!(g0.mean_in, 2.0);
            assert_eq!(g0.mean_out, 2.0);
        }
    }

    #[test]
    fn exclusive_gene_tops_its_cluster_and_sinks_elsewhere() {
        // g1 expressed only in cluster 1; g0/g2 are background noise
        let x = expr(matrix_of(&[
            vec![1.0, 0.0, 2.0],
            vec![3.0, 0.0, 1.0],
            vec![2.0, 5.0, 2.5],
            vec![1.5, 6.0, 0.5],
            vec![2.5, 4.0, 1.5],
        ]));
        let report = deg_scores(&x, &[0, 0, 1, 1, 1], 2).unwrap();
        let top = &report.clusters[1][0];
        assert_eq!(top.gene, "g1");
        assert!(top.z > 0.0);
        assert_eq!(top.frac_in, 1.0);
        assert_eq!(top.mean_in, 5.0);
        assert_eq!(top.mean_out, 0.0);
        // and it ranks dead last for the other cluster
        let bottom = report.clusters[0].last().unwrap();
        assert_eq!(bottom.gene, "g1");
        assert!(bottom.z < 0.0);
        assert_eq!(bottom.frac_in, 0.0);
    }

    #[test]
    fn scores_are_invariant_to_cell_order() {
        let rows = vec![
            vec![1.0, 4.0],
            vec![2.0, 3.0],
            vec![5.0, 0.0],
            vec![4.0, 1.0],
            vec![3.0, 2.0],
            vec![0.0, 5.0],
        ];
        let labels = [0, 1, 0, 1, 0, 1];
        let report = deg_scores(&expr(matrix_of(&rows)), &labels, 2).unwrap();

        let perm = [5, 2, 0, 4, 1, 3];
        let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let report_p = deg_scores(&expr(matrix_of(&rows_p)), &labels_p, 2).unwrap();
        assert_eq!(report, report_p);
    }

    #[test]
    fn ties_in_z_break_lexicographically() {
        // two identical genes tie exactly; g0 must precede g1
        let x = expr(matrix_of(&[
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
            vec![4.0, 4.0],
        ]));
        let report = deg_scores(&x, &[0, 0, 1, 1], 2).unwrap();
        let order: Vec<&str> = report.clusters[0].iter().map(|e| e.gene.as_str()).collect();
        assert_eq!(order, ["g0", "g1"]);
    }

    #[test]
    fn empty_cluster_is_named_in_the_error() {
        let x = expr(matrix_of(&[vec![1.0], vec![2.0], vec![3.0]]));
        let err = deg_scores(&x, &[0, 0, 0], 2).unwrap_err().to_string();
        assert!(err.contains("cluster 1"), "{err}");
        assert!(deg_scores(&x, &[0, 0, 5], 2).is_err());
        assert!(deg_scores(&x, &[0, 0], 1).is_err());
    }

    #[test]
    fn top_slices_are_cluster_prefixes() {
        let x = expr(matrix_of(&[
            vec![5.0, 1.0, 0.0],
            vec![4.0, 2.0, 0.5],
            vec![0.0, 4.0, 3.0],
            vec![1.0, 5.0, 2.0],
        ]));
        let report = deg_scores(&x, &[0, 0, 1, 1], 2).unwrap();
        let top = report.top(2);
        assert_eq!(top[0].len(), 2);
        assert_eq!(top[0][0], report.clusters[0][0]);
        assert_eq!(report.top(99)[0].len(), 3);
    }

    #[test]
    fn marker_tsv_lists_ranks_per_cluster() {
        let x = expr(matrix_of(&[
            vec![5.0, 0.0],
            vec![4.0, 1.0],
            vec![0.0, 4.0],
            vec![1.0, 3.0],
        ]));
        let report = deg_scores(&x, &[0, 0, 1, 1], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("markers.tsv");
        write_markers_tsv(&path, &report).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("cluster\trank\tgene\tz\tmean_in\tmean_out\tfrac_in")
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("0\t1\tg0\t"), "{first}");
        assert_eq!(text.lines().count(), 1 + 4); // header + 2 clusters x 2 genes
    }

    #[test]
    fn embeddings_csv_round_trips_with_and_without_labels() {
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let z = matrix_of(&[vec![0.25, -1.5], vec![3.0, 0.125], vec![-2.0, 0.0]]);
        let dir = tempfile::tempdir().unwrap();

        let with = dir.path().join("with.csv");
        write_embeddings_csv(&with, &ids, Some(&[1, 0, 1]), &z).unwrap();
        let text = fs::read_to_string(&with).unwrap();
        assert!(text.starts_with("id,label,z_1,z_2\n"), "{text}");
        let (rids, rlabels, rz) = read_embeddings_csv(&with).unwrap();
        assert_eq!(rids, ids);
        assert_eq!(rlabels, Some(vec![1, 0, 1]));
        assert_eq!(rz, z);

        let without = dir.path().join("without.csv");
        write_embeddings_csv(&without, &ids, None, &z).unwrap();
        assert!(fs::read_to_string(&without)
            .unwrap()
            .starts_with("id,z_1,z_2\n"));
        let (_, rlabels, rz) = read_embeddings_csv(&without).unwrap();
        assert_eq!(rlabels, None);
        assert_eq!(rz, z);

        assert!(write_embeddings_csv(&without, &ids[..2], None, &z).is_err());
    }
}
