//! Shared fixtures for the criterion benchmarks.

use scrcl_core::ingest::{
    generate_synthetic, preprocess, Dataset, PreprocessConfig, SpatialLayout, SyntheticSpec,
};
use scrcl_core::linalg::Matrix;

/// Deterministic fill data; xorshift is plenty for benchmark inputs.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let data: Vec<f64> = (0..rows * cols).map(|_| next()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A small preprocessed synthetic dataset for end-to-end benchmarks.
pub fn small_dataset() -> Dataset {
    let spec = SyntheticSpec {
        n_cells: 60,
        n_genes: 30,
        n_types: 3,
        markers_per_type: 4,
        marker_lift: 4.0,
        noise_sd: 1.0,
        dropout_rate: 0.1,
        spatial_layout: SpatialLayout::None,
        seed: 0,
    };
    let mut ds = generate_synthetic(&spec).unwrap();
    ds.expression = preprocess(&ds.expression, &PreprocessConfig::default()).unwrap();
    ds
}
