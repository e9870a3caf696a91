//! Shared fixtures for the criterion benches.

use flowcon::datasets::{gen_blobs, FeatureDataset};
use flowcon::flow::{init_perturbed, FlowModel};
use flowcon::nd::Tensor;

pub fn model(d: usize, hidden: usize) -> FlowModel {
    init_perturbed(d, 8, hidden, 1, 0.5).expect("valid shape")
}

/// `k` blobs of `n_per_class` rows in `d` dimensions.
pub fn blobs(k: usize, d: usize, n_per_class: usize) -> FeatureDataset {
    gen_blobs(k, d, n_per_class, 5.0, 1.0, 2).expect("valid blobs")
}

pub fn batch(data: &FeatureDataset, rows: usize) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = (0..rows.min(data.len())).collect();
    let labels = idx.iter().map(|&i| data.labels[i] as usize).collect();
    (data.gather(&idx), labels)
}
