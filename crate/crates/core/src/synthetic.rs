//! Labeled Gaussian-cluster features for desk-scale experiments.

use crate::tensor::{Matrix, SeededRng, STREAM_DATA};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub samples: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Standard deviation of the cluster centers around the origin.
    pub center_scale: f64,
    /// Within-cluster standard deviation.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            samples: 2000,
            dim: 64,
            clusters: 10,
            center_scale: 1.0,
            spread: 0.5,
            seed: 0,
        }
    }
}

/// Returns the features and each sample's cluster label. Sample `s` belongs
/// to cluster `s mod clusters`.
pub fn gaussian_clusters(spec: &ClusterSpec) -> (Matrix, Vec<usize>) {
    let mut rng = SeededRng::with_stream(spec.seed, STREAM_DATA);
    let clusters = spec.clusters.max(1);
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..spec.dim).map(|_| spec.center_scale * rng.next_gaussian()).collect())
        .collect();
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for s in 0..spec.samples {
        let c = s % clusters;
        labels.push(c);
        data.extend(centers[c].iter().map(|&m| m + spec.spread * rng.next_gaussian()));
    }
    let m = Matrix::from_vec(spec.samples, spec.dim, data).expect("sized above");
    (m, labels)
}
