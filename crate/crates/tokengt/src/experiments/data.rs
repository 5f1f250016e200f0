//! Synthetic dataset generation and target statistics.

use crate::graphs::{barabasi_albert, Graph, GraphError};
use crate::numerics::RngSeed;
use rand::Rng;

/// Preferential-attachment graphs with node count uniform on [10, 20] and
/// attachment count uniform on {2, 3}, split into disjoint train/test sets
/// with independent sub-streams.
pub fn ba_dataset(
    train_n: usize,
    test_n: usize,
    seed: RngSeed,
) -> Result<(Vec<Graph>, Vec<Graph>), GraphError> {
    let sample = |count: usize, stream: RngSeed| -> Result<Vec<Graph>, GraphError> {
        let mut rng = stream.rng();
        (0..count)
            .map(|i| {
                let n = rng.gen_range(10..=20);
                let k = rng.gen_range(2..=3);
                barabasi_albert(n, k, stream.child(i as u64 + 1))
            })
            .collect()
    };
    Ok((sample(train_n, seed.child(1))?, sample(test_n, seed.child(2))?))
}

/// Basic corpus statistics used by the dataset sanity report.
#[derive(Debug, Clone, Copy)]
pub struct DatasetStats {
    pub graphs: usize,
    pub mean_nodes: f64,
    pub mean_edges: f64,
}

pub fn dataset_stats(graphs: &[Graph]) -> DatasetStats {
    let n = graphs.len().max(1) as f64;
    DatasetStats {
        graphs: graphs.len(),
        mean_nodes: graphs.iter().map(|g| g.n() as f64).sum::<f64>() / n,
        mean_edges: graphs.iter().map(|g| g.m() as f64).sum::<f64>() / n,
    }
}

/// Triangle-count targets standardized to zero mean and unit variance over
/// the reference (training) set.
#[derive(Debug, Clone)]
pub struct StandardizedTargets {
    pub mean: f64,
    pub std: f64,
}

impl StandardizedTargets {
    pub fn fit(graphs: &[Graph]) -> StandardizedTargets {
        let raw: Vec<f64> = graphs.iter().map(|g| g.triangle_count() as f64).collect();
        let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / raw.len().max(1) as f64;
        StandardizedTargets {
            mean,
            std: var.sqrt().max(1e-9),
        }
    }

    pub fn target(&self, g: &Graph) -> f64 {
        (g.triangle_count() as f64 - self.mean) / self.std
    }
}

/// Lower bound on the test MSE of any predictor that only sees the pair
/// (node count, edge count): the variance of the standardized target around
/// its group mean, grouped by (n, m) over the evaluation set.
pub fn conditional_variance_bound(graphs: &[Graph], targets: &StandardizedTargets) -> f64 {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for g in graphs {
        groups.entry((g.n(), g.m())).or_default().push(targets.target(g));
    }
    let mut total = 0.0;
    let mut count = 0.0f64;
    for values in groups.values() {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for v in values {
            total += (v - mean) * (v - mean);
            count += 1.0;
        }
    }
    total / count.max(1.0)
}
