//! Mini-batch spherical k-means with EMA centroids, the pseudo-label source
//! for the cluster-level generation objective.

use rand::Rng;

use crate::tensor::Tensor;

pub struct ClusterState {
    /// `c` unit-norm centroid rows.
    pub centroids: Vec<Vec<f64>>,
    /// Per-dataset-sample assignments, updated for the indices seen.
    pub assignments: Vec<usize>,
    /// EMA decay for centroid updates.
    pub decay: f64,
    /// Batch membership counts from the latest update (after repair every
    /// cluster is alive: nonzero count or freshly re-seeded).
    pub last_counts: Vec<usize>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= n;
    }
}

impl ClusterState {
    /// Seed centroids from a batch of unit embeddings (`[n, d]`), picking
    /// `c` distinct random rows.
    pub fn init_from_batch(
        embeddings: &Tensor,
        c: usize,
        dataset_len: usize,
        rng: &mut dyn rand::RngCore,
    ) -> ClusterState {
        let shape = embeddings.shape();
        assert_eq!(shape.len(), 2, "cluster init: embeddings must be [n, d]");
        let (n, d) = (shape[0], shape[1]);
        assert!(c >= 1, "cluster init: need at least one cluster");
        assert!(n >= c, "cluster init: batch of {n} cannot seed {c} centroids");
        let data = embeddings.data();
        let mut picked: Vec<usize> = Vec::with_capacity(c);
        while picked.len() < c {
            let i = rng.gen_range(0..n);
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        let centroids = picked
            .iter()
            .map(|i| {
                let mut row = data[i * d..][..d].to_vec();
                normalize(&mut row);
                row
            })
            .collect();
        ClusterState {
            centroids,
            assignments: vec![0; dataset_len],
            decay: 0.99,
            last_counts: vec![0; c],
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Assign each embedding to its nearest centroid by cosine similarity,
    /// EMA-update the centroids, and re-seed any cluster that went empty
    /// this batch from a perturbed copy of the most populated centroid.
    /// Returns the batch pseudo-labels; `indices` maps batch rows back to
    /// dataset positions for the assignment table.
    pub fn cluster_update(
        &mut self,
        embeddings: &Tensor,
        indices: &[usize],
        rng: &mut dyn rand::RngCore,
    ) -> Vec<usize> {
        let shape = embeddings.shape();
        assert_eq!(shape.len(), 2, "cluster update: embeddings must be [n, d]");
        let (n, d) = (shape[0], shape[1]);
        assert_eq!(indices.len(), n, "cluster update: index list mismatch");
        let c = self.centroids.len();
        let data = embeddings.data();

        let mut labels = Vec::with_capacity(n);
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for row in 0..n {
            let e = &data[row * d..][..d];
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (k, centroid) in self.centroids.iter().enumerate() {
                let sim: f64 = centroid.iter().zip(e).map(|(a, b)| a * b).sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = k;
                }
            }
            labels.push(best);
            counts[best] += 1;
            for (s, v) in sums[best].iter_mut().zip(e) {
                *s += v;
            }
        }

        for k in 0..c {
            if counts[k] > 0 {
                let mean: Vec<f64> = sums[k].iter().map(|s| s / counts[k] as f64).collect();
                for (cv, mv) in self.centroids[k].iter_mut().zip(&mean) {
                    *cv = self.decay * *cv + (1.0 - self.decay) * mv;
                }
                normalize(&mut self.centroids[k]);
            }
        }
        // repair: empty clusters restart next to the most populated one
        if let Some(biggest) = (0..c).max_by_key(|k| counts[*k]) {
            for k in 0..c {
                if counts[k] == 0 {
                    let mut seed = self.centroids[biggest].clone();
                    for v in seed.iter_mut() {
                        *v += rng.gen_range(-0.01..0.01);
                    }
                    normalize(&mut seed);
                    self.centroids[k] = seed;
                }
            }
        }
        self.last_counts = counts;

        for (row, &idx) in indices.iter().enumerate() {
            self.assignments[idx] = labels[row];
        }
        labels
    }
}
