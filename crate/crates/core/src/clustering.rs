//! Lloyd's k-means with k-means++ seeding over an [`EmbeddingCorpus`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::seq::index;

use crate::corpus::{EmbeddingCorpus, InstanceId};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the largest centroid shift falls below this.
    pub tol: f64,
    /// L2-normalize rows before clustering.
    pub normalize: bool,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 64,
            seed: 0,
            max_iters: 100,
            tol: 0.0,
            normalize: false,
        }
    }
}

/// Centroids plus the cluster of every instance, indexed by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    assignment: Vec<u32>,
    members: Vec<Vec<InstanceId>>,
}

impl ClusterModel {
    pub fn new(k: usize, dim: usize, centroids: Vec<f64>, assignment: Vec<u32>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        if centroids.len() != k * dim {
            return Err(Error::DimensionMismatch {
                context: "centroid matrix",
                expected: k * dim,
                actual: centroids.len(),
            });
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a as usize >= k) {
            return Err(Error::InvalidArgument(format!(
                "assignment {bad} out of range for k={k}"
            )));
        }
        let mut members = vec![Vec::new(); k];
        for (id, &c) in assignment.iter().enumerate() {
            members[c as usize].push(id as InstanceId);
        }
        Ok(Self {
            k,
            dim,
            centroids,
            assignment,
            members,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.assignment.len()
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn cluster_of(&self, id: InstanceId) -> usize {
        self.assignment[id as usize] as usize
    }

    /// Member ids of cluster `c`, ascending.
    pub fn members(&self, c: usize) -> &[InstanceId] {
        &self.members[c]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squared Euclidean distances.
pub fn objective(model: &ClusterModel, corpus: &EmbeddingCorpus) -> Result<f64> {
    if model.dim != corpus.dim() {
        return Err(Error::DimensionMismatch {
            context: "objective dim",
            expected: model.dim,
            actual: corpus.dim(),
        });
    }
    if model.count() != corpus.count() {
        return Err(Error::DimensionMismatch {
            context: "objective count",
            expected: model.count(),
            actual: corpus.count(),
        });
    }
    Ok((0..corpus.count())
        .map(|row| sq_dist(corpus.row(row), model.centroid(model.cluster_of(corpus.ids()[row]))))
        .sum())
}

fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(corpus: &EmbeddingCorpus, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = corpus.count();
    let dim = corpus.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(corpus.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(corpus.row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(corpus.row(pick));
        let new_c = &centroids[start..];
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(corpus.row(i), new_c));
        }
    }
    centroids
}

/// Result of a k-means run: the model and the objective after every Lloyd iteration.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub model: ClusterModel,
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn kmeans(corpus: &EmbeddingCorpus, params: &KMeansParams) -> Result<ClusterModel> {
    kmeans_traced(corpus, params).map(|run| run.model)
}

/// Lloyd iterations from k-means++ seeding. Emptied clusters are re-seeded at
/// the point farthest from its current centroid, so `k` never shrinks.
pub fn kmeans_traced(corpus: &EmbeddingCorpus, params: &KMeansParams) -> Result<KMeansRun> {
    let k = params.k;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot cluster an empty corpus".into()));
    }
    if k > corpus.count() {
        return Err(Error::InvalidArgument(format!(
            "k={k} exceeds corpus count {}",
            corpus.count()
        )));
    }
    let normalized;
    let data = if params.normalize {
        normalized = corpus.l2_normalized();
        &normalized
    } else {
        corpus
    };
    let n = data.count();
    let dim = data.dim();
    let mut rng = rng::seeded(params.seed, 0x6b6d);
    let mut centroids = kmeans_pp(data, k, &mut rng);
    let mut assign = vec![u32::MAX; n];
    let mut dists = vec![0.0; n];
    let mut objectives = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iters {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(data.row(i), &centroids, dim);
            if assign[i] != c as u32 {
                assign[i] = c as u32;
                changed = true;
            }
            dists[i] = d;
        }
        if !changed {
            converged = true;
            objectives.push(dists.iter().sum());
            break;
        }

        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a as usize] += 1;
        }
        // Repair empty clusters by stealing the worst-fit point from a cluster with ≥ 2 members.
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let far = (0..n)
                .filter(|&i| counts[assign[i] as usize] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("k <= n guarantees a donor cluster");
            counts[assign[far] as usize] -= 1;
            assign[far] = empty as u32;
            counts[empty] = 1;
            dists[far] = 0.0;
        }

        let mut sums = vec![0.0; k * dim];
        for i in 0..n {
            let c = assign[i] as usize;
            crate::math::axpy(1.0, data.row(i), &mut sums[c * dim..(c + 1) * dim]);
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut s2 = 0.0;
            for j in 0..dim {
                let v = sums[c * dim + j] * inv;
                let d = v - centroids[c * dim + j];
                s2 += d * d;
                centroids[c * dim + j] = v;
            }
            shift = shift.max(crate::math::sqrt(s2));
        }
        objectives.push(
            (0..n)
                .map(|i| sq_dist(data.row(i), &centroids[assign[i] as usize * dim..][..dim]))
                .sum(),
        );
        if shift < params.tol {
            converged = true;
            break;
        }
    }

    // Assignment is stored by instance id rather than row.
    let mut by_id = vec![0u32; n];
    for (row, &id) in data.ids().iter().enumerate() {
        by_id[id as usize] = assign[row];
    }
    Ok(KMeansRun {
        model: ClusterModel::new(k, dim, centroids, by_id)?,
        objectives,
        iterations,
        converged,
    })
}

/// Uniform sample of `n` member ids of `cluster`, deterministic in `seed`.
pub fn sample_from_cluster(
    model: &ClusterModel,
    cluster: usize,
    n: usize,
    seed: u64,
    without_replacement: bool,
) -> Result<Vec<InstanceId>> {
    if cluster >= model.k {
        return Err(Error::InvalidArgument(format!(
            "cluster {cluster} out of range for k={}",
            model.k
        )));
    }
    let members = model.members(cluster);
    if members.is_empty() {
        return Err(Error::EmptyCluster { cluster });
    }
    let mut rng = rng::seeded(seed, cluster as u64);
    if without_replacement {
        if n > members.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {n} without replacement from cluster {cluster} of size {}",
                members.len()
            )));
        }
        Ok(index::sample(&mut rng, members.len(), n)
            .into_iter()
            .map(|i| members[i])
            .collect())
    } else {
        Ok((0..n)
            .map(|_| members[rng.random_range(0..members.len())])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(rows: &[&[f64]]) -> EmbeddingCorpus {
        let dim = rows[0].len();
        EmbeddingCorpus::from_rows(dim, rows.iter().flat_map(|r| r.iter().copied()).collect())
            .unwrap()
    }

    #[test]
    fn two_points_two_clusters() {
        let c = corpus(&[&[0.0, 0.0], &[3.0, 4.0]]);
        let m = kmeans(&c, &KMeansParams { k: 2, ..Default::default() }).unwrap();
        assert_ne!(m.cluster_of(0), m.cluster_of(1));
        assert_eq!(objective(&m, &c).unwrap(), 0.0);
    }

    #[test]
    fn single_cluster_is_mean() {
        let c = corpus(&[&[1.0, 2.0], &[3.0, 6.0], &[5.0, 1.0]]);
        let m = kmeans(&c, &KMeansParams { k: 1, ..Default::default() }).unwrap();
        assert!((m.centroid(0)[0] - 3.0).abs() < 1e-12);
        assert!((m.centroid(0)[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let c = corpus(&[&[0.0], &[1.0]]);
        assert!(kmeans(&c, &KMeansParams { k: 0, ..Default::default() }).is_err());
        assert!(kmeans(&c, &KMeansParams { k: 3, ..Default::default() }).is_err());
        let empty = EmbeddingCorpus::from_rows(1, vec![]).unwrap();
        assert!(kmeans(&empty, &KMeansParams { k: 1, ..Default::default() }).is_err());
        let m = kmeans(&c, &KMeansParams { k: 1, ..Default::default() }).unwrap();
        let wrong = corpus(&[&[0.0, 1.0], &[1.0, 1.0]]);
        assert!(objective(&m, &wrong).is_err());
    }

    #[test]
    fn objective_single_offset_point() {
        let c = corpus(&[&[3.0, 4.0]]);
        let m = ClusterModel::new(1, 2, vec![0.0, 0.0], vec![0]).unwrap();
        assert_eq!(objective(&m, &c).unwrap(), 25.0);
    }

    #[test]
    fn duplicate_points_force_empty_cluster_repair() {
        // Four identical points and k=3: seeding collapses, repair keeps every cluster non-empty.
        let c = corpus(&[&[1.0], &[1.0], &[1.0], &[1.0], &[2.0]]);
        let m = kmeans(&c, &KMeansParams { k: 3, max_iters: 20, ..Default::default() }).unwrap();
        assert!(m.sizes().iter().all(|&s| s > 0));
        assert_eq!(m.sizes().iter().sum::<usize>(), 5);
    }

    #[test]
    fn sampling_edge_cases() {
        let m = ClusterModel::new(2, 1, vec![0.0, 1.0], vec![0, 1, 1, 1]).unwrap();
        assert_eq!(sample_from_cluster(&m, 0, 1, 9, true).unwrap(), vec![0]);
        let mut all = sample_from_cluster(&m, 1, 3, 9, true).unwrap();
        all.sort();
        assert_eq!(all, vec![1, 2, 3]);
        assert!(sample_from_cluster(&m, 1, 4, 9, true).is_err());
        assert_eq!(sample_from_cluster(&m, 1, 7, 9, false).unwrap().len(), 7);
        assert!(sample_from_cluster(&m, 2, 1, 9, true).is_err());
        let with_empty = ClusterModel::new(2, 1, vec![0.0, 1.0], vec![0, 0]).unwrap();
        assert_eq!(
            sample_from_cluster(&with_empty, 1, 1, 0, false),
            Err(Error::EmptyCluster { cluster: 1 })
        );
    }
}
