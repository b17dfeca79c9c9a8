//! Per-group k-means clustering of embeddings and the cluster-count rule
//! feeding clustered generation.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GroupKey, GroupedDataset};
use crate::embed::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub group: GroupKey,
    pub k: usize,
    /// item id -> cluster index in [0, k)
    pub labels: BTreeMap<String, usize>,
    pub centroids: Vec<Embedding>,
    /// Set when the group was smaller than the requested k and k was reduced.
    pub reduced_from: Option<usize>,
}

/// k_D = min(round(M_gs / 20), 20), floored at 1. Rounding is
/// half-away-from-zero so 56 -> 3 and 103 -> 5.
pub fn cluster_count_rule(smallest_group_size: usize) -> usize {
    let rounded = (smallest_group_size as f64 / 20.0).round() as usize;
    rounded.clamp(1, 20)
}

/// Lloyd's k-means with k-means++ seeding over one embedding set.
/// Deterministic under seed; empty clusters are reseeded from the point
/// farthest from its centroid.
pub fn kmeans(
    points: &[(String, Vec<f64>)],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(BTreeMap<String, usize>, Vec<Embedding>)> {
    if points.is_empty() {
        return Err(Error::Sampling("k-means over an empty set".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "k={k} invalid for {} points",
            points.len()
        )));
    }
    let dim = points[0].1.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].1.clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|(_, p)| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[next].1.clone());
    }

    let mut assignment = vec![0usize; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, (_, p)) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(p, &centroids[a])
                        .partial_cmp(&sq_dist(p, &centroids[b]))
                        .unwrap()
                })
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        // Recompute centroids; repair empty clusters from the farthest point.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, (_, p)) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let farthest = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a].1, &centroids[assignment[a]])
                            .partial_cmp(&sq_dist(&points[b].1, &centroids[assignment[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[c] = points[farthest].1.clone();
                assignment[farthest] = c;
                changed = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let labels = points
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), assignment[i]))
        .collect();
    let centroids = centroids.into_iter().map(Embedding::new).collect();
    Ok((labels, centroids))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cluster each group's embeddings independently with a shared k. Groups
/// smaller than k fall back to k = group size and record the reduction.
pub fn kmeans_per_group(
    ds: &GroupedDataset,
    embs: &BTreeMap<String, Embedding>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<BTreeMap<GroupKey, ClusterAssignment>> {
    let mut out = BTreeMap::new();
    for (group_idx, group) in ds.group_sizes().keys().enumerate() {
        let points: Vec<(String, Vec<f64>)> = ds
            .group_items(group)
            .map(|item| {
                embs.get(&item.id)
                    .map(|e| (item.id.clone(), e.vector.clone()))
                    .ok_or_else(|| {
                        Error::Integrity(format!("missing embedding for item `{}`", item.id))
                    })
            })
            .collect::<Result<_>>()?;
        let effective_k = k.min(points.len());
        let (labels, centroids) =
            kmeans(&points, effective_k, seed.wrapping_add(group_idx as u64), max_iter)?;
        out.insert(
            group.clone(),
            ClusterAssignment {
                group: group.clone(),
                k: effective_k,
                labels,
                centroids,
                reduced_from: (effective_k < k).then_some(k),
            },
        );
    }
    Ok(out)
}

/// Total within-cluster sum of squared distances.
pub fn within_cluster_sse(
    points: &[(String, Vec<f64>)],
    labels: &BTreeMap<String, usize>,
    centroids: &[Embedding],
) -> f64 {
    points
        .iter()
        .map(|(id, p)| sq_dist(p, &centroids[labels[id]].vector))
        .sum()
}

pub fn save_assignments(
    assignments: &BTreeMap<GroupKey, ClusterAssignment>,
    path: &std::path::Path,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let list: Vec<&ClusterAssignment> = assignments.values().collect();
    std::fs::write(path, serde_json::to_string_pretty(&list)?)?;
    Ok(())
}

pub fn load_assignments(path: &std::path::Path) -> Result<BTreeMap<GroupKey, ClusterAssignment>> {
    let text = std::fs::read_to_string(path)?;
    let list: Vec<ClusterAssignment> = serde_json::from_str(&text)?;
    Ok(list.into_iter().map(|a| (a.group.clone(), a)).collect())
}
