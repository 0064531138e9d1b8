use crate::engine::rng::Rng;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

const MAX_ITERS: usize = 300;

#[derive(Clone, Debug)]
pub struct KmeansResult {
    /// Cluster id per point.
    pub assignments: Vec<usize>,
    /// `[k, d]`, row per center; each is the mean of its assigned points.
    pub centers: Tensor,
    /// Sum of squared distances after each assignment pass.
    pub sse_trace: Vec<f64>,
    /// Assignment passes that were preceded by an empty-cluster reseed.
    pub reseeds: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm over the rows of `points` (`[n, d]`).
///
/// Seeding is farthest-point: the first center is an rng-chosen row, each
/// subsequent center the row farthest from its nearest chosen center
/// (lowest index on ties). Runs until assignments stop changing or the
/// iteration cap; a cluster left empty after an update is reseeded from the
/// point farthest from its assigned center.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng) -> Result<KmeansResult> {
    let n = points.shape()[0];
    let d = points.shape()[1];
    if k == 0 || k > n {
        return Err(Error::rejected(format!(
            "k={k} must be in [1, {n}] for {n} points"
        )));
    }

    let mut centers = Tensor::zeros(&[k, d]);
    let first = rng.gen_index(n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    // nearest[i] = squared distance from point i to its nearest chosen center
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centers.row(0)))
        .collect();
    for c in 1..k {
        let mut far = 0;
        for i in 1..n {
            if nearest[i] > nearest[far] {
                far = i;
            }
        }
        centers.row_mut(c).copy_from_slice(points.row(far));
        for i in 0..n {
            let dist = sq_dist(points.row(i), centers.row(c));
            if dist < nearest[i] {
                nearest[i] = dist;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut sse_trace = Vec::new();
    let mut reseeds = Vec::new();
    let mut reseeded = false;
    for iter in 0..MAX_ITERS {
        // Assign.
        let mut sse = 0.0;
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = sq_dist(points.row(i), centers.row(0));
            for c in 1..k {
                let dist = sq_dist(points.row(i), centers.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            sse += best_d;
        }
        sse_trace.push(sse);
        if reseeded {
            reseeds.push(iter);
            reseeded = false;
        }
        if !changed && iter > 0 {
            break;
        }

        // Update.
        let mut counts = vec![0usize; k];
        let mut sums = Tensor::zeros(&[k, d]);
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            let row = points.row(i);
            let acc = sums.row_mut(c);
            for j in 0..d {
                acc[j] += row[j];
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed from the point farthest from its assigned center,
                // skipping points already used for a reseed this round.
                let mut far = usize::MAX;
                let mut far_d = -1.0;
                for i in 0..n {
                    if taken[i] {
                        continue;
                    }
                    let dist = sq_dist(points.row(i), centers.row(assignments[i]));
                    if dist > far_d {
                        far_d = dist;
                        far = i;
                    }
                }
                taken[far] = true;
                centers.row_mut(c).copy_from_slice(points.row(far));
                reseeded = true;
            } else {
                let inv = 1.0 / counts[c] as f64;
                let sum_row = sums.row(c);
                let dst = centers.row_mut(c);
                for j in 0..d {
                    dst[j] = sum_row[j] * inv;
                }
            }
        }
    }

    Ok(KmeansResult {
        assignments,
        centers,
        sse_trace,
        reseeds,
    })
}
