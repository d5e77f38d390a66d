//! K-Means over frame features with k-means++ seeding.

use crate::error::{Error, Result};
use crate::preproc::FrameFeature;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Independent seedings; the lowest final inertia wins.
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSelection {
    /// Chosen frame indices, ascending.
    pub indices: Vec<usize>,
    /// Cluster id per input feature.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances to the cluster means.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after seeding and after every Lloyd iteration of the winning
    /// run; the last entry equals `inertia`.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per point; ties go to the lowest center id.
fn assign(points: &[&[f64]], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut bd = sq_dist(p, &centers[0]);
            for (j, c) in centers.iter().enumerate().skip(1) {
                let d = sq_dist(p, c);
                if d < bd {
                    bd = d;
                    best = j;
                }
            }
            total += bd;
            best
        })
        .collect();
    (labels, total)
}

/// Cluster means; empty clusters keep their previous center.
fn update(points: &[&[f64]], labels: &[usize], centers: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let k = centers.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            for (c, s) in centers[j].iter_mut().zip(&sums[j]) {
                *c = s / counts[j] as f64;
            }
        }
    }
}

fn seed_plus_plus(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = match rng.weighted_index(&d2) {
            Some(i) => i,
            // Every point coincides with a center: take an unused index.
            None => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.below(free.len())]
            }
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

struct Run {
    labels: Vec<usize>,
    centers: Vec<Vec<f64>>,
    inertia: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn lloyd(points: &[&[f64]], k: usize, max_iter: usize, rng: &mut Rng) -> Run {
    let mut centers = seed_plus_plus(points, k, rng);
    let (mut labels, inertia) = assign(points, &centers);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        update(points, &labels, &mut centers);
        let (next, inertia) = assign(points, &centers);
        history.push(inertia);
        let converged = next == labels;
        labels = next;
        if converged {
            break;
        }
    }
    // Final centroids are the means of the final partition.
    update(points, &labels, &mut centers);
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    history.push(inertia);
    Run {
        labels,
        centers,
        inertia,
        iterations,
        history,
    }
}

/// Reduces `features` to `k` representative frames: Lloyd's algorithm from
/// k-means++ seeds, keeping per cluster the frame nearest its centroid.
pub fn select_keyframes(
    features: &[FrameFeature],
    k: usize,
    rng: &mut Rng,
    max_iter: usize,
) -> Result<KeyframeSelection> {
    select_keyframes_with(
        features,
        k,
        rng,
        &KMeansOptions {
            max_iter,
            ..KMeansOptions::default()
        },
    )
}

pub fn select_keyframes_with(
    features: &[FrameFeature],
    k: usize,
    rng: &mut Rng,
    opts: &KMeansOptions,
) -> Result<KeyframeSelection> {
    let n = features.len();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k={k} exceeds the {n} available frames")));
    }
    if opts.max_iter == 0 || opts.restarts == 0 {
        return Err(Error::invalid("max_iter and restarts must be at least 1"));
    }
    let dim = features[0].vector.numel();
    if features.iter().any(|f| f.vector.numel() != dim) {
        return Err(Error::shape("select_keyframes", "feature lengths differ within a clip"));
    }
    if n == k {
        let mut indices: Vec<usize> = features.iter().map(|f| f.frame_index).collect();
        indices.sort_unstable();
        return Ok(KeyframeSelection {
            indices,
            assignments: (0..n).collect(),
            inertia: 0.0,
            iterations: 0,
            inertia_history: vec![0.0],
        });
    }
    let points: Vec<&[f64]> = features.iter().map(|f| f.vector.data()).collect();
    let mut best: Option<Run> = None;
    for _ in 0..opts.restarts {
        let run = lloyd(&points, k, opts.max_iter, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    let mut reps: Vec<Option<usize>> = vec![None; k];
    for (i, (p, &l)) in points.iter().zip(&run.labels).enumerate() {
        let d = sq_dist(p, &run.centers[l]);
        let better = match reps[l] {
            None => true,
            Some(j) => {
                let dj = sq_dist(points[j], &run.centers[l]);
                d < dj || (d == dj && features[i].frame_index < features[j].frame_index)
            }
        };
        if better {
            reps[l] = Some(i);
        }
    }
    // Empty clusters (possible with duplicated features) take the unused
    // frame farthest from its own centroid.
    for slot in 0..k {
        if reps[slot].is_some() {
            continue;
        }
        let used: Vec<usize> = reps.iter().flatten().copied().collect();
        let mut pick: Option<(usize, f64)> = None;
        for (i, (p, &l)) in points.iter().zip(&run.labels).enumerate() {
            if used.contains(&i) {
                continue;
            }
            let d = sq_dist(p, &run.centers[l]);
            if pick.is_none_or(|(_, bd)| d > bd) {
                pick = Some((i, d));
            }
        }
        reps[slot] = pick.map(|(i, _)| i);
    }
    let mut indices: Vec<usize> = reps
        .into_iter()
        .map(|r| features[r.expect("k <= n leaves a frame per cluster")].frame_index)
        .collect();
    indices.sort_unstable();
    Ok(KeyframeSelection {
        indices,
        assignments: run.labels,
        inertia: run.inertia,
        iterations: run.iterations,
        inertia_history: run.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn feats(points: &[Vec<f64>]) -> Vec<FrameFeature> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| FrameFeature {
                vector: Tensor::from_vec(p.clone()),
                frame_index: i,
            })
            .collect()
    }

    #[test]
    fn n_equals_k_is_identity() {
        let f = feats(&(0..8).map(|i| vec![i as f64, 0.0]).collect::<Vec<_>>());
        let s = select_keyframes(&f, 8, &mut Rng::new(0), 10).unwrap();
        assert_eq!(s.indices, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn separated_duplicates() {
        let mut pts = vec![vec![0.0, 0.0]; 4];
        pts.extend(vec![vec![10.0, 10.0]; 4]);
        let s = select_keyframes(&feats(&pts), 2, &mut Rng::new(3), 10).unwrap();
        assert_eq!(s.inertia, 0.0);
        assert!(s.indices[0] < 4 && s.indices[1] >= 4);
        // lowest frame index wins ties inside each group
        assert_eq!(s.indices, vec![0, 4]);
    }

    #[test]
    fn more_clusters_than_distinct_points() {
        let pts = vec![vec![1.0], vec![1.0], vec![1.0], vec![5.0]];
        let s = select_keyframes(&feats(&pts), 3, &mut Rng::new(1), 10).unwrap();
        assert_eq!(s.indices.len(), 3);
        assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(s.indices.contains(&3));
    }

    #[test]
    fn errors() {
        let f = feats(&[vec![0.0], vec![1.0]]);
        assert!(select_keyframes(&f, 3, &mut Rng::new(0), 10).is_err());
        assert!(select_keyframes(&f, 0, &mut Rng::new(0), 10).is_err());
        assert!(select_keyframes(&f, 1, &mut Rng::new(0), 0).is_err());
    }

    #[test]
    fn representative_is_nearest_member() {
        let mut rng = Rng::new(9);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let s = select_keyframes(&feats(&pts), 4, &mut Rng::new(2), 50).unwrap();
        for &idx in &s.indices {
            let c = s.assignments[idx];
            let members: Vec<usize> = (0..30).filter(|&i| s.assignments[i] == c).collect();
            let dim = 2;
            let centroid: Vec<f64> = (0..dim)
                .map(|d| members.iter().map(|&i| pts[i][d]).sum::<f64>() / members.len() as f64)
                .collect();
            let di = sq_dist(&pts[idx], &centroid);
            for &m in &members {
                assert!(sq_dist(&pts[m], &centroid) >= di);
            }
        }
    }
}
