//! k-means over subject-level `theta_hat`; centroids become the group-level
//! `theta_tilde`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<u32, usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    #[serde(default)]
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn assign(&self, theta: &[f64]) -> Result<usize> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension(format!("theta has {} values, centroids have {}", theta.len(), self.dim())));
        }
        Ok(nearest(&self.centroids, theta).0)
    }

    pub fn centroid_of(&self, subject: u32) -> Option<&[f64]> {
        self.assignment.get(&subject).map(|&c| self.centroids[c].as_slice())
    }

    /// Subjects per cluster index.
    pub fn members(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.k];
        for (&s, &c) in &self.assignment {
            out[c].push(s);
        }
        out
    }
}

/// Lloyd's algorithm from a k-means++ start. Points are visited in
/// ascending subject order so the result does not depend on input order.
pub fn fit_kmeans(points: &BTreeMap<u32, Vec<f64>>, k: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::Precondition(format!("{} points for k = {k}", points.len())));
    }
    let ids: Vec<u32> = points.keys().copied().collect();
    let xs: Vec<&[f64]> = points.values().map(Vec::as_slice).collect();
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::Dimension("points have differing dimensions".into()));
    }

    let mut rng = seeded(seed);
    let mut centroids = vec![xs[rng.gen_range(0..xs.len())].to_vec()];
    while centroids.len() < k {
        let d2: Vec<f64> = xs.iter().map(|x| nearest(&centroids, x).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = xs.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.gen_range(0..xs.len())
        };
        centroids.push(xs[pick].to_vec());
    }

    let mut labels: Vec<usize> = xs.iter().map(|x| nearest(&centroids, x).0).collect();
    let mut trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in xs.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = xs.iter().map(|x| nearest(&centroids, x).0).collect();
        trace.push(xs.iter().zip(&next).map(|(x, &l)| sq_dist(x, &centroids[l])).sum());
        if next == labels {
            break;
        }
        labels = next;
    }

    Ok(ClusterModel { k, centroids, assignment: ids.into_iter().zip(labels).collect(), objective_trace: trace })
}

/// Fraction of points whose cluster matches their true label under the
/// best one-to-one relabelling of clusters.
pub fn matched_agreement(clusters: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(clusters.len(), truth.len(), "paired labels");
    if clusters.is_empty() {
        return 1.0;
    }
    let kc = clusters.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let n = kc.max(kt);
    let mut table = vec![vec![0usize; n]; n];
    for (&c, &t) in clusters.iter().zip(truth) {
        table[c][t] += 1;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hit: usize = (0..n).map(|c| table[c][p[c]]).sum();
        best = best.max(hit);
    });
    best as f64 / clusters.len() as f64
}

fn permute(p: &mut [usize], i: usize, f: &mut dyn FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, sep: f64, seed: u64) -> (BTreeMap<u32, Vec<f64>>, Vec<usize>) {
        let mut rng = seeded(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let mut pts = BTreeMap::new();
        let mut labels = Vec::new();
        for i in 0..2 * n {
            let l = i % 2;
            let off = if l == 0 { 0.0 } else { sep };
            pts.insert(i as u32, vec![off + z.sample(&mut rng), z.sample(&mut rng)]);
            labels.push(l);
        }
        (pts, labels)
    }

    #[test]
    fn separated_blobs_are_recovered_exactly() {
        for seed in 0..5 {
            let (pts, labels) = blobs(100, 10.0, seed);
            let m = fit_kmeans(&pts, 2, seed).unwrap();
            let got: Vec<usize> = m.assignment.values().copied().collect();
            assert_eq!(matched_agreement(&got, &labels), 1.0);
        }
    }

    #[test]
    fn single_cluster_centroid_is_global_mean() {
        let (pts, _) = blobs(20, 3.0, 1);
        let m = fit_kmeans(&pts, 1, 0).unwrap();
        let n = pts.len() as f64;
        for j in 0..2 {
            let mean = pts.values().map(|p| p[j]).sum::<f64>() / n;
            assert!((m.centroids[0][j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts: BTreeMap<u32, Vec<f64>> = [(0, vec![1.0])].into_iter().collect();
        assert!(matches!(fit_kmeans(&pts, 2, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = ClusterModel { k: 2, centroids: vec![vec![-1.0], vec![1.0]], assignment: BTreeMap::new(), objective_trace: vec![] };
        assert_eq!(m.assign(&[0.0]).unwrap(), 0);
        assert_eq!(m.assign(&[1.0]).unwrap(), 1);
        assert!(m.assign(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn objective_never_increases_and_assignment_is_stable() {
        let mut rng = seeded(9);
        let pts: BTreeMap<u32, Vec<f64>> =
            (0..300).map(|i| (i, vec![rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 10.0, rng.gen::<f64>()])).collect();
        let m = fit_kmeans(&pts, 5, 3).unwrap();
        for w in m.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        for (s, p) in &pts {
            assert_eq!(m.assign(p).unwrap(), m.assignment[s]);
        }
    }

    #[test]
    fn json_round_trip() {
        let (pts, _) = blobs(10, 10.0, 2);
        let m = fit_kmeans(&pts, 2, 0).unwrap();
        let back: ClusterModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn agreement_is_label_permutation_invariant() {
        assert_eq!(matched_agreement(&[1, 1, 0, 0], &[0, 0, 1, 1]), 1.0);
        assert_eq!(matched_agreement(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
    }
}
