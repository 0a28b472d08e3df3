//! Density-based clustering over an abstract neighborhood relation.
//!
//! Used for point denoising (Euclidean) and for feature-pool selection
//! (cosine distance).

use alloc::vec;
use alloc::vec::Vec;

/// Cluster label per input element; `None` marks noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    labels: Vec<Option<usize>>,
    clusters: usize,
}

impl Labels {
    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.clusters];
        for c in self.labels.iter().flatten() {
            sizes[*c] += 1;
        }
        sizes
    }

    /// Id of the most populated cluster; ties go to the lower id.
    pub fn largest(&self) -> Option<usize> {
        let sizes = self.sizes();
        let mut best: Option<usize> = None;
        for (c, &s) in sizes.iter().enumerate() {
            if best.map_or(true, |b| s > sizes[b]) {
                best = Some(c);
            }
        }
        best
    }

    /// Element indices belonging to cluster `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(c))
            .map(|(i, _)| i)
            .collect()
    }
}

/// DBSCAN over `n` elements.
///
/// `neighbors(i, out)` must push every element within the radius of `i`,
/// including `i` itself. `min_pts` counts the element itself. `dist` orders
/// candidate core points when a border element is reachable from several
/// clusters: it joins the nearest core neighbor (lower index on ties).
///
/// Core elements form clusters as connected components, so membership does
/// not depend on input order. Cluster ids follow the smallest core index.
pub fn dbscan<N, D>(n: usize, min_pts: usize, mut neighbors: N, dist: D) -> Labels
where
    N: FnMut(usize, &mut Vec<usize>),
    D: Fn(usize, usize) -> f64,
{
    let mut buf = Vec::new();
    let mut core = vec![false; n];
    for (i, c) in core.iter_mut().enumerate() {
        buf.clear();
        neighbors(i, &mut buf);
        *c = buf.len() >= min_pts;
    }

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut clusters = 0;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        let id = clusters;
        clusters += 1;
        labels[seed] = Some(id);
        stack.push(seed);
        while let Some(i) = stack.pop() {
            buf.clear();
            neighbors(i, &mut buf);
            for &j in &buf {
                if core[j] && labels[j].is_none() {
                    labels[j] = Some(id);
                    stack.push(j);
                }
            }
        }
    }

    for i in 0..n {
        if core[i] {
            continue;
        }
        buf.clear();
        neighbors(i, &mut buf);
        let mut best: Option<(f64, usize)> = None;
        for &j in &buf {
            if !core[j] {
                continue;
            }
            let d = dist(i, j);
            let better = match best {
                None => true,
                Some((bd, bj)) => d < bd || (d == bd && j < bj),
            };
            if better {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            labels[i] = labels[j];
        }
    }

    Labels { labels, clusters }
}
