use super::{sq_dist, Point};
use crate::error::{Error, Result};

/// Greedy max-min subsampling. Starting from `start`, repeatedly takes the
/// not-yet-chosen point whose squared distance to the chosen set is largest,
/// lowest index first on ties.
pub fn farthest_point_sample(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::Argument(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::Argument(format!("start index {start} out of range")));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = start;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == m {
            break;
        }
        let c = points[cur];
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = sq_dist(&points[i], &c);
            if d < dist[i] {
                dist[i] = d;
            }
            if !taken[i] && best.is_none_or(|b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        cur = best.expect("m <= n leaves an untaken point");
    }
    Ok(chosen)
}

/// Row-major `rows x k` table of point indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    pub k: usize,
    pub idx: Vec<usize>,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        self.idx.len() / self.k
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.idx[r * self.k..(r + 1) * self.k]
    }
}

/// Indices of the `k` nearest reference points per query, ordered by
/// squared distance then index, together with those squared distances.
pub(crate) fn knn_with_dist(queries: &[Point], reference: &[Point], k: usize) -> Result<(NeighborTable, Vec<f64>)> {
    if k == 0 || k > reference.len() {
        return Err(Error::Argument(format!("k = {k} with {} reference points", reference.len())));
    }
    let mut idx = Vec::with_capacity(queries.len() * k);
    let mut dists = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for q in queries {
        scratch.clear();
        scratch.extend(reference.iter().enumerate().map(|(j, r)| (sq_dist(q, r), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        scratch[..k].sort_unstable_by(cmp);
        for &(d, j) in &scratch[..k] {
            idx.push(j);
            dists.push(d);
        }
    }
    Ok((NeighborTable { k, idx }, dists))
}

pub fn knn_indices(queries: &[Point], reference: &[Point], k: usize) -> Result<NeighborTable> {
    knn_with_dist(queries, reference, k).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_exhaustive_and_square() {
        let sq = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(farthest_point_sample(&sq, 2, 0).unwrap(), vec![0, 3]);
        let all = farthest_point_sample(&sq, 4, 0).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        // after (0,0),(1,1) both remaining corners are at distance 1: lowest index wins
        assert_eq!(all, vec![0, 3, 1, 2]);
        assert!(farthest_point_sample(&sq, 5, 0).is_err());
    }

    #[test]
    fn fps_duplicates_never_repeat_an_index() {
        let pts = [[0.5; 3]; 6];
        let s = farthest_point_sample(&pts, 6, 2).unwrap();
        assert_eq!(s, vec![2, 0, 1, 3, 4, 5]);
    }

    #[test]
    fn knn_small_cases() {
        let r = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(knn_indices(&[[0.0, 0.0, 0.0]], &r, 2).unwrap().idx, vec![0, 1]);
        assert_eq!(knn_indices(&[[2.0, 0.0, 0.0]], &r, 1).unwrap().idx, vec![2]);
        // equidistant: lower index first
        assert_eq!(knn_indices(&[[1.0, 0.0, 0.0]], &r, 3).unwrap().idx, vec![1, 0, 2]);
        assert!(knn_indices(&[[0.0; 3]], &r, 4).is_err());
    }
}
