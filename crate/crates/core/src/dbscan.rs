//! DBSCAN over low-dimensional points with a uniform grid index for
//! neighborhood queries.
//!
//! Cluster ids are assigned in point-index order, so results are fully
//! deterministic for a fixed input.

use std::collections::HashMap;

/// Cluster labels: `Some(id)` for clustered points, `None` for noise.
pub type Labels = Vec<Option<usize>>;

/// Run DBSCAN with Euclidean distance over `D`-dimensional points.
///
/// A point is a core point if at least `min_pts` points (itself included)
/// lie within `eps`. Border points join the cluster of the first core point
/// that reaches them.
pub fn dbscan<const D: usize>(points: &[[f64; D]], eps: f64, min_pts: usize) -> Labels {
    assert!(eps > 0.0, "eps must be positive");
    let n = points.len();
    let mut labels: Labels = vec![None; n];
    if n == 0 {
        return labels;
    }

    let index = GridIndex::build(points, eps);
    let eps_sq = eps * eps;

    let mut visited = vec![false; n];
    let mut cluster = 0usize;
    let mut neighbors = Vec::new();
    let mut frontier = Vec::new();

    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        index.query(points, start, eps_sq, &mut neighbors);
        if neighbors.len() < min_pts {
            continue; // provisional noise; may become a border point later
        }
        labels[start] = Some(cluster);
        frontier.clear();
        frontier.extend(neighbors.iter().copied());
        let mut cursor = 0;
        while cursor < frontier.len() {
            let p = frontier[cursor];
            cursor += 1;
            if labels[p].is_none() {
                labels[p] = Some(cluster);
            }
            if visited[p] {
                continue;
            }
            visited[p] = true;
            index.query(points, p, eps_sq, &mut neighbors);
            if neighbors.len() >= min_pts {
                frontier.extend(neighbors.iter().copied());
            }
        }
        cluster += 1;
    }
    labels
}

struct GridIndex<const D: usize> {
    cell_size: f64,
    cells: HashMap<[i64; D], Vec<usize>>,
}

impl<const D: usize> GridIndex<D> {
    fn build(points: &[[f64; D]], eps: f64) -> Self {
        let mut cells: HashMap<[i64; D], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, eps)).or_default().push(i);
        }
        Self {
            cell_size: eps,
            cells,
        }
    }

    fn key(p: &[f64; D], cell: f64) -> [i64; D] {
        let mut k = [0i64; D];
        for (d, v) in p.iter().enumerate() {
            k[d] = (v / cell).floor() as i64;
        }
        k
    }

    /// Indices within sqrt(eps_sq) of `points[idx]`, including `idx` itself.
    fn query<'a>(
        &self,
        points: &[[f64; D]],
        idx: usize,
        eps_sq: f64,
        out: &mut Vec<usize>,
    ) {
        out.clear();
        let center = &points[idx];
        let base = Self::key(center, self.cell_size);
        let mut offset = [0i64; D];
        self.visit_cells(points, center, base, 0, &mut offset, eps_sq, out);
        out.sort_unstable();
    }

    fn visit_cells(
        &self,
        points: &[[f64; D]],
        center: &[f64; D],
        base: [i64; D],
        dim: usize,
        offset: &mut [i64; D],
        eps_sq: f64,
        out: &mut Vec<usize>,
    ) {
        if dim == D {
            let mut key = base;
            for d in 0..D {
                key[d] += offset[d];
            }
            if let Some(members) = self.cells.get(&key) {
                for &i in members {
                    let mut dist = 0.0;
                    for d in 0..D {
                        let delta = points[i][d] - center[d];
                        dist += delta * delta;
                    }
                    if dist <= eps_sq {
                        out.push(i);
                    }
                }
            }
            return;
        }
        for delta in -1..=1 {
            offset[dim] = delta;
            self.visit_cells(points, center, base, dim + 1, offset, eps_sq, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive O(n^2) DBSCAN used as an independent oracle.
    pub fn dbscan_oracle<const D: usize>(
        points: &[[f64; D]],
        eps: f64,
        min_pts: usize,
    ) -> Labels {
        let n = points.len();
        let dist_sq = |a: &[f64; D], b: &[f64; D]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let neighbors = |i: usize| -> Vec<usize> {
            (0..n)
                .filter(|&j| dist_sq(&points[i], &points[j]) <= eps * eps)
                .collect()
        };
        let mut labels: Labels = vec![None; n];
        let mut visited = vec![false; n];
        let mut cluster = 0;
        for start in 0..n {
            if visited[start] {
                continue;
            }
            visited[start] = true;
            let nb = neighbors(start);
            if nb.len() < min_pts {
                continue;
            }
            labels[start] = Some(cluster);
            let mut queue = nb;
            let mut k = 0;
            while k < queue.len() {
                let p = queue[k];
                k += 1;
                if labels[p].is_none() {
                    labels[p] = Some(cluster);
                }
                if visited[p] {
                    continue;
                }
                visited[p] = true;
                let nb = neighbors(p);
                if nb.len() >= min_pts {
                    queue.extend(nb);
                }
            }
            cluster += 1;
        }
        labels
    }

    fn same_partition(a: &Labels, b: &Labels) -> bool {
        if a.len() != b.len() {
            return false;
        }
        // noise must agree; clusters must be the same partition up to relabeling
        let mut map = std::collections::HashMap::new();
        for (x, y) in a.iter().zip(b) {
            match (x, y) {
                (None, None) => {}
                (Some(i), Some(j)) => {
                    let entry = map.entry(*i).or_insert(*j);
                    if entry != j {
                        return false;
                    }
                }
                _ => return false,
            }
        }
        true
    }

    #[test]
    fn two_blobs_and_noise() {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for i in 0..20 {
            pts.push([i as f64 * 0.1, 0.0]);
        }
        for i in 0..20 {
            pts.push([50.0 + i as f64 * 0.1, 0.0]);
        }
        pts.push([200.0, 200.0]); // lone noise point
        let labels = dbscan(&pts, 0.5, 4);
        assert_eq!(labels[0], Some(0));
        assert_eq!(labels[19], Some(0));
        assert_eq!(labels[20], Some(1));
        assert_eq!(labels[40], None);
    }

    #[test]
    fn matches_oracle_on_scattered_points() {
        // deterministic pseudo-random scatter
        let mut state = 0x12345678u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64)
        };
        let pts: Vec<[f64; 3]> = (0..300)
            .map(|_| [next() * 20.0, next() * 20.0, next() * 20.0])
            .collect();
        for (eps, min_pts) in [(1.0, 3), (2.5, 5), (4.0, 8)] {
            let fast = dbscan(&pts, eps, min_pts);
            let slow = dbscan_oracle(&pts, eps, min_pts);
            assert!(same_partition(&fast, &slow), "eps={eps} min_pts={min_pts}");
        }
    }

    #[test]
    fn empty_input() {
        let pts: Vec<[f64; 2]> = Vec::new();
        assert!(dbscan(&pts, 1.0, 3).is_empty());
    }
}
