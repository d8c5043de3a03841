use super::cloud::{Point3, PointCloud};
use super::kdtree::KdTree;

/// Per-query nearest neighbour in a target cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct NnResult {
    pub indices: Vec<usize>,
    pub sq_distances: Vec<f64>,
}

/// Squared Euclidean distance. Every search path uses this exact expression so
/// the accelerated and exhaustive searches agree bit for bit.
#[inline]
pub fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exhaustive nearest-neighbour scan; ties go to the lowest target index.
pub fn nn_bruteforce(query: &PointCloud, target: &PointCloud) -> NnResult {
    let mut indices = Vec::with_capacity(query.len());
    let mut sq_distances = Vec::with_capacity(query.len());
    for q in query.points() {
        let mut best = (0usize, f64::INFINITY);
        for (j, t) in target.points().iter().enumerate() {
            let d = sq_dist(q, t);
            if d < best.1 {
                best = (j, d);
            }
        }
        indices.push(best.0);
        sq_distances.push(best.1);
    }
    NnResult {
        indices,
        sq_distances,
    }
}

/// Nearest-neighbour search through a k-d tree over `target`. Distances are
/// identical to [`nn_bruteforce`]; so are indices, since ties also resolve to
/// the lowest target index.
pub fn nn_accelerated(query: &PointCloud, target: &PointCloud) -> NnResult {
    // Tree construction costs more than a scan for tiny targets.
    if target.len() <= 16 {
        return nn_bruteforce(query, target);
    }
    let tree = KdTree::new(target.points());
    let mut indices = Vec::with_capacity(query.len());
    let mut sq_distances = Vec::with_capacity(query.len());
    for q in query.points() {
        let (i, d) = tree.nearest(q);
        indices.push(i);
        sq_distances.push(d);
    }
    NnResult {
        indices,
        sq_distances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[Point3]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_query() {
        let r = nn_bruteforce(&cloud(&[[0.0; 3]]), &cloud(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]));
        assert_eq!(r.indices, vec![0]);
        assert_eq!(r.sq_distances, vec![1.0]);
    }

    #[test]
    fn self_query_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 50);
        for r in [nn_bruteforce(&c, &c), nn_accelerated(&c, &c)] {
            assert!(r.sq_distances.iter().all(|&d| d == 0.0));
            assert_eq!(r.indices, (0..50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let q = cloud(&[[0.5, 0.0, 0.0]]);
        let t = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let r = nn_bruteforce(&q, &t);
        assert_eq!((r.indices[0], r.sq_distances[0]), (0, 0.25));
        let r = nn_accelerated(&q, &t);
        assert_eq!(r.sq_distances[0], 0.25);
    }

    #[test]
    fn matches_independent_pair_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_cloud(&mut rng, 64);
        let t = random_cloud(&mut rng, 64);
        let r = nn_bruteforce(&q, &t);
        for (i, a) in q.points().iter().enumerate() {
            let all: Vec<f64> = t
                .points()
                .iter()
                .map(|b| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                .collect();
            let min = all.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((r.sq_distances[i] - min).abs() <= 1e-12);
            assert_eq!(sq_dist(a, &t.points()[r.indices[i]]), r.sq_distances[i]);
        }
    }

    #[test]
    fn accelerated_handles_grid_ties() {
        // Integer lattice: many exact ties, distances must still agree.
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..6 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let t = cloud(&pts);
        let q = cloud(&[[0.5, 0.5, 0.5], [2.5, 3.0, 1.5], [6.0, 6.0, 6.0], [-1.0, 2.5, 2.5]]);
        assert_eq!(nn_accelerated(&q, &t), nn_bruteforce(&q, &t));
    }
}
