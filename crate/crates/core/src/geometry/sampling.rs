use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::cloud::PointCloud;
use super::nn::sq_dist;

fn check_k(cloud: &PointCloud, k: usize) -> Result<()> {
    if k == 0 || k > cloud.len() {
        return Err(Error::invalid(format!(
            "sample size {k} must be in 1..={}",
            cloud.len()
        )));
    }
    Ok(())
}

/// Farthest point sampling with the first point drawn from `seed`.
pub fn fps_indices(cloud: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_k(cloud, k)?;
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    fps_indices_from(cloud, k, first)
}

/// Farthest point sampling from a fixed first index. Each further pick
/// maximises the squared distance to the selected set; ties go to the lowest
/// index.
pub fn fps_indices_from(cloud: &PointCloud, k: usize, first: usize) -> Result<Vec<usize>> {
    check_k(cloud, k)?;
    let pts = cloud.points();
    if first >= pts.len() {
        return Err(Error::invalid(format!("first index {first} out of range")));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; pts.len()];
    let mut current = first;
    for _ in 0..k {
        selected.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let mut next = (0usize, f64::NEG_INFINITY);
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = sq_dist(p, &pts[current]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > next.1 {
                next = (i, min_d[i]);
            }
        }
        current = next.0;
    }
    Ok(selected)
}

pub fn fps_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    cloud.select(&fps_indices(cloud, k, seed)?)
}

/// Seeded uniform sampling without replacement.
pub fn uniform_indices(cloud: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_k(cloud, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, cloud.len(), k).into_vec())
}

pub fn uniform_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    cloud.select(&uniform_indices(cloud, k, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn full_sample_is_permutation() {
        let c = random_cloud(40, 1);
        let mut idx = fps_indices(&c, 40, 7).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn farthest_point_is_forced() {
        let c = PointCloud::new(vec![[0.0; 3], [10.0, 0.0, 0.0], [0.1, 0.0, 0.0]]).unwrap();
        let s = c.select(&fps_indices_from(&c, 2, 0).unwrap()).unwrap();
        assert_eq!(s.points(), &[[0.0; 3], [10.0, 0.0, 0.0]]);
    }

    #[test]
    fn each_pick_maximises_min_distance() {
        let c = random_cloud(256, 2);
        let idx = fps_indices(&c, 64, 11).unwrap();
        let pts = c.points();
        for step in 1..idx.len() {
            let history = &idx[..step];
            let min_to = |p: &Point3| {
                history
                    .iter()
                    .map(|&h| sq_dist(p, &pts[h]))
                    .fold(f64::INFINITY, f64::min)
            };
            let chosen = min_to(&pts[idx[step]]);
            for (i, p) in pts.iter().enumerate() {
                if !history.contains(&i) {
                    assert!(min_to(p) <= chosen, "step {step}: point {i} is farther");
                }
            }
        }
    }

    #[test]
    fn rejects_oversized_k() {
        let c = random_cloud(5, 3);
        assert!(fps_indices(&c, 6, 0).is_err());
        assert!(fps_indices(&c, 0, 0).is_err());
        assert!(uniform_indices(&c, 6, 0).is_err());
    }

    #[test]
    fn uniform_is_seeded_subset() {
        let c = random_cloud(100, 4);
        let a = uniform_indices(&c, 30, 5).unwrap();
        assert_eq!(a, uniform_indices(&c, 30, 5).unwrap());
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 30);
        assert!(s.iter().all(|&i| i < 100));
    }
}
