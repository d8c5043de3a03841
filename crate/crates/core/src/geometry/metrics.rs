use crate::error::{Error, Result};

use super::cloud::{Point3, PointCloud};
use super::nn::nn_accelerated;

/// Chamfer distance plus F-score at threshold `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub chamfer: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tau: f64,
}

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance from
/// `p1` to `p2` plus the same from `p2` to `p1`.
pub fn chamfer_distance(p1: &PointCloud, p2: &PointCloud) -> f64 {
    let forward = nn_accelerated(p1, p2);
    let backward = nn_accelerated(p2, p1);
    mean(&forward.sq_distances) + mean(&backward.sq_distances)
}

/// Chamfer distance together with its gradient with respect to every
/// coordinate of both clouds.
#[derive(Clone, Debug)]
pub struct ChamferGrad {
    pub value: f64,
    pub grad_p1: Vec<Point3>,
    pub grad_p2: Vec<Point3>,
}

/// The distance is piecewise quadratic in the coordinates: with the nearest
/// neighbour assignment held fixed, each term `|x - y|^2 / n` contributes
/// `2 (x - y) / n` to `x` and the negation to `y`.
pub fn chamfer_with_grad(p1: &PointCloud, p2: &PointCloud) -> ChamferGrad {
    let (a, b) = (p1.points(), p2.points());
    let forward = nn_accelerated(p1, p2);
    let backward = nn_accelerated(p2, p1);
    let mut grad_p1 = vec![[0.0; 3]; a.len()];
    let mut grad_p2 = vec![[0.0; 3]; b.len()];

    let w1 = 2.0 / a.len() as f64;
    for (i, &j) in forward.indices.iter().enumerate() {
        for k in 0..3 {
            let g = w1 * (a[i][k] - b[j][k]);
            grad_p1[i][k] += g;
            grad_p2[j][k] -= g;
        }
    }
    let w2 = 2.0 / b.len() as f64;
    for (j, &i) in backward.indices.iter().enumerate() {
        for k in 0..3 {
            let g = w2 * (b[j][k] - a[i][k]);
            grad_p2[j][k] += g;
            grad_p1[i][k] -= g;
        }
    }
    ChamferGrad {
        value: mean(&forward.sq_distances) + mean(&backward.sq_distances),
        grad_p1,
        grad_p2,
    }
}

/// F-score at `tau`: precision is the fraction of predicted points whose
/// squared distance to the nearest ground-truth point is `< tau`, recall the
/// same from ground truth to prediction. The Chamfer distance is filled in
/// from the same neighbour queries.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<MetricReport> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau must be positive and finite, got {tau}")));
    }
    let forward = nn_accelerated(pred, gt);
    let backward = nn_accelerated(gt, pred);
    let precision = fraction_below(&forward.sq_distances, tau);
    let recall = fraction_below(&backward.sq_distances, tau);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricReport {
        chamfer: mean(&forward.sq_distances) + mean(&backward.sq_distances),
        f1,
        precision,
        recall,
        tau,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fraction_below(v: &[f64], tau: f64) -> f64 {
    v.iter().filter(|&&d| d < tau).count() as f64 / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[Point3]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn hand_forced_chamfer_values() {
        let o = cloud(&[[0.0; 3]]);
        let x = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&o, &x), 2.0);
        let two = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&two, &o), 0.5);
        assert_eq!(chamfer_distance(&two, &two), 0.0);
    }

    #[test]
    fn fscore_cases() {
        let o = cloud(&[[0.0; 3]]);
        let x = cloud(&[[1.0, 0.0, 0.0]]);
        let two = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);

        let r = fscore(&two, &two, 0.001).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let r = fscore(&o, &x, 0.001).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        let r = fscore(&two, &o, 0.001).unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_strict() {
        let o = cloud(&[[0.0; 3]]);
        let x = cloud(&[[0.5, 0.0, 0.0]]);
        assert_eq!(fscore(&o, &x, 0.25).unwrap().f1, 0.0);
        assert_eq!(fscore(&o, &x, 0.250001).unwrap().f1, 1.0);
    }

    #[test]
    fn rejects_bad_tau() {
        let o = cloud(&[[0.0; 3]]);
        for tau in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(fscore(&o, &o, tau), Err(Error::InvalidInput(_))));
        }
    }

    #[test]
    fn grad_of_single_pair() {
        let g = chamfer_with_grad(&cloud(&[[0.0; 3]]), &cloud(&[[1.0, 0.0, 0.0]]));
        assert_eq!(g.value, 2.0);
        assert_eq!(g.grad_p1, vec![[-4.0, 0.0, 0.0]]);
        assert_eq!(g.grad_p2, vec![[4.0, 0.0, 0.0]]);
    }
}
