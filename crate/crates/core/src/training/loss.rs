use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, PointCloud};

/// Linear decay of the coarse-loss weight over epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_epochs: usize,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            alpha_start: 0.7,
            alpha_end: 0.1,
            total_epochs: 100,
        }
    }
}

/// Coarse-term weight for a zero-based `epoch`.
pub fn alpha_at(schedule: &LossSchedule, epoch: usize) -> Result<f64> {
    let LossSchedule {
        alpha_start: a,
        alpha_end: b,
        total_epochs: n,
    } = *schedule;
    if epoch >= n {
        return Err(Error::invalid(format!("epoch {epoch} outside 0..{n}")));
    }
    if epoch == 0 || n == 1 {
        return Ok(a);
    }
    if epoch == n - 1 {
        return Ok(b);
    }
    let t = epoch as f64 / (n - 1) as f64;
    Ok((a + (b - a) * t).clamp(a.min(b), a.max(b)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub refined_cd: f64,
    pub coarse_cd: f64,
    pub alpha: f64,
}

/// `CD(refined, gt) + alpha * CD(coarse, gt)`.
pub fn total_loss(coarse: &PointCloud, refined: &PointCloud, gt: &PointCloud, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let refined_cd = chamfer_distance(refined, gt);
    let coarse_cd = chamfer_distance(coarse, gt);
    Ok(LossBreakdown {
        total: refined_cd + alpha * coarse_cd,
        refined_cd,
        coarse_cd,
        alpha,
    })
}
