use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// A non-empty, finite, ordered set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::invalid(format!(
                "flat coordinate buffer length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    /// Selects points by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.points.get(i).ok_or_else(|| {
                Error::invalid(format!("index {i} out of range for {} points", self.len()))
            })?;
            out.push(*p);
        }
        Self::new(out)
    }

    /// Applies `(p - center) / scale` to every point.
    pub fn transformed(&self, norm: &Normalization) -> Self {
        Self {
            points: self.points.iter().map(|p| norm.apply(p)).collect(),
        }
    }

    pub fn concat(&self, other: &PointCloud) -> Self {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Self { points }
    }
}

/// Centre and scale that map a cloud into the unit ball.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        [
            p[0] * self.scale + self.center[0],
            p[1] * self.scale + self.center[1],
            p[2] * self.scale + self.center[2],
        ]
    }
}

/// Centres a cloud on its centroid and scales it so the farthest point sits
/// on the unit sphere. Coincident clouds keep `scale = 1`.
pub fn normalize(cloud: &PointCloud) -> (PointCloud, Normalization) {
    let center = cloud.centroid();
    let max_d = cloud
        .points
        .iter()
        .map(|p| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .fold(0.0, f64::max);
    let scale = if max_d < 1e-12 { 1.0 } else { max_d };
    let norm = Normalization { center, scale };
    (cloud.transformed(&norm), norm)
}
