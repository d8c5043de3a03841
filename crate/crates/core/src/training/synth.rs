//! Procedural shapes standing in for a real completion benchmark: surface
//! sampling, half-space occlusion and an orthographic depth-shaded render.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::geometry::{normalize, Normalization, Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Torus,
}

impl ShapeKind {
    pub const ALL: [Self; 4] = [Self::Sphere, Self::Box, Self::Cylinder, Self::Torus];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Box => "box",
            Self::Cylinder => "cylinder",
            Self::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape dimensions in object space. Box extents are full side lengths; the
/// cylinder axis and torus symmetry axis are `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Self::Sphere { .. } => ShapeKind::Sphere,
            Self::Box { .. } => ShapeKind::Box,
            Self::Cylinder { .. } => ShapeKind::Cylinder,
            Self::Torus { .. } => ShapeKind::Torus,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Sphere { radius } => radius > 0.0 && radius.is_finite(),
            Self::Box { extents } => extents.iter().all(|&e| e > 0.0 && e.is_finite()),
            Self::Cylinder { radius, height } => radius > 0.0 && height > 0.0 && (radius + height).is_finite(),
            Self::Torus { major, minor } => minor > 0.0 && major > minor && major.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate shape parameters {self:?}")))
        }
    }

    /// Signed distance in object space.
    fn sdf(&self, p: Point3) -> f64 {
        match *self {
            Self::Sphere { radius } => norm(p) - radius,
            Self::Box { extents } => {
                let q = [0, 1, 2].map(|a| p[a].abs() - extents[a] / 2.0);
                let outside = norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Self::Cylinder { radius, height } => {
                let d = [p[0].hypot(p[1]) - radius, p[2].abs() - height / 2.0];
                d[0].max(d[1]).min(0.0) + d[0].max(0.0).hypot(d[1].max(0.0))
            }
            Self::Torus { major, minor } => (p[0].hypot(p[1]) - major).hypot(p[2]) - minor,
        }
    }

    /// Area-weighted sample on the surface.
    fn sample_surface(&self, rng: &mut impl Rng) -> Point3 {
        match *self {
            Self::Sphere { radius } => {
                let v = loop {
                    let v: Point3 = [0; 3].map(|_| StandardNormal.sample(rng));
                    if norm(v) > 1e-12 {
                        break v;
                    }
                };
                let n = norm(v);
                v.map(|c| c * radius / n)
            }
            Self::Box { extents: [a, b, c] } => {
                let areas = [b * c, a * c, a * b];
                let axis = pick_weighted(&areas, rng);
                let mut p = [a, b, c].map(|e| (rng.random::<f64>() - 0.5) * e);
                let e = [a, b, c][axis];
                p[axis] = if rng.random::<bool>() { e / 2.0 } else { -e / 2.0 };
                p
            }
            Self::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let theta = rng.random::<f64>() * 2.0 * PI;
                match pick_weighted(&[side, cap, cap], rng) {
                    0 => [
                        radius * theta.cos(),
                        radius * theta.sin(),
                        (rng.random::<f64>() - 0.5) * height,
                    ],
                    k => {
                        let r = radius * rng.random::<f64>().sqrt();
                        let z = if k == 1 { height / 2.0 } else { -height / 2.0 };
                        [r * theta.cos(), r * theta.sin(), z]
                    }
                }
            }
            Self::Torus { major, minor } => loop {
                let u = rng.random::<f64>() * 2.0 * PI;
                let v = rng.random::<f64>() * 2.0 * PI;
                let ring = major + minor * v.cos();
                if rng.random::<f64>() * (major + minor) <= ring {
                    break [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                }
            },
        }
    }
}

/// A shape placed by a rotation about its centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub shape: Shape,
    /// Row-major rotation taking object space to world space.
    pub rotation: [[f64; 3]; 3],
}

impl ShapeParams {
    pub fn axis_aligned(shape: Shape) -> Self {
        Self {
            shape,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Random dimensions and orientation for `kind`.
    pub fn random(kind: ShapeKind, rng: &mut impl Rng) -> Self {
        let shape = match kind {
            ShapeKind::Sphere => Shape::Sphere {
                radius: rng.random_range(0.5..1.0),
            },
            ShapeKind::Box => Shape::Box {
                extents: [0; 3].map(|_| rng.random_range(0.4..1.2)),
            },
            ShapeKind::Cylinder => Shape::Cylinder {
                radius: rng.random_range(0.25..0.6),
                height: rng.random_range(0.6..1.6),
            },
            ShapeKind::Torus => {
                let major = rng.random_range(0.5..0.8);
                Shape::Torus {
                    major,
                    minor: rng.random_range(0.12f64..0.3).min(major * 0.6),
                }
            }
        };
        Self {
            shape,
            rotation: random_rotation(rng),
        }
    }

    fn to_world(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
    }

    fn to_object(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[0][i] * p[0] + r[1][i] * p[1] + r[2][i] * p[2])
    }
}

/// Camera direction from spherical angles in radians. The camera looks along
/// `direction()`, towards the object centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub azimuth: f64,
    pub elevation: f64,
}

impl View {
    pub const COUNT: usize = 24;

    /// One of a fixed ring of views, alternating between two elevations.
    pub fn from_id(id: usize) -> Self {
        Self {
            azimuth: 2.0 * PI * (id % Self::COUNT) as f64 / Self::COUNT as f64,
            elevation: if id % 2 == 0 { 25f64.to_radians() } else { -10f64.to_radians() },
        }
    }

    pub fn direction(&self) -> Point3 {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        // Camera sits at (ce*ca, ce*sa, se) and looks back at the origin.
        [-ce * ca, -ce * sa, -se]
    }

    /// Image-plane right and up vectors.
    fn basis(&self) -> (Point3, Point3) {
        let d = self.direction();
        let world_up = if d[2].abs() > 0.999 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let right = unit(cross(d, world_up));
        let up = cross(right, d);
        (right, up)
    }
}

/// One training example. `gt` is normalized; `partial` lives in the same
/// frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: ImageTensor,
    pub partial: PointCloud,
    pub gt: PointCloud,
    pub category: ShapeKind,
    pub view_id: usize,
    pub seed: u64,
}

/// Half-width of the square image window in normalized units.
pub const RENDER_EXTENT: f64 = 1.1;
/// Upper bound on the jitter norm of re-padded partial points.
pub const JITTER: f64 = 1e-3;

/// Generates the gt cloud, partial cloud and image for one shape and view.
pub fn synth_sample(
    params: &ShapeParams,
    view_id: usize,
    seed: u64,
    n_points: usize,
    image_size: (usize, usize),
) -> Result<TrainSample> {
    params.shape.validate()?;
    if n_points == 0 {
        return Err(Error::invalid("n_points must be positive"));
    }
    let view = View::from_id(view_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Point3> = (0..n_points)
        .map(|_| params.to_world(params.shape.sample_surface(&mut rng)))
        .collect();
    let (gt, frame) = normalize(&PointCloud::new(raw)?);

    let dir = view.direction();
    let visible: Vec<Point3> = gt.points().iter().copied().filter(|p| dot(*p, dir) <= 0.0).collect();
    if visible.is_empty() {
        return Err(Error::invalid("no surface points face the camera"));
    }
    let mut partial = visible.clone();
    while partial.len() < n_points {
        let src = visible[rng.random_range(0..visible.len())];
        let j: Point3 = [0; 3].map(|_| StandardNormal.sample(&mut rng));
        let r = JITTER * rng.random::<f64>() / norm(j).max(1e-12);
        partial.push([src[0] + j[0] * r, src[1] + j[1] * r, src[2] + j[2] * r]);
    }
    let image = render(params, &frame, &view, image_size.0, image_size.1)?;
    Ok(TrainSample {
        image,
        partial: PointCloud::new(partial)?,
        gt,
        category: params.shape.kind(),
        view_id,
        seed,
    })
}

/// Orthographic sphere-traced render of the normalized shape over
/// `[-RENDER_EXTENT, RENDER_EXTENT]^2`. Hits are shaded by depth, the
/// background is black.
pub fn render(params: &ShapeParams, frame: &Normalization, view: &View, height: usize, width: usize) -> Result<ImageTensor> {
    let dir = view.direction();
    let (right, up) = view.basis();
    let scale = frame.scale;
    // Signed distance in the normalized frame.
    let sdf = |p: Point3| {
        let w = [0, 1, 2].map(|a| p[a] * scale + frame.center[a]);
        params.shape.sdf(params.to_object(w)) / scale
    };
    const START: f64 = 3.0;
    let mut pixels = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        let v = RENDER_EXTENT * (1.0 - 2.0 * (r as f64 + 0.5) / height as f64);
        for c in 0..width {
            let u = RENDER_EXTENT * (2.0 * (c as f64 + 0.5) / width as f64 - 1.0);
            let origin = [0, 1, 2].map(|a| u * right[a] + v * up[a] - START * dir[a]);
            let mut t = 0.0;
            let mut hit = None;
            for _ in 0..256 {
                let p = [0, 1, 2].map(|a| origin[a] + t * dir[a]);
                let d = sdf(p);
                if d < 1e-5 {
                    hit = Some(t);
                    break;
                }
                t += d;
                if t > 2.0 * START {
                    break;
                }
            }
            // Depth runs from START - 1 (nearest possible) to START + 1.
            let shade = hit.map_or(0.0, |t| (0.25 + 0.75 * (START + 1.0 - t) / 2.0).clamp(0.25, 1.0)) as f32;
            pixels.extend([shade; 3]);
        }
    }
    ImageTensor::new(height, width, pixels)
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    // Uniform unit quaternion.
    let q: [f64; 4] = loop {
        let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: Point3) -> Point3 {
    let n = norm(a);
    a.map(|v| v / n)
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_partial_is_camera_facing_hemisphere() {
        let params = ShapeParams::axis_aligned(Shape::Sphere { radius: 1.0 });
        for view_id in [0, 5, 13] {
            let s = synth_sample(&params, view_id, 7, 2048, (16, 16)).unwrap();
            assert_eq!(s.partial.len(), 2048);
            assert_eq!(s.gt.len(), 2048);
            let dir = View::from_id(view_id).direction();
            assert!(s.partial.points().iter().all(|p| dot(*p, dir) <= JITTER));
            let mean_norm = s.gt.points().iter().map(|p| norm(*p)).sum::<f64>() / 2048.0;
            assert!((mean_norm - 1.0).abs() < 2e-2, "{mean_norm}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in ShapeKind::ALL {
            let params = ShapeParams::random(kind, &mut rng);
            let a = synth_sample(&params, 3, 11, 256, (16, 16)).unwrap();
            let b = synth_sample(&params, 3, 11, 256, (16, 16)).unwrap();
            assert_eq!(a, b);
            let c = synth_sample(&params, 3, 12, 256, (16, 16)).unwrap();
            assert_ne!(a.gt, c.gt);
        }
    }

    #[test]
    fn samples_lie_on_surfaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in ShapeKind::ALL {
            let params = ShapeParams::random(kind, &mut rng);
            for _ in 0..500 {
                let p = params.shape.sample_surface(&mut rng);
                assert!(params.shape.sdf(p).abs() < 1e-9, "{kind} {p:?}");
            }
        }
    }

    #[test]
    fn cylinder_and_box_face_areas_are_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::Cylinder { radius: 0.5, height: 1.0 };
        let n = 20000;
        let caps = (0..n)
            .filter(|_| shape.sample_surface(&mut rng)[2].abs() == 0.5)
            .count() as f64
            / n as f64;
        // Caps: 2 * pi r^2 / (2 pi r h + 2 pi r^2) = 1/3.
        assert!((caps - 1.0 / 3.0).abs() < 0.02, "{caps}");
    }

    fn box_silhouette_fraction(extents: [f64; 3], rng: &mut ChaCha8Rng, res: usize) -> (f64, f64) {
        let params = ShapeParams {
            shape: Shape::Box { extents },
            rotation: random_rotation(rng),
        };
        let view = View::from_id(rng.random_range(0..View::COUNT));
        // The normalization frame of a dense sample of the box.
        let raw: Vec<Point3> = (0..4096).map(|_| params.to_world(params.shape.sample_surface(rng))).collect();
        let (_, frame) = normalize(&PointCloud::new(raw).unwrap());
        let img = render(&params, &frame, &view, res, res).unwrap();
        let lit = img.pixels().chunks(3).filter(|p| p[0] > 0.0).count() as f64 / (res * res) as f64;
        // Projected area of a box along unit d (object frame): sum over axes
        // of |d_i| times the area of the face normal to axis i.
        let d = params.to_object(view.direction());
        let [a, b, c] = extents;
        let area = d[0].abs() * b * c + d[1].abs() * a * c + d[2].abs() * a * b;
        let expected = area / (frame.scale * frame.scale) / (2.0 * RENDER_EXTENT).powi(2);
        (lit, expected)
    }

    #[test]
    fn unit_box_silhouette_matches_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for res in [32, 64] {
            for _ in 0..6 {
                let (lit, expected) = box_silhouette_fraction([1.0, 1.0, 1.0], &mut rng, res);
                assert!((lit - expected).abs() / expected < 0.05, "res {res}: {lit} vs {expected}");
            }
        }
        let (lit, expected) = box_silhouette_fraction([0.5, 1.0, 0.8], &mut rng, 64);
        assert!((lit - expected).abs() / expected < 0.05, "{lit} vs {expected}");
    }

    #[test]
    fn degenerate_params_rejected() {
        for shape in [
            Shape::Sphere { radius: 0.0 },
            Shape::Box { extents: [1.0, -1.0, 1.0] },
            Shape::Cylinder { radius: 1.0, height: 0.0 },
            Shape::Torus { major: 0.2, minor: 0.3 },
        ] {
            let r = synth_sample(&ShapeParams::axis_aligned(shape), 0, 0, 64, (8, 8));
            assert!(matches!(r, Err(Error::InvalidInput(_))), "{shape:?}");
        }
    }

    #[test]
    fn image_has_foreground_and_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in ShapeKind::ALL {
            let params = ShapeParams::random(kind, &mut rng);
            let s = synth_sample(&params, 2, 1, 512, (32, 32)).unwrap();
            let lit = s.image.pixels().iter().filter(|&&v| v > 0.0).count();
            assert!(lit > 30 && lit < 32 * 32 * 3, "{kind}: {lit}");
        }
    }
}
