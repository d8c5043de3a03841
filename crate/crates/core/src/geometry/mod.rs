//! Point cloud data model, sampling, nearest-neighbour search and the
//! completion metrics (Chamfer distance and F-score at a threshold).

mod cloud;
pub mod io;
mod kdtree;
mod metrics;
mod nn;
mod sampling;

pub use cloud::{normalize, Normalization, Point3, PointCloud};
pub use kdtree::KdTree;
pub use metrics::{chamfer_distance, chamfer_with_grad, fscore, ChamferGrad, MetricReport};
pub use nn::{nn_accelerated, nn_bruteforce, sq_dist, NnResult};
pub use sampling::{fps_indices, fps_indices_from, fps_sample, uniform_indices, uniform_sample};

/// Default F-score threshold, compared against squared distances.
pub const DEFAULT_TAU: f64 = 0.001;
