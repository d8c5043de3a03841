//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every activation in the model is a 2D matrix: point sets are `[n, 3]`,
//! feature maps are channels-last `[h * w, c]`, token sets are `[n, c]`. That
//! keeps the op set small enough to verify each backward rule against finite
//! differences.

mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{ConvGeom, Graph, Var, RMS_EPS};
pub use optim::{clip_global_norm, cosine_lr, Adam, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{gemm, Matrix, Real};

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central-difference check of every parameter gradient of `f`.
    /// Returns the worst relative error, measured as
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn worst_relative_error(
        store: &mut ParamStore<f64>,
        h: f64,
        floor: f64,
        f: impl Fn(&mut Graph<f64>) -> Var,
    ) -> f64 {
        let analytic = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let eval = |s: &ParamStore<f64>| {
            let mut g = Graph::inference(s);
            let loss = f(&mut g);
            g.value(loss).get(0, 0)
        };
        let mut worst = 0.0f64;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).data().len();
            for idx in 0..n {
                let orig = store.get(id).data()[idx];
                store.get_mut(id).data_mut()[idx] = orig + h;
                let plus = eval(store);
                store.get_mut(id).data_mut()[idx] = orig - h;
                let minus = eval(store);
                store.get_mut(id).data_mut()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.get(id).map_or(0.0, |m| m.data()[idx]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(rel);
            }
        }
        worst
    }
}
