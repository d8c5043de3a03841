//! Image-to-point generator: pools encoder tokens into a global latent,
//! decodes it through parallel branch MLPs and fuses the generated points
//! with a downsampled copy of the partial input.

use rand::Rng;

use crate::autodiff::nn::{Init, Linear};
use crate::autodiff::{Graph, Matrix, ParamStore, Real, Var};
use crate::config::GeneratorConfig;
use crate::encoder::{ImageEncoder, ImageTensor, ImageTokens};
use crate::error::{Error, Result};
use crate::geometry::{fps_indices, PointCloud};

/// Coarse completion: generated points first, then the kept partial points.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseCompletion {
    pub points: PointCloud,
    pub generated_mask: Vec<bool>,
    pub n_generated: usize,
    pub n_partial_kept: usize,
}

#[derive(Clone, Debug)]
struct Branch {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct PointGenerator {
    cfg: GeneratorConfig,
    token_proj: Linear,
    mlp1: Linear,
    mlp2: Linear,
    branches: Vec<Branch>,
}

impl PointGenerator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &GeneratorConfig,
        token_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.n_branches * cfg.points_per_branch != cfg.n_generated || cfg.n_generated == 0 {
            return Err(Error::config(format!(
                "generator: {} branches x {} points != {}",
                cfg.n_branches, cfg.points_per_branch, cfg.n_generated
            )));
        }
        let l = cfg.latent_width;
        let token_proj = Linear::new(store, "generator.token_proj", token_width, l, true, Init::FanIn, rng);
        let mlp1 = Linear::new(store, "generator.mlp1", l, l, true, Init::FanIn, rng);
        let mlp2 = Linear::new(store, "generator.mlp2", l, l, true, Init::FanIn, rng);
        let branches = (0..cfg.n_branches)
            .map(|b| Branch {
                hidden: Linear::new(store, &format!("generator.branch{b}.hidden"), l, l, true, Init::FanIn, rng),
                out: Linear::new(
                    store,
                    &format!("generator.branch{b}.out"),
                    l,
                    3 * cfg.points_per_branch,
                    true,
                    Init::FanIn,
                    rng,
                ),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            token_proj,
            mlp1,
            mlp2,
            branches,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Shared per-token projection, max over tokens, then a two-layer MLP.
    /// Returns a `[1, latent_width]` node.
    pub fn aggregate<T: Real>(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let (n, c) = g.shape(tokens);
        if n == 0 {
            return Err(Error::invalid("cannot aggregate an empty token set"));
        }
        if c != self.token_proj.in_dim {
            return Err(Error::config(format!(
                "generator expects {}-wide tokens, got {c}",
                self.token_proj.in_dim
            )));
        }
        g.ensure_finite(tokens, "latent aggregation input")?;
        let h = self.token_proj.forward(g, tokens);
        let pooled = g.max_rows(h);
        let h = self.mlp1.forward(g, pooled);
        let h = g.silu(h);
        let latent = self.mlp2.forward(g, h);
        g.ensure_finite(latent, "latent aggregation")?;
        Ok(latent)
    }

    /// Decodes a `[1, latent_width]` latent into `[n_generated, 3]` points in
    /// `[-1, 1]`.
    pub fn generate<T: Real>(&self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        if g.shape(latent) != (1, self.cfg.latent_width) {
            return Err(Error::config(format!(
                "latent has shape {:?}, expected (1, {})",
                g.shape(latent),
                self.cfg.latent_width
            )));
        }
        let parts: Vec<Var> = self
            .branches
            .iter()
            .map(|b| {
                let h = b.hidden.forward(g, latent);
                let h = g.silu(h);
                let o = b.out.forward(g, h);
                let o = g.tanh(o);
                g.reshape(o, self.cfg.points_per_branch, 3)
            })
            .collect();
        let pts = g.concat_rows(&parts);
        g.ensure_finite(pts, "point generation")?;
        Ok(pts)
    }
}

/// Indices of the partial points kept for the coarse cloud.
pub fn kept_partial_indices(partial: &PointCloud, keep: usize, seed: u64) -> Result<Vec<usize>> {
    if keep == 0 {
        return Err(Error::invalid("keep must be at least 1"));
    }
    if keep > partial.len() {
        return Err(Error::invalid(format!(
            "keep {keep} exceeds partial cloud size {}",
            partial.len()
        )));
    }
    fps_indices(partial, keep, seed)
}

/// Concatenates generated points with `keep` farthest-point samples of the
/// partial input.
pub fn assemble_coarse(generated: &PointCloud, partial: &PointCloud, keep: usize, seed: u64) -> Result<CoarseCompletion> {
    let idx = kept_partial_indices(partial, keep, seed)?;
    let kept = partial.select(&idx)?;
    let n_generated = generated.len();
    let mut mask = vec![true; n_generated];
    mask.resize(n_generated + keep, false);
    Ok(CoarseCompletion {
        points: generated.concat(&kept),
        generated_mask: mask,
        n_generated,
        n_partial_kept: keep,
    })
}

/// Tape-level image-to-point pass: encoder tokens, generated points and the
/// coarse `[N_g + keep, 3]` node.
#[derive(Clone, Copy, Debug)]
pub struct I2pVars {
    pub tokens: Var,
    pub grid: (usize, usize),
    pub generated: Var,
    pub coarse: Var,
}

pub fn i2p_graph<T: Real>(
    g: &mut Graph<T>,
    encoder: &ImageEncoder,
    generator: &PointGenerator,
    image: &ImageTensor,
    kept: &PointCloud,
) -> Result<I2pVars> {
    let (tokens, grid) = encoder.forward(g, image)?;
    let latent = generator.aggregate(g, tokens)?;
    let generated = generator.generate(g, latent)?;
    let kept = g.input(Matrix::from_cloud(kept));
    let coarse = g.concat_rows(&[generated, kept]);
    Ok(I2pVars {
        tokens,
        grid,
        generated,
        coarse,
    })
}

/// Inference: encodes `image`, generates points and assembles the coarse
/// cloud. The returned tokens are the ones the refiner should consume.
pub fn i2p_forward<T: Real>(
    store: &ParamStore<T>,
    encoder: &ImageEncoder,
    generator: &PointGenerator,
    image: &ImageTensor,
    partial: &PointCloud,
    keep: usize,
    seed: u64,
) -> Result<(CoarseCompletion, ImageTokens<T>)> {
    let mut g = Graph::inference(store);
    let (tokens, grid) = encoder.forward(&mut g, image)?;
    let latent = generator.aggregate(&mut g, tokens)?;
    let generated = generator.generate(&mut g, latent)?;
    let generated = g.value(generated).to_cloud()?;
    let coarse = assemble_coarse(&generated, partial, keep, seed)?;
    Ok((
        coarse,
        ImageTokens {
            tokens: g.value(tokens).clone(),
            grid,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen_cfg(branches: usize, ppb: usize, latent: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_branches: branches,
            points_per_branch: ppb,
            latent_width: latent,
            n_generated: branches * ppb,
        }
    }

    fn random_cloud(n: usize, rng: &mut impl Rng) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()).unwrap()
    }

    fn latent_of(store: &ParamStore<f64>, gen: &PointGenerator, tokens: Matrix<f64>) -> Matrix<f64> {
        let mut g = Graph::inference(store);
        let t = g.input(tokens);
        let l = gen.aggregate(&mut g, t).unwrap();
        g.value(l).clone()
    }

    #[test]
    fn latent_is_invariant_to_permutation_and_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let gen = PointGenerator::new(&mut store, &gen_cfg(2, 4, 16), 8, &mut rng).unwrap();
        let tokens = Matrix::from_fn(10, 8, |_, _| rng.random_range(-1.0..1.0));
        let base = latent_of(&store, &gen, tokens.clone());
        let perm = [4, 1, 9, 0, 3, 8, 2, 7, 6, 5];
        let permuted = Matrix::from_fn(10, 8, |i, j| tokens.get(perm[i], j));
        assert_eq!(latent_of(&store, &gen, permuted), base);
        let doubled = Matrix::from_fn(20, 8, |i, j| tokens.get(i % 10, j));
        assert_eq!(latent_of(&store, &gen, doubled), base);
    }

    #[test]
    fn latent_responds_to_argmax_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let gen = PointGenerator::new(&mut store, &gen_cfg(1, 2, 8), 4, &mut rng).unwrap();
        let tokens = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let base = latent_of(&store, &gen, tokens.clone());
        // The token that achieves the pooled max in feature 0.
        let w = store.get(gen.token_proj.weight).clone();
        let b = store.get(gen.token_proj.bias.unwrap()).clone();
        let proj = |i: usize| (0..4).map(|k| tokens.get(i, k) * w.get(k, 0)).sum::<f64>() + b.get(0, 0);
        let arg = (0..6).max_by(|&a, &c| proj(a).total_cmp(&proj(c))).unwrap();
        let k = (0..4).max_by(|&a, &c| w.get(a, 0).abs().total_cmp(&w.get(c, 0).abs())).unwrap();
        let mut bumped = tokens.clone();
        bumped.set(arg, k, tokens.get(arg, k) + 0.5 * w.get(k, 0).signum());
        assert_ne!(latent_of(&store, &gen, bumped), base);
    }

    #[test]
    fn rejects_bad_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let gen = PointGenerator::new(&mut store, &gen_cfg(1, 2, 8), 4, &mut rng).unwrap();
        let mut g = Graph::inference(&store);
        let t = g.input(Matrix::from_fn(3, 4, |i, _| if i == 1 { f64::NAN } else { 0.0 }));
        assert!(matches!(gen.aggregate(&mut g, t), Err(Error::Numerical { .. })));
        let t = g.input(Matrix::zeros(3, 5));
        assert!(matches!(gen.aggregate(&mut g, t), Err(Error::Config(_))));
    }

    #[test]
    fn generates_configured_count_in_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let gen = PointGenerator::new(&mut store, &gen_cfg(4, 256, 32), 8, &mut rng).unwrap();
        let mut g = Graph::inference(&store);
        let l = g.input(Matrix::from_fn(1, 32, |_, j| (j as f32 * 0.37).sin() * 3.0));
        let p = gen.generate(&mut g, l).unwrap();
        assert_eq!(g.shape(p), (1024, 3));
        assert!(g.value(p).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_branch_weights_put_points_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let gen = PointGenerator::new(&mut store, &gen_cfg(3, 5, 8), 4, &mut rng).unwrap();
        for b in &gen.branches {
            *store.get_mut(b.out.weight) = Matrix::zeros(8, 15);
            *store.get_mut(b.out.bias.unwrap()) = Matrix::zeros(1, 15);
        }
        let mut g = Graph::inference(&store);
        let l = g.input(Matrix::filled(1, 8, 0.7));
        let p = gen.generate(&mut g, l).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_latents_give_different_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let gen = PointGenerator::new(&mut store, &gen_cfg(2, 8, 16), 4, &mut rng).unwrap();
        let mut outs = Vec::new();
        for _ in 0..5 {
            let mut g = Graph::inference(&store);
            let l = g.input(Matrix::from_fn(1, 16, |_, _| rng.random_range(-1.0..1.0)));
            let p = gen.generate(&mut g, l).unwrap();
            outs.push(g.value(p).clone());
        }
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn assemble_counts_and_mask_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let ng = rng.random_range(1..40);
            let np = rng.random_range(1..60);
            let keep = rng.random_range(1..=np);
            let generated = random_cloud(ng, &mut rng);
            let partial = random_cloud(np, &mut rng);
            let c = assemble_coarse(&generated, &partial, keep, trial).unwrap();
            assert_eq!(c.points.len(), ng + keep);
            assert_eq!(c.n_generated + c.n_partial_kept, c.points.len());
            assert_eq!(&c.points.points()[..ng], generated.points());
            let mut used = vec![false; np];
            for (p, &m) in c.points.points().iter().zip(&c.generated_mask) {
                if !m {
                    let i = partial.points().iter().position(|q| q == p).expect("kept point from partial");
                    assert!(!used[i]);
                    used[i] = true;
                }
            }
            assert_eq!(used.iter().filter(|&&u| u).count(), keep);
        }
    }

    #[test]
    fn assemble_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let generated = random_cloud(1024, &mut rng);
        let partial = random_cloud(2048, &mut rng);
        assert_eq!(assemble_coarse(&generated, &partial, 1024, 0).unwrap().points.len(), 2048);
        let full = assemble_coarse(&generated, &partial, 2048, 0).unwrap();
        let mut kept: Vec<_> = full.points.points()[1024..].to_vec();
        let mut orig = partial.points().to_vec();
        kept.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(kept, orig);
        assert!(matches!(assemble_coarse(&generated, &partial, 2049, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(assemble_coarse(&generated, &partial, 0, 0), Err(Error::InvalidInput(_))));
    }

    fn tiny_encoder_cfg() -> EncoderConfig {
        EncoderConfig {
            height: 16,
            width: 16,
            stage_channels: vec![8, 8],
            heads_per_stage: vec![2, 2],
            bottleneck_blocks: 1,
            stem_kernel: 3,
            positional_embedding: true,
        }
    }

    #[test]
    fn zero_image_zero_generator_keeps_partial() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let enc = ImageEncoder::new(&mut store, &tiny_encoder_cfg(), &mut rng).unwrap();
        let gen = PointGenerator::new(&mut store, &gen_cfg(2, 6, 8), 8, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("generator.") {
                let (r, c) = store.get(id).shape();
                *store.get_mut(id) = Matrix::zeros(r, c);
            }
        }
        let partial = random_cloud(20, &mut rng);
        let (coarse, tokens) =
            i2p_forward(&store, &enc, &gen, &ImageTensor::zeros(16, 16), &partial, 10, 3).unwrap();
        assert_eq!(tokens.grid, (4, 4));
        assert_eq!(tokens.tokens.shape(), (16, 8));
        assert!(coarse.points.points()[..12].iter().all(|p| *p == [0.0; 3]));
        let expected = partial.select(&fps_indices(&partial, 10, 3).unwrap()).unwrap();
        assert_eq!(&coarse.points.points()[12..], expected.points());
    }

    #[test]
    fn coarse_loss_reaches_encoder_stem() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        let enc = ImageEncoder::new(&mut store, &tiny_encoder_cfg(), &mut rng).unwrap();
        let gen = PointGenerator::new(&mut store, &gen_cfg(2, 6, 8), 8, &mut rng).unwrap();
        let pixels = (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect();
        let image = ImageTensor::new(16, 16, pixels).unwrap();
        let kept = random_cloud(5, &mut rng);
        let gt = random_cloud(30, &mut rng);
        let mut g = Graph::new(&store);
        let vars = i2p_graph(&mut g, &enc, &gen, &image, &kept).unwrap();
        assert_eq!(g.shape(vars.coarse), (17, 3));
        let loss = g.chamfer(vars.coarse, &gt).unwrap();
        let grads = g.backward(loss);
        for id in store.ids() {
            let gr = grads.get(id).unwrap_or_else(|| panic!("missing gradient {}", store.name(id)));
            assert!(gr.is_finite(), "{}", store.name(id));
        }
        let stem = store.find("encoder.stem.weight").unwrap();
        assert!(grads.get(stem).unwrap().sum_sq() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn coarse_count_is_generated_plus_keep(
            branches in 1usize..4, ppb in 1usize..16, np in 1usize..64, keep_frac in 0.0f64..1.0, seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1 + ((np - 1) as f64 * keep_frac) as usize;
            let mut store = ParamStore::<f32>::new();
            let enc = ImageEncoder::new(&mut store, &tiny_encoder_cfg(), &mut rng).unwrap();
            let gen = PointGenerator::new(&mut store, &gen_cfg(branches, ppb, 8), 8, &mut rng).unwrap();
            let partial = random_cloud(np, &mut rng);
            let (coarse, _) = i2p_forward(&store, &enc, &gen, &ImageTensor::zeros(16, 16), &partial, keep, seed).unwrap();
            prop_assert_eq!(coarse.points.len(), branches * ppb + keep);
            prop_assert!(coarse.points.points()[..branches * ppb].iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
