//! The completion network assembled per ablation variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, ParamStore, Real, Var};
use crate::config::ArchConfig;
use crate::encoder::{ImageEncoder, ImageTensor, ImageTokens};
use crate::error::{Error, Result};
use crate::geometry::{fps_indices, PointCloud};
use crate::i2p::{assemble_coarse, CoarseCompletion, PointGenerator};
use crate::p2p::{trace_from_graph, RefineVars, Refiner, RefinementTrace};
use crate::training::AblationVariant;

/// Seed of the farthest-point pass that picks the kept partial points.
pub const KEEP_SEED: u64 = 0;

#[derive(Clone, Debug)]
pub struct CompletionModel<T: Real = f32> {
    pub arch: ArchConfig,
    pub variant: AblationVariant,
    pub store: ParamStore<T>,
    pub encoder: ImageEncoder,
    pub generator: Option<PointGenerator>,
    pub refiner: Option<Refiner>,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub tokens: Var,
    pub grid: (usize, usize),
    /// `[n_coarse, 3]` starting geometry.
    pub coarse: Var,
    pub refine: Option<RefineVars>,
}

impl ForwardVars {
    /// The model's output cloud node.
    pub fn output(&self) -> Var {
        self.refine
            .as_ref()
            .map_or(self.coarse, |r| *r.stages.last().expect("nonempty"))
    }
}

/// Result of running the model on one input.
#[derive(Clone, Debug)]
pub struct Completion<T> {
    pub coarse: CoarseCompletion,
    pub tokens: ImageTokens<T>,
    pub trace: Option<RefinementTrace>,
}

impl<T> Completion<T> {
    pub fn output(&self) -> &PointCloud {
        self.trace.as_ref().map_or(&self.coarse.points, |t| t.final_cloud())
    }
}

impl<T: Real> CompletionModel<T> {
    /// Fresh parameters drawn from `seed`. Parameters are registered in a
    /// fixed order: encoder, generator, refiner.
    pub fn new(arch: &ArchConfig, variant: AblationVariant, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ImageEncoder::new(&mut store, &arch.encoder, &mut rng)?;
        let c = arch.encoder.out_channels();
        let generator = variant
            .has_generator()
            .then(|| PointGenerator::new(&mut store, &arch.generator, c, &mut rng))
            .transpose()?;
        let refiner = variant
            .has_refiner()
            .then(|| Refiner::new(&mut store, &arch.refiner, c, &mut rng))
            .transpose()?;
        Ok(Self {
            arch: arch.clone(),
            variant,
            store,
            encoder,
            generator,
            refiner,
        })
    }

    pub fn n_coarse(&self) -> usize {
        self.arch.generator.n_generated + self.arch.keep
    }

    /// Partial points the coarse cloud keeps.
    pub fn kept_partial(&self, partial: &PointCloud, seed: u64) -> Result<PointCloud> {
        if self.arch.keep > partial.len() {
            return Err(Error::invalid(format!(
                "partial cloud has {} points, model keeps {}",
                partial.len(),
                self.arch.keep
            )));
        }
        partial.select(&fps_indices(partial, self.arch.keep, seed)?)
    }

    /// Input geometry of the refiner-only variant: the kept points repeated
    /// cyclically up to the coarse point count.
    pub fn repeated_partial(&self, kept: &PointCloud) -> PointCloud {
        let idx: Vec<usize> = (0..self.n_coarse()).map(|i| i % kept.len()).collect();
        kept.select(&idx).expect("indices in range")
    }

    /// Builds the forward pass on `g` given the already-downsampled partial.
    pub fn forward(&self, g: &mut Graph<T>, image: &ImageTensor, kept: &PointCloud) -> Result<ForwardVars> {
        let (tokens, grid) = self.encoder.forward(g, image)?;
        let coarse = match &self.generator {
            Some(gen) => {
                let latent = gen.aggregate(g, tokens)?;
                let generated = gen.generate(g, latent)?;
                let kept = g.input(Matrix::from_cloud(kept));
                g.concat_rows(&[generated, kept])
            }
            None => g.input(Matrix::from_cloud(&self.repeated_partial(kept))),
        };
        let refine = self.refiner.as_ref().map(|r| r.forward(g, coarse, tokens)).transpose()?;
        Ok(ForwardVars {
            tokens,
            grid,
            coarse,
            refine,
        })
    }

    /// Inference on one image and partial cloud.
    pub fn complete(&self, image: &ImageTensor, partial: &PointCloud) -> Result<Completion<T>> {
        let kept = self.kept_partial(partial, KEEP_SEED)?;
        let mut g = Graph::inference(&self.store);
        let vars = self.forward(&mut g, image, &kept)?;
        let coarse_cloud = g.value(vars.coarse).to_cloud()?;
        let coarse = match &self.generator {
            Some(_) => {
                let n = self.arch.generator.n_generated;
                let generated = PointCloud::new(coarse_cloud.points()[..n].to_vec())?;
                assemble_coarse(&generated, partial, self.arch.keep, KEEP_SEED)?
            }
            None => CoarseCompletion {
                generated_mask: vec![false; coarse_cloud.len()],
                n_generated: 0,
                n_partial_kept: coarse_cloud.len(),
                points: coarse_cloud,
            },
        };
        let trace = vars
            .refine
            .as_ref()
            .map(|r| trace_from_graph(&g, &coarse.points, r))
            .transpose()?;
        Ok(Completion {
            coarse,
            tokens: ImageTokens {
                tokens: g.value(vars.tokens).clone(),
                grid: vars.grid,
            },
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::i2p::i2p_forward;
    use crate::p2p::p2p_refine;
    use rand::Rng;

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig::compact();
        c.encoder.height = 16;
        c.encoder.width = 16;
        c.encoder.stage_channels = vec![8, 16];
        c.encoder.heads_per_stage = vec![2, 2];
        c.generator.points_per_branch = 8;
        c.generator.n_generated = 32;
        c.generator.latent_width = 16;
        c.refiner.embed_width = 16;
        c.refiner.ffn_width = 32;
        c.refiner.n_stages = 2;
        c.points.n_input = 64;
        c.points.keep = 16;
        c
    }

    fn inputs(seed: u64) -> (ImageTensor, PointCloud) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImageTensor::new(16, 16, (0..768).map(|_| rng.random::<f32>()).collect()).unwrap();
        let partial = PointCloud::new((0..64).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()).unwrap();
        (image, partial)
    }

    #[test]
    fn variants_register_expected_parameters() {
        let arch = tiny().arch();
        let has = |v, prefix: &str| {
            CompletionModel::<f32>::new(&arch, v, 0).unwrap().store.names().iter().any(|n| n.starts_with(prefix))
        };
        assert!(has(AblationVariant::Full, "refiner.") && has(AblationVariant::Full, "generator."));
        assert!(!has(AblationVariant::I2POnly, "refiner."));
        assert!(!has(AblationVariant::P2POnly, "generator."));
        assert!(has(AblationVariant::P2POnly, "encoder."));
    }

    #[test]
    fn full_model_matches_module_composition() {
        let arch = tiny().arch();
        let m = CompletionModel::<f32>::new(&arch, AblationVariant::Full, 3).unwrap();
        let (image, partial) = inputs(1);
        let out = m.complete(&image, &partial).unwrap();
        assert_eq!(out.coarse.points.len(), 48);
        assert_eq!(out.output().len(), 48);
        // Fresh offset heads leave the coarse cloud unchanged.
        assert_eq!(out.output(), &out.coarse.points);

        let (coarse, tokens) = i2p_forward(
            &m.store,
            &m.encoder,
            m.generator.as_ref().unwrap(),
            &image,
            &partial,
            arch.keep,
            KEEP_SEED,
        )
        .unwrap();
        assert_eq!(coarse, out.coarse);
        assert_eq!(tokens, out.tokens);
        let trace = p2p_refine(&m.store, m.refiner.as_ref().unwrap(), &coarse, &tokens).unwrap();
        assert_eq!(Some(trace), out.trace);
    }

    #[test]
    fn p2p_only_repeats_kept_points() {
        let arch = tiny().arch();
        let m = CompletionModel::<f32>::new(&arch, AblationVariant::P2POnly, 3).unwrap();
        let (image, partial) = inputs(2);
        let out = m.complete(&image, &partial).unwrap();
        assert_eq!(out.coarse.points.len(), 48);
        assert!(out.coarse.generated_mask.iter().all(|&g| !g));
        let kept = m.kept_partial(&partial, KEEP_SEED).unwrap();
        for (i, p) in out.coarse.points.points().iter().enumerate() {
            let q = kept.points()[i % 16];
            // Stored through the f32 tape.
            for k in 0..3 {
                assert_eq!(p[k], q[k] as f32 as f64);
            }
        }
    }

    #[test]
    fn i2p_only_outputs_coarse() {
        let arch = tiny().arch();
        let m = CompletionModel::<f32>::new(&arch, AblationVariant::I2POnly, 3).unwrap();
        let (image, partial) = inputs(3);
        let out = m.complete(&image, &partial).unwrap();
        assert!(out.trace.is_none());
        assert_eq!(out.output(), &out.coarse.points);
    }
}
