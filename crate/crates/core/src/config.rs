//! Run configuration. Every section has defaults, so a TOML file only needs
//! the keys it changes. `validate` reports problems by field path.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub stage_channels: Vec<usize>,
    pub heads_per_stage: Vec<usize>,
    pub bottleneck_blocks: usize,
    pub stem_kernel: usize,
    /// Learned additive positional embedding on the output tokens.
    pub positional_embedding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            stage_channels: vec![32, 64, 128],
            heads_per_stage: vec![4, 4, 4],
            bottleneck_blocks: 2,
            stem_kernel: 7,
            positional_embedding: true,
        }
    }
}

impl EncoderConfig {
    pub fn n_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn grid(&self) -> (usize, usize) {
        let f = 1 << self.n_stages();
        (self.height / f, self.width / f)
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_branches: usize,
    pub points_per_branch: usize,
    pub latent_width: usize,
    pub n_generated: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_branches: 4,
            points_per_branch: 256,
            latent_width: 256,
            n_generated: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub n_stages: usize,
    pub embed_width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub share_offset_heads: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            n_stages: 4,
            embed_width: 128,
            heads: 4,
            ffn_width: 256,
            share_offset_heads: false,
        }
    }
}

/// How the partial input is thinned before joining the generated points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Downsample {
    Fps,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointsConfig {
    /// Points per partial and ground-truth cloud.
    pub n_input: usize,
    /// Partial points kept in the coarse completion.
    pub keep: usize,
    /// Sampling used during training; evaluation always uses FPS.
    pub train_downsample: Downsample,
}

impl Default for PointsConfig {
    fn default() -> Self {
        Self {
            n_input: 2048,
            keep: 1024,
            train_downsample: Downsample::Fps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub seed: u64,
    /// F-score threshold on squared distance.
    pub tau: f64,
    /// Validate every this many epochs (the last epoch always validates).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            grad_clip: 1.0,
            alpha_start: 0.7,
            alpha_end: 0.1,
            seed: 0,
            tau: 0.001,
            val_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub categories: Vec<String>,
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub test_per_category: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: ["sphere", "box", "cylinder", "torus"].map(String::from).to_vec(),
            train_per_category: 16,
            val_per_category: 4,
            test_per_category: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub refiner: RefinerConfig,
    pub points: PointsConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

/// Architectural subset that decides parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub refiner: RefinerConfig,
    pub keep: usize,
}

/// Collected validation failures, one `path: message` per entry.
#[derive(Debug, Default)]
struct Issues(Vec<String>);

impl Issues {
    fn check(&mut self, ok: bool, path: &str, msg: impl fmt::Display) {
        if !ok {
            self.0.push(format!("{path}: {msg}"));
        }
    }
}

impl PipelineConfig {
    /// Reduced point counts and widths that train in minutes on one CPU core.
    pub fn compact() -> Self {
        Self {
            encoder: EncoderConfig {
                height: 32,
                width: 32,
                stage_channels: vec![16, 32, 64],
                heads_per_stage: vec![2, 4, 4],
                bottleneck_blocks: 1,
                stem_kernel: 7,
                positional_embedding: true,
            },
            generator: GeneratorConfig {
                n_branches: 4,
                points_per_branch: 32,
                latent_width: 128,
                n_generated: 128,
            },
            refiner: RefinerConfig {
                n_stages: 4,
                embed_width: 64,
                heads: 4,
                ffn_width: 128,
                share_offset_heads: false,
            },
            points: PointsConfig {
                n_input: 256,
                keep: 128,
                train_downsample: Downsample::Fps,
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            encoder: self.encoder.clone(),
            generator: self.generator.clone(),
            refiner: self.refiner.clone(),
            keep: self.points.keep,
        }
    }

    pub fn n_coarse(&self) -> usize {
        self.generator.n_generated + self.points.keep
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Issues::default();
        let e = &self.encoder;
        v.check(!e.stage_channels.is_empty(), "encoder.stage_channels", "needs at least one stage");
        v.check(
            e.heads_per_stage.len() == e.stage_channels.len(),
            "encoder.heads_per_stage",
            format!("has {} entries for {} stages", e.heads_per_stage.len(), e.stage_channels.len()),
        );
        v.check(
            e.stage_channels.windows(2).all(|w| w[0] <= w[1]),
            "encoder.stage_channels",
            "must be nondecreasing",
        );
        for (i, (&c, &h)) in e.stage_channels.iter().zip(&e.heads_per_stage).enumerate() {
            v.check(c > 0, &format!("encoder.stage_channels[{i}]"), "must be positive");
            v.check(
                h > 0 && c % h == 0,
                &format!("encoder.heads_per_stage[{i}]"),
                format!("{h} heads do not divide {c} channels"),
            );
        }
        v.check(e.stem_kernel % 2 == 1, "encoder.stem_kernel", "must be odd");
        let f = 1usize << e.stage_channels.len().min(30);
        v.check(
            e.height > 0 && e.height % f == 0,
            "encoder.height",
            format!("{} not divisible by 2^{}", e.height, e.stage_channels.len()),
        );
        v.check(
            e.width > 0 && e.width % f == 0,
            "encoder.width",
            format!("{} not divisible by 2^{}", e.width, e.stage_channels.len()),
        );

        let g = &self.generator;
        v.check(g.n_branches > 0, "generator.n_branches", "must be positive");
        v.check(g.points_per_branch > 0, "generator.points_per_branch", "must be positive");
        v.check(g.latent_width > 0, "generator.latent_width", "must be positive");
        v.check(
            g.n_branches * g.points_per_branch == g.n_generated,
            "generator.n_generated",
            format!(
                "{} != n_branches ({}) * points_per_branch ({})",
                g.n_generated, g.n_branches, g.points_per_branch
            ),
        );

        let r = &self.refiner;
        v.check(r.n_stages > 0, "refiner.n_stages", "must be positive");
        v.check(r.ffn_width > 0, "refiner.ffn_width", "must be positive");
        v.check(
            r.heads > 0 && r.embed_width > 0 && r.embed_width % r.heads == 0,
            "refiner.heads",
            format!("{} heads do not divide embed_width {}", r.heads, r.embed_width),
        );

        let p = &self.points;
        v.check(p.n_input > 0, "points.n_input", "must be positive");
        v.check(
            p.keep >= 1 && p.keep <= p.n_input,
            "points.keep",
            format!("must be in 1..={}", p.n_input),
        );

        let t = &self.train;
        v.check(t.epochs > 0, "train.epochs", "must be positive");
        v.check(t.batch_size > 0, "train.batch_size", "must be positive");
        v.check(t.lr > 0.0 && t.lr.is_finite(), "train.lr", "must be positive");
        v.check(t.grad_clip > 0.0, "train.grad_clip", "must be positive");
        v.check(t.alpha_start >= 0.0 && t.alpha_start.is_finite(), "train.alpha_start", "must be >= 0");
        v.check(t.alpha_end >= 0.0 && t.alpha_end.is_finite(), "train.alpha_end", "must be >= 0");
        v.check(t.tau > 0.0 && t.tau.is_finite(), "train.tau", "must be positive");
        v.check(t.val_every > 0, "train.val_every", "must be positive");

        let d = &self.data;
        v.check(!d.categories.is_empty(), "data.categories", "must not be empty");
        for (i, c) in d.categories.iter().enumerate() {
            v.check(
                crate::training::ShapeKind::parse(c).is_some(),
                &format!("data.categories[{i}]"),
                format!("unknown shape {c:?} (sphere, box, cylinder, torus)"),
            );
        }

        if v.0.is_empty() {
            Ok(())
        } else {
            Err(Error::config(v.0.join("; ")))
        }
    }
}

impl ArchConfig {
    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("arch config serialises");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
