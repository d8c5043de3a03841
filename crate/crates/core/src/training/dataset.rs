//! On-disk dataset: one directory per sample plus a manifest.
//!
//! ```text
//! root/manifest.txt
//! root/train/box_0003/{image.png, partial.xyz, gt.xyz, meta}
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{synth_sample, ShapeKind, ShapeParams, TrainSample, View};
use crate::config::PipelineConfig;
use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::geometry::io::{read_xyz, write_xyz};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Self; 3] = [Self::Train, Self::Val, Self::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split {s:?} (train, val, test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub category: ShapeKind,
    pub view_id: usize,
    pub seed: u64,
    /// Relative to the dataset root.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    fn to_text(&self) -> String {
        let mut s = String::from("# split category view_id seed path\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{} {} {} {} {}\n",
                e.split,
                e.category,
                e.view_id,
                e.seed,
                e.path.display()
            ));
        }
        s
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        let bad = |line: usize, message: &str| Error::Format {
            path: path.display().to_string(),
            line,
            message: message.to_string(),
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            entries.push(ManifestEntry {
                split: f[0].parse().map_err(|_| bad(i + 1, "unknown split"))?,
                category: ShapeKind::parse(f[1]).ok_or_else(|| bad(i + 1, "unknown category"))?,
                view_id: f[2].parse().map_err(|_| bad(i + 1, "bad view id"))?,
                seed: f[3].parse().map_err(|_| bad(i + 1, "bad seed"))?,
                path: PathBuf::from(f[4]),
            });
        }
        Ok(Self { entries })
    }
}

/// Seed of sample `index` of `category` in `split`.
fn sample_seed(base: u64, split: Split, category: ShapeKind, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(split.index() * 16 + category as u64);
    rng.set_word_pos(index as u128 * 16);
    rng.random()
}

/// Random shape, view and jitter of `category`, all drawn from `seed`.
pub fn build_sample(cfg: &PipelineConfig, category: ShapeKind, seed: u64) -> Result<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ShapeParams::random(category, &mut rng);
    let view_id = rng.random_range(0..View::COUNT);
    synth_sample(
        &params,
        view_id,
        rng.random(),
        cfg.points.n_input,
        (cfg.encoder.height, cfg.encoder.width),
    )
    .map(|s| TrainSample { seed, ..s })
}

/// Writes all three splits under `out` and returns the manifest. Existing
/// sample files are overwritten.
pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let kinds: Vec<ShapeKind> = cfg
        .data
        .categories
        .iter()
        .map(|c| ShapeKind::parse(c).expect("validated"))
        .collect();
    let mut entries = Vec::new();
    for split in Split::ALL {
        let count = match split {
            Split::Train => cfg.data.train_per_category,
            Split::Val => cfg.data.val_per_category,
            Split::Test => cfg.data.test_per_category,
        };
        for &kind in &kinds {
            for i in 0..count {
                let seed = sample_seed(cfg.data.seed, split, kind, i);
                let sample = build_sample(cfg, kind, seed)?;
                let rel = PathBuf::from(split.name()).join(format!("{kind}_{i:04}"));
                write_sample(&out.join(&rel), &sample)?;
                entries.push(ManifestEntry {
                    split,
                    category: kind,
                    view_id: sample.view_id,
                    seed,
                    path: rel,
                });
            }
        }
    }
    let manifest = DatasetManifest { entries };
    fs::write(out.join(MANIFEST), manifest.to_text())?;
    Ok(manifest)
}

fn write_sample(dir: &Path, s: &TrainSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    s.image.save_png(dir.join("image.png"))?;
    write_xyz(dir.join("partial.xyz"), &s.partial)?;
    write_xyz(dir.join("gt.xyz"), &s.gt)?;
    fs::write(
        dir.join("meta"),
        format!("category={}\nview_id={}\nseed={}\n", s.category, s.view_id, s.seed),
    )?;
    Ok(())
}

/// Loads every sample of `split`, in manifest order.
pub fn load_split(root: &Path, split: Split, cfg: &PipelineConfig) -> Result<Vec<TrainSample>> {
    let manifest = DatasetManifest::read(root)?;
    manifest
        .split(split)
        .map(|e| {
            let dir = root.join(&e.path);
            let partial = read_xyz(dir.join("partial.xyz"))?;
            let gt = read_xyz(dir.join("gt.xyz"))?;
            if partial.len() != cfg.points.n_input || gt.len() != cfg.points.n_input {
                return Err(Error::config(format!(
                    "{}: clouds have {}/{} points, config expects {}",
                    dir.display(),
                    partial.len(),
                    gt.len(),
                    cfg.points.n_input
                )));
            }
            Ok(TrainSample {
                image: ImageTensor::load_png(dir.join("image.png"), cfg.encoder.height, cfg.encoder.width)?,
                partial,
                gt,
                category: e.category,
                view_id: e.view_id,
                seed: e.seed,
            })
        })
        .collect()
}
