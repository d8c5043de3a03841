//! Loss, annealing schedule, ablation variants, synthetic data, dataset
//! storage, checkpoints and the training loop.

mod checkpoint;
mod dataset;
mod loss;
mod synth;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainerState, CHECKPOINT_VERSION};
pub use dataset::{build_sample, gen_data, load_split, DatasetManifest, ManifestEntry, Split, MANIFEST};
pub use loss::{alpha_at, total_loss, LossBreakdown, LossSchedule};
pub use synth::{render, synth_sample, Shape, ShapeKind, ShapeParams, TrainSample, View, JITTER, RENDER_EXTENT};
pub use trainer::{
    evaluate, read_history, sample_loss, score, train, AuxLoss, CategoryRow, EvalReport, HistoryRow, Scored,
    TrainOptions, TrainReport, BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which parts of the pipeline are active and supervised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    /// Generator and refiner, both loss terms.
    Full,
    /// Generator and refiner, coarse term weight fixed at zero.
    NoReconLoss,
    /// Generator only; the coarse cloud is the output.
    I2POnly,
    /// Refiner only, fed a downsampled partial cloud repeated to the coarse
    /// point count.
    P2POnly,
}

impl AblationVariant {
    pub const ALL: [Self; 4] = [Self::Full, Self::NoReconLoss, Self::I2POnly, Self::P2POnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoReconLoss => "no-recon-loss",
            Self::I2POnly => "i2p-only",
            Self::P2POnly => "p2p-only",
        }
    }

    pub fn has_generator(self) -> bool {
        self != Self::P2POnly
    }

    pub fn has_refiner(self) -> bool {
        self != Self::I2POnly
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (full, no-recon-loss, i2p-only, p2p-only)")))
    }
}
