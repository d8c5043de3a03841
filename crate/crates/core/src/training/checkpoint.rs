//! Binary checkpoint: header, architecture hash, resolved config, named
//! parameter blobs in registration order, optional optimizer and trainer
//! state, and a SHA-256 trailer over everything before it.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::trainer::HistoryRow;
use super::AblationVariant;
use crate::autodiff::{AdamState, Matrix, ParamStore};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::CompletionModel;

const MAGIC: &[u8; 8] = b"PCCCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub adam: AdamState<f32>,
    pub best_val_cd: f64,
    pub history: Vec<HistoryRow>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch_hash: String,
    pub config: PipelineConfig,
    pub variant: AblationVariant,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ParamStore<f32>,
    pub trainer: Option<TrainerState>,
}

impl Checkpoint {
    /// Rebuilds the model for `config`, which must describe the same
    /// architecture, with the stored parameters.
    pub fn into_model(self, config: &PipelineConfig) -> Result<CompletionModel<f32>> {
        let arch = config.arch();
        if arch.hash() != self.arch_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint architecture hash {} does not match config hash {}",
                self.arch_hash,
                arch.hash()
            )));
        }
        let mut model = CompletionModel::new(&arch, self.variant, 0)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }

    /// Loads the stored parameters into a model of the requested variant.
    pub fn into_variant(self, config: &PipelineConfig, variant: AblationVariant) -> Result<CompletionModel<f32>> {
        Self { variant, ..self }.into_model(config)
    }

    /// Model with the checkpoint's own config and variant.
    pub fn model(&self) -> Result<CompletionModel<f32>> {
        self.clone().into_model(&self.config.clone())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend(s.as_bytes());
    }
    fn matrix(&mut self, m: &Matrix<f32>) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for v in m.data() {
            self.0.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.corrupt("invalid UTF-8 string"))
    }
    fn matrix(&mut self) -> Result<Matrix<f32>> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        let n = r.checked_mul(c).and_then(|n| n.checked_mul(4)).ok_or_else(|| self.corrupt("matrix too large"))?;
        let b = self.take(n)?;
        let data = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Matrix::new(r, c, data))
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &CompletionModel<f32>,
    config: &PipelineConfig,
    epoch: usize,
    trainer: Option<&TrainerState>,
) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&model.arch.hash());
    w.str(model.variant.name());
    w.str(&config.to_toml());
    w.u64(epoch as u64);
    w.u32(model.store.len() as u32);
    for (name, m) in model.store.iter() {
        w.str(name);
        w.matrix(m);
    }
    match trainer {
        None => w.u8(0),
        Some(t) => {
            w.u8(1);
            w.u64(t.adam.step);
            for m in t.adam.first.iter().chain(&t.adam.second) {
                w.matrix(m);
            }
            w.f64(t.best_val_cd);
            w.str(&HistoryRow::to_csv(&t.history));
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend(digest);
    // Write-then-rename so an interrupted save never leaves a torn file.
    let path = path.as_ref();
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, &w.0)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let corrupt = |reason: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
        path,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let arch_hash = r.str()?;
    let variant: AblationVariant = r.str()?.parse().map_err(|_| corrupt("unknown variant"))?;
    let config = PipelineConfig::from_toml_str(&r.str()?).map_err(|e| corrupt(&format!("embedded config: {e}")))?;
    if config.arch().hash() != arch_hash {
        return Err(corrupt("embedded config does not match its architecture hash"));
    }
    let epoch = r.u64()? as usize;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        if params.find(&name).is_some() {
            return Err(corrupt("duplicate parameter name"));
        }
        let m = r.matrix()?;
        params.add(name, m);
    }
    let trainer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut moments = Vec::with_capacity(2 * n);
            for _ in 0..2 * n {
                moments.push(r.matrix()?);
            }
            let second = moments.split_off(n);
            let best_val_cd = r.f64()?;
            let history = HistoryRow::from_csv(&r.str()?).map_err(|e| corrupt(&e.to_string()))?;
            Some(TrainerState {
                adam: AdamState {
                    step,
                    first: moments,
                    second,
                },
                best_val_cd,
                history,
            })
        }
        _ => return Err(corrupt("bad trainer-state flag")),
    };
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        arch_hash,
        config,
        variant,
        epoch,
        params,
        trainer,
    })
}
