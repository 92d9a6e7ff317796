//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! ```text
//! magic "VMCKPT01" | u32 version | u32 len + JSON header | u32 records
//! per record: u32 name len | name | u32 rows | u32 cols | rows*cols f64
//! ```
//! The header carries the model config, phase, epoch, best validation score
//! and the resolved run-config echo. The codebook, when present, is stored
//! as the record `codebook.centroids`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"VMCKPT01";
const VERSION: u32 = 1;
const CODEBOOK_RECORD: &str = "codebook.centroids";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub model_config: ModelConfig,
    pub store: ParamStore,
    pub codebook: Option<Codebook>,
    pub config_echo: String,
    pub best_val_statement_f1: f64,
    /// Epoch (1-based) the stored weights come from.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase: Phase,
    model_config: ModelConfig,
    config_echo: String,
    best_val_statement_f1: f64,
    epoch: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated checkpoint while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, codebook: Option<&Codebook>, phase: Phase, epoch: usize, best: f64, echo: &str) -> Self {
        Checkpoint {
            phase,
            model_config: model.config.clone(),
            store: model.store.clone(),
            codebook: codebook.cloned(),
            config_echo: echo.to_string(),
            best_val_statement_f1: best,
            epoch,
        }
    }

    /// Rebuilds the model, checking every parameter record against the
    /// shapes the stored config implies.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config.clone(), 0)?;
        model.load_store(&self.store)?;
        Ok(model)
    }

    /// Fails when the checkpoint's shape constants differ from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let have = &self.model_config;
        let pairs = [
            ("StatementMatrix n", have.n, expected.n),
            ("StatementMatrix r", have.r, expected.r),
            ("ScopeMatrix q", have.q, expected.q),
            ("ModelConfig d", have.d, expected.d),
            ("ModelConfig h", have.h, expected.h),
            ("ModelConfig layers", have.layers, expected.layers),
            ("ModelConfig heads", have.heads, expected.heads),
            ("ModelConfig vocab_size", have.vocab_size, expected.vocab_size),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::Checkpoint(format!("{name}: checkpoint has {a}, config expects {b}")));
            }
        }
        if have.pooling != expected.pooling {
            return Err(Error::Checkpoint(format!(
                "ModelConfig pooling: checkpoint has {}, config expects {}",
                have.pooling, expected.pooling
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            phase: self.phase,
            model_config: self.model_config.clone(),
            config_echo: self.config_echo.clone(),
            best_val_statement_f1: self.best_val_statement_f1,
            epoch: self.epoch,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut records: Vec<(&str, &Array2<f64>)> = self.store.iter().map(|(_, n, v)| (n, v)).collect();
        if let Some(cb) = &self.codebook {
            records.push((CODEBOOK_RECORD, &cb.centroids));
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, value) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
            for x in value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("header length")?;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
        header.model_config.validate()?;
        let expected = Model::new(header.model_config.clone(), 0)?;

        let count = r.u32("record count")?;
        let mut store = ParamStore::new();
        let mut codebook = None;
        for _ in 0..count {
            let name_len = r.u32("record name length")?;
            let name = std::str::from_utf8(r.take(name_len, "record name")?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32(&name)?;
            let cols = r.u32(&name)?;
            let raw = r.take(rows * cols * 8, &name)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Array2::from_shape_vec((rows, cols), data).expect("sized above");
            if name == CODEBOOK_RECORD {
                if cols != header.model_config.h {
                    return Err(Error::Checkpoint(format!(
                        "record {name}: width {cols} does not match h={}",
                        header.model_config.h
                    )));
                }
                codebook = Some(Codebook::new(value)?);
                continue;
            }
            let id = expected
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter record {name}")))?;
            let want = expected.store.get(id).dim();
            if want != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "record {name}: shape ({rows}, {cols}) does not match expected {want:?}"
                )));
            }
            if store.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record {name}")));
            }
            store.add(name, value);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last record".into()));
        }
        for (_, name, _) in expected.store.iter() {
            if store.id(name).is_none() {
                return Err(Error::Checkpoint(format!("missing parameter record {name}")));
            }
        }
        if header.phase == Phase::Main && codebook.is_none() {
            return Err(Error::Checkpoint(format!("missing record {CODEBOOK_RECORD}")));
        }
        Ok(Checkpoint {
            phase: header.phase,
            model_config: header.model_config,
            store,
            codebook,
            config_echo: header.config_echo,
            best_val_statement_f1: header.best_val_statement_f1,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
