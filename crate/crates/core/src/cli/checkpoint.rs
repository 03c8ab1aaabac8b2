//! Model checkpoints: a magic line, one JSON header line with the tensor
//! shapes and the training config, then every parameter tensor as
//! little-endian `f32` in a fixed order (encoder A layers, encoder B layers,
//! prototypes; each layer as weight then bias).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::ndmath::{Matrix, ParamSet};
use crate::trainer::{Modality, Model, TrainConfig};

const MAGIC: &[u8] = b"SWCK1\n";
const MAGIC_STEM: &[u8] = b"SWCK";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    /// `[rows, cols]` of each encoder A tensor, weight then bias per layer.
    encoder_a: Vec<[usize; 2]>,
    encoder_b: Vec<[usize; 2]>,
    prototypes: [usize; 2],
    config: TrainConfig,
}

/// A model with the config that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
}

fn tensor_shapes(model: &Model, m: Modality) -> Vec<[usize; 2]> {
    model
        .encoder(m)
        .param_ids()
        .map(|id| {
            let (r, c) = model.params().get(id).value.shape();
            [r, c]
        })
        .collect()
}

impl Checkpoint {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        Checkpoint { model, config }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let (k, d) = model.prototype_values().shape();
        let header = Header {
            encoder_a: tensor_shapes(model, Modality::A),
            encoder_b: tensor_shapes(model, Modality::B),
            prototypes: [k, d],
            config: self.config.clone(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(serde_json::to_string(&header).expect("header").as_bytes());
        out.push(b'\n');
        let ids = model
            .encoder(Modality::A)
            .param_ids()
            .chain(model.encoder(Modality::B).param_ids())
            .chain(std::iter::once(model.prototypes().id()));
        for id in ids {
            for &v in model.params().get(id).value.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            let found =
                String::from_utf8_lossy(&bytes[..bytes.len().min(MAGIC.len())]).into_owned();
            if bytes.starts_with(MAGIC_STEM) {
                return Err(FormatError::Version(found).into());
            }
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found,
            }
            .into());
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| FormatError::Header("missing header line terminator".into()))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| FormatError::Header(e.to_string()))?;
        if !header.encoder_a.len().is_multiple_of(2) || !header.encoder_b.len().is_multiple_of(2) {
            return Err(FormatError::Header(
                "encoder tensors must come in weight/bias pairs".into(),
            )
            .into());
        }
        let mut payload = &rest[nl + 1..];
        let mut params = ParamSet::new();
        let shapes = header
            .encoder_a
            .iter()
            .chain(&header.encoder_b)
            .chain(std::iter::once(&header.prototypes));
        for &[r, c] in shapes {
            let n = r
                .checked_mul(c)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| FormatError::Header(format!("tensor shape {r}x{c} overflows")))?;
            if payload.len() < n {
                return Err(FormatError::Truncated {
                    section: "parameters",
                    expected: n,
                    actual: payload.len(),
                }
                .into());
            }
            let (head, tail) = payload.split_at(n);
            payload = tail;
            let data = head
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            params.add(Matrix::from_vec(r, c, data)?);
        }
        if !payload.is_empty() {
            return Err(FormatError::TrailingBytes(payload.len()).into());
        }
        let model = Model::from_parts(
            params,
            header.encoder_a.len() / 2,
            header.encoder_b.len() / 2,
        )
        .map_err(|e| FormatError::Header(e.to_string()))?;
        Ok(Checkpoint {
            model,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
