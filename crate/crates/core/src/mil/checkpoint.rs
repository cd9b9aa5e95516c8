//! Checkpoint layout: `SVCK1`, a little-endian `u32` header length, a JSON
//! header describing shapes and training settings, then one `FVEC1` block per
//! parameter tensor in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AmilModel, Classifier, ClassifierKind, EpochRecord, MlpModel, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{decode_fvec_prefix, encode_fvec, FeatureMatrix};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SVCK1";
pub const HISTORY_HEADER: &str = "epoch,train_loss,val_accuracy,val_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Classifier,
    pub train_config: TrainConfig,
    pub best_epoch: usize,
    /// Whether the model was trained on cluster-mean bags.
    pub clustering: bool,
    pub feature_source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ClassifierKind,
    classes: usize,
    dim: usize,
    /// Bag rows the MLP expects; absent for AMIL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bag_rows: Option<usize>,
    width: usize,
    best_epoch: usize,
    clustering: bool,
    feature_source: String,
    train_config: TrainConfig,
    tensors: Vec<TensorInfo>,
}

fn tensor(name: &str, rows: usize, cols: usize) -> TensorInfo {
    TensorInfo {
        name: name.into(),
        rows,
        cols,
    }
}

fn layout(h: &Header) -> Vec<TensorInfo> {
    let c = h.classes;
    match h.kind {
        ClassifierKind::Amil => vec![
            tensor("V", h.width, h.dim),
            tensor("w", 1, h.width),
            tensor("U", c, h.dim),
            tensor("b", 1, c),
        ],
        ClassifierKind::Mlp => {
            let input = h.bag_rows.unwrap_or(0) * h.dim;
            vec![
                tensor("W1", h.width, input),
                tensor("b1", 1, h.width),
                tensor("W2", c, h.width),
                tensor("b2", 1, c),
            ]
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let (dim, bag_rows, width) = match &ck.model {
        Classifier::Amil(m) => (m.dim(), None, m.width()),
        Classifier::Mlp(m) => (m.dim(), Some(m.rows()), m.hidden()),
    };
    let mut header = Header {
        kind: ck.model.kind(),
        classes: ck.model.classes(),
        dim,
        bag_rows,
        width,
        best_epoch: ck.best_epoch,
        clustering: ck.clustering,
        feature_source: ck.feature_source.clone(),
        train_config: ck.train_config.clone(),
        tensors: Vec::new(),
    };
    header.tensors = layout(&header);
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut offset = 0;
    let params = ck.model.params();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let data = params[offset..offset + n]
            .iter()
            .map(|&v| v as f32)
            .collect();
        out.extend_from_slice(&encode_fvec(&FeatureMatrix::new(t.rows, t.cols, data)?));
        offset += n;
    }
    debug_assert_eq!(offset, params.len());
    Ok(out)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m || &bytes[..m] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < m + 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: m + 4,
            actual: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[m..m + 4].try_into().unwrap()) as usize;
    let start = m + 4;
    if bytes.len() < start + len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: start + len,
            actual: bytes.len(),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[start..start + len]).map_err(|e| Error::json(path, e))?;
    let expected = layout(&header);
    if header.tensors.len() != expected.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: expected {} tensors, header lists {}",
            path.display(),
            expected.len(),
            header.tensors.len()
        )));
    }

    let mut pos = start + len;
    let mut params = Vec::new();
    for t in &expected {
        let (block, used) = decode_fvec_prefix(path, &bytes[pos..])?;
        if block.n_patches() != t.rows || block.dim() != t.cols {
            return Err(Error::DimMismatch {
                context: format!("tensor {} in {}", t.name, path.display()),
                expected: t.rows * t.cols,
                found: block.n_patches() * block.dim(),
            });
        }
        params.extend(block.data().iter().map(|&v| v as f64));
        pos += used;
    }
    if pos != bytes.len() {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - pos,
        });
    }

    let model = match header.kind {
        ClassifierKind::Amil => Classifier::Amil(AmilModel::from_params(
            header.dim,
            header.width,
            header.classes,
            params,
        )?),
        ClassifierKind::Mlp => Classifier::Mlp(MlpModel::from_params(
            header.bag_rows.unwrap_or(0),
            header.dim,
            header.width,
            header.classes,
            params,
        )?),
    };
    Ok(Checkpoint {
        model,
        train_config: header.train_config,
        best_epoch: header.best_epoch,
        clustering: header.clustering,
        feature_source: header.feature_source,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

pub fn render_history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_accuracy, r.val_loss
        ));
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_atomic(path, render_history_csv(history).as_bytes())
}
