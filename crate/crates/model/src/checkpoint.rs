//! Two-tower checkpoint files.
//!
//! Layout: 8-byte magic, u32 format version, u32-length-prefixed JSON
//! header (tower configs, layer shapes, shared channels), all parameters
//! as little-endian f64 in a fixed order (query tables by channel name
//! then layers, then the doc tower), and an FNV-1a64 checksum footer over
//! everything before it. Floats travel as raw bits, so a round trip is
//! bit-identical.

use crate::encoder::{Activation, DenseLayer, EncoderConfig, EncoderModel, TwoTower};
use crate::ModelError;
use embr_core::fnv1a64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"EMBRCKP1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    out_dim: usize,
    in_dim: usize,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct TowerHeader {
    config: EncoderConfig,
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    query: TowerHeader,
    doc: TowerHeader,
    shared_channels: Vec<String>,
}

fn tower_header(model: &EncoderModel) -> TowerHeader {
    TowerHeader {
        config: model.config().clone(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerHeader {
                out_dim: l.weights.len(),
                in_dim: l.weights.first().map_or(0, Vec::len),
                activation: l.activation,
            })
            .collect(),
    }
}

fn push_tower_params(model: &EncoderModel, out: &mut Vec<u8>) {
    for table in model.tables().values() {
        for row in table {
            for &v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for layer in model.layers() {
        for row in &layer.weights {
            for &v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in &layer.bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(two: &TwoTower, path: &Path) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        query: tower_header(&two.query),
        doc: tower_header(&two.doc),
        shared_channels: two.shared_channels.iter().cloned().collect(),
    };
    let header_json = serde_json::to_string(&header).map_err(|e| ModelError::Format {
        file: format!("{}", path.display()),
        message: e.to_string(),
    })?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(header_json.as_bytes());
    push_tower_params(&two.query, &mut buf);
    push_tower_params(&two.doc, &mut buf);
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format {
                file: self.file.clone(),
                message: "file is truncated".into(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn row(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn read_tower(reader: &mut Reader, header: TowerHeader) -> Result<EncoderModel, ModelError> {
    let mut tables = BTreeMap::new();
    for (name, cc) in &header.config.channels {
        let table: Vec<Vec<f64>> = (0..cc.vocab_size)
            .map(|_| reader.row(cc.table_dim))
            .collect::<Result<_, _>>()?;
        tables.insert(name.clone(), table);
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let weights: Vec<Vec<f64>> = (0..lh.out_dim)
            .map(|_| reader.row(lh.in_dim))
            .collect::<Result<_, _>>()?;
        let bias = reader.row(lh.out_dim)?;
        layers.push(DenseLayer { weights, bias, activation: lh.activation });
    }
    let finite = tables
        .values()
        .flatten()
        .flatten()
        .chain(layers.iter().flat_map(|l| l.weights.iter().flatten().chain(&l.bias)))
        .all(|v| v.is_finite());
    if !finite {
        return Err(ModelError::Format {
            file: reader.file.clone(),
            message: "checkpoint contains a non-finite parameter".into(),
        });
    }
    EncoderModel::from_parts(header.config, tables, layers)
}

pub fn load_checkpoint(path: &Path) -> Result<TwoTower, ModelError> {
    let file = format!("{}", path.display());
    let buf = std::fs::read(path)?;
    if buf.len() < MAGIC.len() + 4 + 8 {
        return Err(ModelError::Format { file, message: "file is truncated".into() });
    }
    let (body, footer) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(footer.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(ModelError::Checksum { file });
    }
    let mut reader = Reader { buf: body, pos: 0, file: file.clone() };
    if reader.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::Format {
            file,
            message: "wrong file type: bad magic".into(),
        });
    }
    let version = reader.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::FormatVersion { file, got: version, expected: FORMAT_VERSION });
    }
    let header_len = reader.u32()? as usize;
    if header_len > body.len() {
        return Err(ModelError::Format { file, message: "header length exceeds file".into() });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(reader.take(header_len)?).map_err(|e| ModelError::Format {
            file: file.clone(),
            message: format!("bad header: {e}"),
        })?;

    let query = read_tower(&mut reader, header.query)?;
    let doc = read_tower(&mut reader, header.doc)?;
    if reader.pos != reader.buf.len() {
        return Err(ModelError::Format {
            file,
            message: "trailing bytes after parameters".into(),
        });
    }
    TwoTower::from_parts(query, doc, header.shared_channels.into_iter().collect())
}
