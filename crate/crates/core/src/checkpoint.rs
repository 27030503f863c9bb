//! Checkpoint directories: a JSON manifest plus one binary blob per parameter.
//!
//! Blob layout, all integers u64 little-endian: name length, name bytes,
//! rank, extents, then the values as row-major f64 little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::RelationVocab;
use crate::encoder::WordVocab;
use crate::error::{Error, Result};
use crate::graph::EdgeTypeVocabulary;
use crate::model::{Model, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Configuration in the flat text format.
    pub config: String,
    pub edge_types: EdgeTypeVocabulary,
    pub words: WordVocab,
    pub relations: RelationVocab,
    pub best_epoch: usize,
    pub dev_f1: f64,
    /// Parameter names with their blob file names, in registration order.
    pub params: Vec<(String, String)>,
}

pub fn encode_blob(name: &str, t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (3 + t.rank() + t.numel()) + name.len());
    out.extend((name.len() as u64).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u64).to_le_bytes());
    for &e in t.shape() {
        out.extend((e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
    out
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint(format!("blob truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn word(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_blob(bytes: &[u8]) -> Result<(String, Tensor)> {
    let mut c = Cursor { bytes, pos: 0 };
    let name_len = c.word()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
    let rank = c.word()? as usize;
    let shape = (0..rank).map(|_| c.word().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
    let numel = numel.filter(|&n| n <= bytes.len() / 8).ok_or_else(|| Error::Checkpoint(format!("bad extents {shape:?} for {name}")))?;
    let data = (0..numel).map(|_| c.word().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes in blob for {name}", bytes.len() - c.pos)));
    }
    let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    Ok((name, t))
}

fn blob_file(i: usize) -> String {
    format!("param_{i:04}.bin")
}

pub fn save(model: &Model, dir: &Path, best_epoch: usize, dev_f1: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (i, (name, t)) in model.params.iter().enumerate() {
        let file = blob_file(i);
        let path = dir.join(&file);
        fs::write(&path, encode_blob(name, t)).map_err(|e| Error::io(&path, e))?;
        params.push((name.to_string(), file));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.to_text(),
        edge_types: model.edges.clone(),
        words: model.words.clone(),
        relations: model.relations.clone(),
        best_epoch,
        dev_f1,
        params,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<(Model, Manifest)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.words.reindex();
    let config = TrainConfig::from_text(&manifest.config)?;
    let mut store = ParamStore::default();
    for (name, file) in &manifest.params {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (stored, t) = decode_blob(&bytes)?;
        if &stored != name {
            return Err(Error::Checkpoint(format!("{file} holds {stored}, manifest says {name}")));
        }
        store.add(stored, t);
    }
    let model = Model::from_parts(config, manifest.words.clone(), manifest.edge_types.clone(), manifest.relations.clone(), store)?;
    Ok((model, manifest))
}
