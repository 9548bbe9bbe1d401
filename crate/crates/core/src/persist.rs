//! Binary and manifest formats for the base model, checkpoints and feature
//! banks. Model and checkpoint arrays are little-endian `f32`; bank vectors
//! are kept at full `f64` precision.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token_init::ConceptTokenBlock;
use crate::trainer::{Checkpoint, TrainConfig};
use crate::vision::{FeatureBank, FeatureSpace, TowerConfig};
use crate::vlm::{BaseModel, ModelConfig, Params, ThetaParams};

pub const BASE_MAGIC: &[u8; 8] = b"MCPBASE\0";
pub const BASE_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BANK_VERSION: u32 = 2;

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

fn get_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

fn get_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
}

/// Writes through a temporary sibling so a failed write leaves no partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("base model file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

pub fn encode_base(model: &BaseModel, tower: &TowerConfig) -> Vec<u8> {
    let c = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(BASE_MAGIC);
    for v in [BASE_VERSION, c.vocab as u32, c.dim as u32, c.layers as u32, c.heads as u32, c.mlp as u32, c.context as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(tower.patch as u32).to_le_bytes());
    out.extend_from_slice(&(tower.channels as u32).to_le_bytes());
    out.extend_from_slice(&tower.seed.to_le_bytes());
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        put_f32s(&mut out, t);
    }
    out
}

pub fn decode_base(bytes: &[u8]) -> Result<(BaseModel, TowerConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != BASE_MAGIC {
        return Err(Error::Format("not a base model file".into()));
    }
    let version = r.u32()?;
    if version != BASE_VERSION {
        return Err(Error::Format(format!("unsupported base model version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let cfg = ModelConfig { vocab: dims[0], dim: dims[1], layers: dims[2], heads: dims[3], mlp: dims[4], context: dims[5] };
    cfg.validate().map_err(|e| Error::Format(format!("bad model dimensions: {e}")))?;
    let tower = TowerConfig { patch: r.u32()? as usize, channels: r.u32()? as usize, seed: r.u64()? };
    let mut params = Params::zeros(&cfg);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(Error::Format(format!("expected {} arrays, found {count}", names.len())));
    }
    for (want, slot) in names.iter().zip(params.tensors_mut()) {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        if name != want {
            return Err(Error::Format(format!("expected array {want}, found {name}")));
        }
        let n = r.u64()? as usize;
        if n != slot.len() {
            return Err(Error::Format(format!("array {name} holds {n} values, expected {}", slot.len())));
        }
        *slot = get_f32s(r.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last array".into()));
    }
    if !params.is_finite() {
        return Err(Error::Format("base model holds non-finite values".into()));
    }
    Ok((BaseModel { cfg, params }, tower))
}

/// The pre-trained base model shipped with the crate.
pub fn bundled_base() -> Result<(BaseModel, TowerConfig)> {
    decode_base(include_bytes!("../assets/base.bin"))
}

pub fn save_base(model: &BaseModel, tower: &TowerConfig, path: &Path) -> Result<()> {
    write_atomic(path, &encode_base(model, tower))
}

pub fn load_base(path: &Path) -> Result<(BaseModel, TowerConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_base(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the binary file, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub scenario: String,
    pub identifiers: Vec<String>,
    pub concepts: Vec<String>,
    pub k: usize,
    pub dim: usize,
    pub config: TrainConfig,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub arrays: Vec<ArrayEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path, stem: &str) -> Result<()> {
    let theta = &ckpt.theta;
    let dim = theta.blocks.first().map_or(0, ConceptTokenBlock::dim);
    let k = theta.blocks.first().map_or(0, ConceptTokenBlock::k);
    let mut data = Vec::new();
    let mut arrays = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: &[&[f64]]| {
        let cols = rows.first().map_or(0, |r| r.len());
        arrays.push(ArrayEntry { name, rows: rows.len(), cols, offset });
        for r in rows {
            put_f32s(&mut data, r);
            offset += r.len();
        }
    };
    for (j, b) in theta.blocks.iter().enumerate() {
        push(format!("blocks.{j}.sks"), &[&b.sks]);
        push(format!("blocks.{j}.tokens"), &b.tokens.iter().map(Vec::as_slice).collect::<Vec<_>>());
    }
    push("classifier".into(), &theta.classifier.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let manifest = CheckpointManifest {
        format: "mcpersona-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        scenario: ckpt.scenario.clone(),
        identifiers: ckpt.identifiers.clone(),
        concepts: theta.blocks.iter().map(|b| b.concept.clone()).collect(),
        k,
        dim,
        config: ckpt.config,
        epoch: ckpt.epoch,
        loss_history: ckpt.loss_history.clone(),
        arrays,
    };
    let (json, bin) = paths(dir, stem);
    write_atomic(&bin, &data)?;
    write_atomic(&json, &json_bytes(&manifest)?)
}

fn rows_of(values: &[f64], e: &ArrayEntry) -> Result<Vec<Vec<f64>>> {
    let end = e.offset + e.rows * e.cols;
    if end > values.len() || e.cols == 0 {
        return Err(Error::Format(format!("array {} lies outside the binary file", e.name)));
    }
    Ok(values[e.offset..end].chunks_exact(e.cols).map(<[f64]>::to_vec).collect())
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<Checkpoint> {
    let (json, bin) = paths(dir, stem);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&json)?)?;
    if manifest.format != "mcpersona-checkpoint" || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let bytes = fs::read(&bin)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("checkpoint binary is not a whole number of floats".into()));
    }
    let values = get_f32s(&bytes);
    let find = |name: &str| {
        manifest.arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Format(format!("checkpoint lacks array {name}")))
    };
    let mut blocks = Vec::new();
    for (j, concept) in manifest.concepts.iter().enumerate() {
        let sks = rows_of(&values, find(&format!("blocks.{j}.sks"))?)?.pop().ok_or_else(|| Error::Format("empty sks".into()))?;
        let tokens = rows_of(&values, find(&format!("blocks.{j}.tokens"))?)?;
        blocks.push(ConceptTokenBlock { concept: concept.clone(), sks, tokens });
    }
    let classifier = rows_of(&values, find("classifier")?)?;
    let theta = ThetaParams { blocks, classifier };
    theta.validate(manifest.dim).map_err(|e| Error::Format(format!("inconsistent checkpoint: {e}")))?;
    if manifest.identifiers.len() != theta.m() {
        return Err(Error::Format("identifier count differs from block count".into()));
    }
    Ok(Checkpoint {
        scenario: manifest.scenario,
        identifiers: manifest.identifiers,
        config: manifest.config,
        epoch: manifest.epoch,
        loss_history: manifest.loss_history,
        theta,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEntry {
    pub concept: String,
    pub l: usize,
    pub c: usize,
    pub space: FeatureSpace,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankManifest {
    pub format: String,
    pub version: u32,
    pub banks: Vec<BankEntry>,
}

pub fn save_banks(banks: &[FeatureBank], dir: &Path, stem: &str) -> Result<()> {
    let mut data = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for b in banks {
        entries.push(BankEntry { concept: b.concept.clone(), l: b.len(), c: b.dim, space: b.space, offset });
        for v in &b.vectors {
            put_f64s(&mut data, v);
        }
        offset += b.len() * b.dim;
    }
    let manifest = BankManifest { format: "mcpersona-banks".into(), version: BANK_VERSION, banks: entries };
    let (json, bin) = paths(dir, stem);
    write_atomic(&bin, &data)?;
    write_atomic(&json, &json_bytes(&manifest)?)
}

pub fn load_banks(dir: &Path, stem: &str) -> Result<Vec<FeatureBank>> {
    let (json, bin) = paths(dir, stem);
    let manifest: BankManifest = serde_json::from_slice(&fs::read(&json)?)?;
    if manifest.format != "mcpersona-banks" || manifest.version != BANK_VERSION {
        return Err(Error::Format("unsupported bank manifest".into()));
    }
    let bytes = fs::read(&bin)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("bank file is truncated".into()));
    }
    let values = get_f64s(&bytes);
    manifest
        .banks
        .iter()
        .map(|e| {
            let entry = ArrayEntry { name: e.concept.clone(), rows: e.l, cols: e.c, offset: e.offset };
            FeatureBank::new(e.concept.clone(), e.space, rows_of(&values, &entry)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_init::random_block;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab: 260, dim: 8, layers: 1, heads: 2, mlp: 16, context: 32 }
    }

    #[test]
    fn base_round_trip_and_corruption() {
        let model = BaseModel::random(tiny(), 3).unwrap();
        let tower = TowerConfig { patch: 8, channels: 16, seed: 9 };
        let bytes = encode_base(&model, &tower);
        let (back, t) = decode_base(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(t, tower);
        assert!(decode_base(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_base(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_base(&extra).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let blocks = vec![random_block("c1", 3, 8, 1.0, 1).unwrap(), random_block("c2", 3, 8, 1.0, 2).unwrap()];
        let mut theta = ThetaParams::new(blocks).unwrap();
        theta.classifier[1][2] = 0.5;
        let mut flat = theta.flatten();
        crate::linalg::round_f32(&mut flat);
        theta.assign(&flat);
        let ckpt = Checkpoint {
            scenario: "s".into(),
            identifiers: vec!["<sks1>".into(), "<sks2>".into()],
            config: TrainConfig::default(),
            epoch: 15,
            loss_history: vec![2.0, 1.5],
            theta,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt, dir.path(), "seed-0").unwrap();
        assert_eq!(load_checkpoint(dir.path(), "seed-0").unwrap(), ckpt);
        assert!(load_checkpoint(dir.path(), "missing").is_err());
    }

    #[test]
    fn bank_round_trip() {
        let b = FeatureBank::new("c1", FeatureSpace::Encoder, vec![vec![0.5, 0.25], vec![1.0, -2.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_banks(std::slice::from_ref(&b), dir.path(), "banks").unwrap();
        assert_eq!(load_banks(dir.path(), "banks").unwrap(), vec![b]);
    }
}
