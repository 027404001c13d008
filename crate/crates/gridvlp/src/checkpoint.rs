//! Versioned binary checkpoints.
//!
//! Layout: magic + version, a JSON header describing every tensor
//! (name, shape, group) plus the run config snapshot and step count, then
//! raw little-endian f64 blobs in header order (value, adam_m, adam_v per
//! parameter). Save -> load -> save is byte-identical; loading against a
//! mismatched architecture fails with a name-level diff.

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

pub const MAGIC: &[u8; 8] = b"GRIDVLP\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub step: u64,
    pub optimizer_step: u64,
    /// Resolved run config snapshot (opaque JSON).
    pub config: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

fn group_tag(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Transformer => "transformer",
        ParamGroup::Backbone => "backbone",
    }
}

/// Write the parameter store (values + optimizer moments) and metadata.
pub fn save(
    path: &Path,
    store: &ParamStore,
    step: u64,
    optimizer_step: u64,
    config: serde_json::Value,
) -> Result<()> {
    let tensors: Vec<TensorMeta> = store
        .iter()
        .map(|(_, e)| TensorMeta {
            name: e.name.clone(),
            shape: e.value.dims().to_vec(),
            group: group_tag(e.group).to_string(),
        })
        .collect();
    let header = CheckpointHeader {
        version: VERSION,
        step,
        optimizer_step,
        config,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, e) in store.iter() {
        for t in [&*e.value, &e.adam_m, &e.adam_v] {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// (value, adam_m, adam_v) triple per tensor, in header order.
pub type TensorBlobs = Vec<(Tensor, Tensor, Tensor)>;

/// Read header and blobs; allocation only, no model knowledge.
pub fn read(path: &Path) -> Result<(CheckpointHeader, TensorBlobs)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut v4 = [0u8; 4];
    file.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut blobs = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let read_tensor = |file: &mut dyn Read| -> Result<Tensor> {
            let mut data = vec![0.0f64; n];
            let mut b8 = [0u8; 8];
            for v in &mut data {
                file.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
            Tensor::new(meta.shape.as_slice(), data)
        };
        let value = read_tensor(&mut file)?;
        let m = read_tensor(&mut file)?;
        let v = read_tensor(&mut file)?;
        blobs.push((value, m, v));
    }
    Ok((header, blobs))
}

/// Name-level difference between a checkpoint and a live store.
#[derive(Debug, Default, Serialize)]
pub struct ArchDiff {
    pub missing_in_checkpoint: Vec<String>,
    pub unexpected_in_checkpoint: Vec<String>,
    pub shape_mismatch: Vec<String>,
}

impl ArchDiff {
    pub fn is_empty(&self) -> bool {
        self.missing_in_checkpoint.is_empty()
            && self.unexpected_in_checkpoint.is_empty()
            && self.shape_mismatch.is_empty()
    }
}

fn diff(store: &ParamStore, header: &CheckpointHeader) -> ArchDiff {
    let mut d = ArchDiff::default();
    let by_name: std::collections::BTreeMap<&str, &TensorMeta> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (_, e) in store.iter() {
        match by_name.get(e.name.as_str()) {
            None => d.missing_in_checkpoint.push(e.name.clone()),
            Some(meta) if meta.shape != e.value.dims() => d.shape_mismatch.push(format!(
                "{}: checkpoint {:?} vs model {:?}",
                e.name,
                meta.shape,
                e.value.dims()
            )),
            Some(_) => {}
        }
    }
    let live: std::collections::BTreeSet<&str> = store.iter().map(|(_, e)| e.name.as_str()).collect();
    for t in &header.tensors {
        if !live.contains(t.name.as_str()) {
            d.unexpected_in_checkpoint.push(t.name.clone());
        }
    }
    d
}

/// Load a checkpoint into an architecture-identical store. Any name or
/// shape difference aborts with the full diff report.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<CheckpointHeader> {
    let (header, blobs) = read(path)?;
    let d = diff(store, &header);
    if !d.is_empty() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch:\n{}",
            serde_json::to_string_pretty(&d)?
        )));
    }
    apply(store, &header, blobs, false)?;
    Ok(header)
}

/// Load for fine-tuning: parameters present in both sides are restored,
/// parameters whose names start with an allowed prefix may be missing from
/// the checkpoint (fresh task heads). Anything else is still an error.
pub fn load_partial(path: &Path, store: &mut ParamStore, allowed_new_prefixes: &[&str]) -> Result<CheckpointHeader> {
    let (header, blobs) = read(path)?;
    let mut d = diff(store, &header);
    d.missing_in_checkpoint
        .retain(|name| !allowed_new_prefixes.iter().any(|p| name.starts_with(p)));
    if !d.is_empty() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch beyond the declared task heads:\n{}",
            serde_json::to_string_pretty(&d)?
        )));
    }
    apply(store, &header, blobs, true)?;
    Ok(header)
}

fn apply(
    store: &mut ParamStore,
    header: &CheckpointHeader,
    blobs: TensorBlobs,
    skip_missing: bool,
) -> Result<()> {
    let mut by_name = std::collections::BTreeMap::new();
    for (meta, blob) in header.tensors.iter().zip(blobs) {
        by_name.insert(meta.name.clone(), blob);
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.entry(id).name.clone();
        match by_name.remove(&name) {
            Some((value, m, v)) => {
                let e = store.entry_mut(id);
                *Arc::make_mut(&mut e.value) = value;
                e.adam_m = m;
                e.adam_v = v;
            }
            None if skip_missing => {}
            None => return Err(Error::Checkpoint(format!("tensor {name} absent from checkpoint"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VlpModel};
    use crate::nn::AttentionConfig;
    use crate::vision::BackboneConfig;

    fn tiny() -> VlpModel {
        let cfg = ModelConfig {
            attention: AttentionConfig { hidden_size: 8, num_heads: 2, ffn_size: 16, dropout_rate: 0.0 },
            encoder_layers: 1,
            decoder_layers: 1,
            num_queries: 4,
            backbone: BackboneConfig { widths: [4, 4, 8, 8] },
            max_text_len: 16,
            max_caption_len: 8,
            ..ModelConfig::default()
        };
        VlpModel::new(cfg, 32, 9).unwrap()
    }

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("gridvlp-ckpt-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tmpdir("roundtrip");
        let mut model = tiny();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        let cfg = serde_json::json!({"note": "test"});
        save(&p1, &model.store, 42, 7, cfg.clone()).unwrap();
        let header = load_into(&p1, &mut model.store).unwrap();
        assert_eq!(header.step, 42);
        assert_eq!(header.optimizer_step, 7);
        save(&p2, &model.store, 42, 7, cfg).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mismatched_architecture_reports_name_diff() {
        let dir = tmpdir("mismatch");
        let model = tiny();
        let path = dir.join("a.ckpt");
        save(&path, &model.store, 0, 0, serde_json::json!({})).unwrap();

        // different query count -> missing + unexpected + shape changes
        let cfg = ModelConfig {
            attention: AttentionConfig { hidden_size: 8, num_heads: 2, ffn_size: 16, dropout_rate: 0.0 },
            encoder_layers: 2,
            decoder_layers: 1,
            num_queries: 6,
            backbone: BackboneConfig { widths: [4, 4, 8, 8] },
            max_text_len: 16,
            max_caption_len: 8,
            ..ModelConfig::default()
        };
        let mut other = VlpModel::new(cfg, 32, 9).unwrap();
        let err = load_into(&path, &mut other.store).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("encoder.layer1"), "diff must name the missing layer: {msg}");
        assert!(msg.contains("decoder.queries"), "diff must name the reshaped tensor: {msg}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn partial_load_allows_fresh_task_heads() {
        let dir = tmpdir("partial");
        let model = tiny();
        let path = dir.join("a.ckpt");
        save(&path, &model.store, 5, 5, serde_json::json!({})).unwrap();

        let mut finetune = tiny();
        // register a fresh head that the checkpoint has never seen
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand_chacha::rand_core::SeedableRng;
        let _head = crate::nn::Linear::new(
            &mut finetune.store,
            &mut rng,
            "head.vqa",
            8,
            14,
            crate::nn::ParamGroup::Transformer,
        );
        assert!(load_into(&path, &mut finetune.store).is_err());
        let header = load_partial(&path, &mut finetune.store, &["head."]).unwrap();
        assert_eq!(header.step, 5);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tmpdir("foreign");
        let path = dir.join("not.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(read(&path), Err(Error::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
