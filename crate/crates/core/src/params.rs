//! Named parameter storage and the checkpoint format.
//!
//! A checkpoint is a flat little-endian `f64` file holding every tensor in
//! name order, plus a JSON manifest with names, shapes, flags, the model
//! description, and the SHA-256 of the flat file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Trained by the optimizer unless frozen.
    Param,
    /// Fixed tensor carried with the model (normalized adjacency, fixed
    /// transfer matrices). Never receives gradients.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: Tensor,
    pub kind: Kind,
    pub frozen: bool,
}

impl Entry {
    pub fn trainable(&self) -> bool {
        self.kind == Kind::Param && !self.frozen
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: Kind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("parameter '{name}' already exists")));
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                kind,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, Kind::Param)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, Kind::Buffer)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.frozen = true;
        }
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        self.entry(name).map(|e| e.frozen)
    }

    /// Puts `name` on the tape: trainable parameters as gradient leaves,
    /// everything else as constants.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let e = self.entry(name)?;
        Ok(tape.leaf(e.value.clone(), e.trainable()))
    }

    /// SHA-256 over names, shapes, and values of the selected entries.
    pub fn checksum<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<String> {
        let mut h = Sha256::new();
        for name in names {
            let e = self.entry(name)?;
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(e.value.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn checksum_all(&self) -> String {
        self.checksum(self.entries.keys().map(String::as_str))
            .expect("own names resolve")
    }

    /// Checksum over frozen entries only.
    pub fn frozen_checksum(&self) -> String {
        let names: Vec<&str> = self
            .entries
            .iter()
            .filter(|(_, e)| e.frozen)
            .map(|(k, _)| k.as_str())
            .collect();
        self.checksum(names).expect("own names resolve")
    }
}

/// Gradients keyed by parameter name.
pub type NamedGrads = BTreeMap<String, Tensor>;

/// Parameters bound on one tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' was not bound")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    /// Binds every entry of `store` whose name starts with one of
    /// `prefixes` (all entries when `prefixes` is empty).
    pub fn bind(store: &ParamStore, tape: &mut Tape, prefixes: &[String]) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for name in store.names() {
            if prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                vars.insert(name.to_string(), store.bind(tape, name)?);
            }
        }
        Ok(Self { vars })
    }

    /// Extracts gradients of the trainable entries.
    pub fn gradients(&self, store: &ParamStore, grads: &mut Gradients) -> Result<NamedGrads> {
        let mut out = NamedGrads::new();
        for (name, &v) in &self.vars {
            if store.entry(name)?.trainable() {
                if let Some(g) = grads.take(v) {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

/// Adds `src` into `dst`, entry by entry.
pub fn accumulate(dst: &mut NamedGrads, src: NamedGrads) {
    for (k, g) in src {
        match dst.get_mut(&k) {
            Some(acc) => acc.add_assign(&g),
            None => {
                dst.insert(k, g);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: Kind,
    pub frozen: bool,
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// JSON side of a checkpoint. `model` is opaque here; the owning model type
/// (de)serializes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub sha256: String,
    pub entries: Vec<EntryMeta>,
    pub model: serde_json::Value,
    /// Anything else worth keeping: seed, iterations run, sampler state.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// `foo.bin` → `foo.json`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn save_checkpoint(
    bin: &Path,
    store: &ParamStore,
    model: serde_json::Value,
    extra: serde_json::Value,
) -> Result<Manifest> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (name, e) in store.iter() {
        bytes.extend(e.value.to_le_bytes());
        entries.push(EntryMeta {
            name: name.to_string(),
            shape: e.value.shape().to_vec(),
            kind: e.kind,
            frozen: e.frozen,
        });
    }
    if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT,
        sha256: hex::encode(Sha256::digest(&bytes)),
        entries,
        model,
        extra,
    };
    fs::write(bin, &bytes).map_err(|e| Error::io(bin, e))?;
    let mp = manifest_path(bin);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mp, e))?;
    fs::write(&mp, text + "\n").map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

/// Reads a checkpoint and verifies the flat file against the manifest.
pub fn load_checkpoint(bin: &Path) -> Result<(ParamStore, Manifest)> {
    let mp = manifest_path(bin);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: unreadable manifest: {e}", mp.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Integrity(format!(
            "{}: unsupported checkpoint format {}",
            mp.display(),
            manifest.format
        )));
    }
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.sha256 {
        return Err(Error::Integrity(format!(
            "{}: checksum {digest} does not match manifest {}",
            bin.display(),
            manifest.sha256
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for m in &manifest.entries {
        let n = m.shape.iter().product::<usize>() * 8;
        let chunk = bytes.get(offset..offset + n).ok_or_else(|| {
            Error::Integrity(format!("{}: truncated at '{}'", bin.display(), m.name))
        })?;
        offset += n;
        let value = Tensor::from_le_bytes(&m.shape, chunk)?;
        store.insert(&m.name, value, m.kind)?;
        store.entries.get_mut(&m.name).expect("just inserted").frozen = m.frozen;
    }
    if offset != bytes.len() {
        return Err(Error::Integrity(format!(
            "{}: {} trailing bytes after the last entry",
            bin.display(),
            bytes.len() - offset
        )));
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add_param("a.w", Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]))
            .unwrap();
        s.add_buffer("a.adj", Tensor::eye(2)).unwrap();
        s.add_param("b.w", Tensor::from_rows(&[&[-1.0]])).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.add_param("a.w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn buffers_and_frozen_entries_bind_as_constants() {
        let mut s = store();
        let mut t = Tape::new();
        let b = Bound::bind(&s, &mut t, &[]).unwrap();
        assert!(t.requires_grad(b.get("a.w").unwrap()));
        assert!(!t.requires_grad(b.get("a.adj").unwrap()));
        s.freeze_all();
        let mut t = Tape::new();
        let b = Bound::bind(&s, &mut t, &["b.".to_string()]).unwrap();
        assert!(!t.requires_grad(b.get("b.w").unwrap()));
        assert!(b.try_get("a.w").is_none());
    }

    #[test]
    fn checksum_tracks_values_and_names() {
        let s = store();
        let mut t = s.clone();
        assert_eq!(s.checksum_all(), t.checksum_all());
        t.get_mut("b.w").unwrap().data_mut()[0] = -1.0 + 1e-16 * 4.0;
        assert_ne!(s.checksum_all(), t.checksum_all());
        assert_eq!(s.checksum(["a.w"]).unwrap(), t.checksum(["a.w"]).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ck.bin");
        let mut s = store();
        s.entries.get_mut("a.w").unwrap().frozen = true;
        save_checkpoint(&bin, &s, serde_json::json!({"k": 1}), serde_json::Value::Null).unwrap();
        let (back, manifest) = load_checkpoint(&bin).unwrap();
        assert_eq!(back, s);
        assert_eq!(manifest.model["k"], 1);

        let mut bytes = fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bin), Err(Error::Integrity(_))));
    }
}
