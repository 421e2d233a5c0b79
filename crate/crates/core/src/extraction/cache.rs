//! Content-addressed feature cache.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! magic "FADC" | version u32 = 1 | dim u32 | count u32
//! count × ( key_len u16 | key utf-8 | dim × f32 )
//! ```
//!
//! Keys are hex SHA-256 of backend id ‖ template fingerprint ‖ prompt bytes ‖
//! kind tag. A JSON sidecar (`<file>.json`) carries backend, model and
//! template metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FADC";
const VERSION: u32 = 1;

pub fn cache_key(backend_id: &str, template_fingerprint: &str, prompt: &str, kind_tag: &str) -> String {
    let mut h = Sha256::new();
    for part in [backend_id, template_fingerprint, prompt, kind_tag] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub backend_id: String,
    pub model_id: String,
    pub template_fingerprint: String,
    pub kind_tag: String,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Default)]
struct Inner {
    dim: usize,
    keys: Vec<String>,
    rows: HashMap<String, Vec<f32>>,
    meta: CacheMeta,
    dirty: bool,
}

/// One cache file holding vectors of a single width.
#[derive(Debug)]
pub struct FeatureCache {
    path: Option<PathBuf>,
    inner: RwLock<Inner>,
}

impl FeatureCache {
    pub fn in_memory(meta: CacheMeta) -> Self {
        FeatureCache {
            path: None,
            inner: RwLock::new(Inner {
                meta,
                ..Default::default()
            }),
        }
    }

    /// Opens `path`, or starts an empty cache if it does not exist yet.
    pub fn open(path: impl Into<PathBuf>, meta: CacheMeta) -> Result<Self> {
        let path = path.into();
        let mut inner = Inner {
            meta,
            ..Default::default()
        };
        if path.exists() {
            let (dim, records) = read_records(&mut fs::File::open(&path)?)?;
            inner.dim = dim;
            for (k, v) in records {
                if inner.rows.insert(k.clone(), v).is_none() {
                    inner.keys.push(k);
                }
            }
            let sidecar = sidecar_path(&path);
            if sidecar.exists() {
                let stored: CacheMeta = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
                if stored.backend_id != inner.meta.backend_id
                    || stored.template_fingerprint != inner.meta.template_fingerprint
                    || stored.kind_tag != inner.meta.kind_tag
                {
                    return Err(Error::CacheFormat(format!(
                        "{} was written for a different backend, template or feature kind",
                        path.display()
                    )));
                }
                inner.meta.extra = stored.extra;
            }
        }
        Ok(FeatureCache {
            path: Some(path),
            inner: RwLock::new(inner),
        })
    }

    pub fn get(&self, key: &str) -> Option<Vec<f32>> {
        self.inner.read().unwrap().rows.get(key).cloned()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.inner.read().unwrap().rows.contains_key(key)
    }

    pub fn insert(&self, key: String, values: Vec<f32>) -> Result<()> {
        if key.len() > u16::MAX as usize {
            return Err(Error::CacheFormat("key too long".into()));
        }
        let mut inner = self.inner.write().unwrap();
        if inner.dim == 0 {
            inner.dim = values.len();
        } else if inner.dim != values.len() {
            return Err(Error::DimensionMismatch {
                expected: inner.dim,
                got: values.len(),
            });
        }
        if inner.rows.insert(key.clone(), values).is_none() {
            inner.keys.push(key);
        }
        inner.dirty = true;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inner.read().unwrap().dim
    }

    pub fn meta(&self) -> CacheMeta {
        self.inner.read().unwrap().meta.clone()
    }

    pub fn set_extra(&self, key: &str, value: serde_json::Value) {
        let mut inner = self.inner.write().unwrap();
        if inner.meta.extra.get(key) != Some(&value) {
            inner.meta.extra.insert(key.to_string(), value);
            inner.dirty = true;
        }
    }

    pub fn extra(&self, key: &str) -> Option<serde_json::Value> {
        self.inner.read().unwrap().meta.extra.get(key).cloned()
    }

    /// Writes the file and sidecar atomically if anything changed.
    pub fn flush(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let mut inner = self.inner.write().unwrap();
        if !inner.dirty {
            return Ok(());
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            write_records(&mut w, inner.dim, inner.keys.iter().map(|k| (k.as_str(), inner.rows[k].as_slice())))?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&inner.meta)?)?;
        inner.dirty = false;
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_records<'a, W: Write>(
    w: &mut W,
    dim: usize,
    records: impl ExactSizeIterator<Item = (&'a str, &'a [f32])>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (key, values) in records {
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: values.len(),
            });
        }
        let len = u16::try_from(key.len()).map_err(|_| Error::CacheFormat("key too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<(usize, Vec<(String, Vec<f32>)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CacheFormat("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::CacheFormat(format!("unsupported version {version}")));
    }
    let dim = read_u32(r)? as usize;
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut key = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut key)?;
        let key = String::from_utf8(key).map_err(|_| Error::CacheFormat("key is not utf-8".into()))?;
        let mut buf = vec![0u8; dim * 4];
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((key, values));
    }
    Ok((dim, out))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// A directory of cache files, one per (backend, template, kind tag).
/// Clones share opened files, so concurrent runs see each other's inserts.
#[derive(Debug, Clone)]
pub struct CacheDir {
    root: PathBuf,
    open: Arc<Mutex<HashMap<PathBuf, Arc<FeatureCache>>>>,
}

impl CacheDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CacheDir {
            root: root.into(),
            open: Default::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, meta: &CacheMeta) -> PathBuf {
        let id = cache_key(&meta.backend_id, &meta.template_fingerprint, "", &meta.kind_tag);
        self.root.join(format!("{}.fadc", &id[..16]))
    }

    pub fn open(&self, meta: CacheMeta) -> Result<Arc<FeatureCache>> {
        let path = self.path_for(&meta);
        let mut open = self.open.lock().unwrap();
        if let Some(c) = open.get(&path) {
            return Ok(Arc::clone(c));
        }
        let c = Arc::new(FeatureCache::open(path.clone(), meta)?);
        open.insert(path, Arc::clone(&c));
        Ok(c)
    }
}
