use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vit::ViTConfig;
use crate::volume::NormConstants;

pub const WMAN_MAGIC: &[u8; 8] = b"WMAN0001";
pub const FORMAT_VERSION: u32 = 1;
/// Alignment of the blob start and of every tensor offset.
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestIndex {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<ViTConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormConstants>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus the descriptive header fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub descriptor: Option<ViTConfig>,
    pub normalization: Option<NormConstants>,
    pub metadata: serde_json::Value,
    pub tensors: ParamStore,
}

pub fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

/// Blob offsets for tensors of the given element counts, packed in order.
pub fn layout(sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut end = 0;
    for &n in sizes {
        let off = align_up(end);
        offsets.push(off);
        end = off + 4 * n;
    }
    (offsets, end)
}

impl Manifest {
    /// Builds a manifest from a list that must not repeat names.
    pub fn from_named(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in tensors {
            if store.contains(&name) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            store.insert(name, t);
        }
        Ok(Self {
            tensors: store,
            ..Self::default()
        })
    }

    pub fn index(&self) -> ManifestIndex {
        let sizes: Vec<usize> = self.tensors.iter().map(|(_, t)| t.len()).collect();
        let (offsets, _) = layout(&sizes);
        ManifestIndex {
            format_version: FORMAT_VERSION,
            descriptor: self.descriptor.clone(),
            normalization: self.normalization.clone(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .zip(offsets)
                .map(|((name, t), offset)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for (name, t) in self.tensors.iter() {
            if name.is_empty() {
                return Err(Error::Format("empty tensor name".into()));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!(
                    "tensor `{name}` has non-finite values"
                )));
            }
        }
        let index = self.index();
        let json = serde_json::to_vec(&index).expect("index serializes");
        let blob_start = align_up(16 + json.len());
        let sizes: Vec<usize> = self.tensors.iter().map(|(_, t)| t.len()).collect();
        let (_, blob_len) = layout(&sizes);
        let mut out = Vec::with_capacity(blob_start + blob_len);
        out.extend_from_slice(WMAN_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(blob_start, 0);
        for (entry, (_, t)) in index.tensors.iter().zip(self.tensors.iter()) {
            out.resize(blob_start + entry.offset, 0);
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("file too short for a WMAN header".into()));
        }
        if &bytes[..4] != b"WMAN" {
            return Err(Error::Format("not a WMAN file (bad magic)".into()));
        }
        if &bytes[..8] != WMAN_MAGIC {
            return Err(Error::Format(format!(
                "unsupported WMAN version `{}`",
                String::from_utf8_lossy(&bytes[4..8])
            )));
        }
        let len_bytes = bytes
            .get(8..16)
            .ok_or_else(|| Error::Corruption("truncated WMAN header length".into()))?;
        let json_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        let json = 16usize
            .checked_add(json_len)
            .and_then(|end| bytes.get(16..end))
            .ok_or_else(|| Error::Corruption("truncated WMAN index".into()))?;
        let index: ManifestIndex =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("WMAN index: {e}")))?;
        if index.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest format_version {}",
                index.format_version
            )));
        }
        let blob_start = align_up(16 + json_len);
        let blob = bytes.get(blob_start..).unwrap_or(&[]);
        let sizes: Vec<usize> = index
            .tensors
            .iter()
            .map(|e| e.shape.iter().product())
            .collect();
        let (expected_offsets, blob_len) = layout(&sizes);
        let mut tensors = ParamStore::new();
        for (entry, &want) in index.tensors.iter().zip(&expected_offsets) {
            if entry.offset != want {
                return Err(Error::Format(format!(
                    "tensor `{}` at offset {} but its shape places it at {want}",
                    entry.name, entry.offset
                )));
            }
            if tensors.contains(&entry.name) {
                return Err(Error::Format(format!(
                    "duplicate tensor name `{}`",
                    entry.name
                )));
            }
        }
        if blob.len() != blob_len {
            return Err(Error::Corruption(format!(
                "blob holds {} bytes but the index declares {blob_len}",
                blob.len()
            )));
        }
        for (entry, &n) in index.tensors.iter().zip(&sizes) {
            let raw = &blob[entry.offset..entry.offset + 4 * n];
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Format(format!("tensor `{}`: {e}", entry.name)))?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(Error::Format(format!(
                    "duplicate tensor name `{}`",
                    entry.name
                )));
            }
        }
        Ok(Self {
            descriptor: index.descriptor,
            normalization: index.normalization,
            metadata: index.metadata,
            tensors,
        })
    }
}

/// Writes `bytes` to a uniquely named temporary sibling, syncs it and
/// renames it over `path`, so readers see either the old file or the new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let io = |e| Error::storage(path, e);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(
        ".tmp{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io)
}

pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    write_atomic(path, &m.to_bytes()?)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    Manifest::from_bytes(&bytes)
}

/// Saves bare named tensors; names must be unique.
pub fn save_weights(tensors: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    save_manifest(&Manifest::from_named(tensors)?, path)
}

pub fn load_weights(path: &Path) -> Result<ParamStore> {
    Ok(load_manifest(path)?.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest::from_named(vec![
            ("a".into(), Tensor::from_fn([3], |i| i as f32 - 1.5)),
            (
                "b.weight".into(),
                Tensor::from_fn([5, 7], |i| (i as f32).sqrt() * -0.0),
            ),
            ("c".into(), Tensor::full([1], f32::MIN_POSITIVE)),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = sample();
        m.metadata = serde_json::json!({"kind": "test"});
        m.normalization = Some(NormConstants::default());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.wman");
        save_manifest(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((na, a), (nb, b)) in m.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b));
        }
        assert_eq!(back.metadata, m.metadata);
    }

    #[test]
    fn offsets_follow_shapes() {
        let idx = sample().index();
        // Independent arithmetic: 3 floats = 12 bytes, next slot at 64;
        // 35 floats = 140 bytes end at 204, next slot at 256.
        let offs: Vec<usize> = idx.tensors.iter().map(|e| e.offset).collect();
        assert_eq!(offs, vec![0, 64, 256]);
        let bytes = sample().to_bytes().unwrap();
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let start = (16 + json_len).div_ceil(64) * 64;
        assert_eq!(bytes.len(), start + 256 + 4);
        assert_eq!(&bytes[start + 4..start + 8], &(-0.5f32).to_le_bytes());
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = Manifest::from_named(vec![
            ("x".into(), Tensor::zeros([1])),
            ("x".into(), Tensor::zeros([2])),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn non_finite_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.wman");
        let err = save_weights(vec![("x".into(), Tensor::full([2], f32::NAN))], &p).unwrap_err();
        assert!(err.is_numeric());
        assert!(!p.exists());
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 200, 20] {
            let r = Manifest::from_bytes(&bytes[..cut]);
            assert!(matches!(r, Err(Error::Corruption(_))), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[7] = b'9';
        assert!(
            matches!(Manifest::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("version"))
        );
        bytes[0] = b'Z';
        assert!(matches!(
            Manifest::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn misplaced_offset_is_format_error() {
        let m = sample();
        let mut idx = m.index();
        idx.tensors[1].offset = 16;
        let json = serde_json::to_vec(&idx).unwrap();
        let mut bytes = WMAN_MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.resize(align_up(bytes.len()) + 260, 0);
        assert!(matches!(
            Manifest::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }
}
