//! Labeled volume collections and their on-disk index.

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_volume, write_volume, Volume};
use crate::error::{Error, Result};

/// Index file name inside a dataset directory.
pub const DATASET_INDEX: &str = "dataset.json";

#[derive(Debug, Clone)]
pub enum SampleData {
    Memory(Volume),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub data: SampleData,
}

impl Sample {
    pub fn volume(&self) -> Result<Cow<'_, Volume>> {
        match &self.data {
            SampleData::Memory(v) => Ok(Cow::Borrowed(v)),
            SampleData::File(p) => load_volume(p).map(Cow::Owned),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    classes: Vec<String>,
    samples: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    id: String,
    file: String,
    label: usize,
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::data("a dataset needs at least two classes"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if s.label >= classes.len() {
                return Err(Error::data(format!(
                    "sample `{}` has label {} but only {} classes exist",
                    s.id,
                    s.label,
                    classes.len()
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::data(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Self { classes, samples })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Writes every volume as `<id>.bvol` plus the index.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for s in &self.samples {
            let file = format!("{}.bvol", s.id);
            write_volume(&*s.volume()?, &dir.join(&file))?;
            entries.push(IndexEntry {
                id: s.id.clone(),
                file,
                label: s.label,
            });
        }
        let index = IndexFile {
            classes: self.classes.clone(),
            samples: entries,
        };
        let path = dir.join(DATASET_INDEX);
        let json = serde_json::to_vec_pretty(&index).expect("index serializes");
        std::fs::write(&path, json).map_err(|e| Error::storage(&path, e))
    }

    /// Reads the index; volumes stay on disk until requested.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_INDEX);
        let bytes = std::fs::read(&path).map_err(|e| Error::storage(&path, e))?;
        let index: IndexFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let samples = index
            .samples
            .into_iter()
            .map(|e| Sample {
                data: SampleData::File(dir.join(&e.file)),
                id: e.id,
                label: e.label,
            })
            .collect();
        Self::new(index.classes, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{synth_dataset, SynthConfig};

    #[test]
    fn write_then_open() {
        let cfg = SynthConfig {
            dims: [3, 4, 4],
            ..SynthConfig::default()
        };
        let ds = synth_dataset(3, 2, &cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::open(dir.path()).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.ids(), ds.ids());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert!(a
                .volume()
                .unwrap()
                .voxels()
                .bit_eq(b.volume().unwrap().voxels()));
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let s = Sample {
            id: "x".into(),
            label: 2,
            data: SampleData::File("x.bvol".into()),
        };
        let err = Dataset::new(vec!["a".into(), "b".into()], vec![s]).unwrap_err();
        assert!(err.to_string().contains("`x`"));
    }
}
