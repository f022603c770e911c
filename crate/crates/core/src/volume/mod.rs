//! Volume ingestion and slice preparation.
//!
//! Volumes arrive already skull-stripped and registered; the first axis is
//! axial, ordered inferior to superior.

mod dataset;
mod synth;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

pub use dataset::{Dataset, Sample, SampleData, DATASET_INDEX};
pub use synth::{synth_dataset, SynthConfig};

pub const BVOL_MAGIC: &[u8; 8] = b"BVOL0001";
/// Canonical axis order of every [`Volume`].
pub const AXIS_ORDER: [&str; 3] = ["axial", "row", "column"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    /// `(depth, height, width)`.
    pub dims: [usize; 3],
    /// Voxel spacing in mm per axis.
    pub spacing: [f64; 3],
    pub dtype: String,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let h = Self {
            dims,
            spacing,
            dtype: "f32".into(),
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Format(format!(
                "volume dims {:?} must be ≥ 1",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Format(format!(
                "voxel spacing {:?} must be positive",
                self.spacing
            )));
        }
        if self.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype `{}`", self.dtype)));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    header: VolumeHeader,
    voxels: Tensor,
}

impl Volume {
    pub fn new(voxels: Tensor, spacing: [f64; 3]) -> Result<Self> {
        let &[d, h, w] = voxels.shape() else {
            return Err(Error::shape(format!(
                "volume must be depth×height×width, got {:?}",
                voxels.shape()
            )));
        };
        if !voxels.is_finite() {
            return Err(Error::data("volume contains non-finite voxels"));
        }
        Ok(Self {
            header: VolumeHeader::new([d, h, w], spacing)?,
            voxels,
        })
    }

    pub fn header(&self) -> &VolumeHeader {
        &self.header
    }

    pub fn voxels(&self) -> &Tensor {
        &self.voxels
    }

    pub fn depth(&self) -> usize {
        self.header.dims[0]
    }

    /// Axial slab `k` as a `height×width` tensor.
    pub fn axial(&self, k: usize) -> Tensor {
        let [_, h, w] = self.header.dims;
        Tensor::new(
            [h, w],
            self.voxels.data()[k * h * w..(k + 1) * h * w].to_vec(),
        )
        .expect("slab sized from header")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.voxels.len());
        out.extend_from_slice(BVOL_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in self.voxels.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::read_from(&mut r)
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for a BVOL header".into()))?;
        if &magic[..4] != b"BVOL" {
            return Err(Error::Format("not a BVOL file (bad magic)".into()));
        }
        if &magic != BVOL_MAGIC {
            return Err(Error::Format(format!(
                "unsupported BVOL version `{}`",
                String::from_utf8_lossy(&magic[4..])
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Corruption("truncated BVOL header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len.min(1 << 20)];
        if len > json.len() {
            return Err(Error::Corruption(format!(
                "implausible BVOL header length {len}"
            )));
        }
        r.read_exact(&mut json)
            .map_err(|_| Error::Corruption("truncated BVOL header".into()))?;
        let header: VolumeHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("BVOL header: {e}")))?;
        header.validate()?;
        let n = header.voxel_count();
        let mut blob = Vec::with_capacity(4 * n);
        r.read_to_end(&mut blob)
            .map_err(|e| Error::Corruption(format!("reading voxels: {e}")))?;
        if blob.len() != 4 * n {
            return Err(Error::Corruption(format!(
                "header declares {:?} = {n} voxels but the blob holds {} bytes ({} floats)",
                header.dims,
                blob.len(),
                blob.len() as f64 / 4.0
            )));
        }
        let data: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let voxels = Tensor::new(header.dims.to_vec(), data)?;
        if !voxels.is_finite() {
            return Err(Error::data("volume contains non-finite voxels"));
        }
        Ok(Self { header, voxels })
    }
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let tmp = path.with_extension("bvol.tmp");
    let io = |e| Error::storage(path, e);
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(io)?);
        f.write_all(&v.to_bytes()).map_err(io)?;
        f.into_inner()
            .map_err(|e| io(e.into_error()))?
            .sync_all()
            .map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let f = File::open(path).map_err(|e| Error::storage(path, e))?;
    Volume::read_from(&mut BufReader::new(f))
}

/// Index range of `count` consecutive axial slices centered in `depth`.
pub fn axial_window(depth: usize, count: usize) -> Result<Range<usize>> {
    if count == 0 || depth < count {
        return Err(Error::data(format!(
            "volume depth {depth} cannot supply {count} axial slices"
        )));
    }
    let start = (depth - count) / 2;
    Ok(start..start + count)
}

/// `count` central axial slabs, inferior to superior.
pub fn select_axial_slices(v: &Volume, count: usize) -> Result<Vec<Tensor>> {
    Ok(axial_window(v.depth(), count)?
        .map(|k| v.axial(k))
        .collect())
}

/// Per-channel standardization constants carried with the encoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for NormConstants {
    fn default() -> Self {
        Self {
            mean: vec![0.5; 3],
            std: vec![0.5; 3],
        }
    }
}

impl NormConstants {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::config(format!(
                "normalization constants must have {channels} entries, got mean {} std {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }
}

/// One prepared encoder input, `H×W×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub pixels: Tensor,
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resample_bilinear(slab: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w] = slab.shape() else {
        return Err(Error::shape(format!(
            "slab must be 2-D, got {:?}",
            slab.shape()
        )));
    };
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = slab.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new([out_h, out_w], out)
}

/// Resample to the encoder resolution, min-max rescale to `[0, 1]`,
/// replicate across channels and standardize each channel.
pub fn prepare_slice(slab: &Tensor, cfg: &ViTConfig, norm: &NormConstants) -> Result<SliceImage> {
    let &[h, w] = slab.shape() else {
        return Err(Error::shape(format!(
            "slab must be 2-D, got {:?}",
            slab.shape()
        )));
    };
    if h < 2 || w < 2 {
        return Err(Error::data(format!("slab {h}×{w} is smaller than 2×2")));
    }
    if !slab.is_finite() {
        return Err(Error::data("slab contains non-finite values"));
    }
    norm.validate(cfg.channels)?;
    let size = cfg.image_size;
    let r = resample_bilinear(slab, size, size)?;
    let lo = r.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = r.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let c = cfg.channels;
    let mut pixels = Vec::with_capacity(size * size * c);
    for &x in r.data() {
        let unit = if span > 0.0 {
            ((x - lo) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        for ch in 0..c {
            pixels.push((unit - norm.mean[ch]) / norm.std[ch]);
        }
    }
    Ok(SliceImage {
        pixels: Tensor::new([size, size, c], pixels)?,
    })
}

/// Central slices of `v`, each prepared for the encoder.
pub fn prepare_volume(
    v: &Volume,
    slices: usize,
    cfg: &ViTConfig,
    norm: &NormConstants,
) -> Result<Vec<SliceImage>> {
    select_axial_slices(v, slices)?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            prepare_slice(s, cfg, norm).map_err(|e| Error::Pipeline {
                index: i,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(d: usize, h: usize, w: usize) -> Volume {
        Volume::new(Tensor::from_fn([d, h, w], |i| i as f32), [1.0, 1.0, 1.5]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let v = Volume::new(
            Tensor::from_fn([3, 4, 5], |i| (i as f32 * 0.913).sin() * 1e3 - 0.0),
            [1.0, 0.5, 2.25],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bvol");
        write_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.header(), v.header());
        assert!(back.voxels().bit_eq(v.voxels()));
    }

    #[test]
    fn ramp_voxels_follow_generator() {
        let v = Volume::from_bytes(&ramp(6, 5, 4).to_bytes()).unwrap();
        for (k, y, x) in [(0, 0, 0), (2, 3, 1), (5, 4, 3)] {
            assert_eq!(v.axial(k).at(y, x), ((k * 5 + y) * 4 + x) as f32);
        }
    }

    #[test]
    fn short_blob_is_corruption() {
        let header = VolumeHeader::new([10, 10, 10], [1.0; 3]).unwrap();
        let json = serde_json::to_vec(&header).unwrap();
        let mut bytes = BVOL_MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend(std::iter::repeat_n(0u8, 999 * 4));
        assert!(matches!(
            Volume::from_bytes(&bytes),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let mut bytes = ramp(1, 2, 2).to_bytes();
        bytes[7] = b'2';
        assert!(
            matches!(Volume::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("version"))
        );
        bytes[0] = b'X';
        assert!(matches!(Volume::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn header_json_layout() {
        let bytes = ramp(2, 3, 4).to_bytes();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        assert_eq!(
            json,
            r#"{"dims":[2,3,4],"spacing":[1.0,1.0,1.5],"dtype":"f32"}"#
        );
        assert_eq!(bytes.len(), 16 + len + 4 * 24);
    }

    #[test]
    fn axial_window_centering() {
        assert_eq!(axial_window(180, 50).unwrap(), 65..115);
        assert_eq!(axial_window(50, 50).unwrap(), 0..50);
        assert!(axial_window(49, 50).is_err());
    }

    #[test]
    fn selection_ignores_values() {
        let v = ramp(9, 2, 2);
        let s = select_axial_slices(&v, 5).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].data()[0], 2.0 * 4.0);
        assert_eq!(s[4].data()[0], 6.0 * 4.0);
    }

    /// Separable reference: interpolation matrices `Ry·X·Rxᵀ`, built from
    /// the continuous half-pixel mapping.
    fn bilinear_reference(x: &[Vec<f64>], out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
        let matrix = |n_in: usize, n_out: usize| {
            let mut m = vec![vec![0.0; n_in]; n_out];
            for (o, row) in m.iter_mut().enumerate() {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .max(0.0)
                    .min((n_in - 1) as f64);
                for (i, wgt) in row.iter_mut().enumerate() {
                    *wgt = (1.0 - (s - i as f64).abs()).max(0.0);
                }
            }
            m
        };
        let ry = matrix(x.len(), out_h);
        let rx = matrix(x[0].len(), out_w);
        (0..out_h)
            .map(|i| {
                (0..out_w)
                    .map(|j| {
                        let mut acc = 0.0;
                        for (a, row) in x.iter().enumerate() {
                            for (b, &v) in row.iter().enumerate() {
                                acc += ry[i][a] * v * rx[j][b];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn checkerboard_upsample_matches_reference() {
        let slab = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let got = resample_bilinear(&slab, 4, 4).unwrap();
        let want = bilinear_reference(&[vec![0.0, 1.0], vec![1.0, 0.0]], 4, 4);
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                assert!((got.at(i, j) as f64 - w).abs() < 1e-6);
            }
        }
        assert_eq!(got.row(0), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn prepare_defaults_and_constant_slab() {
        let cfg = ViTConfig::default();
        let norm = NormConstants::default();
        let slab = Tensor::from_fn([40, 30], |i| (i % 17) as f32);
        let img = prepare_slice(&slab, &cfg, &norm).unwrap();
        assert_eq!(img.pixels.shape(), &[224, 224, 3]);
        assert!(img.pixels.is_finite());
        // Undo standardization: values must lie in [0, 1].
        assert!(img.pixels.data().iter().all(|&p| (-1.0..=1.0).contains(&p)));

        let cfg = ViTConfig::toy(8, 4, 1, 4, 1);
        let c = prepare_slice(&Tensor::full([5, 5], 3.0), &cfg, &norm).unwrap();
        assert!(c.pixels.data().iter().all(|&p| p == (0.0 - 0.5) / 0.5));
    }

    #[test]
    fn prepare_rejects_bad_input() {
        let cfg = ViTConfig::toy(8, 4, 1, 4, 1);
        let norm = NormConstants::default();
        let mut slab = Tensor::zeros([4, 4]);
        slab.data_mut()[3] = f32::NAN;
        assert!(matches!(
            prepare_slice(&slab, &cfg, &norm),
            Err(Error::Data(_))
        ));
        assert!(prepare_slice(&Tensor::zeros([1, 4]), &cfg, &norm).is_err());
    }
}
