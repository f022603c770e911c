//! Seeded synthetic volumes: a background plateau with noise, plus a
//! Gaussian blob whose presence and position encode the class.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, SampleData, Volume};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `(depth, height, width)`.
    pub dims: [usize; 3],
    pub background: f32,
    pub noise_std: f32,
    /// Peak blob intensity above background.
    pub amplitude: f32,
    /// Blob radius parameter, in voxels.
    pub sigma: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            background: 1.0,
            noise_std: 0.1,
            amplitude: 0.5,
            sigma: 4.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config("synthetic dims must be ≥ 1"));
        }
        if !(self.noise_std >= 0.0) || !(self.sigma > 0.0) || !self.amplitude.is_finite() {
            return Err(Error::config(
                "synthetic noise, sigma and amplitude must be finite, sigma > 0",
            ));
        }
        Ok(())
    }

    /// Blob center of class `c`, or `None` for the blob-free class 0.
    pub fn blob_center(&self, class: usize, num_classes: usize) -> Option<[f32; 3]> {
        if class == 0 {
            return None;
        }
        let [d, h, w] = self.dims.map(|x| x as f32);
        let x = w * class as f32 / num_classes as f32;
        Some([(d - 1.0) / 2.0, (h - 1.0) / 2.0, x - 0.5])
    }

    /// Noise-free blob contribution at voxel `(k, y, x)`.
    pub fn blob(&self, center: [f32; 3], k: usize, y: usize, x: usize) -> f32 {
        let d2 = (k as f32 - center[0]).powi(2)
            + (y as f32 - center[1]).powi(2)
            + (x as f32 - center[2]).powi(2);
        self.amplitude * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn volume(&self, class: usize, num_classes: usize, seed: u64, index: u64) -> Volume {
        let [d, h, w] = self.dims;
        let center = self.blob_center(class, num_classes);
        let mut rng = rng_for(&[seed, 0x5917, index]);
        let noise = Normal::new(0.0f32, self.noise_std).expect("validated noise std");
        let mut data = Vec::with_capacity(d * h * w);
        for k in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let blob = center.map_or(0.0, |c| self.blob(c, k, y, x));
                    data.push(self.background + blob + noise.sample(&mut rng));
                }
            }
        }
        Volume::new(
            Tensor::new([d, h, w], data).expect("sized from dims"),
            [1.0; 3],
        )
        .expect("finite synthetic voxels")
    }
}

/// `n` labeled volumes with labels `i mod num_classes`, so classes are
/// balanced to within one sample.
pub fn synth_dataset(
    n: usize,
    num_classes: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    if !(2..=3).contains(&num_classes) {
        return Err(Error::config(format!(
            "num_classes must be 2 or 3, got {num_classes}"
        )));
    }
    if n < num_classes {
        return Err(Error::config(format!(
            "{n} samples cannot cover {num_classes} classes"
        )));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let label = i % num_classes;
            Sample {
                id: format!("s{i:04}"),
                label,
                data: SampleData::Memory(cfg.volume(label, num_classes, seed, i as u64)),
            }
        })
        .collect();
    Dataset::new(
        (0..num_classes).map(|c| format!("class{c}")).collect(),
        samples,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            dims: [12, 16, 16],
            sigma: 2.5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small();
        let a = synth_dataset(4, 2, &cfg, 11).unwrap();
        let b = synth_dataset(4, 2, &cfg, 11).unwrap();
        let c = synth_dataset(4, 2, &cfg, 12).unwrap();
        for i in 0..4 {
            let va = a.samples[i].volume().unwrap();
            assert!(va.voxels().bit_eq(b.samples[i].volume().unwrap().voxels()));
            assert!(!va.voxels().bit_eq(c.samples[i].volume().unwrap().voxels()));
        }
    }

    #[test]
    fn labels_are_balanced() {
        let ds = synth_dataset(7, 3, &small(), 0).unwrap();
        let counts = (0..3).map(|c| ds.labels().iter().filter(|&&l| l == c).count());
        assert_eq!(counts.collect::<Vec<_>>(), vec![3, 2, 2]);
        let ds = synth_dataset(20, 2, &small(), 0).unwrap();
        assert_eq!(ds.labels().iter().filter(|&&l| l == 1).count(), 10);
    }

    #[test]
    fn blob_region_separates_classes() {
        let cfg = small();
        let n = 40;
        let ds = synth_dataset(n, 2, &cfg, 3).unwrap();
        let center = cfg.blob_center(1, 2).unwrap();
        let region: Vec<[usize; 3]> = (5..7)
            .flat_map(|k| (7..9).flat_map(move |y| (7..9).map(move |x| [k, y, x])))
            .collect();
        // Reference blob profile over the region, computed independently.
        let expected: f64 = region
            .iter()
            .map(|&[k, y, x]| {
                let d2 = (k as f64 - center[0] as f64).powi(2)
                    + (y as f64 - center[1] as f64).powi(2)
                    + (x as f64 - center[2] as f64).powi(2);
                cfg.amplitude as f64 * (-d2 / (2.0 * (cfg.sigma as f64).powi(2))).exp()
            })
            .sum::<f64>()
            / region.len() as f64;
        let mut means = [0.0f64; 2];
        for s in &ds.samples {
            let v = s.volume().unwrap();
            let [_, h, w] = v.header().dims;
            let m: f64 = region
                .iter()
                .map(|&[k, y, x]| v.voxels().data()[(k * h + y) * w + x] as f64)
                .sum::<f64>()
                / region.len() as f64;
            means[s.label] += m / (n / 2) as f64;
        }
        let diff = means[1] - means[0];
        assert!(
            (diff - expected).abs() < cfg.noise_std as f64,
            "{diff} vs {expected}"
        );
        assert!(expected > 0.8 * cfg.amplitude as f64);
    }

    #[test]
    fn rejects_bad_class_count() {
        assert!(synth_dataset(4, 4, &small(), 0).is_err());
        assert!(synth_dataset(1, 2, &small(), 0).is_err());
    }
}
