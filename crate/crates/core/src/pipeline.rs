//! Volume → slice-feature glue shared by the command-line tools.

use crate::error::{Error, Result};
use crate::model_io::FeatureCache;
use crate::vit::{extract_slice_features, SliceSequence, ViTWeights};
use crate::volume::{prepare_volume, Dataset, NormConstants, SliceImage, Volume};

/// Axial slices taken from each volume.
pub const DEFAULT_SLICES: usize = 50;

/// Prepared central slices of one volume.
pub fn volume_slices(
    v: &Volume,
    w: &ViTWeights,
    norm: &NormConstants,
    slices: usize,
) -> Result<Vec<SliceImage>> {
    prepare_volume(v, slices, w.config(), norm)
}

/// Slice features of one volume, `slices × D_f`.
pub fn volume_features(
    v: &Volume,
    w: &ViTWeights,
    norm: &NormConstants,
    slices: usize,
) -> Result<SliceSequence> {
    extract_slice_features(&volume_slices(v, w, norm, slices)?, w, slices)
}

fn sample_err(id: &str, e: Error) -> Error {
    match e {
        Error::Pipeline { index, reason } => {
            Error::Data(format!("sample `{id}`, slice {index}: {reason}"))
        }
        Error::Data(m) => Error::Data(format!("sample `{id}`: {m}")),
        other => other,
    }
}

/// Runs the frozen encoder over every sample. `progress` is called after
/// each sample with its position.
pub fn extract_dataset_features(
    ds: &Dataset,
    w: &ViTWeights,
    norm: &NormConstants,
    slices: usize,
    mut progress: impl FnMut(usize),
) -> Result<FeatureCache> {
    let mut sequences = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let v = s.volume()?;
        sequences.push(volume_features(&v, w, norm, slices).map_err(|e| sample_err(&s.id, e))?);
        progress(i);
    }
    Ok(FeatureCache {
        encoder: w.config().clone(),
        classes: ds.classes.clone(),
        ids: ds.ids(),
        labels: ds.labels(),
        sequences,
    })
}

/// Prepared slices of every sample, for joint training of the encoder.
pub fn dataset_slices(
    ds: &Dataset,
    w: &ViTWeights,
    norm: &NormConstants,
    slices: usize,
) -> Result<Vec<Vec<SliceImage>>> {
    ds.samples
        .iter()
        .map(|s| {
            let v = s.volume()?;
            volume_slices(&v, w, norm, slices).map_err(|e| sample_err(&s.id, e))
        })
        .collect()
}
