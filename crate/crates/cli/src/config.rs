//! Run configuration: a JSON file whose fields command-line flags override.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use slicenet::pipeline::DEFAULT_SLICES;
use slicenet::train::TrainConfig;
use slicenet::vit::ViTConfig;
use slicenet::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Axial slices per volume.
    pub slices: usize,
    /// Encoder shape for `init-weights`; other commands read it from the
    /// weights file.
    pub encoder: ViTConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            weights: None,
            data: None,
            out: None,
            slices: DEFAULT_SLICES,
            encoder: ViTConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Flags shared by every command that reads a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Encoder weights (WMAN manifest).
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Dataset directory, or a feature cache file.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Directory for every file the command writes.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "K")]
    pub folds: Option<usize>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "K")]
    pub classes: Option<usize>,
    /// Width of the per-slice feature vector.
    #[arg(long, value_name = "N")]
    pub feature_dim: Option<usize>,
    /// Axial slices per volume.
    #[arg(long, value_name = "T")]
    pub slices: Option<usize>,
    /// Train the encoder jointly with the classifier.
    #[arg(long)]
    pub fine_tune_vit: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        macro_rules! set {
            ($src:expr => $($dst:tt)+) => {
                if let Some(v) = $src.clone() {
                    $($dst)+ = v;
                }
            };
        }
        for (flag, field) in [
            (&self.weights, &mut cfg.weights),
            (&self.data, &mut cfg.data),
            (&self.out, &mut cfg.out),
        ] {
            if flag.is_some() {
                field.clone_from(flag);
            }
        }
        set!(self.folds => cfg.train.folds);
        set!(self.epochs => cfg.train.epochs);
        set!(self.batch_size => cfg.train.batch_size);
        set!(self.classes => cfg.train.lstm.num_classes);
        set!(self.slices => cfg.slices);
        if let Some(d) = self.feature_dim {
            cfg.encoder.feature_dim = d;
            cfg.train.lstm.input_dim = d;
        }
        cfg.train.fine_tune_vit |= self.fine_tune_vit;
        if cfg.slices == 0 {
            return Err(Error::Config("slice count must be positive".into()));
        }
        Ok(cfg)
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Storage {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn weights(&self) -> Result<&Path> {
        self.weights
            .as_deref()
            .ok_or_else(|| Error::Config("--weights is required".into()))
    }

    pub fn data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("--data is required".into()))
    }

    pub fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "train": {"epochs": 7, "folds": 4}}"#).unwrap();
        let args = RunArgs {
            config: Some(p),
            seed: Some(9),
            folds: Some(5),
            feature_dim: Some(2048),
            ..RunArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.folds, 5);
        assert_eq!(cfg.train.lstm.input_dim, 2048);
        assert_eq!(cfg.encoder.feature_dim, 2048);
    }

    #[test]
    fn unknown_config_field_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"epochs": 7}"#).unwrap();
        let args = RunArgs {
            config: Some(p),
            ..RunArgs::default()
        };
        assert!(matches!(args.resolve(), Err(Error::Config(_))));
    }
}
