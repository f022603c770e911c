//! Optimization, cross-validation and the training loop.

mod adam;
mod kfold;
mod model;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use kfold::{audit_folds, kfold_split, stratified_kfold_split, FoldPlan};
pub use model::{Forward, Grads, Inputs, Model};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::lstm::{argmax, BiLSTMWeights, Dropout, LSTMConfig};
use crate::metrics::{aggregate_folds, metrics, Aggregate, Confusion, Metrics};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::vit::ViTWeights;

const PROB_FLOOR: f64 = 1e-12;
const SHUFFLE_STREAM: u64 = 0x5A;
const DROPOUT_STREAM: u64 = 0xD0;
const INIT_STREAM: u64 = 0x1A;

/// Mean of `−ln max(p[label], 1e-12)` over rows of `probs`.
pub fn sparse_ce_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rank() != 2 || probs.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} labels for probabilities of shape {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    let k = probs.last_dim();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::data(format!("sample {i}: label {l} ≥ {k} classes")));
        }
        total -= (probs.at(i, l) as f64).max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub stratified: bool,
    pub fine_tune_vit: bool,
    pub adam: AdamConfig,
    pub lstm: LSTMConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 25,
            folds: 10,
            seed: 0,
            stratified: false,
            fine_tune_vit: false,
            adam: AdamConfig::default(),
            lstm: LSTMConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be ≥ 1"));
        }
        self.adam.validate()?;
        self.lstm.validate()
    }
}

/// Labeled inputs for training and evaluation.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub inputs: Inputs,
}

impl TrainData {
    pub fn new(
        ids: Vec<String>,
        labels: Vec<usize>,
        num_classes: usize,
        inputs: Inputs,
    ) -> Result<Self> {
        if ids.len() != labels.len() || labels.len() != inputs.len() {
            return Err(Error::data(format!(
                "{} ids, {} labels and {} inputs",
                ids.len(),
                labels.len(),
                inputs.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::data(format!(
                "sample `{}` has label {} but only {num_classes} classes exist",
                ids[i], labels[i]
            )));
        }
        Ok(Self {
            ids,
            labels,
            num_classes,
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_against(&self, cfg: &TrainConfig, vit: Option<&ViTWeights>) -> Result<()> {
        if self.num_classes != cfg.lstm.num_classes {
            return Err(Error::config(format!(
                "data has {} classes, the classifier is configured for {}",
                self.num_classes, cfg.lstm.num_classes
            )));
        }
        let width = match (&self.inputs, vit) {
            (Inputs::Features(f), _) => f.first().map(|s| s.feature_dim()),
            (Inputs::Patches(_), Some(v)) => Some(v.config().feature_dim),
            (Inputs::Patches(_), None) => {
                return Err(Error::config("joint training needs encoder weights"))
            }
        };
        if let Some(w) = width {
            if w != cfg.lstm.input_dim {
                return Err(Error::config(format!(
                    "features have width {w}, the classifier expects {}",
                    cfg.lstm.input_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// Accuracy of the training forward passes, dropout included.
    pub train_accuracy: f64,
}

/// Trains one model on a fixed index set, an epoch at a time.
///
/// All randomness derives from `(seed, fold, epoch, batch)`, so a trainer
/// rebuilt from a checkpoint continues exactly as an uninterrupted one.
pub struct FoldTrainer<'d> {
    data: &'d TrainData,
    cfg: TrainConfig,
    fold: usize,
    train: Vec<usize>,
    model: Model,
    adam: AdamState,
    epoch: usize,
}

impl<'d> FoldTrainer<'d> {
    pub fn new(
        data: &'d TrainData,
        cfg: &TrainConfig,
        fold: usize,
        train: Vec<usize>,
        vit: Option<&ViTWeights>,
    ) -> Result<Self> {
        cfg.validate()?;
        data.check_against(cfg, vit)?;
        if train.is_empty() || train.iter().any(|&i| i >= data.len()) {
            return Err(Error::data("training indices empty or out of range"));
        }
        let first = data.labels[train[0]];
        if train.iter().all(|&i| data.labels[i] == first) {
            return Err(Error::data(format!(
                "fold {fold} trains on a single class ({first})"
            )));
        }
        let lstm = BiLSTMWeights::init(
            cfg.lstm.clone(),
            derive_seed(&[cfg.seed, fold as u64, INIT_STREAM]),
        )?;
        let vit = match (&data.inputs, cfg.fine_tune_vit) {
            (Inputs::Patches(_), true) => vit.cloned(),
            (Inputs::Patches(_), false) => {
                return Err(Error::config(
                    "slice inputs are only used when fine-tuning the encoder",
                ))
            }
            (Inputs::Features(_), true) => {
                return Err(Error::config("fine-tuning the encoder needs slice inputs"))
            }
            (Inputs::Features(_), false) => None,
        };
        Ok(Self {
            data,
            cfg: cfg.clone(),
            fold,
            train,
            model: Model { lstm, vit },
            adam: AdamState::new(),
            epoch: 0,
        })
    }

    /// Continues from saved weights, optimizer state and epoch counter.
    pub fn resume(mut self, model: Model, adam: AdamState, epoch: usize) -> Result<Self> {
        for (name, shape) in BiLSTMWeights::contract(self.model.lstm.config()) {
            model.lstm.params().get(&name)?.expect_shape(&shape)?;
        }
        if model.vit.is_some() != self.model.vit.is_some() {
            return Err(Error::Compatibility(
                "checkpoint and run disagree on encoder fine-tuning".into(),
            ));
        }
        self.model = model;
        self.adam = adam;
        self.epoch = epoch;
        Ok(self)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let (seed, fold, epoch) = (self.cfg.seed, self.fold as u64, self.epoch as u64);
        let mut order = self.train.clone();
        order.shuffle(&mut rng_for(&[seed, fold, epoch, SHUFFLE_STREAM]));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| self.data.labels[i]).collect();
            let mut dropout = Dropout {
                rate: self.cfg.lstm.dropout,
                rng: rng_for(&[seed, fold, epoch, b as u64, DROPOUT_STREAM]),
            };
            let mut g = Graph::<f32>::new();
            let fwd =
                self.model
                    .forward(&mut g, &self.data.inputs, batch, Some(&mut dropout), true)?;
            let probs = g.tensor(fwd.probs);
            let loss = g.sparse_ce(fwd.probs, &labels)?;
            let lv = g.scalar(loss) as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss in fold {fold}, epoch {epoch}, batch {b}"
                )));
            }
            g.backward(loss)?;
            let grads = fwd.grads(&g);
            drop(fwd);
            loss_sum += lv * batch.len() as f64;
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(r, &l)| argmax(probs.row(r)) == l)
                .count();
            let mut groups = vec![("lstm/", self.model.lstm.params_mut(), &grads.lstm)];
            if let (Some(v), Some(gv)) = (self.model.vit.as_mut(), grads.vit.as_ref()) {
                groups.push(("vit/", v.params_mut(), gv));
            }
            self.adam.update(&self.cfg.adam, &mut groups)?;
        }
        self.epoch += 1;
        let n = order.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
        })
    }

    /// Accuracy on the training indices without dropout.
    pub fn training_accuracy(&self) -> Result<f64> {
        let p = self.model.predict(&self.data.inputs, &self.train)?;
        let hits = self
            .train
            .iter()
            .enumerate()
            .filter(|&(r, &i)| argmax(p.row(r)) == self.data.labels[i])
            .count();
        Ok(hits as f64 / self.train.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub history: Vec<EpochStats>,
    pub confusion: Confusion,
    pub metrics: Metrics,
    pub predictions: Vec<SamplePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub samples: usize,
    pub folds: Vec<FoldReport>,
    pub summary: Aggregate,
    /// Elapsed time; kept out of the serialized report so that reports from
    /// identical runs compare equal byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn fold_metrics(&self) -> Vec<Metrics> {
        self.folds.iter().map(|f| f.metrics.clone()).collect()
    }
}

/// Scores a model on `indices`.
pub fn evaluate(
    model: &Model,
    data: &TrainData,
    indices: &[usize],
) -> Result<(Confusion, Metrics, Vec<SamplePrediction>)> {
    let p = model.predict(&data.inputs, indices)?;
    let preds: Vec<SamplePrediction> = indices
        .iter()
        .enumerate()
        .map(|(r, &i)| SamplePrediction {
            id: data.ids[i].clone(),
            label: data.labels[i],
            predicted: argmax(p.row(r)),
            probabilities: p.row(r).to_vec(),
        })
        .collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let cm = Confusion::new(&labels, &predicted, data.num_classes)?;
    let m = metrics(&cm)?;
    Ok((cm, m, preds))
}

pub fn fold_plans(data: &TrainData, cfg: &TrainConfig) -> Result<Vec<FoldPlan>> {
    let plans = if cfg.stratified {
        stratified_kfold_split(&data.labels, cfg.folds, cfg.seed)?
    } else {
        kfold_split(data.len(), cfg.folds, cfg.seed)?
    };
    audit_folds(&plans, data.len())?;
    Ok(plans)
}

/// K-fold cross-validation. `on_epoch` sees every fold's progress.
pub fn fit(
    data: &TrainData,
    cfg: &TrainConfig,
    vit: Option<&ViTWeights>,
    on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<TrainReport> {
    fit_with(data, cfg, vit, on_epoch, |_, _| Ok(()))
}

/// [`fit`], additionally handing each fold's finished trainer and report to
/// `on_fold` (to save checkpoints, for instance).
pub fn fit_with(
    data: &TrainData,
    cfg: &TrainConfig,
    vit: Option<&ViTWeights>,
    mut on_epoch: impl FnMut(usize, &EpochStats),
    mut on_fold: impl FnMut(&FoldTrainer<'_>, &FoldReport) -> Result<()>,
) -> Result<TrainReport> {
    let start = Instant::now();
    cfg.validate()?;
    let plans = fold_plans(data, cfg)?;
    let mut folds = Vec::with_capacity(plans.len());
    for plan in plans {
        let mut trainer = FoldTrainer::new(data, cfg, plan.fold, plan.train.clone(), vit)?;
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let s = trainer.run_epoch()?;
            on_epoch(plan.fold, &s);
            history.push(s);
        }
        let (confusion, metrics, predictions) = evaluate(trainer.model(), data, &plan.test)?;
        let report = FoldReport {
            fold: plan.fold,
            train: plan.train,
            test: plan.test,
            history,
            confusion,
            metrics,
            predictions,
        };
        on_fold(&trainer, &report)?;
        folds.push(report);
    }
    let summary = aggregate_folds(&folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>())?;
    Ok(TrainReport {
        config: cfg.clone(),
        samples: data.len(),
        folds,
        summary,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Trains on every sample, for deployment after cross-validation.
pub fn train_full(
    data: &TrainData,
    cfg: &TrainConfig,
    vit: Option<&ViTWeights>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Model, AdamState)> {
    let mut t = FoldTrainer::new(data, cfg, cfg.folds, (0..data.len()).collect(), vit)?;
    for _ in 0..cfg.epochs {
        let s = t.run_epoch()?;
        on_epoch(&s);
    }
    let adam = t.adam().clone();
    Ok((t.into_model(), adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::SliceSequence;

    fn toy_data(n: usize) -> TrainData {
        let feats = (0..n)
            .map(|i| {
                let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
                SliceSequence::new(Tensor::from_fn([3, 4], |j| {
                    sign * (0.5 + 0.1 * (j % 4) as f32)
                }))
                .unwrap()
            })
            .collect();
        TrainData::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|i| i % 2).collect(),
            2,
            Inputs::Features(feats),
        )
        .unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            folds: 3,
            seed: 7,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            lstm: LSTMConfig {
                input_dim: 4,
                units: 4,
                layers: 2,
                dropout: 0.1,
                num_classes: 2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ce_closed_forms() {
        let uniform = Tensor::full([3, 2], 0.5);
        assert!(
            (sparse_ce_loss(&uniform, &[0, 1, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-6
        );
        let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let want = (-(0.9f64).ln() - (0.5f64).ln()) / 2.0;
        assert!((sparse_ce_loss(&p, &[0, 1]).unwrap() - want).abs() < 1e-6);
        assert!((want - 0.399_254).abs() < 1e-6);
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(sparse_ce_loss(&onehot, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn ce_hand_values() {
        let p = Tensor::from_rows(&[vec![0.25, 0.75], vec![1.0, 0.0]]).unwrap();
        let l = sparse_ce_loss(&p, &[1, 1]).unwrap();
        let want = (-(0.75f64).ln() - (1e-12f64).ln()) / 2.0;
        assert!((l - want).abs() < 1e-9);
        assert!(sparse_ce_loss(&p, &[2, 0]).is_err());
    }

    #[test]
    fn ce_matches_graph_op() {
        let p = Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
        let mut g = Graph::<f64>::new();
        let pv = g.constant_tensor(&p);
        let l = g.sparse_ce(pv, &[1, 2]).unwrap();
        assert!((g.scalar(l) - sparse_ce_loss(&p, &[1, 2]).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = toy_data(9);
        let a = fit(&data, &toy_cfg(), None, |_, _| {}).unwrap();
        let b = fit(&data, &toy_cfg(), None, |_, _| {}).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.folds.len(), 3);
        assert!(a.folds.iter().all(|f| f.history.len() == 3));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = toy_data(8);
        let cfg = toy_cfg();
        let train: Vec<usize> = (0..8).collect();
        let mut straight = FoldTrainer::new(&data, &cfg, 0, train.clone(), None).unwrap();
        for _ in 0..4 {
            straight.run_epoch().unwrap();
        }
        let mut first = FoldTrainer::new(&data, &cfg, 0, train.clone(), None).unwrap();
        first.run_epoch().unwrap();
        first.run_epoch().unwrap();
        let (m, a, e) = (first.model().clone(), first.adam().clone(), first.epoch());
        let mut resumed = FoldTrainer::new(&data, &cfg, 0, train, None)
            .unwrap()
            .resume(m, a, e)
            .unwrap();
        resumed.run_epoch().unwrap();
        resumed.run_epoch().unwrap();
        assert_eq!(resumed.model(), straight.model());
        assert_eq!(resumed.adam(), straight.adam());
    }

    #[test]
    fn single_class_fold_is_data_error() {
        let data = toy_data(6);
        let err = FoldTrainer::new(&data, &toy_cfg(), 0, vec![0, 2, 4], None)
            .err()
            .unwrap();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let data = toy_data(6);
        let mut cfg = toy_cfg();
        cfg.lstm.num_classes = 3;
        assert!(matches!(
            fit(&data, &cfg, None, |_, _| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let data = toy_data(8);
        let mut cfg = toy_cfg();
        cfg.lstm.dropout = 0.0;
        let mut t = FoldTrainer::new(&data, &cfg, 0, (0..8).collect(), None).unwrap();
        let first = t.run_epoch().unwrap().loss;
        let mut last = first;
        for _ in 0..30 {
            last = t.run_epoch().unwrap().loss;
        }
        assert!(last < 0.5 * first, "{first} → {last}");
        assert_eq!(t.training_accuracy().unwrap(), 1.0);
    }
}
