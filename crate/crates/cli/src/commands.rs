use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use slicenet::gradcheck::{run_suite, Precision, SuiteReport};
use slicenet::lstm::{classify_sequence, BiLSTMWeights, Prediction};
use slicenet::metrics::{aggregate_folds, format_table, Confusion, Metrics};
use slicenet::model_io::{
    inspect, load_checkpoint, load_vit, save_checkpoint, save_vit, write_atomic, Checkpoint,
    FeatureCache,
};
use slicenet::pipeline::{dataset_slices, extract_dataset_features, volume_features};
use slicenet::train::{evaluate, fit_with, train_full, Inputs, Model, TrainData, TrainReport};
use slicenet::vit::{ViTConfig, ViTWeights};
use slicenet::volume::{load_volume, synth_dataset, Dataset, NormConstants, SynthConfig};
use slicenet::{Error, Result};

use crate::config::{RunArgs, RunConfig};

pub const FEATURES_FILE: &str = "features.wman";
pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "model.wman";

pub fn fold_checkpoint(fold: usize) -> String {
    format!("fold-{fold}.wman")
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Storage {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub samples: usize,
    pub classes: usize,
    pub seed: u64,
    pub size: usize,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        dims: [a.size; 3],
        ..SynthConfig::default()
    };
    let ds = synth_dataset(a.samples, a.classes, &cfg, a.seed)?;
    ds.write(&a.out)?;
    println!(
        "wrote {} volumes ({} classes, {}³ voxels) to {}",
        ds.len(),
        ds.num_classes(),
        a.size,
        a.out.display()
    );
    Ok(())
}

pub fn init_weights(run: &RunArgs, toy: bool) -> Result<()> {
    let mut cfg = run.resolve()?;
    if toy {
        let d = run.feature_dim;
        cfg.encoder = ViTConfig::toy(32, 8, 2, 32, 4);
        if let Some(d) = d {
            cfg.encoder.feature_dim = d;
        }
    }
    let out = cfg.out()?;
    create_dir(out)?;
    let w = ViTWeights::init(cfg.encoder.clone(), cfg.seed)?;
    let path = out.join("vit.wman");
    save_vit(&w, &NormConstants::default(), &path)?;
    println!(
        "wrote randomly initialized encoder ({} layers, D={}, D_f={}, {} parameters) to {}",
        cfg.encoder.layers,
        cfg.encoder.hidden_size,
        cfg.encoder.feature_dim,
        ViTWeights::parameter_count(&cfg.encoder),
        path.display()
    );
    Ok(())
}

pub fn inspect_weights(path: &Path) -> Result<()> {
    let ins = inspect(path)?;
    println!("file            {}", path.display());
    println!("format version  {}", ins.format_version);
    println!("kind            {}", ins.kind.as_deref().unwrap_or("vit"));
    println!("tensors         {}", ins.tensors);
    println!("parameters      {}", ins.parameters);
    println!("encoder layers  {}", ins.encoder_layers);
    if let Some(d) = &ins.descriptor {
        println!(
            "descriptor      L={} D={} heads={} P={} image={} D_f={}",
            d.layers, d.hidden_size, d.heads, d.patch_size, d.image_size, d.feature_dim
        );
    }
    if let Some(n) = &ins.normalization {
        println!("normalization   mean {:?} std {:?}", n.mean, n.std);
    }
    match ins.audit {
        Some(Ok(())) => println!("audit           ok"),
        Some(Err(e)) => {
            println!("audit           FAILED: {e}");
            return Err(Error::Format(format!(
                "{} fails the tensor contract",
                path.display()
            )));
        }
        None => {}
    }
    Ok(())
}

pub fn extract_features(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let (w, norm) = load_vit(cfg.weights()?)?;
    let ds = Dataset::open(cfg.data()?)?;
    let out = cfg.out()?;
    create_dir(out)?;
    let start = Instant::now();
    let cache = extract_dataset_features(&ds, &w, &norm, cfg.slices, |i| {
        println!("[{}/{}] {}", i + 1, ds.len(), ds.samples[i].id)
    })?;
    let path = out.join(FEATURES_FILE);
    cache.save(&path)?;
    println!(
        "wrote {} sequences of {}×{} to {} in {:.1}s",
        cache.sequences.len(),
        cfg.slices,
        w.config().feature_dim,
        path.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Training or evaluation inputs with their provenance.
struct Loaded {
    data: TrainData,
    classes: Vec<String>,
    encoder: ViTConfig,
    vit: Option<ViTWeights>,
    normalization: Option<NormConstants>,
    slices: usize,
}

/// Reads `--data` as a feature cache (file) or a dataset directory. A
/// dataset is run through `vit`, or kept as slices when `joint`.
fn load_data(
    cfg: &RunConfig,
    vit: Option<(ViTWeights, NormConstants)>,
    joint: bool,
) -> Result<Loaded> {
    let path = cfg.data()?;
    if path.is_file() {
        if joint {
            return Err(Error::Config(
                "fine-tuning the encoder needs a dataset directory, not a feature cache".into(),
            ));
        }
        let c = FeatureCache::load(path)?;
        let slices = c.sequences.first().map_or(0, |s| s.len());
        let data = TrainData::new(
            c.ids,
            c.labels,
            c.classes.len(),
            Inputs::Features(c.sequences),
        )?;
        return Ok(Loaded {
            data,
            classes: c.classes,
            encoder: c.encoder,
            vit: None,
            normalization: None,
            slices,
        });
    }
    let ds = Dataset::open(path)?;
    let (w, norm) = match vit {
        Some(v) => v,
        None => load_vit(cfg.weights()?)?,
    };
    let inputs = if joint {
        Inputs::from_slices(
            &dataset_slices(&ds, &w, &norm, cfg.slices)?,
            w.config().patch_size,
        )?
    } else {
        let c = extract_dataset_features(&ds, &w, &norm, cfg.slices, |i| {
            println!("features [{}/{}] {}", i + 1, ds.len(), ds.samples[i].id)
        })?;
        Inputs::Features(c.sequences)
    };
    Ok(Loaded {
        data: TrainData::new(ds.ids(), ds.labels(), ds.num_classes(), inputs)?,
        classes: ds.classes.clone(),
        encoder: w.config().clone(),
        vit: Some(w),
        normalization: Some(norm),
        slices: cfg.slices,
    })
}

/// Fills classifier dimensions the user left unset from the data, and
/// rejects explicit ones that disagree.
fn adopt_dims(cfg: &mut RunConfig, run: &RunArgs, l: &Loaded) -> Result<()> {
    let width = l.encoder.feature_dim;
    match run.feature_dim {
        Some(d) if d != width => {
            return Err(Error::Compatibility(format!(
                "--feature-dim {d} but the encoder produces {width}-dim features"
            )))
        }
        _ => cfg.train.lstm.input_dim = width,
    }
    let k = l.data.num_classes;
    match run.classes {
        Some(c) if c != k => {
            return Err(Error::Data(format!(
                "--classes {c} but the data has {k} classes"
            )));
        }
        _ => cfg.train.lstm.num_classes = k,
    }
    Ok(())
}

pub fn train(run: &RunArgs, full: bool) -> Result<()> {
    let mut cfg = run.resolve()?;
    let out = cfg.out()?.to_path_buf();
    let joint = cfg.train.fine_tune_vit;
    let loaded = load_data(&cfg, None, joint)?;
    adopt_dims(&mut cfg, run, &loaded)?;
    cfg.train.validate()?;
    create_dir(&out)?;
    println!(
        "training on {} samples, {} folds, {} epochs, batch {}, seed {}{}",
        loaded.data.len(),
        cfg.train.folds,
        cfg.train.epochs,
        cfg.train.batch_size,
        cfg.seed,
        if joint { ", encoder fine-tuned" } else { "" }
    );
    let epochs = cfg.train.epochs;
    let checkpoint = |model: Model, adam, epoch, fold| Checkpoint {
        model,
        adam: Some(adam),
        epoch,
        fold,
        config: cfg.train.clone(),
        encoder: Some(loaded.encoder.clone()),
        normalization: loaded.normalization.clone(),
        classes: loaded.classes.clone(),
        slices: loaded.slices,
    };
    let report: TrainReport = fit_with(
        &loaded.data,
        &cfg.train,
        loaded.vit.as_ref().filter(|_| joint),
        |fold, s| {
            if s.epoch == epochs || s.epoch % 10 == 0 {
                println!(
                    "fold {fold} epoch {:>4}  loss {:.5}  train acc {:.3}",
                    s.epoch, s.loss, s.train_accuracy
                );
            }
        },
        |trainer, fr| {
            let c = checkpoint(
                trainer.model().clone(),
                trainer.adam().clone(),
                trainer.epoch(),
                fr.fold,
            );
            save_checkpoint(&c, &out.join(fold_checkpoint(fr.fold)))?;
            println!(
                "fold {} test: ACC {:.4}  ({} samples)",
                fr.fold,
                fr.metrics.accuracy,
                fr.test.len()
            );
            Ok(())
        },
    )?;
    write_json(&report, &out.join(REPORT_FILE))?;
    println!("{}", format_table(&report.fold_metrics(), &report.summary));
    println!(
        "wrote {} and {} fold checkpoints to {} ({:.1}s)",
        REPORT_FILE,
        report.folds.len(),
        out.display(),
        report.wall_clock_secs
    );
    if full {
        let (model, adam) = train_full(
            &loaded.data,
            &cfg.train,
            loaded.vit.as_ref().filter(|_| joint),
            |s| {
                if s.epoch == epochs || s.epoch % 10 == 0 {
                    println!("full epoch {:>4}  loss {:.5}", s.epoch, s.loss);
                }
            },
        )?;
        let c = checkpoint(model, adam, epochs, cfg.train.folds);
        save_checkpoint(&c, &out.join(MODEL_FILE))?;
        println!("wrote {} trained on all samples", MODEL_FILE);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    checkpoint: PathBuf,
    samples: usize,
    confusion: Confusion,
    metrics: Metrics,
    predictions: Vec<slicenet::train::SamplePrediction>,
}

/// Encoder used with a checkpoint: its own jointly trained copy, or the
/// `--weights` file.
fn checkpoint_encoder(c: &Checkpoint, cfg: &RunConfig) -> Result<(ViTWeights, NormConstants)> {
    let (w, norm) = match &c.model.vit {
        Some(v) => (v.clone(), c.normalization.clone().unwrap_or_default()),
        None => load_vit(cfg.weights()?)?,
    };
    if let Some(e) = &c.encoder {
        if e != w.config() {
            return Err(Error::Compatibility(
                "the checkpoint was trained on features from a different encoder".into(),
            ));
        }
    }
    Ok((w, norm))
}

pub fn evaluate_cmd(run: &RunArgs, checkpoint: &Path) -> Result<()> {
    let mut cfg = run.resolve()?;
    let c = load_checkpoint(checkpoint)?;
    cfg.slices = run.slices.unwrap_or(c.slices);
    let vit = if cfg.data()?.is_file() {
        None
    } else {
        Some(checkpoint_encoder(&c, &cfg)?)
    };
    let loaded = load_data(&cfg, vit, false)?;
    c.check_config(&slicenet::lstm::LSTMConfig {
        input_dim: loaded.encoder.feature_dim,
        num_classes: loaded.data.num_classes,
        ..c.model.lstm.config().clone()
    })?;
    let model = Model {
        lstm: c.model.lstm.clone(),
        vit: None,
    };
    let all: Vec<usize> = (0..loaded.data.len()).collect();
    let (confusion, metrics, predictions) = evaluate(&model, &loaded.data, &all)?;
    let agg = aggregate_folds(std::slice::from_ref(&metrics))?;
    println!("{}", format_table(std::slice::from_ref(&metrics), &agg));
    println!(
        "confusion (rows true, columns predicted): {:?}",
        confusion.counts
    );
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        let path = out.join("evaluation.json");
        write_json(
            &EvaluationReport {
                checkpoint: checkpoint.to_path_buf(),
                samples: all.len(),
                confusion,
                metrics,
                predictions,
            },
            &path,
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionReport<'a> {
    volume: &'a Path,
    classes: &'a [String],
    probabilities: &'a [f32],
    class: usize,
}

pub fn predict(run: &RunArgs, volume: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let mut cfg = run.resolve()?;
    let (head, w, norm, classes) = match checkpoint {
        Some(p) => {
            let c = load_checkpoint(p)?;
            cfg.slices = run.slices.unwrap_or(c.slices);
            let (w, norm) = checkpoint_encoder(&c, &cfg)?;
            (c.model.lstm, w, norm, c.classes)
        }
        None => {
            let (w, norm) = load_vit(cfg.weights()?)?;
            let mut lstm = cfg.train.lstm.clone();
            lstm.input_dim = w.config().feature_dim;
            let head = BiLSTMWeights::init(lstm, cfg.seed)?;
            let classes = (0..head.config().num_classes)
                .map(|k| format!("class{k}"))
                .collect();
            println!(
                "no checkpoint given: using an untrained classifier (seed {})",
                cfg.seed
            );
            (head, w, norm, classes)
        }
    };
    let v = load_volume(volume)?;
    let seq = volume_features(&v, &w, &norm, cfg.slices)?;
    let Prediction {
        probabilities,
        class,
    } = classify_sequence(&seq, &head)?;
    let shown: Vec<String> = probabilities.iter().map(|p| p.to_string()).collect();
    println!("probabilities: {}", shown.join(" "));
    println!(
        "class: {class} ({})",
        classes.get(class).map_or("?", String::as_str)
    );
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        let path = out.join("prediction.json");
        write_json(
            &PredictionReport {
                volume,
                classes: &classes,
                probabilities: &probabilities,
                class,
            },
            &path,
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn gradcheck(seeds: usize, seed: u64, f32_end_to_end: bool, out: Option<&Path>) -> Result<()> {
    let mut e2e = vec![Precision::F64];
    if f32_end_to_end {
        e2e.insert(0, Precision::F32);
    }
    let report: SuiteReport = run_suite(seeds, seed, &e2e)?;
    println!(
        "{:<30} {:<9} {:>12} {:>10}  result",
        "check", "precision", "max rel err", "tolerance"
    );
    for c in &report.checks {
        println!(
            "{:<30} {:<9} {:>12.3e} {:>10.0e}  {}",
            c.check.name(),
            format!("{:?}", c.precision).to_lowercase(),
            c.max_rel_error,
            c.tolerance,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {} failed, {} seeds each, {:.1}s",
        report.checks.len(),
        failed,
        seeds,
        report.seconds
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&report.checks, &dir.join("gradcheck.json"))?;
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
