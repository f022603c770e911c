//! Stacked bidirectional LSTM classifier over slice-feature sequences.
//!
//! Each direction of layer `l` keeps `W_ih: D_in×4U`, `W_hh: U×4U` and
//! `b: 4U` with gate blocks ordered input, forget, candidate, output. The
//! two directions of a layer see the same input and their hidden states are
//! concatenated per time step. The classifier reads the last forward state
//! and the last backward state (the one at position 0).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::params::{Binder, ParamStore};
use crate::real::Real;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::vit::SliceSequence;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

pub fn lstm_name(layer: usize, dir: Direction, suffix: &str) -> String {
    format!("lstm.{layer}.{}.{suffix}", dir.tag())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LSTMConfig {
    /// Width of each input feature vector.
    pub input_dim: usize,
    /// Hidden units per direction.
    pub units: usize,
    /// Stacked bidirectional layers.
    pub layers: usize,
    /// Inverted dropout on the input of every layer after the first.
    pub dropout: f32,
    pub num_classes: usize,
}

impl Default for LSTMConfig {
    fn default() -> Self {
        Self {
            input_dim: 768,
            units: 64,
            layers: 6,
            dropout: 0.15,
            num_classes: 2,
        }
    }
}

impl LSTMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.units == 0 || self.layers == 0 {
            return Err(Error::config("input_dim, units and layers must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be 2 or 3, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            2 * self.units
        }
    }
}

/// Borrowed parameters of one direction of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LSTMCellParams<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub bias: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLSTMWeights {
    config: LSTMConfig,
    params: ParamStore,
}

impl BiLSTMWeights {
    pub fn contract(cfg: &LSTMConfig) -> Vec<(String, Vec<usize>)> {
        let u = cfg.units;
        let mut out = Vec::new();
        for l in 0..cfg.layers {
            for dir in [Direction::Forward, Direction::Backward] {
                out.push((lstm_name(l, dir, "w_ih"), vec![cfg.layer_input(l), 4 * u]));
                out.push((lstm_name(l, dir, "w_hh"), vec![u, 4 * u]));
                out.push((lstm_name(l, dir, "bias"), vec![4 * u]));
            }
        }
        out.push((HEAD_WEIGHT.into(), vec![2 * u, cfg.num_classes]));
        out.push((HEAD_BIAS.into(), vec![cfg.num_classes]));
        out
    }

    /// Xavier-uniform matrices, zero biases except a forget-gate bias of 1.
    pub fn init(config: LSTMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(&[seed, 0x157A]);
        let u = config.units;
        let params = Self::contract(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::from_fn(shape, |i| if (u..2 * u).contains(&i) { 1.0 } else { 0.0 })
                } else if name == HEAD_BIAS {
                    Tensor::zeros(shape)
                } else {
                    xavier(&shape, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: LSTMConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.audit(&Self::contract(&config))?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LSTMConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn cell(&self, layer: usize, dir: Direction) -> Result<LSTMCellParams<'_>> {
        Ok(LSTMCellParams {
            w_ih: self.params.get(&lstm_name(layer, dir, "w_ih"))?,
            w_hh: self.params.get(&lstm_name(layer, dir, "w_hh"))?,
            bias: self.params.get(&lstm_name(layer, dir, "bias"))?,
        })
    }

    /// Replaces one tensor, keeping the shape contract.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.params.get_mut(name)?;
        t.expect_shape(slot.shape())?;
        *slot = t;
        Ok(())
    }

    pub fn parameter_count(cfg: &LSTMConfig) -> usize {
        Self::contract(cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

fn xavier(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-limit..=limit))
}

/// One recurrence step for a single example: returns `(h_t, c_t)`.
pub fn lstm_cell_step(
    x: &[f32],
    h: &[f32],
    c: &[f32],
    p: LSTMCellParams<'_>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let u = h.len();
    if c.len() != u
        || p.w_ih.shape() != [x.len(), 4 * u]
        || p.w_hh.shape() != [u, 4 * u]
        || p.bias.shape() != [4 * u]
    {
        return Err(Error::shape(format!(
            "lstm step: x {} h {} c {} W_ih {:?} W_hh {:?} b {:?}",
            x.len(),
            u,
            c.len(),
            p.w_ih.shape(),
            p.w_hh.shape(),
            p.bias.shape()
        )));
    }
    let mut z = p.bias.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (zj, &w) in z.iter_mut().zip(p.w_ih.row(i)) {
            *zj += xi * w;
        }
    }
    for (i, &hi) in h.iter().enumerate() {
        for (zj, &w) in z.iter_mut().zip(p.w_hh.row(i)) {
            *zj += hi * w;
        }
    }
    let mut h_new = vec![0.0; u];
    let mut c_new = vec![0.0; u];
    for j in 0..u {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[u + j]);
        let g = z[2 * u + j].tanh();
        let o = sigmoid(z[3 * u + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    Ok((h_new, c_new))
}

/// Dropout masks for one forward pass.
pub struct Dropout {
    pub rate: f32,
    pub rng: ChaCha8Rng,
}

/// Graph-side forward pass for a batch.
///
/// `x` is `m×(T·D_in)`, each row one sequence of `T` feature vectors laid
/// end to end. Returns the `m×K` class probabilities.
pub fn bilstm_graph<T: Real>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_>,
    cfg: &LSTMConfig,
    x: Var,
    steps: usize,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let readout = bilstm_readout_graph(g, binder, cfg, x, steps, dropout)?;
    let hw = binder.var(g, HEAD_WEIGHT)?;
    let hb = binder.var(g, HEAD_BIAS)?;
    let logits = g.linear(readout, hw, hb)?;
    Ok(g.softmax(logits))
}

/// The `m×2U` sequence representation `h_fwd[T−1] ‖ h_bwd[0]` of the last
/// layer.
pub fn bilstm_readout_graph<T: Real>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_>,
    cfg: &LSTMConfig,
    x: Var,
    steps: usize,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let &[m, width] = g.shape(x) else {
        return Err(Error::shape(format!(
            "sequence batch must be 2-D, got {:?}",
            g.shape(x)
        )));
    };
    if steps == 0 || width != steps * cfg.input_dim {
        return Err(Error::shape(format!(
            "sequence rows of {width} values do not hold {steps} steps of width {}",
            cfg.input_dim
        )));
    }
    let u = cfg.units;
    let mut inputs: Vec<Var> = (0..steps)
        .map(|t| g.columns(x, t * cfg.input_dim, cfg.input_dim))
        .collect::<Result<_>>()?;
    let mut last_fwd = None;
    let mut last_bwd = None;
    for layer in 0..cfg.layers {
        if layer > 0 {
            if let Some(d) = dropout.as_deref_mut() {
                if d.rate > 0.0 {
                    inputs = inputs
                        .into_iter()
                        .map(|v| apply_dropout(g, v, d))
                        .collect::<Result<_>>()?;
                }
            }
        }
        let mut outs = [vec![None; steps], vec![None; steps]];
        for (slot, dir) in [Direction::Forward, Direction::Backward]
            .into_iter()
            .enumerate()
        {
            let w = binder.var(g, &lstm_name(layer, dir, "w_ih"))?;
            let r = binder.var(g, &lstm_name(layer, dir, "w_hh"))?;
            let b = binder.var(g, &lstm_name(layer, dir, "bias"))?;
            let mut h = g.constant(vec![T::zero(); m * u], [m, u])?;
            let mut c = h;
            let order: Box<dyn Iterator<Item = usize>> = match dir {
                Direction::Forward => Box::new(0..steps),
                Direction::Backward => Box::new((0..steps).rev()),
            };
            for t in order {
                let hc = g.lstm_cell(inputs[t], h, c, w, r, b)?;
                h = g.columns(hc, 0, u)?;
                c = g.columns(hc, u, u)?;
                outs[slot][t] = Some(h);
            }
        }
        let fwd: Vec<Var> = outs[0]
            .iter()
            .map(|v| v.expect("every step visited"))
            .collect();
        let bwd: Vec<Var> = outs[1]
            .iter()
            .map(|v| v.expect("every step visited"))
            .collect();
        last_fwd = Some(fwd[steps - 1]);
        last_bwd = Some(bwd[0]);
        inputs = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect::<Result<_>>()?;
    }
    g.concat_cols(&[
        last_fwd.expect("at least one layer"),
        last_bwd.expect("at least one layer"),
    ])
}

fn apply_dropout<T: Real>(g: &mut Graph<T>, v: Var, d: &mut Dropout) -> Result<Var> {
    let keep = 1.0 - d.rate;
    let scale = T::of(1.0 / keep as f64);
    let mask: Vec<T> = (0..g.value(v).len())
        .map(|_| {
            if d.rng.gen::<f32>() < keep {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let shape = g.shape(v).to_vec();
    let mask = g.constant(mask, shape)?;
    g.mul(v, mask)
}

/// Flattens sequences into the `m×(T·D)` layout of [`bilstm_graph`].
pub fn batch_sequences(seqs: &[&SliceSequence]) -> Result<(Tensor, usize)> {
    let first = seqs.first().ok_or_else(|| Error::data("empty batch"))?;
    let (steps, d) = (first.len(), first.feature_dim());
    let mut data = Vec::with_capacity(seqs.len() * steps * d);
    for (i, s) in seqs.iter().enumerate() {
        if s.len() != steps || s.feature_dim() != d {
            return Err(Error::shape(format!(
                "sequence {i} is {}×{}, expected {steps}×{d}",
                s.len(),
                s.feature_dim()
            )));
        }
        data.extend_from_slice(s.features.data());
    }
    Ok((Tensor::new([seqs.len(), steps * d], data)?, steps))
}

fn run_batch<F>(w: &BiLSTMWeights, seqs: &[&SliceSequence], f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph<f32>, &mut Binder<'_>, &LSTMConfig, Var, usize) -> Result<Var>,
{
    let (x, steps) = batch_sequences(seqs)?;
    let cfg = w.config();
    if x.last_dim() != steps * cfg.input_dim {
        return Err(Error::shape(format!(
            "features have width {}, the classifier expects {}",
            x.last_dim() / steps,
            cfg.input_dim
        )));
    }
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::new(w.params(), false);
    let xv = g.constant_tensor(&x);
    let out = f(&mut g, &mut binder, cfg, xv, steps)?;
    Ok(g.tensor(out))
}

/// Sequence representations (`m×2U`) for a batch, without dropout.
pub fn sequence_representation(w: &BiLSTMWeights, seqs: &[&SliceSequence]) -> Result<Tensor> {
    run_batch(w, seqs, |g, b, cfg, x, steps| {
        bilstm_readout_graph(g, b, cfg, x, steps, None)
    })
}

/// Class probabilities for a batch of sequences, without dropout.
pub fn predict_proba(w: &BiLSTMWeights, seqs: &[&SliceSequence]) -> Result<Tensor> {
    let probs = run_batch(w, seqs, |g, b, cfg, x, steps| {
        bilstm_graph(g, b, cfg, x, steps, None)
    })?;
    if !probs.is_finite() {
        return Err(Error::Numeric(
            "classifier produced non-finite probabilities".into(),
        ));
    }
    Ok(probs)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f32>,
    pub class: usize,
}

pub fn classify_sequence(seq: &SliceSequence, w: &BiLSTMWeights) -> Result<Prediction> {
    let p = predict_proba(w, &[seq])?;
    let probabilities = p.row(0).to_vec();
    Ok(Prediction {
        class: argmax(&probabilities),
        probabilities,
    })
}
