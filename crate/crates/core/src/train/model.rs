use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lstm::{batch_sequences, bilstm_graph, BiLSTMWeights, Dropout};
use crate::params::{Binder, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vit::{forward_graph, patchify, EncoderVars, SliceSequence, ViTWeights};
use crate::volume::SliceImage;

/// Per-sample model inputs.
#[derive(Debug, Clone)]
pub enum Inputs {
    /// Precomputed slice features, `T×D_f` per sample.
    Features(Vec<SliceSequence>),
    /// Patch matrices of every prepared slice, for joint training of the
    /// encoder.
    Patches(Vec<Vec<Tensor>>),
}

impl Inputs {
    pub fn from_slices(samples: &[Vec<SliceImage>], patch: usize) -> Result<Self> {
        samples
            .iter()
            .map(|s| s.iter().map(|img| patchify(&img.pixels, patch)).collect())
            .collect::<Result<_>>()
            .map(Inputs::Patches)
    }

    pub fn len(&self) -> usize {
        match self {
            Inputs::Features(f) => f.len(),
            Inputs::Patches(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> Option<usize> {
        match self {
            Inputs::Features(f) => f.first().map(SliceSequence::len),
            Inputs::Patches(p) => p.first().map(Vec::len),
        }
    }
}

/// Classifier, optionally preceded by an encoder that is trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub lstm: BiLSTMWeights,
    pub vit: Option<ViTWeights>,
}

/// A recorded forward pass and the parameter handles it used.
pub struct Forward<'m> {
    pub probs: Var,
    lstm: Binder<'m>,
    vit: Option<EncoderVars<'m>>,
}

/// Gradients per parameter group.
pub struct Grads {
    pub lstm: ParamStore,
    pub vit: Option<ParamStore>,
}

impl<'m> Forward<'m> {
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Grads {
        Grads {
            lstm: self.lstm.grads(g),
            vit: self.vit.as_ref().map(|v| v.binder().grads(g)),
        }
    }
}

impl Model {
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &Inputs,
        batch: &[usize],
        dropout: Option<&mut Dropout>,
        trainable: bool,
    ) -> Result<Forward<'_>> {
        let cfg = self.lstm.config();
        let mut lstm = Binder::new(self.lstm.params(), trainable);
        let (x, steps, vit) = match inputs {
            Inputs::Features(all) => {
                let seqs: Vec<&SliceSequence> = batch.iter().map(|&i| &all[i]).collect();
                let (t, steps) = batch_sequences(&seqs)?;
                (g.constant_tensor(&t), steps, None)
            }
            Inputs::Patches(all) => {
                let vit_w = self.vit.as_ref().ok_or_else(|| {
                    Error::config("slice inputs need encoder weights in the model")
                })?;
                let mut vars = EncoderVars::new(vit_w, trainable);
                let d = vit_w.config().feature_dim;
                let steps = all[batch[0]].len();
                let mut rows = Vec::with_capacity(batch.len());
                for &i in batch {
                    if all[i].len() != steps {
                        return Err(Error::shape(format!(
                            "sample {i} has {} slices, expected {steps}",
                            all[i].len()
                        )));
                    }
                    let feats = all[i]
                        .iter()
                        .map(|p| {
                            let pv = g.constant_tensor(p);
                            forward_graph(g, pv, &mut vars)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let seq = g.stack_rows(&feats)?;
                    rows.push(g.reshape(seq, [1, steps * d])?);
                }
                (g.stack_rows(&rows)?, steps, Some(vars))
            }
        };
        let probs = bilstm_graph(g, &mut lstm, cfg, x, steps, dropout)?;
        Ok(Forward { probs, lstm, vit })
    }

    /// Class probabilities for `indices`, in chunks, without dropout.
    pub fn predict(&self, inputs: &Inputs, indices: &[usize]) -> Result<Tensor> {
        const CHUNK: usize = 32;
        let k = self.lstm.config().num_classes;
        let mut data = Vec::with_capacity(indices.len() * k);
        for chunk in indices.chunks(CHUNK) {
            let mut g = Graph::<f32>::new();
            let f = self.forward(&mut g, inputs, chunk, None, false)?;
            let p = g.tensor(f.probs);
            if !p.is_finite() {
                return Err(Error::Numeric("non-finite class probabilities".into()));
            }
            data.extend_from_slice(p.data());
        }
        Tensor::new([indices.len(), k], data)
    }
}
