use rayon::prelude::*;

use super::weights::{
    layer_name, CLS_TOKEN, FINAL_LN_BIAS, FINAL_LN_WEIGHT, PATCH_BIAS, PATCH_WEIGHT, POOLER_BIAS,
    POOLER_WEIGHT, POSITIONS,
};
use super::{SliceFeatures, SliceSequence, TokenSequence, ViTConfig, ViTWeights};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::Activation;
use crate::params::Binder;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::SliceImage;

/// Splits an `H×W×C` image into non-overlapping `P×P` patches.
///
/// Patches are taken in raster order (left to right, then top to bottom);
/// row `k` of the result is patch `k` flattened row-major over
/// `(y, x, channel)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape(format!(
            "image must be H×W×C, got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "{h}×{w} image does not tile into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * w + px * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new([gh * gw, width], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::shape(format!(
            "{h}×{w} image does not tile into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    patches.expect_shape(&[gh * gw, patch * patch * c])?;
    let mut out = vec![0.0f32; h * w * c];
    for (k, p) in patches.data().chunks_exact(patch * patch * c).enumerate() {
        let (py, px) = (k / gw, k % gw);
        for y in 0..patch {
            let row = (py * patch + y) * w + px * patch;
            out[row * c..(row + patch) * c].copy_from_slice(&p[y * patch * c..(y + 1) * patch * c]);
        }
    }
    Tensor::new([h, w, c], out)
}

/// Graph-side view of encoder parameters.
pub struct EncoderVars<'w> {
    config: &'w ViTConfig,
    binder: Binder<'w>,
}

impl<'w> EncoderVars<'w> {
    pub fn new(weights: &'w ViTWeights, trainable: bool) -> Self {
        Self {
            config: weights.config(),
            binder: Binder::new(weights.params(), trainable),
        }
    }

    pub fn config(&self) -> &ViTConfig {
        self.config
    }

    fn var<T: Real>(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        self.binder.var(g, name)
    }

    fn layer<T: Real>(&mut self, g: &mut Graph<T>, layer: usize, suffix: &str) -> Result<Var> {
        self.binder.var(g, &layer_name(layer, suffix))
    }

    pub fn binder(&self) -> &Binder<'w> {
        &self.binder
    }

    pub fn binder_mut(&mut self) -> &mut Binder<'w> {
        &mut self.binder
    }

    pub fn eps<T: Real>(&self) -> T {
        T::of(self.config.layer_norm_eps as f64)
    }

    /// `[x_class; x_1·E; …; x_N·E]` for `patches: N×(P²C)`.
    pub fn embed<T: Real>(&mut self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        let e = self.var(g, PATCH_WEIGHT)?;
        let eb = self.var(g, PATCH_BIAS)?;
        let projected = g.linear(patches, e, eb)?;
        let cls = self.var(g, CLS_TOKEN)?;
        let d = self.config.hidden_size;
        let cls = g.reshape(cls, [1, d])?;
        g.stack_rows(&[cls, projected])
    }

    pub fn add_positional<T: Real>(&mut self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let pos = self.var(g, POSITIONS)?;
        g.add(z, pos)
    }

    /// Multi-head self-attention of layer `layer` applied to `x` (already
    /// normalized), including the output projection.
    pub fn msa<T: Real>(&mut self, g: &mut Graph<T>, x: Var, layer: usize) -> Result<Var> {
        let proj = |g: &mut Graph<T>, this: &mut Self, which: &str| -> Result<Var> {
            let w = this.layer(g, layer, &format!("attention.{which}.weight"))?;
            let b = this.layer(g, layer, &format!("attention.{which}.bias"))?;
            g.linear(x, w, b)
        };
        let q = proj(g, self, "query")?;
        let k = proj(g, self, "key")?;
        let v = proj(g, self, "value")?;
        let heads = self.config.heads;
        let a = g.attention(q, k, v, heads)?;
        let wo = self.layer(g, layer, "attention.output.weight")?;
        let bo = self.layer(g, layer, "attention.output.bias")?;
        g.linear(a, wo, bo)
    }

    /// `z' = MSA(LN₁(z)) + z`, then `z'' = MLP(LN₂(z')) + z'`.
    pub fn block<T: Real>(&mut self, g: &mut Graph<T>, z: Var, layer: usize) -> Result<Var> {
        let eps = self.eps();
        let g1 = self.layer(g, layer, "layernorm_before.weight")?;
        let b1 = self.layer(g, layer, "layernorm_before.bias")?;
        let n1 = g.layer_norm(z, g1, b1, eps)?;
        let attn = self.msa(g, n1, layer)?;
        let mid = g.add(attn, z)?;

        let g2 = self.layer(g, layer, "layernorm_after.weight")?;
        let b2 = self.layer(g, layer, "layernorm_after.bias")?;
        let n2 = g.layer_norm(mid, g2, b2, eps)?;
        let w1 = self.layer(g, layer, "mlp.fc1.weight")?;
        let c1 = self.layer(g, layer, "mlp.fc1.bias")?;
        let hidden = g.linear(n2, w1, c1)?;
        let hidden = g.activation(Activation::Gelu, hidden);
        let w2 = self.layer(g, layer, "mlp.fc2.weight")?;
        let c2 = self.layer(g, layer, "mlp.fc2.bias")?;
        let mlp = g.linear(hidden, w2, c2)?;
        g.add(mlp, mid)
    }

    /// Final layer norm on the class token, then the pooler projection.
    /// Returns `1×D_f`.
    pub fn pool<T: Real>(&mut self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let eps = self.eps();
        let cls = g.rows(z, 0, 1)?;
        let gam = self.var(g, FINAL_LN_WEIGHT)?;
        let bet = self.var(g, FINAL_LN_BIAS)?;
        let y = g.layer_norm(cls, gam, bet, eps)?;
        let wp = self.var(g, POOLER_WEIGHT)?;
        let bp = self.var(g, POOLER_BIAS)?;
        let f = g.linear(y, wp, bp)?;
        Ok(if self.config.pooler_tanh {
            g.activation(Activation::Tanh, f)
        } else {
            f
        })
    }
}

/// Full encoder on one patch matrix; returns the `1×D_f` pooled features.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    patches: Var,
    vars: &mut EncoderVars<'_>,
) -> Result<Var> {
    let embedded = vars.embed(g, patches)?;
    let mut z = vars.add_positional(g, embedded)?;
    for layer in 0..vars.config().layers {
        z = vars.block(g, z, layer)?;
    }
    vars.pool(g, z)
}

pub fn embed_tokens(patches: &Tensor, w: &ViTWeights) -> Result<TokenSequence> {
    let cfg = w.config();
    if patches.rank() != 2 || patches.last_dim() != cfg.patch_dim() {
        return Err(Error::shape(format!(
            "patch rows of width {} expected, got {:?}",
            cfg.patch_dim(),
            patches.shape()
        )));
    }
    let mut g = Graph::<f32>::new();
    let mut vars = EncoderVars::new(w, false);
    let p = g.constant_tensor(patches);
    let z = vars.embed(&mut g, p)?;
    Ok(TokenSequence {
        tokens: g.tensor(z),
    })
}

pub fn add_positional(z: &TokenSequence, w: &ViTWeights) -> Result<TokenSequence> {
    let mut g = Graph::<f32>::new();
    let mut vars = EncoderVars::new(w, false);
    let x = g.constant_tensor(&z.tokens);
    let y = vars.add_positional(&mut g, x)?;
    Ok(TokenSequence {
        tokens: g.tensor(y),
    })
}

/// Attention sublayer of `layer` applied to `z` as given (no normalization,
/// no residual).
pub fn msa(z: &TokenSequence, w: &ViTWeights, layer: usize) -> Result<TokenSequence> {
    check_layer(w, layer)?;
    let mut g = Graph::<f32>::new();
    let mut vars = EncoderVars::new(w, false);
    let x = g.constant_tensor(&z.tokens);
    let y = vars.msa(&mut g, x, layer)?;
    Ok(TokenSequence {
        tokens: g.tensor(y),
    })
}

pub fn encoder_block(z: &TokenSequence, w: &ViTWeights, layer: usize) -> Result<TokenSequence> {
    check_layer(w, layer)?;
    let mut g = Graph::<f32>::new();
    let mut vars = EncoderVars::new(w, false);
    let x = g.constant_tensor(&z.tokens);
    let y = vars.block(&mut g, x, layer)?;
    Ok(TokenSequence {
        tokens: g.tensor(y),
    })
}

pub fn pooler_features(z: &TokenSequence, w: &ViTWeights) -> Result<SliceFeatures> {
    let mut g = Graph::<f32>::new();
    let mut vars = EncoderVars::new(w, false);
    let x = g.constant_tensor(&z.tokens);
    let y = vars.pool(&mut g, x)?;
    let d = w.config().feature_dim;
    Ok(SliceFeatures {
        vector: g.tensor(y).reshape([d])?,
    })
}

fn check_layer(w: &ViTWeights, layer: usize) -> Result<()> {
    if layer >= w.layers() {
        return Err(Error::config(format!(
            "layer {layer} out of range for a {}-layer encoder",
            w.layers()
        )));
    }
    Ok(())
}

/// Full forward pass of one prepared slice.
pub fn slice_features(image: &SliceImage, w: &ViTWeights) -> Result<SliceFeatures> {
    let cfg = w.config();
    let expect = [cfg.image_size, cfg.image_size, cfg.channels];
    image.pixels.expect_shape(&expect)?;
    let patches = patchify(&image.pixels, cfg.patch_size)?;
    let mut g = Graph::<f32>::new();
    let mut vars = EncoderVars::new(w, false);
    let p = g.constant_tensor(&patches);
    let y = forward_graph(&mut g, p, &mut vars)?;
    Ok(SliceFeatures {
        vector: g.tensor(y).reshape([cfg.feature_dim])?,
    })
}

/// Runs the encoder on every slice, in parallel, and stacks the pooled
/// features in input order.
pub fn extract_slice_features(
    slices: &[SliceImage],
    w: &ViTWeights,
    expected: usize,
) -> Result<SliceSequence> {
    if slices.len() != expected {
        return Err(Error::Pipeline {
            index: slices.len().min(expected),
            reason: format!("expected {expected} slices, got {}", slices.len()),
        });
    }
    let rows: Vec<SliceFeatures> = slices
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            slice_features(s, w).map_err(|e| Error::Pipeline {
                index: i,
                reason: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let d = w.config().feature_dim;
    let mut data = Vec::with_capacity(expected * d);
    for r in &rows {
        data.extend_from_slice(r.vector.data());
    }
    SliceSequence::new(Tensor::new([expected, d], data)?)
}
