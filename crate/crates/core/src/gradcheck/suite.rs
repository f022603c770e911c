//! Finite-difference checks over every differentiable operation, plus
//! end-to-end checks through the toy encoder and the Bi-LSTM.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{grad_check, GradCheckResult, Precision};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::kernels::Activation;
use crate::lstm::{bilstm_graph, lstm_name, BiLSTMWeights, Direction, LSTMConfig, HEAD_WEIGHT};
use crate::params::Binder;
use crate::real::Real;
use crate::rng::rng_for;
use crate::vit::{
    forward_graph, layer_name, EncoderVars, ViTConfig, ViTWeights, CLS_TOKEN, POOLER_WEIGHT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    MatmulLeft,
    MatmulRight,
    AddRow,
    Mul,
    LayerNormInput,
    LayerNormGamma,
    LayerNormBeta,
    Softmax,
    Gelu,
    Tanh,
    Sigmoid,
    AttentionQuery,
    AttentionKey,
    AttentionValue,
    LstmCellInput,
    LstmCellHidden,
    LstmCellState,
    LstmCellInputWeights,
    LstmCellRecurrentWeights,
    LstmCellBias,
    SoftmaxCrossEntropy,
    EncoderPatches,
    EncoderQueryWeight,
    EncoderClassToken,
    EncoderPooler,
    BiLstmInput,
    BiLstmInputWeights,
    BiLstmHead,
}

impl Check {
    pub const KERNELS: [Check; 21] = [
        Check::MatmulLeft,
        Check::MatmulRight,
        Check::AddRow,
        Check::Mul,
        Check::LayerNormInput,
        Check::LayerNormGamma,
        Check::LayerNormBeta,
        Check::Softmax,
        Check::Gelu,
        Check::Tanh,
        Check::Sigmoid,
        Check::AttentionQuery,
        Check::AttentionKey,
        Check::AttentionValue,
        Check::LstmCellInput,
        Check::LstmCellHidden,
        Check::LstmCellState,
        Check::LstmCellInputWeights,
        Check::LstmCellRecurrentWeights,
        Check::LstmCellBias,
        Check::SoftmaxCrossEntropy,
    ];

    pub const END_TO_END: [Check; 7] = [
        Check::EncoderPatches,
        Check::EncoderQueryWeight,
        Check::EncoderClassToken,
        Check::EncoderPooler,
        Check::BiLstmInput,
        Check::BiLstmInputWeights,
        Check::BiLstmHead,
    ];

    pub fn is_end_to_end(self) -> bool {
        Check::END_TO_END.contains(&self)
    }

    /// Pass threshold: the precision's kernel threshold, or 1e-3 for the
    /// end-to-end checks in either precision.
    pub fn tolerance(self, precision: Precision) -> f64 {
        if self.is_end_to_end() {
            1e-3
        } else {
            precision.tolerance()
        }
    }

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.gen_range(lo..hi))).collect()
}

/// Positive readout weights, so the readout depends on every output element
/// with the same sign.
fn positive<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    uniform(rng, n, 0.5, 1.5)
}

/// One-hot readout weights picking one random column per row.
fn select<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<T> {
    let mut w = vec![T::zero(); rows * cols];
    for r in 0..rows {
        w[r * cols + rng.gen_range(0..cols)] = T::one();
    }
    w
}

/// Readout weights for layer normalization of `x` (rows of length `d`).
///
/// The input gradient of `Σ w ⊙ LN(x)` is the projection of `γ ⊙ w` off the
/// span of the ones vector and the standardized row, so a generic `w` puts
/// some elements near zero. Each row instead gets a vector already in that
/// complement whose smallest component is at least a quarter of its largest.
fn layer_norm_weights<T: Real>(rng: &mut ChaCha8Rng, x: &[T], gamma: &[T]) -> Vec<T> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let mean = row.iter().sum::<f64>() / d as f64;
        let norm = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        let unit: Vec<f64> = row.iter().map(|v| (v - mean) / norm).collect();
        let t = loop {
            let mut t: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tm = t.iter().sum::<f64>() / d as f64;
            t.iter_mut().for_each(|v| *v -= tm);
            let dot: f64 = t.iter().zip(&unit).map(|(a, b)| a * b).sum();
            t.iter_mut().zip(&unit).for_each(|(v, u)| *v -= dot * u);
            let lo = t.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            let hi = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if lo >= 0.25 * hi {
                break t;
            }
        };
        out.extend(t.iter().zip(gamma).map(|(v, g)| T::of(v / g.as_f64())));
    }
    out
}

fn readout<T: Real>(g: &mut Graph<T>, y: Var, weights: &[T]) -> Result<Var> {
    let r = g.constant(weights.to_vec(), g.shape(y).to_vec())?;
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

// Inputs are drawn so that every gradient element is bounded away from zero
// (same-sign operands, GELU inputs right of its derivative root, two-token
// attention with separated keys and values). Near-zero elements turn the
// elementwise relative error into a measurement of rounding noise.

/// Runs one check at one seed.
pub fn run_check<T: Real>(check: Check, seed: u64, h: T) -> Result<GradCheckResult> {
    let mut rng = rng_for(&[seed, 0x6C, check as u64]);
    macro_rules! check_with {
        ($x:expr, $shape:expr, $weights:expr, |$g:ident, $v:ident| $body:expr) => {{
            let weights: Vec<T> = $weights;
            grad_check(
                |$g: &mut Graph<T>, $v: Var| -> Result<Var> {
                    let y = $body;
                    readout($g, y, &weights)
                },
                &$x,
                &$shape,
                h,
            )
        }};
    }
    match check {
        Check::MatmulLeft | Check::MatmulRight => {
            let a: Vec<T> = uniform(&mut rng, 12, -1.0, 1.0);
            let b: Vec<T> = uniform(&mut rng, 20, -1.0, 1.0);
            let r = positive(&mut rng, 15);
            if check == Check::MatmulLeft {
                let b: Vec<T> = b.iter().map(|v| v.abs() + T::of(0.5)).collect();
                check_with!(a, [3, 4], r, |g, x| {
                    let bv = g.constant(b.clone(), [4, 5])?;
                    g.matmul(x, bv)?
                })
            } else {
                let a: Vec<T> = a.iter().map(|v| v.abs() + T::of(0.5)).collect();
                check_with!(b, [4, 5], r, |g, x| {
                    let av = g.constant(a.clone(), [3, 4])?;
                    g.matmul(av, x)?
                })
            }
        }
        Check::AddRow => {
            let base: Vec<T> = uniform(&mut rng, 12, -1.0, 1.0);
            let bias: Vec<T> = uniform(&mut rng, 4, -1.0, 1.0);
            check_with!(bias, [4], positive(&mut rng, 12), |g, x| {
                let m = g.constant(base.clone(), [3, 4])?;
                g.add_row(m, x)?
            })
        }
        Check::Mul => {
            let a: Vec<T> = uniform(&mut rng, 12, -1.0, 1.0);
            let b: Vec<T> = uniform(&mut rng, 12, 0.5, 1.5);
            check_with!(a, [3, 4], positive(&mut rng, 12), |g, x| {
                let bv = g.constant(b.clone(), [3, 4])?;
                g.mul(x, bv)?
            })
        }
        Check::LayerNormInput | Check::LayerNormGamma | Check::LayerNormBeta => {
            let x: Vec<T> = uniform(&mut rng, 15, -2.0, 2.0);
            let gamma: Vec<T> = uniform(&mut rng, 5, 0.5, 1.5);
            let beta: Vec<T> = uniform(&mut rng, 5, -0.5, 0.5);
            let eps = T::of(1e-5);
            let (target, shape, which) = match check {
                Check::LayerNormInput => (x.clone(), vec![3, 5], 0),
                Check::LayerNormGamma => (gamma.clone(), vec![5], 1),
                _ => (beta.clone(), vec![5], 2),
            };
            let weights = if which == 0 {
                layer_norm_weights(&mut rng, &x, &gamma)
            } else {
                positive(&mut rng, 15)
            };
            check_with!(target, shape, weights, |g, v| {
                let xs = if which == 0 {
                    v
                } else {
                    g.constant(x.clone(), [3, 5])?
                };
                let gs = if which == 1 {
                    v
                } else {
                    g.constant(gamma.clone(), [5])?
                };
                let bs = if which == 2 {
                    v
                } else {
                    g.constant(beta.clone(), [5])?
                };
                g.layer_norm(xs, gs, bs, eps)?
            })
        }
        Check::Softmax => {
            let x: Vec<T> = uniform(&mut rng, 12, -1.0, 1.0);
            check_with!(x, [3, 4], select(&mut rng, 3, 4), |g, v| g.softmax(v))
        }
        Check::Gelu | Check::Tanh | Check::Sigmoid => {
            let (kind, lo) = match check {
                Check::Gelu => (Activation::Gelu, -0.4),
                Check::Tanh => (Activation::Tanh, -2.0),
                _ => (Activation::Sigmoid, -2.0),
            };
            let x: Vec<T> = uniform(&mut rng, 12, lo, 2.0);
            check_with!(x, [3, 4], positive(&mut rng, 12), |g, v| g
                .activation(kind, v))
        }
        Check::AttentionQuery | Check::AttentionKey | Check::AttentionValue => {
            let (n, d, heads) = (2, 4, 2);
            let q: Vec<T> = uniform(&mut rng, n * d, 0.2, 0.8);
            let mut k: Vec<T> = uniform(&mut rng, n * d, 0.5, 1.0);
            let mut val: Vec<T> = uniform(&mut rng, n * d, 0.5, 1.5);
            for j in d..n * d {
                k[j] = -k[j];
                val[j] = -val[j];
            }
            let which = match check {
                Check::AttentionQuery => 0,
                Check::AttentionKey => 1,
                _ => 2,
            };
            let target = [&q, &k, &val][which].clone();
            check_with!(target, [n, d], positive(&mut rng, n * d), |g, v| {
                let mut parts = [v; 3];
                for (i, src) in [&q, &k, &val].into_iter().enumerate() {
                    if i != which {
                        parts[i] = g.constant(src.clone(), [n, d])?;
                    }
                }
                g.attention(parts[0], parts[1], parts[2], heads)?
            })
        }
        Check::LstmCellInput
        | Check::LstmCellHidden
        | Check::LstmCellState
        | Check::LstmCellInputWeights
        | Check::LstmCellRecurrentWeights
        | Check::LstmCellBias => {
            let (m, input, u) = (2, 3, 2);
            let shapes = [
                vec![m, input],
                vec![m, u],
                vec![m, u],
                vec![input, 4 * u],
                vec![u, 4 * u],
                vec![4 * u],
            ];
            // All-positive operands keep every gate derivative positive.
            let values: Vec<Vec<T>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let (lo, hi) = if i < 3 { (0.5, 1.0) } else { (0.1, 0.4) };
                    uniform(&mut rng, s.iter().product(), lo, hi)
                })
                .collect();
            let which = match check {
                Check::LstmCellInput => 0,
                Check::LstmCellHidden => 1,
                Check::LstmCellState => 2,
                Check::LstmCellInputWeights => 3,
                Check::LstmCellRecurrentWeights => 4,
                _ => 5,
            };
            check_with!(
                values[which],
                shapes[which],
                positive(&mut rng, m * 2 * u),
                |g, v| {
                    let mut vars = [v; 6];
                    for i in 0..6 {
                        if i != which {
                            vars[i] = g.constant(values[i].clone(), shapes[i].clone())?;
                        }
                    }
                    g.lstm_cell(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?
                }
            )
        }
        Check::SoftmaxCrossEntropy => {
            let x: Vec<T> = uniform(&mut rng, 12, -1.0, 1.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            grad_check(
                |g: &mut Graph<T>, v: Var| {
                    let p = g.softmax(v);
                    g.sparse_ce(p, &labels)
                },
                &x,
                &[4, 3],
                h,
            )
        }
        Check::EncoderPatches
        | Check::EncoderQueryWeight
        | Check::EncoderClassToken
        | Check::EncoderPooler => encoder_check(check, &mut rng, h),
        Check::BiLstmInput | Check::BiLstmInputWeights | Check::BiLstmHead => {
            bilstm_check(check, &mut rng, h)
        }
    }
}

/// Toy encoder: 32×32×3 input, 16-pixel patches, two layers, D=8, two heads.
pub fn toy_encoder_config() -> ViTConfig {
    ViTConfig::toy(32, 16, 2, 8, 2)
}

fn encoder_check<T: Real>(check: Check, rng: &mut ChaCha8Rng, h: T) -> Result<GradCheckResult> {
    let cfg = toy_encoder_config();
    let mut w = ViTWeights::init(cfg.clone(), rng.gen())?;
    w.jitter(0.3, rng.gen());
    let patches: Vec<T> = uniform(rng, cfg.num_patches() * cfg.patch_dim(), -1.0, 1.0);
    let weights = positive(rng, cfg.feature_dim);
    let (name, target, shape) = match check {
        Check::EncoderPatches => (
            None,
            patches.clone(),
            vec![cfg.num_patches(), cfg.patch_dim()],
        ),
        Check::EncoderQueryWeight => named(&w, &layer_name(0, "attention.query.weight"))?,
        Check::EncoderClassToken => named(&w, CLS_TOKEN)?,
        _ => named(&w, POOLER_WEIGHT)?,
    };
    grad_check(
        |g: &mut Graph<T>, v: Var| {
            let mut vars = EncoderVars::new(&w, false);
            let p = match &name {
                None => v,
                Some(n) => {
                    vars.binder_mut().bind(n, v);
                    g.constant(patches.clone(), [cfg.num_patches(), cfg.patch_dim()])?
                }
            };
            let y = forward_graph(g, p, &mut vars)?;
            readout(g, y, &weights)
        },
        &target,
        &shape,
        h,
    )
}

fn named<T: Real>(w: &ViTWeights, name: &str) -> Result<(Option<String>, Vec<T>, Vec<usize>)> {
    let t = w.get(name)?;
    let v = t.data().iter().map(|&x| T::of(x as f64)).collect();
    Ok((Some(name.to_string()), v, t.shape().to_vec()))
}

fn bilstm_check<T: Real>(check: Check, rng: &mut ChaCha8Rng, h: T) -> Result<GradCheckResult> {
    let cfg = LSTMConfig {
        input_dim: 6,
        units: 3,
        layers: 1,
        dropout: 0.0,
        num_classes: 3,
    };
    let (batch, steps) = (2, 4);
    let w = BiLSTMWeights::init(cfg.clone(), rng.gen())?;
    let x: Vec<T> = uniform(rng, batch * steps * cfg.input_dim, -1.0, 1.0);
    let labels: Vec<usize> = (0..batch)
        .map(|_| rng.gen_range(0..cfg.num_classes))
        .collect();
    let name = match check {
        Check::BiLstmInput => None,
        Check::BiLstmInputWeights => Some(lstm_name(0, Direction::Backward, "w_ih")),
        _ => Some(HEAD_WEIGHT.to_string()),
    };
    let (target, shape) = match &name {
        None => (x.clone(), vec![batch, steps * cfg.input_dim]),
        Some(n) => {
            let t = w.params().get(n)?;
            (
                t.data().iter().map(|&v| T::of(v as f64)).collect(),
                t.shape().to_vec(),
            )
        }
    };
    grad_check(
        |g: &mut Graph<T>, v: Var| {
            let mut binder = Binder::new(w.params(), false);
            let xs = match &name {
                None => v,
                Some(n) => {
                    binder.bind(n, v);
                    g.constant(x.clone(), [batch, steps * cfg.input_dim])?
                }
            };
            let p = bilstm_graph(g, &mut binder, &cfg, xs, steps, None)?;
            g.sparse_ce(p, &labels)
        },
        &target,
        &shape,
        h,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub check: Check,
    pub precision: Precision,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckSummary>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&CheckSummary> {
        self.checks.iter().max_by(|a, b| {
            (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance))
        })
    }
}

/// Max relative error of `check` over `seeds` consecutive seeds.
pub fn summarize(
    check: Check,
    precision: Precision,
    seeds: usize,
    base_seed: u64,
) -> Result<CheckSummary> {
    let mut worst = 0.0f64;
    for s in 0..seeds as u64 {
        let r = match precision {
            Precision::F32 => run_check::<f32>(check, base_seed + s, precision.step() as f32)?,
            Precision::F64 => run_check::<f64>(check, base_seed + s, precision.step())?,
        };
        worst = worst.max(r.max_rel_error);
    }
    let tolerance = check.tolerance(precision);
    Ok(CheckSummary {
        check,
        precision,
        seeds,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

/// Every kernel check in both precisions, and the end-to-end checks.
pub fn run_suite(seeds: usize, base_seed: u64, end_to_end: &[Precision]) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for precision in [Precision::F32, Precision::F64] {
        for c in Check::KERNELS {
            checks.push(summarize(c, precision, seeds, base_seed)?);
        }
    }
    for &precision in end_to_end {
        for c in Check::END_TO_END {
            checks.push(summarize(c, precision, seeds, base_seed)?);
        }
    }
    Ok(SuiteReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn names_are_unique_snake_case() {
        let all: Vec<String> = Check::KERNELS
            .iter()
            .chain(&Check::END_TO_END)
            .map(|c| c.name())
            .collect();
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 28);
        assert!(all
            .iter()
            .all(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_lowercase() || c == '_')));
    }

    #[test]
    fn kernels_pass_in_both_precisions() {
        for c in Check::KERNELS {
            for p in [Precision::F32, Precision::F64] {
                let s = summarize(c, p, 5, 0).unwrap();
                assert!(s.passed, "{s:?}");
            }
        }
    }

    #[test]
    fn bilstm_end_to_end_passes() {
        for c in [
            Check::BiLstmInput,
            Check::BiLstmInputWeights,
            Check::BiLstmHead,
        ] {
            let s = summarize(c, Precision::F64, 5, 0).unwrap();
            assert!(s.passed, "{s:?}");
            assert_eq!(s.tolerance, 1e-3);
        }
    }

    #[test]
    fn checks_are_deterministic() {
        let a = run_check::<f32>(Check::AttentionKey, 3, 1e-2).unwrap();
        let b = run_check::<f32>(Check::AttentionKey, 3, 1e-2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layer_norm_weights_are_orthogonal_to_invariants() {
        let mut rng = rng_for(&[1]);
        let x: Vec<f64> = uniform(&mut rng, 5, -2.0, 2.0);
        let gamma = vec![1.0f64; 5];
        let w = layer_norm_weights(&mut rng, &x, &gamma);
        let mean = x.iter().sum::<f64>() / 5.0;
        assert!(w.iter().sum::<f64>().abs() < 1e-12);
        assert!(
            w.iter()
                .zip(&x)
                .map(|(a, b)| a * (b - mean))
                .sum::<f64>()
                .abs()
                < 1e-12
        );
    }
}
