//! Reverse-mode differentiation over a recorded operation trace.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation computes its
//! value eagerly and records what the backward pass needs; [`Graph::backward`]
//! then walks the trace in reverse, accumulating gradients into every node
//! that depends on a trainable leaf.

use crate::error::{Error, Result};
use crate::kernels::{self, Activation};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A value and its accumulated gradient, detached from the graph.
#[derive(Debug, Clone)]
pub struct GradRecord {
    pub value: Tensor,
    pub grad: Tensor,
}

const PROB_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Softmax(Var),
    Act(Activation, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w: Var,
        r: Var,
        b: Var,
        gates: Vec<T>,
    },
    Columns {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Rows {
        x: Var,
        start: usize,
    },
    StackRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SparseCe {
        probs: Var,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [m, n] => Some((m, n)),
        _ => None,
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<T>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.leaf(value, shape.into(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Vec<T>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.leaf(value, shape.into(), false)
    }

    pub fn param_tensor(&mut self, t: &Tensor) -> Var {
        let v = t.data().iter().map(|&x| T::of(x as f64)).collect();
        self.push(v, t.shape().to_vec(), Op::Leaf, true)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        let v = t.data().iter().map(|&x| T::of(x as f64)).collect();
        self.push(v, t.shape().to_vec(), Op::Leaf, false)
    }

    fn leaf(&mut self, value: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != value.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "leaf of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(value, shape, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let data = n.value.iter().map(|x| x.as_f64() as f32).collect();
        Tensor::new(n.shape.clone(), data).expect("node shapes are validated on insert")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Gradient accumulated by the last [`Graph::backward`], if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn record(&self, v: Var) -> GradRecord {
        let value = self.tensor(v);
        let grad = match self.grad(v) {
            Some(g) => {
                let data = g.iter().map(|x| x.as_f64() as f32).collect();
                Tensor::new(value.shape().to_vec(), data).expect("grad mirrors value shape")
            }
            None => Tensor::zeros(value.shape().to_vec()),
        };
        GradRecord { value, grad }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        dims2(self.shape(v)).ok_or_else(|| {
            Error::shape(format!(
                "{what} expects a 2-D operand, got {:?}",
                self.shape(v)
            ))
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "bias {:?} does not broadcast over rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(b).map(|(&u, &w)| u + w))
            .collect();
        let rg = self.any_grad(&[x, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::AddRow(x, bias), rg))
    }

    /// `x·W + b` for `x: m×in`, `W: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Scale(x, s), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm over last dim {d} with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        let (means, rstds) = kernels::layer_norm_rows(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
            &mut out,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().expect("non-empty shape");
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::softmax_rows(self.value(x), &mut out, d);
        let rg = self.any_grad(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Softmax(x), rg)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Act(kind, x), rg)
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `n×D` projections; head `j` uses columns
    /// `j·D/h .. (j+1)·D/h`. Returns the `n×D` concatenation of head outputs
    /// (before the output projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::shape(format!(
                "attention q/k/v shapes {:?} {:?} {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "hidden size {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        let mut scores = vec![T::zero(); n];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let qi = &qv[i * d + off..i * d + off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let dot = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    *s = dot * scale;
                }
                let p = &mut probs[(hd * n + i) * n..(hd * n + i + 1) * n];
                kernels::softmax_rows(&scores, p, n);
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (oo, &x) in o.iter_mut().zip(vj) {
                        *oo = *oo + pj * x;
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            vec![n, d],
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node,
    /// laid out `heads × n × n`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Fused LSTM cell step over `m` rows.
    ///
    /// `x: m×in`, `h, c: m×U`, `w: in×4U`, `r: U×4U`, `b: 4U` with gate
    /// blocks ordered input, forget, candidate, output. Returns `m×2U` holding
    /// `h_t ‖ c_t` per row.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: Var, r: Var, b: Var) -> Result<Var> {
        let (m, input) = self.dims2(x, "lstm_cell")?;
        let (mh, u) = self.dims2(h, "lstm_cell")?;
        let ok = mh == m
            && self.shape(c) == [m, u]
            && self.shape(w) == [input, 4 * u]
            && self.shape(r) == [u, 4 * u]
            && self.shape(b) == [4 * u];
        if !ok {
            return Err(Error::shape(format!(
                "lstm_cell shapes x {:?} h {:?} c {:?} W {:?} R {:?} b {:?}",
                self.shape(x),
                self.shape(h),
                self.shape(c),
                self.shape(w),
                self.shape(r),
                self.shape(b)
            )));
        }
        let mut z = vec![T::zero(); m * 4 * u];
        kernels::matmul_into(self.value(x), self.value(w), &mut z, m, input, 4 * u);
        let mut zr = vec![T::zero(); m * 4 * u];
        kernels::matmul_into(self.value(h), self.value(r), &mut zr, m, u, 4 * u);
        let bias = self.value(b);
        let cv = self.value(c);
        let mut gates = vec![T::zero(); m * 4 * u];
        let mut out = vec![T::zero(); m * 2 * u];
        for row in 0..m {
            let zrow = &z[row * 4 * u..(row + 1) * 4 * u];
            let zrrow = &zr[row * 4 * u..(row + 1) * 4 * u];
            let grow = &mut gates[row * 4 * u..(row + 1) * 4 * u];
            for j in 0..4 * u {
                let pre = zrow[j] + zrrow[j] + bias[j];
                grow[j] = if (2 * u..3 * u).contains(&j) {
                    pre.tanh()
                } else {
                    kernels::sigmoid(pre)
                };
            }
            for j in 0..u {
                let (i, f, g, o) = (grow[j], grow[u + j], grow[2 * u + j], grow[3 * u + j]);
                let c_new = f * cv[row * u + j] + i * g;
                out[row * 2 * u + j] = o * c_new.tanh();
                out[row * 2 * u + u + j] = c_new;
            }
        }
        let rg = self.any_grad(&[x, h, c, w, r, b]);
        Ok(self.push(
            out,
            vec![m, 2 * u],
            Op::LstmCell {
                x,
                h,
                c,
                w,
                r,
                b,
                gates,
            },
            rg,
        ))
    }

    /// Columns `start..start+width` of an `m×n` matrix.
    pub fn columns(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "columns")?;
        if width == 0 || start + width > n {
            return Err(Error::shape(format!(
                "columns {start}..{} out of range for {:?}",
                start + width,
                self.shape(x)
            )));
        }
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, vec![m, width], Op::Columns { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero operands"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::shape(format!(
                    "concat_cols row counts differ: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for row in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[row * w..(row + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(out, vec![m, total], Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start+count` of an `m×n` matrix.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "rows")?;
        if count == 0 || start + count > m {
            return Err(Error::shape(format!(
                "rows {start}..{} out of range for {:?}",
                start + count,
                self.shape(x)
            )));
        }
        let out = self.value(x)[start * n..(start + count) * n].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, vec![count, n], Op::Rows { x, start }, rg))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero operands"))?;
        let (_, n) = self.dims2(first, "stack_rows")?;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "stack_rows")?;
            if pn != n {
                return Err(Error::shape(format!(
                    "stack_rows widths differ: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            m += pm;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.any_grad(parts);
        Ok(self.push(out, vec![m, n], Op::StackRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, shape, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.any_grad(&[x]);
        self.push(vec![s], vec![1], Op::Sum(x), rg)
    }

    /// Mean over rows of `-ln(max(p[label], 1e-12))` for a `batch×classes`
    /// probability matrix.
    pub fn sparse_ce(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.dims2(probs, "sparse_ce")?;
        if labels.len() != batch {
            return Err(Error::data(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::data(format!(
                "sample {i}: label {l} outside 0..{classes}"
            )));
        }
        let p = self.value(probs);
        let floor = T::of(PROB_FLOOR);
        let total = labels.iter().enumerate().fold(T::zero(), |a, (i, &l)| {
            a - p[i * classes + l].max(floor).ln()
        });
        let loss = total / T::of(batch as f64);
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SparseCe {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates gradients from a single-element `loss` to every node that
    /// depends on a trainable leaf. Earlier gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T], &Self)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(&mut g, self);
        self.nodes[v.0].grad = Some(g);
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        // Ops are moved out temporarily so their saved state can be read
        // while input gradients are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(a)).unwrap();
                let n = self.shape(b)[1];
                self.accumulate(a, |ga, s| {
                    kernels::matmul_nt_acc(g, s.value(b), ga, m, n, k);
                });
                self.accumulate(b, |gb, s| {
                    kernels::matmul_tn_acc(s.value(a), g, gb, m, k, n);
                });
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(v, |gv, _| add_into(gv, g));
                }
            }
            &Op::AddRow(x, bias) => {
                self.accumulate(x, |gx, _| add_into(gx, g));
                let n = self.shape(bias)[0];
                self.accumulate(bias, |gb, _| {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Mul(a, b) => {
                self.accumulate(a, |ga, s| {
                    for ((o, &gi), &bv) in ga.iter_mut().zip(g).zip(s.value(b)) {
                        *o = *o + gi * bv;
                    }
                });
                self.accumulate(b, |gb, s| {
                    for ((o, &gi), &av) in gb.iter_mut().zip(g).zip(s.value(a)) {
                        *o = *o + gi * av;
                    }
                });
            }
            &Op::Scale(x, sc) => {
                self.accumulate(x, |gx, _| {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi * sc;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.shape(gamma)[0];
                let dn = T::of(d as f64);
                let xhat: Vec<T> = self
                    .value(x)
                    .chunks_exact(d)
                    .zip(means.iter().zip(rstds))
                    .flat_map(|(r, (&mu, &rs))| r.iter().map(move |&v| (v - mu) * rs))
                    .collect();
                self.accumulate(gamma, |gg, _| {
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((o, &gi), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                            *o = *o + gi * xh;
                        }
                    }
                });
                self.accumulate(beta, |gb, _| {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                });
                self.accumulate(x, |gx, s| {
                    let gam = s.value(gamma);
                    for (((gxr, gr), xr), &rs) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(rstds)
                    {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                        }
                        mean_dxh = mean_dxh / dn;
                        mean_dxh_xh = mean_dxh_xh / dn;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            gxr[j] = gxr[j] + rs * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let d = *self.shape(x).last().unwrap();
                let y = self.nodes[idx].value.clone();
                self.accumulate(x, |gx, _| {
                    softmax_backward(&y, g, gx, d);
                });
            }
            &Op::Act(kind, x) => {
                let y = &self.nodes[idx].value;
                let dy: Vec<T> = self
                    .value(x)
                    .iter()
                    .zip(y)
                    .zip(g)
                    .map(|((&xv, &yv), &gi)| gi * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(x, |gx, _| add_into(gx, &dy));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (n, d) = dims2(self.shape(q)).unwrap();
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let mut dp = vec![T::zero(); n];
                let mut ds = vec![T::zero(); n];
                for hd in 0..heads {
                    let off = hd * dh;
                    for i in 0..n {
                        let p = &probs[(hd * n + i) * n..(hd * n + i + 1) * n];
                        let go = &g[i * d + off..i * d + off + dh];
                        for j in 0..n {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            dp[j] = go.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (o, &x) in dvj.iter_mut().zip(go) {
                                *o = *o + p[j] * x;
                            }
                        }
                        softmax_backward(p, &dp, &mut ds, n);
                        for j in 0..n {
                            let sj = ds[j] * scale;
                            ds[j] = T::zero();
                            for t in 0..dh {
                                dq[i * d + off + t] =
                                    dq[i * d + off + t] + sj * kv[j * d + off + t];
                                dk[j * d + off + t] =
                                    dk[j * d + off + t] + sj * qv[i * d + off + t];
                            }
                        }
                    }
                }
                self.accumulate(q, |gq, _| add_into(gq, &dq));
                self.accumulate(k, |gk, _| add_into(gk, &dk));
                self.accumulate(v, |gv, _| add_into(gv, &dv));
            }
            Op::LstmCell {
                x,
                h,
                c,
                w,
                r,
                b,
                gates,
            } => {
                let (x, h, c, w, r, b) = (*x, *h, *c, *w, *r, *b);
                let (m, input) = dims2(self.shape(x)).unwrap();
                let u = self.shape(h)[1];
                let out = &self.nodes[idx].value;
                let cv = self.value(c);
                let mut dz = vec![T::zero(); m * 4 * u];
                let mut dc_prev = vec![T::zero(); m * u];
                for row in 0..m {
                    let gr = &gates[row * 4 * u..(row + 1) * 4 * u];
                    for j in 0..u {
                        let (i, f, gg, o) = (gr[j], gr[u + j], gr[2 * u + j], gr[3 * u + j]);
                        let c_new = out[row * 2 * u + u + j];
                        let tc = c_new.tanh();
                        let dh_out = g[row * 2 * u + j];
                        let dc_out = g[row * 2 * u + u + j];
                        let dc = dc_out + dh_out * o * (T::one() - tc * tc);
                        let z = &mut dz[row * 4 * u..(row + 1) * 4 * u];
                        z[j] = dc * gg * i * (T::one() - i);
                        z[u + j] = dc * cv[row * u + j] * f * (T::one() - f);
                        z[2 * u + j] = dc * i * (T::one() - gg * gg);
                        z[3 * u + j] = dh_out * tc * o * (T::one() - o);
                        dc_prev[row * u + j] = dc * f;
                    }
                }
                self.accumulate(x, |gx, s| {
                    kernels::matmul_nt_acc(&dz, s.value(w), gx, m, 4 * u, input);
                });
                self.accumulate(h, |gh, s| {
                    kernels::matmul_nt_acc(&dz, s.value(r), gh, m, 4 * u, u);
                });
                self.accumulate(c, |gc, _| add_into(gc, &dc_prev));
                self.accumulate(w, |gw, s| {
                    kernels::matmul_tn_acc(s.value(x), &dz, gw, m, input, 4 * u);
                });
                self.accumulate(r, |gr, s| {
                    kernels::matmul_tn_acc(s.value(h), &dz, gr, m, u, 4 * u);
                });
                self.accumulate(b, |gb, _| {
                    for row in dz.chunks_exact(4 * u) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Columns { x, start } => {
                let n = self.shape(x)[1];
                let width = self.nodes[idx].shape[1];
                self.accumulate(x, |gx, _| {
                    for (gxr, gr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(width)) {
                        add_into(&mut gxr[start..start + width], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(p, |gp, _| {
                        for (gpr, gr) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(gpr, &gr[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            &Op::Rows { x, start } => {
                let n = self.shape(x)[1];
                self.accumulate(x, |gx, _| {
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                });
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(p, |gp, _| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            &Op::Reshape(x) => {
                self.accumulate(x, |gx, _| add_into(gx, g));
            }
            &Op::Sum(x) => {
                self.accumulate(x, |gx, _| {
                    gx.iter_mut().for_each(|o| *o = *o + g[0]);
                });
            }
            Op::SparseCe { probs, labels } => {
                let probs = *probs;
                let classes = self.shape(probs)[1];
                let batch = T::of(labels.len() as f64);
                let floor = T::of(PROB_FLOOR);
                self.accumulate(probs, |gp, s| {
                    let p = s.value(probs);
                    for (i, &l) in labels.iter().enumerate() {
                        let pi = p[i * classes + l];
                        if pi > floor {
                            let o = &mut gp[i * classes + l];
                            *o = *o - g[0] / (pi * batch);
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// `dx += y ⊙ (dy − Σ dy⊙y)` per chunk of length `d`.
fn softmax_backward<T: Real>(y: &[T], dy: &[T], dx: &mut [T], d: usize) {
    for ((yr, gr), xr) in y
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
        for ((o, &p), &q) in xr.iter_mut().zip(yr).zip(gr) {
            *o = *o + p * (q - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec![3.0, -2.0], [2]).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.scalar(s), 13.0);
        assert_eq!(g.grad(x).unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec![1.0, 2.0], [1, 2]).unwrap();
        let a = g.scale(x, 2.0);
        let b = g.add(a, x).unwrap();
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.param(vec![1.0], [1, 1]).unwrap();
        let c = g.constant(vec![5.0], [1, 1]).unwrap();
        let y = g.matmul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert!(g.grad(c).is_none());
        let rec = g.record(c);
        assert_eq!(rec.grad.data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(vec![1.0, 2.0], [2]).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn sparse_ce_rejects_bad_label() {
        let mut g = Graph::<f32>::new();
        let p = g.constant(vec![0.5, 0.5], [1, 2]).unwrap();
        let err = g.sparse_ce(p, &[2]).unwrap_err();
        assert!(err.to_string().contains("sample 0"));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let q = g
            .constant((0..12).map(|i| i as f32 * 0.1).collect(), [3, 4])
            .unwrap();
        let k = g
            .constant((0..12).map(|i| (i as f32 * 0.37).sin()).collect(), [3, 4])
            .unwrap();
        let a = g.attention(q, k, k, 2).unwrap();
        let probs = g.attention_probs(a).unwrap();
        for row in probs.chunks_exact(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(g.attention(q, k, k, 3).is_err());
    }
}
