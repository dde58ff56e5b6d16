//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward sweep. Operations are coarse (fused attention,
//! fused losses) so a training step stays a few hundred nodes long.

use std::rc::Rc;

use super::kernels::{self, attention_span, dot, gemm, gemm_view, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Log floor shared by cross-entropy and KL terms.
pub const LOG_EPS: f32 = 1e-9;
/// Probability floor for the binary cross-entropy of the timing head.
pub const PROB_EPS: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Several independent sequences packed row-wise into one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packing {
    /// `(first row, length)` per sequence.
    pub segments: Vec<(usize, usize)>,
    /// Frame index of every row within its own sequence.
    pub positions: Vec<usize>,
}

impl Packing {
    pub fn new(lengths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut positions = Vec::with_capacity(lengths.iter().sum());
        let mut start = 0;
        for &len in lengths {
            segments.push((start, len));
            positions.extend(0..len);
            start += len;
        }
        Self {
            segments,
            positions,
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub heads: usize,
    pub causal: bool,
    /// 0 means unlimited.
    pub window: usize,
}

enum Op {
    Leaf,
    Param(usize),
    StopGrad,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    BlendRows {
        a: Var,
        b: Var,
        use_a: Vec<bool>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<f32>,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Rope {
        x: Var,
        packing: Rc<Packing>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        packing: Rc<Packing>,
        spec: AttnSpec,
        probs: Vec<f32>,
    },
    SoftmaxRows {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    WeightedCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
        norm: f32,
    },
    Kl {
        target: Var,
        logits: Var,
        weights: Vec<f32>,
        logq: Vec<f32>,
        norm: f32,
    },
    Bce {
        probs: Var,
        targets: Vec<f32>,
    },
    LinComb {
        terms: Vec<(Var, f32)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], kept for leaves and parameters.
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(usize, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` for every parameter reached by the loss.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        self.params
            .iter()
            .filter_map(move |&(idx, v)| self.get(v).map(|g| (idx, g)))
    }
}

fn row_log_softmax(row: &[f32], out: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|&x| (x - m).exp()).sum();
    let lse = m + s.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Untracked input (or a tracked one when `requires_grad`).
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Trainable parameter `index` of the caller's parameter set.
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(index), true)
    }

    /// Passes the value through and blocks every derivative.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, din) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[0] != din {
            return Err(Error::Shape(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let dout = wv.shape()[1];
        let mut out = vec![0.0; n * dout];
        gemm(n, din, dout, xv.data(), false, wv.data(), false, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::Shape(format!("linear bias {:?}", bv.shape())));
            }
            for r in out.chunks_mut(dout) {
                for (o, bb) in r.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Invalid(format!("gather index {id} >= {rows}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise select: row `i` comes from `a` when `use_a[i]`, else from `b`.
    pub fn blend_rows(&mut self, a: Var, b: Var, use_a: &[bool]) -> Result<Var> {
        self.same_shape(a, b, "blend_rows")?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != use_a.len() {
            return Err(Error::Shape("blend_rows mask length".into()));
        }
        let mut out = Vec::with_capacity(av.len());
        for (i, &ua) in use_a.iter().enumerate() {
            out.extend_from_slice(if ua { av.row(i) } else { bv.row(i) });
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            t,
            Op::BlendRows {
                a,
                b,
                use_a: use_a.to_vec(),
            },
            ng,
        ))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.len() != d {
            return Err(Error::Shape("rms_norm gain".into()));
        }
        let mut out = vec![0.0; xv.len()];
        let mut inv = Vec::with_capacity(xv.rows());
        for (r, o) in out.chunks_mut(d).enumerate() {
            inv.push(kernels::rms_norm_row(xv.row(r), gv.data(), o));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| kernels::gelu(v)).collect(),
        )
        .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Gelu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
        )
        .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid { x }, ng)
    }

    /// Rotary position encoding using each row's in-sequence frame index.
    pub fn rope(&mut self, x: Var, packing: &Rc<Packing>, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d % heads != 0 || (d / heads) % 2 != 0 || xv.rows() != packing.rows() {
            return Err(Error::Shape("rope dims".into()));
        }
        let inv = kernels::rope_inv_freq(d / heads);
        let mut t = xv.clone();
        for (r, &p) in packing.positions.iter().enumerate() {
            kernels::rope_row(t.row_mut(r), p, heads, &inv, false);
        }
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                packing: packing.clone(),
                heads,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention within each packed segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        packing: &Rc<Packing>,
        spec: AttnSpec,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if d % spec.heads != 0 || qv.rows() != packing.rows() {
            return Err(Error::Shape("attention dims".into()));
        }
        let hd = d / spec.heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; qv.len()];
        let total: usize = packing.segments.iter().map(|&(_, len)| len * len).sum();
        let mut probs = vec![0.0; total * spec.heads];
        let mut off = 0;
        for &(s, len) in &packing.segments {
            for h in 0..spec.heads {
                let rows = View::rows(s * d + h * hd, d);
                let p = &mut probs[off..off + len * len];
                gemm_view(len, hd, len, scale, qd, rows, kd, rows.t(), 0.0, p, View::rows(0, len));
                for i in 0..len {
                    let (lo, hi) = attention_span(i, len, spec.causal, spec.window);
                    let row = &mut p[i * len..(i + 1) * len];
                    kernels::softmax_in_place(&mut row[lo..=hi]);
                    row[..lo].fill(0.0);
                    row[hi + 1..].fill(0.0);
                }
                gemm_view(len, len, hd, 1.0, p, View::rows(0, len), vd, rows, 0.0, &mut out, rows);
                off += len * len;
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                packing: packing.clone(),
                spec,
                probs,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        for r in t.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(r);
        }
        let ng = self.ng(x);
        self.push(t, Op::SoftmaxRows { x }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s as f32), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let n = xv.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar((s / n) as f32), Op::Mean { x }, ng)
    }

    /// `Σ_i w_i·CE(logits_i, labels_i) / Σ_i w_i`; zero when all weights vanish.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vsz) = (lv.rows(), lv.cols());
        if labels.len() != n || weights.len() != n {
            return Err(Error::Shape("cross-entropy labels/weights".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        let mut norm = 0.0f64;
        for (i, row) in probs.chunks_mut(vsz).enumerate() {
            let label = labels[i];
            if label >= vsz {
                return Err(Error::Invalid(format!("label {label} outside vocabulary {vsz}")));
            }
            let logit = row[label];
            let lse = kernels::softmax_in_place(row);
            let w = weights[i] as f64;
            if w != 0.0 {
                let nll = ((lse - logit) as f64).min(-(LOG_EPS as f64).ln());
                total += w * nll;
                norm += w;
            }
        }
        let (value, norm) = if norm > 0.0 {
            (total / norm, norm as f32)
        } else {
            (0.0, 0.0)
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(value as f32),
            Op::WeightedCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
                norm,
            },
            ng,
        ))
    }

    /// `Σ_i w_i·KL(target_i ‖ softmax(logits_i)) / Σ_i w_i` with the model
    /// log-probability floored at [`LOG_EPS`].
    pub fn kl_rows(&mut self, target: Var, logits: Var, weights: &[f32]) -> Result<Var> {
        self.same_shape(target, logits, "kl")?;
        let (pv, lv) = (self.value(target), self.value(logits));
        let (n, vsz) = (lv.rows(), lv.cols());
        if weights.len() != n {
            return Err(Error::Shape("kl weights".into()));
        }
        let floor = LOG_EPS.ln();
        let mut logq = vec![0.0; lv.len()];
        let mut total = 0.0f64;
        let mut norm = 0.0f64;
        for i in 0..n {
            let lq = &mut logq[i * vsz..(i + 1) * vsz];
            row_log_softmax(lv.row(i), lq);
            for x in lq.iter_mut() {
                *x = x.max(floor);
            }
            let w = weights[i] as f64;
            if w == 0.0 {
                continue;
            }
            let mut kl = 0.0f64;
            for (&p, &q) in pv.row(i).iter().zip(lq.iter()) {
                if p > 0.0 {
                    kl += p as f64 * ((p as f64).ln() - q as f64);
                }
            }
            total += w * kl;
            norm += w;
        }
        let (value, norm) = if norm > 0.0 {
            (total / norm, norm as f32)
        } else {
            (0.0, 0.0)
        };
        let ng = self.ng(target) || self.ng(logits);
        Ok(self.push(
            Tensor::scalar(value as f32),
            Op::Kl {
                target,
                logits,
                weights: weights.to_vec(),
                logq,
                norm,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy between probabilities and 0/1 targets, with
    /// probabilities clipped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f32]) -> Result<Var> {
        let pv = self.value(probs);
        if pv.len() != targets.len() {
            return Err(Error::Shape("bce targets".into()));
        }
        let eps = PROB_EPS as f64;
        let mut total = 0.0f64;
        for (&p, &g) in pv.data().iter().zip(targets) {
            let c = (p as f64).clamp(eps, 1.0 - eps);
            let g = g as f64;
            total -= g * c.ln() + (1.0 - g) * (1.0 - c).ln();
        }
        let value = if targets.is_empty() {
            0.0
        } else {
            total / targets.len() as f64
        };
        let ng = self.ng(probs);
        Ok(self.push(
            Tensor::scalar(value as f32),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut s = 0.0f64;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape("lin_comb expects scalars".into()));
            }
            s += c as f64 * self.value(v).item() as f64;
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::LinComb {
                terms: terms.to_vec(),
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut params = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(idx) => {
                    params.push((*idx, Var(i)));
                    grads[i] = Some(g);
                    continue;
                }
                Op::StopGrad => {}
                _ => self.propagate(node, &g, &mut grads),
            }
        }
        params.reverse();
        Ok(Grads { grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGrad => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(n, dout, din, g, false, wv.data(), true, gx, true);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(din, n, dout, xv.data(), true, g, false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for r in g.chunks(dout) {
                            for (a, v) in gb.iter_mut().zip(r) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv.data(), true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        kernels::axpy(1.0, g, gv);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::axpy(*c, g, gx);
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::BlendRows { a, b, use_a } => {
                let d = node.value.cols();
                for (v, want) in [(*a, true), (*b, false)] {
                    if let Some(gv) = self.acc(grads, v) {
                        for (r, &ua) in use_a.iter().enumerate() {
                            if ua == want {
                                kernels::axpy(
                                    1.0,
                                    &g[r * d..(r + 1) * d],
                                    &mut gv[r * d..(r + 1) * d],
                                );
                            }
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                if let Some(ggain) = self.acc(grads, *gain) {
                    for (r, &iv) in inv.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        for k in 0..d {
                            ggain[k] += gr[k] * xr[k] * iv;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &iv) in inv.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let mut s = 0.0f32;
                        for k in 0..d {
                            s += gv.data()[k] * gr[k] * xr[k];
                        }
                        let coef = iv * iv * iv * s / d as f32;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for k in 0..d {
                            out[k] += iv * gv.data()[k] * gr[k] - coef * xr[k];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Rope { x, packing, heads } => {
                let d = node.value.cols();
                let inv = kernels::rope_inv_freq(d / heads);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut row = vec![0.0; d];
                    for (r, &p) in packing.positions.iter().enumerate() {
                        row.copy_from_slice(&g[r * d..(r + 1) * d]);
                        kernels::rope_row(&mut row, p, *heads, &inv, true);
                        kernels::axpy(1.0, &row, &mut gx[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                packing,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, packing, *spec, probs, g, grads),
            Op::SoftmaxRows { x } => {
                let y = &node.value;
                let c = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let s = dot(yr, gr);
                        for k in 0..c {
                            gx[r * c + k] += yr[k] * (gr[k] - s);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len().max(1) as f32;
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
                probs,
                norm,
            } => {
                if *norm == 0.0 {
                    return;
                }
                let vsz = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * w / norm;
                        let pr = &probs[i * vsz..(i + 1) * vsz];
                        let out = &mut gl[i * vsz..(i + 1) * vsz];
                        for k in 0..vsz {
                            out[k] += c * pr[k];
                        }
                        out[label] -= c;
                    }
                }
            }
            Op::Kl {
                target,
                logits,
                weights,
                logq,
                norm,
            } => {
                if *norm == 0.0 {
                    return;
                }
                let pv = self.value(*target);
                let vsz = pv.cols();
                let floor = LOG_EPS.ln();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * w / norm;
                        let pr = pv.row(i);
                        let lq = &logq[i * vsz..(i + 1) * vsz];
                        let live: f32 = pr
                            .iter()
                            .zip(lq)
                            .filter(|(_, &q)| q > floor)
                            .map(|(p, _)| *p)
                            .sum();
                        let out = &mut gl[i * vsz..(i + 1) * vsz];
                        for k in 0..vsz {
                            let qk = lq[k].exp();
                            let own = if lq[k] > floor { pr[k] } else { 0.0 };
                            out[k] += c * (qk * live - own);
                        }
                    }
                }
                if let Some(gt) = self.acc(grads, *target) {
                    for (i, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * w / norm;
                        let pr = pv.row(i);
                        let lq = &logq[i * vsz..(i + 1) * vsz];
                        for k in 0..vsz {
                            gt[i * vsz + k] += c * (pr[k].max(LOG_EPS).ln() - lq[k] + 1.0);
                        }
                    }
                }
            }
            Op::Bce { probs, targets } => {
                let pv = self.value(*probs).data();
                let n = targets.len().max(1) as f32;
                if let Some(gp) = self.acc(grads, *probs) {
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(targets) {
                        let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        *o += g[0] * (c - t) / (c * (1.0 - c)) / n;
                    }
                }
            }
            Op::LinComb { terms } => {
                for &(v, c) in terms {
                    if let Some(gv) = self.acc(grads, v) {
                        gv[0] += g[0] * c;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        packing: &Packing,
        spec: AttnSpec,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let hd = d / spec.heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut off = 0;
        let mut ds = Vec::new();
        for &(s, len) in &packing.segments {
            ds.resize(len * len, 0.0);
            let sq = View::rows(0, len);
            for h in 0..spec.heads {
                let rows = View::rows(s * d + h * hd, d);
                let p = &probs[off..off + len * len];
                off += len * len;
                // dP = G·Vᵀ, dS = P ⊙ (dP − rowsum(P ⊙ dP))
                gemm_view(len, hd, len, 1.0, g, rows, vd, rows.t(), 0.0, &mut ds, sq);
                for i in 0..len {
                    let (pr, dr) = (&p[i * len..(i + 1) * len], &mut ds[i * len..(i + 1) * len]);
                    let sum = dot(pr, dr);
                    for (dj, pj) in dr.iter_mut().zip(pr) {
                        *dj = pj * (*dj - sum);
                    }
                }
                gemm_view(len, len, hd, scale, &ds, sq, kd, rows, 1.0, &mut gq, rows);
                gemm_view(len, len, hd, scale, &ds, sq.t(), qd, rows, 1.0, &mut gk, rows);
                gemm_view(len, len, hd, 1.0, p, sq.t(), g, rows, 1.0, &mut gv, rows);
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(grads, var) {
                kernels::axpy(1.0, &buf, acc);
            }
        }
    }
}
