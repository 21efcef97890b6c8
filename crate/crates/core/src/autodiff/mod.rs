//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node whose parents all have a
//! smaller index, so a single reverse sweep over the node list visits each
//! node after all of its consumers. Gradients from multiple consumers are
//! summed.

mod gradcheck;
mod params;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use params::{ParamId, ParamStore, Parameter};

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{
    self, avg_pool2d, avg_pool2d_backward, compensated_sum, conv2d, conv2d_backward, linear,
    max_pool2d_with_argmax, mismatch, resize_bilinear, resize_bilinear_backward, softmax_axis0,
    softmax_flat, BatchNormStats, NormMode, Tensor, TensorError,
};

/// Clamp applied to probabilities before taking logs in [`Graph::bce`].
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    GradReverse {
        x: Var,
        lambda: f64,
    },
    Concat {
        parts: Vec<Var>,
    },
    Stack {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Index0 {
        x: Var,
        i: usize,
    },
    SoftmaxFlat {
        x: Var,
    },
    SoftmaxAxis0 {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        mode: NormMode,
    },
    AttentionVector {
        f: Var,
        mask: Var,
    },
    SpatialMean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumAxis0 {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input | Param => vec![],
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            AttentionVector { f, mask } => vec![*f, *mask],
            Concat { parts } | Stack { parts } => parts.clone(),
            AvgPool { x, .. }
            | MaxPool { x, .. }
            | Resize { x }
            | Relu { x }
            | Sigmoid { x }
            | Scale { x, .. }
            | GradReverse { x, .. }
            | Reshape { x }
            | Index0 { x, .. }
            | SoftmaxFlat { x }
            | SoftmaxAxis0 { x }
            | SpatialMean { x }
            | Sum { x }
            | Mean { x }
            | SumAxis0 { x } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            Bce { p, .. } => vec![*p],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape: nodes in creation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows past it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// A leaf that tracks gradients, e.g. for checking gradients with respect
    /// to an input rather than a parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Copies `v` into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let y = avg_pool2d(self.value(x), k)?;
        Ok(self.push(y, Op::AvgPool { x, k }))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (y, argmax) = max_pool2d_with_argmax(self.value(x), k)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).relu();
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).sigmoid();
        self.push(y, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale { x, s })
    }

    /// Gradient reversal: identity on values, multiplies the incoming
    /// gradient by `-lambda` on the way back.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "grad_reverse",
                detail: format!("lambda must be finite and >= 0, got {lambda}"),
            });
        }
        let y = self.value(x).clone();
        Ok(self.push(y, Op::GradReverse { x, lambda }))
    }

    /// Concatenate along axis 0 (channels for feature maps).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat(&vals)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::stack(&vals)?;
        Ok(self.push(
            y,
            Op::Stack {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    pub fn index0(&mut self, x: Var, i: usize) -> Result<Var> {
        let y = self.value(x).index0(i)?;
        Ok(self.push(y, Op::Index0 { x, i }))
    }

    pub fn softmax_flat(&mut self, x: Var) -> Var {
        let y = softmax_flat(self.value(x));
        self.push(y, Op::SoftmaxFlat { x })
    }

    pub fn softmax_axis0(&mut self, x: Var) -> Result<Var> {
        let y = softmax_axis0(self.value(x))?;
        Ok(self.push(y, Op::SoftmaxAxis0 { x }))
    }

    /// `X·Wᵀ + b` for `X` of shape `[B×Din]` or `[Din]`; result `[B×Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: NormMode,
    ) -> Result<Var> {
        let f = tensor::batch_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
        )?;
        Ok(self.push(
            f.out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.inv_std,
                mode,
            },
        ))
    }

    /// Mask-weighted spatial sum: `[C×H×W] , [H×W] -> [C]`.
    pub fn attention_vector(&mut self, f: Var, mask: Var) -> Result<Var> {
        let y = crate::sap::attention_vector(self.value(f), self.value(mask))?;
        Ok(self.push(y, Op::AttentionVector { f, mask }))
    }

    /// Per-channel spatial mean of a `C×H×W` map.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).spatial_mean()?;
        Ok(self.push(y, Op::SpatialMean { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(y, Op::Mean { x })
    }

    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).sum_axis0()?;
        Ok(self.push(y, Op::SumAxis0 { x }))
    }

    /// Mean per-pixel softmax cross-entropy of `C×H×W` logits against a
    /// row-major `H×W` label map.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (c, h, w) = self.value(logits).dims3()?;
        if labels.len() != h * w {
            return Err(mismatch(
                "cross_entropy",
                format!("{} labels for a {h}x{w} map", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        let probs = softmax_axis0(self.value(logits))?;
        let x = self.value(logits).data();
        let hw = h * w;
        // log-sum-exp form; ln of the softmax output loses digits
        let loss = compensated_sum(labels.iter().enumerate().map(|(i, &l)| {
            let m = (0..c)
                .map(|k| x[k * hw + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (x[k * hw + i] - m).exp()).sum();
            m + z.ln() - x[l * hw + i]
        })) / hw as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets, with
    /// probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(mismatch(
                "bce",
                format!("{} probabilities, {} targets", pv.len(), targets.len()),
            ));
        }
        let loss = compensated_sum(pv.data().iter().zip(targets).map(|(&x, &y)| bce_term(x, y)))
            / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, lower)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let r = conv2d_backward(val(x), val(w), val(b), stride, pad, g, wants(x))?;
                if let Some(gx) = r.input {
                    acc(x, gx)?;
                }
                acc(w, r.weight)?;
                acc(b, r.bias)?;
            }
            &Op::AvgPool { x, k } => acc(x, avg_pool2d_backward(val(x).shape(), k, g)?)?,
            Op::MaxPool { x, argmax } => {
                acc(*x, tensor::max_pool2d_backward(val(*x).shape(), argmax, g)?)?
            }
            &Op::Resize { x } => acc(x, resize_bilinear_backward(val(x).shape(), g)?)?,
            &Op::Relu { x } => acc(
                x,
                g.zip_map(val(x), "relu", |g, v| if v > 0.0 { g } else { 0.0 })?,
            )?,
            &Op::Sigmoid { x } => acc(
                x,
                g.zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?,
            )?,
            &Op::Add { a, b } => {
                acc(a, g.clone())?;
                acc(b, g.clone())?;
            }
            &Op::Sub { a, b } => {
                acc(a, g.clone())?;
                acc(b, g.scale(-1.0))?;
            }
            &Op::Mul { a, b } => {
                acc(a, g.mul(val(b))?)?;
                acc(b, g.mul(val(a))?)?;
            }
            &Op::Scale { x, s } => acc(x, g.scale(s))?,
            &Op::GradReverse { x, lambda } => acc(x, g.scale(-lambda))?,
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(
                        p,
                        Tensor::new(val(p).shape(), g.data()[offset..offset + n].to_vec())?,
                    )?;
                    offset += n;
                }
            }
            Op::Stack { parts } => {
                for (i, &p) in parts.iter().enumerate() {
                    acc(p, g.index0(i)?)?;
                }
            }
            &Op::Reshape { x } => acc(x, g.reshape(val(x).shape())?)?,
            &Op::Index0 { x, i } => {
                let mut gx = Tensor::zeros(val(x).shape());
                let n = g.len();
                gx.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
                acc(x, gx)?;
            }
            &Op::SoftmaxFlat { x } => {
                let y = &node.value;
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                acc(x, g.zip_map(y, "softmax_flat", |g, y| y * (g - dot))?)?;
            }
            &Op::SoftmaxAxis0 { x } => {
                let y = node.value.data();
                let a = node.value.shape()[0];
                let inner = y.len() / a;
                let gd = g.data();
                let mut gx = vec![0.0; y.len()];
                for j in 0..inner {
                    let dot: f64 = (0..a).map(|i| gd[i * inner + j] * y[i * inner + j]).sum();
                    for i in 0..a {
                        gx[i * inner + j] = y[i * inner + j] * (gd[i * inner + j] - dot);
                    }
                }
                acc(x, Tensor::new(node.value.shape(), gx)?)?;
            }
            &Op::Linear { x, w, b } => {
                let xv = val(x);
                let wv = val(w);
                let (dout, din) = wv.dims2()?;
                let rows = xv.len() / din;
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                if wants(x) {
                    let mut gx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        for o in 0..dout {
                            let go = gd[r * dout + o];
                            for (gxv, wvv) in gx[r * din..(r + 1) * din]
                                .iter_mut()
                                .zip(&wd[o * din..(o + 1) * din])
                            {
                                *gxv += go * wvv;
                            }
                        }
                    }
                    acc(x, Tensor::new(xv.shape(), gx)?)?;
                }
                let mut gw = vec![0.0; wv.len()];
                for o in 0..dout {
                    for r in 0..rows {
                        let go = gd[r * dout + o];
                        for (gwv, xvv) in gw[o * din..(o + 1) * din]
                            .iter_mut()
                            .zip(&xd[r * din..(r + 1) * din])
                        {
                            *gwv += go * xvv;
                        }
                    }
                }
                acc(w, Tensor::new(wv.shape(), gw)?)?;
                if let Some(b) = b {
                    let gb = (0..dout)
                        .map(|o| (0..rows).map(|r| gd[r * dout + o]).sum())
                        .collect();
                    acc(b, Tensor::from_vec(gb))?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (rows, d) = xhat.dims2()?;
                let (gd, xh, gam) = (g.data(), xhat.data(), val(*gamma).data());
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gx = vec![0.0; rows * d];
                for j in 0..d {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for r in 0..rows {
                        sum_g += gd[r * d + j];
                        sum_gx += gd[r * d + j] * xh[r * d + j];
                    }
                    ggamma[j] = sum_gx;
                    gbeta[j] = sum_g;
                    match mode {
                        NormMode::Train => {
                            let n = rows as f64;
                            for r in 0..rows {
                                gx[r * d + j] = gam[j] * inv_std[j] / n
                                    * (n * gd[r * d + j] - sum_g - xh[r * d + j] * sum_gx);
                            }
                        }
                        NormMode::Eval => {
                            for r in 0..rows {
                                gx[r * d + j] = gd[r * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(&[rows, d], gx)?)?;
                acc(*gamma, Tensor::from_vec(ggamma))?;
                acc(*beta, Tensor::from_vec(gbeta))?;
            }
            &Op::AttentionVector { f, mask } => {
                let fv = val(f);
                let mv = val(mask);
                let (c, h, w) = fv.dims3()?;
                let hw = h * w;
                let (fd, md, gd) = (fv.data(), mv.data(), g.data());
                if wants(f) {
                    let mut gf = vec![0.0; fd.len()];
                    for ch in 0..c {
                        for (o, m) in gf[ch * hw..(ch + 1) * hw].iter_mut().zip(md) {
                            *o = gd[ch] * m;
                        }
                    }
                    acc(f, Tensor::new(fv.shape(), gf)?)?;
                }
                if wants(mask) {
                    let mut gm = vec![0.0; hw];
                    for ch in 0..c {
                        for (o, v) in gm.iter_mut().zip(&fd[ch * hw..(ch + 1) * hw]) {
                            *o += gd[ch] * v;
                        }
                    }
                    acc(mask, Tensor::new(mv.shape(), gm)?)?;
                }
            }
            &Op::SpatialMean { x } => {
                let (c, h, w) = val(x).dims3()?;
                let n = (h * w) as f64;
                let gd = g.data();
                acc(x, Tensor::from_fn(&[c, h, w], |i| gd[i / (h * w)] / n))?;
            }
            &Op::Sum { x } => acc(x, Tensor::full(val(x).shape(), g.data()[0]))?,
            &Op::Mean { x } => {
                let n = val(x).len() as f64;
                acc(x, Tensor::full(val(x).shape(), g.data()[0] / n))?;
            }
            &Op::SumAxis0 { x } => {
                let shape = val(x).shape();
                let inner = g.len();
                let gd = g.data();
                acc(x, Tensor::from_fn(shape, |i| gd[i % inner]))?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let scale = g.data()[0] / n as f64;
                let mut gx = probs.scale(scale);
                for (i, &l) in labels.iter().enumerate() {
                    gx.data_mut()[l * n + i] -= scale;
                }
                acc(*logits, gx)?;
            }
            Op::Bce { p, targets } => {
                let scale = g.data()[0] / targets.len() as f64;
                let pv = val(*p);
                let gp = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| scale * bce_grad(x, y))
                    .collect();
                acc(*p, Tensor::new(pv.shape(), gp)?)?;
            }
        }
        Ok(())
    }

    /// Copies the gradient of every parameter leaf on this graph into the
    /// store, adding to whatever is already accumulated there.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        let mut pairs: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        pairs.sort();
        for (id, v) in pairs {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Fingerprint of every piecewise branch taken in the forward pass:
    /// relu input signs, max-pool winners and probability clamping. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    feed(i as u64);
                    for &v in self.value(*x).data() {
                        feed(u64::from(v > 0.0));
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    feed(i as u64);
                    argmax.iter().for_each(|&a| feed(a as u64));
                }
                Op::Bce { p, .. } => {
                    feed(i as u64);
                    for &v in self.value(*p).data() {
                        feed(u64::from(v <= PROB_CLAMP || v >= 1.0 - PROB_CLAMP));
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Ids of every parameter that appears on this graph.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }
}

fn clamp_prob(x: f64) -> f64 {
    x.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy of one clamped probability.
pub fn bce_term(x: f64, y: f64) -> f64 {
    let x = clamp_prob(x);
    -(y * x.ln() + (1.0 - y) * (1.0 - x).ln())
}

fn bce_grad(x: f64, y: f64) -> f64 {
    if x <= PROB_CLAMP || x >= 1.0 - PROB_CLAMP {
        0.0
    } else {
        -y / x + (1.0 - y) / (1.0 - x)
    }
}
