//! Eager reverse-mode tape.
//!
//! Ops execute immediately on `Array4<f64>` tensors. With recording enabled
//! every op pushes a node holding cheap `Rc` clones of whatever backward
//! needs; with recording disabled nothing is retained, so inference memory
//! follows the liveness of the caller's locals. Gradients of a scalar loss
//! are accumulated per node (fan-out sums naturally) and routed into the
//! [`ParamSet`] for parameter leaves.

use std::rc::Rc;

use ndarray::{Array1, Array3, Array4, Axis, Ix1, Ix2};

use super::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2x2_backward, conv_transpose2x2_forward,
    max_pool2_backward, max_pool2_forward, ConvSpec,
};
use super::params::{ParamId, ParamSet};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are floored at this value inside the log of the
/// cross-entropy; everything reachable in practice sits far above it.
pub const PROB_FLOOR: f64 = 1e-12;

/// One tensor flowing through a [`Graph`]. Cloning is cheap.
#[derive(Clone)]
pub struct Value {
    arr: Rc<Array4<f64>>,
    node: Option<usize>,
}

impl Value {
    pub fn array(&self) -> &Array4<f64> {
        &self.arr
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.arr.dim()
    }

    /// Extracts a 1x1x1x1 value (loss outputs).
    pub fn scalar(&self) -> f64 {
        self.arr[[0, 0, 0, 0]]
    }
}

/// Batch-norm parameter handles: learned scale/shift plus running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

enum OpKind {
    Input,
    Conv2d {
        w: ParamId,
        b: ParamId,
        spec: ConvSpec,
    },
    ConvTranspose2x2 {
        w: ParamId,
        b: ParamId,
    },
    MaxPool2 {
        arg: Array4<u8>,
        in_shape: (usize, usize, usize, usize),
    },
    BatchNorm {
        bn: BnParams,
        mean: Array1<f64>,
        var: Array1<f64>,
        batch_stats: bool,
    },
    Relu,
    ConcatChannels {
        channels: Vec<usize>,
    },
    SumN,
    SoftmaxChannels,
    CrossEntropy {
        labels: Array3<u8>,
    },
    SoftDice {
        labels: Array3<u8>,
        numer: f64,
        denom: f64,
        smooth: f64,
    },
}

struct Node {
    op: OpKind,
    inputs: Vec<usize>,
    input_arrs: Vec<Rc<Array4<f64>>>,
    output: Rc<Array4<f64>>,
}

/// Eager op recorder. Build one per forward pass.
pub struct Graph {
    recording: bool,
    nodes: Vec<Node>,
    grads: Vec<Option<Array4<f64>>>,
}

impl Graph {
    /// A graph that retains per-op state for [`Graph::backward`].
    pub fn training() -> Self {
        Graph {
            recording: true,
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// A graph that retains nothing; ops are plain functions.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(
        &mut self,
        op: OpKind,
        inputs: &[&Value],
        output: Array4<f64>,
    ) -> Value {
        let arr = Rc::new(output);
        if !self.recording {
            return Value { arr, node: None };
        }
        let ids: Vec<usize> = inputs.iter().filter_map(|v| v.node).collect();
        debug_assert_eq!(ids.len(), inputs.len(), "inputs from a non-recording graph");
        let node = Node {
            op,
            inputs: ids,
            input_arrs: inputs.iter().map(|v| Rc::clone(&v.arr)).collect(),
            output: Rc::clone(&arr),
        };
        self.nodes.push(node);
        Value {
            arr,
            node: Some(self.nodes.len() - 1),
        }
    }

    /// Registers a leaf tensor.
    pub fn input(&mut self, arr: Array4<f64>) -> Value {
        let shape = arr.dim();
        let _ = shape;
        self.push(OpKind::Input, &[], arr)
    }

    /// Stride-1 convolution; `w` is `(out_c, in_c, kh, kw)` in the param set.
    pub fn conv2d(
        &mut self,
        ps: &ParamSet,
        w: ParamId,
        b: ParamId,
        x: &Value,
        spec: ConvSpec,
    ) -> Value {
        let wd = ps.data(w);
        let out_c = wd.shape()[0];
        let patch: usize = wd.shape()[1..].iter().product();
        let w2 = wd
            .view()
            .into_shape_with_order((out_c, patch))
            .expect("contiguous weights");
        let bias = ps
            .data(b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias rank 1")
            .to_owned();
        let y = conv2d_forward(x.array(), &w2, &bias, &spec);
        self.push(OpKind::Conv2d { w, b, spec }, &[x], y)
    }

    /// Transposed convolution, kernel 2x2, stride 2; `w` is
    /// `(in_c, out_c, 2, 2)`.
    pub fn conv_transpose2x2(
        &mut self,
        ps: &ParamSet,
        w: ParamId,
        b: ParamId,
        x: &Value,
    ) -> Value {
        let wd = ps.data(w);
        let in_c = wd.shape()[0];
        let rest: usize = wd.shape()[1..].iter().product();
        let w2 = wd
            .view()
            .into_shape_with_order((in_c, rest))
            .expect("contiguous weights");
        let bias = ps
            .data(b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias rank 1")
            .to_owned();
        let y = conv_transpose2x2_forward(x.array(), &w2, &bias);
        self.push(OpKind::ConvTranspose2x2 { w, b }, &[x], y)
    }

    pub fn max_pool2(&mut self, x: &Value) -> Value {
        let in_shape = x.dim();
        let (y, arg) = max_pool2_forward(x.array());
        self.push(OpKind::MaxPool2 { arg, in_shape }, &[x], y)
    }

    /// Batch normalization over (batch, height, width) per channel.
    /// In training mode batch statistics normalize the activations and the
    /// running estimates are updated in `ps`; in eval mode the running
    /// estimates are used directly.
    pub fn batch_norm(
        &mut self,
        ps: &mut ParamSet,
        bn: &BnParams,
        x: &Value,
        train: bool,
    ) -> Value {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let (mean, var) = if train {
            let mean = x
                .array()
                .sum_axis(Axis(0))
                .sum_axis(Axis(1))
                .sum_axis(Axis(1))
                / count;
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let m = mean[ch];
                let sq: f64 = x
                    .array()
                    .index_axis(Axis(1), ch)
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum();
                var[ch] = sq / count;
            }
            // running estimates keep the unbiased variance
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            {
                let rm = ps.get_mut(bn.running_mean);
                let mut rmv = rm.data.view_mut().into_dimensionality::<Ix1>().unwrap();
                rmv.zip_mut_with(&mean, |r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            }
            {
                let rv = ps.get_mut(bn.running_var);
                let mut rvv = rv.data.view_mut().into_dimensionality::<Ix1>().unwrap();
                rvv.zip_mut_with(&var, |r, &v| {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias
                });
            }
            (mean, var)
        } else {
            let mean = ps
                .data(bn.running_mean)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let var = ps
                .data(bn.running_var)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            (mean, var)
        };

        let gamma = ps.data(bn.gamma).view().into_dimensionality::<Ix1>().unwrap();
        let beta = ps.data(bn.beta).view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let inv_std = 1.0 / (var[ch] + BN_EPS).sqrt();
            let (g, bt, m) = (gamma[ch], beta[ch], mean[ch]);
            let xc = x.array().index_axis(Axis(1), ch);
            let mut yc = y.index_axis_mut(Axis(1), ch);
            yc.zip_mut_with(&xc, |o, &v| *o = (v - m) * inv_std * g + bt);
        }
        self.push(
            OpKind::BatchNorm {
                bn: *bn,
                mean,
                var,
                batch_stats: train,
            },
            &[x],
            y,
        )
    }

    pub fn relu(&mut self, x: &Value) -> Value {
        let y = x.array().mapv(|v| v.max(0.0));
        self.push(OpKind::Relu, &[x], y)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, xs: &[&Value]) -> Value {
        assert!(!xs.is_empty());
        let (n, _, h, w) = xs[0].dim();
        let channels: Vec<usize> = xs.iter().map(|v| v.dim().1).collect();
        let total: usize = channels.iter().sum();
        let mut y = Array4::zeros((n, total, h, w));
        let mut at = 0;
        for v in xs {
            let c = v.dim().1;
            y.slice_mut(ndarray::s![.., at..at + c, .., ..])
                .assign(v.array());
            at += c;
        }
        self.push(OpKind::ConcatChannels { channels }, xs, y)
    }

    /// Element-wise sum of same-shaped tensors.
    pub fn sum(&mut self, xs: &[&Value]) -> Value {
        assert!(!xs.is_empty());
        let mut y = xs[0].array().as_ref().clone();
        for v in &xs[1..] {
            y += v.array().as_ref();
        }
        self.push(OpKind::SumN, xs, y)
    }

    /// Per-pixel softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: &Value) -> Value {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::zeros((n, c, h, w));
        let xa = x.array();
        for i in 0..n {
            for iy in 0..h {
                for ix in 0..w {
                    let mut m = f64::NEG_INFINITY;
                    for ch in 0..c {
                        m = m.max(xa[[i, ch, iy, ix]]);
                    }
                    let mut z = 0.0;
                    for ch in 0..c {
                        let e = (xa[[i, ch, iy, ix]] - m).exp();
                        y[[i, ch, iy, ix]] = e;
                        z += e;
                    }
                    for ch in 0..c {
                        y[[i, ch, iy, ix]] /= z;
                    }
                }
            }
        }
        self.push(OpKind::SoftmaxChannels, &[x], y)
    }

    /// Mean per-pixel negative log-likelihood of the labelled class.
    /// `probs` must already be per-pixel probabilities.
    pub fn cross_entropy(&mut self, probs: &Value, labels: &Array3<u8>) -> Value {
        let (n, _, h, w) = probs.dim();
        let count = (n * h * w) as f64;
        let mut total = 0.0;
        let pa = probs.array();
        for i in 0..n {
            for iy in 0..h {
                for ix in 0..w {
                    let l = labels[[i, iy, ix]] as usize;
                    total -= pa[[i, l, iy, ix]].max(PROB_FLOOR).ln();
                }
            }
        }
        let loss = Array4::from_elem((1, 1, 1, 1), total / count);
        self.push(
            OpKind::CrossEntropy {
                labels: labels.clone(),
            },
            &[probs],
            loss,
        )
    }

    /// Soft Dice loss on the foreground channel (class 1), one term for the
    /// whole batch.
    pub fn soft_dice(&mut self, probs: &Value, labels: &Array3<u8>) -> Value {
        let smooth = 1.0;
        let p1 = probs.array().index_axis(Axis(1), 1);
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for (p, &t) in p1.iter().zip(labels.iter()) {
            let t = t as f64;
            inter += p * t;
            psum += p;
            tsum += t;
        }
        let numer = 2.0 * inter + smooth;
        let denom = psum + tsum + smooth;
        let loss = Array4::from_elem((1, 1, 1, 1), 1.0 - numer / denom);
        self.push(
            OpKind::SoftDice {
                labels: labels.clone(),
                numer,
                denom,
                smooth,
            },
            &[probs],
            loss,
        )
    }

    /// Accumulated gradient of the last backward pass for a leaf value.
    pub fn grad_of(&self, v: &Value) -> Option<&Array4<f64>> {
        v.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Reverse pass from a scalar loss. Parameter gradients accumulate into
    /// `ps`; leaf input gradients stay queryable via [`Graph::grad_of`].
    pub fn backward(&mut self, loss: &Value, ps: &mut ParamSet) {
        assert!(self.recording, "backward on an inference graph");
        let loss_id = loss.node.expect("loss from this graph");
        assert_eq!(loss.dim(), (1, 1, 1, 1), "loss must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss_id] = Some(Array4::ones((1, 1, 1, 1)));

        for id in (0..=loss_id).rev() {
            let Some(gy) = self.grads[id].take() else {
                continue;
            };
            let keep_grad = matches!(self.nodes[id].op, OpKind::Input);
            let input_grads = self.node_backward(id, &gy, ps);
            let input_ids: Vec<usize> = self.nodes[id].inputs.clone();
            for (slot, g) in input_ids.into_iter().zip(input_grads) {
                if let Some(g) = g {
                    match &mut self.grads[slot] {
                        Some(a) => *a += &g,
                        none => *none = Some(g),
                    }
                }
            }
            if keep_grad {
                self.grads[id] = Some(gy);
            }
        }
    }

    fn node_backward(
        &self,
        id: usize,
        gy: &Array4<f64>,
        ps: &mut ParamSet,
    ) -> Vec<Option<Array4<f64>>> {
        let node = &self.nodes[id];
        match &node.op {
            OpKind::Input => Vec::new(),
            OpKind::Conv2d { w, b, spec } => {
                let x = node.input_arrs[0].as_ref();
                let wd = ps.data(*w);
                let out_c = wd.shape()[0];
                let patch: usize = wd.shape()[1..].iter().product();
                let w_shape = wd.raw_dim();
                let w2 = wd
                    .view()
                    .into_shape_with_order((out_c, patch))
                    .expect("contiguous weights");
                let (gx, gw, gb) = conv2d_backward(x, &w2, gy, spec);
                ps.accumulate_grad(*w, &gw.into_shape_with_order(w_shape).unwrap().into_dyn());
                ps.accumulate_grad(*b, &gb.into_dyn());
                vec![Some(gx)]
            }
            OpKind::ConvTranspose2x2 { w, b } => {
                let x = node.input_arrs[0].as_ref();
                let wd = ps.data(*w);
                let in_c = wd.shape()[0];
                let rest: usize = wd.shape()[1..].iter().product();
                let w_shape = wd.raw_dim();
                let w2 = wd
                    .view()
                    .into_shape_with_order((in_c, rest))
                    .expect("contiguous weights");
                let (gx, gw, gb) = conv_transpose2x2_backward(x, &w2, gy);
                ps.accumulate_grad(*w, &gw.into_shape_with_order(w_shape).unwrap().into_dyn());
                ps.accumulate_grad(*b, &gb.into_dyn());
                vec![Some(gx)]
            }
            OpKind::MaxPool2 { arg, in_shape } => {
                vec![Some(max_pool2_backward(gy, arg, *in_shape))]
            }
            OpKind::BatchNorm {
                bn,
                mean,
                var,
                batch_stats,
            } => {
                let x = node.input_arrs[0].as_ref();
                let (n, c, h, w) = x.dim();
                let count = (n * h * w) as f64;
                let gamma = ps
                    .data(bn.gamma)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                let mut gx = Array4::zeros((n, c, h, w));
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                for ch in 0..c {
                    let inv_std = 1.0 / (var[ch] + BN_EPS).sqrt();
                    let m = mean[ch];
                    let xc = x.index_axis(Axis(1), ch);
                    let gc = gy.index_axis(Axis(1), ch);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (&g, &v) in gc.iter().zip(xc.iter()) {
                        sum_g += g;
                        sum_gx += g * (v - m) * inv_std;
                    }
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gx;
                    let mut out = gx.index_axis_mut(Axis(1), ch);
                    if *batch_stats {
                        let mean_g = sum_g / count;
                        let mean_gx = sum_gx / count;
                        let scale = gamma[ch] * inv_std;
                        ndarray::Zip::from(&mut out).and(&gc).and(&xc).for_each(
                            |o, &g, &v| {
                                let xhat = (v - m) * inv_std;
                                *o = scale * (g - mean_g - xhat * mean_gx);
                            },
                        );
                    } else {
                        let scale = gamma[ch] * inv_std;
                        ndarray::Zip::from(&mut out)
                            .and(&gc)
                            .for_each(|o, &g| *o = scale * g);
                    }
                }
                ps.accumulate_grad(bn.gamma, &dgamma.into_dyn());
                ps.accumulate_grad(bn.beta, &dbeta.into_dyn());
                vec![Some(gx)]
            }
            OpKind::Relu => {
                let y = node.output.as_ref();
                let mut gx = gy.clone();
                gx.zip_mut_with(y, |g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                vec![Some(gx)]
            }
            OpKind::ConcatChannels { channels } => {
                let mut out = Vec::with_capacity(channels.len());
                let mut at = 0;
                for &c in channels {
                    let g = gy
                        .slice(ndarray::s![.., at..at + c, .., ..])
                        .to_owned();
                    out.push(Some(g));
                    at += c;
                }
                out
            }
            OpKind::SumN => node.inputs.iter().map(|_| Some(gy.clone())).collect(),
            OpKind::SoftmaxChannels => {
                let y = node.output.as_ref();
                let (n, c, h, w) = y.dim();
                let mut gx = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for iy in 0..h {
                        for ix in 0..w {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                dot += gy[[i, ch, iy, ix]] * y[[i, ch, iy, ix]];
                            }
                            for ch in 0..c {
                                gx[[i, ch, iy, ix]] =
                                    y[[i, ch, iy, ix]] * (gy[[i, ch, iy, ix]] - dot);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }
            OpKind::CrossEntropy { labels } => {
                let probs = node.input_arrs[0].as_ref();
                let (n, c, h, w) = probs.dim();
                let count = (n * h * w) as f64;
                let go = gy[[0, 0, 0, 0]];
                let mut gp = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for iy in 0..h {
                        for ix in 0..w {
                            let l = labels[[i, iy, ix]] as usize;
                            let p = probs[[i, l, iy, ix]].max(PROB_FLOOR);
                            gp[[i, l, iy, ix]] = -go / (p * count);
                        }
                    }
                }
                vec![Some(gp)]
            }
            OpKind::SoftDice {
                labels,
                numer,
                denom,
                smooth: _,
            } => {
                let probs = node.input_arrs[0].as_ref();
                let (n, c, h, w) = probs.dim();
                let go = gy[[0, 0, 0, 0]];
                let mut gp = Array4::zeros((n, c, h, w));
                let d2 = denom * denom;
                for i in 0..n {
                    for iy in 0..h {
                        for ix in 0..w {
                            let t = labels[[i, iy, ix]] as f64;
                            // d(1 - numer/denom)/dp1 = -(2 t denom - numer) / denom^2
                            gp[[i, 1, iy, ix]] = -go * (2.0 * t * denom - numer) / d2;
                        }
                    }
                }
                vec![Some(gp)]
            }
        }
    }
}
