//! Minimal reverse-mode automatic differentiation on 64-bit tensors.
//!
//! Operations append nodes to a [`Tape`]; parents always precede children, so
//! a single reverse sweep in node order yields exact gradients with a fixed,
//! deterministic accumulation order.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("computation graph contains a cycle")]
    GraphCycle,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Dense 64-bit tensor. Three-dimensional data is laid out as
/// `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// Identity forward, no gradient to the parent.
    StopGrad(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Sub(NodeId, NodeId),
    /// Square convolution with zero padding, stride 1.
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        ksize: usize,
        pad: usize,
    },
    /// Spatial mean per channel: CxHxW -> C.
    MeanPool(NodeId),
    /// y = W x + b with W of shape [out, in].
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Mean binary cross-entropy with logits over one class channel of a
    /// KxHxW tensor, in the numerically stable log-sum-exp form.
    SigmoidBceMean {
        logits: NodeId,
        channel: usize,
        target: Vec<f64>,
    },
    /// Mean binary cross-entropy applied directly to supplied probabilities
    /// (no sigmoid). Deliberately unguarded: values outside (0, 1) produce
    /// non-finite losses, which is the failure mode it exists to demonstrate.
    BceOnProbsMean {
        probs: NodeId,
        channel: usize,
        target: Vec<f64>,
    },
    /// Softmax cross-entropy of a logit vector against one target class.
    SoftmaxXent {
        logits: NodeId,
        target_class: usize,
    },
    /// Mean smooth-L1 of a vector against a constant target.
    SmoothL1Mean {
        pred: NodeId,
        target: Vec<f64>,
    },
    /// Sum of scalar nodes.
    Sum(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients per tape node, populated by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient tensor for a node, zeros if the node was never reached.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| sigmoid(v)).collect(),
        };
        self.push(v, Op::Sigmoid(x))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(ModelError::ShapeMismatch(format!(
                "sub: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(self.value(b).data.iter())
                .map(|(&x, &y)| x - y)
                .collect(),
        };
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Convolution of a CxHxW input with an [out, in, k, k] kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    ) -> Result<NodeId, ModelError> {
        let (ishape, wshape, bshape) = (
            self.value(input).shape.clone(),
            self.value(weight).shape.clone(),
            self.value(bias).shape.clone(),
        );
        if ishape.len() != 3 || wshape.len() != 4 || bshape.len() != 1 {
            return Err(ModelError::ShapeMismatch(
                "conv2d expects CxHxW input, [out,in,k,k] weight, [out] bias".into(),
            ));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, c_in_w, k, k2) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if c_in != c_in_w || k != k2 || bshape[0] != c_out {
            return Err(ModelError::ShapeMismatch(format!(
                "conv2d: input {:?} weight {:?} bias {:?}",
                ishape, wshape, bshape
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(ModelError::ShapeMismatch("conv2d: kernel exceeds input".into()));
        }
        let oh = h + 2 * pad - k + 1;
        let ow = w + 2 * pad - k + 1;
        let x = &self.value(input).data;
        let wt = &self.value(weight).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for i in 0..c_in {
                        for ky in 0..k {
                            let y = oy + ky;
                            if y < pad || y >= h + pad {
                                continue;
                            }
                            let iy = y - pad;
                            for kx in 0..k {
                                let xx = ox + kx;
                                if xx < pad || xx >= w + pad {
                                    continue;
                                }
                                let ix = xx - pad;
                                acc += wt[((o * c_in + i) * k + ky) * k + kx]
                                    * x[(i * h + iy) * w + ix];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[c_out, oh, ow], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                ksize: k,
                pad,
            },
        ))
    }

    pub fn mean_pool(&mut self, input: NodeId) -> Result<NodeId, ModelError> {
        let shape = self.value(input).shape.clone();
        if shape.len() != 3 {
            return Err(ModelError::ShapeMismatch("mean_pool expects CxHxW".into()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let x = &self.value(input).data;
        let n = (h * w) as f64;
        let out: Vec<f64> = (0..c)
            .map(|ci| x[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / n)
            .collect();
        Ok(self.push(Tensor::from_vec(&[c], out), Op::MeanPool(input)))
    }

    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, ModelError> {
        let ishape = self.value(input).shape.clone();
        let wshape = self.value(weight).shape.clone();
        let bshape = self.value(bias).shape.clone();
        if ishape.len() != 1 || wshape.len() != 2 || bshape.len() != 1 {
            return Err(ModelError::ShapeMismatch("linear expects vector input".into()));
        }
        let (m, n) = (wshape[0], wshape[1]);
        if ishape[0] != n || bshape[0] != m {
            return Err(ModelError::ShapeMismatch(format!(
                "linear: input {:?} weight {:?} bias {:?}",
                ishape, wshape, bshape
            )));
        }
        let x = &self.value(input).data;
        let wt = &self.value(weight).data;
        let b = &self.value(bias).data;
        let out: Vec<f64> = (0..m)
            .map(|i| b[i] + (0..n).map(|j| wt[i * n + j] * x[j]).sum::<f64>())
            .collect();
        Ok(self.push(Tensor::from_vec(&[m], out), Op::Linear { input, weight, bias }))
    }

    /// Mean over the grid of `-[y log s(x) + (1-y) log(1-s(x))]` on one class
    /// channel, computed as `max(x,0) - x*y + ln(1 + e^-|x|)`.
    pub fn sigmoid_bce_mean(
        &mut self,
        logits: NodeId,
        channel: usize,
        target: Vec<f64>,
    ) -> Result<NodeId, ModelError> {
        let shape = self.value(logits).shape.clone();
        if shape.len() != 3 || channel >= shape[0] || target.len() != shape[1] * shape[2] {
            return Err(ModelError::ShapeMismatch(format!(
                "sigmoid_bce_mean: logits {:?}, channel {}, target len {}",
                shape,
                channel,
                target.len()
            )));
        }
        let hw = shape[1] * shape[2];
        let x = &self.value(logits).data[channel * hw..(channel + 1) * hw];
        let loss = x
            .iter()
            .zip(target.iter())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / hw as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidBceMean {
                logits,
                channel,
                target,
            },
        ))
    }

    /// Mean BCE on raw probabilities, no sigmoid and no clamping.
    pub fn bce_on_probs_mean(
        &mut self,
        probs: NodeId,
        channel: usize,
        target: Vec<f64>,
    ) -> Result<NodeId, ModelError> {
        let shape = self.value(probs).shape.clone();
        if shape.len() != 3 || channel >= shape[0] || target.len() != shape[1] * shape[2] {
            return Err(ModelError::ShapeMismatch("bce_on_probs_mean".into()));
        }
        let hw = shape[1] * shape[2];
        let p = &self.value(probs).data[channel * hw..(channel + 1) * hw];
        let loss = p
            .iter()
            .zip(target.iter())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / hw as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceOnProbsMean {
                probs,
                channel,
                target,
            },
        ))
    }

    pub fn softmax_xent(&mut self, logits: NodeId, target_class: usize) -> Result<NodeId, ModelError> {
        let shape = self.value(logits).shape.clone();
        if shape.len() != 1 || target_class >= shape[0] {
            return Err(ModelError::ShapeMismatch("softmax_xent".into()));
        }
        let x = &self.value(logits).data;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        Ok(self.push(
            Tensor::scalar(lse - x[target_class]),
            Op::SoftmaxXent {
                logits,
                target_class,
            },
        ))
    }

    pub fn smooth_l1_mean(&mut self, pred: NodeId, target: Vec<f64>) -> Result<NodeId, ModelError> {
        let shape = self.value(pred).shape.clone();
        if shape.len() != 1 || target.len() != shape[0] {
            return Err(ModelError::ShapeMismatch("smooth_l1_mean".into()));
        }
        let x = &self.value(pred).data;
        let loss = x
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| {
                let d = p - t;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .sum::<f64>()
            / x.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1Mean { pred, target }))
    }

    pub fn sum(&mut self, terms: Vec<NodeId>) -> Result<NodeId, ModelError> {
        if terms.iter().any(|&t| self.value(t).numel() != 1) {
            return Err(ModelError::ShapeMismatch("sum expects scalar terms".into()));
        }
        let v = terms.iter().map(|&t| self.value(t).item()).sum();
        Ok(self.push(Tensor::scalar(v), Op::Sum(terms)))
    }

    /// Smallest distance of any value to a kink of a piecewise-smooth op
    /// (ReLU inputs at 0, smooth-L1 residuals at +-1). Finite-difference
    /// checks need parameters comfortably away from these.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in &self.nodes[x.0].value.data {
                        margin = margin.min(v.abs());
                    }
                }
                Op::SmoothL1Mean { pred, target } => {
                    for (&p, &t) in self.nodes[pred.0].value.data.iter().zip(target.iter()) {
                        margin = margin.min(((p - t).abs() - 1.0).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, ModelError> {
        if self.value(root).numel() != 1 {
            return Err(ModelError::ShapeMismatch("backward root must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            // parents must precede children; anything else is a cycle
            let check = |p: NodeId| {
                if p.0 >= idx {
                    Err(ModelError::GraphCycle)
                } else {
                    Ok(())
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::StopGrad(x) => {
                    check(*x)?;
                }
                Op::Relu(x) => {
                    check(*x)?;
                    let xv = &self.nodes[x.0].value;
                    let gx: Vec<f64> = xv
                        .data
                        .iter()
                        .zip(g.data.iter())
                        .map(|(&v, &go)| if v > 0.0 { go } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(&xv.shape, gx));
                }
                Op::Sigmoid(x) => {
                    check(*x)?;
                    let yv = &node.value;
                    let gx: Vec<f64> = yv
                        .data
                        .iter()
                        .zip(g.data.iter())
                        .map(|(&y, &go)| go * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(&yv.shape, gx));
                }
                Op::Sub(a, b) => {
                    check(*a)?;
                    check(*b)?;
                    accumulate(&mut grads, *a, g.clone());
                    let gb = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|&v| -v).collect(),
                    };
                    accumulate(&mut grads, *b, gb);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    ksize,
                    pad,
                } => {
                    check(*input)?;
                    check(*weight)?;
                    check(*bias)?;
                    let x = &self.nodes[input.0].value;
                    let wt = &self.nodes[weight.0].value;
                    let (c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                    let c_out = wt.shape[0];
                    let k = *ksize;
                    let (oh, ow) = (node.value.shape[1], node.value.shape[2]);
                    let mut gi = vec![0.0; x.numel()];
                    let mut gw = vec![0.0; wt.numel()];
                    let mut gb = vec![0.0; c_out];
                    for o in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g.data[(o * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[o] += go;
                                for i in 0..c_in {
                                    for ky in 0..k {
                                        let y = oy + ky;
                                        if y < *pad || y >= h + pad {
                                            continue;
                                        }
                                        let iy = y - pad;
                                        for kx in 0..k {
                                            let xx = ox + kx;
                                            if xx < *pad || xx >= w + pad {
                                                continue;
                                            }
                                            let ix = xx - pad;
                                            let wi = ((o * c_in + i) * k + ky) * k + kx;
                                            let xi = (i * h + iy) * w + ix;
                                            gw[wi] += go * x.data[xi];
                                            gi[xi] += go * wt.data[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::from_vec(&x.shape, gi));
                    accumulate(&mut grads, *weight, Tensor::from_vec(&wt.shape, gw));
                    accumulate(&mut grads, *bias, Tensor::from_vec(&[c_out], gb));
                }
                Op::MeanPool(input) => {
                    check(*input)?;
                    let x = &self.nodes[input.0].value;
                    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                    let n = (h * w) as f64;
                    let mut gi = vec![0.0; x.numel()];
                    for ci in 0..c {
                        let gc = g.data[ci] / n;
                        for v in gi[ci * h * w..(ci + 1) * h * w].iter_mut() {
                            *v = gc;
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::from_vec(&x.shape, gi));
                }
                Op::Linear { input, weight, bias } => {
                    check(*input)?;
                    check(*weight)?;
                    check(*bias)?;
                    let x = &self.nodes[input.0].value;
                    let wt = &self.nodes[weight.0].value;
                    let (m, n) = (wt.shape[0], wt.shape[1]);
                    let mut gi = vec![0.0; n];
                    let mut gw = vec![0.0; m * n];
                    for i in 0..m {
                        let go = g.data[i];
                        for j in 0..n {
                            gw[i * n + j] = go * x.data[j];
                            gi[j] += go * wt.data[i * n + j];
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::from_vec(&[n], gi));
                    accumulate(&mut grads, *weight, Tensor::from_vec(&[m, n], gw));
                    accumulate(&mut grads, *bias, g.clone());
                }
                Op::SigmoidBceMean {
                    logits,
                    channel,
                    target,
                } => {
                    check(*logits)?;
                    let lv = &self.nodes[logits.0].value;
                    let hw = lv.shape[1] * lv.shape[2];
                    let scale = g.item() / hw as f64;
                    let mut gl = vec![0.0; lv.numel()];
                    let base = channel * hw;
                    for (i, &y) in target.iter().enumerate() {
                        let x = lv.data[base + i];
                        gl[base + i] = scale * (sigmoid(x) - y);
                    }
                    accumulate(&mut grads, *logits, Tensor::from_vec(&lv.shape, gl));
                }
                Op::BceOnProbsMean {
                    probs,
                    channel,
                    target,
                } => {
                    check(*probs)?;
                    let pv = &self.nodes[probs.0].value;
                    let hw = pv.shape[1] * pv.shape[2];
                    let scale = g.item() / hw as f64;
                    let mut gp = vec![0.0; pv.numel()];
                    let base = channel * hw;
                    for (i, &y) in target.iter().enumerate() {
                        let p = pv.data[base + i];
                        gp[base + i] = scale * (-y / p + (1.0 - y) / (1.0 - p));
                    }
                    accumulate(&mut grads, *probs, Tensor::from_vec(&pv.shape, gp));
                }
                Op::SoftmaxXent {
                    logits,
                    target_class,
                } => {
                    check(*logits)?;
                    let lv = &self.nodes[logits.0].value;
                    let m = lv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = lv.data.iter().map(|&v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let go = g.item();
                    let gl: Vec<f64> = exps
                        .iter()
                        .enumerate()
                        .map(|(j, &e)| {
                            let p = e / z;
                            go * (p - if j == *target_class { 1.0 } else { 0.0 })
                        })
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::from_vec(&lv.shape, gl));
                }
                Op::SmoothL1Mean { pred, target } => {
                    check(*pred)?;
                    let pv = &self.nodes[pred.0].value;
                    let go = g.item() / pv.numel() as f64;
                    let gp: Vec<f64> = pv
                        .data
                        .iter()
                        .zip(target.iter())
                        .map(|(&p, &t)| {
                            let d = p - t;
                            go * if d.abs() < 1.0 { d } else { d.signum() }
                        })
                        .collect();
                    accumulate(&mut grads, *pred, Tensor::from_vec(&pv.shape, gp));
                }
                Op::Sum(terms) => {
                    let go = g.item();
                    for &t in terms {
                        check(t)?;
                        accumulate(&mut grads, t, Tensor::scalar(go));
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(g.data.iter()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
