//! The occlusion-aware mask head stack.
//!
//! Two structurally identical mask heads (four 3x3 convolutions with ReLU,
//! then a 1x1 output convolution) predict amodal and visible mask logits from
//! shared RoI features. The occlusion logits are the amodal logits minus the
//! ReLU of the visible logits: the ReLU guard keeps pixels where neither mask
//! fires from lighting up as occlusion. Minimal classification and box heads
//! sit on mean-pooled features so the full five-term loss is expressible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{ModelError, NodeId, Tape, Tensor};

pub const CONV_LAYERS: usize = 4;
pub const KERNEL: usize = 3;

/// Loss-routing ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// All five loss terms, gradients flow everywhere they reach.
    Full,
    /// Occlusion-mask loss switched off.
    WithoutInvisibleLoss,
    /// Visible-mask loss switched off.
    WithoutVisibleLoss,
    /// Both losses on, but neither propagates into the amodal head nor the
    /// shared feature input; they update only the visible head.
    Independent,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Some(Variant::Full),
            "no-liv" | "no_liv" => Some(Variant::WithoutInvisibleLoss),
            "no-lv" | "no_lv" => Some(Variant::WithoutVisibleLoss),
            "independent" => Some(Variant::Independent),
            _ => None,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutInvisibleLoss => "no-liv",
            Variant::WithoutVisibleLoss => "no-lv",
            Variant::Independent => "independent",
        }
    }

    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutInvisibleLoss,
        Variant::WithoutVisibleLoss,
        Variant::Independent,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// Shape `[out, in, k, k]`.
    pub weight: Tensor,
    /// Shape `[out]`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// Shape `[out, in]`.
    pub weight: Tensor,
    /// Shape `[out]`.
    pub bias: Tensor,
}

/// One mask head: four 3x3 convolutions (C -> C) and a 1x1 output (C -> K).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHead {
    pub convs: Vec<ConvLayer>,
    pub output: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub channels: usize,
    pub classes: usize,
    pub amodal_head: MaskHead,
    pub visible_head: MaskHead,
    pub cls: LinearLayer,
    pub bbox: LinearLayer,
}

/// Parameter groups used by the loss-routing checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    AmodalHead,
    VisibleHead,
    ClsHead,
    BoxHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::AmodalHead,
        ParamGroup::VisibleHead,
        ParamGroup::ClsHead,
        ParamGroup::BoxHead,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::AmodalHead => "amodal_head",
            ParamGroup::VisibleHead => "visible_head",
            ParamGroup::ClsHead => "cls_head",
            ParamGroup::BoxHead => "box_head",
        }
    }
}

fn head_param_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..CONV_LAYERS {
        names.push(format!("{prefix}.conv{i}.weight"));
        names.push(format!("{prefix}.conv{i}.bias"));
    }
    names.push(format!("{prefix}.output.weight"));
    names.push(format!("{prefix}.output.bias"));
    names
}

impl MaskHead {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }
}

impl ModelParams {
    /// Canonical parameter order used by the optimizer, checkpoints, and
    /// gradient checks: amodal head, visible head, cls, box.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in head_param_names("amodal_head")
            .into_iter()
            .zip(self.amodal_head.tensors())
        {
            out.push((name, t));
        }
        for (name, t) in head_param_names("visible_head")
            .into_iter()
            .zip(self.visible_head.tensors())
        {
            out.push((name, t));
        }
        out.push(("cls.weight".into(), &self.cls.weight));
        out.push(("cls.bias".into(), &self.cls.bias));
        out.push(("bbox.weight".into(), &self.bbox.weight));
        out.push(("bbox.bias".into(), &self.bbox.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.amodal_head.tensors_mut();
        out.extend(self.visible_head.tensors_mut());
        out.push(&mut self.cls.weight);
        out.push(&mut self.cls.bias);
        out.push(&mut self.bbox.weight);
        out.push(&mut self.bbox.bias);
        out
    }

    pub fn group_of(index: usize) -> ParamGroup {
        let per_head = 2 * CONV_LAYERS + 2;
        if index < per_head {
            ParamGroup::AmodalHead
        } else if index < 2 * per_head {
            ParamGroup::VisibleHead
        } else if index < 2 * per_head + 2 {
            ParamGroup::ClsHead
        } else {
            ParamGroup::BoxHead
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn kaiming_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ConvLayer {
    let fan_in = (c_in * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid stddev");
    let weight: Vec<f64> = (0..c_out * c_in * k * k)
        .map(|_| normal.sample(rng))
        .collect();
    ConvLayer {
        weight: Tensor::from_vec(&[c_out, c_in, k, k], weight),
        bias: Tensor::zeros(&[c_out]),
    }
}

fn kaiming_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> LinearLayer {
    let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("valid stddev");
    let weight: Vec<f64> = (0..out * inp).map(|_| normal.sample(rng)).collect();
    LinearLayer {
        weight: Tensor::from_vec(&[out, inp], weight),
        bias: Tensor::zeros(&[out]),
    }
}

fn init_head(rng: &mut ChaCha8Rng, channels: usize, classes: usize) -> MaskHead {
    MaskHead {
        convs: (0..CONV_LAYERS)
            .map(|_| kaiming_conv(rng, channels, channels, KERNEL))
            .collect(),
        output: kaiming_conv(rng, classes, channels, 1),
    }
}

/// Seeded stand-in for starting from pre-trained weights: the amodal and
/// visible heads receive identical parameter values.
pub fn shared_init(seed: u64, channels: usize, classes: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = init_head(&mut rng, channels, classes);
    ModelParams {
        channels,
        classes,
        amodal_head: head.clone(),
        visible_head: head,
        cls: kaiming_linear(&mut rng, classes, channels),
        bbox: kaiming_linear(&mut rng, 4, channels),
    }
}

/// Independent random heads, for tests that need asymmetric parameters.
pub fn random_init(seed: u64, channels: usize, classes: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams {
        channels,
        classes,
        amodal_head: init_head(&mut rng, channels, classes),
        visible_head: init_head(&mut rng, channels, classes),
        cls: kaiming_linear(&mut rng, classes, channels),
        bbox: kaiming_linear(&mut rng, 4, channels),
    }
}

/// Tape node ids of every parameter, in canonical order, plus the feature
/// input node.
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
    pub features: NodeId,
}

impl ParamNodes {
    pub fn group_ids(&self, group: ParamGroup) -> Vec<NodeId> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(i, _)| ModelParams::group_of(*i) == group)
            .map(|(_, &id)| id)
            .collect()
    }
}

/// All tape nodes a forward pass produces.
pub struct ForwardNodes {
    pub params: ParamNodes,
    pub am_logits: NodeId,
    pub vm_logits: NodeId,
    pub ivm_logits: NodeId,
    pub cls_logits: NodeId,
    pub box_pred: NodeId,
}

fn run_head(
    tape: &mut Tape,
    input: NodeId,
    ids: &mut Vec<NodeId>,
    head: &MaskHead,
) -> Result<NodeId, ModelError> {
    let mut h = input;
    for conv in &head.convs {
        let w = tape.leaf(conv.weight.clone());
        let b = tape.leaf(conv.bias.clone());
        ids.push(w);
        ids.push(b);
        let pre = tape.conv2d(h, w, b, (KERNEL - 1) / 2)?;
        h = tape.relu(pre);
    }
    let w = tape.leaf(head.output.weight.clone());
    let b = tape.leaf(head.output.bias.clone());
    ids.push(w);
    ids.push(b);
    tape.conv2d(h, w, b, 0)
}

/// Build the full forward graph for one RoI feature tensor (C x M x M).
///
/// `relu_guard` is normally true; switching it off subtracts raw visible
/// logits and exists only to demonstrate why the guard matters.
pub fn forward_heads(
    tape: &mut Tape,
    params: &ModelParams,
    features: &Tensor,
    variant: Variant,
    relu_guard: bool,
) -> Result<ForwardNodes, ModelError> {
    if features.shape.len() != 3 || features.shape[0] != params.channels {
        return Err(ModelError::ShapeMismatch(format!(
            "features {:?} do not match {} channels",
            features.shape, params.channels
        )));
    }
    let trunk = tape.leaf(features.clone());
    let mut ids: Vec<NodeId> = Vec::new();

    let am_logits = run_head(tape, trunk, &mut ids, &params.amodal_head)?;

    // the visible head sees detached features under the independent routing
    let visible_input = if variant == Variant::Independent {
        tape.stop_grad(trunk)
    } else {
        trunk
    };
    let vm_logits = run_head(tape, visible_input, &mut ids, &params.visible_head)?;

    let guarded = if relu_guard {
        tape.relu(vm_logits)
    } else {
        vm_logits
    };
    let am_for_sub = if variant == Variant::Independent {
        tape.stop_grad(am_logits)
    } else {
        am_logits
    };
    let ivm_logits = tape.sub(am_for_sub, guarded)?;

    let pooled = tape.mean_pool(trunk)?;
    let wc = tape.leaf(params.cls.weight.clone());
    let bc = tape.leaf(params.cls.bias.clone());
    let cls_logits = tape.linear(pooled, wc, bc)?;
    let wb = tape.leaf(params.bbox.weight.clone());
    let bb = tape.leaf(params.bbox.bias.clone());
    let box_pred = tape.linear(pooled, wb, bb)?;
    ids.extend([wc, bc, wb, bb]);

    Ok(ForwardNodes {
        params: ParamNodes {
            ids,
            features: trunk,
        },
        am_logits,
        vm_logits,
        ivm_logits,
        cls_logits,
        box_pred,
    })
}

/// Convenience: parameters that always output the given constant logits, by
/// zero weights and chosen biases. Used to pin down the head arithmetic.
pub fn constant_logit_params(
    channels: usize,
    classes: usize,
    am_logit: f64,
    vm_logit: f64,
) -> ModelParams {
    let zero_conv = |c_out: usize, c_in: usize, k: usize, bias: f64| ConvLayer {
        weight: Tensor::zeros(&[c_out, c_in, k, k]),
        bias: Tensor::from_vec(&[c_out], vec![bias; c_out]),
    };
    // hidden convs keep activations at a harmless positive constant; the
    // 1x1 output bias sets the logit exactly
    let head = |logit: f64| MaskHead {
        convs: (0..CONV_LAYERS)
            .map(|_| zero_conv(channels, channels, KERNEL, 1.0))
            .collect(),
        output: ConvLayer {
            weight: Tensor::zeros(&[classes, channels, 1, 1]),
            bias: Tensor::from_vec(&[classes], vec![logit; classes]),
        },
    };
    ModelParams {
        channels,
        classes,
        amodal_head: head(am_logit),
        visible_head: head(vm_logit),
        cls: LinearLayer {
            weight: Tensor::zeros(&[classes, channels]),
            bias: Tensor::zeros(&[classes]),
        },
        bbox: LinearLayer {
            weight: Tensor::zeros(&[4, channels]),
            bias: Tensor::zeros(&[4]),
        },
    }
}
