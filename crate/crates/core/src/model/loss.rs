//! The five-term training loss and its ablation-variant wiring.

use serde::{Deserialize, Serialize};

use super::heads::{ForwardNodes, Variant};
use super::tensor::{ModelError, NodeId, Tape, Tensor};

/// One training example at RoI-grid resolution. Mask targets are row-major
/// `y * grid + x` with values in {0, 1}; `gt_visible` is pixelwise contained
/// in `gt_amodal`.
#[derive(Debug, Clone)]
pub struct RoiSample {
    pub features: Tensor,
    pub gt_class: usize,
    pub gt_box_delta: [f64; 4],
    pub gt_amodal: Vec<f64>,
    pub gt_visible: Vec<f64>,
}

impl RoiSample {
    /// Occlusion-mask target: amodal minus visible, nonnegative by the
    /// containment invariant.
    pub fn gt_invisible(&self) -> Vec<f64> {
        self.gt_amodal
            .iter()
            .zip(self.gt_visible.iter())
            .map(|(&a, &v)| a - v)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_am: f64,
    pub l_vm: f64,
    pub l_ivm: f64,
    pub total: f64,
}

/// Tape nodes of each loss term; terms zeroed by the variant are `None`.
pub struct LossNodes {
    pub l_cls: NodeId,
    pub l_box: NodeId,
    pub l_am: NodeId,
    pub l_vm: Option<NodeId>,
    pub l_ivm: Option<NodeId>,
    pub total: NodeId,
}

/// Attach all loss terms for `sample` to an existing forward graph. The
/// breakdown reports zeroed terms as exactly 0, so the total always equals
/// the sum of the five fields.
pub fn total_loss(
    tape: &mut Tape,
    nodes: &ForwardNodes,
    sample: &RoiSample,
    variant: Variant,
) -> Result<(LossNodes, LossBreakdown), ModelError> {
    let l_cls = tape.softmax_xent(nodes.cls_logits, sample.gt_class)?;
    let l_box = tape.smooth_l1_mean(nodes.box_pred, sample.gt_box_delta.to_vec())?;
    let l_am = tape.sigmoid_bce_mean(nodes.am_logits, sample.gt_class, sample.gt_amodal.clone())?;
    let l_vm = if variant == Variant::WithoutVisibleLoss {
        None
    } else {
        Some(tape.sigmoid_bce_mean(
            nodes.vm_logits,
            sample.gt_class,
            sample.gt_visible.clone(),
        )?)
    };
    let l_ivm = if variant == Variant::WithoutInvisibleLoss {
        None
    } else {
        Some(tape.sigmoid_bce_mean(nodes.ivm_logits, sample.gt_class, sample.gt_invisible())?)
    };

    let mut terms = vec![l_cls, l_box, l_am];
    terms.extend(l_vm);
    terms.extend(l_ivm);
    let total = tape.sum(terms)?;

    let breakdown = LossBreakdown {
        l_cls: tape.value(l_cls).item(),
        l_box: tape.value(l_box).item(),
        l_am: tape.value(l_am).item(),
        l_vm: l_vm.map_or(0.0, |n| tape.value(n).item()),
        l_ivm: l_ivm.map_or(0.0, |n| tape.value(n).item()),
        total: tape.value(total).item(),
    };
    Ok((
        LossNodes {
            l_cls,
            l_box,
            l_am,
            l_vm,
            l_ivm,
            total,
        },
        breakdown,
    ))
}

/// The rejected alternative: an occlusion loss acting on probabilities,
/// `p = sigmoid(am) - sigmoid(vm)`, with plain cross-entropy on `p`. Kept
/// behind this function only to demonstrate its numerical instability; `p`
/// can leave (0, 1) and its gradient blows up as `p` approaches 0 or 1.
pub fn probability_space_ivm_loss(
    tape: &mut Tape,
    nodes: &ForwardNodes,
    class_channel: usize,
    target: Vec<f64>,
) -> Result<NodeId, ModelError> {
    let am_probs = tape.sigmoid(nodes.am_logits);
    let vm_probs = tape.sigmoid(nodes.vm_logits);
    let diff = tape.sub(am_probs, vm_probs)?;
    tape.bce_on_probs_mean(diff, class_channel, target)
}
