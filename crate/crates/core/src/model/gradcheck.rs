//! Finite-difference verification of every analytic gradient, and the
//! per-variant loss-routing checks.
//!
//! Configurations are drawn at random but rejected while any ReLU input or
//! smooth-L1 residual sits within `KINK_MARGIN` of a non-differentiable
//! point; central differences across a kink would otherwise report bogus
//! errors that have nothing to do with the backward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::heads::{
    forward_heads, ConvLayer, LinearLayer, MaskHead, ModelParams, ParamGroup, Variant,
    CONV_LAYERS, KERNEL,
};
use super::loss::{total_loss, RoiSample};
use super::tensor::{ModelError, Tape, Tensor};

pub const KINK_MARGIN: f64 = 2e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Independent random configurations to test.
    pub configs: usize,
    pub channels: usize,
    pub grid: usize,
    pub classes: usize,
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 20,
            configs: 20,
            channels: 2,
            grid: 4,
            classes: 2,
            epsilon: 1e-5,
            tolerance: 1e-6,
        }
    }
}

pub const LOSS_TERMS: [&str; 5] = ["l_cls", "l_box", "l_am", "l_vm", "l_ivm"];

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub parameter_checks: usize,
    /// Worst relative error per loss term.
    pub per_term: Vec<(String, f64)>,
    pub passed: bool,
    pub tolerance: f64,
}

/// Relative error with a floor: tiny gradients are compared absolutely
/// instead of amplifying float noise.
fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

struct Case {
    params: ModelParams,
    sample: RoiSample,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(lo..hi))
        .collect();
    Tensor::from_vec(shape, data)
}

fn random_params(rng: &mut ChaCha8Rng, channels: usize, classes: usize) -> ModelParams {
    let conv = |rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize| ConvLayer {
        weight: uniform_tensor(rng, &[c_out, c_in, k, k], -0.4, 0.4),
        bias: uniform_tensor(rng, &[c_out], -0.2, 0.2),
    };
    let head = |rng: &mut ChaCha8Rng| MaskHead {
        convs: (0..CONV_LAYERS)
            .map(|_| conv(rng, channels, channels, KERNEL))
            .collect(),
        output: conv(rng, classes, channels, 1),
    };
    ModelParams {
        channels,
        classes,
        amodal_head: head(rng),
        visible_head: head(rng),
        cls: LinearLayer {
            weight: uniform_tensor(rng, &[classes, channels], -0.4, 0.4),
            bias: uniform_tensor(rng, &[classes], -0.2, 0.2),
        },
        bbox: LinearLayer {
            weight: uniform_tensor(rng, &[4, channels], -0.4, 0.4),
            bias: uniform_tensor(rng, &[4], -0.2, 0.2),
        },
    }
}

fn random_sample(rng: &mut ChaCha8Rng, channels: usize, grid: usize, classes: usize) -> RoiSample {
    let n = grid * grid;
    let mut amodal = vec![0.0; n];
    let mut visible = vec![0.0; n];
    for i in 0..n {
        if rng.random_range(0..2) == 1 {
            amodal[i] = 1.0;
            if rng.random_range(0..10) < 6 {
                visible[i] = 1.0;
            }
        }
    }
    RoiSample {
        features: uniform_tensor(rng, &[channels, grid, grid], 0.0, 1.0),
        gt_class: rng.random_range(0..classes),
        gt_box_delta: [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ],
        gt_amodal: amodal,
        gt_visible: visible,
    }
}

/// Whether the occlusion loss has a live gradient path into the visible head
/// (at least one visible logit above the ReLU guard on the target channel).
fn ivm_path_live(tape: &Tape, nodes: &super::heads::ForwardNodes, class: usize) -> bool {
    let vm = tape.value(nodes.vm_logits);
    let hw = vm.shape[1] * vm.shape[2];
    vm.data[class * hw..(class + 1) * hw].iter().any(|&v| v > 0.0)
}

/// Draw a configuration with all piecewise-smooth ops away from their kinks
/// and live gradient paths from both mask losses down to the feature input
/// (a conv stack whose ReLUs all die would zero those paths without saying
/// anything about the routing). Deterministic given the stream.
fn sample_case(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<Case, ModelError> {
    for _ in 0..500 {
        let params = random_params(rng, cfg.channels, cfg.classes);
        let sample = random_sample(rng, cfg.channels, cfg.grid, cfg.classes);
        let mut tape = Tape::new();
        let nodes = forward_heads(&mut tape, &params, &sample.features, Variant::Full, true)?;
        let (loss_nodes, _) = total_loss(&mut tape, &nodes, &sample, Variant::Full)?;
        if tape.kink_margin() < KINK_MARGIN || !ivm_path_live(&tape, &nodes, sample.gt_class) {
            continue;
        }
        let feature_grad_live = |node| -> Result<bool, ModelError> {
            let grads = tape.backward(node)?;
            Ok(grads
                .get(nodes.params.features)
                .is_some_and(|g| g.data.iter().any(|&v| v != 0.0)))
        };
        if feature_grad_live(loss_nodes.l_am)?
            && feature_grad_live(loss_nodes.l_vm.expect("full variant"))?
        {
            return Ok(Case { params, sample });
        }
    }
    Err(ModelError::Config(
        "could not sample a kink-free gradient-check case".into(),
    ))
}

/// All five loss-term values for one parameter setting.
fn term_values(params: &ModelParams, sample: &RoiSample, variant: Variant) -> [f64; 5] {
    let mut tape = Tape::new();
    let nodes = forward_heads(&mut tape, params, &sample.features, variant, true)
        .expect("shapes fixed by caller");
    let (_, b) = total_loss(&mut tape, &nodes, sample, variant).expect("loss shapes");
    [b.l_cls, b.l_box, b.l_am, b.l_vm, b.l_ivm]
}

/// Compare every parameter's analytic gradient of every loss term against
/// central finite differences.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let mut per_term = vec![0.0f64; LOSS_TERMS.len()];
    let mut checks = 0usize;

    for c in 0..cfg.configs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64 + 1);
        let case = sample_case(&mut rng, cfg)?;

        // analytic gradients per term, flattened in canonical order
        let mut tape = Tape::new();
        let nodes =
            forward_heads(&mut tape, &case.params, &case.sample.features, Variant::Full, true)?;
        let (loss_nodes, _) = total_loss(&mut tape, &nodes, &case.sample, Variant::Full)?;
        let term_nodes = [
            Some(loss_nodes.l_cls),
            Some(loss_nodes.l_box),
            Some(loss_nodes.l_am),
            loss_nodes.l_vm,
            loss_nodes.l_ivm,
        ];
        let shapes: Vec<Vec<usize>> = case
            .params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape.clone())
            .collect();
        let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(LOSS_TERMS.len());
        for node in term_nodes.iter() {
            let node = node.expect("full variant has all terms");
            let grads = tape.backward(node)?;
            let mut flat = Vec::new();
            for (i, &id) in nodes.params.ids.iter().enumerate() {
                flat.extend(grads.get_or_zeros(id, &shapes[i]).data);
            }
            analytic.push(flat);
        }

        // finite differences, one parameter element at a time
        let mut flat_index = 0usize;
        for (ti, shape) in shapes.iter().enumerate() {
            let numel: usize = shape.iter().product();
            for ei in 0..numel {
                let mut plus = case.params.clone();
                plus.tensors_mut()[ti].data[ei] += cfg.epsilon;
                let fplus = term_values(&plus, &case.sample, Variant::Full);
                let mut minus = case.params.clone();
                minus.tensors_mut()[ti].data[ei] -= cfg.epsilon;
                let fminus = term_values(&minus, &case.sample, Variant::Full);
                for (t, worst) in per_term.iter_mut().enumerate() {
                    let fd = (fplus[t] - fminus[t]) / (2.0 * cfg.epsilon);
                    let err = rel_error(analytic[t][flat_index], fd);
                    if err > *worst {
                        *worst = err;
                    }
                    checks += 1;
                }
                flat_index += 1;
            }
        }
    }

    let max_rel_error = per_term.iter().cloned().fold(0.0f64, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        parameter_checks: checks,
        per_term: LOSS_TERMS
            .iter()
            .map(|s| s.to_string())
            .zip(per_term.iter().cloned())
            .collect(),
        passed: max_rel_error < cfg.tolerance,
        tolerance: cfg.tolerance,
    })
}

/// Which parameter groups each loss term may update under a variant, plus
/// whether its gradient may reach the shared feature input.
pub fn expected_routing(variant: Variant, term: &str) -> Option<(Vec<ParamGroup>, bool)> {
    use ParamGroup::*;
    match term {
        "l_cls" => Some((vec![ClsHead], true)),
        "l_box" => Some((vec![BoxHead], true)),
        "l_am" => Some((vec![AmodalHead], true)),
        "l_vm" => match variant {
            Variant::WithoutVisibleLoss => None,
            Variant::Independent => Some((vec![VisibleHead], false)),
            _ => Some((vec![VisibleHead], true)),
        },
        "l_ivm" => match variant {
            Variant::WithoutInvisibleLoss => None,
            Variant::Independent => Some((vec![VisibleHead], false)),
            _ => Some((vec![AmodalHead, VisibleHead], true)),
        },
        _ => None,
    }
}

/// Verify the zero/nonzero gradient pattern of every loss term against the
/// routing table, one random case per trial.
pub fn check_routing(variant: Variant, seed: u64, trials: usize) -> Result<(), String> {
    let cfg = GradCheckConfig {
        seed,
        ..Default::default()
    };
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64 + 101);
        let case = sample_case(&mut rng, &cfg).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let nodes = forward_heads(&mut tape, &case.params, &case.sample.features, variant, true)
            .map_err(|e| e.to_string())?;
        let (loss_nodes, _) =
            total_loss(&mut tape, &nodes, &case.sample, variant).map_err(|e| e.to_string())?;
        let terms = [
            ("l_cls", Some(loss_nodes.l_cls)),
            ("l_box", Some(loss_nodes.l_box)),
            ("l_am", Some(loss_nodes.l_am)),
            ("l_vm", loss_nodes.l_vm),
            ("l_ivm", loss_nodes.l_ivm),
        ];
        for (term, node) in terms {
            let expect = expected_routing(variant, term);
            match (node, expect) {
                (None, None) => continue,
                (Some(_), None) | (None, Some(_)) => {
                    return Err(format!(
                        "variant {variant:?}: term {term} presence does not match the table"
                    ));
                }
                (Some(node), Some((nonzero_groups, features_reach))) => {
                    let grads = tape.backward(node).map_err(|e| e.to_string())?;
                    for group in ParamGroup::ALL {
                        let expected_nonzero = nonzero_groups.contains(&group);
                        let got_nonzero = nodes.params.group_ids(group).iter().any(|&id| {
                            grads
                                .get(id)
                                .is_some_and(|g| g.data.iter().any(|&v| v != 0.0))
                        });
                        if got_nonzero != expected_nonzero {
                            return Err(format!(
                                "variant {variant:?}, trial {trial}: {term} gradient into {} expected {} but was {}",
                                group.name(),
                                if expected_nonzero { "nonzero" } else { "zero" },
                                if got_nonzero { "nonzero" } else { "zero" },
                            ));
                        }
                    }
                    let features_nonzero = grads
                        .get(nodes.params.features)
                        .is_some_and(|g| g.data.iter().any(|&v| v != 0.0));
                    if features_nonzero != features_reach {
                        return Err(format!(
                            "variant {variant:?}, trial {trial}: {term} gradient into features expected {} but was {}",
                            if features_reach { "nonzero" } else { "zero" },
                            if features_nonzero { "nonzero" } else { "zero" },
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}
