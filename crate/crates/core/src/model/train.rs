//! Toy training loop on synthetic shape scenes.
//!
//! A fixed deterministic featurizer stands in for a backbone: every scene is
//! rendered to an 8-channel RoI-grid tensor of visible-extent cues, shape
//! class indicators, coordinate maps, and the amodal-box extent. Learning the
//! occlusion mask then reduces to learning shape completion from class and
//! extent cues.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::heads::{forward_heads, shared_init, ModelParams, Variant};
use super::loss::{total_loss, LossBreakdown, RoiSample};
use super::optim::{sgd_step, LrSchedule, SgdState};
use super::tensor::{ModelError, Tape, Tensor};
use crate::eval::{evaluate, Detection, EvalConfig, MetricKind};
use crate::mask::BinaryMask;
use crate::synth::shapes::{scenes_to_dataset, ShapeKind, ShapeScene};

/// Channels produced by the featurizer.
pub const FEATURE_CHANNELS: usize = 8;

/// Render a scene into a training sample. Channels: visible target mask,
/// occluder mask, rect indicator, disk indicator, x map, y map, amodal
/// bounding-box fill, constant ones.
pub fn featurize(scene: &ShapeScene) -> RoiSample {
    let grid = scene.amodal.height();
    debug_assert_eq!(scene.amodal.width(), grid, "RoI grid is square");
    let g = grid as usize;
    let n = g * g;
    let mut features = vec![0.0f64; FEATURE_CHANNELS * n];
    let (bx, by, bw, bh) = scene.amodal.bbox().expect("target shape is nonempty");
    let is_rect = scene.target_kind == ShapeKind::Rect;
    for y in 0..grid {
        for x in 0..grid {
            let i = (y as usize) * g + x as usize;
            features[i] = scene.visible.get(x, y) as u8 as f64;
            features[n + i] = scene.occluder.get(x, y) as u8 as f64;
            features[2 * n + i] = is_rect as u8 as f64;
            features[3 * n + i] = !is_rect as u8 as f64;
            features[4 * n + i] = (x as f64 + 0.5) / grid as f64;
            features[5 * n + i] = (y as f64 + 0.5) / grid as f64;
            features[6 * n + i] =
                (x >= bx && x < bx + bw && y >= by && y < by + bh) as u8 as f64;
            features[7 * n + i] = 1.0;
        }
    }
    let to_target = |m: &BinaryMask| -> Vec<f64> {
        let mut t = vec![0.0f64; n];
        for y in 0..grid {
            for x in 0..grid {
                t[(y as usize) * g + x as usize] = m.get(x, y) as u8 as f64;
            }
        }
        t
    };
    let gf = grid as f64;
    RoiSample {
        features: Tensor::from_vec(&[FEATURE_CHANNELS, g, g], features),
        gt_class: scene.target_kind.class_index(),
        gt_box_delta: [
            (bx as f64 + bw as f64 / 2.0) / gf - 0.5,
            (by as f64 + bh as f64 / 2.0) / gf - 0.5,
            bw as f64 / gf - 0.5,
            bh as f64 / gf - 0.5,
        ],
        gt_amodal: to_target(&scene.amodal),
        gt_visible: to_target(&scene.visible),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            variant: Variant::Full,
            seed: 1,
            steps: 500,
            lr: LrSchedule::reference_scaled(500),
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepRecord>,
}

/// Train on the scenes in a fixed cycle, one RoI per step. Strictly
/// deterministic given the config.
pub fn train_toy(cfg: &ToyTrainConfig, scenes: &[ShapeScene]) -> Result<TrainOutcome, ModelError> {
    cfg.lr.validate().map_err(ModelError::Config)?;
    if cfg.steps > 0 && scenes.is_empty() {
        return Err(ModelError::Config("training corpus is empty".into()));
    }
    let mut params = shared_init(cfg.seed, FEATURE_CHANNELS, ShapeKind::COUNT);
    let samples: Vec<RoiSample> = scenes.iter().map(featurize).collect();
    let mut state = {
        let tensors: Vec<&Tensor> = params.named_tensors().into_iter().map(|(_, t)| t).collect();
        SgdState::new(&tensors)
    };
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let sample = &samples[step % samples.len()];
        let mut tape = Tape::new();
        let nodes = forward_heads(&mut tape, &params, &sample.features, cfg.variant, true)?;
        let (loss_nodes, breakdown) = total_loss(&mut tape, &nodes, sample, cfg.variant)?;
        let grads = tape.backward(loss_nodes.total)?;
        let shapes: Vec<Vec<usize>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape.clone())
            .collect();
        let grad_tensors: Vec<Tensor> = nodes
            .params
            .ids
            .iter()
            .zip(shapes.iter())
            .map(|(&id, shape)| grads.get_or_zeros(id, shape))
            .collect();
        let lr = cfg.lr.lr_at(step);
        let mut tensors = params.tensors_mut();
        sgd_step(
            &mut tensors,
            &grad_tensors,
            &mut state,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );
        log.push(StepRecord {
            step: step + 1,
            lr,
            loss: breakdown,
        });
    }
    Ok(TrainOutcome { params, log })
}

pub fn log_to_jsonl(log: &[StepRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for rec in log {
        out.extend(serde_json::to_vec(rec).expect("step record serializes"));
        out.push(b'\n');
    }
    out
}

/// One scene pushed through the heads: predicted class, score, and the three
/// masks thresholded at probability 0.5 (logit 0).
pub struct ScenePrediction {
    pub class_index: usize,
    pub score: f64,
    pub amodal: BinaryMask,
    pub visible: BinaryMask,
    pub invisible: BinaryMask,
}

pub fn predict_scene(params: &ModelParams, scene: &ShapeScene) -> Result<ScenePrediction, ModelError> {
    let sample = featurize(scene);
    let mut tape = Tape::new();
    let nodes = forward_heads(&mut tape, params, &sample.features, Variant::Full, true)?;
    let cls = tape.value(nodes.cls_logits);
    let (class_index, _) = cls
        .data
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let m = cls.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = cls.data.iter().map(|&v| (v - m).exp()).sum();
    let score = (cls.data[class_index] - m).exp() / z;

    let grid = scene.amodal.height();
    let g = grid as usize;
    let to_mask = |logits: &Tensor| -> BinaryMask {
        let hw = g * g;
        let base = class_index * hw;
        let mut dense = vec![false; hw];
        for y in 0..g {
            for x in 0..g {
                // row-major model grid back to column-major mask layout
                dense[x * g + y] = logits.data[base + y * g + x] > 0.0;
            }
        }
        BinaryMask::from_dense(grid, grid, &dense)
    };
    Ok(ScenePrediction {
        class_index,
        score,
        amodal: to_mask(tape.value(nodes.am_logits)),
        visible: to_mask(tape.value(nodes.vm_logits)),
        invisible: to_mask(tape.value(nodes.ivm_logits)),
    })
}

/// Predictions for a scene list as detections against
/// [`scenes_to_dataset`] image ids.
pub fn predict_detections(
    params: &ModelParams,
    scenes: &[ShapeScene],
) -> Result<Vec<Detection>, ModelError> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let p = predict_scene(params, scene)?;
            Ok(Detection {
                image_id: i as u64 + 1,
                category_id: p.class_index as u32 + 1,
                score: p.score,
                amodal: p.amodal,
                visible: Some(p.visible),
                invisible: Some(p.invisible),
            })
        })
        .collect()
}

/// Occluded-only invisible-mask AP at IoU 0.5 of the model on held-out
/// scenes. `None` when the scene set has no occluded ground truth.
pub fn invisible_ap(params: &ModelParams, scenes: &[ShapeScene]) -> Result<Option<f64>, ModelError> {
    let ds = scenes_to_dataset(scenes, "holdout");
    let dets = predict_detections(params, scenes)?;
    let cfg = EvalConfig {
        metric: MetricKind::Invisible,
        occluded_only: true,
        ..Default::default()
    };
    let result = evaluate(&ds, &dets, &cfg)
        .map_err(|e| ModelError::Config(format!("holdout evaluation failed: {e}")))?;
    Ok(result.mean_ap)
}

/// The canonical toy experiment: corpus and holdout generation plus training
/// under one config. Small occlusion fractions keep the invisible-mask
/// metric discriminative (large ones are too easy at IoU 0.5).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyExperimentConfig {
    pub train: ToyTrainConfig,
    pub corpus_seed: u64,
    pub corpus_size: usize,
    pub holdout_seed: u64,
    pub holdout_size: usize,
    pub grid: u32,
    pub min_occlusion: f64,
    pub max_occlusion: f64,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        ToyExperimentConfig {
            train: ToyTrainConfig::default(),
            corpus_seed: 7,
            corpus_size: 200,
            holdout_seed: 1007,
            holdout_size: 50,
            grid: 14,
            min_occlusion: 0.05,
            max_occlusion: 0.25,
        }
    }
}

pub struct ExperimentOutcome {
    pub outcome: TrainOutcome,
    /// Occluded-only invisible-mask AP at IoU 0.5 on the holdout.
    pub holdout_invisible_ap: Option<f64>,
}

pub fn run_toy_experiment(cfg: &ToyExperimentConfig) -> Result<ExperimentOutcome, ModelError> {
    use crate::synth::shapes::generate_shape_corpus_in;
    let corpus = generate_shape_corpus_in(
        cfg.corpus_seed,
        cfg.corpus_size,
        cfg.grid,
        cfg.min_occlusion,
        cfg.max_occlusion,
    );
    let holdout = generate_shape_corpus_in(
        cfg.holdout_seed,
        cfg.holdout_size,
        cfg.grid,
        cfg.min_occlusion,
        cfg.max_occlusion,
    );
    let outcome = train_toy(&cfg.train, &corpus)?;
    let holdout_invisible_ap = invisible_ap(&outcome.params, &holdout)?;
    Ok(ExperimentOutcome {
        outcome,
        holdout_invisible_ap,
    })
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    channels: usize,
    classes: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn checkpoint_to_json(params: &ModelParams) -> Vec<u8> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        channels: params.channels,
        classes: params.classes,
        tensors: params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape.clone(),
                data: t.data.clone(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("checkpoint serializes");
    bytes.push(b'\n');
    bytes
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    fs::write(path, checkpoint_to_json(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| ModelError::Parse(e.to_string()))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Parse(format!(
            "unsupported checkpoint version {}",
            file.format_version
        )));
    }
    let mut params = shared_init(0, file.channels, file.classes);
    let expected: Vec<String> = params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    if file.tensors.len() != expected.len() {
        return Err(ModelError::Parse(format!(
            "checkpoint has {} tensors, expected {}",
            file.tensors.len(),
            expected.len()
        )));
    }
    for ((entry, name), slot) in file
        .tensors
        .into_iter()
        .zip(expected.iter())
        .zip(params.tensors_mut())
    {
        if &entry.name != name {
            return Err(ModelError::Parse(format!(
                "checkpoint tensor '{}' where '{}' was expected",
                entry.name, name
            )));
        }
        if entry.shape != slot.shape || entry.data.len() != slot.data.len() {
            return Err(ModelError::Parse(format!(
                "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                entry.name, entry.shape, slot.shape
            )));
        }
        slot.data = entry.data;
    }
    Ok(params)
}
