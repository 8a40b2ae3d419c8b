//! Command-line entry point for the amodal segmentation toolkit.
//!
//! Every run resolves its configuration (flags take precedence over an
//! optional JSON config file), then writes `run_manifest.json` into the
//! output directory. Re-running with `--config run_manifest.json` reproduces
//! the outputs byte for byte.
//!
//! Exit codes: 0 success, 1 domain failure (validation violations, undefined
//! metric), 2 usage or I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;

use amodal_core::dataset::{
    load_dataset_with, save_dataset, DatasetError, DatasetFormat, LoadOptions,
};
use amodal_core::eval::{
    evaluate, load_detections, EvalConfig, EvalError, EvalResult, MetricKind,
};
use amodal_core::model::gradcheck::{run_grad_check, GradCheckConfig};
use amodal_core::model::heads::Variant;
use amodal_core::model::optim::LrSchedule;
use amodal_core::model::train::{
    checkpoint_to_json, log_to_jsonl, run_toy_experiment, ToyExperimentConfig,
};
use amodal_core::stats::{compute_stats, render_table};
use amodal_core::synth::{
    build_modal_aug, donor_pool, manifest_to_json, merge_categories, pad_dataset_for_amodal,
    paste_augment, AugmentConfig, MergeConfig, Placement, SynthError,
};
use amodal_core::Dataset;

#[derive(Parser)]
#[command(name = "amodal", version, about = "Amodal instance segmentation toolkit")]
struct Cli {
    /// Worker threads (default: AMODAL_THREADS or all cores). Results are
    /// identical regardless of the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every dataset invariant; violations are listed per annotation.
    Validate(ValidateArgs),
    /// Run the AP/AR metric suite over ground truth and detections.
    Eval(EvalArgs),
    /// Dataset construction: paste augmentation, padding, category merging.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Occlusion statistics for a split.
    Stats(StatsArgs),
    /// Train the toy occlusion-head model on synthetic shapes.
    ToyTrain(ToyTrainArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("AMODAL_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Stats(args) => cmd_stats(args),
        Command::ToyTrain(args) => cmd_toy_train(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] amodal_core::model::ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            // validation and placement failures are domain outcomes
            CliError::Dataset(DatasetError::Validation(_)) => 1,
            CliError::Synth(SynthError::NoValidPlacement { .. }) => 1,
            CliError::Synth(SynthError::NoDonors) => 1,
            _ => 2,
        }
    }
}

// ---------------------------------------------------------------------------
// config resolution and manifests
// ---------------------------------------------------------------------------

/// Load a JSON config file; a `run_manifest.json` is accepted too, in which
/// case its embedded `config` object is used.
fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let config_value = match (value.get("config"), value.get("tool_version")) {
        (Some(inner), Some(_)) => inner.clone(),
        _ => value,
    };
    serde_json::from_value(config_value)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    tool_version: &'static str,
    subcommand: &'a str,
    seed: Option<u64>,
    config: &'a T,
}

fn write_manifest<T: Serialize>(
    out_dir: &Path,
    subcommand: &str,
    seed: Option<u64>,
    config: &T,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        subcommand,
        seed,
        config,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    fs::write(out_dir.join("run_manifest.json"), bytes)?;
    Ok(())
}

fn parse_format(name: &str) -> Result<DatasetFormat, CliError> {
    DatasetFormat::parse(name)
        .ok_or_else(|| CliError::Usage(format!("unknown dataset format '{name}'")))
}

fn load_ds(path: &str, format: &str, repair_slack: u64) -> Result<Dataset, CliError> {
    let mut opts = LoadOptions::new(parse_format(format)?);
    opts.repair_slack = repair_slack;
    let (ds, report) = load_dataset_with(Path::new(path), opts)?;
    if report.repaired_visible > 0 {
        eprintln!(
            "note: repaired {} visible masks outside their amodal masks",
            report.repaired_visible
        );
    }
    Ok(ds)
}

fn required<T>(cli: Option<T>, file: Option<T>, what: &str) -> Result<T, CliError> {
    cli.or(file)
        .ok_or_else(|| CliError::Usage(format!("missing {what}: pass it as a flag or in --config")))
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ValidateArgs {
    /// Dataset JSON file.
    dataset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Repair visible masks poking at most this many pixels outside amodal.
    #[arg(long)]
    repair_slack: Option<u64>,
    /// Treat depth-order inconsistencies as violations.
    #[arg(long)]
    strict_depth: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Serialize, Deserialize, Default)]
struct ValidateConfig {
    dataset: Option<String>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    repair_slack: Option<u64>,
    #[serde(default)]
    strict_depth: Option<bool>,
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode, CliError> {
    let file: ValidateConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    let resolved = ValidateConfig {
        dataset: Some(required(args.dataset, file.dataset, "dataset path")?),
        format: Some(args.format.or(file.format).unwrap_or_else(|| "native".into())),
        repair_slack: Some(args.repair_slack.or(file.repair_slack).unwrap_or(0)),
        strict_depth: Some(args.strict_depth || file.strict_depth.unwrap_or(false)),
    };
    write_manifest(&args.out_dir, "validate", None, &resolved)?;

    let mut opts = LoadOptions::new(parse_format(resolved.format.as_deref().unwrap())?);
    opts.repair_slack = resolved.repair_slack.unwrap();
    opts.strict_depth_order = resolved.strict_depth.unwrap();
    let path = resolved.dataset.as_deref().unwrap();
    match load_dataset_with(Path::new(path), opts) {
        Ok((ds, report)) => {
            println!("{ds}");
            if report.repaired_visible > 0 {
                println!("repaired visible masks: {}", report.repaired_visible);
            }
            for w in &report.warnings {
                println!("warning: {w}");
            }
            println!("OK");
            Ok(ExitCode::SUCCESS)
        }
        Err(DatasetError::Validation(violations)) => {
            for v in &violations {
                match v.annotation_id {
                    Some(id) => println!("violation (annotation {id}): {}", v.message),
                    None => println!("violation: {}", v.message),
                }
            }
            println!("FAILED: {} violations", violations.len());
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth dataset JSON.
    ground_truth: Option<String>,
    /// Detections JSON array.
    detections: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Single metric (a, v, av, aivv, iv); omit for the full summary suite.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    occluded_only: bool,
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long)]
    max_dets: Option<usize>,
    #[arg(long)]
    iv_threshold: Option<f64>,
    /// Also write per-threshold precision/recall curves as CSV.
    #[arg(long)]
    pr_csv: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Serialize, Deserialize, Default)]
struct EvalCmdConfig {
    ground_truth: Option<String>,
    detections: Option<String>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    metric: Option<String>,
    #[serde(default)]
    occluded_only: Option<bool>,
    #[serde(default)]
    class_agnostic: Option<bool>,
    #[serde(default)]
    max_dets: Option<usize>,
    #[serde(default)]
    iv_threshold: Option<f64>,
    #[serde(default)]
    pr_csv: Option<bool>,
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:5.1}", v * 100.0),
        None => format!("{:>5}", "-"),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, CliError> {
    let file: EvalCmdConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    let resolved = EvalCmdConfig {
        ground_truth: Some(required(args.ground_truth, file.ground_truth, "ground-truth path")?),
        detections: Some(required(args.detections, file.detections, "detections path")?),
        format: Some(args.format.or(file.format).unwrap_or_else(|| "native".into())),
        metric: args.metric.or(file.metric),
        occluded_only: Some(args.occluded_only || file.occluded_only.unwrap_or(false)),
        class_agnostic: Some(args.class_agnostic || file.class_agnostic.unwrap_or(false)),
        max_dets: Some(args.max_dets.or(file.max_dets).unwrap_or(100)),
        iv_threshold: Some(args.iv_threshold.or(file.iv_threshold).unwrap_or(0.5)),
        pr_csv: Some(args.pr_csv || file.pr_csv.unwrap_or(false)),
    };
    write_manifest(&args.out_dir, "eval", None, &resolved)?;

    let ds = load_ds(
        resolved.ground_truth.as_deref().unwrap(),
        resolved.format.as_deref().unwrap(),
        0,
    )?;
    let dets = load_detections(Path::new(resolved.detections.as_deref().unwrap()), &ds)?;

    let base_cfg = |metric: MetricKind, occluded_only: bool| EvalConfig {
        metric,
        occluded_only,
        class_agnostic: resolved.class_agnostic.unwrap(),
        max_detections_per_image: resolved.max_dets.unwrap(),
        iv_threshold: resolved.iv_threshold.unwrap(),
        ..Default::default()
    };

    let results: Vec<EvalResult> = match resolved.metric.as_deref() {
        Some(code) => {
            let metric = MetricKind::parse(code)
                .ok_or_else(|| CliError::Usage(format!("unknown metric '{code}'")))?;
            vec![evaluate(&ds, &dets, &base_cfg(metric, resolved.occluded_only.unwrap()))?]
        }
        None => {
            // paper-style summary: AV/A/V on everything, then occluded-only
            // with the invisible-mask AP at 0.5
            let mut out = Vec::new();
            for metric in [MetricKind::AmodalVisible, MetricKind::Amodal, MetricKind::Visible] {
                out.push(evaluate(&ds, &dets, &base_cfg(metric, false))?);
            }
            for metric in [
                MetricKind::AmodalVisible,
                MetricKind::Amodal,
                MetricKind::Visible,
                MetricKind::Invisible,
            ] {
                out.push(evaluate(&ds, &dets, &base_cfg(metric, true))?);
            }
            out
        }
    };

    let fallbacks: usize = results
        .iter()
        .map(|r| r.fallback_visible + r.fallback_invisible)
        .max()
        .unwrap_or(0);
    if fallbacks > 0 {
        println!("note: amodal masks used as fallback predictions for {fallbacks} detections");
    }
    if resolved.metric.is_none() {
        println!(
            "{:<12} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>9}",
            "", "AP_AV", "AP_A", "AP_V", "AP_AV", "AP_A", "AP_V", "AP^0.5_IV"
        );
        println!(
            "{:<12} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>9}",
            "detections",
            pct(results[0].mean_ap),
            pct(results[1].mean_ap),
            pct(results[2].mean_ap),
            pct(results[3].mean_ap),
            pct(results[4].mean_ap),
            pct(results[5].mean_ap),
            pct(results[6].mean_ap),
        );
        println!("{:<12} {:^20}   {:^31}", "", "[all]", "[occluded]");
    } else {
        let r = &results[0];
        println!(
            "metric {} ({}): mean AP = {}, mean AR = {}, ignored GTs = {}, ignored detections = {}",
            r.metric.code(),
            if r.occluded_only { "occluded only" } else { "all" },
            pct(r.mean_ap),
            pct(r.mean_ar),
            r.ignored_ground_truths,
            r.ignored_detections,
        );
        for c in &r.per_category {
            println!(
                "  category {:>4}: AP = {}, AR = {}, positives = {}",
                c.category_id,
                pct(c.ap),
                pct(c.ar),
                c.num_positives
            );
        }
    }

    let mut bytes = serde_json::to_vec_pretty(&results).expect("results serialize");
    bytes.push(b'\n');
    fs::write(args.out_dir.join("eval_result.json"), bytes)?;

    if resolved.pr_csv.unwrap() {
        let mut csv =
            String::from("metric,occluded_only,category_id,threshold,recall_index,precision\n");
        for r in &results {
            for c in &r.per_category {
                for curve in &c.pr_curves {
                    for (i, p) in curve.precision_at_recall.iter().enumerate() {
                        csv.push_str(&format!(
                            "{},{},{},{},{},{}\n",
                            r.metric.code(),
                            r.occluded_only,
                            c.category_id,
                            curve.threshold,
                            i,
                            p
                        ));
                    }
                }
            }
        }
        fs::write(args.out_dir.join("pr_curves.csv"), csv)?;
    }

    // a requested metric that is undefined on this data is a domain failure
    let all_undefined = results.iter().all(|r| r.mean_ap.is_none());
    Ok(if all_undefined {
        println!("metric undefined: no ground truth to recall");
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Subcommand)]
enum SynthCommand {
    /// Paste donor objects from the dataset into each of its images.
    PasteAug(PasteAugArgs),
    /// Build an occlusion-annotated dataset from modal annotations.
    ModalAug(ModalAugArgs),
    /// Assign categories from a modal dataset to a class-less amodal one.
    MergeCls(MergeClsArgs),
    /// Zero-pad images so all amodal masks fit.
    Pad(PadArgs),
}

fn cmd_synth(cmd: SynthCommand) -> Result<ExitCode, CliError> {
    match cmd {
        SynthCommand::PasteAug(args) => cmd_paste_aug(args),
        SynthCommand::ModalAug(args) => cmd_modal_aug(args),
        SynthCommand::MergeCls(args) => cmd_merge_cls(args),
        SynthCommand::Pad(args) => cmd_pad(args),
    }
}

#[derive(Serialize, Deserialize, Default, Clone)]
struct AugFileConfig {
    input: Option<String>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    donors_per_image: Option<usize>,
    #[serde(default)]
    placement: Option<String>,
    #[serde(default)]
    include_boundary_objects: Option<bool>,
    #[serde(default)]
    min_visible_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    images: Option<usize>,
}

#[derive(Args)]
struct PasteAugArgs {
    input: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    donors_per_image: Option<usize>,
    /// uniform-inside or uniform-any.
    #[arg(long)]
    placement: Option<String>,
    /// Allow donors that touch their source image border.
    #[arg(long)]
    include_boundary_objects: bool,
    /// Drop objects whose visible fraction falls below this.
    #[arg(long)]
    min_visible_fraction: Option<f64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn parse_placement(s: &str) -> Result<Placement, CliError> {
    match s {
        "uniform-inside" | "uniform_inside" => Ok(Placement::UniformInside),
        "uniform-any" | "uniform_any" => Ok(Placement::UniformAny),
        _ => Err(CliError::Usage(format!("unknown placement '{s}'"))),
    }
}

fn augment_config(resolved: &AugFileConfig) -> Result<AugmentConfig, CliError> {
    Ok(AugmentConfig {
        rng_seed: resolved.seed.unwrap_or(0),
        donors_per_image: resolved.donors_per_image.unwrap_or(1),
        placement: parse_placement(resolved.placement.as_deref().unwrap_or("uniform-inside"))?,
        exclude_boundary_objects: !resolved.include_boundary_objects.unwrap_or(false),
        min_remaining_visible_fraction: resolved.min_visible_fraction.unwrap_or(0.0),
        max_placement_attempts: 50,
    })
}

fn cmd_paste_aug(args: PasteAugArgs) -> Result<ExitCode, CliError> {
    let file: AugFileConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    let resolved = AugFileConfig {
        input: Some(required(args.input, file.input, "input dataset")?),
        format: Some(args.format.or(file.format).unwrap_or_else(|| "native".into())),
        seed: Some(args.seed.or(file.seed).unwrap_or(0)),
        donors_per_image: Some(args.donors_per_image.or(file.donors_per_image).unwrap_or(1)),
        placement: Some(
            args.placement
                .or(file.placement)
                .unwrap_or_else(|| "uniform-inside".into()),
        ),
        include_boundary_objects: Some(
            args.include_boundary_objects || file.include_boundary_objects.unwrap_or(false),
        ),
        min_visible_fraction: Some(
            args.min_visible_fraction
                .or(file.min_visible_fraction)
                .unwrap_or(0.0),
        ),
        images: None,
    };
    write_manifest(&args.out_dir, "synth paste-aug", resolved.seed, &resolved)?;

    let ds = load_ds(
        resolved.input.as_deref().unwrap(),
        resolved.format.as_deref().unwrap(),
        0,
    )?;
    let cfg = augment_config(&resolved)?;
    let pool = donor_pool(&ds, cfg.exclude_boundary_objects);
    if pool.is_empty() {
        return Err(SynthError::NoDonors.into());
    }

    use rand::Rng;
    use rand::SeedableRng;
    let mut out = ds.clone();
    let mut all_events = Vec::new();
    for (i, img) in ds.images.iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(i as u64 + 1);
        let eligible: Vec<_> = pool.iter().filter(|d| d.source_image_id != img.id).collect();
        if eligible.is_empty() {
            continue;
        }
        let donors: Vec<_> = (0..cfg.donors_per_image)
            .map(|_| eligible[rng.random_range(0..eligible.len())].clone())
            .collect();
        let (new_img, events) = paste_augment(img, &donors, &cfg, &mut rng)?;
        out.images[i] = new_img;
        all_events.extend(events);
    }
    // fresh unique annotation ids across the whole output
    let mut next = 1u64;
    for img in &mut out.images {
        for ann in &mut img.annotations {
            ann.id = next;
            next += 1;
        }
    }
    out.split_name = format!("{}_paste_aug", ds.split_name);
    out.validate(false)?;
    save_dataset(&out, &args.out_dir.join("paste_aug.json"))?;
    fs::write(
        args.out_dir.join("compositing_manifest.json"),
        manifest_to_json(&all_events),
    )?;
    println!("{out}");
    println!("paste events: {}", all_events.len());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct ModalAugArgs {
    input: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of images to synthesize.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    donors_per_image: Option<usize>,
    #[arg(long)]
    placement: Option<String>,
    #[arg(long)]
    include_boundary_objects: bool,
    #[arg(long)]
    min_visible_fraction: Option<f64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn cmd_modal_aug(args: ModalAugArgs) -> Result<ExitCode, CliError> {
    let file: AugFileConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    let resolved = AugFileConfig {
        input: Some(required(args.input, file.input, "input dataset")?),
        format: Some(args.format.or(file.format).unwrap_or_else(|| "native".into())),
        seed: Some(args.seed.or(file.seed).unwrap_or(0)),
        donors_per_image: Some(args.donors_per_image.or(file.donors_per_image).unwrap_or(1)),
        placement: Some(
            args.placement
                .or(file.placement)
                .unwrap_or_else(|| "uniform-inside".into()),
        ),
        include_boundary_objects: Some(
            args.include_boundary_objects || file.include_boundary_objects.unwrap_or(false),
        ),
        min_visible_fraction: Some(
            args.min_visible_fraction
                .or(file.min_visible_fraction)
                .unwrap_or(0.0),
        ),
        images: Some(args.images.or(file.images).unwrap_or(10)),
    };
    write_manifest(&args.out_dir, "synth modal-aug", resolved.seed, &resolved)?;

    let ds = load_ds(
        resolved.input.as_deref().unwrap(),
        resolved.format.as_deref().unwrap(),
        0,
    )?;
    let cfg = augment_config(&resolved)?;
    let (out, events) = build_modal_aug(&ds, &cfg, resolved.images.unwrap())?;
    save_dataset(&out, &args.out_dir.join("modal_aug.json"))?;
    fs::write(
        args.out_dir.join("compositing_manifest.json"),
        manifest_to_json(&events),
    )?;
    println!("{out}");
    println!("paste events: {}", events.len());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct MergeClsArgs {
    #[arg(long)]
    amodal: Option<String>,
    #[arg(long)]
    modal: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    amodal_format: Option<String>,
    #[arg(long)]
    modal_format: Option<String>,
    /// Keep a match only when the visible-mask IoU strictly exceeds this.
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    keep_stuff: bool,
    #[arg(long)]
    keep_crowd: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Serialize, Deserialize, Default)]
struct MergeFileConfig {
    amodal: Option<String>,
    modal: Option<String>,
    #[serde(default)]
    amodal_format: Option<String>,
    #[serde(default)]
    modal_format: Option<String>,
    #[serde(default)]
    iou_threshold: Option<f64>,
    #[serde(default)]
    keep_stuff: Option<bool>,
    #[serde(default)]
    keep_crowd: Option<bool>,
}

fn cmd_merge_cls(args: MergeClsArgs) -> Result<ExitCode, CliError> {
    let file: MergeFileConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    let resolved = MergeFileConfig {
        amodal: Some(required(args.amodal, file.amodal, "amodal dataset")?),
        modal: Some(required(args.modal, file.modal, "modal dataset")?),
        amodal_format: Some(
            args.amodal_format
                .or(file.amodal_format)
                .unwrap_or_else(|| "native".into()),
        ),
        modal_format: Some(
            args.modal_format
                .or(file.modal_format)
                .unwrap_or_else(|| "native".into()),
        ),
        iou_threshold: Some(args.iou_threshold.or(file.iou_threshold).unwrap_or(0.75)),
        keep_stuff: Some(args.keep_stuff || file.keep_stuff.unwrap_or(false)),
        keep_crowd: Some(args.keep_crowd || file.keep_crowd.unwrap_or(false)),
    };
    write_manifest(&args.out_dir, "synth merge-cls", None, &resolved)?;

    let amodal_ds = load_ds(
        resolved.amodal.as_deref().unwrap(),
        resolved.amodal_format.as_deref().unwrap(),
        0,
    )?;
    let modal_ds = load_ds(
        resolved.modal.as_deref().unwrap(),
        resolved.modal_format.as_deref().unwrap(),
        0,
    )?;
    let cfg = MergeConfig {
        iou_threshold: resolved.iou_threshold.unwrap(),
        drop_stuff: !resolved.keep_stuff.unwrap(),
        drop_crowd: !resolved.keep_crowd.unwrap(),
    };
    let merged = merge_categories(&amodal_ds, &modal_ds, &cfg)?;
    save_dataset(&merged, &args.out_dir.join("merged.json"))?;
    println!("{merged}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct PadArgs {
    input: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Serialize, Deserialize, Default)]
struct PadFileConfig {
    input: Option<String>,
    #[serde(default)]
    format: Option<String>,
}

fn cmd_pad(args: PadArgs) -> Result<ExitCode, CliError> {
    let file: PadFileConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    let resolved = PadFileConfig {
        input: Some(required(args.input, file.input, "input dataset")?),
        format: Some(args.format.or(file.format).unwrap_or_else(|| "native".into())),
    };
    write_manifest(&args.out_dir, "synth pad", None, &resolved)?;

    let ds = load_ds(
        resolved.input.as_deref().unwrap(),
        resolved.format.as_deref().unwrap(),
        0,
    )?;
    let padded = pad_dataset_for_amodal(&ds);
    save_dataset(&padded, &args.out_dir.join("padded.json"))?;
    let padded_images = padded
        .images
        .iter()
        .filter(|i| i.padding.map(|p| !p.is_zero()).unwrap_or(false))
        .count();
    println!("{padded}");
    println!("images padded: {padded_images}");
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Args)]
struct StatsArgs {
    dataset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Print exact ratios as JSON instead of the rounded table.
    #[arg(long)]
    json: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Serialize, Deserialize, Default)]
struct StatsConfig {
    dataset: Option<String>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    json: Option<bool>,
}

fn cmd_stats(args: StatsArgs) -> Result<ExitCode, CliError> {
    let file: StatsConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    let resolved = StatsConfig {
        dataset: Some(required(args.dataset, file.dataset, "dataset path")?),
        format: Some(args.format.or(file.format).unwrap_or_else(|| "native".into())),
        json: Some(args.json || file.json.unwrap_or(false)),
    };
    write_manifest(&args.out_dir, "stats", None, &resolved)?;

    let ds = load_ds(
        resolved.dataset.as_deref().unwrap(),
        resolved.format.as_deref().unwrap(),
        0,
    )?;
    let stats = compute_stats(&ds);
    if resolved.json.unwrap() {
        println!(
            "{}",
            serde_json::to_string_pretty(&stats).expect("stats serialize")
        );
    } else {
        print!("{}", render_table(&ds.split_name, &stats));
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// toy-train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ToyTrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// full, no-liv, no-lv, or independent.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run the finite-difference gradient suite and exit.
    #[arg(long)]
    grad_check: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn cmd_toy_train(args: ToyTrainArgs) -> Result<ExitCode, CliError> {
    if args.grad_check {
        let cfg = GradCheckConfig::default();
        write_manifest(&args.out_dir, "toy-train --grad-check", Some(cfg.seed), &cfg)?;
        let report = run_grad_check(&cfg)?;
        println!(
            "gradient check: {} comparisons, max relative error {:.3e} (tolerance {:.0e})",
            report.parameter_checks, report.max_rel_error, report.tolerance
        );
        for (term, err) in &report.per_term {
            println!("  {term}: max relative error {err:.3e}");
        }
        let mut bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        bytes.push(b'\n');
        fs::write(args.out_dir.join("gradcheck_report.json"), bytes)?;
        return Ok(if report.passed {
            println!("PASS");
            ExitCode::SUCCESS
        } else {
            println!("FAIL");
            ExitCode::from(1)
        });
    }

    let mut cfg: ToyExperimentConfig = match &args.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    if let Some(v) = &args.variant {
        cfg.train.variant =
            Variant::parse(v).ok_or_else(|| CliError::Usage(format!("unknown variant '{v}'")))?;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
        cfg.train.lr = LrSchedule::reference_scaled(steps);
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    write_manifest(&args.out_dir, "toy-train", Some(cfg.train.seed), &cfg)?;

    let result = run_toy_experiment(&cfg)?;
    fs::write(
        args.out_dir.join("training_log.jsonl"),
        log_to_jsonl(&result.outcome.log),
    )?;
    fs::write(
        args.out_dir.join("checkpoint.json"),
        checkpoint_to_json(&result.outcome.params),
    )?;
    if let (Some(first), Some(last)) = (result.outcome.log.first(), result.outcome.log.last()) {
        println!(
            "variant {}: total loss {:.4} (step 1) -> {:.4} (step {})",
            cfg.train.variant.code(),
            first.loss.total,
            last.loss.total,
            last.step
        );
    }
    match result.holdout_invisible_ap {
        Some(ap) => println!("holdout invisible-mask AP@0.5 (occluded only): {:.3}", ap),
        None => println!("holdout invisible-mask AP@0.5: undefined"),
    }
    let holdout = serde_json::json!({
        "holdout_invisible_ap": result.holdout_invisible_ap,
        "variant": cfg.train.variant.code(),
        "steps": cfg.train.steps,
    });
    let mut bytes = serde_json::to_vec_pretty(&holdout).expect("holdout report serializes");
    bytes.push(b'\n');
    fs::write(args.out_dir.join("holdout_report.json"), bytes)?;
    Ok(ExitCode::SUCCESS)
}
