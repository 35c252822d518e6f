//! The `lesioneval` command-line tool: one subcommand per pipeline stage
//! plus `repro`, which runs the two flagship experiments (loss comparison
//! and simulated rater study) end-to-end from a single config and seed.
//!
//! Exit codes: 0 success, 1 validation/argument error, 2 I/O or format
//! error, 64 usage error. All randomness flows from explicit seeds; no
//! subcommand writes outside its `--out` directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imbalance::{bce, build_weight_grid, dice_loss, iwbce_raw, LossKind, WeightGrid};
use crate::labeling::{label_components, Connectivity};
use crate::lesion_metrics::{
    bootstrap_prc, case_match_table, lesion_dice, lesion_prc, matched_precision_report,
    stratified_detection, LesionPrc, MatchTable, MatchedPrecisionReport, StratifiedDetection,
};
use crate::phantom::{gen_case, simulate_rater, PhantomParams, PredictorModel, RaterModel};
use crate::rater_protocol::{
    comparison_report, evaluate_setting, timing_summary, CaseStudy, ComparisonReport,
    RaterRecord, Setting, SettingDice, TimingSummary,
};
use crate::sampler::{sample_batch, PatchSpec, SampleCase};
use crate::trainer::{
    evaluate, predict, prepare_training_case, train, EvalCase, TrainConfig, TrainingLog,
    VoxelModel,
};
use crate::volgrid::{
    positive_fraction, read_volume, write_grid, write_mask, CaseEntry, DatasetManifest, Mask,
    ProbabilityMap, Split, VoxelGrid,
};

/// Environment variable capping the rayon thread pool.
pub const THREADS_ENV: &str = "LESION_EVAL_THREADS";

#[derive(Parser)]
#[command(
    name = "lesioneval",
    version,
    about = "Small-lesion segmentation toolkit: losses, sampling, lesion-wise metrics, rater protocol"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom datasets.
    Phantom(PhantomArgs),
    /// Label connected components of a mask.
    Label(LabelArgs),
    /// Build an inverse-volume weight grid from a mask.
    Weights(WeightsArgs),
    /// Compute a loss between a probability map and a mask.
    Loss(LossArgs),
    /// Sample training patches from a dataset manifest.
    Sample(SampleArgs),
    /// Train the per-voxel classifier on a manifest.
    Train(TrainArgs),
    /// Run a trained model on one image.
    Predict(PredictArgs),
    /// Lesion-wise precision-recall evaluation of a manifest with
    /// probability maps.
    Prc(PrcArgs),
    /// Multi-rater comparison and timing reports from a study manifest.
    RaterEval(RaterEvalArgs),
    /// Run the two flagship experiments end-to-end from one config.
    Repro(ReproArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[command(subcommand)]
    action: PhantomAction,
}

#[derive(Subcommand)]
enum PhantomAction {
    /// Write images, masks, lesion catalogs, and a dataset manifest.
    Gen {
        /// Optional JSON file with phantom generator parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct LabelArgs {
    /// Input mask (RVOL).
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "26")]
    connectivity: Connectivity,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WeightsArgs {
    /// Input mask (RVOL).
    #[arg(long)]
    mask: PathBuf,
    /// Positive-class fraction of the training set.
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value = "26")]
    connectivity: Connectivity,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LossArgs {
    /// Probability map (RVOL, float).
    #[arg(long)]
    prob: PathBuf,
    /// Ground-truth mask (RVOL).
    #[arg(long)]
    mask: PathBuf,
    /// Weight grid (RVOL, float); required for --kind iwbce.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    kind: LossKind,
    /// Also write the per-voxel gradient dL/dp as grad.rvol.
    #[arg(long)]
    grad: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    count: usize,
    /// Cubic patch edge length in voxels.
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    tumor_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "26")]
    connectivity: Connectivity,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Training config (JSON, all fields optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "26")]
    connectivity: Connectivity,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained model (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Input image (RVOL, float).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrcArgs {
    /// Manifest whose cases carry probability-map paths.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "26")]
    connectivity: Connectivity,
    #[arg(long, default_value_t = 10.0)]
    small_cut_mm: f64,
    /// 0 disables the bootstrap band.
    #[arg(long, default_value_t = 0)]
    bootstrap_iters: usize,
    #[arg(long, default_value_t = 0.8)]
    bootstrap_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RaterEvalArgs {
    /// Study manifest (JSON): mask paths and times per case and rater.
    #[arg(long)]
    study: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    /// Experiment config (JSON, all fields optional).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return code;
        }
    };
    init_thread_pool();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. }
                | Error::Json { .. }
                | Error::Format { .. }
                | Error::Truncated { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn init_thread_pool() {
    if let Ok(text) = std::env::var(THREADS_ENV) {
        if let Ok(n) = text.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Phantom(args) => match args.action {
            PhantomAction::Gen {
                config,
                cases,
                seed,
                out,
            } => cmd_phantom_gen(config.as_deref(), cases, seed, &out),
        },
        Command::Label(args) => cmd_label(&args),
        Command::Weights(args) => cmd_weights(&args),
        Command::Loss(args) => cmd_loss(&args),
        Command::Sample(args) => cmd_sample(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Predict(args) => cmd_predict(&args),
        Command::Prc(args) => cmd_prc(&args),
        Command::RaterEval(args) => cmd_rater_eval(&args),
        Command::Repro(args) => cmd_repro(&args),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn ensure_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Replay record emitted into every output directory.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    inputs: Vec<String>,
    seed: Option<u64>,
}

fn write_run_manifest(
    out: &Path,
    subcommand: &str,
    inputs: &[&Path],
    seed: Option<u64>,
) -> Result<()> {
    let manifest = RunManifest {
        tool: "lesioneval",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: subcommand.to_string(),
        inputs: inputs
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
        seed,
    };
    write_json(&out.join("run_manifest.json"), &manifest)
}

/// Independent deterministic RNG stream for (seed, purpose tag).
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

struct LoadedCase {
    id: String,
    image: VoxelGrid,
    gt: Mask,
    prob: Option<ProbabilityMap>,
}

fn load_manifest_cases(manifest_path: &Path) -> Result<Vec<LoadedCase>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .cases
        .iter()
        .map(|case| {
            let image = read_volume(&base.join(&case.image))?.into_grid()?;
            let gt = read_volume(&base.join(&case.gt))?.into_mask()?;
            let prob = match &case.prob {
                Some(p) => Some(ProbabilityMap::new(read_volume(&base.join(p))?.into_grid()?)?),
                None => None,
            };
            Ok(LoadedCase {
                id: case.id.clone(),
                image,
                gt,
                prob,
            })
        })
        .collect()
}

fn manifest_beta(cases: &[LoadedCase]) -> Result<f64> {
    let masks: Vec<&Mask> = cases.iter().map(|c| &c.gt).collect();
    positive_fraction(&masks)
}

fn case_weights(gt: &Mask, beta: f64, connectivity: Connectivity) -> Result<WeightGrid> {
    if beta > 0.0 {
        build_weight_grid(&label_components(gt, connectivity), beta)
    } else {
        // nothing positive anywhere: weighting degenerates to uniform
        Ok(WeightGrid::ones(*gt.geom()))
    }
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_phantom_gen(config: Option<&Path>, cases: usize, seed: u64, out: &Path) -> Result<()> {
    let params: PhantomParams = match config {
        Some(path) => read_json(path)?,
        None => PhantomParams::default(),
    };
    params.validate()?;
    if cases == 0 {
        return Err(Error::Argument("--cases must be >= 1".into()));
    }
    ensure_out(out)?;
    let mut rng = stream(seed, 1);
    let mut entries = Vec::with_capacity(cases);
    for i in 0..cases {
        let (image, gt, catalog) = gen_case(&params, &mut rng)?;
        let id = format!("case{i:03}");
        let image_name = format!("{id}_image.rvol");
        let gt_name = format!("{id}_gt.rvol");
        write_grid(&image, &out.join(&image_name))?;
        write_mask(&gt, &out.join(&gt_name))?;
        write_json(&out.join(format!("{id}_lesions.json")), &catalog)?;
        entries.push(CaseEntry {
            id,
            image: image_name.into(),
            gt: gt_name.into(),
            prob: None,
        });
    }
    DatasetManifest {
        split: Split::Train,
        cases: entries,
    }
    .save(&out.join("manifest.json"))?;
    let inputs: Vec<&Path> = config.into_iter().collect();
    write_run_manifest(out, "phantom gen", &inputs, Some(seed))
}

#[derive(Serialize)]
struct LabelReport {
    connectivity: Connectivity,
    component_count: usize,
    /// Voxel counts of components 1..K.
    sizes: Vec<usize>,
    equivalent_diameters_mm: Vec<f64>,
}

fn cmd_label(args: &LabelArgs) -> Result<()> {
    let mask = read_volume(&args.mask)?.into_mask()?;
    let labels = label_components(&mask, args.connectivity);
    ensure_out(&args.out)?;
    write_grid(&labels.to_grid(), &args.out.join("labels.rvol"))?;
    let report = LabelReport {
        connectivity: args.connectivity,
        component_count: labels.component_count(),
        sizes: labels.sizes()[1..].to_vec(),
        equivalent_diameters_mm: (1..=labels.component_count() as u32)
            .map(|l| labels.equivalent_diameter_mm(l))
            .collect(),
    };
    write_json(&args.out.join("components.json"), &report)?;
    write_run_manifest(&args.out, "label", &[&args.mask], None)
}

#[derive(Serialize)]
struct WeightsReport {
    beta: f64,
    connectivity: Connectivity,
    /// `w_0..w_K`; `w_0` is always 1.
    component_weights: Vec<f64>,
}

fn cmd_weights(args: &WeightsArgs) -> Result<()> {
    let mask = read_volume(&args.mask)?.into_mask()?;
    let labels = label_components(&mask, args.connectivity);
    let weights = build_weight_grid(&labels, args.beta)?;
    ensure_out(&args.out)?;
    write_grid(weights.grid(), &args.out.join("weights.rvol"))?;
    let report = WeightsReport {
        beta: weights.beta(),
        connectivity: args.connectivity,
        component_weights: weights.component_weights().to_vec(),
    };
    write_json(&args.out.join("weights.json"), &report)?;
    write_run_manifest(&args.out, "weights", &[&args.mask], None)
}

#[derive(Serialize)]
struct LossJson {
    kind: LossKind,
    value: f64,
    voxels: usize,
}

fn cmd_loss(args: &LossArgs) -> Result<()> {
    let prob = ProbabilityMap::new(read_volume(&args.prob)?.into_grid()?)?;
    let mask = read_volume(&args.mask)?.into_mask()?;
    let report = match args.kind {
        LossKind::Bce => bce(&prob, &mask)?,
        LossKind::Dice => dice_loss(&prob, &mask)?,
        LossKind::Iwbce => {
            let path = args.weights.as_ref().ok_or_else(|| {
                Error::Argument(
                    "--kind iwbce requires --weights with a weight grid built by `weights`".into(),
                )
            })?;
            let grid = read_volume(path)?.into_grid()?;
            iwbce_raw(&prob, &mask, &grid)?
        }
    };
    ensure_out(&args.out)?;
    write_json(
        &args.out.join("loss.json"),
        &LossJson {
            kind: report.kind,
            value: report.value,
            voxels: prob.geom().voxel_count(),
        },
    )?;
    if args.grad {
        let grad = report.gradient.as_ref().expect("losses produce gradients");
        write_grid(grad, &args.out.join("grad.rvol"))?;
    }
    let mut inputs: Vec<&Path> = vec![&args.prob, &args.mask];
    if let Some(w) = &args.weights {
        inputs.push(w);
    }
    write_run_manifest(&args.out, "loss", &inputs, None)
}

#[derive(Serialize)]
struct PatchIndexEntry {
    patch: usize,
    origin: [usize; 3],
    center: [usize; 3],
    tumor_draw: bool,
    center_positive: bool,
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let loaded = load_manifest_cases(&args.manifest)?;
    if loaded.is_empty() {
        return Err(Error::Argument("manifest has no cases".into()));
    }
    let beta = manifest_beta(&loaded)?;
    let cases: Result<Vec<SampleCase>> = loaded
        .into_iter()
        .map(|c| {
            let weights = case_weights(&c.gt, beta, args.connectivity)?;
            SampleCase::new(c.id, c.image, c.gt, weights)
        })
        .collect();
    let cases = cases?;
    let spec = PatchSpec {
        size: [args.patch_size; 3],
        tumor_prob: args.tumor_prob,
        rng_seed: args.seed,
    };
    let mut rng = stream(args.seed, 2);
    let patches = sample_batch(&cases, &spec, args.count, &mut rng)?;
    ensure_out(&args.out)?;
    let mut index = Vec::with_capacity(patches.len());
    for (i, patch) in patches.iter().enumerate() {
        write_grid(&patch.image, &args.out.join(format!("patch{i:04}_image.rvol")))?;
        write_mask(&patch.gt, &args.out.join(format!("patch{i:04}_gt.rvol")))?;
        write_grid(
            &patch.weights,
            &args.out.join(format!("patch{i:04}_weights.rvol")),
        )?;
        index.push(PatchIndexEntry {
            patch: i,
            origin: patch.origin,
            center: patch.center,
            tumor_draw: patch.tumor_draw,
            center_positive: patch.center_positive,
        });
    }
    write_json(&args.out.join("index.json"), &index)?;
    write_run_manifest(&args.out, "sample", &[&args.manifest], Some(args.seed))
}

fn training_log_csv(log: &TrainingLog) -> String {
    let mut csv = String::from("epoch,learning_rate,mean_loss\n");
    for record in &log.epochs {
        csv.push_str(&format!(
            "{},{},{}\n",
            record.epoch, record.learning_rate, record.mean_loss
        ));
    }
    csv
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let loaded = load_manifest_cases(&args.manifest)?;
    if loaded.is_empty() {
        return Err(Error::Argument("manifest has no cases".into()));
    }
    let beta = manifest_beta(&loaded)?;
    if beta <= 0.0 {
        return Err(Error::Data(
            "training set has no positive voxels; cannot build lesion weights".into(),
        ));
    }
    use rayon::prelude::*;
    let cases: Result<Vec<_>> = loaded
        .into_par_iter()
        .map(|c| prepare_training_case(c.id, c.image, c.gt, beta, args.connectivity))
        .collect();
    let cases = cases?;
    let (model, log) = train(&cases, &config)?;
    ensure_out(&args.out)?;
    write_json(&args.out.join("model.json"), &model)?;
    write_text(&args.out.join("train_log.csv"), &training_log_csv(&log))?;
    write_json(&args.out.join("train_config.json"), &config)?;
    let mut inputs: Vec<&Path> = vec![&args.manifest];
    if let Some(c) = &args.config {
        inputs.push(c);
    }
    write_run_manifest(&args.out, "train", &inputs, Some(config.seed))
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model: VoxelModel = read_json(&args.model)?;
    model.validate()?;
    let image = read_volume(&args.image)?.into_grid()?;
    let prob = predict(&model, &image)?;
    ensure_out(&args.out)?;
    write_grid(prob.as_grid(), &args.out.join("prob.rvol"))?;
    write_run_manifest(&args.out, "predict", &[&args.model, &args.image], None)
}

/// CSV rows of a swept curve; band columns appear when a band exists.
pub fn prc_csv(curve: &LesionPrc) -> String {
    let banded = curve.band.is_some();
    let mut csv = String::from("threshold,tp,fp,fn,precision,recall");
    if banded {
        csv.push_str(",recall_lo,recall_hi,precision_lo,precision_hi");
    }
    csv.push('\n');
    for (i, p) in curve.points.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}",
            p.threshold, p.tp, p.fp, p.fn_, p.precision, p.recall
        ));
        if let Some(band) = &curve.band {
            let b = &band[i];
            csv.push_str(&format!(
                ",{},{},{},{}",
                b.recall_lo, b.recall_hi, b.precision_lo, b.precision_hi
            ));
        }
        csv.push('\n');
    }
    csv
}

#[derive(Serialize)]
struct PrcSummary {
    cases: usize,
    gt_lesions: usize,
    median_lesion_dice: f64,
    base_precision: f64,
    base_recall: f64,
    base_stratified: StratifiedDetection,
    small_cut_mm: f64,
}

fn cmd_prc(args: &PrcArgs) -> Result<()> {
    let loaded = load_manifest_cases(&args.manifest)?;
    if loaded.is_empty() {
        return Err(Error::Argument("manifest has no cases".into()));
    }
    let mut tables = Vec::with_capacity(loaded.len());
    let mut dices = Vec::new();
    for case in &loaded {
        let prob = case.prob.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "case {}: manifest entry has no probability map path",
                case.id
            ))
        })?;
        tables.push(case_match_table(prob, &case.gt, args.connectivity)?);
        let pred_mask = crate::labeling::binarize(prob, 0.5)?;
        let gt_labels = label_components(&case.gt, args.connectivity);
        for (_, d) in lesion_dice(&pred_mask, &gt_labels, args.connectivity)? {
            dices.push(d);
        }
    }
    let curve = if args.bootstrap_iters > 0 && tables.len() >= 2 {
        let mut rng = stream(args.seed, 3);
        bootstrap_prc(&tables, args.bootstrap_iters, args.bootstrap_frac, &mut rng)?
    } else {
        lesion_prc(&tables)?
    };
    let base = curve
        .points
        .first()
        .expect("curve always has the base threshold point");
    let summary = PrcSummary {
        cases: tables.len(),
        gt_lesions: tables.iter().map(|t| t.gt_count).sum(),
        median_lesion_dice: crate::rater_protocol::median(&dices),
        base_precision: base.precision,
        base_recall: base.recall,
        base_stratified: stratified_detection(&tables, 0.5, args.small_cut_mm),
        small_cut_mm: args.small_cut_mm,
    };
    ensure_out(&args.out)?;
    write_text(&args.out.join("prc.csv"), &prc_csv(&curve))?;
    write_json(&args.out.join("summary.json"), &summary)?;
    write_run_manifest(&args.out, "prc", &[&args.manifest], Some(args.seed))
}

// ---------------------------------------------------------------------------
// rater study input format

/// JSON study manifest: per case, per rater, mask paths (relative to the
/// manifest file) and times in seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyManifest {
    pub cases: Vec<StudyCaseEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyCaseEntry {
    pub id: String,
    pub raters: Vec<StudyRaterEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRaterEntry {
    pub manual_mask: PathBuf,
    pub cnn_init_mask: PathBuf,
    pub manual_time_s: f64,
    pub adjust_time_s: f64,
}

fn load_study(path: &Path) -> Result<Vec<CaseStudy>> {
    let manifest: StudyManifest = read_json(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let study: Result<Vec<CaseStudy>> = manifest
        .cases
        .iter()
        .map(|case| {
            let raters: Result<Vec<RaterRecord>> = case
                .raters
                .iter()
                .map(|r| {
                    Ok(RaterRecord {
                        manual_mask: read_volume(&base.join(&r.manual_mask))?.into_mask()?,
                        cnn_init_mask: read_volume(&base.join(&r.cnn_init_mask))?.into_mask()?,
                        manual_time_s: r.manual_time_s,
                        adjust_time_s: r.adjust_time_s,
                    })
                })
                .collect();
            Ok(CaseStudy {
                case_id: case.id.clone(),
                raters: raters?,
            })
        })
        .collect();
    let study = study?;
    for case in &study {
        case.validate()?;
    }
    Ok(study)
}

fn settings_csv(per_setting: &[(Setting, Vec<SettingDice>)]) -> String {
    let mut csv = String::from("setting,case_id,rater,dice\n");
    for (setting, rows) in per_setting {
        for row in rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                setting.name(),
                row.case_id,
                row.rater,
                row.dice
            ));
        }
    }
    csv
}

fn timing_csv(summary: &TimingSummary) -> String {
    let mut csv = String::from(
        "rater,median_manual_s,manual_min_s,manual_max_s,median_reduction_s,reduction_min_s,reduction_max_s,speedup,median_case_speedup\n",
    );
    let mut push = |label: &str, s: &crate::rater_protocol::TimeStats| {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            label,
            s.median_manual_s,
            s.manual_range_s.0,
            s.manual_range_s.1,
            s.median_reduction_s,
            s.reduction_range_s.0,
            s.reduction_range_s.1,
            s.speedup,
            s.median_case_speedup
        ));
    };
    for (u, s) in summary.per_rater.iter().enumerate() {
        push(&format!("{}", u + 1), s);
    }
    push("pooled", &summary.pooled);
    csv
}

fn write_rater_reports(
    out: &Path,
    study: &[CaseStudy],
) -> Result<(ComparisonReport, TimingSummary)> {
    let per_setting: Result<Vec<(Setting, Vec<SettingDice>)>> = Setting::ALL
        .iter()
        .map(|&s| Ok((s, evaluate_setting(study, s)?)))
        .collect();
    let per_setting = per_setting?;
    let comparison = comparison_report(study)?;
    let timing = timing_summary(study)?;
    write_text(&out.join("settings.csv"), &settings_csv(&per_setting))?;
    write_json(&out.join("comparison.json"), &comparison)?;
    write_json(&out.join("timing.json"), &timing)?;
    write_text(&out.join("timing.csv"), &timing_csv(&timing))?;
    Ok((comparison, timing))
}

fn cmd_rater_eval(args: &RaterEvalArgs) -> Result<()> {
    let study = load_study(&args.study)?;
    ensure_out(&args.out)?;
    write_rater_reports(&args.out, &study)?;
    write_run_manifest(&args.out, "rater-eval", &[&args.study], None)
}

// ---------------------------------------------------------------------------
// experiments

/// One config for both flagship experiments. Every field has a default, so
/// `{}` is a valid config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub phantom: PhantomParams,
    /// Manual-contour rater: large jitter around the shared ground truth.
    pub rater: RaterModel,
    /// CNN-initialized rater: small jitter around the same shared contour.
    pub cnn_rater: RaterModel,
    pub predictor: PredictorModel,
    pub train: TrainConfig,
    pub connectivity: Connectivity,
    pub small_cut_mm: f64,
    pub bootstrap_iterations: usize,
    pub bootstrap_fraction: f64,
    pub train_cases: usize,
    pub test_cases: usize,
    pub rater_cases: usize,
    pub rater_count: usize,
    pub manual_time_median_s: f64,
    pub manual_time_log_sigma: f64,
    /// Adjusting takes this fraction of the manual time, drawn uniformly.
    pub adjust_time_fraction: [f64; 2],
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomParams {
                dims: [64, 64, 64],
                spacing: [0.94, 0.94, 1.0],
                lesion_count_mean: 3.0,
                diameter_range_mm: [2.0, 20.0],
                contrast: 1.0,
                noise_sigma: 0.4,
            },
            rater: RaterModel {
                jitter_sigma_mm: 1.5,
                bias_mm: 0.0,
                miss_prob: 0.0,
                miss_below_mm: 5.0,
            },
            cnn_rater: RaterModel {
                jitter_sigma_mm: 0.3,
                bias_mm: 0.0,
                miss_prob: 0.0,
                miss_below_mm: 5.0,
            },
            predictor: PredictorModel::default(),
            train: TrainConfig {
                loss: LossKind::Bce,
                epochs: 12,
                iterations_per_epoch: 25,
                batch_size: 10,
                patch_size: [24, 24, 24],
                lr_initial: 0.1,
                lr_reduced: 0.01,
                lr_drop_epoch: 10,
                tumor_prob: 0.5,
                seed: 0,
            },
            connectivity: Connectivity::TwentySix,
            small_cut_mm: 7.0,
            bootstrap_iterations: 100,
            bootstrap_fraction: 0.8,
            train_cases: 40,
            test_cases: 10,
            rater_cases: 12,
            rater_count: 4,
            manual_time_median_s: 605.4,
            manual_time_log_sigma: 0.35,
            adjust_time_fraction: [0.35, 0.65],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.rater.validate()?;
        self.cnn_rater.validate()?;
        self.predictor.validate()?;
        self.train.validate()?;
        if self.train_cases == 0 || self.test_cases == 0 {
            return Err(Error::Validation(
                "train_cases and test_cases must be >= 1".into(),
            ));
        }
        if self.rater_cases == 0 || self.rater_count < 2 {
            return Err(Error::Validation(
                "rater study needs >= 1 case and >= 2 raters".into(),
            ));
        }
        if !(self.small_cut_mm > 0.0) {
            return Err(Error::Validation("small-lesion cut must be > 0".into()));
        }
        if !(self.manual_time_median_s > 0.0)
            || !(self.adjust_time_fraction[0] > 0.0)
            || !(self.adjust_time_fraction[1] >= self.adjust_time_fraction[0])
            || self.adjust_time_fraction[1] >= 1.0
        {
            return Err(Error::Validation(
                "timing model needs positive median and adjust fraction in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One trained arm of the loss-comparison experiment.
#[derive(Debug, Clone, Serialize)]
pub struct LossArm {
    pub loss: LossKind,
    pub curve: LesionPrc,
    pub base_stratified: StratifiedDetection,
    pub log: TrainingLog,
}

/// Full loss-comparison report: all trained arms plus the matched-precision
/// comparison of iwBCE against the BCE baseline.
#[derive(Debug, Clone, Serialize)]
pub struct LossExperimentReport {
    pub seed: u64,
    pub beta: f64,
    pub small_cut_mm: f64,
    pub arms: Vec<LossArm>,
    pub matched: MatchedPrecisionReport,
}

/// One generated benchmark case: image plus ground truth.
pub type PhantomCase = (VoxelGrid, Mask);

/// Generate the synthetic benchmark: `train_n` + `test_n` cases from one
/// deterministic stream.
pub fn generate_benchmark(
    params: &PhantomParams,
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<(Vec<PhantomCase>, Vec<PhantomCase>)> {
    let mut rng = stream(seed, 11);
    let mut gen = |n: usize| -> Result<Vec<PhantomCase>> {
        (0..n)
            .map(|_| gen_case(params, &mut rng).map(|(image, gt, _)| (image, gt)))
            .collect()
    };
    let train_set = gen(train_n)?;
    let test_set = gen(test_n)?;
    Ok((train_set, test_set))
}

/// Train BCE, iwBCE, and Dice arms on one generated benchmark and evaluate
/// them lesion-wise on the held-out cases.
pub fn run_loss_experiment(config: &ExperimentConfig, seed: u64) -> Result<LossExperimentReport> {
    config.validate()?;
    let (train_set, test_set) =
        generate_benchmark(&config.phantom, config.train_cases, config.test_cases, seed)?;
    let gt_refs: Vec<&Mask> = train_set.iter().map(|(_, gt)| gt).collect();
    let beta = positive_fraction(&gt_refs)?;
    if beta <= 0.0 {
        return Err(Error::Generation(
            "benchmark training set has no positive voxels".into(),
        ));
    }
    use rayon::prelude::*;
    let cases: Result<Vec<_>> = train_set
        .into_par_iter()
        .enumerate()
        .map(|(i, (image, gt))| {
            prepare_training_case(format!("train{i:03}"), image, gt, beta, config.connectivity)
        })
        .collect();
    let cases = cases?;
    let eval_cases: Vec<EvalCase> = test_set
        .into_iter()
        .enumerate()
        .map(|(i, (image, gt))| EvalCase {
            id: format!("test{i:03}"),
            image,
            gt,
        })
        .collect();

    let mut arms = Vec::new();
    let mut tables_by_loss: Vec<(LossKind, Vec<MatchTable>)> = Vec::new();
    for (arm_idx, kind) in [LossKind::Bce, LossKind::Iwbce, LossKind::Dice]
        .into_iter()
        .enumerate()
    {
        let train_config = TrainConfig {
            loss: kind,
            seed,
            ..config.train.clone()
        };
        let (model, log) = train(&cases, &train_config)?;
        let report = evaluate(&model, &eval_cases, config.connectivity, config.small_cut_mm)?;
        let curve = if config.bootstrap_iterations > 0 && report.tables.len() >= 2 {
            let mut rng = stream(seed, 20 + arm_idx as u64);
            bootstrap_prc(
                &report.tables,
                config.bootstrap_iterations,
                config.bootstrap_fraction,
                &mut rng,
            )?
        } else {
            report.curve.clone()
        };
        arms.push(LossArm {
            loss: kind,
            curve,
            base_stratified: report.base_stratified,
            log,
        });
        tables_by_loss.push((kind, report.tables));
    }
    let find = |kind: LossKind| -> &Vec<MatchTable> {
        &tables_by_loss
            .iter()
            .find(|(k, _)| *k == kind)
            .expect("arm was trained")
            .1
    };
    let matched = matched_precision_report(
        find(LossKind::Bce),
        find(LossKind::Iwbce),
        config.small_cut_mm,
    )?;
    Ok(LossExperimentReport {
        seed,
        beta,
        small_cut_mm: config.small_cut_mm,
        arms,
        matched,
    })
}

/// Simulate the 4-rater study: manual contours are large-jitter redraws of
/// the ground truth, CNN-initialized contours are small-jitter redraws of
/// the same shared contour, and times follow a log-normal manual time with
/// a fractional adjustment time.
pub fn run_rater_experiment(config: &ExperimentConfig, seed: u64) -> Result<Vec<CaseStudy>> {
    config.validate()?;
    let mut rng = stream(seed, 30);
    let time_noise = Normal::new(0.0, config.manual_time_log_sigma.max(f64::MIN_POSITIVE))
        .expect("sigma is finite");
    let mut study = Vec::with_capacity(config.rater_cases);
    for i in 0..config.rater_cases {
        let (_, gt, catalog) = gen_case(&config.phantom, &mut rng)?;
        let mut raters = Vec::with_capacity(config.rater_count);
        for _ in 0..config.rater_count {
            let manual_mask = simulate_rater(&gt, &catalog, &config.rater, &mut rng)?;
            let cnn_init_mask = simulate_rater(&gt, &catalog, &config.cnn_rater, &mut rng)?;
            let manual_time_s = config.manual_time_median_s * time_noise.sample(&mut rng).exp();
            let frac =
                rng.random_range(config.adjust_time_fraction[0]..=config.adjust_time_fraction[1]);
            raters.push(RaterRecord {
                manual_mask,
                cnn_init_mask,
                manual_time_s,
                adjust_time_s: manual_time_s * frac,
            });
        }
        study.push(CaseStudy {
            case_id: format!("case{i:03}"),
            raters,
        });
    }
    Ok(study)
}

fn cmd_repro(args: &ReproArgs) -> Result<()> {
    let config: ExperimentConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::default(),
    };
    config.validate()?;
    ensure_out(&args.out)?;

    // experiment A: loss comparison
    let loss_dir = args.out.join("loss_compare");
    ensure_out(&loss_dir)?;
    let report = run_loss_experiment(&config, args.seed)?;
    for arm in &report.arms {
        write_text(
            &loss_dir.join(format!("prc_{}.csv", arm.loss)),
            &prc_csv(&arm.curve),
        )?;
    }
    write_json(&loss_dir.join("report.json"), &report)?;

    // experiment B: simulated rater study
    let rater_dir = args.out.join("rater_study");
    ensure_out(&rater_dir)?;
    let study = run_rater_experiment(&config, args.seed)?;
    write_rater_reports(&rater_dir, &study)?;

    write_json(&args.out.join("config.json"), &config)?;
    let inputs: Vec<&Path> = args.config.iter().map(|p| p.as_path()).collect();
    write_run_manifest(&args.out, "repro", &inputs, Some(args.seed))
}
