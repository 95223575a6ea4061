//! Command-line entry points: `synth`, `train`, `eval` and `fewshot`.
//!
//! Exit status is 0 on success, 2 for input errors (missing or malformed
//! files, invalid configuration), 3 for checkpoint version mismatches and 1
//! for anything else. `SPIL_THREADS` caps the worker pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::config::KeyValues;
use crate::dataset::{
    read_json, read_jsonl, write_json, write_jsonl, Annotation, Dataset, ShotRecord, ANNOTATIONS_FILE, CATEGORIES_FILE,
    SHOTS_MANIFEST,
};
use crate::error::{Result, SpilError};
use crate::evalkit::{
    curve_csv, mean_average_precision, miou, read_ranklists, recall_iou_curve, rerank, write_ranklists, RankList,
    DEFAULT_CURVE_THRESHOLDS,
};
use crate::fewshot::{coco_detections, evaluate, run_fewshot, validate_shots, FewShotSettings, Shot};
use crate::localizer::checkpoint;
use crate::run::{pool_ground_truth, prepare_instance_search, search_queries, RunConfig};
use crate::selfpaced::{run_training, IterLog, Resume, SamplePool, StageLog, TrainInput};
use crate::synthgen::{self, SynthSpec};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const POOL_FILE: &str = "pool.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const STAGE_LOG: &str = "stage_log.jsonl";
pub const RANKLISTS_FILE: &str = "ranklists.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
const STAGE_ITERATIONS: &str = "iterations.jsonl";
const STAGE_SUMMARY: &str = "stage.json";

#[derive(Debug, Parser)]
#[command(name = "spil", version, about = "Self-paced instance localization and detection by search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark.
    Synth(SynthArgs),
    /// Search, then self-paced training of the localizer.
    Train(TrainArgs),
    /// Localization and retrieval metrics of a checkpoint.
    Eval(EvalArgs),
    /// Few-shot detection by search.
    Fewshot(FewshotArgs),
}

/// Overrides shared by the run commands.
#[derive(Debug, Clone, Default, Args)]
pub struct RunOptions {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of training stages (K + 1).
    #[arg(long)]
    pub stages: Option<usize>,
    /// Threshold of the first pool update.
    #[arg(long)]
    pub tau0: Option<f64>,
    /// Rank-list length.
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// `key = value` synthetic spec; defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    pub dataset: PathBuf,
    #[command(flatten)]
    pub run: RunOptions,
    /// Precomputed rank lists (JSON lines) instead of searching.
    #[arg(long)]
    pub ranklists: Option<PathBuf>,
    /// A `stage_<k>` directory of an earlier run with the same inputs.
    #[arg(long)]
    pub resume_from: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub run: RunOptions,
    #[arg(long, required_unless_present = "boxes")]
    pub checkpoint: Option<PathBuf>,
    /// Predicted boxes (JSON lines `{query_id, image, box}`) used instead of
    /// the checkpoint.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    #[arg(long)]
    pub ranklists: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FewshotArgs {
    /// Corpus directory with `images.jsonl` and `categories.json`.
    pub dataset: PathBuf,
    /// Shots manifest; `<dataset>/shots.jsonl` by default.
    #[arg(long)]
    pub shots: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunOptions,
    /// Add a query-expansion round.
    #[arg(long)]
    pub qe: bool,
    #[arg(long)]
    pub qe_limit: Option<usize>,
    /// Starting head, e.g. from a run on base categories.
    #[arg(long)]
    pub init_head: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Applies `SPIL_THREADS`, then dispatches.
pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Fewshot(a) => cmd_fewshot(&a),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SPIL_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| SpilError::invalid(format!("SPIL_THREADS must be a positive integer (got '{v}')")))?;
    // a pool that is already initialised (tests, embedding) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Configuration file (or defaults) with command-line overrides applied.
pub fn load_run_config(opts: &RunOptions) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(k) = opts.stages {
        cfg.train.stage.stages = k;
    }
    if let Some(t) = opts.tau0 {
        cfg.train.stage.tau0 = t;
    }
    if let Some(m) = opts.topk {
        cfg.topk = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| SpilError::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| SpilError::io(p, e))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => SynthSpec::from_key_values(&mut KeyValues::read(p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let ds = synthgen::generate(&spec)?;
    create_dir(&args.out)?;
    synthgen::export(&ds, &args.out)?;
    eprintln!(
        "wrote {} images and {} queries to {}",
        ds.images.len(),
        ds.queries.len(),
        args.out.display()
    );
    Ok(())
}

fn stage_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("stage_{k}"))
}

/// Logs of stages `0..=last` stored under `run_dir`.
fn earlier_logs(run_dir: &Path, last: usize) -> Result<(Vec<IterLog>, Vec<StageLog>)> {
    let mut iterations = Vec::new();
    let mut stages = Vec::new();
    for k in 0..=last {
        let dir = stage_dir(run_dir, k);
        iterations.extend(read_jsonl::<IterLog>(&dir.join(STAGE_ITERATIONS))?);
        stages.push(read_json::<StageLog>(&dir.join(STAGE_SUMMARY))?);
    }
    Ok((iterations, stages))
}

/// Writes `ranklists.jsonl`, per-stage snapshots `stage_<k>/`, and the final
/// checkpoint, pool and logs into `args.out`.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_run_config(&args.run)?;
    let ds = Dataset::load(&args.dataset)?;
    let bank = cfg.bank_for(&ds)?;
    let corpus = ds.corpus_ids();
    let given = args.ranklists.as_deref().map(read_ranklists).transpose()?;
    let setup = prepare_instance_search(&bank, &ds.queries, &corpus, cfg.topk, given)?;

    let boxes: BTreeMap<String, BoundingBox> = ds.images.iter().filter_map(|r| Some((r.id.clone(), r.gt_box?))).collect();
    let groups: Vec<String> = ds.queries.iter().map(|q| q.query_id.clone()).collect();
    let gt = ds.relevance.queries().next().is_some().then(|| pool_ground_truth(&groups, &ds.relevance, &boxes));

    let (resume, mut iterations, mut stages) = match &args.resume_from {
        Some(dir) => {
            let summary: StageLog = read_json(&dir.join(STAGE_SUMMARY))?;
            let head = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
            let pool: SamplePool = read_json(&dir.join(POOL_FILE))?;
            let run_dir = dir.parent().unwrap_or(Path::new("."));
            let (iterations, stages) = earlier_logs(run_dir, summary.stage)?;
            (
                Some(Resume {
                    next_stage: summary.stage + 1,
                    head,
                    pool,
                }),
                iterations,
                stages,
            )
        }
        None => (None, Vec::new(), Vec::new()),
    };
    if let Some(r) = &resume {
        for k in 0..r.next_stage {
            copy_stage(args.resume_from.as_deref().and_then(Path::parent).unwrap_or(Path::new(".")), &args.out, k)?;
        }
    }

    create_dir(&args.out)?;
    write_text(&args.out.join(CONFIG_FILE), &cfg.to_text())?;
    write_ranklists(&args.out.join(RANKLISTS_FILE), &setup.ranklists)?;
    let out = &args.out;
    let outcome = run_training(
        TrainInput {
            bank: &bank,
            queries: &setup.queries,
            pool: setup.pool,
            ground_truth: gt.as_ref(),
            init_head: None,
        },
        &cfg.train,
        resume,
        |snap| {
            let dir = stage_dir(out, snap.stage);
            create_dir(&dir)?;
            checkpoint::save(snap.head, &dir.join(CHECKPOINT_FILE))?;
            write_json(&dir.join(POOL_FILE), snap.pool)?;
            write_jsonl(&dir.join(STAGE_ITERATIONS), snap.iterations)?;
            write_json(&dir.join(STAGE_SUMMARY), snap.log)?;
            let miou = snap
                .log
                .pool_miou_if_gt_available
                .map(|m| format!(", pool mIoU {m:.4}"))
                .unwrap_or_default();
            eprintln!(
                "stage {}: tau {:.2}, {} entries updated{}",
                snap.stage, snap.log.tau, snap.log.updated_entries, miou
            );
            Ok(())
        },
    )?;
    iterations.extend(outcome.iterations);
    stages.extend(outcome.stages);
    checkpoint::save(&outcome.head, &out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(POOL_FILE), &outcome.pool)?;
    write_jsonl(&out.join(TRAIN_LOG), &iterations)?;
    write_jsonl(&out.join(STAGE_LOG), &stages)?;
    Ok(())
}

/// Copies a finished stage directory into a resumed run's output.
fn copy_stage(from_run: &Path, to_run: &Path, k: usize) -> Result<()> {
    let (src, dst) = (stage_dir(from_run, k), stage_dir(to_run, k));
    if src == dst {
        return Ok(());
    }
    create_dir(&dst)?;
    for name in [CHECKPOINT_FILE, POOL_FILE, STAGE_ITERATIONS, STAGE_SUMMARY] {
        fs::copy(src.join(name), dst.join(name)).map_err(|e| SpilError::io(src.join(name), e))?;
    }
    Ok(())
}

/// A localized rank-list entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub query_id: String,
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean IoU over relevant rank-list entries with a ground-truth box.
    pub miou: Option<f64>,
    pub pairs: usize,
    pub map_before_rerank: Option<f64>,
    pub map_after_rerank: Option<f64>,
}

/// Writes `metrics.json`, `recall_iou.csv`, `predictions.jsonl` and
/// `ranklists_reranked.jsonl`.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_run_config(&args.run)?;
    let ds = Dataset::load(&args.dataset)?;
    let bank = cfg.bank_for(&ds)?;
    let ranklists: Vec<RankList> = match &args.ranklists {
        Some(p) => read_ranklists(p)?,
        None => search_queries(&bank, &ds.queries, &ds.corpus_ids(), cfg.topk)?,
    };

    let predictions: Vec<BoxPrediction> = match &args.boxes {
        Some(p) => read_jsonl(p)?,
        None => {
            let head = checkpoint::load(args.checkpoint.as_deref().expect("clap requires a checkpoint"))?;
            let mut out = Vec::new();
            for rl in &ranklists {
                let q = ds
                    .queries
                    .iter()
                    .find(|q| q.query_id == rl.query_id)
                    .ok_or_else(|| SpilError::invalid(format!("rank list of unknown query '{}'", rl.query_id)))?;
                let kernel = bank.kernel([(q.image.as_str(), &q.bbox)])?;
                for e in &rl.entries {
                    let det = bank.infer(&e.image_id, &kernel, &head, &cfg.train.anchors)?;
                    out.push(BoxPrediction {
                        query_id: rl.query_id.clone(),
                        image: e.image_id.clone(),
                        bbox: det.bbox,
                    });
                }
            }
            out
        }
    };
    let predicted: BTreeMap<(&str, &str), BoundingBox> = predictions
        .iter()
        .map(|p| ((p.query_id.as_str(), p.image.as_str()), p.bbox))
        .collect();

    // localization over relevant entries (every entry with a box when no
    // relevance labels exist)
    let has_relevance = ds.relevance.queries().next().is_some();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for rl in &ranklists {
        for e in &rl.entries {
            let Some(gt) = ds.record(&e.image_id).and_then(|r| r.gt_box) else { continue };
            if has_relevance && !ds.relevance.is_relevant(&rl.query_id, &e.image_id) {
                continue;
            }
            pred.push(predicted.get(&(rl.query_id.as_str(), e.image_id.as_str())).copied());
            truth.push(gt);
        }
    }
    let miou_value = if truth.is_empty() { None } else { Some(miou(&pred, &truth)?) };
    let curve = recall_iou_curve(&pred, &truth, &DEFAULT_CURVE_THRESHOLDS)?;

    // re-ranking by similarity of box-pooled features
    let mut reranked = Vec::with_capacity(ranklists.len());
    for rl in &ranklists {
        let q = ds.queries.iter().find(|q| q.query_id == rl.query_id);
        let Some(q) = q else {
            reranked.push(rl.clone());
            continue;
        };
        let query = bank.pooled(&q.image, &q.bbox)?;
        let feats = rl
            .entries
            .iter()
            .map(|e| {
                let b = predicted.get(&(rl.query_id.as_str(), e.image_id.as_str())).copied().unwrap_or(e.bbox);
                bank.pooled(&e.image_id, &b)
            })
            .collect::<Result<Vec<_>>>()?;
        reranked.push(rerank(rl, &query, &feats)?);
    }
    let report = EvalReport {
        miou: miou_value,
        pairs: truth.len(),
        map_before_rerank: has_relevance.then(|| mean_average_precision(&ranklists, &ds.relevance)),
        map_after_rerank: has_relevance.then(|| mean_average_precision(&reranked, &ds.relevance)),
    };

    create_dir(&args.out)?;
    write_json(&args.out.join("metrics.json"), &report)?;
    write_text(&args.out.join("recall_iou.csv"), &curve_csv(&curve))?;
    write_jsonl(&args.out.join("predictions.jsonl"), &predictions)?;
    write_ranklists(&args.out.join("ranklists_reranked.jsonl"), &reranked)?;
    eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub shots: usize,
    pub expanded_shots: usize,
    /// AP@0.5 per category and mean, when annotations are available.
    pub ap_without_qe: Option<f64>,
    pub ap_with_qe: Option<f64>,
    pub per_category_without_qe: Option<BTreeMap<String, f64>>,
    pub per_category_with_qe: Option<BTreeMap<String, f64>>,
}

/// Writes `detections.json` (COCO results of the last round) and
/// `report.json`.
pub fn cmd_fewshot(args: &FewshotArgs) -> Result<()> {
    let mut cfg = load_run_config(&args.run)?;
    if let Some(l) = args.qe_limit {
        cfg.qe_limit = l;
        cfg.validate()?;
    }
    let ds = Dataset::load_images(&args.dataset)?;
    let categories: Vec<String> = read_json(&args.dataset.join(CATEGORIES_FILE))?;
    let shots_path = args.shots.clone().unwrap_or_else(|| args.dataset.join(SHOTS_MANIFEST));
    let shots: Vec<Shot> = read_jsonl::<ShotRecord>(&shots_path)?.iter().map(Shot::from).collect();
    validate_shots(&shots, &categories)?;
    for s in &shots {
        if ds.record(&s.image).is_none() {
            return Err(SpilError::parse(&shots_path, format!("shot references unknown image '{}'", s.image)));
        }
    }
    let init_head = args.init_head.as_deref().map(checkpoint::load).transpose()?;
    let bank = cfg.bank_for(&ds)?.with_correlation(cfg.fewshot_correlation);
    let corpus: Vec<String> = ds
        .images
        .iter()
        .filter(|r| !shots.iter().any(|s| s.image == r.id))
        .map(|r| r.id.clone())
        .collect();

    let settings = FewShotSettings {
        topk: cfg.topk,
        nms_iou: cfg.nms_iou,
        qe: args.qe,
        qe_limit: cfg.qe_limit,
        seed: cfg.seed,
    };
    let outcome = run_fewshot(&bank, &shots, &corpus, &cfg.train, &settings, init_head, |round, snap| {
        eprintln!(
            "round {round} stage {}: tau {:.2}, {} entries updated",
            snap.stage, snap.log.tau, snap.log.updated_entries
        );
        Ok(())
    })?;

    let ann_path = args.dataset.join(ANNOTATIONS_FILE);
    let annotations: Option<Vec<Annotation>> = ann_path.exists().then(|| read_jsonl(&ann_path)).transpose()?;
    let score = |dets| -> Result<Option<(BTreeMap<String, f64>, f64)>> {
        annotations.as_ref().map(|a| evaluate(dets, a, &corpus, 0.5)).transpose()
    };
    let base = score(&outcome.base.detections)?;
    let expanded = match &outcome.expanded {
        Some(r) => score(&r.detections)?,
        None => None,
    };
    let report = FewShotReport {
        shots: shots.len(),
        expanded_shots: outcome.expanded_shots.len(),
        ap_without_qe: base.as_ref().map(|b| b.1),
        ap_with_qe: expanded.as_ref().map(|e| e.1),
        per_category_without_qe: base.map(|b| b.0),
        per_category_with_qe: expanded.map(|e| e.0),
    };

    create_dir(&args.out)?;
    write_json(&args.out.join("detections.json"), &coco_detections(outcome.detections()))?;
    write_json(&args.out.join("report.json"), &report)?;
    eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}
