//! End to end through the command functions: generate a benchmark, train
//! for two stages, evaluate the checkpoint.
//!
//! cargo run --release --example instance_search_eval -- [work dir]

use std::path::PathBuf;

use spil::cli::{cmd_eval, cmd_synth, cmd_train, EvalArgs, EvalReport, RunOptions, SynthArgs, TrainArgs};
use spil::dataset::read_json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("spil_instance_search"));
    let (data, run, eval) = (work.join("data"), work.join("run"), work.join("eval"));
    let opts = RunOptions {
        stages: Some(2),
        ..RunOptions::default()
    };

    cmd_synth(&SynthArgs {
        config: None,
        seed: Some(3),
        out: data.clone(),
    })?;
    cmd_train(&TrainArgs {
        dataset: data.clone(),
        run: opts.clone(),
        ranklists: None,
        resume_from: None,
        out: run.clone(),
    })?;
    cmd_eval(&EvalArgs {
        dataset: data,
        run: opts,
        checkpoint: Some(run.join("checkpoint.txt")),
        boxes: None,
        ranklists: Some(run.join("ranklists.jsonl")),
        out: eval.clone(),
    })?;

    let report: EvalReport = read_json(&eval.join("metrics.json"))?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("mIoU {} over {} pairs", show(report.miou), report.pairs);
    println!(
        "mAP {} before re-ranking, {} after",
        show(report.map_before_rerank),
        show(report.map_after_rerank)
    );
    println!("{}", std::fs::read_to_string(eval.join("recall_iou.csv"))?);
    Ok(())
}
