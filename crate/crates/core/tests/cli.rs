use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use spil::cli::{
    cmd_eval, cmd_fewshot, cmd_synth, cmd_train, BoxPrediction, EvalArgs, EvalReport, FewShotReport, FewshotArgs, RunOptions,
    SynthArgs, TrainArgs,
};
use spil::dataset::{read_json, read_jsonl, write_jsonl, Dataset};
use spil::evalkit::read_ranklists;
use spil::fewshot::CocoDetection;
use spil::run::RunConfig;
use tempfile::TempDir;

// one CPU: keep the timed runs from competing with each other
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn spil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spil")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, spec: &str, seed: u64) -> PathBuf {
    let cfg = dir.join(format!("spec_{seed}.txt"));
    std::fs::write(&cfg, spec).unwrap();
    let out = dir.join(format!("data_{seed}"));
    cmd_synth(&SynthArgs {
        config: Some(cfg),
        seed: Some(seed),
        out: out.clone(),
    })
    .unwrap();
    out
}

fn tiny(dir: &Path) -> PathBuf {
    synth(dir, "queries = 3\ncandidates = 12\n", 5)
}

fn train(data: &Path, out: &Path, stages: usize, resume_from: Option<PathBuf>) {
    cmd_train(&TrainArgs {
        dataset: data.to_path_buf(),
        run: RunOptions {
            stages: Some(stages),
            ..RunOptions::default()
        },
        ranklists: None,
        resume_from,
        out: out.to_path_buf(),
    })
    .unwrap();
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_default_layout_and_repeatable() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = spil(&["synth", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ds = Dataset::load(&a).unwrap();
    assert_eq!(ds.queries.len(), 20);
    assert_eq!(ds.images.len(), 20 * 65);
    for q in &ds.queries {
        assert_eq!(ds.relevance.relevant(&q.query_id).count(), 48);
    }
    assert!(tree(&a) == tree(&b));
}

#[test]
fn invalid_synth_spec_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.txt");
    std::fs::write(&cfg, "positives_fraction = 1.5\n").unwrap();
    let o = spil(&["synth", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("positives_fraction"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_2_with_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = spil(&["train", missing.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_spil"))
        .args(["synth", "--out", tmp.path().join("o").to_str().unwrap()])
        .env("SPIL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("SPIL_THREADS"));
}

#[test]
fn single_stage_smoke_run_on_default_set() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(&SynthArgs {
        config: None,
        seed: None,
        out: data.clone(),
    })
    .unwrap();
    let out = tmp.path().join("run");
    let t0 = Instant::now();
    train(&data, &out, 1, None);
    assert!(t0.elapsed() < Duration::from_secs(30), "took {:?}", t0.elapsed());

    let mut cfg = RunConfig::default();
    cfg.train.stage.stages = 1;
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), cfg.train.stage.total_iterations());
    assert!(out.join("checkpoint.txt").exists() && out.join("pool.json").exists());
    assert_eq!(read_ranklists(&out.join("ranklists.jsonl")).unwrap().len(), 20);
}

#[test]
fn resuming_reproduces_the_full_run() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();
    let data = tiny(tmp.path());
    let (full, resumed) = (tmp.path().join("full"), tmp.path().join("resumed"));
    train(&data, &full, 3, None);
    train(&data, &resumed, 3, Some(full.join("stage_0")));
    let (a, b) = (tree(&full), tree(&resumed));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(b[name] == *bytes, "{name} differs after resume");
    }
    let log = std::fs::read_to_string(full.join("train_log.jsonl")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.stage.stages = 3;
    assert_eq!(log.lines().count(), cfg.train.stage.total_iterations());
}

#[test]
fn eval_with_ground_truth_boxes_is_perfect() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();
    let data = tiny(tmp.path());
    let ds = Dataset::load(&data).unwrap();
    let lists = spil::run::search_queries(
        &RunConfig::default().bank_for(&ds).unwrap(),
        &ds.queries,
        &ds.corpus_ids(),
        128,
    )
    .unwrap();
    let boxes: Vec<BoxPrediction> = lists
        .iter()
        .flat_map(|l| l.entries.iter().map(move |e| (l.query_id.clone(), e.image_id.clone())))
        .filter_map(|(q, id)| {
            Some(BoxPrediction {
                query_id: q,
                bbox: ds.record(&id)?.gt_box?,
                image: id,
            })
        })
        .collect();
    let boxes_path = tmp.path().join("boxes.jsonl");
    write_jsonl(&boxes_path, &boxes).unwrap();
    let out = tmp.path().join("eval");
    cmd_eval(&EvalArgs {
        dataset: data,
        run: RunOptions::default(),
        checkpoint: None,
        boxes: Some(boxes_path),
        ranklists: None,
        out: out.clone(),
    })
    .unwrap();
    let report: EvalReport = read_json(&out.join("metrics.json")).unwrap();
    assert_eq!(report.miou, Some(1.0));
    assert!(report.pairs > 0);

    let csv = std::fs::read_to_string(out.join("recall_iou.csv")).unwrap();
    let thresholds: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(thresholds, ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"]);

    let reranked = read_ranklists(&out.join("ranklists_reranked.jsonl")).unwrap();
    for (before, after) in lists.iter().zip(&reranked) {
        let mut x: Vec<&str> = before.entries.iter().map(|e| e.image_id.as_str()).collect();
        let mut y: Vec<&str> = after.entries.iter().map(|e| e.image_id.as_str()).collect();
        x.sort_unstable();
        y.sort_unstable();
        assert_eq!(x, y);
    }
}

#[test]
fn eval_rejects_checkpoint_of_another_version() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();
    let data = tiny(tmp.path());
    let ckpt = tmp.path().join("old.txt");
    std::fs::write(&ckpt, "spil-head-checkpoint 0\nchannels = 11\n").unwrap();
    let o = spil(&[
        "eval",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        tmp.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn fewshot_data(dir: &Path) -> PathBuf {
    synth(dir, "queries = 4\ncategories = 2\ncandidates = 10\n", 9)
}

#[test]
fn fewshot_manifest_errors_exit_2() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();
    let data = fewshot_data(tmp.path());
    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let unknown = tmp.path().join("unknown.jsonl");
    std::fs::write(&unknown, r#"{"category": "zebra", "image": "img_q000", "box": [1, 1, 9, 9]}"#.to_string() + "\n").unwrap();
    for shots in [&empty, &unknown] {
        let o = spil(&[
            "fewshot",
            data.to_str().unwrap(),
            "--shots",
            shots.to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    }
}

#[test]
fn fewshot_with_expansion_reports_both_aps() {
    let _g = serial();
    let tmp = TempDir::new().unwrap();
    let data = fewshot_data(tmp.path());
    let out = tmp.path().join("fs");
    cmd_fewshot(&FewshotArgs {
        dataset: data,
        shots: None,
        run: RunOptions {
            stages: Some(2),
            ..RunOptions::default()
        },
        qe: true,
        qe_limit: Some(2),
        init_head: None,
        out: out.clone(),
    })
    .unwrap();
    let report: FewShotReport = read_json(&out.join("report.json")).unwrap();
    assert_eq!(report.shots, 4);
    assert!(report.expanded_shots <= 4 * 2);
    for ap in [report.ap_without_qe, report.ap_with_qe] {
        let ap = ap.expect("annotations are exported");
        assert!((0.0..=1.0).contains(&ap));
    }
    let dets: Vec<CocoDetection> = read_json(&out.join("detections.json")).unwrap();
    assert!(dets.iter().all(|d| d.bbox[2] >= 0.0 && d.bbox[3] >= 0.0 && (0.0..=1.0).contains(&d.score)));
    let _ = read_jsonl::<serde_json::Value>(&tmp.path().join("data_9").join("shots.jsonl")).unwrap();
}
