//! Few-shot detection by search on a synthetic split: 5 categories with 3
//! shots each. Reports AP@0.5 per category without and with query
//! expansion.
//!
//! cargo run --release --example fewshot_detection -- [seed] [key=value ...]

use std::path::Path;
use std::time::Instant;

use spil::config::KeyValues;
use spil::dataset::Annotation;
use spil::fewshot::{evaluate, run_fewshot, FewShotSettings, Shot};
use spil::run::RunConfig;
use spil::synthgen::{category_name, generate, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(7);
    let overrides: String = args.iter().skip(1).map(|a| format!("{a}\n")).collect();
    let cfg = RunConfig::from_key_values(&mut KeyValues::parse(&format!("seed = {seed}\n{overrides}"), Path::new("args"))?)?;

    let t0 = Instant::now();
    let ds = generate(&SynthSpec {
        seed,
        queries: 15,
        categories: 5,
        ..SynthSpec::default()
    })?;
    let shots: Vec<Shot> = ds
        .queries
        .iter()
        .zip(&ds.query_templates)
        .map(|(q, t)| Shot {
            category: category_name(*t),
            image: q.image.clone(),
            bbox: q.bbox,
        })
        .collect();
    let annotations: Vec<Annotation> = ds
        .images
        .iter()
        .filter_map(|im| {
            Some(Annotation {
                image: im.id.clone(),
                category: category_name(im.template?),
                bbox: im.gt_box?,
            })
        })
        .collect();
    let ids: Vec<String> = ds.images.iter().map(|im| im.id.clone()).collect();
    let bank = cfg.build_bank(&ids, |id| {
        Ok(ds.images.iter().find(|im| im.id == id).expect("known id").image.clone())
    })?
    .with_correlation(cfg.fewshot_correlation);
    let corpus: Vec<String> = ids
        .iter()
        .filter(|id| !shots.iter().any(|s| s.image == **id))
        .cloned()
        .collect();
    println!("setup {:.1}s, {} shots, {} corpus images", t0.elapsed().as_secs_f64(), shots.len(), corpus.len());

    // the first round of an expanded run is the run without expansion
    let settings = FewShotSettings {
        topk: cfg.topk,
        nms_iou: cfg.nms_iou,
        qe: true,
        qe_limit: cfg.qe_limit,
        seed: cfg.seed,
    };
    let out = run_fewshot(&bank, &shots, &corpus, &cfg.train, &settings, None, |round, snap| {
        println!(
            "round {round} stage {} updated {:4}  {:.1}s",
            snap.stage,
            snap.log.updated_entries,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let report = |label: &str, dets| -> Result<(), Box<dyn std::error::Error>> {
        let (per, mean) = evaluate(dets, &annotations, &corpus, 0.5)?;
        let cats: Vec<String> = per.iter().map(|(c, ap)| format!("{c} {ap:.3}")).collect();
        println!("{label:8} AP@0.5 {mean:.4}  [{}]", cats.join(", "));
        Ok(())
    };
    report("no QE", &out.base.detections)?;
    report("QE", out.detections())?;
    println!("expanded shots {}  total {:.1}s", out.expanded_shots.len(), t0.elapsed().as_secs_f64());
    Ok(())
}
