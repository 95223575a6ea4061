//! Self-paced localization on the synthetic benchmark: search, train,
//! report pool mIoU per stage.
//!
//! cargo run --release --example train_localizer -- [seed] [key=value ...]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use spil::config::KeyValues;
use spil::run::{pool_ground_truth, prepare_instance_search, RunConfig};
use spil::selfpaced::{run_training, TrainInput};
use spil::synthgen::{generate, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(7);
    let overrides: String = args.iter().skip(1).map(|a| format!("{a}\n")).collect();
    let mut kv = KeyValues::parse(&format!("seed = {seed}\n{overrides}"), Path::new("args"))?;
    let cfg = RunConfig::from_key_values(&mut kv)?;

    let t0 = Instant::now();
    let ds = generate(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })?;
    let ids: Vec<String> = ds.images.iter().map(|im| im.id.clone()).collect();
    let bank = cfg.build_bank(&ids, |id| {
        Ok(ds.images.iter().find(|im| im.id == id).expect("known id").image.clone())
    })?;
    let query_images: Vec<&str> = ds.queries.iter().map(|q| q.image.as_str()).collect();
    let corpus: Vec<String> = ids.iter().filter(|id| !query_images.contains(&id.as_str())).cloned().collect();
    let setup = prepare_instance_search(&bank, &ds.queries, &corpus, cfg.topk, None)?;

    let boxes: BTreeMap<_, _> = ds.images.iter().filter_map(|im| Some((im.id.clone(), im.gt_box?))).collect();
    let groups: Vec<String> = ds.queries.iter().map(|q| q.query_id.clone()).collect();
    let gt = pool_ground_truth(&groups, &ds.relevance, &boxes);
    println!("setup {:.1}s", t0.elapsed().as_secs_f64());

    let outcome = run_training(
        TrainInput {
            bank: &bank,
            queries: &setup.queries,
            pool: setup.pool,
            ground_truth: Some(&gt),
            init_head: None,
        },
        &cfg.train,
        None,
        |snap| {
            let tail = &snap.iterations[snap.iterations.len().saturating_sub(50)..];
            let mean = |f: fn(&spil::selfpaced::IterLog) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
            println!(
                "stage {} tau {:.2} updated {:4} pool mIoU {:.4}  loss {:.4} (cls {:.4} box {:.4} mask {:.4})  {:.1}s",
                snap.stage,
                snap.log.tau,
                snap.log.updated_entries,
                snap.log.pool_miou_if_gt_available.unwrap_or(f64::NAN),
                mean(|l| l.loss),
                mean(|l| l.cls),
                mean(|l| l.bbox),
                mean(|l| l.mask),
                t0.elapsed().as_secs_f64()
            );
            Ok(())
        },
    )?;
    println!("search-box mIoU {:.4}", outcome.initial_miou.unwrap_or(f64::NAN));

    // model boxes on every pool entry, regardless of the threshold
    let (mut iou_sum, mut n_rel, mut p_rel, mut p_irr, mut n_irr) = (0.0, 0usize, 0.0, 0.0, 0usize);
    for (g, group) in outcome.pool.groups.iter().enumerate() {
        let q = &setup.queries[g];
        let kernel = bank.kernel([(q.image.as_str(), &q.bbox)])?;
        for e in &group.entries {
            let det = bank.infer(&e.image_id, &kernel, &outcome.head, &cfg.train.anchors)?;
            match gt[&group.group].get(&e.image_id) {
                Some(b) => {
                    iou_sum += det.bbox.iou(b);
                    p_rel += det.probability;
                    n_rel += 1;
                }
                None => {
                    p_irr += det.probability;
                    n_irr += 1;
                }
            }
        }
    }
    println!(
        "query-kernel model mIoU {:.4}  mean p relevant {:.3} irrelevant {:.3}",
        iou_sum / n_rel as f64,
        p_rel / n_rel as f64,
        p_irr / n_irr.max(1) as f64
    );
    Ok(())
}
