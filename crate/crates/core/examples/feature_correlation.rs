//! Search by correlation on a small synthetic set: per query, rank-list AP
//! and the mean correlation peak on relevant and irrelevant images under
//! raw and cosine correlation.
//!
//! cargo run --release --example feature_correlation -- [seed]

use spil::evalkit::average_precision;
use spil::run::{search_queries, RunConfig};
use spil::synthgen::{generate, SynthSpec};
use spil::Correlation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let ds = generate(&SynthSpec {
        seed,
        queries: 6,
        candidates: 32,
        ..SynthSpec::default()
    })?;
    let cfg = RunConfig::default().with_seed(seed);
    let ids: Vec<String> = ds.images.iter().map(|im| im.id.clone()).collect();
    let bank = cfg.build_bank(&ids, |id| {
        Ok(ds.images.iter().find(|im| im.id == id).expect("known id").image.clone())
    })?;
    let corpus: Vec<String> = ids
        .iter()
        .filter(|id| !ds.queries.iter().any(|q| q.image == **id))
        .cloned()
        .collect();
    let lists = search_queries(&bank, &ds.queries, &corpus, cfg.topk)?;

    let modes = [("raw", Correlation::Raw), ("cosine", Correlation::Cosine { floor: 0.5 })];
    println!("query     AP     {:>22} {:>22}", "raw peak rel/irr", "cosine peak rel/irr");
    for (q, list) in ds.queries.iter().zip(&lists) {
        let kernel = bank.kernel([(q.image.as_str(), &q.bbox)])?;
        let mut cols = Vec::new();
        for (_, mode) in &modes {
            let (mut rel, mut irr) = (Vec::new(), Vec::new());
            for id in &corpus {
                let fm = &bank.get(id)?.features;
                let peak = mode.apply(&kernel, fm)?.channel_sum().into_iter().fold(f64::NEG_INFINITY, f64::max);
                if ds.relevance.is_relevant(&q.query_id, id) {
                    rel.push(peak);
                } else {
                    irr.push(peak);
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            cols.push(format!("{:>10.4}/{:<10.4}", mean(&rel), mean(&irr)));
        }
        println!("{:8} {:.3}  {} {}", q.query_id, average_precision(list, &ds.relevance), cols[0], cols[1]);
    }
    Ok(())
}
