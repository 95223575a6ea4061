//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use spil::coattention::CovMatrix;
use spil::evalkit::ScoredBox;
use spil::{BoundingBox, FeatureMap, Kernel};

/// `B Bᵀ / order` for a random square `B`.
pub fn random_psd<R: Rng>(order: usize, rng: &mut R) -> CovMatrix {
    let b = DMatrix::<f64>::from_fn(order, order, |_, _| rng.random_range(-1.0..1.0));
    let a = &b * b.transpose() / order as f64;
    let entries = (0..order).flat_map(|r| (0..order).map(move |c| (r, c))).map(|(r, c)| a[(r, c)]).collect();
    CovMatrix::new(order, entries).expect("square matrix")
}

/// Dominant eigenpair from a dense symmetric decomposition, with the
/// ratio of the two largest eigenvalues.
pub fn dense_eigen(cov: &CovMatrix) -> (Vec<f64>, f64, f64) {
    let n = cov.order();
    let m = DMatrix::from_fn(n, n, |r, c| cov.get(r, c));
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let top = order[0];
    let gap = if n > 1 { eig.eigenvalues[order[1]] / eig.eigenvalues[top] } else { 0.0 };
    (eig.eigenvectors.column(top).iter().copied().collect(), eig.eigenvalues[top], gap)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn random_map<R: Rng>(h: usize, w: usize, c: usize, rng: &mut R) -> FeatureMap {
    FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("valid dims")
}

pub fn random_kernel<R: Rng>(c: usize, rng: &mut R) -> Kernel {
    Kernel::new((0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("non-empty kernel")
}

/// Per-channel product by explicit row, column and channel loops.
pub fn naive_xcorr(kernel: &Kernel, fm: &FeatureMap) -> Vec<f64> {
    let mut out = Vec::with_capacity(fm.cells() * fm.channels());
    for i in 0..fm.height() {
        for j in 0..fm.width() {
            for ch in 0..fm.channels() {
                out.push(kernel.values()[ch] * fm.get(i, j, ch));
            }
        }
    }
    out
}

/// Retrieval AP straight from its definition: precision recomputed from
/// scratch at every relevant rank.
pub fn retrieval_ap_oracle(flags: &[bool]) -> f64 {
    let relevant_ranks: Vec<usize> = (0..flags.len()).filter(|r| flags[*r]).collect();
    if relevant_ranks.is_empty() {
        return 0.0;
    }
    let precision_at = |r: usize| flags[..=r].iter().filter(|f| **f).count() as f64 / (r + 1) as f64;
    relevant_ranks.iter().map(|r| precision_at(*r)).sum::<f64>() / relevant_ranks.len() as f64
}

/// True positives of the top `k` detections, recomputed from scratch: every
/// detection in score order claims its best still-free ground truth.
fn matches_in_prefix(ranked: &[(usize, ScoredBox)], gt: &[Vec<BoundingBox>], k: usize, thr: f64) -> usize {
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    for (img, det) in &ranked[..k] {
        let candidates: Vec<(usize, f64)> = gt[*img]
            .iter()
            .enumerate()
            .filter(|(g, _)| !used[*img][*g])
            .map(|(g, b)| (g, det.bbox.iou(b)))
            .filter(|(_, v)| *v >= thr)
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (g, v) in candidates {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[*img][g] = true;
            tp += 1;
        }
    }
    tp
}

/// Detection AP by brute force: precision and recall for every prefix of
/// the ranking, then at each of the 101 recall levels the best precision
/// over all prefixes reaching it.
pub fn detection_ap_oracle(dets: &[Vec<ScoredBox>], gt: &[Vec<BoundingBox>], thr: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, ScoredBox)> = dets.iter().enumerate().flat_map(|(i, d)| d.iter().map(move |b| (i, *b))).collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let points: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = matches_in_prefix(&ranked, gt, k, thr) as f64;
            (tp / n_gt as f64, tp / k as f64)
        })
        .collect();
    let mut sum = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BoundingBox {
    let x = rng.random_range(0.0..extent * 0.8);
    let y = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(2.0..extent * 0.4);
    let h = rng.random_range(2.0..extent * 0.4);
    BoundingBox::new(x, y, x + w, y + h).expect("ordered corners")
}
