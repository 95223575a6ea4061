//! Mean, covariance and dominant direction of channel vectors pooled over
//! every spatial location of a batch of feature maps.

use crate::error::{Result, SpilError};
use crate::tensor::FeatureMap;

/// Eigenvalues below this are treated as "no common pattern".
pub const DEGENERATE_EIGENVALUE: f64 = 1e-12;
const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanVector(pub Vec<f64>);

/// Symmetric `order x order` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl CovMatrix {
    pub fn new(order: usize, entries: Vec<f64>) -> Result<Self> {
        if order == 0 || entries.len() != order * order {
            return Err(SpilError::invalid(format!(
                "covariance needs {} entries for order {order}",
                order * order
            )));
        }
        Ok(Self { order, entries })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.order + c]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.entries
            .chunks_exact(self.order)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Unit-norm dominant eigenvector with its eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalDirection {
    pub vector: Vec<f64>,
    pub eigenvalue: f64,
}

fn check_channels(maps: &[&FeatureMap]) -> Result<usize> {
    let first = maps
        .first()
        .ok_or_else(|| SpilError::invalid("need at least one feature map"))?;
    let c = first.channels();
    if let Some((i, m)) = maps.iter().enumerate().find(|(_, m)| m.channels() != c) {
        return Err(SpilError::invalid(format!(
            "map {i} has {} channels, expected {c}",
            m.channels()
        )));
    }
    Ok(c)
}

/// Mean channel vector over every location of every map. Maps may differ in
/// spatial size.
pub fn global_mean(maps: &[&FeatureMap]) -> Result<MeanVector> {
    let c = check_channels(maps)?;
    let mut acc = vec![0.0; c];
    let mut n = 0usize;
    for m in maps {
        for cell in m.cell_vectors() {
            acc.iter_mut().zip(cell).for_each(|(a, v)| *a += v);
        }
        n += m.cells();
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(MeanVector(acc))
}

/// Population covariance (divides by the location count).
pub fn covariance(maps: &[&FeatureMap], mean: &MeanVector) -> Result<CovMatrix> {
    let c = check_channels(maps)?;
    if mean.0.len() != c {
        return Err(SpilError::invalid(format!(
            "mean has {} channels, maps have {c}",
            mean.0.len()
        )));
    }
    let mut acc = vec![0.0; c * c];
    let mut centered = vec![0.0; c];
    let mut n = 0usize;
    for m in maps {
        for cell in m.cell_vectors() {
            for ((d, v), mu) in centered.iter_mut().zip(cell).zip(&mean.0) {
                *d = v - mu;
            }
            for r in 0..c {
                let dr = centered[r];
                // upper triangle only; mirrored below
                for k in r..c {
                    acc[r * c + k] += dr * centered[k];
                }
            }
        }
        n += m.cells();
    }
    for r in 0..c {
        for k in r..c {
            let v = acc[r * c + k] / n as f64;
            acc[r * c + k] = v;
            acc[k * c + r] = v;
        }
    }
    CovMatrix::new(c, acc)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn rayleigh(cov: &CovMatrix, v: &[f64]) -> f64 {
    cov.mul_vec(v).iter().zip(v).map(|(a, b)| a * b).sum()
}

fn power_iterate(cov: &CovMatrix, start: Vec<f64>) -> Option<Vec<f64>> {
    let mut v = start;
    for _ in 0..POWER_MAX_ITERS {
        let mut next = cov.mul_vec(&v);
        if normalize(&mut next) <= f64::MIN_POSITIVE {
            return None;
        }
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    Some(v)
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenvector by power iteration from the normalised all-ones
/// vector. The sign is chosen so the largest-magnitude entry is positive.
pub fn principal_component(cov: &CovMatrix) -> Result<PrincipalDirection> {
    let c = cov.order();
    let ones = vec![1.0 / (c as f64).sqrt(); c];
    let max_diag = (0..c)
        .max_by(|a, b| cov.get(*a, *a).total_cmp(&cov.get(*b, *b)))
        .unwrap_or(0);
    let basis = |i: usize| {
        let mut e = vec![0.0; c];
        e[i] = 1.0;
        e
    };

    // The all-ones start can be orthogonal to the dominant direction (or lie
    // in the null space); fall back to the axis with the largest variance.
    let mut v = match power_iterate(cov, ones) {
        Some(v) => v,
        None => power_iterate(cov, basis(max_diag)).unwrap_or_else(|| basis(max_diag)),
    };
    let mut lambda = rayleigh(cov, &v);

    // Deflate once: if a larger eigenvalue survives, the start vector had no
    // component along it and the iteration settled on a lesser direction.
    if c > 1 {
        let mut deflated = cov.entries.clone();
        for r in 0..c {
            for k in 0..c {
                deflated[r * c + k] -= lambda * v[r] * v[k];
            }
        }
        let deflated = CovMatrix::new(c, deflated)?;
        let start = basis(max_diag);
        if let Some(w) = power_iterate(&deflated, start) {
            let mu = rayleigh(cov, &w);
            if mu > lambda * (1.0 + 1e-9) + DEGENERATE_EIGENVALUE {
                if let Some(w) = power_iterate(cov, w) {
                    v = w;
                    lambda = rayleigh(cov, &v);
                }
            }
        }
    }

    if !(lambda >= DEGENERATE_EIGENVALUE) {
        return Err(SpilError::DegenerateCovariance(lambda));
    }
    fix_sign(&mut v);
    Ok(PrincipalDirection {
        vector: v,
        eigenvalue: lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(cells: &[&[f64]]) -> FeatureMap {
        let c = cells[0].len();
        FeatureMap::new(1, cells.len(), c, cells.concat()).unwrap()
    }

    #[test]
    fn mean_of_two_points() {
        let a = map(&[&[1.0, 3.0]]);
        let b = map(&[&[3.0, 5.0]]);
        assert_eq!(global_mean(&[&a, &b]).unwrap().0, vec![2.0, 4.0]);
        assert!(global_mean(&[]).is_err());
    }

    #[test]
    fn covariance_of_two_points() {
        let a = map(&[&[1.0, 3.0]]);
        let b = map(&[&[3.0, 5.0]]);
        let mean = global_mean(&[&a, &b]).unwrap();
        let cov = covariance(&[&a, &b], &mean).unwrap();
        assert_eq!(cov.entries(), &[1.0, 1.0, 1.0, 1.0]);
        let bad = MeanVector(vec![0.0; 3]);
        assert!(covariance(&[&a], &bad).is_err());
    }

    #[test]
    fn covariance_of_identical_vectors_is_zero() {
        let a = FeatureMap::filled(3, 3, 4, 0.7).unwrap();
        let mean = global_mean(&[&a, &a]).unwrap();
        let cov = covariance(&[&a, &a], &mean).unwrap();
        assert!(cov.entries().iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(
            principal_component(&cov),
            Err(SpilError::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn principal_component_examples() {
        let diag = CovMatrix::new(2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let pc = principal_component(&diag).unwrap();
        assert!((pc.vector[0] - 1.0).abs() < 1e-9 && pc.vector[1].abs() < 1e-9);
        assert!((pc.eigenvalue - 2.0).abs() < 1e-9);

        let ones = CovMatrix::new(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let pc = principal_component(&ones).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((pc.vector[0] - s).abs() < 1e-12 && (pc.vector[1] - s).abs() < 1e-12);
        assert!((pc.eigenvalue - 2.0).abs() < 1e-12);
    }

    #[test]
    fn start_vector_orthogonal_to_dominant_direction() {
        // all-ones lies in the null space of this matrix
        let m = CovMatrix::new(2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let pc = principal_component(&m).unwrap();
        assert!((pc.eigenvalue - 2.0).abs() < 1e-9);
        assert!((pc.vector[0].abs() - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(pc.vector[0] * pc.vector[1] < 0.0);

        // ones is an eigenvector with eigenvalue 1, dominant is (1,-1,0) with 3
        let m = CovMatrix::new(3, vec![2.0, -1.0, 0.0, -1.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let pc = principal_component(&m).unwrap();
        assert!((pc.eigenvalue - 3.0).abs() < 1e-9, "{}", pc.eigenvalue);
    }
}
