use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FrameTensor;
use crate::error::{Result, TpError};

/// Support and query sets for few-shot adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct KShotSplit {
    pub support: FrameTensor,
    pub query: FrameTensor,
    pub k: usize,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

/// Splits each class into a support pool (`support_fraction` of its samples)
/// and a query set, then keeps `min(k, pool)` samples per class from the pool.
pub fn kshot_split(data: &FrameTensor, k: usize, support_fraction: f64, seed: u64) -> Result<KShotSplit> {
    if k < 1 {
        return Err(TpError::Config("k must be at least 1".into()));
    }
    if !(support_fraction > 0.0 && support_fraction < 1.0) {
        return Err(TpError::Config(format!("support fraction must lie in (0,1), got {support_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support_indices = Vec::new();
    let mut query_indices = Vec::new();
    for (c, mut idx) in data.class_indices().into_iter().enumerate() {
        if idx.is_empty() {
            return Err(TpError::Input(format!("class {c} has no samples")));
        }
        idx.shuffle(&mut rng);
        let pool = ((idx.len() as f64 * support_fraction).round() as usize).clamp(1, idx.len());
        let (sup, qry) = idx.split_at(pool);
        support_indices.extend_from_slice(&sup[..k.min(sup.len())]);
        query_indices.extend_from_slice(qry);
    }
    Ok(KShotSplit {
        support: data.subset(&support_indices),
        query: data.subset(&query_indices),
        k,
        support_indices,
        query_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::collections::HashSet;

    fn data(per_class: usize, classes: usize) -> FrameTensor {
        let n = per_class * classes;
        FrameTensor::new(Array3::zeros((n, 1, 1)), (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    #[test]
    fn one_shot_has_one_per_class() {
        let s = kshot_split(&data(10, 4), 1, 0.8, 3).unwrap();
        assert_eq!(s.support.len(), 4);
        let mut labels = s.support.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3]);
        assert_eq!(s.query.len(), 8);
    }

    #[test]
    fn large_k_takes_whole_pool() {
        let s = kshot_split(&data(10, 3), 242, 0.8, 3).unwrap();
        assert_eq!(s.support.len(), 24);
        let a: HashSet<_> = s.support_indices.iter().collect();
        let b: HashSet<_> = s.query_indices.iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 30);
    }

    #[test]
    fn reproducible_and_validated() {
        let d = data(7, 2);
        assert_eq!(kshot_split(&d, 5, 0.8, 9).unwrap(), kshot_split(&d, 5, 0.8, 9).unwrap());
        assert!(kshot_split(&d, 0, 0.8, 9).is_err());
        let missing = FrameTensor::new(Array3::zeros((2, 1, 1)), vec![0, 0], 2).unwrap();
        assert!(kshot_split(&missing, 1, 0.8, 0).is_err());
    }
}
