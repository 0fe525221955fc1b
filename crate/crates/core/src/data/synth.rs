//! Synthetic spatio-temporal classification tasks.
//!
//! A task is a per-class map of which units fire at the high rate at each
//! step; everything else fires at the low rate. Samples are Bernoulli draws
//! from that map with optional spike flips (jitter).

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FrameTensor;
use crate::error::{Result, TpError};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub units: usize,
    pub steps: usize,
    /// Fraction of units active for each class.
    pub active_fraction: f64,
    pub rate_hi: f64,
    pub rate_lo: f64,
    pub jitter: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 10,
            units: 100,
            steps: 20,
            active_fraction: 0.2,
            rate_hi: 0.5,
            rate_lo: 0.05,
            jitter: 0.05,
            samples_per_class: 100,
            seed: 0,
        }
    }
}

/// Temporal-order task: `groups` unit groups fire one after another, and the
/// class is the order. Every group fires for one segment in every class, so
/// time-summed counts carry no class information.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderConfig {
    pub num_classes: usize,
    pub groups: usize,
    pub units_per_group: usize,
    pub segment_steps: usize,
    pub rate_hi: f64,
    pub rate_lo: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for OrderConfig {
    fn default() -> Self {
        OrderConfig {
            num_classes: 6,
            groups: 3,
            units_per_group: 10,
            segment_steps: 5,
            rate_hi: 0.6,
            rate_lo: 0.02,
            jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub num_classes: usize,
    pub units: usize,
    pub steps: usize,
    pub rate_hi: f64,
    pub rate_lo: f64,
    pub jitter: f64,
    /// `active[c][t * units + u]`: unit `u` fires at the high rate at step `t` in class `c`.
    pub active: Vec<Vec<bool>>,
}

fn check_rates(lo: f64, hi: f64, jitter: f64) -> Result<()> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(TpError::Config(format!("rates must satisfy 0 <= lo < hi <= 1, got lo={lo} hi={hi}")));
    }
    if !(0.0..=1.0).contains(&jitter) {
        return Err(TpError::Config(format!("jitter must lie in [0,1], got {jitter}")));
    }
    Ok(())
}

impl SynthTask {
    /// Rate-coded task: each class owns a fixed random subset of units.
    pub fn rate_coded(cfg: &SynthConfig) -> Result<Self> {
        check_rates(cfg.rate_lo, cfg.rate_hi, cfg.jitter)?;
        if cfg.num_classes < 2 || cfg.units == 0 || cfg.steps == 0 {
            return Err(TpError::Config("synthetic task needs >= 2 classes, units and steps".into()));
        }
        let n_active = ((cfg.units as f64 * cfg.active_fraction).round() as usize).clamp(1, cfg.units);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let active = (0..cfg.num_classes)
            .map(|_| {
                let mut units: Vec<usize> = (0..cfg.units).collect();
                units.shuffle(&mut rng);
                let mut mask = vec![false; cfg.units];
                for &u in &units[..n_active] {
                    mask[u] = true;
                }
                (0..cfg.steps).flat_map(|_| mask.iter().copied()).collect()
            })
            .collect();
        Ok(SynthTask {
            num_classes: cfg.num_classes,
            units: cfg.units,
            steps: cfg.steps,
            rate_hi: cfg.rate_hi,
            rate_lo: cfg.rate_lo,
            jitter: cfg.jitter,
            active,
        })
    }

    /// Draws `samples_per_class` samples per class; classes are interleaved.
    pub fn generate(&self, samples_per_class: usize, seed: u64) -> FrameTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = samples_per_class * self.num_classes;
        let mut data = Array3::<f32>::zeros((n, self.steps, self.units));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.num_classes;
            labels.push(c);
            for t in 0..self.steps {
                for u in 0..self.units {
                    let p = if self.active[c][t * self.units + u] { self.rate_hi } else { self.rate_lo };
                    let mut s = rng.gen::<f64>() < p;
                    if self.jitter > 0.0 && rng.gen::<f64>() < self.jitter {
                        s = !s;
                    }
                    data[[i, t, u]] = s as u8 as f32;
                }
            }
        }
        FrameTensor {
            data,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Rate-coded dataset drawn with the template seed `cfg.seed` and sample seed `cfg.seed + 1`.
pub fn synth_task(cfg: &SynthConfig) -> Result<FrameTensor> {
    Ok(SynthTask::rate_coded(cfg)?.generate(cfg.samples_per_class, cfg.seed.wrapping_add(1)))
}

/// k-th permutation of `0..n` in lexicographic order.
fn nth_permutation(n: usize, mut k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let mut fact: Vec<usize> = vec![1; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i;
    }
    let mut out = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let idx = k / fact[i];
        k %= fact[i];
        out.push(pool.remove(idx));
    }
    out
}

pub fn temporal_order_task(cfg: &OrderConfig) -> Result<SynthTask> {
    check_rates(cfg.rate_lo, cfg.rate_hi, cfg.jitter)?;
    if cfg.groups < 2 || cfg.units_per_group == 0 || cfg.segment_steps == 0 {
        return Err(TpError::Config("order task needs >= 2 groups with units and steps".into()));
    }
    let max_classes: usize = (1..=cfg.groups).product();
    if cfg.num_classes < 2 || cfg.num_classes > max_classes {
        return Err(TpError::Config(format!(
            "order task with {} groups supports 2..={max_classes} classes",
            cfg.groups
        )));
    }
    let units = cfg.groups * cfg.units_per_group;
    let steps = cfg.groups * cfg.segment_steps;
    // spread the chosen orders over the permutation list
    let active = (0..cfg.num_classes)
        .map(|c| {
            let perm = nth_permutation(cfg.groups, c * max_classes / cfg.num_classes);
            let mut mask = vec![false; steps * units];
            for t in 0..steps {
                let g = perm[t / cfg.segment_steps];
                for u in g * cfg.units_per_group..(g + 1) * cfg.units_per_group {
                    mask[t * units + u] = true;
                }
            }
            mask
        })
        .collect();
    Ok(SynthTask {
        num_classes: cfg.num_classes,
        units,
        steps,
        rate_hi: cfg.rate_hi,
        rate_lo: cfg.rate_lo,
        jitter: cfg.jitter,
        active,
    })
}

/// Class-conditional unit permutation: for each class, a random
/// `fraction` of the units is shuffled among itself.
pub fn user_shift(task: &SynthTask, fraction: f64, seed: u64) -> Result<SynthTask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TpError::Config(format!("shift fraction must lie in [0,1], got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = (task.units as f64 * fraction).round() as usize;
    let mut out = task.clone();
    for c in 0..task.num_classes {
        let mut units: Vec<usize> = (0..task.units).collect();
        units.shuffle(&mut rng);
        let chosen = &units[..m];
        let mut moved = chosen.to_vec();
        moved.shuffle(&mut rng);
        let mut perm: Vec<usize> = (0..task.units).collect();
        for (&from, &to) in chosen.iter().zip(moved.iter()) {
            perm[from] = to;
        }
        for t in 0..task.steps {
            for u in 0..task.units {
                out.active[c][t * task.units + u] = task.active[c][t * task.units + perm[u]];
            }
        }
    }
    Ok(out)
}

/// Majority vote on time-summed counts: every unit votes, with its count,
/// for the class whose training mean is highest at that unit (ties to the
/// lowest class). Returns accuracy on `test`.
pub fn majority_vote_accuracy(train: &FrameTensor, test: &FrameTensor) -> f64 {
    let counts = train.time_summed();
    let features = train.features();
    let mut means = vec![vec![0.0f64; features]; train.num_classes];
    let mut sizes = vec![0usize; train.num_classes];
    for (row, &l) in counts.rows().into_iter().zip(train.labels.iter()) {
        sizes[l] += 1;
        for (m, &x) in means[l].iter_mut().zip(row.iter()) {
            *m += x as f64;
        }
    }
    for (m, &n) in means.iter_mut().zip(sizes.iter()) {
        m.iter_mut().for_each(|x| *x /= n.max(1) as f64);
    }
    let preferred: Vec<usize> = (0..features)
        .map(|u| {
            let mut best = 0;
            for c in 1..train.num_classes {
                if means[c][u] > means[best][u] {
                    best = c;
                }
            }
            best
        })
        .collect();
    if test.is_empty() {
        return 0.0;
    }
    let test_counts = test.time_summed();
    let correct = test_counts
        .rows()
        .into_iter()
        .zip(test.labels.iter())
        .filter(|(row, &label)| {
            let mut votes = vec![0.0f64; test.num_classes];
            for (u, &x) in row.iter().enumerate() {
                votes[preferred[u]] += x as f64;
            }
            let mut best = 0;
            for c in 1..votes.len() {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best == label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_rates_give_templates() {
        let cfg = SynthConfig {
            num_classes: 3,
            units: 12,
            steps: 4,
            rate_hi: 1.0,
            rate_lo: 0.0,
            jitter: 0.0,
            samples_per_class: 3,
            ..SynthConfig::default()
        };
        let task = SynthTask::rate_coded(&cfg).unwrap();
        let d = task.generate(3, 5);
        for i in 0..d.len() {
            let c = d.labels[i];
            for t in 0..4 {
                for u in 0..12 {
                    assert_eq!(d.data[[i, t, u]] == 1.0, task.active[c][t * 12 + u]);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig {
            samples_per_class: 4,
            ..SynthConfig::default()
        };
        assert_eq!(synth_task(&cfg).unwrap(), synth_task(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_task(&cfg).unwrap().data, synth_task(&other).unwrap().data);
    }

    #[test]
    fn invalid_rates_rejected() {
        let bad = SynthConfig {
            rate_lo: 0.5,
            rate_hi: 0.5,
            ..SynthConfig::default()
        };
        assert!(synth_task(&bad).is_err());
        let bad = SynthConfig {
            jitter: 1.5,
            ..SynthConfig::default()
        };
        assert!(synth_task(&bad).is_err());
    }

    #[test]
    fn empirical_rate_within_binomial_bounds() {
        let cfg = SynthConfig {
            rate_hi: 0.3,
            rate_lo: 0.0,
            jitter: 0.0,
            samples_per_class: 20,
            ..SynthConfig::default()
        };
        let task = SynthTask::rate_coded(&cfg).unwrap();
        let d = task.generate(20, 11);
        let (mut n, mut hits) = (0usize, 0.0f64);
        for i in 0..d.len() {
            let c = d.labels[i];
            for t in 0..cfg.steps {
                for u in 0..cfg.units {
                    if task.active[c][t * cfg.units + u] {
                        n += 1;
                        hits += d.data[[i, t, u]] as f64;
                    }
                }
            }
        }
        let p = hits / n as f64;
        let sigma = (0.3 * 0.7 / n as f64).sqrt();
        assert!((p - 0.3).abs() < 3.0 * sigma, "rate {p}, n {n}");
    }

    #[test]
    fn rate_task_is_solvable_by_majority_vote() {
        let cfg = SynthConfig {
            jitter: 0.0,
            ..SynthConfig::default()
        };
        let task = SynthTask::rate_coded(&cfg).unwrap();
        let train = task.generate(50, 1);
        let test = task.generate(20, 2);
        assert!(majority_vote_accuracy(&train, &test) > 0.95);
    }

    #[test]
    fn order_task_hides_class_in_counts() {
        let cfg = OrderConfig::default();
        let task = temporal_order_task(&cfg).unwrap();
        for c in 0..task.num_classes {
            let per_unit: Vec<usize> = (0..task.units)
                .map(|u| (0..task.steps).filter(|&t| task.active[c][t * task.units + u]).count())
                .collect();
            assert!(per_unit.iter().all(|&n| n == cfg.segment_steps));
        }
        let train = task.generate(60, 1);
        let test = task.generate(40, 2);
        assert!(majority_vote_accuracy(&train, &test) <= 1.0 / 6.0 + 0.1);
        assert!(temporal_order_task(&OrderConfig { num_classes: 7, ..cfg }).is_err());
    }

    #[test]
    fn permutations_are_lexicographic() {
        assert_eq!(nth_permutation(3, 0), vec![0, 1, 2]);
        assert_eq!(nth_permutation(3, 1), vec![0, 2, 1]);
        assert_eq!(nth_permutation(3, 5), vec![2, 1, 0]);
    }

    #[test]
    fn shift_preserves_active_count() {
        let task = SynthTask::rate_coded(&SynthConfig::default()).unwrap();
        let shifted = user_shift(&task, 0.5, 3).unwrap();
        for c in 0..task.num_classes {
            let a = task.active[c].iter().filter(|&&x| x).count();
            let b = shifted.active[c].iter().filter(|&&x| x).count();
            assert_eq!(a, b);
        }
        assert_ne!(task.active, shifted.active);
        assert_eq!(user_shift(&task, 0.0, 3).unwrap().active, task.active);
    }
}
