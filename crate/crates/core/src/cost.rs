//! Analytical compute and memory accounting for TP and TESS.
//!
//! Widths `H_0..H_L` are the neuron counts of the layers that hold state;
//! for a TP network `H_0` is the first hidden layer, the one `S` projects
//! onto. MAC sums run over consecutive pairs `(H_{l-1}, H_l)` for
//! `l = 1..=L`; memory sums run over every width. Counts are unitless
//! (MAC operations, state scalars).

use crate::error::{Result, TpError};
use crate::network::TpNetwork;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub widths: Vec<u64>,
    pub batch: u64,
    pub steps: u64,
    pub classes: u64,
    /// Step at which TESS performs its update, `< steps`.
    pub tess_update_step: u64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(TpError::Config("architecture widths must be positive".into()));
        }
        if self.batch == 0 || self.steps == 0 || self.classes == 0 {
            return Err(TpError::Config("batch, steps and classes must be positive".into()));
        }
        if self.tess_update_step >= self.steps {
            return Err(TpError::Config(format!(
                "TESS update step {} must be below the step count {}",
                self.tess_update_step, self.steps
            )));
        }
        Ok(())
    }

    /// Widths of a built network: LIF units per layer.
    pub fn from_network<T: Scalar>(net: &TpNetwork<T>, batch: u64, steps: u64) -> Self {
        ArchSpec {
            widths: net.layers.iter().map(|l| l.units() as u64).collect(),
            batch,
            steps,
            classes: net.classes as u64,
            tess_update_step: 0,
        }
    }

    fn pairs(&self) -> impl Iterator<Item = (u128, u128)> + '_ {
        self.widths.windows(2).map(|w| (w[0] as u128, w[1] as u128))
    }

    fn width_sum(&self) -> u128 {
        self.widths.iter().map(|&h| h as u128).sum()
    }
}

/// `T sum_l [2B H_l + B^2 H_l + B^2 H_{l-1} + 2 B^2 H_{l-1} H_l]`.
pub fn macs_tp(spec: &ArchSpec) -> u128 {
    let (b, t) = (spec.batch as u128, spec.steps as u128);
    t * spec
        .pairs()
        .map(|(prev, h)| 2 * b * h + b * b * h + b * b * prev + 2 * b * b * prev * h)
        .sum::<u128>()
}

/// `(T - t_l) sum_l [B H_l + B H_{l-1} + B H_l O + B H_l + 2 B H_{l-1} H_l]`.
pub fn macs_tess(spec: &ArchSpec) -> Result<u128> {
    if spec.tess_update_step >= spec.steps {
        return Err(TpError::Config("TESS update step must be below the step count".into()));
    }
    let (b, o) = (spec.batch as u128, spec.classes as u128);
    let span = (spec.steps - spec.tess_update_step) as u128;
    Ok(span
        * spec
            .pairs()
            .map(|(prev, h)| b * h + b * prev + b * h * o + b * h + 2 * b * prev * h)
            .sum::<u128>())
}

/// `O H_0 + 4B sum_l H_l`: propagator plus potentials and traces of both paths.
pub fn memory_tp(spec: &ArchSpec) -> u128 {
    spec.classes as u128 * spec.widths.first().copied().unwrap_or(0) as u128 + 4 * spec.batch as u128 * spec.width_sum()
}

/// `(3B + O) sum_l H_l`.
pub fn memory_tess(spec: &ArchSpec) -> u128 {
    (3 * spec.batch as u128 + spec.classes as u128) * spec.width_sum()
}

/// Deep-network approximation of `memory_tess / memory_tp`: `(3B + O) / 4B`.
pub fn relative_memory_cost(batch: u64, classes: u64) -> Result<f64> {
    if batch == 0 || classes == 0 {
        return Err(TpError::Config("batch and classes must be at least 1".into()));
    }
    Ok((3.0 * batch as f64 + classes as f64) / (4.0 * batch as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub macs_tp: u128,
    pub macs_tess: u128,
    pub mem_tp: u128,
    pub mem_tess: u128,
    /// Exact `mem_tess / mem_tp` for this spec.
    pub relative_memory_cost: f64,
    /// `(3B + O) / 4B`.
    pub relative_memory_cost_approx: f64,
}

pub fn cost_report(spec: &ArchSpec) -> Result<CostReport> {
    spec.validate()?;
    let mem_tp = memory_tp(spec);
    let mem_tess = memory_tess(spec);
    Ok(CostReport {
        macs_tp: macs_tp(spec),
        macs_tess: macs_tess(spec)?,
        mem_tp,
        mem_tess,
        relative_memory_cost: mem_tess as f64 / mem_tp as f64,
        relative_memory_cost_approx: relative_memory_cost(spec.batch, spec.classes)?,
    })
}

/// One row per `(batch, classes)` pair, batch-major.
pub fn sweep(base: &ArchSpec, batches: &[u64], classes: &[u64]) -> Result<Vec<(u64, u64, CostReport)>> {
    let mut rows = Vec::with_capacity(batches.len() * classes.len());
    for &b in batches {
        for &o in classes {
            let spec = ArchSpec {
                batch: b,
                classes: o,
                ..base.clone()
            };
            rows.push((b, o, cost_report(&spec)?));
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str =
    "batch,classes,relative_memory_cost,relative_memory_cost_exact,mem_tp,mem_tess,macs_tp,macs_tess";

pub fn sweep_csv(rows: &[(u64, u64, CostReport)]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for (b, o, r) in rows {
        out.push_str(&format!(
            "{b},{o},{:.12},{:.12},{},{},{},{}\n",
            r.relative_memory_cost_approx, r.relative_memory_cost, r.mem_tp, r.mem_tess, r.macs_tp, r.macs_tess
        ));
    }
    out
}

/// Live state scalars of an instantiated network against the formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryAudit {
    pub live: u128,
    pub formula: u128,
    pub delta: i128,
}

/// Allocates a batch state and counts input/target potentials, input/target
/// traces and the target propagator, then compares with [`memory_tp`].
pub fn audit_live_memory<T: Scalar>(net: &TpNetwork<T>, batch: usize) -> MemoryAudit {
    let state = net.new_state(batch);
    let live = (state.formula_state_scalars() + net.target_propagator.len()) as u128;
    let formula = memory_tp(&ArchSpec::from_network(net, batch as u64, 1));
    MemoryAudit {
        live,
        formula,
        delta: live as i128 - formula as i128,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: &[u64], batch: u64, steps: u64, classes: u64, t_l: u64) -> ArchSpec {
        ArchSpec {
            widths: widths.to_vec(),
            batch,
            steps,
            classes,
            tess_update_step: t_l,
        }
    }

    #[test]
    fn tp_macs_examples() {
        assert_eq!(macs_tp(&spec(&[1, 1], 1, 1, 2, 0)), 6);
        let s = spec(&[5, 7, 3], 4, 3, 10, 0);
        let doubled = ArchSpec { steps: 6, ..s.clone() };
        assert_eq!(macs_tp(&doubled), 2 * macs_tp(&s));
        assert_eq!(macs_tp(&spec(&[5], 4, 3, 10, 0)), 0);
    }

    #[test]
    fn tess_macs_examples() {
        assert_eq!(macs_tess(&spec(&[1, 1], 1, 2, 2, 0)).unwrap(), 14);
        let s = spec(&[4, 6], 3, 10, 5, 9);
        let per_step = macs_tess(&ArchSpec { steps: 1, tess_update_step: 0, ..s.clone() }).unwrap();
        assert_eq!(macs_tess(&s).unwrap(), per_step);
        let o1 = macs_tess(&ArchSpec { classes: 1, ..s.clone() }).unwrap();
        let o2 = macs_tess(&ArchSpec { classes: 2, ..s.clone() }).unwrap();
        let o3 = macs_tess(&ArchSpec { classes: 3, ..s.clone() }).unwrap();
        assert_eq!(o3 - o2, o2 - o1);
        assert!(macs_tess(&ArchSpec { tess_update_step: 10, ..s }).is_err());
    }

    #[test]
    fn memory_hand_instance() {
        let s = spec(&[4, 3], 2, 1, 2, 0);
        assert_eq!(memory_tp(&s), 64);
        assert_eq!(memory_tess(&s), 56);
        let r = cost_report(&s).unwrap();
        assert!((r.relative_memory_cost - 56.0 / 64.0).abs() < 1e-12);
        let b3 = ArchSpec { batch: 3, ..s.clone() };
        let b4 = ArchSpec { batch: 4, ..s };
        assert_eq!(memory_tp(&b4) - memory_tp(&b3), memory_tp(&b3) - 64);
    }

    #[test]
    fn relative_cost_values() {
        assert_eq!(relative_memory_cost(32, 32).unwrap(), 1.0);
        assert!((relative_memory_cost(64, 10).unwrap() - 202.0 / 256.0).abs() < 1e-12);
        assert!((relative_memory_cost(64, 1000).unwrap() - 1192.0 / 256.0).abs() < 1e-12);
        assert!(relative_memory_cost(0, 3).is_err());
    }

    #[test]
    fn validation() {
        assert!(spec(&[], 1, 1, 1, 0).validate().is_err());
        assert!(spec(&[3, 0], 1, 1, 1, 0).validate().is_err());
        assert!(spec(&[3], 1, 4, 1, 4).validate().is_err());
        assert!(spec(&[3], 1, 4, 1, 3).validate().is_ok());
    }

    #[test]
    fn sweep_layout() {
        let rows = sweep(&spec(&[8, 8], 1, 5, 1, 0), &[16, 64], &[10, 100, 1000]).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!((rows[1].0, rows[1].1), (16, 100));
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().starts_with("16,10,0.906250000000,"));
    }
}
