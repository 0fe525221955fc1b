//! Integrator output layer.

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, TpError};
use crate::rule::row_softmax;
use crate::scalar::Scalar;

/// Running sum of readout currents, `[batch, classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutState<T> {
    pub accumulator: Array2<T>,
}

impl<T: Scalar> ReadoutState<T> {
    pub fn zeros(batch: usize, classes: usize) -> Self {
        ReadoutState {
            accumulator: Array2::zeros((batch, classes)),
        }
    }

    pub fn reset(&mut self) {
        self.accumulator.fill(T::zero());
    }
}

/// `accumulator += spikes . weights`.
pub fn readout_step<T: Scalar>(
    readout: &mut ReadoutState<T>,
    spikes: ArrayView2<'_, T>,
    weights: ArrayView2<'_, T>,
) -> Result<()> {
    if spikes.ncols() != weights.nrows() || readout.accumulator.dim() != (spikes.nrows(), weights.ncols()) {
        return Err(TpError::dim(
            "readout",
            format!("{:?}", readout.accumulator.dim()),
            format!("spikes {:?} weights {:?}", spikes.dim(), weights.dim()),
        ));
    }
    readout.accumulator += &spikes.dot(&weights);
    Ok(())
}

/// Argmax per row; ties go to the lowest class index.
pub fn predict<T: Scalar>(readout: &ReadoutState<T>) -> Vec<usize> {
    readout
        .accumulator
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Delta-rule gradient of the batch-mean cross-entropy on the accumulated
/// logits: `(1/B) counts^T (softmax(acc) - onehot)`, where `counts` is the
/// time-summed activity that fed the integrator.
pub fn readout_gradient<T: Scalar>(
    counts: ArrayView2<'_, T>,
    accumulator: ArrayView2<'_, T>,
    one_hot: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if accumulator.dim() != one_hot.dim() || counts.nrows() != accumulator.nrows() {
        return Err(TpError::dim(
            "readout gradient",
            format!("{:?}", accumulator.dim()),
            format!("targets {:?} counts {:?}", one_hot.dim(), counts.dim()),
        ));
    }
    let mut err = row_softmax(accumulator);
    err -= &one_hot;
    let inv_b = T::one() / T::of_usize(counts.nrows().max(1));
    Ok(counts.t().dot(&err) * inv_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn silent_input_ties_to_class_zero() {
        let mut r = ReadoutState::<f64>::zeros(2, 3);
        let w = array![[1.0, 2.0, 3.0]];
        for _ in 0..5 {
            readout_step(&mut r, array![[0.0], [0.0]].view(), w.view()).unwrap();
        }
        assert!(r.accumulator.iter().all(|&x| x == 0.0));
        assert_eq!(predict(&r), vec![0, 0]);
    }

    #[test]
    fn identity_readout_counts_spikes() {
        let mut r = ReadoutState::<f64>::zeros(1, 3);
        let eye = Array2::<f64>::eye(3);
        for s in [array![[1.0, 0.0, 0.0]], array![[0.0, 0.0, 1.0]], array![[1.0, 0.0, 0.0]]] {
            readout_step(&mut r, s.view(), eye.view()).unwrap();
        }
        assert_eq!(r.accumulator, array![[2.0, 0.0, 1.0]]);
        assert_eq!(predict(&r), vec![0]);
    }

    #[test]
    fn predict_examples() {
        let r = ReadoutState {
            accumulator: array![[0.1, 0.9], [0.5, 0.5]],
        };
        assert_eq!(predict(&r), vec![1, 0]);
        let swapped = ReadoutState {
            accumulator: array![[0.9, 0.1], [0.2, 0.7]],
        };
        assert_eq!(predict(&swapped), vec![0, 1]);
    }

    #[test]
    fn shape_errors() {
        let mut r = ReadoutState::<f64>::zeros(1, 2);
        assert!(readout_step(&mut r, array![[1.0, 0.0]].view(), array![[1.0, 0.0]].view()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let counts = array![[2.0, 0.0, 1.0], [1.0, 3.0, 0.0]];
        let w = array![[0.1, -0.2], [0.3, 0.05], [-0.4, 0.2]];
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let loss = |w: &Array2<f64>| {
            let acc = counts.dot(w);
            crate::rule::local_loss(acc.view(), y.view()).unwrap()
        };
        let g = readout_gradient(counts.view(), counts.dot(&w).view(), y.view()).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let (mut p, mut m) = (w.clone(), w.clone());
                p[[i, j]] += h;
                m[[i, j]] -= h;
                approx::assert_relative_eq!(g[[i, j]], (loss(&p) - loss(&m)) / (2.0 * h), epsilon = 1e-8);
            }
        }
    }
}
