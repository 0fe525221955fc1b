//! Datasets: frame tensors, event binning, synthetic tasks, the on-disk
//! container and k-shot splits.

mod augment;
mod container;
mod events;
mod kshot;
mod synth;

pub use augment::random_crop;
pub use container::{load_container, read_container, save_container, write_container, CONTAINER_MAGIC};
pub use events::{bin_events, normalize_counts, read_event_csv, BinMode, BinOptions, Event, EventStream};
pub use kshot::{kshot_split, KShotSplit};
pub use synth::{
    majority_vote_accuracy, synth_task, temporal_order_task, user_shift, OrderConfig, SynthConfig, SynthTask,
};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Result, TpError};
use crate::scalar::Scalar;

/// Frame-based samples `[samples, time, features]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub data: Array3<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FrameTensor {
    pub fn new(data: Array3<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let t = FrameTensor {
            data,
            labels,
            num_classes,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.data.len_of(Axis(0)) {
            return Err(TpError::dim("labels", self.data.len_of(Axis(0)), self.labels.len()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(TpError::Input(format!("label {bad} outside {} classes", self.num_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn features(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn sample(&self, i: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    /// New tensor holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> FrameTensor {
        FrameTensor {
            data: self.data.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Step `t` of the samples in `indices`, as a `[batch, features]` matrix.
    pub fn batch_step<T: Scalar>(&self, indices: &[usize], t: usize) -> Array2<T> {
        let mut out = Array2::zeros((indices.len(), self.features()));
        for (row, &i) in indices.iter().enumerate() {
            let src = self.data.slice(s![i, t, ..]);
            out.row_mut(row).iter_mut().zip(src.iter()).for_each(|(o, &x)| *o = T::of_f32(x));
        }
        out
    }

    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Time-summed activity `[samples, features]`.
    pub fn time_summed(&self) -> Array2<f32> {
        self.data.sum_axis(Axis(1))
    }

    /// Concatenates along the sample axis.
    pub fn concat(&self, other: &FrameTensor) -> Result<FrameTensor> {
        if self.steps() != other.steps() || self.features() != other.features() || self.num_classes != other.num_classes {
            return Err(TpError::Input("cannot concatenate tensors of different shapes".into()));
        }
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .map_err(|e| TpError::Input(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        FrameTensor::new(data, labels, self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_and_views() {
        let data = Array3::from_shape_fn((3, 2, 4), |(s, t, f)| (s * 100 + t * 10 + f) as f32);
        assert!(FrameTensor::new(data.clone(), vec![0, 1], 2).is_err());
        assert!(FrameTensor::new(data.clone(), vec![0, 1, 2], 2).is_err());
        let ft = FrameTensor::new(data, vec![1, 0, 1], 2).unwrap();
        assert_eq!((ft.len(), ft.steps(), ft.features()), (3, 2, 4));
        let b: Array2<f64> = ft.batch_step(&[2, 0], 1);
        assert_eq!(b.row(0).to_vec(), vec![210.0, 211.0, 212.0, 213.0]);
        assert_eq!(b.row(1).to_vec(), vec![10.0, 11.0, 12.0, 13.0]);
        assert_eq!(ft.class_indices(), vec![vec![1], vec![0, 2]]);
        let sub = ft.subset(&[2]);
        assert_eq!(sub.labels, vec![1]);
        assert_eq!(ft.concat(&sub).unwrap().len(), 4);
    }
}
