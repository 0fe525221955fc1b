//! Accuracy bookkeeping, the silhouette score and the metrics stream.

use std::fmt::Write as _;
use std::io::{self, Write};

use ndarray::ArrayView2;

use crate::error::{Result, TpError};
use crate::scalar::Scalar;

/// `confusion[true][predicted]` counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.counts.len()).map(|c| self.counts[c][c]).sum();
        correct as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Silhouette {
    pub score: f64,
    /// Samples left out because their class has a single member.
    pub excluded: usize,
}

/// Mean silhouette with Euclidean distance.
///
/// Samples of singleton classes are excluded from both the mean and the
/// neighbouring-cluster distances. Needs at least two classes with two or
/// more samples each.
pub fn silhouette<T: Scalar>(points: ArrayView2<'_, T>, labels: &[usize]) -> Result<Silhouette> {
    if points.nrows() != labels.len() {
        return Err(TpError::dim("silhouette labels", points.nrows(), labels.len()));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; classes];
    for &l in labels {
        sizes[l] += 1;
    }
    let kept: Vec<usize> = (0..labels.len()).filter(|&i| sizes[labels[i]] >= 2).collect();
    let clusters = sizes.iter().filter(|&&n| n >= 2).count();
    if clusters < 2 {
        return Err(TpError::Input("silhouette needs two classes with at least two samples".into()));
    }
    let excluded = labels.len() - kept.len();
    let dist = |a: usize, b: usize| -> f64 {
        points
            .row(a)
            .iter()
            .zip(points.row(b).iter())
            .map(|(&x, &y)| {
                let d = (x - y).to_f64_lossy();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    let mut sums = vec![0.0f64; classes];
    for &i in &kept {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for &j in &kept {
            if i != j {
                sums[labels[j]] += dist(i, j);
            }
        }
        let own = labels[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes)
            .filter(|&c| c != own && sizes[c] >= 2)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(Silhouette {
        score: total / kept.len() as f64,
        excluded,
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub best_accuracy: f64,
    /// Mean local loss per layer over the epoch (training split only).
    pub layer_loss: Vec<f64>,
    /// Silhouette of final-step input traces per layer, when computed.
    pub silhouette: Vec<f64>,
    /// Seconds since the start of the run.
    pub wall_clock: f64,
}

fn join(v: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x:.6}");
    }
    s
}

impl MetricsRecord {
    /// `key=value` pairs separated by spaces; list values are comma-joined.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} split={} accuracy={:.6} best_accuracy={:.6} layer_loss={} silhouette={} wall_clock={:.6}",
            self.epoch,
            self.split,
            self.accuracy,
            self.best_accuracy,
            join(&self.layer_loss),
            join(&self.silhouette),
            self.wall_clock
        )
    }

    pub const CSV_HEADER: &'static str = "epoch,split,accuracy,best_accuracy,mean_layer_loss,last_layer_silhouette,wall_clock";

    pub fn to_csv_row(&self) -> String {
        let mean_loss = if self.layer_loss.is_empty() {
            f64::NAN
        } else {
            self.layer_loss.iter().sum::<f64>() / self.layer_loss.len() as f64
        };
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.split,
            self.accuracy,
            self.best_accuracy,
            mean_loss,
            self.silhouette.last().copied().unwrap_or(f64::NAN),
            self.wall_clock
        )
    }
}

/// Receives metrics as they are produced.
pub trait MetricsSink {
    fn record(&mut self, rec: &MetricsRecord) -> io::Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, rec: &MetricsRecord) -> io::Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Writes the line stream and, optionally, a CSV summary.
pub struct StreamSink<W: Write, C: Write> {
    pub lines: W,
    pub csv: Option<C>,
    header_written: bool,
}

impl<W: Write, C: Write> StreamSink<W, C> {
    pub fn new(lines: W, csv: Option<C>) -> Self {
        StreamSink {
            lines,
            csv,
            header_written: false,
        }
    }
}

impl<W: Write, C: Write> MetricsSink for StreamSink<W, C> {
    fn record(&mut self, rec: &MetricsRecord) -> io::Result<()> {
        writeln!(self.lines, "{}", rec.to_line())?;
        self.lines.flush()?;
        if let Some(csv) = &mut self.csv {
            if !self.header_written {
                writeln!(csv, "{}", MetricsRecord::CSV_HEADER)?;
                self.header_written = true;
            }
            writeln!(csv, "{}", rec.to_csv_row())?;
            csv.flush()?;
        }
        Ok(())
    }
}
