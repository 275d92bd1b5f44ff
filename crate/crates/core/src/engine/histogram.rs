//! Fixed-width 1-D histograms with an associative merge.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistogramError {
    #[error("invalid histogram spec: n_bins={n_bins}, lo={lo}, hi={hi}")]
    InvalidSpec { n_bins: usize, lo: f64, hi: f64 },
    #[error("histogram spec mismatch: {0}")]
    Mismatch(String),
}

/// Binning of a histogram. Bins are lo-inclusive and hi-exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistSpec {
    pub n_bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl HistSpec {
    pub fn new(n_bins: usize, lo: f64, hi: f64) -> Result<Self, HistogramError> {
        // `lo < hi` is false for NaN bounds too.
        if n_bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(HistogramError::InvalidSpec { n_bins, lo, hi });
        }
        Ok(Self { n_bins, lo, hi })
    }

    /// `Some(bin)` for in-range values, `None` for under/overflow.
    fn locate(&self, v: f64) -> Slot {
        if v.is_nan() || v >= self.hi {
            return Slot::Overflow;
        }
        if v < self.lo {
            return Slot::Underflow;
        }
        let idx = ((v - self.lo) / (self.hi - self.lo) * self.n_bins as f64).floor() as usize;
        // Rounding can push values just below `hi` onto n_bins.
        Slot::Bin(idx.min(self.n_bins - 1))
    }
}

enum Slot {
    Underflow,
    Bin(usize),
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    pub n_bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub n_filled: u64,
}

impl Histogram {
    pub fn empty(name: &str, n_bins: usize, lo: f64, hi: f64) -> Self {
        Self {
            name: name.to_owned(),
            n_bins,
            lo,
            hi,
            counts: vec![0; n_bins],
            underflow: 0,
            overflow: 0,
            n_filled: 0,
        }
    }

    pub fn spec(&self) -> HistSpec {
        HistSpec {
            n_bins: self.n_bins,
            lo: self.lo,
            hi: self.hi,
        }
    }

    pub fn fill(&mut self, values: &[f64]) {
        let spec = self.spec();
        for &v in values {
            match spec.locate(v) {
                Slot::Underflow => self.underflow += 1,
                Slot::Overflow => self.overflow += 1,
                Slot::Bin(i) => self.counts[i] += 1,
            }
        }
        self.n_filled += values.len() as u64;
    }

    fn same_binning(&self, other: &Histogram) -> bool {
        self.name == other.name
            && self.n_bins == other.n_bins
            && self.lo.to_bits() == other.lo.to_bits()
            && self.hi.to_bits() == other.hi.to_bits()
    }

    /// Adds `other` into `self`.
    pub fn merge_from(&mut self, other: &Histogram) -> Result<(), HistogramError> {
        if !self.same_binning(other) {
            return Err(HistogramError::Mismatch(format!(
                "{}({}, {}, {}) vs {}({}, {}, {})",
                self.name, self.n_bins, self.lo, self.hi, other.name, other.n_bins, other.lo, other.hi
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        self.n_filled += other.n_filled;
        Ok(())
    }
}

/// Fills a fresh histogram from `values`.
pub fn fill_histogram(name: &str, values: &[f64], spec: HistSpec) -> Result<Histogram, HistogramError> {
    let spec = HistSpec::new(spec.n_bins, spec.lo, spec.hi)?;
    let mut h = Histogram::empty(name, spec.n_bins, spec.lo, spec.hi);
    h.fill(values);
    Ok(h)
}

/// Elementwise sum of two histograms with identical binning.
pub fn merge_histograms(a: &Histogram, b: &Histogram) -> Result<Histogram, HistogramError> {
    let mut out = a.clone();
    out.merge_from(b)?;
    Ok(out)
}
