//! Domain types shared by every stage: images, paired/unpaired samples and
//! dataset containers.

pub mod store;

use std::fmt;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeds;

pub use store::{read_dataset, write_dataset, MANIFEST_FILE};

/// A 2-D scalar field stored row-major (pixel index `n = y * width + x`).
#[derive(Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
    range_lo: f64,
    range_hi: f64,
}

impl fmt::Debug for ImageGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageGrid")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("range", &(self.range_lo, self.range_hi))
            .finish_non_exhaustive()
    }
}

impl ImageGrid {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        range_lo: f64,
        range_hi: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if !(range_lo.is_finite() && range_hi.is_finite() && range_lo < range_hi) {
            return Err(Error::InvalidImage(format!(
                "invalid intensity range [{range_lo}, {range_hi}]"
            )));
        }
        if let Some(n) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "image".into(),
                pixel: n,
            });
        }
        Ok(Self {
            height,
            width,
            values,
            range_lo,
            range_hi,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, range_lo: f64, range_hi: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], range_lo, range_hi)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        range_lo: f64,
        range_hi: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values, range_lo, range_hi)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn range(&self) -> (f64, f64) {
        (self.range_lo, self.range_hi)
    }

    pub fn range_lo(&self) -> f64 {
        self.range_lo
    }

    pub fn range_hi(&self) -> f64 {
        self.range_hi
    }

    /// Width of the nominal intensity range.
    pub fn span(&self) -> f64 {
        self.range_hi - self.range_lo
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_same_dims(&self, other: &ImageGrid) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected_h: self.height,
                expected_w: self.width,
                got_h: other.height,
                got_w: other.width,
            })
        }
    }

    /// Elementwise map keeping dimensions; the result must stay finite.
    pub fn map(&self, range_lo: f64, range_hi: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
            range_lo,
            range_hi,
        )
    }

    /// Elementwise combination of two equally sized grids.
    pub fn zip_map(
        &self,
        other: &ImageGrid,
        range_lo: f64,
        range_hi: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        self.check_same_dims(other)?;
        Self::new(
            self.height,
            self.width,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            range_lo,
            range_hi,
        )
    }

    pub fn with_range(mut self, range_lo: f64, range_hi: f64) -> Result<Self> {
        if !(range_lo.is_finite() && range_hi.is_finite() && range_lo < range_hi) {
            return Err(Error::InvalidImage(format!(
                "invalid intensity range [{range_lo}, {range_hi}]"
            )));
        }
        self.range_lo = range_lo;
        self.range_hi = range_hi;
        Ok(self)
    }

    /// Rounds every value to the nearest `f32`, making the grid losslessly
    /// persistable.
    pub fn quantized_f32(mut self) -> Self {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self
    }

    pub fn is_f32_exact(&self) -> bool {
        self.values.iter().all(|&v| (v as f32) as f64 == v)
    }
}

pub type SubjectId = String;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    input: ImageGrid,
    target: ImageGrid,
    subject_id: SubjectId,
}

impl PairedSample {
    pub fn new(input: ImageGrid, target: ImageGrid, subject_id: impl Into<SubjectId>) -> Result<Self> {
        input.check_same_dims(&target)?;
        Ok(Self {
            input,
            target,
            subject_id: subject_id.into(),
        })
    }

    pub fn input(&self) -> &ImageGrid {
        &self.input
    }

    pub fn target(&self) -> &ImageGrid {
        &self.target
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }
}

/// A target-domain sample. The hidden target exists for evaluation only; the
/// training entry points accept [`TargetInputs`], which cannot reach it.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpairedSample {
    input: ImageGrid,
    subject_id: SubjectId,
    hidden_target: Option<ImageGrid>,
}

impl UnpairedSample {
    pub fn new(
        input: ImageGrid,
        subject_id: impl Into<SubjectId>,
        hidden_target: Option<ImageGrid>,
    ) -> Result<Self> {
        if let Some(t) = &hidden_target {
            input.check_same_dims(t)?;
        }
        Ok(Self {
            input,
            subject_id: subject_id.into(),
            hidden_target,
        })
    }

    pub fn input(&self) -> &ImageGrid {
        &self.input
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    /// Ground truth for metric computation. Never handed to the trainer.
    pub fn hidden_target(&self) -> Option<&ImageGrid> {
        self.hidden_target.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(Error::InvalidDataset(format!("unknown domain_tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Samples {
    Source(Vec<PairedSample>),
    Target(Vec<UnpairedSample>),
}

/// An ordered collection of same-sized samples from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Samples,
    seed: u64,
    warnings: Vec<String>,
}

fn check_uniform_dims<'a>(mut grids: impl Iterator<Item = &'a ImageGrid>) -> Result<()> {
    if let Some(first) = grids.next() {
        for g in grids {
            first.check_same_dims(g).map_err(|e| {
                Error::InvalidDataset(format!("samples must share dimensions: {e}"))
            })?;
        }
    }
    Ok(())
}

impl Dataset {
    pub fn source(samples: Vec<PairedSample>, seed: u64) -> Result<Self> {
        check_uniform_dims(samples.iter().map(|s| s.input()))?;
        Ok(Self {
            samples: Samples::Source(samples),
            seed,
            warnings: Vec::new(),
        })
    }

    pub fn target(samples: Vec<UnpairedSample>, seed: u64) -> Result<Self> {
        check_uniform_dims(samples.iter().map(|s| s.input()))?;
        Ok(Self {
            samples: Samples::Target(samples),
            seed,
            warnings: Vec::new(),
        })
    }

    pub fn domain_tag(&self) -> DomainTag {
        match self.samples {
            Samples::Source(_) => DomainTag::Source,
            Samples::Target(_) => DomainTag::Target,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::Source(s) => s.len(),
            Samples::Target(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shared `(height, width)`, or `None` for an empty dataset.
    pub fn dims(&self) -> Option<(usize, usize)> {
        (!self.is_empty()).then(|| self.input(0).dims())
    }

    pub fn input(&self, index: usize) -> &ImageGrid {
        match &self.samples {
            Samples::Source(s) => s[index].input(),
            Samples::Target(s) => s[index].input(),
        }
    }

    pub fn subject_id(&self, index: usize) -> &str {
        match &self.samples {
            Samples::Source(s) => s[index].subject_id(),
            Samples::Target(s) => s[index].subject_id(),
        }
    }

    pub fn paired(&self) -> Option<&[PairedSample]> {
        match &self.samples {
            Samples::Source(s) => Some(s),
            Samples::Target(_) => None,
        }
    }

    pub fn unpaired(&self) -> Option<&[UnpairedSample]> {
        match &self.samples {
            Samples::Source(_) => None,
            Samples::Target(s) => Some(s),
        }
    }

    /// Label-free view of the inputs, the only form in which target data
    /// reaches the trainer.
    pub fn target_inputs(&self) -> TargetInputs<'_> {
        TargetInputs {
            inputs: (0..self.len()).map(|i| self.input(i)).collect(),
            seed: self.seed,
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn add_warning(&mut self, warning: impl Into<String>) {
        self.warnings.push(warning.into());
    }

    /// Deterministically shuffled index batches for one epoch.
    pub fn batch_iter(&self, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
        batch_indices(self.len(), batch_size, self.seed, epoch_seed)
    }
}

/// Inputs of a target dataset with labels stripped.
#[derive(Debug, Clone)]
pub struct TargetInputs<'a> {
    inputs: Vec<&'a ImageGrid>,
    seed: u64,
}

impl<'a> TargetInputs<'a> {
    pub fn from_grids(inputs: Vec<&'a ImageGrid>, seed: u64) -> Self {
        Self { inputs, seed }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn get(&self, index: usize) -> &'a ImageGrid {
        self.inputs[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a ImageGrid> + '_ {
        self.inputs.iter().copied()
    }

    pub fn batch_iter(&self, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
        batch_indices(self.inputs.len(), batch_size, self.seed, epoch_seed)
    }
}

/// Partitions a shuffled `0..len` into batches of `batch_size` (last may be
/// short). The order is a pure function of `(seed, epoch_seed)`.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeds::rng(&[seeds::stream::SHUFFLE, seed, epoch_seed]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: f64) -> ImageGrid {
        ImageGrid::filled(4, 4, v, 0.0, 255.0).unwrap()
    }

    #[test]
    fn image_rejects_bad_construction() {
        assert!(ImageGrid::new(2, 2, vec![0.0; 3], 0.0, 1.0).is_err());
        assert!(ImageGrid::new(2, 2, vec![0.0; 4], 1.0, 1.0).is_err());
        assert!(ImageGrid::new(0, 2, vec![], 0.0, 1.0).is_err());
        let err = ImageGrid::new(1, 3, vec![0.0, f64::NAN, 0.0], 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { pixel: 1, .. }));
    }

    #[test]
    fn pixel_index_is_row_major() {
        let g = ImageGrid::from_fn(2, 3, 0.0, 10.0, |y, x| (y * 3 + x) as f64).unwrap();
        assert_eq!(g.values(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(g.get(1, 2), 5.0);
    }

    #[test]
    fn paired_sample_requires_matching_dims() {
        let a = grid(1.0);
        let b = ImageGrid::filled(4, 5, 0.0, 0.0, 255.0).unwrap();
        assert!(PairedSample::new(a.clone(), b.clone(), "s").is_err());
        assert!(UnpairedSample::new(a, "t", Some(b)).is_err());
    }

    #[test]
    fn dataset_requires_uniform_dims() {
        let a = PairedSample::new(grid(1.0), grid(2.0), "a").unwrap();
        let small = ImageGrid::filled(2, 2, 0.0, 0.0, 255.0).unwrap();
        let b = PairedSample::new(small.clone(), small, "b").unwrap();
        assert!(Dataset::source(vec![a, b], 0).is_err());
    }

    #[test]
    fn batches_partition_with_short_tail() {
        let b = batch_indices(5, 2, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batches_are_deterministic_and_epoch_dependent() {
        assert_eq!(batch_indices(40, 16, 3, 9).unwrap(), batch_indices(40, 16, 3, 9).unwrap());
        assert_ne!(batch_indices(40, 40, 3, 9).unwrap(), batch_indices(40, 40, 3, 10).unwrap());
    }

    #[test]
    fn sixteen_samples_one_batch() {
        let b = batch_indices(16, 16, 0, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 16);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ds = Dataset::source(vec![], 0).unwrap();
        assert!(matches!(ds.batch_iter(4, 0), Err(Error::EmptyDataset)));
        assert!(matches!(batch_indices(3, 0, 0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn epochs_cover_each_sample_exactly_once() {
        let epochs = 7;
        let mut counts = vec![0usize; 23];
        for e in 0..epochs {
            for i in batch_indices(23, 4, 11, e).unwrap().into_iter().flatten() {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == epochs as usize));
    }

    #[test]
    fn target_inputs_hide_labels() {
        let s = UnpairedSample::new(grid(3.0), "t", Some(grid(4.0))).unwrap();
        let ds = Dataset::target(vec![s], 5).unwrap();
        let view = ds.target_inputs();
        assert_eq!(view.len(), 1);
        assert_eq!(view.get(0).values()[0], 3.0);
        assert_eq!(ds.unpaired().unwrap()[0].hidden_target().unwrap().values()[0], 4.0);
    }
}
