//! Procedural two-domain translation tasks.
//!
//! A phantom is a union of smooth, compactly supported blobs on a zero
//! background, confined to a central disc so at least a quarter of the grid
//! stays background. The clean phantom is the regression target; the input is
//! the phantom after a domain-specific appearance shift: gamma transfer,
//! background pedestal, multiplicative horizontal tag lines, brightness
//! offset and Gaussian noise, clipped to the intensity range.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DomainTag, ImageGrid, PairedSample, UnpairedSample};
use crate::error::{Error, Result};
use crate::seeds;

pub const RANGE_LO: f64 = 0.0;
pub const RANGE_HI: f64 = 255.0;

/// The foreground never leaves a disc of this radius (as a fraction of the
/// shorter side); the disc covers about 55% of the grid.
const DISC_FRACTION: f64 = 0.42;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub tag_period: f64,
    pub tag_contrast: f64,
    pub gamma: f64,
    pub brightness_offset: f64,
    pub noise_sigma: f64,
    pub background_level: f64,
    pub seed: u64,
}

impl ShiftConfig {
    /// No appearance change at all: the input equals the target.
    pub fn identity(seed: u64) -> Self {
        Self {
            tag_period: 8.0,
            tag_contrast: 0.0,
            gamma: 1.0,
            brightness_offset: 0.0,
            noise_sigma: 0.0,
            background_level: 0.0,
            seed,
        }
    }

    pub fn default_source() -> Self {
        Self {
            tag_period: 6.0,
            tag_contrast: 0.5,
            gamma: 1.0,
            brightness_offset: 0.0,
            noise_sigma: 3.0,
            background_level: 0.0,
            seed: 11,
        }
    }

    pub fn default_target() -> Self {
        Self {
            tag_period: 9.0,
            tag_contrast: 0.7,
            gamma: 0.8,
            brightness_offset: 12.0,
            noise_sigma: 6.0,
            background_level: 8.0,
            seed: 23,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("shift config: {m}")));
        if !(self.tag_period.is_finite() && self.tag_period >= 2.0) {
            return bad("tag_period must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.tag_contrast) {
            return bad("tag_contrast must lie in [0, 1]");
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative");
        }
        if !(self.brightness_offset.is_finite() && self.background_level.is_finite()) {
            return bad("offsets must be finite");
        }
        Ok(())
    }

    /// Equality ignoring the noise seed.
    fn same_appearance(&self, other: &Self) -> bool {
        Self { seed: 0, ..*self } == Self { seed: 0, ..*other }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_blobs: usize,
    /// Blob radius as a fraction of the shorter side.
    pub blob_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_blobs: 6,
            blob_scale: 0.16,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("phantom dimensions must be positive".into()));
        }
        if self.n_blobs == 0 {
            return Err(Error::InvalidArgument("n_blobs must be at least 1".into()));
        }
        if !(self.blob_scale.is_finite() && self.blob_scale > 0.0) {
            return Err(Error::InvalidArgument("blob_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Compact C¹ bump: `(1 - d²)²` for `d < 1`, else 0.
fn bump(d2: f64) -> f64 {
    if d2 < 1.0 {
        (1.0 - d2) * (1.0 - d2)
    } else {
        0.0
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    amplitude: f64,
    phase: f64,
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<ImageGrid> {
    make_phantom_slice(spec, 0.0)
}

/// A slice through the phantom volume at `position` in `[0, 1)`: blob radii
/// and centres drift smoothly with position, so neighbouring slices of one
/// subject look alike.
pub fn make_phantom_slice(spec: &PhantomSpec, position: f64) -> Result<ImageGrid> {
    spec.validate()?;
    let (h, w) = (spec.height as f64, spec.width as f64);
    let short = h.min(w);
    let disc = DISC_FRACTION * short;
    let (my, mx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let mut rng = seeds::rng(&[seeds::stream::PHANTOM, spec.seed]);
    let blobs: Vec<Blob> = (0..spec.n_blobs)
        .map(|_| {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let dist = rng.random::<f64>().sqrt() * 0.6 * disc;
            Blob {
                cy: my + dist * angle.sin(),
                cx: mx + dist * angle.cos(),
                radius: spec.blob_scale * short * (0.7 + 0.6 * rng.random::<f64>()),
                aspect: 0.7 + 0.6 * rng.random::<f64>(),
                amplitude: 0.35 + 0.65 * rng.random::<f64>(),
                phase: rng.random::<f64>(),
            }
        })
        .collect();

    let wave = |b: &Blob| (std::f64::consts::TAU * (position + b.phase)).sin();
    ImageGrid::from_fn(spec.height, spec.width, RANGE_LO, RANGE_HI, |y, x| {
        let (fy, fx) = (y as f64, x as f64);
        let mut s = 0.0;
        for b in &blobs {
            let r = b.radius * (1.0 + 0.2 * wave(b));
            let cy = b.cy + 0.1 * r * wave(b);
            let dy = (fy - cy) / (r * b.aspect);
            let dx = (fx - b.cx) / (r / b.aspect);
            s += b.amplitude * bump(dy * dy + dx * dx);
        }
        let d2 = ((fy - my).powi(2) + (fx - mx).powi(2)) / (disc * disc);
        let window = bump(d2 * d2);
        RANGE_HI * (1.0 - (-1.6 * s).exp()) * window
    })
    .map(|g| g.quantized_f32())
}

/// Renders with the noise stream seeded by `shift.seed` alone.
pub fn render_pair(phantom: &ImageGrid, shift: &ShiftConfig) -> Result<PairedSample> {
    render_pair_seeded(phantom, shift, shift.seed, "sample")
}

/// Renders one `(input, target)` pair; `noise_seed` selects the noise draw.
pub fn render_pair_seeded(
    phantom: &ImageGrid,
    shift: &ShiftConfig,
    noise_seed: u64,
    subject_id: &str,
) -> Result<PairedSample> {
    shift.validate()?;
    let (lo, hi) = phantom.range();
    let span = hi - lo;
    let mut rng = seeds::rng(&[seeds::stream::NOISE, noise_seed]);
    let normal = Normal::new(0.0, shift.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let width = phantom.width();
    let values = phantom
        .values()
        .iter()
        .enumerate()
        .map(|(n, &v)| {
            let y = (n / width) as f64;
            let mut out = if shift.gamma == 1.0 {
                v
            } else {
                lo + span * ((v - lo) / span).clamp(0.0, 1.0).powf(shift.gamma)
            };
            out = out.max(shift.background_level);
            if shift.tag_contrast != 0.0 {
                let cos = (std::f64::consts::TAU * y / shift.tag_period).cos();
                out *= 1.0 - shift.tag_contrast * (1.0 + cos) / 2.0;
            }
            out += shift.brightness_offset;
            if shift.noise_sigma > 0.0 {
                out += normal.sample(&mut rng);
            }
            out.clamp(lo, hi)
        })
        .collect();
    let input = ImageGrid::new(phantom.height(), width, values, lo, hi)?.quantized_f32();
    PairedSample::new(input, phantom.clone().quantized_f32(), subject_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub phantom: PhantomSpec,
    pub n_source_subjects: usize,
    pub source_slices: usize,
    pub n_target_subjects: usize,
    pub target_slices: usize,
    pub source_shift: ShiftConfig,
    pub target_shift: ShiftConfig,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            n_source_subjects: 10,
            source_slices: 20,
            n_target_subjects: 1,
            target_slices: 50,
            source_shift: ShiftConfig::default_source(),
            target_shift: ShiftConfig::default_target(),
        }
    }
}

fn subject_slices(
    spec: &TaskSpec,
    domain: DomainTag,
    subject: usize,
    slices: usize,
    shift: &ShiftConfig,
) -> Result<Vec<PairedSample>> {
    let domain_key = match domain {
        DomainTag::Source => 0,
        DomainTag::Target => 1,
    };
    let subject_spec = PhantomSpec {
        seed: seeds::derive(&[spec.phantom.seed, domain_key, subject as u64]),
        ..spec.phantom
    };
    let prefix = match domain {
        DomainTag::Source => "src",
        DomainTag::Target => "tgt",
    };
    let id = format!("{prefix}{subject:02}");
    (0..slices)
        .map(|s| {
            let phantom = make_phantom_slice(&subject_spec, s as f64 / slices as f64)?;
            let noise_seed = seeds::derive(&[shift.seed, domain_key, subject as u64, s as u64]);
            render_pair_seeded(&phantom, shift, noise_seed, &id)
        })
        .collect()
}

/// Generates the paired source dataset and the unpaired target dataset, the
/// latter keeping the clean phantom as its hidden evaluation target.
pub fn build_task(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    if spec.n_source_subjects == 0
        || spec.n_target_subjects == 0
        || spec.source_slices == 0
        || spec.target_slices == 0
    {
        return Err(Error::InvalidArgument("subject and slice counts must be at least 1".into()));
    }
    let mut source = Vec::new();
    for s in 0..spec.n_source_subjects {
        source.extend(subject_slices(spec, DomainTag::Source, s, spec.source_slices, &spec.source_shift)?);
    }
    let mut target = Vec::new();
    for s in 0..spec.n_target_subjects {
        for pair in subject_slices(spec, DomainTag::Target, s, spec.target_slices, &spec.target_shift)? {
            let id = pair.subject_id().to_string();
            let (input, truth) = (pair.input().clone(), pair.target().clone());
            target.push(UnpairedSample::new(input, id, Some(truth))?);
        }
    }
    let mut source = Dataset::source(source, spec.phantom.seed)?;
    let mut target = Dataset::target(target, spec.phantom.seed)?;
    if spec.source_shift.same_appearance(&spec.target_shift) {
        let warning = "source and target shift configs are identical: zero domain gap";
        log::warn!("{warning}");
        source.add_warning(warning);
        target.add_warning(warning);
    }
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task() -> TaskSpec {
        TaskSpec {
            phantom: PhantomSpec {
                height: 32,
                width: 32,
                ..PhantomSpec::default()
            },
            n_source_subjects: 2,
            source_slices: 3,
            n_target_subjects: 1,
            target_slices: 4,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn phantom_is_deterministic_and_shaped() {
        let spec = PhantomSpec::default();
        let a = make_phantom(&spec).unwrap();
        assert_eq!(a, make_phantom(&spec).unwrap());
        assert_eq!(a.dims(), (64, 64));
        assert_ne!(a, make_phantom(&PhantomSpec { seed: 1, ..spec }).unwrap());
    }

    #[test]
    fn phantom_keeps_a_quarter_background() {
        for seed in 0..20 {
            let spec = PhantomSpec {
                n_blobs: 12,
                blob_scale: 0.6,
                seed,
                ..PhantomSpec::default()
            };
            let p = make_phantom(&spec).unwrap();
            let dark = p.values().iter().filter(|&&v| v <= 1e-9).count();
            assert!(dark * 4 >= p.len(), "seed {seed}: {dark} dark pixels");
            assert!(p.max() > 50.0);
        }
    }

    #[test]
    fn tiny_blobs_give_near_background() {
        let spec = PhantomSpec {
            n_blobs: 1,
            blob_scale: 1e-6,
            ..PhantomSpec::default()
        };
        assert!(make_phantom(&spec).unwrap().max() < 1e-6);
    }

    #[test]
    fn identity_shift_reproduces_target() {
        let p = make_phantom(&PhantomSpec::default()).unwrap();
        let pair = render_pair(&p, &ShiftConfig::identity(5)).unwrap();
        assert_eq!(pair.input(), pair.target());
    }

    #[test]
    fn full_contrast_tags_vanish_at_period_multiples() {
        let p = ImageGrid::filled(32, 8, 200.0, 0.0, 255.0).unwrap();
        let shift = ShiftConfig {
            tag_contrast: 1.0,
            tag_period: 8.0,
            ..ShiftConfig::identity(0)
        };
        let pair = render_pair(&p, &shift).unwrap();
        for y in 0..32 {
            // 1 - (1 + cos(2πy/8))/2 = sin²(πy/8)
            let expect = 200.0 * (std::f64::consts::PI * y as f64 / 8.0).sin().powi(2);
            assert!((pair.input().get(y, 3) - expect).abs() < 1e-4, "row {y}");
        }
        assert_eq!(pair.input().get(0, 0), 0.0);
        assert_eq!(pair.input().get(8, 0), 0.0);
    }

    #[test]
    fn noise_is_reproducible_and_monotone_in_sigma() {
        let p = make_phantom(&PhantomSpec::default()).unwrap();
        let l1 = |sigma: f64| {
            let s = ShiftConfig {
                noise_sigma: sigma,
                ..ShiftConfig::identity(9)
            };
            let a = render_pair(&p, &s).unwrap();
            assert_eq!(a, render_pair(&p, &s).unwrap());
            a.input()
                .values()
                .iter()
                .zip(a.target().values())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
        };
        assert!(l1(2.0) < l1(5.0) && l1(5.0) < l1(10.0));
    }

    #[test]
    fn task_has_expected_shape() {
        let (src, tgt) = build_task(&small_task()).unwrap();
        assert_eq!(src.len(), 6);
        assert_eq!(tgt.len(), 4);
        assert_eq!(src.domain_tag(), DomainTag::Source);
        assert!(src.warnings().is_empty());
        for s in tgt.unpaired().unwrap() {
            assert!(s.hidden_target().is_some());
            assert_eq!(s.subject_id(), "tgt00");
        }
        let (src2, _) = build_task(&small_task()).unwrap();
        assert_eq!(src.paired(), src2.paired());
    }

    #[test]
    fn hidden_target_is_the_clean_phantom() {
        let spec = small_task();
        let (_, tgt) = build_task(&spec).unwrap();
        let subject = PhantomSpec {
            seed: seeds::derive(&[spec.phantom.seed, 1, 0]),
            ..spec.phantom
        };
        let p = make_phantom_slice(&subject, 0.25).unwrap();
        assert_eq!(tgt.unpaired().unwrap()[1].hidden_target().unwrap(), &p);
    }

    #[test]
    fn identical_shifts_warn() {
        let mut spec = small_task();
        spec.target_shift = ShiftConfig {
            seed: 99,
            ..spec.source_shift
        };
        let (src, tgt) = build_task(&spec).unwrap();
        assert_eq!(src.warnings().len(), 1);
        assert_eq!(tgt.warnings().len(), 1);
    }

    #[test]
    fn invalid_shift_is_rejected() {
        let p = make_phantom(&PhantomSpec::default()).unwrap();
        let s = ShiftConfig {
            tag_period: 1.0,
            ..ShiftConfig::identity(0)
        };
        assert!(render_pair(&p, &s).is_err());
    }
}
