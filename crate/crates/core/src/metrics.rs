//! Reference-based image metrics, the one-tailed paired t-test, and report
//! assembly over methods and seeds.

use std::collections::BTreeMap;

use statrs::function::beta::beta_reg;

use crate::data::{Dataset, ImageGrid};
use crate::error::{Error, Result};
use crate::translator::TranslatorModel;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Mean absolute error.
pub fn l1(pred: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    pred.check_same_dims(truth)?;
    let sum: f64 = pred.values().iter().zip(truth.values()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// `10 log10(L² / MSE)` with `L` the truth's range span, capped at
/// [`PSNR_CAP`].
pub fn psnr(pred: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    pred.check_same_dims(truth)?;
    let mse: f64 = pred.values().iter().zip(truth.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(psnr_from_mse(mse, truth.span()))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a row-major image.
fn filter_valid(values: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * values[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over all fully contained 11×11 Gaussian windows
/// (σ = 1.5), with `C1 = (0.01 L)²`, `C2 = (0.03 L)²` and `L` the truth's
/// range span. Intensities are measured from the truth's `range_lo`, so the
/// value is invariant to affine changes of units applied to both images and
/// their range.
pub fn ssim(pred: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    pred.check_same_dims(truth)?;
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let lo = truth.range_lo();
    let x: Vec<f64> = pred.values().iter().map(|v| v - lo).collect();
    let y: Vec<f64> = truth.values().iter().map(|v| v - lo).collect();
    let (x, y) = (&x[..], &y[..]);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect() };
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let mxx = filter_valid(&prod(&|a, _| a * a), h, w, &taps);
    let myy = filter_valid(&prod(&|_, b| b * b), h, w, &taps);
    let mxy = filter_valid(&prod(&|a, b| a * b), h, w, &taps);
    let l = truth.span();
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    /// Zero variance of the differences; `t` is ±∞ or 0 and `p` ∈ {0, 0.5, 1}.
    pub degenerate: bool,
}

/// One-tailed paired t-test of the alternative `mean(a − b) > 0`, with
/// `n − 1` degrees of freedom.
pub fn paired_ttest_one_tailed(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs two equal-length samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTest {
            t,
            p,
            n,
            degenerate: true,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n as f64 - 1.0;
    // P(T > |t|) = I_{df/(df+t²)}(df/2, 1/2) / 2
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    let p = if t >= 0.0 { tail } else { 1.0 - tail };
    Ok(TTest {
        t,
        p,
        n,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    L1,
    Ssim,
    Psnr,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::L1, Metric::Ssim, Metric::Psnr];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::Ssim => "ssim",
            Metric::Psnr => "psnr",
        }
    }

    pub fn lower_is_better(self) -> bool {
        self == Metric::L1
    }
}

/// Per-slice metrics, index-aligned with the target dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleMetrics {
    pub l1: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr: Vec<f64>,
}

impl SampleMetrics {
    pub fn get(&self, m: Metric) -> &[f64] {
        match m {
            Metric::L1 => &self.l1,
            Metric::Ssim => &self.ssim,
            Metric::Psnr => &self.psnr,
        }
    }

    pub fn mean(&self, m: Metric) -> f64 {
        let v = self.get(m);
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn push(&mut self, pred: &ImageGrid, truth: &ImageGrid) -> Result<()> {
        self.l1.push(l1(pred, truth)?);
        self.ssim.push(ssim(pred, truth)?);
        self.psnr.push(psnr(pred, truth)?);
        Ok(())
    }
}

/// Scores deterministic predictions against the hidden targets.
pub fn evaluate_model(model: &TranslatorModel<f32>, target: &Dataset) -> Result<SampleMetrics> {
    let samples = target
        .unpaired()
        .ok_or_else(|| Error::InvalidDataset("evaluation needs a target dataset".into()))?;
    let mut out = SampleMetrics::default();
    for (i, s) in samples.iter().enumerate() {
        let truth = s
            .hidden_target()
            .ok_or_else(|| Error::InvalidDataset(format!("target sample {i} has no hidden label")))?;
        out.push(&model.predict(s.input())?, truth)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// Method order of the report rows.
    pub methods: Vec<String>,
    /// `(method, seed)` → per-slice metrics.
    pub cells: BTreeMap<(String, u64), SampleMetrics>,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub metric: Metric,
    pub mean: f64,
    /// Sample SD of the per-seed means (0 with one seed).
    pub sd: f64,
    pub seeds: usize,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Formats a float so equal values always print identically.
fn num(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricsReport {
    pub fn new(methods: Vec<String>, config_fingerprint: impl Into<String>) -> Self {
        Self {
            methods,
            cells: BTreeMap::new(),
            config_fingerprint: config_fingerprint.into(),
        }
    }

    pub fn insert(&mut self, method: &str, seed: u64, metrics: SampleMetrics) {
        self.cells.insert((method.to_string(), seed), metrics);
    }

    pub fn seeds_of(&self, method: &str) -> Vec<u64> {
        self.cells.keys().filter(|(m, _)| m == method).map(|(_, s)| *s).collect()
    }

    /// Per-seed means of one metric.
    pub fn seed_means(&self, method: &str, metric: Metric) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|((m, _), _)| m == method)
            .map(|(_, v)| v.mean(metric))
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for method in &self.methods {
            for metric in Metric::ALL {
                let means = self.seed_means(method, metric);
                if means.is_empty() {
                    continue;
                }
                let (mean, sd) = mean_sd(&means);
                rows.push(SummaryRow {
                    method: method.clone(),
                    metric,
                    mean,
                    sd,
                    seeds: means.len(),
                });
            }
        }
        rows
    }

    pub fn summary_value(&self, method: &str, metric: Metric) -> Option<(f64, f64)> {
        let means = self.seed_means(method, metric);
        (!means.is_empty()).then(|| mean_sd(&means))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,metric,mean,sd\n");
        for r in self.summary() {
            s.push_str(&format!("{},{},{},{}\n", r.method, r.metric.as_str(), num(r.mean), num(r.sd)));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | L1 ↓ | SSIM ↑ | PSNR (dB) ↑ |\n|---|---|---|---|\n");
        for method in &self.methods {
            let cell = |m: Metric| match self.summary_value(method, m) {
                Some((mean, sd)) => format!("{mean:.4} ± {sd:.4}"),
                None => "n/a".into(),
            };
            s.push_str(&format!("| {method} | {} | {} | {} |\n", cell(Metric::L1), cell(Metric::Ssim), cell(Metric::Psnr)));
        }
        s.push_str(&format!("\nConfig fingerprint: `{}`\n", self.config_fingerprint));
        s
    }

    /// Per-slice values concatenated over the seeds both methods share.
    fn pooled(&self, method: &str, other: &str, metric: Metric) -> (Vec<f64>, Vec<f64>) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for seed in self.seeds_of(method) {
            if let (Some(x), Some(y)) = (
                self.cells.get(&(method.to_string(), seed)),
                self.cells.get(&(other.to_string(), seed)),
            ) {
                a.extend_from_slice(x.get(metric));
                b.extend_from_slice(y.get(metric));
            }
        }
        (a, b)
    }

    /// One-tailed paired tests of every method against `baseline`, oriented
    /// so the alternative is "the method is better".
    pub fn significance(&self, baseline: &str) -> Vec<(String, Metric, Result<TTest>)> {
        let mut out = Vec::new();
        for method in self.methods.iter().filter(|m| m.as_str() != baseline) {
            for metric in Metric::ALL {
                let (m, b) = self.pooled(method, baseline, metric);
                let test = if metric.lower_is_better() {
                    paired_ttest_one_tailed(&b, &m)
                } else {
                    paired_ttest_one_tailed(&m, &b)
                };
                out.push((method.clone(), metric, test));
            }
        }
        out
    }

    pub fn significance_csv(&self, baseline: &str) -> String {
        let mut s = String::from("method,baseline,metric,n,t,p,degenerate\n");
        for (method, metric, test) in self.significance(baseline) {
            match test {
                Ok(t) => s.push_str(&format!(
                    "{method},{baseline},{},{},{},{},{}\n",
                    metric.as_str(),
                    t.n,
                    num(t.t),
                    num(t.p),
                    t.degenerate
                )),
                Err(_) => s.push_str(&format!("{method},{baseline},{},0,,,unavailable\n", metric.as_str())),
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(h: usize, w: usize, v: Vec<f64>) -> ImageGrid {
        ImageGrid::new(h, w, v, 0.0, 255.0).unwrap()
    }

    fn random(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = crate::seeds::rng(&[seed]);
        grid(h, w, (0..h * w).map(|_| rng.random::<f64>() * 255.0).collect())
    }

    #[test]
    fn l1_examples() {
        let a = grid(1, 2, vec![1.0, 3.0]);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(l1(&a, &grid(1, 2, vec![0.0, 0.0])).unwrap(), 2.0);
        assert_eq!(l1(&a, &grid(1, 2, vec![6.0, 8.0])).unwrap(), 5.0);
    }

    #[test]
    fn psnr_examples() {
        let a = random(4, 4, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr_from_mse(255.0 * 255.0, 255.0).abs() < 1e-12);
        assert!((psnr_from_mse(1.0, 255.0) - 48.1308).abs() < 1e-4);
    }

    /// Direct windowed evaluation, one window at a time.
    fn ssim_brute(x: &ImageGrid, y: &ImageGrid) -> f64 {
        let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        let (h, w) = x.dims();
        let l = y.span();
        let lo = y.range_lo();
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - SSIM_WINDOW {
            for ox in 0..=w - SSIM_WINDOW {
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = g[i] * g[j];
                        ux += wt * (x.get(oy + i, ox + j) - lo);
                        uy += wt * (y.get(oy + i, ox + j) - lo);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = g[i] * g[j];
                        let (a, b) = (x.get(oy + i, ox + j) - lo - ux, y.get(oy + i, ox + j) - lo - uy);
                        vx += wt * a * a;
                        vy += wt * b * b;
                        cxy += wt * a * b;
                    }
                }
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_brute_force() {
        for seed in 0..3 {
            let a = random(20, 23, seed);
            let b = random(20, 23, seed + 10);
            assert!((ssim(&a, &b).unwrap() - ssim_brute(&a, &b)).abs() < 1e-9);
        }
        let a = random(16, 16, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let reflected = a.map(0.0, 255.0, |v| 255.0 - v).unwrap();
        assert!(ssim(&reflected, &a).unwrap() < 1.0);
        assert!(ssim(&random(8, 8, 0), &random(8, 8, 1)).is_err());
    }

    #[test]
    fn metrics_are_symmetric() {
        let (a, b) = (random(16, 16, 5), random(16, 16, 6));
        assert_eq!(l1(&a, &b).unwrap(), l1(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_and_psnr_are_affine_invariant_with_range() {
        let (a, b) = (random(16, 16, 7), random(16, 16, 8));
        let f = |g: &ImageGrid| {
            ImageGrid::new(16, 16, g.values().iter().map(|v| 3.0 * v - 40.0).collect(), -40.0, 3.0 * 255.0 - 40.0).unwrap()
        };
        assert!((ssim(&a, &b).unwrap() - ssim(&f(&a), &f(&b)).unwrap()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - psnr(&f(&a), &f(&b)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ttest_examples() {
        let t = paired_ttest_one_tailed(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((t.t, t.p, t.degenerate), (0.0, 0.5, true));
        let t = paired_ttest_one_tailed(&[2.0, 2.0, 2.0, 2.0], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(t.degenerate && t.p == 0.0);
        // d = [1, 2, 2]: mean 5/3, sd sqrt(1/3), t = (5/3) / (sqrt(1/3)/sqrt(3)) = 5
        let t = paired_ttest_one_tailed(&[2.0, 3.0, 4.0], &[1.0, 1.0, 2.0]).unwrap();
        assert!((t.t - 5.0).abs() < 1e-9);
        // two-sided p for t = 5, df = 2 is 1 - 5/sqrt(27)
        assert!((t.p - (1.0 - 5.0 / 27f64.sqrt()) / 2.0).abs() < 1e-9);
        let r = paired_ttest_one_tailed(&[1.0, 2.0, 4.0], &[2.0, 3.0, 3.0]).unwrap();
        assert!(r.p > 0.5);
        assert!(paired_ttest_one_tailed(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn report_aggregates_over_seeds() {
        let mut r = MetricsReport::new(vec!["no_uda".into(), "ac_gst".into()], "abc");
        for (seed, base, ours) in [(0u64, 10.0, 8.0), (1, 12.0, 9.0)] {
            let m = |v: f64| SampleMetrics {
                l1: vec![v, v + 1.0],
                ssim: vec![0.5, 0.6],
                psnr: vec![30.0, 31.0],
            };
            r.insert("no_uda", seed, m(base));
            r.insert("ac_gst", seed, m(ours));
        }
        let (mean, sd) = r.summary_value("no_uda", Metric::L1).unwrap();
        assert_eq!(mean, 11.5);
        assert!((sd - 2f64.sqrt()).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.starts_with("method,metric,mean,sd\nno_uda,l1,11.500000,1.414214\n"));
        let sig = r.significance("no_uda");
        assert_eq!(sig.len(), 3);
        assert!(sig[0].2.as_ref().unwrap().t > 0.0);
        assert!(r.to_markdown().contains("| ac_gst |"));
    }
}
