//! Training objectives and their per-pixel gradients.
//!
//! The target loss follows the masked heteroscedastic form
//!
//! ```text
//! L_t = mean_n [ (m_n · r_n)² / σ²_n + β · log σ²_n ],   r = ŷ − ỹ,  σ² = exp(logvar)
//! ```
//!
//! so the mask enters squared. Setting `mask_outside_norm` switches the data
//! term to `m_n · r_n² / σ²_n` instead. All losses are evaluated in `f64`.

use crate::data::ImageGrid;
use crate::error::{Error, Result};
use crate::translator::{LOGVAR_MAX, LOGVAR_MIN};

/// Per-batch loss components. `target_logvar_term` already includes β, so
/// `total = source_mse + target_data_term + target_logvar_term + attention_floor`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub source_mse: f64,
    pub target_data_term: f64,
    pub target_logvar_term: f64,
    /// Optional attention mean-floor penalty (zero unless enabled).
    pub attention_floor: f64,
    pub total: f64,
    pub beta: f64,
}

fn finite(term: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(pixel) => Err(Error::NonFinite {
            term: term.into(),
            pixel,
        }),
        None => Ok(()),
    }
}

/// Mean squared error.
pub fn source_loss(pred: &ImageGrid, label: &ImageGrid) -> Result<f64> {
    Ok(source_loss_grad(pred, label)?.0)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn source_loss_grad(pred: &ImageGrid, label: &ImageGrid) -> Result<(f64, Vec<f64>)> {
    pred.check_same_dims(label)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .values()
        .iter()
        .zip(label.values())
        .map(|(&p, &y)| {
            let r = p - y;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    let loss = loss / n;
    finite("source_mse", [loss])?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetLossOptions {
    pub beta: f64,
    pub mask_outside_norm: bool,
}

impl Default for TargetLossOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            mask_outside_norm: false,
        }
    }
}

/// Target loss value, split into the data and β-weighted log-variance terms,
/// with per-pixel gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetLossGrad {
    pub data_term: f64,
    pub logvar_term: f64,
    pub d_pred: Vec<f64>,
    pub d_logvar: Vec<f64>,
    pub d_mask: Vec<f64>,
}

impl TargetLossGrad {
    pub fn value(&self) -> f64 {
        self.data_term + self.logvar_term
    }
}

/// Evaluates the target loss for one slice. `mask` holds per-pixel weights in
/// `[0, 1]`; log-variances are clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
pub fn target_loss_grad(
    pred: &ImageGrid,
    logvar: &ImageGrid,
    pseudo: &ImageGrid,
    mask: &[f64],
    opts: TargetLossOptions,
) -> Result<TargetLossGrad> {
    pred.check_same_dims(logvar)?;
    pred.check_same_dims(pseudo)?;
    if mask.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "mask has {} weights for {} pixels",
            mask.len(),
            pred.len()
        )));
    }
    if !(opts.beta.is_finite() && opts.beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {}", opts.beta)));
    }
    let n = pred.len();
    let inv_n = 1.0 / n as f64;
    let mut out = TargetLossGrad {
        data_term: 0.0,
        logvar_term: 0.0,
        d_pred: vec![0.0; n],
        d_logvar: vec![0.0; n],
        d_mask: vec![0.0; n],
    };
    for i in 0..n {
        let r = pseudo.values()[i] - pred.values()[i];
        let lv = logvar.values()[i].clamp(LOGVAR_MIN, LOGVAR_MAX);
        let inv_var = (-lv).exp();
        let m = mask[i];
        let (c, dc) = if opts.mask_outside_norm { (m, 1.0) } else { (m * m, 2.0 * m) };
        let data = c * r * r * inv_var;
        if !data.is_finite() {
            return Err(Error::NonFinite {
                term: "target_data_term".into(),
                pixel: i,
            });
        }
        out.data_term += data;
        out.logvar_term += lv;
        out.d_pred[i] = -2.0 * c * r * inv_var * inv_n;
        out.d_logvar[i] = (opts.beta - data) * inv_n;
        out.d_mask[i] = dc * r * r * inv_var * inv_n;
    }
    out.data_term *= inv_n;
    out.logvar_term *= opts.beta * inv_n;
    finite("target_logvar_term", [out.logvar_term])?;
    Ok(out)
}

/// Target loss value only.
pub fn target_loss(
    pred: &ImageGrid,
    logvar: &ImageGrid,
    pseudo: &ImageGrid,
    mask: &ImageGrid,
    opts: TargetLossOptions,
) -> Result<TargetLossGrad> {
    pred.check_same_dims(mask)?;
    target_loss_grad(pred, logvar, pseudo, mask.values(), opts)
}

/// The source term plus the target terms. Either side may be absent (source
/// only in pretraining, target only in ablations) but not both.
pub fn gst_total(source_mse: Option<f64>, target: Option<(f64, f64)>, beta: f64) -> Result<LossBreakdown> {
    if source_mse.is_none() && target.is_none() {
        return Err(Error::InvalidArgument("both source and target batches are empty".into()));
    }
    let (data, logvar) = target.unwrap_or((0.0, 0.0));
    let source = source_mse.unwrap_or(0.0);
    let b = LossBreakdown {
        source_mse: source,
        target_data_term: data,
        target_logvar_term: logvar,
        attention_floor: 0.0,
        total: source + data + logvar,
        beta,
    };
    finite("total", [b.total])?;
    Ok(b)
}

/// `λ · (mean(a) − 0.5)²` and its gradient with respect to each `a_n`.
pub fn attention_floor(attention: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let n = attention.len() as f64;
    let gap = attention.iter().sum::<f64>() / n - 0.5;
    let g = 2.0 * lambda * gap / n;
    (lambda * gap * gap, vec![g; attention.len()])
}

/// The constrained form `data + β · (mean log σ² − τ)`, which never exceeds
/// the unconstrained target loss for `β, τ ≥ 0`.
pub fn lagrangian(target: &TargetLossGrad, beta: f64, tau: f64) -> f64 {
    target.data_term + target.logvar_term - beta * tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(v: &[f64]) -> ImageGrid {
        ImageGrid::new(1, v.len(), v.to_vec(), 0.0, 255.0).unwrap()
    }

    fn lv(v: &[f64]) -> ImageGrid {
        ImageGrid::new(1, v.len(), v.to_vec(), -10.0, 10.0).unwrap()
    }

    #[test]
    fn source_examples() {
        assert_eq!(source_loss(&g(&[1.0, 5.0]), &g(&[1.0, 5.0])).unwrap(), 0.0);
        assert_eq!(source_loss(&g(&[0.0]), &g(&[2.0])).unwrap(), 4.0);
        let a = source_loss(&g(&[1.0, 2.0]), &g(&[0.0, 0.0])).unwrap();
        let b = source_loss(&g(&[2.0, 4.0]), &g(&[0.0, 0.0])).unwrap();
        assert_eq!(b, 4.0 * a);
        assert!(source_loss(&g(&[1.0]), &g(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn target_examples() {
        let opts = TargetLossOptions::default();
        let t = target_loss_grad(&g(&[0.0]), &lv(&[0.0]), &g(&[1.0]), &[1.0], opts).unwrap();
        assert_eq!(t.value(), 1.0);
        let t = target_loss_grad(&g(&[3.0, 1.0]), &lv(&[0.0, 0.0]), &g(&[1.0, 2.0]), &[1.0, 1.0], opts).unwrap();
        assert_eq!(t.data_term, 2.5);
        assert_eq!(t.logvar_term, 0.0);
        let t = target_loss_grad(&g(&[3.0]), &lv(&[0.7]), &g(&[1.0]), &[0.0], opts).unwrap();
        assert_eq!(t.data_term, 0.0);
        assert!((t.logvar_term - 0.7).abs() < 1e-15);
        let total = gst_total(Some(4.0), Some((1.0, 0.0)), 1.0).unwrap();
        assert_eq!(total.total, 5.0);
        assert!(gst_total(None, None, 1.0).is_err());
    }

    #[test]
    fn mask_enters_squared_unless_switched() {
        let (p, l, y) = (g(&[2.0, 7.0]), lv(&[0.3, -0.4]), g(&[5.0, 1.0]));
        let base = TargetLossOptions::default();
        let a = target_loss_grad(&p, &l, &y, &[0.4, 0.6], base).unwrap();
        let c = 1.5;
        let scaled = target_loss_grad(&p, &l, &y, &[0.4 * c, 0.6 * c], base).unwrap();
        assert!((scaled.data_term - c * c * a.data_term).abs() < 1e-12);
        let outside = TargetLossOptions {
            mask_outside_norm: true,
            ..base
        };
        let a = target_loss_grad(&p, &l, &y, &[0.4, 0.6], outside).unwrap();
        let scaled = target_loss_grad(&p, &l, &y, &[0.4 * c, 0.6 * c], outside).unwrap();
        assert!((scaled.data_term - c * a.data_term).abs() < 1e-12);
    }

    #[test]
    fn non_finite_pixel_is_named() {
        let opts = TargetLossOptions::default();
        let err = target_loss_grad(&g(&[0.0, 0.0]), &lv(&[0.0, 0.0]), &g(&[1.0, 1e200]), &[1.0, 1.0], opts)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { pixel: 1, .. }), "{err}");
    }

    #[test]
    fn stationary_at_residual_squared() {
        let opts = TargetLossOptions::default();
        for r in [0.5f64, 1.0, 3.0, 12.0] {
            let best = (-6000..=6000)
                .map(|i| i as f64 * 1e-3)
                .min_by(|&a, &b| {
                    let f = |s: f64| target_loss_grad(&g(&[0.0]), &lv(&[s]), &g(&[r]), &[1.0], opts).unwrap().value();
                    f(a).total_cmp(&f(b))
                })
                .unwrap();
            assert!((best - (r * r).ln()).abs() <= 1e-3, "r={r}: argmin {best}");
        }
    }

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn pixel_gradients_match_finite_differences(
            p in 0.0..255.0f64, y in 0.0..255.0f64, s in -3.0..3.0f64, m in 0.05..1.0f64,
            outside in any::<bool>(),
        ) {
            let opts = TargetLossOptions { beta: 1.3, mask_outside_norm: outside };
            let f = |p: f64, s: f64, m: f64| {
                target_loss_grad(&g(&[p, 10.0]), &lv(&[s, 0.0]), &g(&[y, 11.0]), &[m, 0.5], opts).unwrap().value()
            };
            let t = target_loss_grad(&g(&[p, 10.0]), &lv(&[s, 0.0]), &g(&[y, 11.0]), &[m, 0.5], opts).unwrap();
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            prop_assert!(rel(t.d_pred[0], fd(|v| f(v, s, m), p)) < 1e-4);
            prop_assert!(rel(t.d_logvar[0], fd(|v| f(p, v, m), s)) < 1e-4);
            prop_assert!(rel(t.d_mask[0], fd(|v| f(p, s, v), m)) < 1e-4);
        }

        #[test]
        fn lagrangian_bound_holds(
            px in prop::collection::vec((0.0..255.0f64, 0.0..255.0f64, -5.0..5.0f64, 0.0..=1.0f64), 1..30),
            beta in 0.01..3.0f64, tau in 0.0..5.0f64,
        ) {
            let n = px.len();
            let p = ImageGrid::new(1, n, px.iter().map(|v| v.0).collect(), 0.0, 255.0).unwrap();
            let y = ImageGrid::new(1, n, px.iter().map(|v| v.1).collect(), 0.0, 255.0).unwrap();
            let l = ImageGrid::new(1, n, px.iter().map(|v| v.2).collect(), -10.0, 10.0).unwrap();
            let m: Vec<f64> = px.iter().map(|v| v.3).collect();
            let t = target_loss_grad(&p, &l, &y, &m, TargetLossOptions { beta, mask_outside_norm: false }).unwrap();
            prop_assert!(lagrangian(&t, beta, tau) <= t.value());
        }
    }
}
