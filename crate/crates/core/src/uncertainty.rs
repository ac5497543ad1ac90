//! MC-dropout ensembles and the epistemic/aleatoric uncertainty split.
//!
//! Epistemic uncertainty is the biased (divide-by-K) variance of the member
//! means; aleatoric uncertainty is the mean predicted variance `exp(logvar)`.
//! Both are expressed in normalized intensity units, where the nominal range
//! has unit span: the variance head is trained on normalized residuals, and
//! the epistemic variance is divided by the squared range span.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{store, ImageGrid};
use crate::error::{Error, Result};
use crate::nn::FlushDenormals;
use crate::raster;
use crate::seeds;
use crate::translator::{TranslatorModel, TranslatorOutput};

#[derive(Debug, Clone)]
pub struct DropoutEnsemble {
    members: Vec<TranslatorOutput>,
    input_ref: String,
}

impl DropoutEnsemble {
    /// Requires at least two members with matching dimensions.
    pub fn new(members: Vec<TranslatorOutput>, input_ref: impl Into<String>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs K >= 2 members, got {}",
                members.len()
            )));
        }
        for m in &members {
            members[0].mean.check_same_dims(&m.mean)?;
            members[0].mean.check_same_dims(&m.logvar)?;
        }
        Ok(Self {
            members,
            input_ref: input_ref.into(),
        })
    }

    pub fn members(&self) -> &[TranslatorOutput] {
        &self.members
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn input_ref(&self) -> &str {
        &self.input_ref
    }

    fn dims(&self) -> (usize, usize) {
        self.members[0].mean.dims()
    }

    /// Per-pixel mean of the member mean predictions.
    pub fn mean_prediction(&self) -> ImageGrid {
        let first = &self.members[0].mean;
        let k = self.k() as f64;
        let mut acc = vec![0.0; first.len()];
        for m in &self.members {
            for (a, &v) in acc.iter_mut().zip(m.mean.values()) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= k);
        let (h, w) = self.dims();
        ImageGrid::new(h, w, acc, first.range_lo(), first.range_hi()).expect("finite mean")
    }
}

/// Derived seed of ensemble member `k`.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seeds::derive(&[seeds::stream::MC, seed, k as u64])
}

/// `k` stochastic forward passes. Members may be computed concurrently but are
/// stored in index order, so the result does not depend on scheduling.
pub fn mc_ensemble(model: &TranslatorModel<f32>, x: &ImageGrid, k: usize, seed: u64) -> Result<DropoutEnsemble> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("MC dropout needs K >= 2, got {k}")));
    }
    model.check_input(x)?;
    let members = (0..k)
        .into_par_iter()
        .map(|i| {
            let _ftz = FlushDenormals::new();
            model.forward(x, true, member_seed(seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    DropoutEnsemble::new(members, format!("seed{seed}"))
}

/// Population variance of member means, `(1/K) Σ_k (ỹ_k − μ)²`, divided by
/// the squared span of the intensity range.
pub fn epistemic(ens: &DropoutEnsemble) -> ImageGrid {
    let mu = ens.mean_prediction();
    let k = ens.k() as f64;
    let mut acc = vec![0.0; mu.len()];
    for m in ens.members() {
        for ((a, &v), &c) in acc.iter_mut().zip(m.mean.values()).zip(mu.values()) {
            *a += (v - c) * (v - c);
        }
    }
    let span2 = mu.span() * mu.span();
    acc.iter_mut().for_each(|a| *a /= k * span2);
    let (h, w) = ens.dims();
    ImageGrid::new(h, w, acc, 0.0, 0.25).expect("finite variance")
}

/// Mean predicted variance `(1/K) Σ_k exp(logvar_k)`, divided by
/// `variance_unit²` when the variance head works in a range of that width.
pub fn aleatoric(ens: &DropoutEnsemble, variance_unit: f64) -> ImageGrid {
    let k = ens.k() as f64;
    let mut acc = vec![0.0; ens.members()[0].logvar.len()];
    for m in ens.members() {
        for (a, &lv) in acc.iter_mut().zip(m.logvar.values()) {
            *a += lv.exp();
        }
    }
    let denom = k * variance_unit * variance_unit;
    acc.iter_mut().for_each(|a| *a /= denom);
    let (h, w) = ens.dims();
    ImageGrid::new(h, w, acc, 0.0, crate::translator::LOGVAR_MAX.exp() / (variance_unit * variance_unit)).expect("finite variance")
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub epistemic: ImageGrid,
    pub aleatoric: ImageGrid,
    pub total: ImageGrid,
    pub mean_prediction: ImageGrid,
}

impl UncertaintyMaps {
    pub fn mean_total(&self) -> f64 {
        self.total.mean()
    }

    /// Writes each map as flat `f32` plus an autoscaled PNG preview.
    pub fn dump(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for (name, grid) in [
            ("epistemic", &self.epistemic),
            ("aleatoric", &self.aleatoric),
            ("total", &self.total),
            ("mean", &self.mean_prediction),
        ] {
            store::write_f32_lossy(&dir.join(format!("{prefix}_{name}.bin")), grid)?;
            raster::save_gray_autoscale(grid, &dir.join(format!("{prefix}_{name}.png")))?;
        }
        Ok(())
    }
}

/// `u = u^e + u^a`, keeping the ensemble mean alongside.
pub fn total(epistemic: &ImageGrid, aleatoric: &ImageGrid, mean_prediction: ImageGrid) -> Result<UncertaintyMaps> {
    let hi = epistemic.range_hi() + aleatoric.range_hi();
    let total = epistemic.zip_map(aleatoric, 0.0, hi, |e, a| e + a)?;
    mean_prediction.check_same_dims(&total)?;
    Ok(UncertaintyMaps {
        epistemic: epistemic.clone(),
        aleatoric: aleatoric.clone(),
        total,
        mean_prediction,
    })
}

/// Ensemble, decomposition and sum in one call.
pub fn estimate(model: &TranslatorModel<f32>, x: &ImageGrid, k: usize, seed: u64, variance_unit: f64) -> Result<UncertaintyMaps> {
    let ens = mc_ensemble(model, x, k, seed)?;
    total(&epistemic(&ens), &aleatoric(&ens, variance_unit), ens.mean_prediction())
}
