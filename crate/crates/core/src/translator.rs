//! The translator network: a dropout-capable encoder-decoder with two output
//! heads, one for the predicted image and one for a per-pixel log-variance.
//!
//! The variance head duplicates the last three decoder stages (two conv
//! stages plus the output conv); the encoder and remaining decoder are shared.
//! The network predicts `log σ²` rather than `σ²`, and the prediction is
//! clamped to `[LOGVAR_MIN, LOGVAR_MAX]`, so `σ² = exp(logvar)` is always
//! positive and finite. Inputs are mapped to `[0, 1]` by the grid's nominal
//! range and the mean head is mapped back, so the mean is in intensity units.

use crate::data::ImageGrid;
use crate::error::{Error, Result};
use crate::nn::{self, EncDec, EncDecSpec, ForwardCache, Grads, ParamSet, Real, StoredNetwork, Tensor};
use crate::seeds;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const MEAN_HEAD: usize = 0;
const LOGVAR_HEAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslatorArch {
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
}

impl Default for TranslatorArch {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            dropout_rate: 0.2,
        }
    }
}

impl TranslatorArch {
    fn spec(&self) -> EncDecSpec {
        EncDecSpec {
            depth: self.depth,
            base: self.base_channels,
            heads: 2,
            split: self.depth.min(2),
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn descriptor(&self) -> Vec<(String, String)> {
        vec![
            ("kind".into(), "translator".into()),
            ("depth".into(), self.depth.to_string()),
            ("base".into(), self.base_channels.to_string()),
            ("dropout".into(), self.dropout_rate.to_string()),
        ]
    }
}

/// Mean image and log-variance map for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorOutput {
    pub mean: ImageGrid,
    pub logvar: ImageGrid,
}

impl TranslatorOutput {
    /// `σ² = exp(logvar)` per pixel.
    pub fn variance(&self) -> Vec<f64> {
        self.logvar.values().iter().map(|l| l.exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorModel<F: Real = f32> {
    arch: TranslatorArch,
    net: EncDec<F>,
    dropout_active: bool,
}

/// Forward state kept for a gradient computation.
#[derive(Debug, Clone)]
pub struct TranslatorForward<F> {
    pub mean: ImageGrid,
    pub logvar: Option<ImageGrid>,
    raw_logvar: Option<Vec<F>>,
    span: f64,
    cache: ForwardCache<F>,
}

pub(crate) fn to_tensor<F: Real>(x: &ImageGrid) -> Tensor<F> {
    let (lo, span) = (x.range_lo(), x.span());
    Tensor::from_vec(
        1,
        x.height(),
        x.width(),
        x.values().iter().map(|&v| F::of((v - lo) / span)).collect(),
    )
}

impl<F: Real> TranslatorModel<F> {
    pub fn new(arch: TranslatorArch, seed: u64) -> Result<Self> {
        let net = EncDec::new(
            arch.spec(),
            &["mean", "logvar"],
            0.1,
            seeds::derive(&[seeds::stream::INIT_TRANSLATOR, seed]),
        )?;
        Ok(Self {
            arch,
            net,
            dropout_active: true,
        })
    }

    pub fn arch(&self) -> &TranslatorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<F> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        self.net.params_mut()
    }

    pub fn set_params(&mut self, params: ParamSet<F>) -> Result<()> {
        self.net.set_params(params)
    }

    pub fn dropout_active(&self) -> bool {
        self.dropout_active
    }

    /// Whether [`TranslatorModel::forward_train`] samples dropout masks.
    pub fn set_dropout_active(&mut self, active: bool) {
        self.dropout_active = active;
    }

    pub fn cast<G: Real>(&self) -> TranslatorModel<G> {
        TranslatorModel {
            arch: self.arch,
            net: self.net.cast(),
            dropout_active: self.dropout_active,
        }
    }

    /// Parameter ids of the mean head's output conv `(weight, bias)`.
    pub fn mean_output_layer(&self) -> (usize, usize) {
        (self.net.head_out_weight(MEAN_HEAD), self.net.head_out_bias(MEAN_HEAD))
    }

    pub fn check_input(&self, x: &ImageGrid) -> Result<()> {
        self.arch.spec().check_input(x.height(), x.width())
    }

    /// Inference. `stochastic = false` is deterministic and ignores
    /// `rng_seed`; otherwise dropout masks are drawn from `rng_seed`.
    pub fn forward(&self, x: &ImageGrid, stochastic: bool, rng_seed: u64) -> Result<TranslatorOutput> {
        let f = self.run(x, stochastic.then_some(rng_seed), true)?;
        Ok(TranslatorOutput {
            mean: f.mean,
            logvar: f.logvar.expect("logvar requested"),
        })
    }

    /// Deterministic mean prediction only.
    pub fn predict(&self, x: &ImageGrid) -> Result<ImageGrid> {
        Ok(self.run(x, None, false)?.mean)
    }

    /// Forward pass retaining activations. Dropout is sampled from
    /// `dropout_seed` when the model's dropout flag is set.
    pub fn forward_train(&self, x: &ImageGrid, dropout_seed: u64, want_logvar: bool) -> Result<TranslatorForward<F>> {
        self.run(x, self.dropout_active.then_some(dropout_seed), want_logvar)
    }

    fn run(&self, x: &ImageGrid, dropout_seed: Option<u64>, want_logvar: bool) -> Result<TranslatorForward<F>> {
        let input = to_tensor::<F>(x);
        let (mut outs, cache) = self.net.forward(&input, dropout_seed, &[true, want_logvar])?;
        let (lo, hi, span) = (x.range_lo(), x.range_hi(), x.span());
        let z = outs[MEAN_HEAD].take().expect("mean head");
        let mean = ImageGrid::new(
            x.height(),
            x.width(),
            z.data.iter().map(|&v| lo + span * v.f64()).collect(),
            lo,
            hi,
        )?;
        let (logvar, raw_logvar) = match outs[LOGVAR_HEAD].take() {
            Some(raw) => {
                let lv = ImageGrid::new(
                    x.height(),
                    x.width(),
                    raw.data
                        .iter()
                        .map(|&v| v.f64().clamp(LOGVAR_MIN, LOGVAR_MAX))
                        .collect(),
                    LOGVAR_MIN,
                    LOGVAR_MAX,
                )?;
                (Some(lv), Some(raw.data))
            }
            None => (None, None),
        };
        Ok(TranslatorForward {
            mean,
            logvar,
            raw_logvar,
            span,
            cache,
        })
    }

    /// Accumulates `∂L/∂w` given `∂L/∂mean` (intensity units) and optionally
    /// `∂L/∂logvar` per pixel. Clamped log-variance pixels pass no gradient.
    pub fn backward(&self, fwd: &TranslatorForward<F>, d_mean: &[f64], d_logvar: Option<&[f64]>, grads: &mut Grads<F>) {
        let (h, w) = fwd.mean.dims();
        let gz = Tensor::from_vec(1, h, w, d_mean.iter().map(|&g| F::of(g * fwd.span)).collect());
        let glv = match (d_logvar, &fwd.raw_logvar) {
            (Some(d), Some(raw)) => Some(Tensor::from_vec(
                1,
                h,
                w,
                d.iter()
                    .zip(raw)
                    .map(|(&g, &r)| {
                        let r = r.f64();
                        if r > LOGVAR_MIN && r < LOGVAR_MAX {
                            F::of(g)
                        } else {
                            F::zero()
                        }
                    })
                    .collect(),
            )),
            _ => None,
        };
        self.net.backward(&fwd.cache, &[Some(gz), glv], grads);
    }

    pub fn zero_grads(&self) -> Grads<F> {
        self.params().zeros_like()
    }

    pub fn to_stored(&self) -> StoredNetwork {
        StoredNetwork::new("translator", self.arch.descriptor(), self.params())
    }

    pub fn from_stored(stored: &StoredNetwork) -> Result<Self> {
        if stored.get("kind")? != "translator" {
            return Err(Error::Checkpoint(format!("network {} is not a translator", stored.name)));
        }
        let arch = TranslatorArch {
            depth: stored.parse("depth")?,
            base_channels: stored.parse("base")?,
            dropout_rate: stored.parse("dropout")?,
        };
        let mut model = Self::new(arch, 0)?;
        model.set_params(stored.params.cast())?;
        Ok(model)
    }
}

impl TranslatorModel<f32> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        nn::write_checkpoint(path, &[self.to_stored()])
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let nets = nn::read_checkpoint(path)?;
        let stored = nets
            .iter()
            .find(|n| n.name == "translator")
            .ok_or_else(|| Error::Checkpoint(format!("{} holds no translator", path.display())))?;
        Self::from_stored(stored)
    }
}
