//! Attention network: a dropout-free encoder-decoder with one sigmoid output
//! channel, producing per-pixel weights in `[0, 1]`. It is trained without
//! attention labels; its only gradient is the masked target loss.

use crate::data::ImageGrid;
use crate::error::{Error, Result};
use crate::nn::{EncDec, EncDecSpec, ForwardCache, Grads, ParamSet, Real, StoredNetwork, Tensor};
use crate::nn::ops;
use crate::seeds;
use crate::translator::to_tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionArch {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for AttentionArch {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 4,
        }
    }
}

impl AttentionArch {
    fn spec(&self) -> EncDecSpec {
        EncDecSpec {
            depth: self.depth,
            base: self.base_channels,
            heads: 1,
            split: 0,
            dropout_rate: 0.0,
        }
    }

    pub fn descriptor(&self) -> Vec<(String, String)> {
        vec![
            ("kind".into(), "attention".into()),
            ("depth".into(), self.depth.to_string()),
            ("base".into(), self.base_channels.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModel<F: Real = f32> {
    arch: AttentionArch,
    net: EncDec<F>,
}

#[derive(Debug, Clone)]
pub struct AttentionForward<F> {
    pub attention: ImageGrid,
    squashed: Tensor<F>,
    cache: ForwardCache<F>,
}

impl<F: Real> AttentionModel<F> {
    pub fn new(arch: AttentionArch, seed: u64) -> Result<Self> {
        let net = EncDec::new(
            arch.spec(),
            &["attn"],
            0.1,
            seeds::derive(&[seeds::stream::INIT_ATTENTION, seed]),
        )?;
        Ok(Self { arch, net })
    }

    pub fn arch(&self) -> &AttentionArch {
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

    pub fn cast<G: Real>(&self) -> AttentionModel<G> {
        AttentionModel {
            arch: self.arch,
            net: self.net.cast(),
        }
    }

    pub fn zero_grads(&self) -> Grads<F> {
        self.params().zeros_like()
    }

    /// Attention map with the input's dimensions, values in `[0, 1]`.
    pub fn attend(&self, x: &ImageGrid) -> Result<ImageGrid> {
        Ok(self.forward_train(x)?.attention)
    }

    pub fn forward_train(&self, x: &ImageGrid) -> Result<AttentionForward<F>> {
        let (mut outs, cache) = self.net.forward(&to_tensor::<F>(x), None, &[true])?;
        let mut squashed = outs[0].take().expect("attention head");
        ops::sigmoid_inplace(&mut squashed);
        let attention = ImageGrid::new(
            x.height(),
            x.width(),
            squashed.data.iter().map(|v| v.f64()).collect(),
            0.0,
            1.0,
        )?;
        Ok(AttentionForward {
            attention,
            squashed,
            cache,
        })
    }

    /// Accumulates `∂L/∂θ` given `∂L/∂a` per pixel.
    pub fn backward(&self, fwd: &AttentionForward<F>, d_attention: &[f64], grads: &mut Grads<F>) {
        let s = &fwd.squashed;
        let mut g = Tensor::from_vec(1, s.h, s.w, d_attention.iter().map(|&v| F::of(v)).collect());
        ops::sigmoid_backward_inplace(&mut g, s);
        self.net.backward(&fwd.cache, &[Some(g)], grads);
    }

    pub fn to_stored(&self) -> StoredNetwork {
        StoredNetwork::new("attention", self.arch.descriptor(), self.params())
    }

    pub fn from_stored(stored: &StoredNetwork) -> Result<Self> {
        if stored.get("kind")? != "attention" {
            return Err(Error::Checkpoint(format!("network {} is not an attention net", stored.name)));
        }
        let arch = AttentionArch {
            depth: stored.parse("depth")?,
            base_channels: stored.parse("base")?,
        };
        let mut model = Self::new(arch, 0)?;
        model.set_params(stored.params.cast())?;
        Ok(model)
    }
}
