//! A small U-shaped encoder-decoder with skip connections and optional
//! duplicated output heads.
//!
//! Level `i` of the encoder runs at resolution `H / 2^i` with `base * 2^i`
//! channels; a bottleneck sits at `H / 2^depth`. The decoder mirrors the
//! encoder (nearest upsampling, concatenated skip, 3x3 conv). The last
//! `split` decoder levels plus the 1x1 output conv are instantiated once per
//! head; everything before that is shared. Dropout, when enabled, follows
//! every decoder stage and never touches the encoder.

use super::ops;
use super::params::{Grads, ParamId, ParamSet};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncDecSpec {
    pub depth: usize,
    pub base: usize,
    pub heads: usize,
    pub split: usize,
    pub dropout_rate: f64,
}

impl EncDecSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument(
                "depth, base channels and head count must be positive".into(),
            ));
        }
        if self.split > self.depth {
            return Err(Error::InvalidArgument(format!(
                "head split {} exceeds depth {}",
                self.split, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn enc_ch(&self, level: usize) -> usize {
        self.base << level
    }

    fn dec_out(&self, level: usize) -> usize {
        if level == 0 {
            self.base
        } else {
            self.enc_ch(level) / 2
        }
    }

    fn dec_in(&self, level: usize) -> usize {
        let prev = if level + 1 == self.depth {
            self.enc_ch(self.depth - 1)
        } else {
            self.dec_out(level + 1)
        };
        prev + self.enc_ch(level)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                depth: self.depth,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    cin: usize,
    cout: usize,
    k: usize,
}

impl Conv {
    fn new<F: Real>(ps: &mut ParamSet<F>, name: &str, cin: usize, cout: usize, k: usize, gain: f64, seed: u64) -> Self {
        let w = ps.push_gaussian(&format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k, gain, seed);
        let b = ps.push(format!("{name}.bias"), vec![cout], vec![F::zero(); cout]);
        Self { w, b, cin, cout, k }
    }

    fn forward<F: Real>(&self, ps: &ParamSet<F>, x: &Tensor<F>) -> Tensor<F> {
        debug_assert_eq!(x.c, self.cin);
        ops::conv2d(x, ps.get(self.w), Some(ps.get(self.b)), self.cout, self.k)
    }

    fn backward<F: Real>(
        &self,
        ps: &ParamSet<F>,
        input: &Tensor<F>,
        g: &Tensor<F>,
        grads: &mut Grads<F>,
        need_input: bool,
    ) -> Option<Tensor<F>> {
        let (gw, gb) = two_mut(&mut grads.tensors, self.w, self.b);
        ops::conv2d_backward(input, ps.get(self.w), self.cout, self.k, g, gw, Some(gb), need_input)
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    dec: Vec<Conv>,
    out: Conv,
}

/// Cached activations of one conv + ELU (+ dropout) stage.
#[derive(Debug, Clone)]
struct Stage<F> {
    input: Tensor<F>,
    out: Tensor<F>,
    mask: Option<Vec<F>>,
}

impl<F: Real> Stage<F> {
    fn output(&self) -> Tensor<F> {
        match &self.mask {
            Some(m) => {
                let mut t = self.out.clone();
                ops::mul_inplace(&mut t, m);
                t
            }
            None => self.out.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct HeadCache<F> {
    stages: Vec<Stage<F>>,
    out_input: Tensor<F>,
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    enc: Vec<Stage<F>>,
    bottleneck: Stage<F>,
    shared: Vec<Stage<F>>,
    heads: Vec<Option<HeadCache<F>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncDec<F> {
    spec: EncDecSpec,
    params: ParamSet<F>,
    enc: Vec<Conv>,
    bottleneck: Conv,
    shared: Vec<Conv>,
    heads: Vec<Head>,
}

impl<F: Real> EncDec<F> {
    /// Builds the network with scaled-Gaussian weights. `head_names` names
    /// the parameter prefix of each head and fixes the head count.
    pub fn new(spec: EncDecSpec, head_names: &[&str], out_gain: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        if head_names.len() != spec.heads {
            return Err(Error::InvalidArgument("one name per head required".into()));
        }
        let gain = 2f64.sqrt();
        let mut ps = ParamSet::new();
        let mut enc = Vec::with_capacity(spec.depth);
        for level in 0..spec.depth {
            let cin = if level == 0 { 1 } else { spec.enc_ch(level - 1) };
            enc.push(Conv::new(&mut ps, &format!("enc{level}"), cin, spec.enc_ch(level), 3, gain, seed));
        }
        let bch = spec.enc_ch(spec.depth - 1);
        let bottleneck = Conv::new(&mut ps, "bottleneck", bch, bch, 3, gain, seed);
        let shared = (spec.split..spec.depth)
            .rev()
            .map(|level| {
                Conv::new(&mut ps, &format!("dec{level}"), spec.dec_in(level), spec.dec_out(level), 3, gain, seed)
            })
            .collect();
        let heads = head_names
            .iter()
            .map(|name| {
                let dec = (0..spec.split)
                    .rev()
                    .map(|level| {
                        Conv::new(
                            &mut ps,
                            &format!("{name}.dec{level}"),
                            spec.dec_in(level),
                            spec.dec_out(level),
                            3,
                            gain,
                            seed,
                        )
                    })
                    .collect();
                let out = Conv::new(&mut ps, &format!("{name}.out"), spec.dec_out(0), 1, 1, out_gain, seed);
                Head { dec, out }
            })
            .collect();
        Ok(Self {
            spec,
            params: ps,
            enc,
            bottleneck,
            shared,
            heads,
        })
    }

    pub fn spec(&self) -> &EncDecSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// Replaces the parameters, which must have this network's layout.
    pub fn set_params(&mut self, params: ParamSet<F>) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::Checkpoint("parameter layout does not match architecture".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> EncDec<G> {
        EncDec {
            spec: self.spec,
            params: self.params.cast(),
            enc: self.enc.clone(),
            bottleneck: self.bottleneck,
            shared: self.shared.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Output conv bias of a head (index into the parameter set).
    pub fn head_out_bias(&self, head: usize) -> ParamId {
        self.heads[head].out.b
    }

    pub fn head_out_weight(&self, head: usize) -> ParamId {
        self.heads[head].out.w
    }

    fn stage(&self, conv: &Conv, input: Tensor<F>, dropout: &mut Option<(f64, rand_chacha::ChaCha8Rng)>) -> Stage<F> {
        let mut out = conv.forward(&self.params, &input);
        ops::elu_inplace(&mut out);
        let mask = dropout
            .as_mut()
            .filter(|(rate, _)| *rate > 0.0)
            .map(|(rate, rng)| ops::dropout_mask(out.data.len(), *rate, rng));
        Stage { input, out, mask }
    }

    /// Runs the network. `dropout_seed = Some(s)` samples dropout masks from
    /// seed `s`; `None` is the deterministic pass. Heads with `want[h] ==
    /// false` are skipped and return `None`.
    pub fn forward(&self, x: &Tensor<F>, dropout_seed: Option<u64>, want: &[bool]) -> Result<(Vec<Option<Tensor<F>>>, ForwardCache<F>)> {
        self.spec.check_input(x.h, x.w)?;
        assert_eq!(want.len(), self.heads.len(), "head selector length");
        let mut dropout = dropout_seed.map(|s| (self.spec.dropout_rate, seeds::rng(&[seeds::stream::DROPOUT, s])));
        let mut none = None;

        let mut enc = Vec::with_capacity(self.spec.depth);
        let mut cur = x.clone();
        for conv in &self.enc {
            let st = self.stage(conv, cur, &mut none);
            cur = ops::avg_pool2(&st.out);
            enc.push(st);
        }
        let bottleneck = self.stage(&self.bottleneck, cur, &mut none);
        let mut prev = bottleneck.output();

        let mut shared = Vec::with_capacity(self.shared.len());
        for (j, conv) in self.shared.iter().enumerate() {
            let level = self.spec.depth - 1 - j;
            let input = Tensor::concat(&ops::upsample2(&prev), &enc[level].out);
            let st = self.stage(conv, input, &mut dropout);
            prev = st.output();
            shared.push(st);
        }

        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for (head, &wanted) in self.heads.iter().zip(want) {
            if !wanted {
                outputs.push(None);
                heads.push(None);
                continue;
            }
            let mut hprev = prev.clone();
            let mut stages = Vec::with_capacity(head.dec.len());
            for (j, conv) in head.dec.iter().enumerate() {
                let level = self.spec.split - 1 - j;
                let input = Tensor::concat(&ops::upsample2(&hprev), &enc[level].out);
                let st = self.stage(conv, input, &mut dropout);
                hprev = st.output();
                stages.push(st);
            }
            outputs.push(Some(head.out.forward(&self.params, &hprev)));
            heads.push(Some(HeadCache {
                stages,
                out_input: hprev,
            }));
        }
        Ok((
            outputs,
            ForwardCache {
                enc,
                bottleneck,
                shared,
                heads,
            },
        ))
    }

    /// Backward through one conv stage; returns the gradient w.r.t. the
    /// stage input.
    fn stage_backward(&self, conv: &Conv, st: &Stage<F>, mut g: Tensor<F>, grads: &mut Grads<F>, need_input: bool) -> Option<Tensor<F>> {
        if let Some(m) = &st.mask {
            ops::mul_inplace(&mut g, m);
        }
        ops::elu_backward_inplace(&mut g, &st.out);
        conv.backward(&self.params, &st.input, &g, grads, need_input)
    }

    /// Accumulates parameter gradients given gradients of the raw head
    /// outputs. Heads with no gradient contribute nothing.
    pub fn backward(&self, cache: &ForwardCache<F>, head_grads: &[Option<Tensor<F>>], grads: &mut Grads<F>) {
        let depth = self.spec.depth;
        let mut enc_grad: Vec<Option<Tensor<F>>> = vec![None; depth];
        let add_to = |slot: &mut Option<Tensor<F>>, g: Tensor<F>| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };

        let mut split_grad: Option<Tensor<F>> = None;
        for ((head, hc), hg) in self.heads.iter().zip(&cache.heads).zip(head_grads) {
            let (Some(hc), Some(hg)) = (hc, hg) else {
                continue;
            };
            let mut g = head
                .out
                .backward(&self.params, &hc.out_input, hg, grads, true)
                .expect("input grad");
            for (j, (conv, st)) in head.dec.iter().zip(&hc.stages).enumerate().rev() {
                let level = self.spec.split - 1 - j;
                let gin = self.stage_backward(conv, st, g, grads, true).expect("input grad");
                let (gup, gskip) = gin.split(st.input.c - self.spec.enc_ch(level));
                add_to(&mut enc_grad[level], gskip);
                g = ops::upsample2_backward(&gup);
            }
            add_to(&mut split_grad, g);
        }
        let Some(mut g) = split_grad else {
            return;
        };

        for (j, (conv, st)) in self.shared.iter().zip(&cache.shared).enumerate().rev() {
            let level = depth - 1 - j;
            let gin = self.stage_backward(conv, st, g, grads, true).expect("input grad");
            let (gup, gskip) = gin.split(st.input.c - self.spec.enc_ch(level));
            add_to(&mut enc_grad[level], gskip);
            g = ops::upsample2_backward(&gup);
        }

        let gin = self
            .stage_backward(&self.bottleneck, &cache.bottleneck, g, grads, true)
            .expect("input grad");
        let mut from_below = Some(ops::avg_pool2_backward(&gin));
        for level in (0..depth).rev() {
            let mut g = from_below.take().expect("gradient from deeper level");
            if let Some(skip) = enc_grad[level].take() {
                g.add_assign(&skip);
            }
            let need_input = level > 0;
            let gin = self.stage_backward(&self.enc[level], &cache.enc[level], g, grads, need_input);
            if let Some(gin) = gin {
                from_below = Some(ops::avg_pool2_backward(&gin));
            }
        }
    }
}
