//! Source pretraining and the alternating self-training loop.
//!
//! A round is step 1 (MC-dropout pseudo labels, uncertainty and base masks
//! for every target slice, with frozen weights) followed by step 2
//! (`iters_per_round` optimizer steps on source MSE plus the masked target
//! loss). Pseudo labels and base masks are fixed during step 2. With
//! attentive masks the attention factor is evaluated live, `m = a(θ) · m′`,
//! so the attention network is trained by the same loss as the translator.
//!
//! Losses are evaluated in normalized intensity units (the nominal range
//! mapped to `[0, 1]`), the units of the variance head and of the
//! uncertainty maps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{AttentionArch, AttentionModel};
use crate::data::{batch_indices, Dataset, ImageGrid, TargetInputs};
use crate::error::{Error, IoContext, Result};
use crate::loss::{self, LossBreakdown, TargetLossOptions};
use crate::masks::{self, MaskKind, ReliabilityMask, RhoSchedule};
use crate::nn::{write_checkpoint, Adam, FlushDenormals, Grads, Real};
use crate::seeds;
use crate::translator::{TranslatorArch, TranslatorModel};
use crate::uncertainty;

/// Seed stream for the fixed monitor-slice ensemble.
const MONITOR_STREAM: u64 = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyMode {
    Both,
    EpistemicOnly,
    AleatoricOnly,
}

impl UncertaintyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintyMode::Both => "both",
            UncertaintyMode::EpistemicOnly => "epistemic_only",
            UncertaintyMode::AleatoricOnly => "aleatoric_only",
        }
    }
}

impl fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UncertaintyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "epistemic_only" => Ok(Self::EpistemicOnly),
            "aleatoric_only" => Ok(Self::AleatoricOnly),
            _ => Err(Error::InvalidArgument(format!("unknown uncertainty mode {s:?}"))),
        }
    }
}

/// When the binary-mask portion ρ is read off its schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoStep {
    /// Schedule indexed by the global iteration count at mask generation,
    /// over `rounds × iters_per_round` iterations.
    Iteration,
    /// Schedule indexed by round, reaching the end value in the last round.
    Round,
}

impl RhoStep {
    pub fn as_str(self) -> &'static str {
        match self {
            RhoStep::Iteration => "iteration",
            RhoStep::Round => "round",
        }
    }
}

impl FromStr for RhoStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iteration" => Ok(Self::Iteration),
            "round" => Ok(Self::Round),
            _ => Err(Error::InvalidArgument(format!("unknown rho step {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum_beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub k: usize,
    pub beta: f64,
    pub mask_mode: MaskKind,
    /// Base mask multiplied by attention when `mask_mode` is attentive:
    /// continuous for the full method, binary for the restricted variant.
    pub attentive_base: MaskKind,
    pub uncertainty_mode: UncertaintyMode,
    pub rounds: usize,
    pub iters_per_round: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub rho_start: f64,
    pub rho_end: f64,
    pub rho_step: RhoStep,
    pub mask_outside_norm: bool,
    /// Weight λ of the attention mean-floor penalty; 0 disables it.
    pub attention_floor: f64,
    /// Also fit the variance head on source data during pretraining, with the
    /// residual treated as a constant so the mean head sees plain MSE.
    pub pretrain_variance_head: bool,
    /// Keep the monitor slice out of adaptation batches.
    pub monitor_holdout: bool,
    /// Width the nominal intensity range is mapped to inside the losses and
    /// the variance head; uncertainty maps are always reported with the range
    /// mapped to `[0, 1]`.
    pub loss_unit_span: f64,
    pub translator: TranslatorArch,
    pub attention: AttentionArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum_beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            k: 20,
            beta: 1.0,
            mask_mode: MaskKind::Attentive,
            attentive_base: MaskKind::Continuous,
            uncertainty_mode: UncertaintyMode::Both,
            rounds: 10,
            iters_per_round: 50,
            pretrain_epochs: 30,
            seed: 0,
            rho_start: RhoSchedule::DEFAULT_START,
            rho_end: RhoSchedule::DEFAULT_END,
            rho_step: RhoStep::Iteration,
            mask_outside_norm: false,
            attention_floor: 1.0,
            pretrain_variance_head: true,
            monitor_holdout: true,
            loss_unit_span: 1.0,
            translator: TranslatorArch::default(),
            attention: AttentionArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum_beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moment coefficients must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k < 2 {
            return bad(format!("K must be at least 2, got {}", self.k));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.iters_per_round == 0 {
            return bad("iters_per_round must be at least 1".into());
        }
        if self.attentive_base == MaskKind::Attentive {
            return bad("attentive_base must be binary or continuous".into());
        }
        if !(self.attention_floor.is_finite() && self.attention_floor >= 0.0) {
            return bad("attention_floor must be nonnegative".into());
        }
        if !(self.loss_unit_span.is_finite() && self.loss_unit_span > 0.0) {
            return bad("loss_unit_span must be positive".into());
        }
        RhoSchedule::new(self.rho_start, self.rho_end, 1)?;
        Ok(())
    }

    pub fn uses_attention(&self) -> bool {
        self.mask_mode == MaskKind::Attentive
    }

    pub fn total_iters(&self) -> u64 {
        (self.rounds * self.iters_per_round) as u64
    }

    pub fn loss_options(&self) -> TargetLossOptions {
        TargetLossOptions {
            beta: self.beta,
            mask_outside_norm: self.mask_outside_norm,
        }
    }

    /// ρ used by the binary masks generated at the start of `round`
    /// (1-based), when `iter` optimizer steps have already been taken.
    pub fn rho_for(&self, round: usize, iter: u64) -> Result<f64> {
        match self.rho_step {
            RhoStep::Iteration => Ok(RhoSchedule::new(self.rho_start, self.rho_end, self.total_iters().max(1))?.rho_at(iter)),
            RhoStep::Round => {
                let horizon = self.rounds.saturating_sub(1).max(1) as u64;
                Ok(RhoSchedule::new(self.rho_start, self.rho_end, horizon)?.rho_at(round.saturating_sub(1) as u64))
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: LossBreakdown,
    pub rho: f64,
    pub mean_u: f64,
}

pub const LOG_HEADER: &str = "iter,source_mse,target_data_term,target_logvar_term,total,rho,mean_u";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.loss.source_mse,
            self.loss.target_data_term,
            self.loss.target_logvar_term,
            self.loss.total,
            self.rho,
            self.mean_u
        )
    }
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    fs::write(path, text).at(path)
}

/// Cycles through shuffled epochs of an index pool.
#[derive(Debug, Clone)]
struct BatchStream {
    pool: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Vec<usize>>,
    next: usize,
}

impl BatchStream {
    fn new(pool: Vec<usize>, batch_size: usize, seed: u64) -> Self {
        Self {
            pool,
            batch_size,
            seed,
            epoch: 0,
            batches: Vec::new(),
            next: 0,
        }
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.next >= self.batches.len() {
            self.batches = batch_indices(self.pool.len(), self.batch_size, self.seed, self.epoch)?;
            self.epoch += 1;
            self.next = 0;
        }
        let b = self.batches[self.next].iter().map(|&i| self.pool[i]).collect();
        self.next += 1;
        Ok(b)
    }
}

/// Copy of `g` with its nominal range mapped to `[0, s]`.
fn unit(g: &ImageGrid, s: f64) -> Result<ImageGrid> {
    let (lo, span) = (g.range_lo(), g.span());
    g.map(0.0, s, |v| s * (v - lo) / span)
}

/// A target slice with its fixed pseudo label and base mask weights.
#[derive(Debug, Clone, Copy)]
pub struct TargetItem<'a> {
    pub input: &'a ImageGrid,
    pub pseudo: &'a ImageGrid,
    pub base_mask: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub target: TargetLossOptions,
    pub attention_floor: f64,
    /// Width the nominal intensity range is mapped to inside the losses.
    pub loss_unit_span: f64,
}

#[derive(Debug, Clone)]
pub struct BatchGrads<F> {
    pub loss: LossBreakdown,
    pub translator: Grads<F>,
    pub attention: Option<Grads<F>>,
}

/// Combined objective over one source batch and one target batch, with
/// gradients for both networks. Each term is averaged over its own batch.
/// With `attention = None` the base masks are used as they are.
pub fn gst_batch<F: Real>(
    translator: &TranslatorModel<F>,
    attention: Option<&AttentionModel<F>>,
    source: &[(&ImageGrid, &ImageGrid)],
    target: &[TargetItem<'_>],
    opts: BatchOptions,
    dropout_seed: u64,
) -> Result<BatchGrads<F>> {
    let s = opts.loss_unit_span;
    let mut tg = translator.zero_grads();
    let mut ag = attention.map(|a| a.zero_grads());
    let mut source_mse = None;
    if !source.is_empty() {
        let scale = 1.0 / source.len() as f64;
        let mut sum = 0.0;
        for (i, (x, y)) in source.iter().enumerate() {
            let fwd = translator.forward_train(x, seeds::derive(&[dropout_seed, 0, i as u64]), false)?;
            let (mse, mut d) = loss::source_loss_grad(&unit(&fwd.mean, s)?, &unit(y, s)?)?;
            let k = scale * s / fwd.mean.span();
            d.iter_mut().for_each(|v| *v *= k);
            translator.backward(&fwd, &d, None, &mut tg);
            sum += mse;
        }
        source_mse = Some(sum * scale);
    }

    let mut target_terms = None;
    let mut floor = 0.0;
    if !target.is_empty() {
        let scale = 1.0 / target.len() as f64;
        let (mut data, mut logvar) = (0.0, 0.0);
        for (j, item) in target.iter().enumerate() {
            let fwd = translator.forward_train(item.input, seeds::derive(&[dropout_seed, 1, j as u64]), true)?;
            let logvar_map = fwd.logvar.as_ref().expect("logvar requested");
            let att = attention.map(|a| a.forward_train(item.input)).transpose()?;
            let mask: Vec<f64> = match &att {
                Some(af) => af.attention.values().iter().zip(item.base_mask).map(|(a, m)| a * m).collect(),
                None => item.base_mask.to_vec(),
            };
            let mut t = loss::target_loss_grad(&unit(&fwd.mean, s)?, logvar_map, &unit(item.pseudo, s)?, &mask, opts.target)?;
            let k = scale * s / fwd.mean.span();
            t.d_pred.iter_mut().for_each(|v| *v *= k);
            t.d_logvar.iter_mut().for_each(|v| *v *= scale);
            translator.backward(&fwd, &t.d_pred, Some(&t.d_logvar), &mut tg);
            if let (Some(af), Some(model), Some(grads)) = (&att, attention, ag.as_mut()) {
                let mut d_a: Vec<f64> = t.d_mask.iter().zip(item.base_mask).map(|(g, m)| g * m * scale).collect();
                if opts.attention_floor > 0.0 {
                    let (value, g) = loss::attention_floor(af.attention.values(), opts.attention_floor);
                    floor += value * scale;
                    d_a.iter_mut().zip(&g).for_each(|(d, g)| *d += g * scale);
                }
                model.backward(af, &d_a, grads);
            }
            data += t.data_term * scale;
            logvar += t.logvar_term * scale;
        }
        target_terms = Some((data, logvar));
    }

    let mut breakdown = loss::gst_total(source_mse, target_terms, opts.target.beta)?;
    breakdown.attention_floor = floor;
    breakdown.total += floor;
    if !tg.all_finite() || !ag.as_ref().is_none_or(|g| g.all_finite()) {
        return Err(Error::NonFinite {
            term: "gradient".into(),
            pixel: 0,
        });
    }
    Ok(BatchGrads {
        loss: breakdown,
        translator: tg,
        attention: ag,
    })
}

fn write_models(path: &Path, translator: &TranslatorModel<f32>, attention: Option<&AttentionModel<f32>>) -> Result<()> {
    let mut nets = vec![translator.to_stored()];
    if let Some(a) = attention {
        nets.push(a.to_stored());
    }
    write_checkpoint(path, &nets)
}

fn diverged(stage: &str, iter: usize, err: Error, out: Option<&Path>, good: &TranslatorModel<f32>, attn: Option<&AttentionModel<f32>>) -> Error {
    if let Some(dir) = out {
        let path = dir.join("last_good.ckpt");
        if let Err(e) = write_models(&path, good, attn) {
            log::error!("could not save last good checkpoint: {e}");
        }
    }
    Error::Diverged {
        stage: stage.into(),
        iter,
        reason: err.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainRow {
    pub epoch: usize,
    pub source_mse: f64,
    /// Mean heteroscedastic loss of the variance head on source (0 if off).
    pub variance_nll: f64,
}

/// Supervised training on the paired source set with dropout active. Writes
/// `pretrain_log.csv` and `pretrain.ckpt` into `out` when given.
pub fn pretrain(model: &mut TranslatorModel<f32>, source: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<Vec<PretrainRow>> {
    cfg.validate()?;
    let _ftz = FlushDenormals::new();
    let pairs = source
        .paired()
        .ok_or_else(|| Error::InvalidDataset("pretraining needs a paired source dataset".into()))?;
    model.set_dropout_active(true);
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.momentum_beta1, cfg.beta2);
    let opts = cfg.loss_options();
    let s = cfg.loss_unit_span;
    let mut rows = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.pretrain_epochs {
        let (mut mse_sum, mut nll_sum, mut count) = (0.0, 0.0, 0usize);
        for batch in source.batch_iter(cfg.batch_size, seeds::derive(&[cfg.seed, epoch as u64]))? {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = model.zero_grads();
            for (slot, &i) in batch.iter().enumerate() {
                let pair = &pairs[i];
                let seed = seeds::derive(&[seeds::stream::DROPOUT, cfg.seed, step, slot as u64]);
                let fwd = model.forward_train(pair.input(), seed, cfg.pretrain_variance_head)?;
                let (pred, label) = (unit(&fwd.mean, s)?, unit(pair.target(), s)?);
                let (mse, mut d) = loss::source_loss_grad(&pred, &label)
                    .map_err(|e| diverged("pretrain", step as usize, e, out, model, None))?;
                let k = scale * s / fwd.mean.span();
                d.iter_mut().for_each(|v| *v *= k);
                let mut d_logvar = None;
                if let Some(lv) = &fwd.logvar {
                    let ones = vec![1.0; d.len()];
                    let mut t = loss::target_loss_grad(&pred, lv, &label, &ones, opts)?;
                    t.d_logvar.iter_mut().for_each(|v| *v *= scale);
                    nll_sum += t.value();
                    d_logvar = Some(t.d_logvar);
                }
                model.backward(&fwd, &d, d_logvar.as_deref(), &mut grads);
                mse_sum += mse;
                count += 1;
            }
            if !grads.all_finite() {
                let err = Error::NonFinite {
                    term: "gradient".into(),
                    pixel: 0,
                };
                return Err(diverged("pretrain", step as usize, err, out, model, None));
            }
            adam.step(model.params_mut(), &grads);
            step += 1;
        }
        let row = PretrainRow {
            epoch,
            source_mse: mse_sum / count as f64,
            variance_nll: nll_sum / count as f64,
        };
        log::debug!("pretrain epoch {epoch}: source mse {:.3}", row.source_mse);
        rows.push(row);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).at(dir)?;
        let mut text = String::from("epoch,source_mse,variance_nll\n");
        for r in &rows {
            text.push_str(&format!("{},{},{}\n", r.epoch, r.source_mse, r.variance_nll));
        }
        let path = dir.join("pretrain_log.csv");
        fs::write(&path, text).at(&path)?;
        model.save(&dir.join("pretrain.ckpt"))?;
    }
    Ok(rows)
}

/// Per-round uncertainty on the monitor slice (round 0 is the pretrained
/// model).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundUncertainty {
    pub round: usize,
    pub mean_total: f64,
    pub mean_epistemic: f64,
    pub mean_aleatoric: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptationState {
    pub round: usize,
    pub iter: u64,
    /// Target slice indices that take part in adaptation.
    pub train_indices: Vec<usize>,
    pub monitor_index: usize,
    /// Pseudo labels, indexed like the target dataset (monitor excluded when
    /// held out).
    pub pseudo_labels: Vec<Option<ImageGrid>>,
    /// Base reliability masks, before any attention factor.
    pub masks: Vec<Option<ReliabilityMask>>,
    pub rho: f64,
    /// Mean total uncertainty (as used by the masks) over the adaptation slices.
    pub mean_u: f64,
    pub translator_opt: Adam<f32>,
    pub attention_opt: Option<Adam<f32>>,
    pub history: Vec<LogRow>,
    pub uncertainty: Vec<RoundUncertainty>,
    source_stream: BatchStream,
    target_stream: BatchStream,
}

impl AdaptationState {
    pub fn new(translator: &TranslatorModel<f32>, attention: Option<&AttentionModel<f32>>, source_len: usize, target_len: usize, cfg: &TrainConfig) -> Result<Self> {
        if source_len == 0 || target_len == 0 {
            return Err(Error::EmptyDataset);
        }
        let monitor_index = target_len / 2;
        let train_indices: Vec<usize> = (0..target_len)
            .filter(|&i| !(cfg.monitor_holdout && target_len > 1 && i == monitor_index))
            .collect();
        Ok(Self {
            round: 0,
            iter: 0,
            pseudo_labels: vec![None; target_len],
            masks: vec![None; target_len],
            rho: cfg.rho_start,
            mean_u: 0.0,
            translator_opt: Adam::new(translator.params(), cfg.learning_rate, cfg.momentum_beta1, cfg.beta2),
            attention_opt: attention.map(|a| Adam::new(a.params(), cfg.learning_rate, cfg.momentum_beta1, cfg.beta2)),
            history: Vec::new(),
            uncertainty: Vec::new(),
            source_stream: BatchStream::new((0..source_len).collect(), cfg.batch_size, seeds::derive(&[cfg.seed, seeds::stream::BATCH, 0])),
            target_stream: BatchStream::new(train_indices.clone(), cfg.batch_size, seeds::derive(&[cfg.seed, seeds::stream::BATCH, 1])),
            train_indices,
            monitor_index,
        })
    }

    /// The masks the loss sees, with the attention factor applied when given.
    pub fn effective_mask(&self, index: usize, attention: Option<&ImageGrid>) -> Result<Option<ReliabilityMask>> {
        let Some(base) = &self.masks[index] else {
            return Ok(None);
        };
        match (attention, base.kind) {
            (None, _) => Ok(Some(base.clone())),
            (Some(a), MaskKind::Binary) => masks::attentive_binary_mask(base, a).map(Some),
            (Some(a), _) => masks::attentive_mask(base, a).map(Some),
        }
    }
}

fn combine(maps: &uncertainty::UncertaintyMaps, mode: UncertaintyMode) -> Result<ImageGrid> {
    match mode {
        UncertaintyMode::Both => Ok(maps.total.clone()),
        UncertaintyMode::EpistemicOnly => {
            let zero = maps.aleatoric.map(0.0, 1.0, |_| 0.0)?;
            Ok(uncertainty::total(&maps.epistemic, &zero, maps.mean_prediction.clone())?.total)
        }
        UncertaintyMode::AleatoricOnly => {
            let zero = maps.epistemic.map(0.0, 1.0, |_| 0.0)?;
            Ok(uncertainty::total(&zero, &maps.aleatoric, maps.mean_prediction.clone())?.total)
        }
    }
}

/// Step 1: pseudo labels and base masks for every adaptation slice, from `K`
/// MC-dropout passes of the frozen translator.
pub fn step1_generate(model: &TranslatorModel<f32>, target: &TargetInputs<'_>, cfg: &TrainConfig, state: &mut AdaptationState, round: usize) -> Result<()> {
    let rho = cfg.rho_for(round, state.iter)?;
    let base_kind = if cfg.mask_mode == MaskKind::Attentive { cfg.attentive_base } else { cfg.mask_mode };
    let mut u_sum = 0.0;
    let mut pseudo = vec![None; target.len()];
    let mut new_masks = vec![None; target.len()];
    for &i in &state.train_indices {
        let seed = seeds::derive(&[cfg.seed, seeds::stream::MC, round as u64, i as u64]);
        let maps = uncertainty::estimate(model, target.get(i), cfg.k, seed, cfg.loss_unit_span)?;
        let u = combine(&maps, cfg.uncertainty_mode)?;
        u_sum += u.mean();
        new_masks[i] = Some(match base_kind {
            MaskKind::Binary => masks::binary_mask(&u, rho)?,
            _ => masks::continuous_mask(&u)?,
        });
        pseudo[i] = Some(maps.mean_prediction);
    }
    state.pseudo_labels = pseudo;
    state.masks = new_masks;
    state.rho = rho;
    state.mean_u = u_sum / state.train_indices.len() as f64;
    state.round = round;
    Ok(())
}

/// Step 2: `iters_per_round` joint updates of the translator (dropout off)
/// and, with attentive masks, the attention network.
pub fn step2_retrain(
    model: &mut TranslatorModel<f32>,
    mut attention: Option<&mut AttentionModel<f32>>,
    source: &Dataset,
    target: &TargetInputs<'_>,
    state: &mut AdaptationState,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<()> {
    let pairs = source
        .paired()
        .ok_or_else(|| Error::InvalidDataset("adaptation needs a paired source dataset".into()))?;
    model.set_dropout_active(false);
    let opts = BatchOptions {
        target: cfg.loss_options(),
        attention_floor: cfg.attention_floor,
        loss_unit_span: cfg.loss_unit_span,
    };
    for _ in 0..cfg.iters_per_round {
        let src: Vec<_> = state
            .source_stream
            .next_batch()?
            .into_iter()
            .map(|i| (pairs[i].input(), pairs[i].target()))
            .collect();
        let tgt_idx = state.target_stream.next_batch()?;
        let mut items = Vec::with_capacity(tgt_idx.len());
        for &i in &tgt_idx {
            let (Some(pseudo), Some(mask)) = (&state.pseudo_labels[i], &state.masks[i]) else {
                return Err(Error::InvalidArgument(format!("target slice {i} has no pseudo label; run step 1 first")));
            };
            items.push(TargetItem {
                input: target.get(i),
                pseudo,
                base_mask: mask.weights.values(),
            });
        }
        let seed = seeds::derive(&[cfg.seed, seeds::stream::DROPOUT, state.iter]);
        let result = gst_batch(model, attention.as_deref(), &src, &items, opts, seed)
            .map_err(|e| diverged("adapt", state.iter as usize, e, out, model, attention.as_deref()))?;
        state.translator_opt.step(model.params_mut(), &result.translator);
        if let (Some(a), Some(g), Some(opt)) = (attention.as_deref_mut(), &result.attention, state.attention_opt.as_mut()) {
            opt.step(a.params_mut(), g);
        }
        state.history.push(LogRow {
            iter: state.iter,
            loss: result.loss,
            rho: state.rho,
            mean_u: state.mean_u,
        });
        state.iter += 1;
    }
    Ok(())
}

fn monitor_uncertainty(model: &TranslatorModel<f32>, x: &ImageGrid, cfg: &TrainConfig, round: usize) -> Result<RoundUncertainty> {
    let maps = uncertainty::estimate(model, x, cfg.k, seeds::derive(&[cfg.seed, MONITOR_STREAM]), cfg.loss_unit_span)?;
    Ok(RoundUncertainty {
        round,
        mean_total: maps.total.mean(),
        mean_epistemic: maps.epistemic.mean(),
        mean_aleatoric: maps.aleatoric.mean(),
    })
}

pub fn write_uncertainty_csv(path: &Path, rows: &[RoundUncertainty]) -> Result<()> {
    let mut text = String::from("round,mean_total,mean_epistemic,mean_aleatoric\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.round, r.mean_total, r.mean_epistemic, r.mean_aleatoric));
    }
    fs::write(path, text).at(path)
}

/// Runs `rounds` rounds of step 1 then step 2 on the unlabeled target
/// inputs. The monitor slice's uncertainty is measured with a fixed MC seed
/// before adaptation (round 0) and after every round. With `out`, writes
/// `round_<r>.ckpt`, `train_log.csv` and `uncertainty.csv`.
pub fn adapt(
    model: &mut TranslatorModel<f32>,
    mut attention: Option<&mut AttentionModel<f32>>,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<AdaptationState> {
    cfg.validate()?;
    if cfg.uses_attention() != attention.is_some() {
        return Err(Error::InvalidArgument(format!(
            "mask mode {} {} an attention model",
            cfg.mask_mode,
            if cfg.uses_attention() { "requires" } else { "does not use" }
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).at(dir)?;
    }
    let _ftz = FlushDenormals::new();
    let inputs = target.target_inputs();
    let mut state = AdaptationState::new(model, attention.as_deref(), source.len(), inputs.len(), cfg)?;
    let monitor = inputs.get(state.monitor_index);
    state.uncertainty.push(monitor_uncertainty(model, monitor, cfg, 0)?);
    for round in 1..=cfg.rounds {
        step1_generate(model, &inputs, cfg, &mut state, round)?;
        step2_retrain(model, attention.as_deref_mut(), source, &inputs, &mut state, cfg, out)?;
        let u = monitor_uncertainty(model, monitor, cfg, round)?;
        log::info!(
            "round {round}/{}: rho {:.3}, mean u {:.4}, monitor u {:.4}",
            cfg.rounds,
            state.rho,
            state.mean_u,
            u.mean_total
        );
        state.uncertainty.push(u);
        if let Some(dir) = out {
            write_models(&dir.join(format!("round_{round}.ckpt")), model, attention.as_deref())?;
        }
    }
    if let Some(dir) = out {
        write_log_csv(&dir.join("train_log.csv"), &state.history)?;
        write_uncertainty_csv(&dir.join("uncertainty.csv"), &state.uncertainty)?;
    }
    Ok(state)
}

/// Upper-bound reference: fine-tunes on source pairs plus the target inputs
/// with their hidden labels, for the same number of updates as adaptation.
pub fn finetune_supervised(model: &mut TranslatorModel<f32>, source: &Dataset, target: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let _ftz = FlushDenormals::new();
    let pairs = source
        .paired()
        .ok_or_else(|| Error::InvalidDataset("fine-tuning needs a paired source dataset".into()))?;
    let labelled: Vec<(&ImageGrid, &ImageGrid)> = target
        .unpaired()
        .ok_or_else(|| Error::InvalidDataset("expected a target dataset".into()))?
        .iter()
        .map(|s| {
            s.hidden_target()
                .map(|t| (s.input(), t))
                .ok_or_else(|| Error::InvalidDataset("target sample lacks a hidden label".into()))
        })
        .collect::<Result<_>>()?;
    model.set_dropout_active(false);
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.momentum_beta1, cfg.beta2);
    let mut src_stream = BatchStream::new((0..pairs.len()).collect(), cfg.batch_size, seeds::derive(&[cfg.seed, seeds::stream::BATCH, 0]));
    let mut tgt_stream = BatchStream::new((0..labelled.len()).collect(), cfg.batch_size, seeds::derive(&[cfg.seed, seeds::stream::BATCH, 1]));
    let opts = BatchOptions {
        target: cfg.loss_options(),
        attention_floor: 0.0,
        loss_unit_span: cfg.loss_unit_span,
    };
    let mut rows = Vec::new();
    for iter in 0..cfg.total_iters() {
        let src: Vec<_> = src_stream.next_batch()?.into_iter().map(|i| (pairs[i].input(), pairs[i].target())).collect();
        let tgt: Vec<_> = tgt_stream.next_batch()?.into_iter().map(|i| labelled[i]).collect();
        let seed = seeds::derive(&[cfg.seed, seeds::stream::DROPOUT, iter]);
        let a = gst_batch::<f32>(model, None, &src, &[], opts, seed).map_err(|e| diverged("supervised", iter as usize, e, out, model, None))?;
        let b = gst_batch::<f32>(model, None, &tgt, &[], opts, seeds::derive(&[seed, 1])).map_err(|e| diverged("supervised", iter as usize, e, out, model, None))?;
        let mut grads = a.translator;
        grads.add(&b.translator);
        adam.step(model.params_mut(), &grads);
        let mut loss = a.loss;
        loss.target_data_term = b.loss.source_mse;
        loss.total = loss.source_mse + loss.target_data_term;
        rows.push(LogRow {
            iter,
            loss,
            rho: 1.0,
            mean_u: 0.0,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).at(dir)?;
        write_log_csv(&dir.join("train_log.csv"), &rows)?;
        model.save(&dir.join("final.ckpt"))?;
    }
    Ok(rows)
}
