//! Experiment configuration files.
//!
//! The format is flat text, one `key.path = value` per line. Blank lines are
//! ignored and `#` starts a comment that runs to the end of the line. Lists
//! are comma separated. Keys not mentioned keep their defaults; a key may
//! appear only once. Every key that [`ExperimentConfig::to_text`] writes is
//! accepted back by [`ExperimentConfig::parse`], so a resolved config read
//! from an artifact directory reproduces the run.
//!
//! ```text
//! # short run
//! seeds = 0, 1, 2
//! methods = no_uda, ac_gst
//! train.rounds = 4
//! task.target_shift.noise_sigma = 5
//! sweep.beta = 1.0, 1.25, 1.5
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, IoContext, Result};
use crate::masks::MaskKind;
use crate::synth::{ShiftConfig, TaskSpec};
use crate::trainer::{TrainConfig, UncertaintyMode};

/// The named method variants an experiment can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    NoUda,
    BmGstA,
    BmGstE,
    BmGst,
    AcGstC,
    AcGstNoAttn,
    AcGst,
    TargetSupervised,
}

impl Method {
    /// Report order: baseline, ablations, full method, then the upper bound.
    pub const ALL: [Method; 8] = [
        Method::NoUda,
        Method::BmGstA,
        Method::BmGstE,
        Method::BmGst,
        Method::AcGstC,
        Method::AcGstNoAttn,
        Method::AcGst,
        Method::TargetSupervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NoUda => "no_uda",
            Method::BmGstA => "bm_gst_a",
            Method::BmGstE => "bm_gst_e",
            Method::BmGst => "bm_gst",
            Method::AcGstC => "ac_gst_c",
            Method::AcGstNoAttn => "ac_gst_no_attn",
            Method::AcGst => "ac_gst",
            Method::TargetSupervised => "target_supervised",
        }
    }

    /// Whether the method runs self-training rounds on the target.
    pub fn adapts(self) -> bool {
        !matches!(self, Method::NoUda | Method::TargetSupervised)
    }

    /// The training settings this method uses, derived from `base`.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let (mask_mode, attentive_base, uncertainty_mode) = match self {
            Method::BmGstA => (MaskKind::Binary, base.attentive_base, UncertaintyMode::AleatoricOnly),
            Method::BmGstE => (MaskKind::Binary, base.attentive_base, UncertaintyMode::EpistemicOnly),
            Method::BmGst => (MaskKind::Binary, base.attentive_base, UncertaintyMode::Both),
            Method::AcGstC => (MaskKind::Attentive, MaskKind::Binary, UncertaintyMode::Both),
            Method::AcGstNoAttn => (MaskKind::Continuous, base.attentive_base, UncertaintyMode::Both),
            Method::AcGst => (MaskKind::Attentive, MaskKind::Continuous, UncertaintyMode::Both),
            Method::NoUda | Method::TargetSupervised => (base.mask_mode, base.attentive_base, base.uncertainty_mode),
        };
        TrainConfig {
            mask_mode,
            attentive_base,
            uncertainty_mode,
            ..base.clone()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// β values run for the full method in addition to its main cell.
    pub sweep_beta: Vec<f64>,
    /// Ensemble sizes run for the full method in addition to its main cell.
    pub sweep_k: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            sweep_beta: Vec::new(),
            sweep_k: Vec::new(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn parse_one<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_one(v.trim())).collect()
}

fn parse_enum<T: FromStr<Err = Error>>(value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|e| e.to_string())
}

fn shift_entries(prefix: &str, s: &ShiftConfig, out: &mut Vec<(String, String)>) {
    for (k, v) in [
        ("tag_period", s.tag_period.to_string()),
        ("tag_contrast", s.tag_contrast.to_string()),
        ("gamma", s.gamma.to_string()),
        ("brightness_offset", s.brightness_offset.to_string()),
        ("noise_sigma", s.noise_sigma.to_string()),
        ("background_level", s.background_level.to_string()),
        ("seed", s.seed.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

fn set_shift(s: &mut ShiftConfig, field: &str, value: &str) -> std::result::Result<(), String> {
    match field {
        "tag_period" => s.tag_period = parse_one(value)?,
        "tag_contrast" => s.tag_contrast = parse_one(value)?,
        "gamma" => s.gamma = parse_one(value)?,
        "brightness_offset" => s.brightness_offset = parse_one(value)?,
        "noise_sigma" => s.noise_sigma = parse_one(value)?,
        "background_level" => s.background_level = parse_one(value)?,
        "seed" => s.seed = parse_one(value)?,
        _ => return Err(format!("unknown shift field {field:?}")),
    }
    Ok(())
}

impl ExperimentConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let p = &self.task.phantom;
        let mut out: Vec<(String, String)> = vec![
            ("output_dir".into(), self.output_dir.display().to_string()),
            ("seeds".into(), join(&self.seeds)),
            ("methods".into(), join(&self.methods)),
            ("sweep.beta".into(), join(&self.sweep_beta)),
            ("sweep.k".into(), join(&self.sweep_k)),
            ("task.phantom.height".into(), p.height.to_string()),
            ("task.phantom.width".into(), p.width.to_string()),
            ("task.phantom.n_blobs".into(), p.n_blobs.to_string()),
            ("task.phantom.blob_scale".into(), p.blob_scale.to_string()),
            ("task.phantom.seed".into(), p.seed.to_string()),
            ("task.n_source_subjects".into(), self.task.n_source_subjects.to_string()),
            ("task.source_slices".into(), self.task.source_slices.to_string()),
            ("task.n_target_subjects".into(), self.task.n_target_subjects.to_string()),
            ("task.target_slices".into(), self.task.target_slices.to_string()),
        ];
        shift_entries("task.source_shift", &self.task.source_shift, &mut out);
        shift_entries("task.target_shift", &self.task.target_shift, &mut out);
        for (k, v) in [
            ("learning_rate", t.learning_rate.to_string()),
            ("momentum_beta1", t.momentum_beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("k", t.k.to_string()),
            ("beta", t.beta.to_string()),
            ("mask_mode", t.mask_mode.to_string()),
            ("attentive_base", t.attentive_base.to_string()),
            ("uncertainty_mode", t.uncertainty_mode.as_str().to_string()),
            ("rounds", t.rounds.to_string()),
            ("iters_per_round", t.iters_per_round.to_string()),
            ("pretrain_epochs", t.pretrain_epochs.to_string()),
            ("rho_start", t.rho_start.to_string()),
            ("rho_end", t.rho_end.to_string()),
            ("rho_step", t.rho_step.as_str().to_string()),
            ("mask_outside_norm", t.mask_outside_norm.to_string()),
            ("attention_floor", t.attention_floor.to_string()),
            ("pretrain_variance_head", t.pretrain_variance_head.to_string()),
            ("monitor_holdout", t.monitor_holdout.to_string()),
            ("loss_unit_span", t.loss_unit_span.to_string()),
            ("translator.depth", t.translator.depth.to_string()),
            ("translator.base_channels", t.translator.base_channels.to_string()),
            ("translator.dropout_rate", t.translator.dropout_rate.to_string()),
            ("attention.depth", t.attention.depth.to_string()),
            ("attention.base_channels", t.attention.base_channels.to_string()),
        ] {
            out.push((format!("train.{k}"), v));
        }
        out
    }

    /// Assigns one key. The training seed is not a key: runs take their seeds
    /// from the `seeds` list.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        if let Some(field) = key.strip_prefix("task.source_shift.") {
            return set_shift(&mut self.task.source_shift, field, value);
        }
        if let Some(field) = key.strip_prefix("task.target_shift.") {
            return set_shift(&mut self.task.target_shift, field, value);
        }
        let t = &mut self.train;
        let p = &mut self.task.phantom;
        match key {
            "output_dir" => {
                if value.is_empty() {
                    return Err("output_dir must not be empty".into());
                }
                self.output_dir = PathBuf::from(value);
            }
            "seeds" => self.seeds = parse_list(value)?,
            "methods" => {
                self.methods = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse_enum(v.trim())).collect::<std::result::Result<_, _>>()?
                }
            }
            "sweep.beta" => self.sweep_beta = parse_list(value)?,
            "sweep.k" => self.sweep_k = parse_list(value)?,
            "task.phantom.height" => p.height = parse_one(value)?,
            "task.phantom.width" => p.width = parse_one(value)?,
            "task.phantom.n_blobs" => p.n_blobs = parse_one(value)?,
            "task.phantom.blob_scale" => p.blob_scale = parse_one(value)?,
            "task.phantom.seed" => p.seed = parse_one(value)?,
            "task.n_source_subjects" => self.task.n_source_subjects = parse_one(value)?,
            "task.source_slices" => self.task.source_slices = parse_one(value)?,
            "task.n_target_subjects" => self.task.n_target_subjects = parse_one(value)?,
            "task.target_slices" => self.task.target_slices = parse_one(value)?,
            "train.learning_rate" => t.learning_rate = parse_one(value)?,
            "train.momentum_beta1" => t.momentum_beta1 = parse_one(value)?,
            "train.beta2" => t.beta2 = parse_one(value)?,
            "train.batch_size" => t.batch_size = parse_one(value)?,
            "train.k" => t.k = parse_one(value)?,
            "train.beta" => t.beta = parse_one(value)?,
            "train.mask_mode" => t.mask_mode = parse_enum(value)?,
            "train.attentive_base" => t.attentive_base = parse_enum(value)?,
            "train.uncertainty_mode" => t.uncertainty_mode = parse_enum(value)?,
            "train.rounds" => t.rounds = parse_one(value)?,
            "train.iters_per_round" => t.iters_per_round = parse_one(value)?,
            "train.pretrain_epochs" => t.pretrain_epochs = parse_one(value)?,
            "train.rho_start" => t.rho_start = parse_one(value)?,
            "train.rho_end" => t.rho_end = parse_one(value)?,
            "train.rho_step" => t.rho_step = parse_enum(value)?,
            "train.mask_outside_norm" => t.mask_outside_norm = parse_one(value)?,
            "train.attention_floor" => t.attention_floor = parse_one(value)?,
            "train.pretrain_variance_head" => t.pretrain_variance_head = parse_one(value)?,
            "train.monitor_holdout" => t.monitor_holdout = parse_one(value)?,
            "train.loss_unit_span" => t.loss_unit_span = parse_one(value)?,
            "train.translator.depth" => t.translator.depth = parse_one(value)?,
            "train.translator.base_channels" => t.translator.base_channels = parse_one(value)?,
            "train.translator.dropout_rate" => t.translator.dropout_rate = parse_one(value)?,
            "train.attention.depth" => t.attention.depth = parse_one(value)?,
            "train.attention.base_channels" => t.attention.base_channels = parse_one(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found {content:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(err("missing key before `=`".into()));
            }
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(err(format!("key {key:?} already set on line {first}")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
            seen.push((key.to_string(), line));
        }
        cfg.validate().map_err(|e| Error::Config {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::InvalidArgument(format!("method {m} listed twice")));
            }
        }
        if self.sweep_beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad("sweep.beta values must be positive");
        }
        if self.sweep_k.iter().any(|&k| k < 2) {
            return bad("sweep.k values must be at least 2");
        }
        for shift in [&self.task.source_shift, &self.task.target_shift] {
            shift.validate()?;
        }
        if self.task.n_source_subjects == 0 || self.task.source_slices == 0 || self.task.n_target_subjects == 0 || self.task.target_slices == 0 {
            return bad("subject and slice counts must be positive");
        }
        self.train.validate()
    }

    /// The fully resolved config, defaults included.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved gstuda experiment config\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).at(path)
    }
}
