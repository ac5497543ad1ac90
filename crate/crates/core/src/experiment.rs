//! End-to-end experiments: dataset generation, the method × seed grid of
//! training cells, evaluation and report files.
//!
//! A run directory looks like this:
//!
//! ```text
//! config.txt                    resolved config
//! data/{source,target}/         generated datasets
//! data/shifts.json              both shift configs and any generator warnings
//! seed_<s>/pretrain/            shared pretraining per seed
//! seed_<s>/<cell>/              one directory per method or sweep point
//! report.csv report.md significance.csv sensitivity.csv failures.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attention::AttentionModel;
use crate::config::{ExperimentConfig, Method};
use crate::data::{self, Dataset, ImageGrid};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{self, Metric, MetricsReport, SampleMetrics};
use crate::nn::{read_checkpoint, write_checkpoint};
use crate::raster;
use crate::seeds;
use crate::synth::{self, TaskSpec};
use crate::trainer::{self, TrainConfig};
use crate::translator::TranslatorModel;
use crate::uncertainty;

pub const CONFIG_FILE: &str = "config.txt";
pub const MAPS_DIR: &str = "maps";
const MAPS_SEED_STREAM: u64 = 202;

/// One training cell: a method, possibly with one swept parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub beta: Option<f64>,
    pub k: Option<usize>,
}

impl Cell {
    fn plain(method: Method) -> Self {
        Self {
            method,
            beta: None,
            k: None,
        }
    }

    /// Row label in the report.
    pub fn label(&self) -> String {
        match (self.beta, self.k) {
            (Some(b), _) => format!("{}[beta={b}]", self.method),
            (_, Some(k)) => format!("{}[k={k}]", self.method),
            _ => self.method.to_string(),
        }
    }

    /// Directory name under the seed directory.
    pub fn dir_name(&self) -> String {
        match (self.beta, self.k) {
            (Some(b), _) => format!("{}-beta-{b}", self.method),
            (_, Some(k)) => format!("{}-k-{k}", self.method),
            _ => self.method.to_string(),
        }
    }

    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = self.method.train_config(base);
        cfg.seed = seed;
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        cfg
    }
}

/// The cells of one seed, in report order. Sweep points equal to the base
/// setting reuse the main full-method cell instead of running again.
pub fn plan_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Method::ALL
        .into_iter()
        .filter(|m| cfg.methods.contains(m))
        .map(Cell::plain)
        .collect();
    let full_listed = cfg.methods.contains(&Method::AcGst);
    for &b in &cfg.sweep_beta {
        if !(full_listed && b == cfg.train.beta) {
            cells.push(Cell {
                beta: Some(b),
                ..Cell::plain(Method::AcGst)
            });
        }
    }
    for &k in &cfg.sweep_k {
        if !(full_listed && k == cfg.train.k) {
            cells.push(Cell {
                k: Some(k),
                ..Cell::plain(Method::AcGst)
            });
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub label: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug)]
pub struct RunSummary {
    pub report: MetricsReport,
    pub failures: Vec<CellFailure>,
    pub out: PathBuf,
}

fn fingerprint(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
    }
}

/// Creates `dir`, refusing to reuse a nonempty one unless `force`. A forced
/// reuse clears the directory only if it was written by this tool.
fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir)? {
        if !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        if !dir.join(CONFIG_FILE).is_file() {
            return Err(Error::InvalidArgument(format!(
                "{} is not a gstuda output directory; not clearing it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::create_dir_all(dir).at(dir)
}

fn write_shift_manifest(task: &TaskSpec, warnings: &[String], path: &Path) -> Result<()> {
    let value = serde_json::json!({
        "source_shift": task.source_shift,
        "target_shift": task.target_shift,
        "warnings": warnings,
    });
    let text = serde_json::to_string_pretty(&value)? + "\n";
    fs::write(path, text).at(path)
}

fn generate_into(cfg: &ExperimentConfig, data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let (source, target) = synth::build_task(&cfg.task)?;
    data::write_dataset(&source, &data_dir.join("source"))?;
    data::write_dataset(&target, &data_dir.join("target"))?;
    write_shift_manifest(&cfg.task, target.warnings(), &data_dir.join("shifts.json"))?;
    Ok((source, target))
}

/// Writes the two datasets, the shift manifest and the resolved config into
/// `out`. Returns the manifest text.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<String> {
    cfg.validate()?;
    prepare_output(out, force)?;
    cfg.write_resolved(&out.join(CONFIG_FILE))?;
    generate_into(cfg, out)?;
    let manifest = out.join("shifts.json");
    fs::read_to_string(&manifest).at(&manifest)
}

fn write_grid(dir: &Path, name: &str, grid: &ImageGrid) -> Result<()> {
    data::store::write_f32_lossy(&dir.join(format!("{name}.bin")), grid)?;
    raster::save_gray(grid, &dir.join(format!("{name}.png")))
}

/// Monitor-slice previews for plotting: input, prediction, truth and the
/// uncertainty decomposition, plus the masks of a neighbouring adaptation
/// slice when available.
fn write_maps(
    dir: &Path,
    model: &TranslatorModel<f32>,
    attention: Option<&AttentionModel<f32>>,
    target: &Dataset,
    cfg: &TrainConfig,
    state: Option<&trainer::AdaptationState>,
) -> Result<()> {
    let maps_dir = dir.join(MAPS_DIR);
    fs::create_dir_all(&maps_dir).at(&maps_dir)?;
    let inputs = target.target_inputs();
    let monitor = inputs.len() / 2;
    let x = inputs.get(monitor);
    fs::write(maps_dir.join("dims.txt"), format!("{} {}\n", x.height(), x.width())).at(&maps_dir)?;
    write_grid(&maps_dir, "input", x)?;
    write_grid(&maps_dir, "pred", &model.predict(x)?)?;
    if let Some(truth) = target.unpaired().and_then(|u| u[monitor].hidden_target()) {
        write_grid(&maps_dir, "truth", truth)?;
    }
    let maps = uncertainty::estimate(model, x, cfg.k, seeds::derive(&[cfg.seed, MAPS_SEED_STREAM]), cfg.loss_unit_span)?;
    maps.dump(&maps_dir, "u")?;
    if let Some(st) = state {
        if let Some(&i) = st.train_indices.iter().find(|&&i| st.masks[i].is_some() && i + 1 >= monitor) {
            let att = attention.map(|a| a.attend(inputs.get(i))).transpose()?;
            if let Some(a) = &att {
                write_grid(&maps_dir, "attention", a)?;
            }
            if let Some(base) = &st.masks[i] {
                write_grid(&maps_dir, "mask_base", &base.weights)?;
            }
            if let Some(m) = st.effective_mask(i, att.as_ref())? {
                write_grid(&maps_dir, "mask", &m.weights)?;
            }
        }
    }
    Ok(())
}

fn write_slice_metrics(path: &Path, m: &SampleMetrics) -> Result<()> {
    let mut s = String::from("slice,l1,ssim,psnr\n");
    for i in 0..m.l1.len() {
        s.push_str(&format!("{i},{},{},{}\n", m.l1[i], m.ssim[i], m.psnr[i]));
    }
    fs::write(path, s).at(path)
}

fn cell_config(cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> ExperimentConfig {
    let train = cell.train_config(&cfg.train, seed);
    ExperimentConfig {
        train,
        methods: vec![cell.method],
        seeds: vec![seed],
        sweep_beta: Vec::new(),
        sweep_k: Vec::new(),
        ..cfg.clone()
    }
}

fn run_cell(cell: &Cell, pretrained: &TranslatorModel<f32>, source: &Dataset, target: &Dataset, cfg: &TrainConfig, dir: &Path) -> Result<SampleMetrics> {
    fs::create_dir_all(dir).at(dir)?;
    let mut model = pretrained.clone();
    match cell.method {
        Method::NoUda => {
            model.save(&dir.join("final.ckpt"))?;
            write_maps(dir, &model, None, target, cfg, None)?;
        }
        Method::TargetSupervised => {
            let rows = trainer::finetune_supervised(&mut model, source, target, cfg, Some(dir))?;
            trainer::write_log_csv(&dir.join("train_log.csv"), &rows)?;
            write_maps(dir, &model, None, target, cfg, None)?;
        }
        _ => {
            let mut attention = if cfg.uses_attention() {
                Some(AttentionModel::<f32>::new(cfg.attention, seeds::derive(&[seeds::stream::INIT_ATTENTION, cfg.seed]))?)
            } else {
                None
            };
            let state = trainer::adapt(&mut model, attention.as_mut(), source, target, cfg, Some(dir))?;
            let mut nets = vec![model.to_stored()];
            if let Some(a) = &attention {
                nets.push(a.to_stored());
            }
            write_checkpoint(&dir.join("final.ckpt"), &nets)?;
            write_maps(dir, &model, attention.as_ref(), target, cfg, Some(&state))?;
        }
    }
    let m = metrics::evaluate_model(&model, target)?;
    write_slice_metrics(&dir.join("metrics.csv"), &m)?;
    Ok(m)
}

fn failure(label: String, seed: u64, err: &Error) -> CellFailure {
    log::error!("cell {label} seed {seed} failed: {err}");
    CellFailure {
        label,
        seed,
        message: err.to_string(),
    }
}

fn failures_csv(failures: &[CellFailure]) -> String {
    let mut s = String::from("cell,seed,error\n");
    for f in failures {
        s.push_str(&format!("{},{},\"{}\"\n", f.label, f.seed, f.message.replace('"', "'")));
    }
    s
}

/// L1 of the full method against each swept β and K, main cell included.
pub fn sensitivity_csv(cfg: &ExperimentConfig, report: &MetricsReport) -> String {
    let mut s = String::from("param,value,method,l1_mean,l1_sd\n");
    let full = Method::AcGst.as_str();
    let mut row = |param: &str, value: String, label: String| {
        if let Some((m, sd)) = report.summary_value(&label, Metric::L1) {
            s.push_str(&format!("{param},{value},{label},{m:.6},{sd:.6}\n"));
        }
    };
    for &b in &cfg.sweep_beta {
        let cell = Cell { beta: Some(b), ..Cell::plain(Method::AcGst) };
        let label = if report.methods.contains(&cell.label()) { cell.label() } else { full.to_string() };
        row("beta", b.to_string(), label);
    }
    for &k in &cfg.sweep_k {
        let cell = Cell { k: Some(k), ..Cell::plain(Method::AcGst) };
        let label = if report.methods.contains(&cell.label()) { cell.label() } else { full.to_string() };
        row("k", k.to_string(), label);
    }
    s
}

fn write_reports(cfg: &ExperimentConfig, out: &Path, report: &MetricsReport, failures: &[CellFailure]) -> Result<()> {
    let write = |name: &str, text: String| {
        let path = out.join(name);
        fs::write(&path, text).at(&path)
    };
    write("report.csv", report.to_csv())?;
    let mut md = report.to_markdown();
    if !failures.is_empty() {
        md.push_str(&format!("\n{} cell(s) failed; see failures.csv.\n", failures.len()));
    }
    write("report.md", md)?;
    write("significance.csv", report.significance_csv(Method::NoUda.as_str()))?;
    write("sensitivity.csv", sensitivity_csv(cfg, report))?;
    write("failures.csv", failures_csv(failures))
}

/// Runs every (cell, seed) pair. Cell failures are recorded and the run goes
/// on; setup failures (data, pretraining, output directory) are returned.
pub fn cmd_run(cfg: &ExperimentConfig, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    prepare_output(&out, force)?;
    let text = cfg.to_text();
    cfg.write_resolved(&out.join(CONFIG_FILE))?;
    let (source, target) = generate_into(cfg, &out.join("data"))?;
    let cells = plan_cells(cfg);
    let mut report = MetricsReport::new(cells.iter().map(Cell::label).collect(), fingerprint(&text));
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = out.join(format!("seed_{seed}"));
        let pre_dir = seed_dir.join("pretrain");
        fs::create_dir_all(&pre_dir).at(&pre_dir)?;
        let pre_cfg = TrainConfig { seed, ..cfg.train.clone() };
        let mut cfg_copy = cfg.clone();
        cfg_copy.seeds = vec![seed];
        cfg_copy.write_resolved(&pre_dir.join(CONFIG_FILE))?;
        let mut pretrained = TranslatorModel::<f32>::new(pre_cfg.translator, seeds::derive(&[seeds::stream::INIT_TRANSLATOR, seed]))?;
        log::info!("seed {seed}: pretraining for {} epochs", pre_cfg.pretrain_epochs);
        if let Err(e) = trainer::pretrain(&mut pretrained, &source, &pre_cfg, Some(&pre_dir)) {
            for cell in &cells {
                failures.push(failure(cell.label(), seed, &e));
            }
            continue;
        }
        for cell in &cells {
            let label = cell.label();
            let dir = seed_dir.join(cell.dir_name());
            let train = cell.train_config(&cfg.train, seed);
            log::info!("seed {seed}: running {label}");
            let result = fs::create_dir_all(&dir)
                .at(&dir)
                .and_then(|_| cell_config(cfg, cell, seed).write_resolved(&dir.join(CONFIG_FILE)))
                .and_then(|_| run_cell(cell, &pretrained, &source, &target, &train, &dir));
            match result {
                Ok(m) => report.insert(&label, seed, m),
                Err(e) => failures.push(failure(label, seed, &e)),
            }
        }
    }
    write_reports(cfg, &out, &report, &failures)?;
    Ok(RunSummary { report, failures, out })
}

/// Re-evaluates the final checkpoints of a finished run against its stored
/// target dataset and rewrites the report files.
pub fn cmd_eval(run_dir: &Path) -> Result<RunSummary> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let target = data::read_dataset(&run_dir.join("data").join("target"))?;
    let cells = plan_cells(&cfg);
    let mut report = MetricsReport::new(cells.iter().map(Cell::label).collect(), fingerprint(&cfg.to_text()));
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        for cell in &cells {
            let dir = run_dir.join(format!("seed_{seed}")).join(cell.dir_name());
            let result = read_checkpoint(&dir.join("final.ckpt")).and_then(|nets| {
                let stored = nets
                    .iter()
                    .find(|n| n.name == "translator")
                    .ok_or_else(|| Error::Checkpoint("no translator in final.ckpt".into()))?;
                metrics::evaluate_model(&TranslatorModel::from_stored(stored)?, &target)
            });
            match result {
                Ok(m) => report.insert(&cell.label(), seed, m),
                Err(e) => failures.push(failure(cell.label(), seed, &e)),
            }
        }
    }
    write_reports(&cfg, run_dir, &report, &failures)?;
    Ok(RunSummary {
        report,
        failures,
        out: run_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_points_at_the_base_value_are_not_rerun() {
        let cfg = ExperimentConfig {
            methods: vec![Method::NoUda, Method::AcGst],
            sweep_beta: vec![1.0, 1.5],
            sweep_k: vec![20, 30],
            ..ExperimentConfig::default()
        };
        let labels: Vec<String> = plan_cells(&cfg).iter().map(Cell::label).collect();
        assert_eq!(labels, ["no_uda", "ac_gst", "ac_gst[beta=1.5]", "ac_gst[k=30]"]);
        let only = ExperimentConfig {
            methods: vec![Method::NoUda],
            ..cfg
        };
        assert_eq!(plan_cells(&only).len(), 5);
    }

    #[test]
    fn cells_follow_report_order_not_listing_order() {
        let cfg = ExperimentConfig {
            methods: vec![Method::TargetSupervised, Method::AcGst, Method::NoUda],
            ..ExperimentConfig::default()
        };
        let labels: Vec<String> = plan_cells(&cfg).iter().map(Cell::label).collect();
        assert_eq!(labels, ["no_uda", "ac_gst", "target_supervised"]);
    }

    #[test]
    fn cell_settings() {
        let base = TrainConfig::default();
        let c = Cell {
            k: Some(30),
            ..Cell::plain(Method::AcGst)
        };
        let t = c.train_config(&base, 7);
        assert_eq!((t.k, t.seed, t.beta), (30, 7, base.beta));
        assert_eq!(c.dir_name(), "ac_gst-k-30");
    }

    #[test]
    fn gen_refuses_existing_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.task.n_source_subjects = 1;
        cfg.task.source_slices = 2;
        cfg.task.target_slices = 2;
        cfg.task.phantom.height = 16;
        cfg.task.phantom.width = 16;
        let out = dir.path().join("gen");
        let manifest = cmd_gen(&cfg, &out, false).unwrap();
        assert!(manifest.contains("target_shift"));
        assert!(out.join("source").join(data::MANIFEST_FILE).is_file());
        assert!(matches!(cmd_gen(&cfg, &out, false), Err(Error::OutputExists(_))));
        cmd_gen(&cfg, &out, true).unwrap();
        let foreign = dir.path().join("foreign");
        fs::create_dir_all(&foreign).unwrap();
        fs::write(foreign.join("keep.txt"), "x").unwrap();
        assert!(cmd_gen(&cfg, &foreign, true).is_err());
        assert!(foreign.join("keep.txt").is_file());
    }
}
