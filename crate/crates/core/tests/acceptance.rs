//! Acceptance criteria. Each criterion prints one `PASS` or `FAIL` line
//! straight to stderr (so it shows even when output is captured), and the
//! test fails at the end if any criterion failed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gstuda::attention::{AttentionArch, AttentionModel};
use gstuda::config::ExperimentConfig;
use gstuda::data::ImageGrid;
use gstuda::experiment;
use gstuda::loss::{self, TargetLossOptions};
use gstuda::masks;
use gstuda::metrics::{self, Metric, MetricsReport};
use gstuda::trainer::{gst_batch, BatchOptions, TargetItem};
use gstuda::translator::{TranslatorArch, TranslatorModel, TranslatorOutput};
use gstuda::uncertainty::{self, DropoutEnsemble};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn line(n: usize, name: &str, o: &Outcome, took: Duration) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{tag} criterion {n:>2} {name}: {} [{:.1}s]", o.detail, took.as_secs_f64());
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn grid(h: usize, w: usize, values: Vec<f64>) -> ImageGrid {
    ImageGrid::new(h, w, values, 0.0, 255.0).unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, hi: f64) -> ImageGrid {
    let v = (0..n).map(|_| rng.random_range(0.0..hi)).collect();
    ImageGrid::new(1, n, v, 0.0, hi).unwrap()
}

fn unit_identities() -> Outcome {
    let mut problems = Vec::new();
    let arch = TranslatorArch {
        dropout_rate: 0.0,
        ..TranslatorArch::default()
    };
    let model = TranslatorModel::<f32>::new(arch, 3).unwrap();
    let x = grid(16, 16, (0..256).map(|i| (i % 97) as f64).collect());
    let ens = uncertainty::mc_ensemble(&model, &x, 5, 11).unwrap();
    if uncertainty::epistemic(&ens).max() != 0.0 {
        problems.push("dropout-free epistemic is not zero".to_string());
    }

    let out = |lv: f64| TranslatorOutput {
        mean: ImageGrid::new(1, 1, vec![0.0], 0.0, 1.0).unwrap(),
        logvar: ImageGrid::new(1, 1, vec![lv], -10.0, 10.0).unwrap(),
    };
    let pair = DropoutEnsemble::new(vec![out(0.5f64.ln()), out(1.5f64.ln())], "hand").unwrap();
    let ua = uncertainty::aleatoric(&pair, 1.0).values()[0];
    if (ua - 1.0).abs() > 1e-12 {
        problems.push(format!("aleatoric of {{0.5, 1.5}} is {ua}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..400);
        let u = random_map(&mut rng, n, 5.0);
        let rho = rng.random_range(0.0..=1.0);
        let m = masks::binary_mask(&u, rho).unwrap();
        if m.sum() as usize != (rho * n as f64).floor() as usize {
            problems.push(format!("binary count wrong for n={n} rho={rho}"));
            break;
        }
    }

    let c = masks::continuous_mask(&ImageGrid::new(1, 2, vec![0.0, 2f64.ln()], 0.0, 1.0).unwrap()).unwrap();
    if (c.weights.values()[0] - 1.0).abs() > 1e-12 || (c.weights.values()[1] - 0.5).abs() > 1e-12 {
        problems.push("continuous mask identities".into());
    }

    for _ in 0..100 {
        let u = random_map(&mut rng, 64, 8.0);
        let a = random_map(&mut rng, 64, 1.0);
        let base = masks::continuous_mask(&u).unwrap();
        let m = masks::attentive_mask(&base, &a).unwrap();
        let bad = m
            .weights
            .values()
            .iter()
            .zip(base.weights.values())
            .zip(a.values())
            .any(|((mv, bv), av)| *mv > bv.min(*av));
        if bad {
            problems.push("attentive mask exceeds min(a, m')".into());
            break;
        }
    }
    outcome(problems.is_empty(), if problems.is_empty() { "all identities hold".into() } else { problems.join("; ") })
}

/// Relative error of one analytic derivative against its central difference.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn gradient_suite() -> Outcome {
    let (h, w) = (8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = |rng: &mut ChaCha8Rng| grid(h, w, (0..h * w).map(|_| rng.random_range(20.0..230.0)).collect());
    let (sx, sy) = (img(&mut rng), img(&mut rng));
    let (tx1, tp1, tx2, tp2) = (img(&mut rng), img(&mut rng), img(&mut rng), img(&mut rng));
    let m1: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.05..1.0)).collect();
    let m2: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.05..1.0)).collect();
    let targets = [
        TargetItem {
            input: &tx1,
            pseudo: &tp1,
            base_mask: &m1,
        },
        TargetItem {
            input: &tx2,
            pseudo: &tp2,
            base_mask: &m2,
        },
    ];
    let source = [(&sx, &sy)];
    let opts = BatchOptions {
        target: TargetLossOptions::default(),
        attention_floor: 0.5,
        loss_unit_span: 1.0,
    };
    let t_arch = TranslatorArch {
        depth: 2,
        base_channels: 2,
        dropout_rate: 0.2,
    };
    let mut tr = TranslatorModel::<f64>::new(t_arch, 5).unwrap();
    tr.set_dropout_active(false);
    let mut at = AttentionModel::<f64>::new(AttentionArch { depth: 2, base_channels: 2 }, 6).unwrap();
    let loss = |tr: &TranslatorModel<f64>, at: &AttentionModel<f64>| gst_batch(tr, Some(at), &source, &targets, opts, 0).unwrap().loss.total;
    let g = gst_batch(&tr, Some(&at), &source, &targets, opts, 0).unwrap();
    let tg = g.translator.tensors.clone();
    let ag = g.attention.expect("attention grads").tensors;
    // The objective is O(1) while many derivatives are O(1e-7); a step much
    // below 1e-4 lets cancellation noise (about 1e-16 |L| / h) swamp them.
    // Truncation error at this step is O(h^2) and far below the tolerance.
    let eps = 1e-4;
    let (mut worst, mut where_, mut checked) = (0.0f64, String::new(), 0usize);
    for (ti, tensor) in tg.iter().enumerate() {
        for (j, &analytic) in tensor.iter().enumerate() {
            let p = tr.params_mut().iter_mut().nth(ti).unwrap();
            let orig = p.data[j];
            p.data[j] = orig + eps;
            let up = loss(&tr, &at);
            tr.params_mut().iter_mut().nth(ti).unwrap().data[j] = orig - eps;
            let down = loss(&tr, &at);
            tr.params_mut().iter_mut().nth(ti).unwrap().data[j] = orig;
            let e = rel_err(analytic, (up - down) / (2.0 * eps));
            checked += 1;
            if e > worst {
                worst = e;
                where_ = format!("translator tensor {ti} entry {j}");
            }
        }
    }
    for (ti, tensor) in ag.iter().enumerate() {
        for (j, &analytic) in tensor.iter().enumerate() {
            let orig = at.params().iter().nth(ti).unwrap().data[j];
            at.params_mut().iter_mut().nth(ti).unwrap().data[j] = orig + eps;
            let up = loss(&tr, &at);
            at.params_mut().iter_mut().nth(ti).unwrap().data[j] = orig - eps;
            let down = loss(&tr, &at);
            at.params_mut().iter_mut().nth(ti).unwrap().data[j] = orig;
            let e = rel_err(analytic, (up - down) / (2.0 * eps));
            checked += 1;
            if e > worst {
                worst = e;
                where_ = format!("attention tensor {ti} entry {j}");
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("{checked} parameters (translator {} tensors, attention {}), worst relative error {worst:.2e} at {where_}", tg.len(), ag.len()),
    )
}

fn stationarity() -> Outcome {
    let step = 0.01;
    let mut worst = 0.0f64;
    for &r in &[0.02, 0.1, 0.5, 1.0, 3.0] {
        let pred = ImageGrid::new(1, 1, vec![0.0], -10.0, 10.0).unwrap();
        let pseudo = ImageGrid::new(1, 1, vec![r], -10.0, 10.0).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        let mut lv = -9.5;
        while lv <= 9.5 {
            let logvar = ImageGrid::new(1, 1, vec![lv], -10.0, 10.0).unwrap();
            let v = loss::target_loss_grad(&pred, &logvar, &pseudo, &[1.0], TargetLossOptions::default()).unwrap().value();
            if v < best.0 {
                best = (v, lv);
            }
            lv += step;
        }
        worst = worst.max((best.1 - (r * r).ln()).abs());
    }
    outcome(worst <= step, format!("largest gap between grid argmin and ln r^2 is {worst:.4} (grid step {step})"))
}

fn rank_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let u = random_map(&mut rng, 256, 3.0);
        let rho = rng.random_range(0.0..=1.0);
        let base = masks::binary_mask(&u, rho).unwrap().weights;
        let sq = u.map(0.0, 9.0, |v| v * v).unwrap();
        let ex = u.map(1.0, 3f64.exp(), f64::exp).unwrap();
        for (name, t) in [("u^2", sq), ("exp(u)", ex)] {
            if masks::binary_mask(&t, rho).unwrap().weights != base {
                return outcome(false, format!("map {i}: mask changed under {name}"));
            }
        }
    }
    outcome(true, "100 maps, masks identical under u, u^2 and exp(u)")
}

/// Mean SSIM computed straight from its definition over every valid window.
fn ssim_reference(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let (h, w) = a.dims();
    let size = 11;
    let sigma: f64 = 1.5;
    let mut win = vec![0.0; size * size];
    let c = (size / 2) as f64;
    for y in 0..size {
        for x in 0..size {
            win[y * size + x] = (-((y as f64 - c).powi(2) + (x as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let l = b.span();
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let lo = b.range_lo();
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - size {
        for ox in 0..=w - size {
            let (mut mx, mut my) = (0.0, 0.0);
            for y in 0..size {
                for x in 0..size {
                    let k = win[y * size + x];
                    mx += k * (a.get(oy + y, ox + x) - lo);
                    my += k * (b.get(oy + y, ox + x) - lo);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for y in 0..size {
                for x in 0..size {
                    let k = win[y * size + x];
                    let dx = a.get(oy + y, ox + x) - lo - mx;
                    let dy = b.get(oy + y, ox + x) - lo - my;
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cxy += k * dx * dy;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_ssim = 0.0f64;
    for _ in 0..5 {
        let (h, w) = (rng.random_range(11..24), rng.random_range(11..24));
        let a = grid(h, w, (0..h * w).map(|_| rng.random_range(0.0..255.0)).collect());
        let b = grid(h, w, a.values().iter().map(|v| (v + rng.random_range(-30.0..30.0)).clamp(0.0, 255.0)).collect());
        worst_ssim = worst_ssim.max((metrics::ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs());
    }
    let psnr = metrics::psnr_from_mse(1.0, 255.0);
    let t = metrics::paired_ttest_one_tailed(&[2.0, 3.0, 4.0], &[1.0, 1.0, 2.0]).unwrap();
    let pass = worst_ssim < 1e-9 && (psnr - 48.13).abs() < 0.01 && (t.t - 5.0).abs() < 1e-9;
    outcome(pass, format!("ssim gap {worst_ssim:.1e}, psnr(L=255, mse=1) {psnr:.4} dB, t {:.12}", t.t))
}

fn reproducibility() -> Outcome {
    let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/tiny.cfg")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        cfg.output_dir = dir.path().join(run);
        if let Err(e) = experiment::cmd_run(&cfg, false) {
            return outcome(false, format!("run {run} failed: {e}"));
        }
        reports.push(std::fs::read(cfg.output_dir.join("report.csv")).unwrap());
    }
    outcome(reports[0] == reports[1], format!("two runs of configs/tiny.cfg, report.csv {} bytes each, identical: {}", reports[0].len(), reports[0] == reports[1]))
}

/// Outcomes of the desk-scale run shared by the directional criteria.
struct Desk {
    report: MetricsReport,
    cfg: ExperimentConfig,
    took: Duration,
    failures: usize,
}

fn desk_run() -> Result<Desk, String> {
    let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/acceptance.cfg")).map_err(|e| e.to_string())?;
    cfg.output_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_desk");
    let start = Instant::now();
    let summary = experiment::cmd_run(&cfg, true).map_err(|e| e.to_string())?;
    Ok(Desk {
        report: summary.report,
        took: start.elapsed(),
        failures: summary.failures.len(),
        cfg,
    })
}

fn l1(desk: &Desk, label: &str) -> Option<(f64, f64)> {
    desk.report.summary_value(label, Metric::L1)
}

fn directional(desk: &Desk) -> Outcome {
    let (Some((no, _)), Some((ac, _)), Some((ts, _))) = (l1(desk, "no_uda"), l1(desk, "ac_gst"), l1(desk, "target_supervised")) else {
        return outcome(false, "missing no_uda, ac_gst or target_supervised results");
    };
    let gain = (no - ac) / no;
    let within = desk.took.as_secs_f64() <= 45.0 * 60.0;
    let pass = ac < no && gain >= 0.05 && ts <= ac && within;
    outcome(
        pass,
        format!(
            "L1 no_uda {no:.3}, ac_gst {ac:.3} (relative gain {:.1}%, need >= 5%), target_supervised {ts:.3}; run {:.1} min of 45, {} failed cells",
            100.0 * gain,
            desk.took.as_secs_f64() / 60.0,
            desk.failures
        ),
    )
}

fn ablation_order(desk: &Desk) -> Outcome {
    let Some((ac, ac_sd)) = l1(desk, "ac_gst") else {
        return outcome(false, "missing ac_gst results");
    };
    let mut parts = Vec::new();
    let mut violations = Vec::new();
    for other in ["ac_gst_no_attn", "ac_gst_c", "bm_gst"] {
        let Some((m, sd)) = l1(desk, other) else {
            violations.push(format!("{other} missing"));
            continue;
        };
        let pooled = ((ac_sd * ac_sd + sd * sd) / 2.0).sqrt();
        parts.push(format!("{other} {m:.3} (pooled sd {pooled:.3})"));
        if ac > m + pooled {
            violations.push(format!("ac_gst {ac:.3} > {other} {m:.3} + {pooled:.3}"));
        }
    }
    let detail = format!("ac_gst {ac:.3} vs {}", parts.join(", "));
    if violations.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; violations: {}", violations.join("; ")))
    }
}

fn uncertainty_decay(desk: &Desk) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for &seed in &desk.cfg.seeds {
        let path = desk.cfg.output_dir.join(format!("seed_{seed}/ac_gst/uncertainty.csv"));
        let Ok(text) = std::fs::read_to_string(&path) else {
            return outcome(false, format!("missing {}", path.display()));
        };
        let rows: Vec<(usize, f64)> = text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let mut f = l.split(',');
                Some((f.next()?.parse().ok()?, f.next()?.parse().ok()?))
            })
            .collect();
        let first = rows.iter().find(|r| r.0 == 1).map(|r| r.1);
        let last = rows.iter().max_by_key(|r| r.0).filter(|r| r.0 > 1).map(|r| r.1);
        let (Some(first), Some(last)) = (first, last) else {
            return outcome(false, format!("seed {seed}: too few rounds recorded"));
        };
        pass &= last < first;
        parts.push(format!("seed {seed}: round 1 {first:.5} -> final {last:.5}"));
    }
    outcome(pass, parts.join(", "))
}

fn sensitivity(desk: &Desk) -> Outcome {
    let label = |b: Option<f64>, k: Option<usize>| -> String {
        match (b, k) {
            (Some(b), _) if b != desk.cfg.train.beta => format!("ac_gst[beta={b}]"),
            (_, Some(k)) if k != desk.cfg.train.k => format!("ac_gst[k={k}]"),
            _ => "ac_gst".into(),
        }
    };
    let Some((_, sd)) = l1(desk, "ac_gst") else {
        return outcome(false, "missing ac_gst results");
    };
    let betas: Vec<f64> = desk.cfg.sweep_beta.iter().copied().filter(|b| (1.0..=1.5).contains(b)).collect();
    let beta_l1: Vec<f64> = betas.iter().filter_map(|&b| l1(desk, &label(Some(b), None)).map(|v| v.0)).collect();
    let k20 = l1(desk, &label(None, Some(20))).map(|v| v.0);
    let k30 = l1(desk, &label(None, Some(30))).map(|v| v.0);
    if beta_l1.len() < 2 || beta_l1.len() != betas.len() {
        return outcome(false, "beta sweep incomplete");
    }
    let (Some(k20), Some(k30)) = (k20, k30) else {
        return outcome(false, "K sweep incomplete");
    };
    let spread = beta_l1.iter().copied().fold(f64::NEG_INFINITY, f64::max) - beta_l1.iter().copied().fold(f64::INFINITY, f64::min);
    let kgap = (k20 - k30).abs();
    outcome(
        spread < 2.0 * sd && kgap < 2.0 * sd,
        format!("beta spread {spread:.4}, |L1(K=20) - L1(K=30)| {kgap:.4}, limit 2 x seed sd = {:.4}", 2.0 * sd),
    )
}

#[test]
fn acceptance_criteria() {
    let mut failed = Vec::new();
    let mut record = |n: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        let took = start.elapsed();
        if let Some(l) = limit {
            if took > l {
                o.pass = false;
                o.detail.push_str(&format!("; exceeded {}s", l.as_secs()));
            }
        }
        line(n, name, &o, took);
        if !o.pass {
            failed.push(n);
        }
    };
    record(1, "unit identities", Some(Duration::from_secs(60)), &mut unit_identities);
    record(2, "gradient suite", Some(Duration::from_secs(120)), &mut gradient_suite);
    record(3, "heteroscedastic stationarity", Some(Duration::from_secs(60)), &mut stationarity);
    record(4, "rank invariance", None, &mut rank_invariance);
    let desk = &desk_run();
    let with_desk = |f: fn(&Desk) -> Outcome| move || match desk {
        Ok(d) => f(d),
        Err(e) => outcome(false, format!("desk run failed: {e}")),
    };
    record(5, "directional adaptation gain", None, &mut with_desk(directional));
    record(6, "ablation ordering", None, &mut with_desk(ablation_order));
    record(7, "uncertainty decay", None, &mut with_desk(uncertainty_decay));
    record(8, "sensitivity plateaus", None, &mut with_desk(sensitivity));
    record(9, "metric oracles", None, &mut metric_oracles);
    record(10, "reproducibility", None, &mut reproducibility);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
