use std::path::Path;

use gstuda::config::ExperimentConfig;
use gstuda::experiment::plan_cells;

fn load(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn shipped_configs_validate_and_round_trip() {
    for name in ["tiny.cfg", "acceptance.cfg"] {
        let cfg = load(name);
        cfg.validate().unwrap();
        let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again.to_text(), cfg.to_text(), "{name}");
    }
}

#[test]
fn acceptance_grid_covers_every_sweep_point() {
    let cfg = load("acceptance.cfg");
    let labels: Vec<String> = plan_cells(&cfg).iter().map(|c| c.label()).collect();
    for want in ["no_uda", "bm_gst", "ac_gst_c", "ac_gst_no_attn", "ac_gst", "target_supervised", "ac_gst[beta=1.25]", "ac_gst[beta=1.5]", "ac_gst[k=30]"] {
        assert!(labels.iter().any(|l| l == want), "{want} missing from {labels:?}");
    }
}
