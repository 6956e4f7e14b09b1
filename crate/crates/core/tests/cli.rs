use std::fs;
use std::path::Path;
use std::process::Command;

use tmegraph::cli::{self, Report, RunConfig, RunManifest};
use tmegraph::model::{EncoderMode, SplitPlan};
use tmegraph::Error;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.synth.n_patients = 4;
    cfg.synth.rois_per_patient = 4;
    cfg.synth.roi_size = 1024;
    cfg.model.tiles_per_roi = 12;
    cfg.model.max_epochs = 2;
    cfg.model.n_splits = 2;
    cfg.model.augment_copies = 2;
    cfg.model.hidden_dim = 8;
    cfg.model.encoder_mode = EncoderMode::Frozen;
    cfg.model.lr = 1e-3;
    cfg.ig.n_points = 8;
    cfg.explainer.epochs = 5;
    cfg
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn header_len(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().next().unwrap().split(',').count()
}

fn synth_and_build(cfg: &RunConfig, root: &Path) {
    cli::cmd_synth(cfg, &root.join("synth")).unwrap();
    let s = root.join("synth");
    cli::cmd_build(cfg, Some(&s.join(cli::CELLS)), Some(&s.join(cli::ROIS)), &root.join("built")).unwrap();
}

#[test]
fn synth_counts_match_manifest_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let a = dir.path().join("a");
    let m = cli::cmd_synth(&cfg, &a).unwrap();
    assert_eq!(data_rows(&a.join(cli::CELLS)), m.counts["cells"]);
    assert_eq!(data_rows(&a.join(cli::ROIS)), m.counts["rois"]);
    assert_eq!(m.counts["rois"], 16);
    assert!(a.join(cli::TRUTH).exists());
    let on_disk = RunManifest::load(&a.join(cli::MANIFEST)).unwrap();
    assert_eq!(on_disk.config, cfg);
    assert_eq!(on_disk.config_hash, cfg.hash());

    let b = dir.path().join("b");
    cli::cmd_synth(&cfg, &b).unwrap();
    for f in [cli::CELLS, cli::ROIS, cli::TRUTH] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_priors_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.synth.class_priors = vec![0.5, 0.5, 0.5];
    let err = cli::cmd_synth(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn build_writes_one_bundle_per_roi_and_68_metric_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.synth.n_patients = 1;
    cfg.synth.rois_per_patient = 2;
    synth_and_build(&cfg, dir.path());
    let built = dir.path().join("built");
    assert_eq!(fs::read_dir(built.join(cli::GRAPH_DIR)).unwrap().count(), 2);
    assert_eq!(header_len(&built.join(cli::METRICS)), 68 + 2);
    assert_eq!(data_rows(&built.join(cli::METRICS)), 2 * 12);

    let again = dir.path().join("again");
    let s = dir.path().join("synth");
    cli::cmd_build(&cfg, Some(&s.join(cli::CELLS)), Some(&s.join(cli::ROIS)), &again).unwrap();
    assert_eq!(fs::read(built.join(cli::METRICS)).unwrap(), fs::read(again.join(cli::METRICS)).unwrap());
    for e in fs::read_dir(built.join(cli::GRAPH_DIR)).unwrap() {
        let p = e.unwrap().path();
        let q = again.join(cli::GRAPH_DIR).join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(q).unwrap());
    }
}

#[test]
fn train_evaluate_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    synth_and_build(&cfg, dir.path());
    let built = dir.path().join("built");

    let run = |name: &str| {
        let out = dir.path().join(name);
        cli::cmd_train(&cfg, Some(&built), None, &out).unwrap();
        out
    };
    let t1 = run("train1");
    let t2 = run("train2");
    let report = fs::read(t1.join(cli::REPORT)).unwrap();
    assert_eq!(report, fs::read(t2.join(cli::REPORT)).unwrap());
    assert_eq!(fs::read(t1.join(cli::PREDICTIONS)).unwrap(), fs::read(t2.join(cli::PREDICTIONS)).unwrap());
    let r: Report = serde_json::from_slice(&report).unwrap();
    let names: Vec<&str> = r.rows.iter().map(|x| x.region.as_str()).collect();
    assert_eq!(names, ["All", "Centre", "Front", "Mucosa", "Stroma"]);
    assert_eq!(r.n_splits, 2);
    assert!(t1.join("checkpoint_split1.json").exists());

    let ev = dir.path().join("eval");
    let m = cli::cmd_evaluate(&cfg, Some(&t1.join(cli::CHECKPOINT)), Some(&built), &ev).unwrap();
    assert_eq!(data_rows(&ev.join(cli::PREDICTIONS)), m.counts["rois"]);

    let ex = dir.path().join("explain");
    cli::cmd_explain(&cfg, Some(&t1.join(cli::CHECKPOINT)), Some(&built), Some(10), &ex).unwrap();
    let plans: Vec<SplitPlan> = serde_json::from_slice(&fs::read(t1.join(cli::SPLIT)).unwrap()).unwrap();
    let attributions = fs::read_to_string(ex.join(cli::ATTRIBUTIONS)).unwrap();
    for id in &plans[0].test_rois {
        assert!(attributions.lines().any(|l| l.starts_with(&format!("{id},"))), "{id} missing");
    }
    assert_eq!(data_rows(&ex.join(cli::TOP_TILES)), 10 * plans[0].test_rois.len());
    let mut rdr = csv::Reader::from_path(ex.join(cli::COMPLETENESS)).unwrap();
    for rec in rdr.records() {
        let gap: f64 = rec.unwrap()[5].parse().unwrap();
        assert!(gap.is_finite());
    }
    assert_eq!(data_rows(&ex.join(cli::FEATURE_IMPORTANCE)), 68 + 16);
}

#[test]
fn mlp_trains_from_summary_alone_and_cannot_be_explained() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.model_name = "mlp".parse().unwrap();
    synth_and_build(&cfg, dir.path());
    let built = dir.path().join("built");
    fs::remove_dir_all(built.join(cli::GRAPH_DIR)).unwrap();
    let out = dir.path().join("train");
    cli::cmd_train(&cfg, Some(&built), None, &out).unwrap();
    let err = cli::cmd_explain(&cfg, Some(&out.join(cli::CHECKPOINT)), Some(&built), None, &dir.path().join("x"))
        .unwrap_err();
    assert!(matches!(err, Error::ModelMismatch(_)));
}

#[test]
fn overlapping_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.model_name = "mlp".parse().unwrap();
    synth_and_build(&cfg, dir.path());
    let bad = vec![SplitPlan {
        train_rois: vec!["P000_R0".into(), "P001_R0".into()],
        test_rois: vec!["P000_R1".into()],
        pseudo_val_rois: vec![],
    }];
    let split = dir.path().join("split.json");
    fs::write(&split, serde_json::to_string(&bad).unwrap()).unwrap();
    let err = cli::cmd_train(&cfg, Some(&dir.path().join("built")), Some(&split), &dir.path().join("t")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_tmegraph");
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, r#"{"synth": {"class_priors": [0.9, 0.9, 0.9]}}"#).unwrap();
    let out = dir.path().join("o");
    let status = Command::new(bin)
        .args(["synth", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    let mut cfg = small_config();
    cfg.synth.n_patients = 1;
    cfg.synth.rois_per_patient = 1;
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["synth", "--seed", "9", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let m = RunManifest::load(&out.join(cli::MANIFEST)).unwrap();
    assert_eq!(m.seed, 9);

    let status = Command::new(bin)
        .args(["evaluate", "--checkpoint", "/nonexistent/ck.json", "--built"])
        .arg(&out)
        .arg("--out")
        .arg(dir.path().join("e"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
