//! Pipeline commands behind the `tmegraph` binary.
//!
//! Every command takes a [`RunConfig`], writes its outputs into one
//! directory and leaves a `manifest.json` there recording the command, the
//! config and its hash, inputs, outputs and row counts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explain::{
    feature_importance_report, gnn_explain, integrated_gradients, rank_tiles, tile_feature_names, ExplainerConfig,
    IgConfig,
};
use crate::ingest::{
    assign_phenotypes, parse_cell_table, parse_roi_table, write_cell_table, write_roi_table, CellTableSchema, Region,
    RoIRecord, Stage, CELL_FEATURES,
};
use crate::metrics::{metric_names, CATALOG_VERSION};
use crate::model::{
    build_dataset, evaluate, make_test_graph, split_patients, train, Checkpoint, CheckpointMeta, Evaluation,
    HierModelConfig, ModelChoice, RoISample, SplitPlan, CELL_FEATURE_DIM, CHECKPOINT_VERSION, REPORT_ROWS,
};
use crate::seed::{self, stream};
use crate::synth::{generate_cohort, planted_signal_cohort, PlantedKind, SynthConfig};

pub const MANIFEST: &str = "manifest.json";
pub const CELLS: &str = "cells.csv";
pub const ROIS: &str = "rois.csv";
pub const TRUTH: &str = "truth.json";
pub const GRAPH_DIR: &str = "graphs";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const REPORT: &str = "report.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const SPLIT: &str = "split.json";
pub const ATTRIBUTIONS: &str = "attributions.csv";
pub const EDGE_ATTRIBUTIONS: &str = "edge_attributions.csv";
pub const FEATURE_IMPORTANCE: &str = "feature_importance.csv";
pub const COMPLETENESS: &str = "completeness.csv";
pub const TOP_TILES: &str = "top_tiles.csv";

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "TMEGRAPH_THREADS";

/// Everything a run depends on. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model_name: ModelChoice,
    pub model: HierModelConfig,
    pub synth: SynthConfig,
    /// Generate a planted-signal cohort instead of the knob-driven one.
    pub planted: Option<PlantedKind>,
    pub ig: IgConfig,
    pub explainer: ExplainerConfig,
    /// Restrict training, evaluation and explanation to one region.
    pub region: Option<Region>,
    pub top_k: Option<usize>,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub cells: Option<PathBuf>,
    pub rois: Option<PathBuf>,
    pub built: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model_name: ModelChoice::gcn(crate::ad::Readout::Mean),
            model: HierModelConfig::default(),
            synth: SynthConfig::default(),
            planted: None,
            ig: IgConfig::default(),
            explainer: ExplainerConfig::default(),
            region: None,
            top_k: None,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.explainer.validate()?;
        if self.ig.n_points == 0 {
            return Err(Error::Config("ig.n_points must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub versions: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub config: RunConfig,
}

impl RunManifest {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        let versions = [
            ("tmegraph", env!("CARGO_PKG_VERSION").to_string()),
            ("metric_catalog", CATALOG_VERSION.to_string()),
            ("checkpoint", CHECKPOINT_VERSION.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
            versions,
            wall_time_s: 0.0,
            config: cfg.clone(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    fn write(mut self, out: &Path, started: Instant) -> Result<RunManifest> {
        self.wall_time_s = started.elapsed().as_secs_f64();
        self.outputs.sort();
        write_json(&out.join(MANIFEST), &self)?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::io::BufWriter<fs::File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

/// Label of class `c`: the stage names mapped to it, joined by `+`.
pub fn class_name(cfg: &HierModelConfig, c: usize) -> String {
    let names: Vec<&str> = Stage::ALL
        .iter()
        .filter(|s| cfg.class_of(**s) == c)
        .map(|s| s.name())
        .collect();
    if names.is_empty() {
        format!("class{c}")
    } else {
        names.join("+")
    }
}

/// Generate a synthetic cohort: `cells.csv`, `rois.csv`, `truth.json`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    create_dir(out)?;
    let synth = SynthConfig {
        rng_seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let cohort = match cfg.planted {
        Some(kind) => planted_signal_cohort(kind, &synth)?,
        None => generate_cohort(&synth)?,
    };
    let mut m = RunManifest::new("synth", cfg);
    let cells_path = out.join(CELLS);
    let mut w = create(&cells_path)?;
    write_cell_table(&mut w, &cohort.rois, Some(&cohort.phenotypes))?;
    w.flush().map_err(|e| Error::io(&cells_path, e))?;
    write_roi_table(create(&out.join(ROIS))?, &cohort.rois)?;
    write_json(&out.join(TRUTH), &cohort.truth)?;
    m.outputs = vec![CELLS.into(), ROIS.into(), TRUTH.into()];
    m.counts.insert("rois".into(), cohort.rois.len());
    m.counts.insert("cells".into(), cohort.n_cells());
    m.write(out, started)
}

fn input_path(flag: Option<&Path>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or config paths)")))
}

/// Phenotype cells, sample tiles and write per-RoI graph bundles plus the
/// per-tile metric table and the per-RoI cell-feature summary.
pub fn cmd_build(cfg: &RunConfig, cells: Option<&Path>, rois: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let cells = input_path(cells, &cfg.paths.cells, "cell table")?;
    let rois_path = rois.map(Path::to_path_buf).or_else(|| cfg.paths.rois.clone());
    let mut m = RunManifest::new("build", cfg);
    m.input("cells", &cells);
    let schema = match &rois_path {
        Some(p) => {
            m.input("rois", p);
            let labels = parse_roi_table(p)?;
            CellTableSchema::with_labels(&labels)
        }
        None => CellTableSchema::default(),
    };
    let mut records: Vec<RoIRecord> = parse_cell_table(&cells, &schema)?;
    if records.is_empty() {
        return Err(Error::Empty(format!("{} holds no cells", cells.display())));
    }
    assign_phenotypes(&mut records, cfg.model.phenotype_scope)?;
    let samples = build_dataset(&records, &cfg.model, cfg.seed)?;

    create_dir(out)?;
    let gdir = out.join(GRAPH_DIR);
    create_dir(&gdir)?;
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let path = gdir.join(format!("{}.json", s.roi_id));
        let mut w = create(&path)?;
        serde_json::to_writer(&mut w, s)?;
        w.flush().map_err(|e| Error::io(&path, e))
    })?;

    let mut mw = csv_writer(&out.join(METRICS))?;
    let mut header = vec!["roi_id".to_string(), "tile_id".to_string()];
    header.extend(metric_names());
    mw.write_record(&header)?;
    for s in &samples {
        for (t, tile) in s.tiles.iter().enumerate() {
            let mut row = vec![s.roi_id.clone(), tile.tile_id.to_string()];
            row.extend(s.metrics_row(t).iter().map(|v| v.to_string()));
            mw.write_record(&row)?;
        }
    }
    mw.flush().map_err(|e| Error::io(&out.join(METRICS), e))?;

    write_summary(&out.join(SUMMARY), &samples)?;
    m.outputs = vec![METRICS.into(), SUMMARY.into()];
    m.outputs
        .extend(samples.iter().map(|s| format!("{GRAPH_DIR}/{}.json", s.roi_id)));
    m.counts.insert("rois".into(), samples.len());
    m.counts.insert("tiles".into(), samples.iter().map(|s| s.n_tiles()).sum());
    m.write(out, started)
}

fn write_summary(path: &Path, samples: &[RoISample]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["roi_id", "patient_id", "region", "stage"].map(String::from).to_vec();
    header.extend(CELL_FEATURES.iter().map(|f| format!("mean_{f}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![
            s.roi_id.clone(),
            s.patient_id.clone(),
            s.region.name().to_string(),
            s.stage.name().to_string(),
        ];
        row.extend(s.cell_mean.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// RoI samples without tiles, read from the summary table; enough for the
/// cell-mean baseline.
fn read_summary(path: &Path) -> Result<Vec<RoISample>> {
    let mut r = csv::Reader::from_reader(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let parse_err = |column: &str, message: String| Error::Parse {
            row,
            column: column.to_string(),
            message,
        };
        let mut cell_mean = [0.0; CELL_FEATURE_DIM];
        for (j, v) in cell_mean.iter_mut().enumerate() {
            *v = field(4 + j)
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err(CELL_FEATURES[j], e.to_string()))?;
        }
        out.push(RoISample {
            roi_id: field(0),
            patient_id: field(1),
            region: field(2).parse().map_err(|e: String| parse_err("region", e))?,
            stage: field(3).parse().map_err(|e: String| parse_err("stage", e))?,
            tiles: Vec::new(),
            tile_graph: crate::graph::SpatialGraph::empty(crate::metrics::N_METRICS),
            cell_graphs: Vec::new(),
            cell_mean,
            threshold: 0.0,
            embeddings: None,
        });
    }
    Ok(out)
}

/// Load built samples. The cell-mean baseline only needs the summary table.
pub fn load_built(dir: &Path, choice: ModelChoice) -> Result<Vec<RoISample>> {
    if !choice.kind.uses_tiles() {
        return read_summary(&dir.join(SUMMARY));
    }
    let ids: Vec<String> = read_summary(&dir.join(SUMMARY))?
        .into_iter()
        .map(|s| s.roi_id)
        .collect();
    ids.par_iter()
        .map(|id| load_bundle(&dir.join(GRAPH_DIR).join(format!("{id}.json"))))
        .collect()
}

/// Read one per-RoI graph bundle written by `build`.
pub fn load_bundle(path: &Path) -> Result<RoISample> {
    let s: RoISample = read_json(path)?;
    s.check()?;
    Ok(s)
}

fn in_region(cfg: &RunConfig, samples: Vec<RoISample>) -> Result<Vec<RoISample>> {
    let out: Vec<RoISample> = match cfg.region {
        Some(r) => samples.into_iter().filter(|s| s.region == r).collect(),
        None => samples,
    };
    if out.is_empty() {
        return Err(Error::Empty("no RoIs left after the region filter".into()));
    }
    Ok(out)
}

fn select(samples: &[RoISample], ids: &[String]) -> Vec<RoISample> {
    let want: std::collections::BTreeSet<&String> = ids.iter().collect();
    samples.iter().filter(|s| want.contains(&s.roi_id)).cloned().collect()
}

/// Per-region mean and standard deviation (population form) over splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub region: String,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub per_split: Vec<f64>,
    pub n_test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: ModelChoice,
    pub n_splits: usize,
    pub class_names: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn summarise(choice: ModelChoice, cfg: &HierModelConfig, evals: &[Evaluation]) -> Report {
    let mut rows = Vec::new();
    for name in REPORT_ROWS {
        let hits: Vec<(f64, usize)> = evals
            .iter()
            .filter_map(|e| e.row(name).map(|r| (r.weighted_f1, r.n)))
            .collect();
        if hits.is_empty() {
            continue;
        }
        let n = hits.len() as f64;
        let mean = hits.iter().map(|h| h.0).sum::<f64>() / n;
        let var = hits.iter().map(|h| (h.0 - mean).powi(2)).sum::<f64>() / n;
        rows.push(ReportRow {
            region: name.to_string(),
            mean_f1: mean,
            std_f1: var.sqrt(),
            per_split: hits.iter().map(|h| h.0).collect(),
            n_test: hits.iter().map(|h| h.1).collect(),
        });
    }
    Report {
        model: choice,
        n_splits: evals.len(),
        class_names: (0..cfg.n_classes).map(|c| class_name(cfg, c)).collect(),
        rows,
    }
}

fn write_predictions(path: &Path, cfg: &HierModelConfig, evals: &[(usize, &Evaluation)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["split", "roi_id", "region", "true_stage", "predicted_stage"]
        .map(String::from)
        .to_vec();
    header.extend((0..cfg.n_classes).map(|c| format!("p_{}", class_name(cfg, c))));
    w.write_record(&header)?;
    for (split, e) in evals {
        for p in &e.predictions {
            let mut row = vec![
                split.to_string(),
                p.roi_id.clone(),
                p.region.name().to_string(),
                class_name(cfg, p.truth),
                class_name(cfg, p.pred),
            ];
            row.extend(p.probs.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn checkpoint_name(split: usize) -> String {
    if split == 0 {
        CHECKPOINT.to_string()
    } else {
        format!("checkpoint_split{split}.json")
    }
}

/// Train over `n_splits` patient-level splits (or the explicit split file)
/// and report test weighted F1 per region.
pub fn cmd_train(cfg: &RunConfig, built: Option<&Path>, split_file: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let built = input_path(built, &cfg.paths.built, "built directory")?;
    let mut m = RunManifest::new("train", cfg);
    m.input("built", &built);
    let samples = in_region(cfg, load_built(&built, cfg.model_name)?)?;
    let split_file = split_file.map(Path::to_path_buf).or_else(|| cfg.paths.split.clone());
    let plans: Vec<SplitPlan> = match &split_file {
        Some(p) => {
            m.input("split", p);
            let plans: Vec<SplitPlan> = read_json(p)?;
            if plans.is_empty() {
                return Err(Error::Validation(format!("{} lists no splits", p.display())));
            }
            plans
        }
        None => (0..cfg.model.n_splits)
            .map(|s| split_patients(&samples, &cfg.model, seed::derive(cfg.seed, &[stream::SPLIT, s as u64])))
            .collect::<Result<_>>()?,
    };
    for p in &plans {
        p.check(&samples)?;
    }
    create_dir(out)?;
    let mut evals = Vec::new();
    let mut log = csv_writer(&out.join(TRAINING_LOG))?;
    log.write_record(["split", "epoch", "train_loss", "monitor_f1", "monitor_loss"])?;
    for (k, plan) in plans.iter().enumerate() {
        let fit = select(&samples, &plan.fit_rois());
        let pv = select(&samples, &plan.pseudo_val_rois);
        let test = select(&samples, &plan.test_rois);
        if fit.is_empty() || test.is_empty() {
            return Err(Error::Empty(format!("split {k} has an empty train or test side")));
        }
        log::info!("split {k}: {} fit, {} pseudo-val, {} test", fit.len(), pv.len(), test.len());
        let run_seed = seed::derive(cfg.seed, &[stream::INIT, k as u64]);
        let outcome = train(cfg.model_name, &cfg.model, &fit, &pv, run_seed)?;
        for e in &outcome.log {
            log.write_record([
                k.to_string(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.monitor_f1.to_string(),
                e.monitor_loss.to_string(),
            ])?;
        }
        let mut graphs: Vec<RoISample> = test
            .iter()
            .map(|s| make_test_graph(s, &cfg.model))
            .collect::<Result<_>>()?;
        for g in graphs.iter_mut() {
            outcome.model.prepare(g)?;
        }
        evals.push(evaluate(&outcome.model, &graphs)?);
        let meta = CheckpointMeta {
            seed: run_seed,
            split: k,
            best_epoch: outcome.best_epoch,
            train_rois: plan.train_rois.clone(),
            test_rois: plan.test_rois.clone(),
        };
        let name = checkpoint_name(k);
        Checkpoint::from_model(&outcome.model, meta).save(&out.join(&name))?;
        m.outputs.push(name);
    }
    log.flush().map_err(|e| Error::io(&out.join(TRAINING_LOG), e))?;
    write_json(&out.join(SPLIT), &plans)?;
    let indexed: Vec<(usize, &Evaluation)> = evals.iter().enumerate().collect();
    write_predictions(&out.join(PREDICTIONS), &cfg.model, &indexed)?;
    write_json(&out.join(REPORT), &summarise(cfg.model_name, &cfg.model, &evals))?;
    m.outputs
        .extend([TRAINING_LOG, SPLIT, PREDICTIONS, REPORT].map(String::from));
    m.counts.insert("splits".into(), plans.len());
    m.counts.insert("rois".into(), samples.len());
    m.write(out, started)
}

fn checkpoint_path(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    input_path(flag, &cfg.paths.checkpoint, "checkpoint")
}

/// Test graphs of the checkpoint's held-out RoIs (all RoIs when it lists
/// none), prepared for the model.
fn held_out(cfg: &RunConfig, ck: &Checkpoint, built: &Path, model: &crate::model::Model) -> Result<Vec<RoISample>> {
    let samples = in_region(cfg, load_built(built, ck.model)?)?;
    let chosen = if ck.meta.test_rois.is_empty() {
        samples
    } else {
        select(&samples, &ck.meta.test_rois)
    };
    if chosen.is_empty() {
        return Err(Error::Empty("none of the checkpoint's test RoIs are in the built data".into()));
    }
    chosen
        .iter()
        .map(|s| {
            let mut g = make_test_graph(s, &ck.config)?;
            model.prepare(&mut g)?;
            Ok(g)
        })
        .collect()
}

/// Evaluate a checkpoint on its held-out RoIs.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, built: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let ck_path = checkpoint_path(checkpoint, cfg)?;
    let built = input_path(built, &cfg.paths.built, "built directory")?;
    let mut m = RunManifest::new("evaluate", cfg);
    m.input("checkpoint", &ck_path);
    m.input("built", &built);
    let ck = Checkpoint::load(&ck_path)?;
    let model = ck.to_model()?;
    let graphs = held_out(cfg, &ck, &built, &model)?;
    let eval = evaluate(&model, &graphs)?;
    create_dir(out)?;
    write_predictions(&out.join(PREDICTIONS), &ck.config, &[(ck.meta.split, &eval)])?;
    write_json(&out.join(REPORT), &summarise(ck.model, &ck.config, std::slice::from_ref(&eval)))?;
    m.outputs = vec![PREDICTIONS.into(), REPORT.into()];
    m.counts.insert("rois".into(), graphs.len());
    m.write(out, started)
}

/// Integrated-gradient tile and edge attributions plus explainer feature
/// importance for every held-out RoI of a checkpoint.
pub fn cmd_explain(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    built: Option<&Path>,
    top_k: Option<usize>,
    out: &Path,
) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let ck_path = checkpoint_path(checkpoint, cfg)?;
    let built = input_path(built, &cfg.paths.built, "built directory")?;
    let mut m = RunManifest::new("explain", cfg);
    m.input("checkpoint", &ck_path);
    m.input("built", &built);
    let ck = Checkpoint::load(&ck_path)?;
    let model = ck.to_model()?;
    if !model.choice.kind.uses_edges() {
        return Err(Error::ModelMismatch(format!(
            "checkpoint holds {}, explanations need a tile-graph model",
            model.choice
        )));
    }
    let graphs = held_out(cfg, &ck, &built, &model)?;
    let results: Vec<_> = graphs
        .par_iter()
        .map(|g| {
            let attr = integrated_gradients(&model, g, &cfg.ig)?;
            let masks = gnn_explain(&model, g, &cfg.explainer)?;
            Ok((attr, masks))
        })
        .collect::<Result<_>>()?;
    create_dir(out)?;

    let mut aw = csv_writer(&out.join(ATTRIBUTIONS))?;
    aw.write_record(["roi_id", "tile_id", "node_ig", "rank"])?;
    let mut ew = csv_writer(&out.join(EDGE_ATTRIBUTIONS))?;
    ew.write_record(["roi_id", "u", "v", "edge_ig"])?;
    let mut cw = csv_writer(&out.join(COMPLETENESS))?;
    cw.write_record(["roi_id", "target_class", "f_input", "f_baseline", "sum_edge_ig", "completeness_gap"])?;
    let k = top_k.or(cfg.top_k);
    let mut tw = match k {
        Some(_) => {
            let mut w = csv_writer(&out.join(TOP_TILES))?;
            w.write_record(["roi_id", "rank", "tile_id", "node_ig"])?;
            Some(w)
        }
        None => None,
    };
    for (attr, _) in &results {
        for r in rank_tiles(attr, attr.node_ig.len()) {
            aw.write_record([attr.roi_id.clone(), r.tile_id.to_string(), r.node_ig.to_string(), r.rank.to_string()])?;
        }
        for (&(u, v), a) in attr.edges.iter().zip(&attr.edge_ig) {
            ew.write_record([
                attr.roi_id.clone(),
                attr.tile_ids[u].to_string(),
                attr.tile_ids[v].to_string(),
                a.to_string(),
            ])?;
        }
        cw.write_record([
            attr.roi_id.clone(),
            class_name(&ck.config, attr.target_class),
            attr.f_input.to_string(),
            attr.f_baseline.to_string(),
            attr.edge_ig.iter().sum::<f64>().to_string(),
            attr.completeness_gap.to_string(),
        ])?;
        if let (Some(w), Some(k)) = (tw.as_mut(), k) {
            for r in rank_tiles(attr, k) {
                w.write_record([attr.roi_id.clone(), r.rank.to_string(), r.tile_id.to_string(), r.node_ig.to_string()])?;
            }
        }
    }
    aw.flush().map_err(|e| Error::io(&out.join(ATTRIBUTIONS), e))?;
    ew.flush().map_err(|e| Error::io(&out.join(EDGE_ATTRIBUTIONS), e))?;
    cw.flush().map_err(|e| Error::io(&out.join(COMPLETENESS), e))?;
    if let Some(mut w) = tw {
        w.flush().map_err(|e| Error::io(&out.join(TOP_TILES), e))?;
        m.outputs.push(TOP_TILES.into());
    }

    let masks: Vec<_> = results.into_iter().map(|(_, mk)| mk).collect();
    let report = feature_importance_report(&masks, &tile_feature_names(ck.config.cell_embed_dim))?;
    let mut fw = csv_writer(&out.join(FEATURE_IMPORTANCE))?;
    fw.write_record(["feature_name", "mean_mask", "rank"])?;
    for f in &report {
        fw.write_record([f.feature_name.clone(), f.mean_mask.to_string(), f.rank.to_string()])?;
    }
    fw.flush().map_err(|e| Error::io(&out.join(FEATURE_IMPORTANCE), e))?;
    m.outputs
        .extend([ATTRIBUTIONS, EDGE_ATTRIBUTIONS, COMPLETENESS, FEATURE_IMPORTANCE].map(String::from));
    m.counts.insert("rois".into(), masks.len());
    m.write(out, started)
}

/// Size the global worker pool from `TMEGRAPH_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV}={raw} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = RunConfig {
            planted: Some(PlantedKind::TopologyOnly),
            region: Some(Region::Front),
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 3, "model": {"dropout": 0.1}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.model.dropout, 0.1);
        assert_eq!(partial.model.hidden_dim, 32);
    }

    #[test]
    fn merged_class_names() {
        let cfg = HierModelConfig {
            n_classes: 2,
            class_map: vec![0, 1, 1],
            ..HierModelConfig::default()
        };
        assert_eq!(class_name(&cfg, 0), "pT1");
        assert_eq!(class_name(&cfg, 1), "pT2+pT3");
    }

    #[test]
    fn report_statistics() {
        use crate::model::RegionScore;
        let ev = |f: f64| Evaluation {
            predictions: vec![],
            rows: vec![RegionScore {
                region: "All".into(),
                n: 4,
                weighted_f1: f,
            }],
        };
        let r = summarise("mlp".parse().unwrap(), &HierModelConfig::default(), &[ev(0.5), ev(1.0)]);
        assert_eq!(r.rows.len(), 1);
        assert!((r.rows[0].mean_f1 - 0.75).abs() < 1e-15);
        assert!((r.rows[0].std_f1 - 0.25).abs() < 1e-15);
    }
}
