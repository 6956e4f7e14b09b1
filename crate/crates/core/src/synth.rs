//! Synthetic multiplexed tissue.
//!
//! Each RoI is generated independently from a seed derived from the root
//! seed, the patient index and the RoI index, on two separate streams:
//! one for counts and cell attributes, one for positions. Classes that share
//! every knob except placement therefore produce bit-identical attributes.
//!
//! Placement follows a two-stage cluster process. Tumour nests are parents
//! (count ~ Poisson, at least one) with uniform centres, and epithelial cells
//! are Gaussian offspring around a random nest. An immune cell lands in a nest
//! with probability `mixing` and otherwise is placed uniformly away from all
//! nests. Tregs can instead join one of a few tight Treg clusters, which are
//! themselves placed by the same mixing rule.
//!
//! Expressions are `max(0, level + N(0, noise))` on the cell's own marker and
//! `max(0, background + N(0, noise))` elsewhere.

use log::debug;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CellRecord, Phenotype, RoIRecord, Region, Stage};
use crate::seed::{self, stream, Rng};

/// Per-class generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassKnobs {
    /// Probability that an immune cell is placed inside a tumour nest.
    pub mixing: f64,
    /// Probability that a Treg joins a Treg cluster.
    pub treg_cluster_rate: f64,
    /// Splits the combined CD4 + CD8 intensity.
    pub cd4_cd8_ratio: f64,
    /// Expected cells per RoI for (CD4, CD8, CD20, FoxP3, CK) cells.
    pub lambda: [f64; 5],
    /// Own-marker expression level for each phenotype, same order.
    pub marker_level: [f64; 5],
}

impl Default for ClassKnobs {
    fn default() -> Self {
        ClassKnobs {
            mixing: 0.5,
            treg_cluster_rate: 0.0,
            cd4_cd8_ratio: 1.0,
            lambda: [300.0, 300.0, 150.0, 100.0, 800.0],
            marker_level: [1.0; 5],
        }
    }
}

impl ClassKnobs {
    /// Intensities after applying the CD4:CD8 split.
    pub fn effective_lambda(&self) -> [f64; 5] {
        let mut l = self.lambda;
        let t = l[0] + l[1];
        let r = self.cd4_cd8_ratio;
        l[0] = t * r / (1.0 + r);
        l[1] = t / (1.0 + r);
        l
    }

    fn validate(&self, k: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("class {k}: {what}")));
        if !(0.0..=1.0).contains(&self.mixing) {
            return bad("mixing must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.treg_cluster_rate) {
            return bad("treg_cluster_rate must lie in [0, 1]");
        }
        if !(self.cd4_cd8_ratio > 0.0 && self.cd4_cd8_ratio.is_finite()) {
            return bad("cd4_cd8_ratio must be positive");
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("intensities must be nonnegative");
        }
        if self.lambda.iter().sum::<f64>() <= 0.0 {
            return bad("intensities sum to zero, no cells would be generated");
        }
        if self.marker_level.iter().any(|l| !l.is_finite()) {
            return bad("marker levels must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub rois_per_patient: usize,
    pub roi_size: u32,
    /// Stage priors, one per class.
    pub class_priors: Vec<f64>,
    pub classes: Vec<ClassKnobs>,
    pub marker_noise: f64,
    /// Mean of the off-marker expression before clipping at zero.
    pub background: f64,
    /// Expected number of tumour nests per RoI.
    pub n_nests: f64,
    pub nest_sigma: f64,
    pub treg_clusters: usize,
    pub treg_cluster_sigma: f64,
    pub area_range: [f64; 2],
    pub solidity_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 30,
            rois_per_patient: 4,
            roi_size: 2048,
            class_priors: vec![1.0 / 3.0; 3],
            classes: vec![
                ClassKnobs {
                    mixing: 0.0,
                    ..ClassKnobs::default()
                },
                ClassKnobs {
                    mixing: 0.5,
                    treg_cluster_rate: 0.5,
                    ..ClassKnobs::default()
                },
                ClassKnobs {
                    mixing: 1.0,
                    treg_cluster_rate: 1.0,
                    ..ClassKnobs::default()
                },
            ],
            marker_noise: 0.1,
            background: -0.5,
            n_nests: 8.0,
            nest_sigma: 60.0,
            treg_clusters: 3,
            treg_cluster_sigma: 25.0,
            area_range: [40.0, 160.0],
            solidity_range: [0.75, 1.0],
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.rois_per_patient == 0 {
            return Err(Error::Config("cohort must have at least one patient and one RoI".into()));
        }
        if self.roi_size == 0 {
            return Err(Error::Config("roi_size must be positive".into()));
        }
        let c = self.classes.len();
        if c == 0 || c > Stage::ALL.len() {
            return Err(Error::Config(format!("between 1 and {} classes required, got {c}", Stage::ALL.len())));
        }
        if self.class_priors.len() != c {
            return Err(Error::Config(format!(
                "{} priors for {c} classes",
                self.class_priors.len()
            )));
        }
        if self.class_priors.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("priors must be nonnegative".into()));
        }
        let s: f64 = self.class_priors.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("priors sum to {s}, expected 1")));
        }
        for (k, knobs) in self.classes.iter().enumerate() {
            knobs.validate(k)?;
        }
        if !(self.marker_noise >= 0.0 && self.marker_noise.is_finite()) {
            return Err(Error::Config("marker_noise must be nonnegative".into()));
        }
        if !self.background.is_finite() {
            return Err(Error::Config("background must be finite".into()));
        }
        if !(self.n_nests >= 0.0 && self.nest_sigma > 0.0 && self.treg_cluster_sigma > 0.0) {
            return Err(Error::Config("nest parameters must be positive".into()));
        }
        let [a0, a1] = self.area_range;
        let [s0, s1] = self.solidity_range;
        if !(a0 > 0.0 && a0 <= a1) || !(0.0 <= s0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::Config("area/solidity ranges invalid".into()));
        }
        Ok(())
    }
}

/// Ground truth for one generated RoI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoITruth {
    pub roi_id: String,
    pub patient_id: String,
    pub class: usize,
    pub stage: Stage,
    pub seed: u64,
    pub n_nests: usize,
    pub knobs: ClassKnobs,
    pub counts: [usize; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub rois: Vec<RoIRecord>,
    /// True phenotype of each cell, parallel to `rois[i].cells`.
    pub phenotypes: Vec<Vec<Phenotype>>,
    pub truth: Vec<RoITruth>,
}

impl Cohort {
    pub fn n_cells(&self) -> usize {
        self.rois.iter().map(|r| r.cells.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedKind {
    TopologyOnly,
    FeatureOnly,
}

pub fn patient_id(p: usize) -> String {
    format!("P{p:03}")
}

pub fn roi_id(p: usize, r: usize) -> String {
    format!("P{p:03}_R{r}")
}

fn draw_class(priors: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    priors.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn poisson(lambda: f64, rng: &mut Rng) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as usize
}

struct Placer<'a> {
    size: f64,
    nests: &'a [[f64; 2]],
    sigma: f64,
    gauss: Normal<f64>,
}

impl Placer<'_> {
    fn inside(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[0] < self.size && p[1] >= 0.0 && p[1] < self.size
    }

    fn uniform(&self, rng: &mut Rng) -> [f64; 2] {
        [rng.random_range(0.0..self.size), rng.random_range(0.0..self.size)]
    }

    /// Gaussian offset around `centre`, redrawn until inside the RoI.
    fn around(&self, centre: [f64; 2], sigma: f64, rng: &mut Rng) -> [f64; 2] {
        for _ in 0..1000 {
            let p = [
                centre[0] + sigma * self.gauss.sample(rng),
                centre[1] + sigma * self.gauss.sample(rng),
            ];
            if self.inside(p) {
                return p;
            }
        }
        self.uniform(rng)
    }

    fn in_nest(&self, rng: &mut Rng) -> [f64; 2] {
        let c = self.nests[rng.random_range(0..self.nests.len())];
        self.around(c, self.sigma, rng)
    }

    /// Uniform, rejecting points within two nest widths of any nest.
    fn away(&self, rng: &mut Rng) -> [f64; 2] {
        let r2 = (2.0 * self.sigma).powi(2);
        let mut p = self.uniform(rng);
        for _ in 0..50 {
            let near = self
                .nests
                .iter()
                .any(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) < r2);
            if !near {
                break;
            }
            p = self.uniform(rng);
        }
        p
    }

    fn immune(&self, mixing: f64, rng: &mut Rng) -> [f64; 2] {
        if rng.random::<f64>() < mixing {
            self.in_nest(rng)
        } else {
            self.away(rng)
        }
    }
}

/// Generate one RoI. Returns the record and the true phenotype of each cell.
pub fn generate_roi(
    cfg: &SynthConfig,
    knobs: &ClassKnobs,
    patient: usize,
    index: usize,
    stage: Stage,
) -> (RoIRecord, Vec<Phenotype>, RoITruth) {
    let roi_seed = seed::derive(cfg.rng_seed, &[stream::SYNTH, patient as u64, index as u64]);
    let mut attr = seed::child_rng(roi_seed, &[0]);
    let mut pos = seed::child_rng(roi_seed, &[1]);
    let size = cfg.roi_size as f64;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    let lambda = knobs.effective_lambda();
    let mut counts = [0usize; 5];
    for (c, &l) in counts.iter_mut().zip(&lambda) {
        *c = poisson(l, &mut attr);
    }
    let n_nests = poisson(cfg.n_nests, &mut pos).max(1);
    let nests: Vec<[f64; 2]> = (0..n_nests)
        .map(|_| [pos.random_range(0.0..size), pos.random_range(0.0..size)])
        .collect();
    let placer = Placer {
        size,
        nests: &nests,
        sigma: cfg.nest_sigma,
        gauss,
    };
    let treg_centres: Vec<[f64; 2]> = (0..cfg.treg_clusters)
        .map(|_| placer.immune(knobs.mixing, &mut pos))
        .collect();

    // Epithelial first, then immune types in marker order.
    let order = [
        Phenotype::Epithelial,
        Phenotype::THelper,
        Phenotype::TCytotoxic,
        Phenotype::BCell,
        Phenotype::TReg,
    ];
    let mut cells = Vec::with_capacity(counts.iter().sum());
    let mut labels = Vec::with_capacity(cells.capacity());
    for p in order {
        for _ in 0..counts[p.marker()] {
            let xy = match p {
                Phenotype::Epithelial => placer.in_nest(&mut pos),
                Phenotype::TReg if !treg_centres.is_empty() && pos.random::<f64>() < knobs.treg_cluster_rate => {
                    let c = treg_centres[pos.random_range(0..treg_centres.len())];
                    placer.around(c, cfg.treg_cluster_sigma, &mut pos)
                }
                _ => placer.immune(knobs.mixing, &mut pos),
            };
            let mut expr = [0.0; 5];
            for (m, e) in expr.iter_mut().enumerate() {
                let mean = if m == p.marker() { knobs.marker_level[m] } else { cfg.background };
                *e = (mean + cfg.marker_noise * gauss.sample(&mut attr)).max(0.0);
            }
            let area = attr.random_range(cfg.area_range[0]..=cfg.area_range[1]);
            let solidity = attr.random_range(cfg.solidity_range[0]..=cfg.solidity_range[1]);
            cells.push(CellRecord {
                cell_id: cells.len().to_string(),
                x: xy[0],
                y: xy[1],
                area,
                solidity,
                expr,
                phenotype: None,
            });
            labels.push(p);
        }
    }

    let class = stage.index();
    let record = RoIRecord {
        roi_id: roi_id(patient, index),
        patient_id: patient_id(patient),
        // cycle over the cohort so every region occurs whatever the RoI count
        region: Region::ALL[(patient * cfg.rois_per_patient + index) % Region::ALL.len()],
        stage,
        width: cfg.roi_size,
        height: cfg.roi_size,
        cells,
    };
    let truth = RoITruth {
        roi_id: record.roi_id.clone(),
        patient_id: record.patient_id.clone(),
        class,
        stage,
        seed: roi_seed,
        n_nests,
        knobs: knobs.clone(),
        counts,
    };
    (record, labels, truth)
}

/// Stage of each patient, drawn from the class priors.
pub fn patient_stages(cfg: &SynthConfig) -> Vec<Stage> {
    (0..cfg.n_patients)
        .map(|p| {
            let mut rng = seed::child_rng(cfg.rng_seed, &[stream::SYNTH, u64::MAX, p as u64]);
            Stage::from_index(draw_class(&cfg.class_priors, &mut rng)).expect("class index in range")
        })
        .collect()
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let stages = patient_stages(cfg);
    let jobs: Vec<(usize, usize)> = (0..cfg.n_patients)
        .flat_map(|p| (0..cfg.rois_per_patient).map(move |r| (p, r)))
        .collect();
    let out: Vec<_> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let stage = stages[p];
            generate_roi(cfg, &cfg.classes[stage.index()], p, r, stage)
        })
        .collect();
    let mut cohort = Cohort {
        rois: Vec::with_capacity(out.len()),
        phenotypes: Vec::with_capacity(out.len()),
        truth: Vec::with_capacity(out.len()),
    };
    for (roi, labels, truth) in out {
        cohort.rois.push(roi);
        cohort.phenotypes.push(labels);
        cohort.truth.push(truth);
    }
    if cohort.n_cells() == 0 {
        return Err(Error::Config("configuration produced no cells".into()));
    }
    debug!("generated {} rois, {} cells", cohort.rois.len(), cohort.n_cells());
    Ok(cohort)
}

/// Class knobs of a planted cohort, derived from the first class of `cfg`.
///
/// * `TopologyOnly`: classes differ only in nest mixing (0, 0.5, 1) and Treg
///   clustering (0, 0.5, 1). Counts and attributes share a distribution.
/// * `FeatureOnly`: classes share placement and differ only in the B-cell
///   CD20 level (1.0, 1.75, 2.5), which moves the `mean_expr_cd20` metric.
pub fn planted_classes(kind: PlantedKind, cfg: &SynthConfig) -> Vec<ClassKnobs> {
    let base = cfg.classes.first().cloned().unwrap_or_default();
    let n = cfg.class_priors.len().clamp(1, 3);
    (0..n)
        .map(|k| {
            let t = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
            let mut knobs = base.clone();
            match kind {
                PlantedKind::TopologyOnly => {
                    knobs.mixing = t;
                    knobs.treg_cluster_rate = t;
                }
                PlantedKind::FeatureOnly => {
                    knobs.mixing = 0.5;
                    knobs.treg_cluster_rate = 0.0;
                    knobs.marker_level[Phenotype::BCell.marker()] = 1.0 + 1.5 * t;
                }
            }
            knobs
        })
        .collect()
}

pub fn planted_signal_cohort(kind: PlantedKind, cfg: &SynthConfig) -> Result<Cohort> {
    let mut cfg = cfg.clone();
    cfg.classes = planted_classes(kind, &cfg);
    generate_cohort(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{phenotype_cells, write_cell_table};
    use crate::metrics::interaction_ratio;
    use crate::graph::build_graph;

    fn small(n_patients: usize, rois: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients,
            rois_per_patient: rois,
            rng_seed: seed,
            ..SynthConfig::default()
        }
    }

    fn csv_bytes(c: &Cohort) -> Vec<u8> {
        let mut buf = Vec::new();
        write_cell_table(&mut buf, &c.rois, Some(&c.phenotypes)).unwrap();
        buf
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small(3, 2, 11);
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        assert_eq!(csv_bytes(&a), csv_bytes(&b));
        assert_eq!(a.truth, b.truth);
        let c = generate_cohort(&small(3, 2, 12)).unwrap();
        assert_ne!(csv_bytes(&a), csv_bytes(&c));
    }

    #[test]
    fn records_are_valid() {
        let c = generate_cohort(&small(2, 4, 3)).unwrap();
        for roi in &c.rois {
            roi.check_bounds().unwrap();
            for cell in &roi.cells {
                cell.validate().unwrap();
            }
        }
        let regions: Vec<Region> = c.rois[..4].iter().map(|r| r.region).collect();
        assert_eq!(regions, Region::ALL.to_vec());
        assert_eq!(c.rois[0].stage, c.rois[3].stage);
        let c = generate_cohort(&small(2, 3, 3)).unwrap();
        for r in Region::ALL {
            assert!(c.rois.iter().any(|x| x.region == r), "{r} missing");
        }
    }

    #[test]
    fn cell_counts_follow_poisson_mean() {
        let cfg = small(25, 4, 5);
        let c = generate_cohort(&cfg).unwrap();
        let n = c.rois.len() as f64;
        let total: f64 = c.rois.iter().map(|r| r.cells.len() as f64).sum();
        let lambda: f64 = cfg.classes[0].lambda.iter().sum();
        // Sum of Poissons: mean and variance both lambda per RoI.
        let se = (lambda / n).sqrt();
        assert!((total / n - lambda).abs() < 3.0 * se, "mean {} vs {lambda}", total / n);
    }

    #[test]
    fn mixing_raises_interaction_ratio() {
        let mut cfg = small(50, 1, 8);
        cfg.class_priors = vec![1.0];
        let mean_ratio = |mixing: f64| {
            let mut cfg = cfg.clone();
            cfg.classes = vec![ClassKnobs {
                mixing,
                ..ClassKnobs::default()
            }];
            let c = generate_cohort(&cfg).unwrap();
            let mut s = 0.0;
            for (roi, labels) in c.rois.iter().zip(&c.phenotypes) {
                let pts: Vec<[f64; 2]> = roi.cells.iter().map(|c| [c.x, c.y]).collect();
                let g = build_graph(&pts, vec![], 0, 30.0).unwrap().with_labels(labels.clone()).unwrap();
                s += interaction_ratio(&g).unwrap();
            }
            s / c.rois.len() as f64
        };
        let (lo, hi) = (mean_ratio(0.0), mean_ratio(1.0));
        assert!(hi > lo, "ratio at mixing 1 ({hi}) not above mixing 0 ({lo})");
    }

    #[test]
    fn invalid_priors_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.class_priors = vec![0.5, 0.3, 0.3];
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
        cfg.class_priors = vec![0.5, 0.5];
        assert!(generate_cohort(&cfg).is_err());
    }

    #[test]
    fn zero_cells_rejected() {
        let mut cfg = SynthConfig::default();
        for k in &mut cfg.classes {
            k.lambda = [0.0; 5];
        }
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn class_counts_match_priors() {
        let mut cfg = small(600, 1, 21);
        cfg.class_priors = vec![0.2, 0.5, 0.3];
        let stages = patient_stages(&cfg);
        let n = stages.len() as f64;
        for (k, &p) in cfg.class_priors.iter().enumerate() {
            let count = stages.iter().filter(|s| s.index() == k).count() as f64;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((count - n * p).abs() < 3.0 * sd, "class {k}: {count} vs {}", n * p);
        }
    }

    #[test]
    fn cd4_cd8_ratio_preserves_total() {
        let k = ClassKnobs {
            cd4_cd8_ratio: 3.0,
            ..ClassKnobs::default()
        };
        let l = k.effective_lambda();
        assert_eq!(l[0] + l[1], 600.0);
        assert_eq!(l[0], 450.0);
    }

    /// Calibration: recovery of true phenotypes by percentile ranking as the
    /// marker noise grows. Recovery stays at or above 95% up to noise 0.2.
    #[test]
    fn phenotype_recovery_calibration() {
        let mut recovered = Vec::new();
        for noise in [0.05, 0.1, 0.2, 0.5] {
            let mut cfg = small(4, 1, 99);
            cfg.marker_noise = noise;
            let c = generate_cohort(&cfg).unwrap();
            let exprs: Vec<[f64; 5]> = c.rois.iter().flat_map(|r| r.cells.iter().map(|c| c.expr)).collect();
            let truth: Vec<Phenotype> = c.phenotypes.concat();
            let got = phenotype_cells(&exprs).unwrap();
            let hits = got.iter().zip(&truth).filter(|(a, b)| a == b).count();
            recovered.push((noise, hits as f64 / truth.len() as f64));
            eprintln!("noise {noise}: recovery {}", hits as f64 / truth.len() as f64);
        }
        for &(noise, r) in &recovered {
            if noise <= 0.2 {
                assert!(r >= 0.95, "noise {noise}: recovery {r}");
            }
        }
        assert!(recovered[3].1 < recovered[0].1);
    }
}
