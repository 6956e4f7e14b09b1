use std::sync::Arc;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HierModelConfig, CELL_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::graph::{build_graph, SpatialGraph};
use crate::ingest::{sample_tiles, Phenotype, RoIRecord, Region, Stage, TileSpec};
use crate::metrics::{metric_vector, MetricVector, N_METRICS};
use crate::seed::{self, stream};

/// One labelled RoI: a tile graph whose nodes carry the 68 tile metrics, and
/// the cell graph of every tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoISample {
    pub roi_id: String,
    pub patient_id: String,
    pub region: Region,
    pub stage: Stage,
    pub tiles: Vec<TileSpec>,
    /// Nodes at tile centroids, features = metric vector of each tile.
    pub tile_graph: SpatialGraph,
    /// Cell graphs with raw 7-dim features and phenotype labels.
    pub cell_graphs: Vec<Arc<SpatialGraph>>,
    /// Mean of the 7 raw cell features over every cell of the RoI.
    pub cell_mean: [f64; CELL_FEATURE_DIM],
    pub threshold: f64,
    /// Cached tile embeddings (row-major, tiles x embed dim) and the
    /// fingerprint of the encoder that produced them.
    #[serde(skip)]
    pub embeddings: Option<(u64, Arc<Vec<f64>>)>,
}

impl RoISample {
    pub fn n_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn metrics_row(&self, t: usize) -> &[f64] {
        self.tile_graph.node_features(t)
    }

    pub fn check(&self) -> Result<()> {
        if self.tile_graph.n_nodes() != self.cell_graphs.len() || self.tiles.len() != self.cell_graphs.len() {
            return Err(Error::Validation(format!(
                "roi {}: {} tile nodes, {} tiles, {} cell graphs",
                self.roi_id,
                self.tile_graph.n_nodes(),
                self.tiles.len(),
                self.cell_graphs.len()
            )));
        }
        if self.tile_graph.feature_dim != N_METRICS {
            return Err(Error::Shape(format!(
                "roi {}: tile features have dim {}, expected {N_METRICS}",
                self.roi_id, self.tile_graph.feature_dim
            )));
        }
        Ok(())
    }

    /// Same RoI restricted to tiles `keep` (ascending) with the tile graph
    /// rebuilt at threshold `k`.
    fn select(&self, keep: &[usize], k: f64) -> Result<RoISample> {
        let coords: Vec<[f64; 2]> = keep.iter().map(|&t| self.tile_graph.coords[t]).collect();
        let features: Vec<f64> = keep.iter().flat_map(|&t| self.metrics_row(t).iter().copied()).collect();
        let tile_graph = build_graph(&coords, features, N_METRICS, k)?;
        let embeddings = self.embeddings.as_ref().map(|(fp, e)| {
            let d = e.len() / self.n_tiles().max(1);
            let rows: Vec<f64> = keep.iter().flat_map(|&t| e[t * d..(t + 1) * d].iter().copied()).collect();
            (*fp, Arc::new(rows))
        });
        Ok(RoISample {
            roi_id: self.roi_id.clone(),
            patient_id: self.patient_id.clone(),
            region: self.region,
            stage: self.stage,
            tiles: keep.iter().map(|&t| self.tiles[t]).collect(),
            tile_graph,
            cell_graphs: keep.iter().map(|&t| self.cell_graphs[t].clone()).collect(),
            cell_mean: self.cell_mean,
            threshold: k,
            embeddings,
        })
    }
}

/// Metric block first, embedding after.
pub fn assemble_tile_features(embedding: &[f64], metrics: &MetricVector, embed_dim: usize) -> Result<Vec<f64>> {
    if embedding.len() != embed_dim || metrics.values.len() != N_METRICS {
        return Err(Error::Shape(format!(
            "cannot assemble {} metrics with a {}-dim embedding (expected {N_METRICS} and {embed_dim})",
            metrics.values.len(),
            embedding.len()
        )));
    }
    let mut v = metrics.values.clone();
    v.extend_from_slice(embedding);
    Ok(v)
}

/// Build the sample of one phenotyped RoI over the given tiles.
pub fn build_sample(roi: &RoIRecord, tiles: &[TileSpec], cfg: &HierModelConfig) -> Result<RoISample> {
    if tiles.is_empty() {
        return Err(Error::Empty(format!("roi {} has no tiles", roi.roi_id)));
    }
    let mut cell_graphs = Vec::with_capacity(tiles.len());
    let mut metrics = Vec::with_capacity(tiles.len() * N_METRICS);
    for tile in tiles {
        let mut pts = Vec::new();
        let mut feats = Vec::new();
        let mut labels: Vec<Phenotype> = Vec::new();
        for c in roi.cells.iter().filter(|c| tile.contains(c.x, c.y)) {
            let p = c.phenotype.ok_or_else(|| {
                Error::Validation(format!("roi {}: cell {} has no phenotype", roi.roi_id, c.cell_id))
            })?;
            pts.push([c.x, c.y]);
            feats.extend(c.features());
            labels.push(p);
        }
        let g = build_graph(&pts, feats, CELL_FEATURE_DIM, cfg.cell_k)?.with_labels(labels)?;
        metrics.extend(metric_vector(&g)?.values);
        cell_graphs.push(Arc::new(g));
    }
    let centroids: Vec<[f64; 2]> = tiles.iter().map(|t| [t.centroid.0, t.centroid.1]).collect();
    let tile_graph = build_graph(&centroids, metrics, N_METRICS, cfg.tile_k_default)?;

    let mut cell_mean = [0.0; CELL_FEATURE_DIM];
    if !roi.cells.is_empty() {
        for c in &roi.cells {
            for (m, f) in cell_mean.iter_mut().zip(c.features()) {
                *m += f;
            }
        }
        for m in cell_mean.iter_mut() {
            *m /= roi.cells.len() as f64;
        }
    }
    Ok(RoISample {
        roi_id: roi.roi_id.clone(),
        patient_id: roi.patient_id.clone(),
        region: roi.region,
        stage: roi.stage,
        tiles: tiles.to_vec(),
        tile_graph,
        cell_graphs,
        cell_mean,
        threshold: cfg.tile_k_default,
        embeddings: None,
    })
}

/// Sample tiles and build every RoI, in parallel. Tile positions come from a
/// seed derived from the root seed and the RoI id.
pub fn build_dataset(rois: &[RoIRecord], cfg: &HierModelConfig, root_seed: u64) -> Result<Vec<RoISample>> {
    rois.par_iter()
        .map(|roi| {
            let s = seed::derive(root_seed, &[stream::TILES, seed::label(&roi.roi_id)]);
            let tiles = sample_tiles(roi, cfg.tiles_per_roi, cfg.tile_size, s)?;
            build_sample(roi, &tiles, cfg)
        })
        .collect()
}

/// Random training view: keep `round(augment_keep * n)` tiles chosen
/// uniformly and rebuild the tile graph at a threshold drawn from
/// `augment_thresholds`. Cell graphs of kept tiles are shared, not rebuilt.
pub fn augment(sample: &RoISample, cfg: &HierModelConfig, rng_seed: u64) -> Result<RoISample> {
    let n = sample.n_tiles();
    if n == 0 {
        return Err(Error::Empty(format!("roi {} has no tiles", sample.roi_id)));
    }
    let mut rng = seed::rng(rng_seed);
    let keep_n = ((cfg.augment_keep * n as f64).round() as usize).clamp(1, n);
    let mut keep = index::sample(&mut rng, n, keep_n).into_vec();
    keep.sort_unstable();
    let k = cfg.augment_thresholds[rng.random_range(0..cfg.augment_thresholds.len())];
    sample.select(&keep, k)
}

/// Evaluation view: every tile, default threshold.
pub fn make_test_graph(sample: &RoISample, cfg: &HierModelConfig) -> Result<RoISample> {
    let all: Vec<usize> = (0..sample.n_tiles()).collect();
    sample.select(&all, cfg.tile_k_default)
}
