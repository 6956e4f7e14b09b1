//! Cell tables, RoI label tables, phenotyping and tile sampling.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Marker channels in expression-vector order.
pub const MARKERS: [&str; 5] = ["cd4", "cd8", "cd20", "foxp3", "ck"];

/// Names of the seven per-cell node features, in order.
pub const CELL_FEATURES: [&str; 7] = ["cd4", "cd8", "cd20", "foxp3", "ck", "area", "solidity"];

pub const DEFAULT_ROI_SIZE: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phenotype {
    #[serde(rename = "cd4")]
    THelper,
    #[serde(rename = "cd8")]
    TCytotoxic,
    #[serde(rename = "cd20")]
    BCell,
    #[serde(rename = "foxp3")]
    TReg,
    #[serde(rename = "ck")]
    Epithelial,
}

impl Phenotype {
    pub const ALL: [Phenotype; 5] = [
        Phenotype::THelper,
        Phenotype::TCytotoxic,
        Phenotype::BCell,
        Phenotype::TReg,
        Phenotype::Epithelial,
    ];
    pub const IMMUNE: [Phenotype; 4] = [
        Phenotype::THelper,
        Phenotype::TCytotoxic,
        Phenotype::BCell,
        Phenotype::TReg,
    ];

    /// Index of the defining marker in the expression vector.
    pub fn marker(self) -> usize {
        self as usize
    }

    pub fn from_marker(marker: usize) -> Option<Self> {
        Self::ALL.get(marker).copied()
    }

    pub fn is_immune(self) -> bool {
        self != Phenotype::Epithelial
    }

    /// Short lowercase tag used in file formats and metric names.
    pub fn tag(self) -> &'static str {
        MARKERS[self.marker()]
    }
}

impl fmt::Display for Phenotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Phenotype {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cd4" | "thelper" => Ok(Phenotype::THelper),
            "cd8" | "tcytotoxic" => Ok(Phenotype::TCytotoxic),
            "cd20" | "bcell" => Ok(Phenotype::BCell),
            "foxp3" | "treg" => Ok(Phenotype::TReg),
            "ck" | "epithelial" => Ok(Phenotype::Epithelial),
            other => Err(format!("unknown phenotype `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Centre,
    Front,
    Mucosa,
    Stroma,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Centre, Region::Front, Region::Mucosa, Region::Stroma];

    pub fn name(self) -> &'static str {
        match self {
            Region::Centre => "Centre",
            Region::Front => "Front",
            Region::Mucosa => "Mucosa",
            Region::Stroma => "Stroma",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "centre" | "center" => Ok(Region::Centre),
            "front" => Ok(Region::Front),
            "mucosa" => Ok(Region::Mucosa),
            "stroma" => Ok(Region::Stroma),
            other => Err(format!("unknown region `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "pT1")]
    PT1,
    #[serde(rename = "pT2")]
    PT2,
    #[serde(rename = "pT3")]
    PT3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PT1, Stage::PT2, Stage::PT3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::PT1 => "pT1",
            Stage::PT2 => "pT2",
            Stage::PT3 => "pT3",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pt1" | "1" => Ok(Stage::PT1),
            "pt2" | "2" => Ok(Stage::PT2),
            "pt3" | "3" => Ok(Stage::PT3),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// One segmented nucleus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: String,
    pub x: f64,
    pub y: f64,
    pub area: f64,
    pub solidity: f64,
    /// Mean nuclear expression for (CD4, CD8, CD20, FoxP3, CK).
    pub expr: [f64; 5],
    /// Unset until [`assign_phenotypes`] runs.
    pub phenotype: Option<Phenotype>,
}

impl CellRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.area > 0.0) {
            return Err(Error::Validation(format!(
                "cell {}: area must be positive, got {}",
                self.cell_id, self.area
            )));
        }
        if !(0.0..=1.0).contains(&self.solidity) {
            return Err(Error::Validation(format!(
                "cell {}: solidity {} outside [0,1]",
                self.cell_id, self.solidity
            )));
        }
        if self.expr.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::Validation(format!(
                "cell {}: expressions must be finite and nonnegative",
                self.cell_id
            )));
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::Validation(format!("cell {}: non-finite coordinate", self.cell_id)));
        }
        Ok(())
    }

    /// The seven node features (5 expressions, area, solidity).
    pub fn features(&self) -> [f64; 7] {
        let e = &self.expr;
        [e[0], e[1], e[2], e[3], e[4], self.area, self.solidity]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoIRecord {
    pub roi_id: String,
    pub patient_id: String,
    pub region: Region,
    pub stage: Stage,
    pub width: u32,
    pub height: u32,
    pub cells: Vec<CellRecord>,
}

impl RoIRecord {
    pub fn check_bounds(&self) -> Result<()> {
        for c in &self.cells {
            if !(c.x >= 0.0 && c.x < self.width as f64 && c.y >= 0.0 && c.y < self.height as f64) {
                return Err(Error::Validation(format!(
                    "roi {}: cell {} at ({}, {}) outside [0,{})x[0,{})",
                    self.roi_id, c.cell_id, c.x, c.y, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Row of the optional `rois.csv` label table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoILabel {
    pub roi_id: String,
    pub patient_id: String,
    pub region: Region,
    pub stage: Stage,
    pub width: u32,
    pub height: u32,
}

/// Maps each logical field to the header name used in a cell table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub roi_id: String,
    pub patient_id: String,
    pub region: String,
    pub stage: String,
    pub x: String,
    pub y: String,
    pub area: String,
    pub solidity: String,
    pub markers: [String; 5],
    /// Optional; row index within the RoI is used when absent.
    pub cell_id: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            roi_id: "roi_id".into(),
            patient_id: "patient_id".into(),
            region: "region".into(),
            stage: "stage".into(),
            x: "x".into(),
            y: "y".into(),
            area: "area".into(),
            solidity: "solidity".into(),
            markers: MARKERS.map(String::from),
            cell_id: "cell_id".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CellTableSchema {
    pub columns: ColumnMap,
    /// Per-RoI canvas size from a label table; RoIs not listed get
    /// `DEFAULT_ROI_SIZE` on both axes.
    pub sizes: HashMap<String, (u32, u32)>,
}

impl CellTableSchema {
    pub fn with_labels(labels: &[RoILabel]) -> Self {
        CellTableSchema {
            columns: ColumnMap::default(),
            sizes: labels
                .iter()
                .map(|l| (l.roi_id.clone(), (l.width, l.height)))
                .collect(),
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_field<T: FromStr>(record: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<T>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("cannot parse `{raw}`: {e}"),
    })
}

/// Parse a cell table into RoI records, grouped by `roi_id` in order of first
/// appearance with row order preserved inside each RoI.
pub fn parse_cell_table(path: &Path, schema: &CellTableSchema) -> Result<Vec<RoIRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cell_table(file, schema)
}

pub fn read_cell_table<R: std::io::Read>(reader: R, schema: &CellTableSchema) -> Result<Vec<RoIRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = &schema.columns;
    let i_roi = column_index(&headers, &cols.roi_id)?;
    let i_patient = column_index(&headers, &cols.patient_id)?;
    let i_region = column_index(&headers, &cols.region)?;
    let i_stage = column_index(&headers, &cols.stage)?;
    let i_x = column_index(&headers, &cols.x)?;
    let i_y = column_index(&headers, &cols.y)?;
    let i_area = column_index(&headers, &cols.area)?;
    let i_solidity = column_index(&headers, &cols.solidity)?;
    let mut i_markers = [0usize; 5];
    for (slot, name) in i_markers.iter_mut().zip(cols.markers.iter()) {
        *slot = column_index(&headers, name)?;
    }
    let i_cell = column_index(&headers, &cols.cell_id).ok();

    let mut rois: Vec<RoIRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (k, record) in rdr.records().enumerate() {
        // Line number in the file, header being line 1.
        let row = k + 2;
        let record = record?;
        let roi_id = record.get(i_roi).unwrap_or("").trim().to_string();
        let patient_id = record.get(i_patient).unwrap_or("").trim().to_string();
        let region: Region = parse_field(&record, i_region, row, &cols.region)?;
        let stage: Stage = parse_field(&record, i_stage, row, &cols.stage)?;
        let x: f64 = parse_field(&record, i_x, row, &cols.x)?;
        let y: f64 = parse_field(&record, i_y, row, &cols.y)?;
        let area: f64 = parse_field(&record, i_area, row, &cols.area)?;
        let solidity: f64 = parse_field(&record, i_solidity, row, &cols.solidity)?;
        let mut expr = [0.0; 5];
        for (m, &idx) in i_markers.iter().enumerate() {
            expr[m] = parse_field(&record, idx, row, &cols.markers[m])?;
        }

        let slot = match by_id.get(&roi_id) {
            Some(&s) => {
                let r = &rois[s];
                if r.patient_id != patient_id || r.region != region || r.stage != stage {
                    return Err(Error::Validation(format!(
                        "row {row}: roi {roi_id} has inconsistent patient/region/stage"
                    )));
                }
                s
            }
            None => {
                let (width, height) = schema
                    .sizes
                    .get(&roi_id)
                    .copied()
                    .unwrap_or((DEFAULT_ROI_SIZE, DEFAULT_ROI_SIZE));
                rois.push(RoIRecord {
                    roi_id: roi_id.clone(),
                    patient_id,
                    region,
                    stage,
                    width,
                    height,
                    cells: Vec::new(),
                });
                by_id.insert(roi_id, rois.len() - 1);
                rois.len() - 1
            }
        };
        let roi = &mut rois[slot];
        let cell_id = match i_cell {
            Some(i) => record.get(i).unwrap_or("").trim().to_string(),
            None => roi.cells.len().to_string(),
        };
        let cell = CellRecord {
            cell_id,
            x,
            y,
            area,
            solidity,
            expr,
            phenotype: None,
        };
        cell.validate()
            .map_err(|e| Error::Validation(format!("row {row}: {e}")))?;
        if !(x >= 0.0 && x < roi.width as f64 && y >= 0.0 && y < roi.height as f64) {
            return Err(Error::Validation(format!(
                "row {row}: coordinate ({x}, {y}) outside roi {} of size {}x{}",
                roi.roi_id, roi.width, roi.height
            )));
        }
        roi.cells.push(cell);
    }
    Ok(rois)
}

pub fn parse_roi_table(path: &Path) -> Result<Vec<RoILabel>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let i_roi = column_index(&headers, "roi_id")?;
    let i_patient = column_index(&headers, "patient_id")?;
    let i_region = column_index(&headers, "region")?;
    let i_stage = column_index(&headers, "stage")?;
    let i_w = column_index(&headers, "width").ok();
    let i_h = column_index(&headers, "height").ok();
    let mut out = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let row = k + 2;
        let record = record?;
        let width = match i_w {
            Some(i) => parse_field(&record, i, row, "width")?,
            None => DEFAULT_ROI_SIZE,
        };
        let height = match i_h {
            Some(i) => parse_field(&record, i, row, "height")?,
            None => DEFAULT_ROI_SIZE,
        };
        out.push(RoILabel {
            roi_id: record.get(i_roi).unwrap_or("").trim().to_string(),
            patient_id: record.get(i_patient).unwrap_or("").trim().to_string(),
            region: parse_field(&record, i_region, row, "region")?,
            stage: parse_field(&record, i_stage, row, "stage")?,
            width,
            height,
        });
    }
    Ok(out)
}

/// Write RoIs in the `cells.csv` layout. `truth`, when given, adds a
/// `true_phenotype` column (one entry per cell, RoI-major).
pub fn write_cell_table<W: std::io::Write>(
    writer: W,
    rois: &[RoIRecord],
    truth: Option<&[Vec<Phenotype>]>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        "roi_id", "patient_id", "region", "stage", "cell_id", "x", "y", "area", "solidity",
    ];
    header.extend(MARKERS);
    if truth.is_some() {
        header.push("true_phenotype");
    }
    wtr.write_record(&header)?;
    for (r, roi) in rois.iter().enumerate() {
        for (c, cell) in roi.cells.iter().enumerate() {
            let mut rec = vec![
                roi.roi_id.clone(),
                roi.patient_id.clone(),
                roi.region.to_string(),
                roi.stage.to_string(),
                cell.cell_id.clone(),
                cell.x.to_string(),
                cell.y.to_string(),
                cell.area.to_string(),
                cell.solidity.to_string(),
            ];
            rec.extend(cell.expr.iter().map(|v| v.to_string()));
            if let Some(t) = truth {
                rec.push(t[r][c].to_string());
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<cells.csv>", e))?;
    Ok(())
}

pub fn write_roi_table<W: std::io::Write>(writer: W, rois: &[RoIRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["roi_id", "patient_id", "region", "stage", "width", "height"])?;
    for roi in rois {
        wtr.write_record([
            roi.roi_id.clone(),
            roi.patient_id.clone(),
            roi.region.to_string(),
            roi.stage.to_string(),
            roi.width.to_string(),
            roi.height.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<rois.csv>", e))?;
    Ok(())
}

/// Mean-rank percentile of each value: `(#less + (#equal + 1) / 2) / n`,
/// so the maximum of a tie-free column maps to 1.0.
pub fn percentile_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean.
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean_rank / n as f64;
        }
        start = end;
    }
    ranks
}

/// Argmax tie-break order: CK > CD8 > CD4 > CD20 > FoxP3.
pub const PRECEDENCE: [Phenotype; 5] = [
    Phenotype::Epithelial,
    Phenotype::TCytotoxic,
    Phenotype::THelper,
    Phenotype::BCell,
    Phenotype::TReg,
];

/// Assign each cell the phenotype whose marker has the highest percentile
/// rank among all expressions in `exprs`.
pub fn phenotype_cells(exprs: &[[f64; 5]]) -> Result<Vec<Phenotype>> {
    if exprs.is_empty() {
        return Err(Error::Empty("phenotyping needs at least one cell".into()));
    }
    let ranks: Vec<Vec<f64>> = (0..5)
        .map(|m| percentile_ranks(&exprs.iter().map(|e| e[m]).collect::<Vec<_>>()))
        .collect();
    Ok((0..exprs.len())
        .map(|i| {
            let mut best = PRECEDENCE[0];
            let mut best_rank = ranks[best.marker()][i];
            for &p in &PRECEDENCE[1..] {
                let r = ranks[p.marker()][i];
                if r > best_rank {
                    best = p;
                    best_rank = r;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhenotypeScope {
    #[default]
    Cohort,
    Roi,
}

/// Phenotype every cell of `rois` in place, ranking within the whole cohort or
/// within each RoI.
pub fn assign_phenotypes(rois: &mut [RoIRecord], scope: PhenotypeScope) -> Result<()> {
    match scope {
        PhenotypeScope::Cohort => {
            let exprs: Vec<[f64; 5]> = rois.iter().flat_map(|r| r.cells.iter().map(|c| c.expr)).collect();
            if exprs.is_empty() {
                return Ok(());
            }
            let labels = phenotype_cells(&exprs)?;
            let mut it = labels.into_iter();
            for roi in rois.iter_mut() {
                for cell in roi.cells.iter_mut() {
                    cell.phenotype = it.next();
                }
            }
        }
        PhenotypeScope::Roi => {
            for roi in rois.iter_mut() {
                if roi.cells.is_empty() {
                    continue;
                }
                let exprs: Vec<[f64; 5]> = roi.cells.iter().map(|c| c.expr).collect();
                for (cell, p) in roi.cells.iter_mut().zip(phenotype_cells(&exprs)?) {
                    cell.phenotype = Some(p);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile_id: usize,
    pub origin_x: u32,
    pub origin_y: u32,
    pub size: u32,
    pub centroid: (f64, f64),
}

impl TileSpec {
    pub fn new(tile_id: usize, origin_x: u32, origin_y: u32, size: u32) -> Self {
        let half = size as f64 / 2.0;
        TileSpec {
            tile_id,
            origin_x,
            origin_y,
            size,
            centroid: (origin_x as f64 + half, origin_y as f64 + half),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0) = (self.origin_x as f64, self.origin_y as f64);
        let s = self.size as f64;
        x >= x0 && x < x0 + s && y >= y0 && y < y0 + s
    }
}

/// Draw `n` tiles with uniformly random integer origins that keep each tile
/// inside the RoI. Tiles may overlap.
pub fn sample_tiles(roi: &RoIRecord, n: usize, tile_size: u32, rng_seed: u64) -> Result<Vec<TileSpec>> {
    if n == 0 {
        return Err(Error::Validation("tile count must be at least 1".into()));
    }
    if tile_size == 0 || tile_size > roi.width.min(roi.height) {
        return Err(Error::Validation(format!(
            "tile size {tile_size} does not fit roi {} ({}x{})",
            roi.roi_id, roi.width, roi.height
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let max_x = roi.width - tile_size;
    let max_y = roi.height - tile_size;
    Ok((0..n)
        .map(|i| {
            let ox = rng.random_range(0..=max_x);
            let oy = rng.random_range(0..=max_y);
            TileSpec::new(i, ox, oy, tile_size)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "roi_id,patient_id,region,stage,x,y,area,solidity,cd4,cd8,cd20,foxp3,ck\n";

    fn table(rows: &[&str]) -> String {
        let mut s = HEADER.to_string();
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn two_rois_conserve_rows() {
        let mut rows = Vec::new();
        for i in 0..10 {
            let roi = if i % 3 == 0 { "b" } else { "a" };
            let p = if roi == "a" { "p1" } else { "p2" };
            rows.push(format!("{roi},{p},front,pT2,{},{},50,0.9,1,0,0,0,0", i * 10, i * 5));
        }
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let rois = read_cell_table(table(&refs).as_bytes(), &CellTableSchema::default()).unwrap();
        assert_eq!(rois.len(), 2);
        assert_eq!(rois[0].roi_id, "b");
        assert_eq!(rois.iter().map(|r| r.cells.len()).sum::<usize>(), 10);
        // Row order inside a RoI follows the file.
        let xs: Vec<f64> = rois[1].cells.iter().map(|c| c.x).collect();
        assert_eq!(xs, vec![10.0, 20.0, 40.0, 50.0, 70.0, 80.0]);
    }

    #[test]
    fn header_only_is_empty() {
        let rois = read_cell_table(HEADER.as_bytes(), &CellTableSchema::default()).unwrap();
        assert!(rois.is_empty());
    }

    #[test]
    fn missing_solidity_column() {
        let text = "roi_id,patient_id,region,stage,x,y,area,cd4,cd8,cd20,foxp3,ck\n";
        match read_cell_table(text.as_bytes(), &CellTableSchema::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "solidity"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_value_reports_row() {
        let text = table(&["a,p,front,pT1,1,1,5,0.5,1,1,1,1,1", "a,p,front,pT1,1,oops,5,0.5,1,1,1,1,1"]);
        match read_cell_table(text.as_bytes(), &CellTableSchema::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_coordinate_rejected() {
        let text = table(&["a,p,front,pT1,2048,1,5,0.5,1,1,1,1,1"]);
        assert!(matches!(
            read_cell_table(text.as_bytes(), &CellTableSchema::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn custom_column_names() {
        let text = "ROI,pid,region,stage,cx,cy,area,solidity,cd4,cd8,cd20,foxp3,ck\nr,p,mucosa,pT3,3,4,9,1,0,0,0,0,2\n";
        let mut schema = CellTableSchema::default();
        schema.columns.roi_id = "ROI".into();
        schema.columns.patient_id = "pid".into();
        schema.columns.x = "cx".into();
        schema.columns.y = "cy".into();
        let rois = read_cell_table(text.as_bytes(), &schema).unwrap();
        assert_eq!(rois[0].cells[0].x, 3.0);
        assert_eq!(rois[0].region, Region::Mucosa);
        assert_eq!(rois[0].stage, Stage::PT3);
    }

    #[test]
    fn single_cell_is_epithelial_by_precedence() {
        assert_eq!(phenotype_cells(&[[3.0, 1.0, 2.0, 0.5, 0.1]]).unwrap(), vec![Phenotype::Epithelial]);
    }

    #[test]
    fn dominant_cd8_cell() {
        let exprs = [[0.0, 9.0, 0.0, 0.0, 0.0], [5.0, 1.0, 5.0, 5.0, 5.0], [4.0, 2.0, 4.0, 4.0, 4.0]];
        assert_eq!(phenotype_cells(&exprs).unwrap()[0], Phenotype::TCytotoxic);
    }

    #[test]
    fn empty_phenotyping_errors() {
        assert!(phenotype_cells(&[]).is_err());
    }

    #[test]
    fn percentile_ties_use_mean_rank() {
        let r = percentile_ranks(&[1.0, 1.0, 3.0, 0.0]);
        assert_eq!(r, vec![0.625, 0.625, 1.0, 0.25]);
    }

    /// Independent percentile-rank oracle: count strictly-less and equal
    /// values directly for every cell, then argmax by precedence.
    fn brute_phenotypes(exprs: &[[f64; 5]]) -> Vec<Phenotype> {
        let n = exprs.len() as f64;
        exprs
            .iter()
            .map(|e| {
                let rank = |m: usize| {
                    let less = exprs.iter().filter(|o| o[m] < e[m]).count() as f64;
                    let eq = exprs.iter().filter(|o| o[m] == e[m]).count() as f64;
                    (less + (eq + 1.0) / 2.0) / n
                };
                let mut best = PRECEDENCE[0];
                for &p in &PRECEDENCE[1..] {
                    if rank(p.marker()) > rank(best.marker()) {
                        best = p;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn cohort_of_100_matches_brute_force() {
        let mut rng = seed::rng(11);
        // Quantised values produce plenty of ties.
        let exprs: Vec<[f64; 5]> = (0..100)
            .map(|_| std::array::from_fn(|_| (rng.random_range(0..20) as f64) * 0.25))
            .collect();
        assert_eq!(phenotype_cells(&exprs).unwrap(), brute_phenotypes(&exprs));
    }

    #[test]
    fn tiles_inside_bounds_and_deterministic() {
        let roi = RoIRecord {
            roi_id: "r".into(),
            patient_id: "p".into(),
            region: Region::Front,
            stage: Stage::PT1,
            width: 2048,
            height: 2048,
            cells: vec![],
        };
        let tiles = sample_tiles(&roi, 200, 256, 5).unwrap();
        assert_eq!(tiles.len(), 200);
        for t in &tiles {
            assert!(t.origin_x + t.size <= 2048 && t.origin_y + t.size <= 2048);
            assert_eq!(t.centroid.0, t.origin_x as f64 + 128.0);
        }
        assert_eq!(tiles, sample_tiles(&roi, 200, 256, 5).unwrap());

        let forced = sample_tiles(&roi, 1, 2048, 9).unwrap();
        assert_eq!((forced[0].origin_x, forced[0].origin_y), (0, 0));
        assert!(sample_tiles(&roi, 1, 4096, 9).is_err());
    }

    proptest! {
        #[test]
        fn phenotypes_invariant_under_monotone_marker_transform(
            raw in proptest::collection::vec(proptest::array::uniform5(0.0f64..10.0), 1..40),
            marker in 0usize..5,
        ) {
            let before = phenotype_cells(&raw).unwrap();
            let transformed: Vec<[f64; 5]> = raw
                .iter()
                .map(|e| {
                    let mut t = *e;
                    t[marker] = (t[marker] * 3.0 + 1.0).ln();
                    t
                })
                .collect();
            prop_assert_eq!(before.clone(), phenotype_cells(&transformed).unwrap());
            prop_assert_eq!(before.len(), raw.len());
        }
    }
}
