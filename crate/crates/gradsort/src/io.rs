//! Dataset generation, CSV load/save, PPM rendering and the results file
//! format.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::GridShape;
use crate::matrix::Matrix;
use crate::metrics::QualityReport;
use crate::permgen::Permutation;
use crate::trainer::TraceRecord;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    RgbColor,
    FeatureCsv,
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::RgbColor => "rgb-color",
            DatasetKind::FeatureCsv => "feature-csv",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "rgb-color" => Some(DatasetKind::RgbColor),
            "feature-csv" => Some(DatasetKind::FeatureCsv),
            _ => None,
        }
    }
}

/// A named collection of vectors with a record of where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: DatasetKind,
    pub vectors: Matrix,
    pub provenance: String,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Rejects datasets that no arrangement objective can rank.
    pub fn validate(&self) -> Result<()> {
        let m = &self.vectors;
        if m.rows() < 2 {
            return Err(Error::InvalidInput(
                "a dataset needs at least two vectors".into(),
            ));
        }
        if !m.all_finite() {
            return Err(Error::InvalidInput(
                "dataset contains non-finite values".into(),
            ));
        }
        let first = m.row(0);
        if (1..m.rows()).all(|i| m.row(i) == first) {
            return Err(Error::InvalidInput("all vectors are identical".into()));
        }
        if self.kind == DatasetKind::RgbColor {
            if m.cols() != 3 {
                return Err(Error::InvalidInput(
                    "rgb-color datasets must have exactly 3 columns".into(),
                ));
            }
            if m.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidInput(
                    "rgb-color values must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// n random colors drawn uniformly from the RGB unit cube.
pub fn gen_colors(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Parameter("n must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let ds = Dataset {
        name: format!("colors-{n}-seed{seed}"),
        kind: DatasetKind::RgbColor,
        vectors: Matrix::from_vec(n, 3, data)?,
        provenance: format!("generated: uniform RGB, n={n}, seed={seed}"),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes one row per line, comma-separated, with a metadata header comment.
/// Values are printed with 17 significant digits so that a save/load round
/// trip is bit-exact.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# kind={}\n", ds.kind.as_str()));
    out.push_str(&format!("# name={}\n", ds.name));
    out.push_str(&format!("# provenance={}\n", ds.provenance));
    for i in 0..ds.vectors.rows() {
        let row: Vec<String> = ds.vectors.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_csv(&text, &name)
}

pub fn parse_csv(text: &str, default_name: &str) -> Result<Dataset> {
    let mut kind = DatasetKind::FeatureCsv;
    let mut name = default_name.to_string();
    let mut provenance = String::from("loaded from csv");
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.trim().split_once('=') {
                match k.trim() {
                    "kind" => {
                        kind = DatasetKind::parse(v).ok_or_else(|| Error::Parse {
                            line: lineno,
                            msg: format!("unknown dataset kind {v:?}"),
                        })?
                    }
                    "name" => name = v.to_string(),
                    "provenance" => provenance = v.to_string(),
                    _ => {}
                }
            }
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("not a number: {field:?}"),
            })?;
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {w} fields, found {}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }

    let width = width.ok_or_else(|| Error::InvalidInput("csv has no data rows".into()))?;
    let n = rows.len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let ds = Dataset {
        name,
        kind,
        vectors: Matrix::from_vec(n, width, data)?,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// Renders an RGB dataset arranged on a grid as a binary PPM (P6) image,
/// with each grid cell drawn as a cell_px x cell_px block.
pub fn render_ppm(
    ds: &Dataset,
    perm: &Permutation,
    grid: &GridShape,
    cell_px: usize,
) -> Result<Vec<u8>> {
    if ds.kind != DatasetKind::RgbColor {
        return Err(Error::InvalidInput(
            "only rgb-color datasets can be rendered".into(),
        ));
    }
    ds.validate()?;
    if perm.n() != ds.n() || grid.n() != ds.n() {
        return Err(Error::Dimension(
            "dataset, permutation and grid sizes must match".into(),
        ));
    }
    if cell_px < 1 {
        return Err(Error::Parameter("cell_px must be >= 1".into()));
    }
    let w = grid.n_x * cell_px;
    let h = grid.n_y * cell_px;
    let mut bytes = Vec::with_capacity(64 + w * h * 3);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());

    // color of each grid cell
    let mut cell_rgb = vec![[0u8; 3]; grid.n()];
    for (input, &cell) in perm.assignment().iter().enumerate() {
        let row = ds.vectors.row(input);
        for c in 0..3 {
            cell_rgb[cell][c] = (row[c] * 255.0).round() as u8;
        }
    }
    for py in 0..h {
        let gy = py / cell_px;
        for px in 0..w {
            let gx = px / cell_px;
            bytes.extend_from_slice(&cell_rgb[gy * grid.n_x + gx]);
        }
    }
    Ok(bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub kind: DatasetKind,
    pub n: usize,
    pub dim: usize,
    pub provenance: String,
}

/// Self-contained record of one sorting run: enough to re-evaluate the
/// reported quality from the dataset alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsFile {
    pub tool_version: String,
    pub dataset: DatasetInfo,
    pub method: String,
    pub grid: (usize, usize),
    pub config: serde_json::Value,
    pub permutation: Permutation,
    pub quality: QualityReport,
    pub converged_step: Option<usize>,
    pub resolved_by_lap: bool,
    pub loss_trace: Vec<TraceRecord>,
    pub wall_time_secs: f64,
}

impl ResultsFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
