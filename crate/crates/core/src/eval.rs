//! Metrics, the scar-stratified comparison, activation surfaces and figures.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::gradcam::GradCamMap;
use crate::strain::{PhantomRecord, SectorLabels, StrainMatrix, TosCurve};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mtl,
    Regression,
    Snake,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mtl => "mtl",
            Method::Regression => "regression",
            Method::Snake => "snake",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtl" => Ok(Method::Mtl),
            "regression" | "reg" => Ok(Method::Regression),
            "snake" => Ok(Method::Snake),
            other => Err(config_err!("unknown method {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub method: Method,
    pub tos_ms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lma: Option<SectorLabels>,
}

pub fn write_predictions<W: Write>(preds: &[PredictionRecord], mut w: W) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

pub fn save_predictions(preds: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_predictions(preds, BufWriter::new(File::create(path)?))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    read_predictions(BufReader::new(File::open(path)?))
}

/// Mean absolute per-sector difference in ms.
pub fn tos_mae_ms(pred: &TosCurve, gt: &TosCurve) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(config_err!("cannot compare TOS curves of lengths {} and {}", pred.len(), gt.len()));
    }
    Ok(pred.tos_ms.iter().zip(&gt.tos_ms).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Set when precision, recall and F1 are reported as 1 because neither
    /// prediction nor truth contains a positive.
    pub no_positive_convention: bool,
}

/// Sector-level metrics with LMA as the positive class.
pub fn classification_metrics(pred: &SectorLabels, gt: &SectorLabels) -> Result<ClassificationMetrics> {
    if pred.len() != gt.len() {
        return Err(config_err!("label lengths differ: {} vs {}", pred.len(), gt.len()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (p, g) in pred.hard().into_iter().zip(gt.hard()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let n = pred.len().max(1) as f64;
    let convention = tp + fp + fneg == 0;
    let ratio = |num: usize, den: usize| if den == 0 { if convention { 1.0 } else { 0.0 } } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if convention {
        1.0
    } else if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        accuracy: (tp + tn) as f64 / n,
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fneg,
        no_positive_convention: convention,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    Scar,
    Lma,
    Normal,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [Stratum::All, Stratum::Scar, Stratum::Lma, Stratum::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Scar => "scar",
            Stratum::Lma => "lma",
            Stratum::Normal => "normal",
        }
    }

    /// Scar takes precedence over LMA; normal is neither.
    pub fn contains(self, r: &PhantomRecord, s: usize) -> bool {
        let scar = r.scar_mask[s];
        let lma = r.labels.is_lma(s);
        match self {
            Stratum::All => true,
            Stratum::Scar => scar,
            Stratum::Lma => lma && !scar,
            Stratum::Normal => !lma && !scar,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub stratum: Stratum,
    pub sectors: usize,
    pub records: usize,
    /// Mean over all sectors of the stratum; `None` when the stratum is empty.
    pub per_sector_mae_ms: Option<f64>,
    /// Mean of per-record means over records with sectors in the stratum.
    pub per_matrix_mae_ms: Option<f64>,
}

impl StratumStats {
    pub fn is_empty(&self) -> bool {
        self.sectors == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub strata: Vec<StratumStats>,
    /// Dataset records without a prediction from this method; excluded.
    pub missing: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationMetrics>,
}

impl MethodReport {
    pub fn stratum(&self, s: Stratum) -> &StratumStats {
        self.strata.iter().find(|x| x.stratum == s).expect("every stratum is reported")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub methods: Vec<MethodReport>,
}

impl StratifiedReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "method,stratum,sectors,records,per_sector_mae_ms,per_matrix_mae_ms,missing_records")?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "empty".to_string(), |x| x.to_string());
        for m in &self.methods {
            for s in &m.strata {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    m.method.as_str(),
                    s.stratum.as_str(),
                    s.sectors,
                    s.records,
                    fmt(s.per_sector_mae_ms),
                    fmt(s.per_matrix_mae_ms),
                    m.missing.len()
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-method MAE over all, scar, LMA and normal sectors of `dataset`,
/// methods ordered by overall MAE.
pub fn scar_stratified_report(predictions: &[PredictionRecord], dataset: &[PhantomRecord]) -> Result<StratifiedReport> {
    let by_id: HashMap<&str, &PhantomRecord> = dataset.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut per_method: BTreeMap<Method, HashMap<&str, &PredictionRecord>> = BTreeMap::new();
    for p in predictions {
        let r = by_id.get(p.id.as_str()).ok_or_else(|| config_err!("prediction for unknown record {}", p.id))?;
        if p.tos_ms.len() != r.n_sectors() {
            return Err(config_err!(
                "prediction for {} has {} sectors, record has {}",
                p.id,
                p.tos_ms.len(),
                r.n_sectors()
            ));
        }
        if per_method.entry(p.method).or_default().insert(p.id.as_str(), p).is_some() {
            return Err(config_err!("duplicate {} prediction for {}", p.method.as_str(), p.id));
        }
    }

    let mut methods = Vec::new();
    for (method, preds) in per_method {
        let missing: Vec<String> =
            dataset.iter().filter(|r| !preds.contains_key(r.id.as_str())).map(|r| r.id.clone()).collect();
        if !missing.is_empty() {
            log::warn!("{} records lack a {} prediction and are excluded", missing.len(), method.as_str());
        }
        let mut strata = Vec::new();
        for stratum in Stratum::ALL {
            let (mut sum, mut sectors, mut matrix_sum, mut records) = (0.0, 0, 0.0, 0);
            for r in dataset {
                let Some(p) = preds.get(r.id.as_str()) else { continue };
                let errs: Vec<f64> = (0..r.n_sectors())
                    .filter(|&s| stratum.contains(r, s))
                    .map(|s| (p.tos_ms[s] - r.tos.tos_ms[s]).abs())
                    .collect();
                if errs.is_empty() {
                    continue;
                }
                let e: f64 = errs.iter().sum();
                sum += e;
                sectors += errs.len();
                matrix_sum += e / errs.len() as f64;
                records += 1;
            }
            strata.push(StratumStats {
                stratum,
                sectors,
                records,
                per_sector_mae_ms: (sectors > 0).then(|| sum / sectors as f64),
                per_matrix_mae_ms: (records > 0).then(|| matrix_sum / records as f64),
            });
        }
        let mut classification = None;
        let (mut pl, mut gl) = (Vec::new(), Vec::new());
        for r in dataset {
            if let Some(lma) = preds.get(r.id.as_str()).and_then(|p| p.lma.as_ref()) {
                pl.extend_from_slice(&lma.probs);
                gl.extend_from_slice(&r.labels.probs);
            }
        }
        if !pl.is_empty() {
            classification = Some(classification_metrics(&SectorLabels { probs: pl }, &SectorLabels { probs: gl })?);
        }
        methods.push(MethodReport { method, strata, missing, classification });
    }
    // best overall MAE first; methods without scored sectors last
    let overall = |m: &MethodReport| m.stratum(Stratum::All).per_sector_mae_ms.unwrap_or(f64::INFINITY);
    methods.sort_by(|a, b| overall(a).total_cmp(&overall(b)));
    Ok(StratifiedReport { methods })
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    pub angular_resolution: usize,
    pub axial_resolution: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self { angular_resolution: 72, axial_resolution: 32 }
    }
}

/// Default slice heights from apex (0) to base (1).
pub const DEFAULT_SLICE_Z: [f64; 4] = [0.0, 0.33, 0.66, 1.0];

/// Bilinear cylinder interpolation over per-slice TOS curves.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    zs: Vec<f64>,
    curves: Vec<Vec<f64>>,
}

impl SliceStack {
    /// `slices` are `(z, curve)` pairs with strictly increasing `z`.
    pub fn new(slices: &[(f64, TosCurve)]) -> Result<Self> {
        if slices.len() < 2 {
            return Err(config_err!("a surface needs at least two slices, got {}", slices.len()));
        }
        let n = slices[0].1.len();
        if n == 0 || slices.iter().any(|(_, c)| c.len() != n) {
            return Err(config_err!("all slices must share a non-zero sector count"));
        }
        if slices.windows(2).any(|w| !(w[0].0 < w[1].0)) || slices.iter().any(|(z, _)| !z.is_finite()) {
            return Err(config_err!("slice heights must be finite and strictly increasing"));
        }
        Ok(Self { zs: slices.iter().map(|(z, _)| *z).collect(), curves: slices.iter().map(|(_, c)| c.tos_ms.clone()).collect() })
    }

    pub fn n_sectors(&self) -> usize {
        self.curves[0].len()
    }

    fn around(&self, slice: usize, u: f64) -> f64 {
        let c = &self.curves[slice];
        let n = c.len();
        let i = u.floor();
        let f = u - i;
        let i0 = (i as isize).rem_euclid(n as isize) as usize;
        lerp(c[i0], c[(i0 + 1) % n], f)
    }

    /// Value at sector coordinate `u` (sector `s` sits at `u = s`, circular)
    /// and height `z` (clamped to the slice range).
    pub fn value(&self, u: f64, z: f64) -> f64 {
        let last = self.zs.len() - 1;
        if z <= self.zs[0] {
            return self.around(0, u);
        }
        if z >= self.zs[last] {
            return self.around(last, u);
        }
        let j = self.zs.windows(2).position(|w| z < w[1]).expect("z lies inside the slice range");
        let w = (z - self.zs[j]) / (self.zs[j + 1] - self.zs[j]);
        lerp(self.around(j, u), self.around(j + 1, u), w)
    }
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if a == b {
        a
    } else {
        a * (1.0 - w) + b * w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    /// Radians; angle `a` is `2π·a / angular_resolution`.
    pub angles: Vec<f64>,
    pub zs: Vec<f64>,
    /// `values[zi * angles.len() + ai]`, ms.
    pub values: Vec<f64>,
}

impl SurfaceGrid {
    pub fn get(&self, angle: usize, z: usize) -> f64 {
        self.values[z * self.angles.len() + angle]
    }
}

/// Samples the interpolated surface on a regular `(φ, z)` grid with
/// `z ∈ [0, 1]`.
pub fn surface_map(slices: &[(f64, TosCurve)], cfg: &SurfaceConfig) -> Result<SurfaceGrid> {
    let stack = SliceStack::new(slices)?;
    let (na, nz) = (cfg.angular_resolution, cfg.axial_resolution);
    if na == 0 || nz < 2 {
        return Err(config_err!("surface grid needs >= 1 angle and >= 2 heights"));
    }
    let n = stack.n_sectors();
    let angles: Vec<f64> = (0..na).map(|a| std::f64::consts::TAU * a as f64 / na as f64).collect();
    let zs: Vec<f64> = (0..nz).map(|j| j as f64 / (nz - 1) as f64).collect();
    let mut values = Vec::with_capacity(na * nz);
    for &z in &zs {
        for a in 0..na {
            values.push(stack.value((a * n) as f64 / na as f64, z));
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite surface value".into()));
    }
    Ok(SurfaceGrid { angles, zs, values })
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CurveStyle {
    pub label: String,
    pub color: String,
    pub dashed: bool,
}

impl CurveStyle {
    pub fn new(label: &str, color: &str, dashed: bool) -> Self {
        Self { label: label.into(), color: color.into(), dashed }
    }
}

const CELL: f64 = 12.0;
const STRAIN_LIMIT: f64 = 0.2;

/// Blue for contraction, white at zero, red for stretch.
pub fn strain_color(e: f64) -> String {
    let v = (e / STRAIN_LIMIT).clamp(-1.0, 1.0);
    let (r, g, b) = if v < 0.0 {
        let t = -v;
        (255.0 * (1.0 - t) + 33.0 * t, 255.0 * (1.0 - t) + 102.0 * t, 255.0 * (1.0 - t) + 172.0 * t)
    } else {
        (255.0 * (1.0 - v) + 178.0 * v, 255.0 * (1.0 - v) + 24.0 * v, 255.0 * (1.0 - v) + 43.0 * v)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Step polyline of a TOS curve in cell units: x = tos / frame period.
pub fn curve_points(curve: &TosCurve, frame_period_ms: f64) -> Vec<(f64, f64)> {
    curve
        .tos_ms
        .iter()
        .enumerate()
        .flat_map(|(s, &t)| {
            let x = t / frame_period_ms * CELL;
            [(x, s as f64 * CELL), (x, (s + 1) as f64 * CELL)]
        })
        .collect()
}

/// Standalone SVG of a strain matrix with optional TOS curves (at most four)
/// and a Grad-CAM opacity overlay.
pub fn render_svg_heatmap(
    m: &StrainMatrix,
    curves: &[(TosCurve, CurveStyle)],
    overlay: Option<&GradCamMap>,
) -> Result<String> {
    if curves.len() > 4 {
        return Err(config_err!("at most 4 curves per figure, got {}", curves.len()));
    }
    if let Some(o) = overlay {
        if o.n_sectors != m.n_sectors() || o.n_frames != m.n_frames() {
            return Err(config_err!("Grad-CAM map and strain matrix sizes differ"));
        }
    }
    let (w, h) = (m.n_frames() as f64 * CELL, m.n_sectors() as f64 * CELL);
    let legend = 16.0 * curves.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{:.0}" viewBox="0 0 {w:.0} {:.0}">"#,
        h + legend,
        h + legend
    );
    let _ = writeln!(svg, r#"<g id="strain" shape-rendering="crispEdges">"#);
    for s in 0..m.n_sectors() {
        for f in 0..m.n_frames() {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.0}" y="{:.0}" width="{CELL:.0}" height="{CELL:.0}" fill="{}"/>"#,
                f as f64 * CELL,
                s as f64 * CELL,
                strain_color(m.get(s, f))
            );
        }
    }
    let _ = writeln!(svg, "</g>");
    if let Some(o) = overlay {
        let _ = writeln!(svg, r#"<g id="gradcam" shape-rendering="crispEdges">"#);
        for s in 0..o.n_sectors {
            for f in 0..o.n_frames {
                let a = o.get(s, f);
                if a > 0.0 {
                    let _ = writeln!(
                        svg,
                        r##"<rect x="{:.0}" y="{:.0}" width="{CELL:.0}" height="{CELL:.0}" fill="#ffd700" fill-opacity="{:.4}"/>"##,
                        f as f64 * CELL,
                        s as f64 * CELL,
                        0.7 * a
                    );
                }
            }
        }
        let _ = writeln!(svg, "</g>");
    }
    for (i, (curve, style)) in curves.iter().enumerate() {
        if curve.len() != m.n_sectors() {
            return Err(config_err!("curve {:?} has {} sectors, matrix has {}", style.label, curve.len(), m.n_sectors()));
        }
        let pts: Vec<String> =
            curve_points(curve, m.frame_period_ms()).iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let dash = if style.dashed { r#" stroke-dasharray="4 2""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<polyline class="tos" points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
            pts.join(" "),
            style.color
        );
        let y = h + 12.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="4" y1="{:.0}" x2="24" y2="{:.0}" stroke="{}" stroke-width="2"{dash}/><text x="30" y="{:.0}" font-family="sans-serif" font-size="11">{}</text>"#,
            y - 4.0,
            y - 4.0,
            style.color,
            y,
            escape_xml(&style.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn emit_svg_heatmap(
    m: &StrainMatrix,
    curves: &[(TosCurve, CurveStyle)],
    overlay: Option<&GradCamMap>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let svg = render_svg_heatmap(m, curves, overlay)?;
    std::fs::write(path, svg)?;
    Ok(())
}

/// Early (pale yellow) to late (dark red) over `[lo, hi]`.
pub fn tos_color(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = (255.0 * (1.0 - t) + 127.0 * t, 247.0 * (1.0 - t), 188.0 * (1.0 - t) + 4.0 * t);
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Unrolled cylinder: angle along x, base (z = 1) on top.
pub fn render_svg_surface(grid: &SurfaceGrid) -> Result<String> {
    let (na, nz) = (grid.angles.len(), grid.zs.len());
    if na == 0 || nz == 0 || grid.values.len() != na * nz {
        return Err(config_err!("surface grid is {}x{} but holds {} values", na, nz, grid.values.len()));
    }
    let (cw, ch) = (8.0, 8.0);
    let lo = grid.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (w, h) = (na as f64 * cw, nz as f64 * ch);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{:.0}" viewBox="0 0 {w:.0} {:.0}">"#,
        h + 16.0,
        h + 16.0
    );
    for zi in 0..nz {
        let y = (nz - 1 - zi) as f64 * ch;
        for ai in 0..na {
            let v = grid.get(ai, zi);
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{y:.2}" width="{cw:.2}" height="{ch:.2}" fill="{}"/>"#,
                ai as f64 * cw,
                tos_color(v, lo, hi)
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="2" y="{:.2}" font-size="11" font-family="sans-serif">TOS {lo:.1} to {hi:.1} ms</text>"#,
        h + 12.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}
