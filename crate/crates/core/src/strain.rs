//! Strain matrices, activation-time curves and per-sector labels.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Default temporal resolution of the cine acquisition.
pub const DEFAULT_FRAME_PERIOD_MS: f64 = 17.0;

/// `n_sectors × n_frames` circumferential strain, row-major by sector.
///
/// The sector axis is circular.
#[derive(Clone, Debug, PartialEq)]
pub struct StrainMatrix {
    n_sectors: usize,
    n_frames: usize,
    frame_period_ms: f64,
    values: Vec<f64>,
}

impl StrainMatrix {
    pub fn new(n_sectors: usize, n_frames: usize, frame_period_ms: f64, values: Vec<f64>) -> Result<Self> {
        if n_sectors == 0 || n_frames == 0 {
            return Err(config_err!("strain matrix needs at least one sector and one frame"));
        }
        if !(frame_period_ms > 0.0 && frame_period_ms.is_finite()) {
            return Err(config_err!("frame period must be positive, got {frame_period_ms}"));
        }
        if values.len() != n_sectors * n_frames {
            return Err(config_err!(
                "strain matrix {n_sectors}x{n_frames} needs {} values, got {}",
                n_sectors * n_frames,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(config_err!("strain values must be finite"));
        }
        Ok(Self { n_sectors, n_frames, frame_period_ms, values })
    }

    pub fn zeros(n_sectors: usize, n_frames: usize, frame_period_ms: f64) -> Self {
        Self { n_sectors, n_frames, frame_period_ms, values: vec![0.0; n_sectors * n_frames] }
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, sector: usize, frame: usize) -> f64 {
        self.values[sector * self.n_frames + frame]
    }

    pub fn set(&mut self, sector: usize, frame: usize, v: f64) {
        self.values[sector * self.n_frames + frame] = v;
    }

    /// Value with the sector index taken modulo `n_sectors`.
    pub fn get_wrapped(&self, sector: isize, frame: usize) -> f64 {
        self.get(sector.rem_euclid(self.n_sectors as isize) as usize, frame)
    }

    pub fn row(&self, sector: usize) -> &[f64] {
        &self.values[sector * self.n_frames..(sector + 1) * self.n_frames]
    }

    pub fn row_mut(&mut self, sector: usize) -> &mut [f64] {
        &mut self.values[sector * self.n_frames..(sector + 1) * self.n_frames]
    }

    /// All magnitudes strictly below one.
    pub fn is_physiologic(&self) -> bool {
        self.values.iter().all(|v| v.abs() < 1.0)
    }
}

/// Per-sector time to onset of shortening, in ms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TosCurve {
    pub tos_ms: Vec<f64>,
}

impl TosCurve {
    pub fn new(tos_ms: Vec<f64>) -> Self {
        Self { tos_ms }
    }

    pub fn len(&self) -> usize {
        self.tos_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tos_ms.is_empty()
    }

    /// Checks `frame_period <= tos <= n_frames · frame_period` for every sector.
    pub fn validate_against(&self, m: &StrainMatrix) -> Result<()> {
        if self.len() != m.n_sectors() {
            return Err(config_err!(
                "TOS curve has {} sectors, strain matrix has {}",
                self.len(),
                m.n_sectors()
            ));
        }
        let hi = m.n_frames() as f64 * m.frame_period_ms();
        for (s, &t) in self.tos_ms.iter().enumerate() {
            if !(t >= m.frame_period_ms() - 1e-9 && t <= hi + 1e-9) {
                return Err(config_err!("TOS {t} ms of sector {s} outside [{}, {hi}]", m.frame_period_ms()));
            }
        }
        Ok(())
    }
}

/// Per-sector two-class distribution, columns `{not-LMA, LMA}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SectorLabels {
    pub probs: Vec<[f64; 2]>,
}

impl SectorLabels {
    pub fn from_hard(is_lma: &[bool]) -> Self {
        Self {
            probs: is_lma.iter().map(|&l| if l { [0.0, 1.0] } else { [1.0, 0.0] }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Sector is LMA when the LMA column carries more than half the mass.
    pub fn is_lma(&self, sector: usize) -> bool {
        self.probs[sector][1] > 0.5
    }

    pub fn hard(&self) -> Vec<bool> {
        (0..self.len()).map(|s| self.is_lma(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (s, p) in self.probs.iter().enumerate() {
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p[0] + p[1] - 1.0).abs() > 1e-9 {
                return Err(config_err!("label row {s} = {p:?} is not a distribution"));
            }
        }
        Ok(())
    }
}

/// Short-axis slice position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceLevel {
    Apical,
    Mid2,
    Mid1,
    Basal,
}

impl SliceLevel {
    /// Acquisition order used by the generator.
    pub const ALL: [SliceLevel; 4] = [SliceLevel::Basal, SliceLevel::Mid1, SliceLevel::Mid2, SliceLevel::Apical];

    pub fn as_str(self) -> &'static str {
        match self {
            SliceLevel::Basal => "basal",
            SliceLevel::Mid1 => "mid1",
            SliceLevel::Mid2 => "mid2",
            SliceLevel::Apical => "apical",
        }
    }
}

impl std::str::FromStr for SliceLevel {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basal" => Ok(SliceLevel::Basal),
            "mid1" => Ok(SliceLevel::Mid1),
            "mid2" => Ok(SliceLevel::Mid2),
            "apical" => Ok(SliceLevel::Apical),
            other => Err(config_err!("unknown slice level {other:?}")),
        }
    }
}

/// One transform applied while building an augmented training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TransformStep {
    Trim { frames: usize },
    Pad { sectors: usize, frames: usize },
    Shift { k: usize },
    Mixup { lambda: f64, partner: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub transforms: Vec<TransformStep>,
}

/// One slice: strain plus exact ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomRecord {
    pub id: String,
    pub patient_id: String,
    pub slice_level: SliceLevel,
    pub strain: StrainMatrix,
    pub tos: TosCurve,
    pub labels: SectorLabels,
    pub scar_mask: Vec<bool>,
    /// Present only on augmented samples.
    pub provenance: Option<Provenance>,
}

impl PhantomRecord {
    pub fn n_sectors(&self) -> usize {
        self.strain.n_sectors()
    }

    /// Checks that all per-sector fields agree in length.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_sectors();
        if self.tos.len() != n || self.labels.len() != n || self.scar_mask.len() != n {
            return Err(config_err!(
                "record {}: per-sector fields disagree (strain {n}, tos {}, labels {}, scar {})",
                self.id,
                self.tos.len(),
                self.labels.len(),
                self.scar_mask.len()
            ));
        }
        self.labels.validate()
    }

    pub fn has_scar(&self) -> bool {
        self.scar_mask.iter().any(|&s| s)
    }
}
