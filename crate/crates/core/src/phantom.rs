//! Synthetic strain phantom.
//!
//! Each patient contributes four short-axis slices. Every slice has one
//! contiguous circular run of late-activated (LMA) sectors and, with
//! probability `scar_probability`, a scar run abutting it. Sector time
//! courses are built noiselessly from their kind and onset frame, then a
//! sector-correlated Gaussian noise field is added.
//!
//! Curve shapes (frames `t`, onset frame `f0`, descent length
//! [`DESCENT_FRAMES`]):
//!
//! * normal: `0` before `f0`, then `peak · ease((t - f0) / D)`
//! * lma: `pre · sin(π t / f0)` before `f0`, then the same descent
//! * scar: `pre · sin(π t / W)` over the first `W` frames, then eases to a
//!   small residual in `[-0.02, 0.03]`; no contraction onset
//!
//! where `ease(x) = 1 - (1 - x)^3` on `[0, 1]` and `1` beyond.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::strain::{
    PhantomRecord, SectorLabels, SliceLevel, StrainMatrix, TosCurve, DEFAULT_FRAME_PERIOD_MS,
};

/// Frames from onset to peak contraction.
pub const DESCENT_FRAMES: f64 = 5.0;

/// Residual late strain range of scar sectors.
const SCAR_RESIDUAL: [f64; 2] = [-0.02, 0.03];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_sectors: usize,
    /// Inclusive range of frames per patient.
    pub n_frames_range: [usize; 2],
    pub frame_period_ms: f64,
    pub baseline_tos_ms: [f64; 2],
    pub lma_tos_ms: [f64; 2],
    /// Inclusive range of LMA run lengths, in sectors.
    pub lma_width: [usize; 2],
    pub scar_probability: f64,
    pub scar_width: [usize; 2],
    pub peak_strain: [f64; 2],
    pub pre_stretch_peak: [f64; 2],
    /// Marginal per-cell standard deviation of the noise field.
    pub noise_std: f64,
    /// Circular Gaussian correlation of the noise across sectors.
    pub sector_smoothing_sigma: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_sectors: 18,
            n_frames_range: [36, 48],
            frame_period_ms: DEFAULT_FRAME_PERIOD_MS,
            baseline_tos_ms: [17.0, 68.0],
            lma_tos_ms: [170.0, 340.0],
            lma_width: [3, 7],
            scar_probability: 0.3,
            scar_width: [2, 4],
            peak_strain: [-0.22, -0.12],
            pre_stretch_peak: [0.05, 0.15],
            noise_std: 0.01,
            sector_smoothing_sigma: 1.0,
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Integer onset frames covered by a ms range.
    fn frame_range(&self, ms: [f64; 2]) -> [usize; 2] {
        let lo = (ms[0] / self.frame_period_ms - 1e-9).ceil().max(1.0) as usize;
        let hi = (ms[1] / self.frame_period_ms + 1e-9).floor() as usize;
        [lo, hi]
    }

    pub fn baseline_frames(&self) -> [usize; 2] {
        self.frame_range(self.baseline_tos_ms)
    }

    pub fn lma_frames(&self) -> [usize; 2] {
        self.frame_range(self.lma_tos_ms)
    }

    pub fn validate(&self) -> Result<()> {
        fn ordered<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<()> {
            if r[0] > r[1] {
                return Err(config_err!("{name} range {r:?} is empty"));
            }
            Ok(())
        }
        ordered("n_frames", &self.n_frames_range)?;
        ordered("baseline_tos_ms", &self.baseline_tos_ms)?;
        ordered("lma_tos_ms", &self.lma_tos_ms)?;
        ordered("lma_width", &self.lma_width)?;
        ordered("scar_width", &self.scar_width)?;
        ordered("peak_strain", &self.peak_strain)?;
        ordered("pre_stretch_peak", &self.pre_stretch_peak)?;
        if self.n_sectors < 3 {
            return Err(config_err!("need at least 3 sectors"));
        }
        if !(self.frame_period_ms > 0.0) {
            return Err(config_err!("frame period must be positive"));
        }
        if !(0.0..=1.0).contains(&self.scar_probability) {
            return Err(config_err!("scar probability {} outside [0, 1]", self.scar_probability));
        }
        if self.lma_width[0] == 0 || self.scar_width[0] == 0 {
            return Err(config_err!("run widths must be >= 1"));
        }
        if self.lma_width[1] + self.scar_width[1] >= self.n_sectors {
            return Err(config_err!("LMA and scar runs must leave at least one normal sector"));
        }
        let base = self.baseline_frames();
        let lma = self.lma_frames();
        if base[0] > base[1] || lma[0] > lma[1] {
            return Err(config_err!("TOS ranges must contain at least one whole frame"));
        }
        if base[1] >= lma[0] {
            return Err(config_err!("baseline and LMA TOS bands overlap"));
        }
        if lma[1] as f64 + DESCENT_FRAMES >= self.n_frames_range[0] as f64 {
            return Err(config_err!(
                "latest LMA onset (frame {}) leaves no room for contraction in {} frames",
                lma[1],
                self.n_frames_range[0]
            ));
        }
        if !(self.peak_strain[1] < -0.05 && self.peak_strain[0] > -1.0) {
            return Err(config_err!("peak strain must lie in (-1, -0.05)"));
        }
        if !(self.pre_stretch_peak[0] > 0.03 && self.pre_stretch_peak[1] < 1.0) {
            return Err(config_err!("pre-stretch peak must lie in (0.03, 1)"));
        }
        if self.noise_std < 0.0 || self.sector_smoothing_sigma < 0.0 {
            return Err(config_err!("noise parameters must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectorKind {
    Normal,
    Lma,
    Scar,
}

/// Shape parameters of one noiseless sector time course.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveShape {
    /// Negative plateau reached `DESCENT_FRAMES` after onset.
    pub peak: f64,
    /// Positive early stretch amplitude (lma and scar kinds).
    pub pre_stretch: f64,
    /// Duration of the scar's stretch bump, in frames.
    pub scar_stretch_frames: f64,
    pub scar_residual: f64,
}

fn ease(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        1.0 - (1.0 - x).powi(3)
    }
}

/// Deterministic noiseless time course; `onset` is the onset frame.
pub fn sector_curve(kind: SectorKind, onset: f64, n_frames: usize, shape: &CurveShape) -> Vec<f64> {
    (0..n_frames)
        .map(|t| {
            let t = t as f64;
            match kind {
                SectorKind::Normal | SectorKind::Lma if t >= onset => {
                    shape.peak * ease((t - onset) / DESCENT_FRAMES)
                }
                SectorKind::Normal => 0.0,
                SectorKind::Lma => shape.pre_stretch * (PI * t / onset).sin(),
                SectorKind::Scar => {
                    let w = shape.scar_stretch_frames;
                    if t <= w {
                        shape.pre_stretch * (PI * t / w).sin()
                    } else {
                        shape.scar_residual * ease((t - w) / DESCENT_FRAMES)
                    }
                }
            }
        })
        .collect()
}

/// Draws shape parameters for a sector of `kind` and returns its noiseless
/// time course. `tos_ms` is the activation time (ignored in shape for scar,
/// whose stretch is not followed by onset).
pub fn synth_sector_curve<R: Rng + ?Sized>(
    tos_ms: f64,
    kind: SectorKind,
    n_frames: usize,
    spec: &PhantomSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let onset = tos_ms / spec.frame_period_ms;
    if !(onset > 0.0) || onset > (n_frames - 1) as f64 {
        return Err(Error::Generation(format!(
            "TOS {tos_ms} ms (frame {onset:.2}) is outside frames 1..{}",
            n_frames - 1
        )));
    }
    let shape = draw_shape(n_frames, spec, rng);
    Ok(sector_curve(kind, onset, n_frames, &shape))
}

fn draw_shape<R: Rng + ?Sized>(n_frames: usize, spec: &PhantomSpec, rng: &mut R) -> CurveShape {
    let lma = spec.lma_frames();
    let w_lo = lma[0].saturating_sub(2).max(4);
    let w_hi = (n_frames / 3).max(w_lo);
    CurveShape {
        peak: uniform(rng, spec.peak_strain),
        pre_stretch: uniform(rng, spec.pre_stretch_peak),
        scar_stretch_frames: rng.random_range(w_lo..=w_hi) as f64,
        scar_residual: uniform(rng, SCAR_RESIDUAL),
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Normalized circular Gaussian weights for offsets `-radius..=radius`.
pub(crate) fn circular_gaussian(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Noise field with marginal std `noise_std`, correlated across sectors.
fn noise_field<R: Rng + ?Sized>(
    n_sectors: usize,
    n_frames: usize,
    spec: &PhantomSpec,
    rng: &mut R,
) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..n_sectors * n_frames).map(|_| normal.sample(rng)).collect();
    let kernel = circular_gaussian(spec.sector_smoothing_sigma);
    let radius = (kernel.len() / 2) as isize;
    let gain = spec.noise_std / kernel.iter().map(|w| w * w).sum::<f64>().sqrt();
    let mut out = vec![0.0; raw.len()];
    for s in 0..n_sectors {
        for (j, w) in kernel.iter().enumerate() {
            let src = (s as isize + j as isize - radius).rem_euclid(n_sectors as isize) as usize;
            for t in 0..n_frames {
                out[s * n_frames + t] += w * raw[src * n_frames + t];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= gain);
    out
}

/// Generates `4 · patient_count` records, ordered by patient then slice.
///
/// Each patient draws from its own stream derived from `(rng_seed,
/// patient_index)`, so the output is a pure function of the inputs.
pub fn generate_phantom(spec: &PhantomSpec, patient_count: usize) -> Result<Vec<PhantomRecord>> {
    spec.validate()?;
    if patient_count == 0 {
        return Err(config_err!("patient count must be >= 1"));
    }
    let mut records = Vec::with_capacity(4 * patient_count);
    for p in 0..patient_count {
        records.extend(generate_patient(spec, p)?);
    }
    Ok(records)
}

fn generate_patient(spec: &PhantomSpec, index: usize) -> Result<Vec<PhantomRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64);
    let n = spec.n_sectors;
    let n_frames = rng.random_range(spec.n_frames_range[0]..=spec.n_frames_range[1]);
    let base_center = rng.random_range(0..n);
    let patient_id = format!("P{index:03}");
    let base = spec.baseline_frames();
    let lma = spec.lma_frames();

    let mut out = Vec::with_capacity(4);
    for level in SliceLevel::ALL {
        let jitter = rng.random_range(-1i64..=1) as isize;
        let center = (base_center as isize + jitter).rem_euclid(n as isize) as usize;
        let width = rng.random_range(spec.lma_width[0]..=spec.lma_width[1]);
        let start = (center + n - (width - 1) / 2) % n;
        let peak_frame = rng.random_range(lma[0]..=lma[1]);

        let mut kinds = vec![SectorKind::Normal; n];
        let mut onset = vec![0usize; n];
        let mid = (width - 1) as f64 / 2.0;
        for j in 0..width {
            let s = (start + j) % n;
            kinds[s] = SectorKind::Lma;
            let drop = (j as f64 - mid).abs().floor() as usize;
            onset[s] = peak_frame.saturating_sub(drop).max(lma[0]);
        }
        let has_scar = rng.random_bool(spec.scar_probability);
        let scar_width = rng.random_range(spec.scar_width[0]..=spec.scar_width[1]);
        let before = rng.random_bool(0.5);
        if has_scar {
            for j in 0..scar_width {
                let s = if before { (start + n - 1 - j) % n } else { (start + width + j) % n };
                kinds[s] = SectorKind::Scar;
            }
        }

        let mut values = Vec::with_capacity(n * n_frames);
        for s in 0..n {
            if kinds[s] != SectorKind::Lma {
                onset[s] = rng.random_range(base[0]..=base[1]);
            }
            let tos_ms = onset[s] as f64 * spec.frame_period_ms;
            values.extend(synth_sector_curve(tos_ms, kinds[s], n_frames, spec, &mut rng)?);
        }
        if spec.noise_std > 0.0 {
            let noise = noise_field(n, n_frames, spec, &mut rng);
            for (v, e) in values.iter_mut().zip(noise) {
                *v += e;
            }
        }
        for v in values.iter_mut() {
            *v = v.clamp(-0.99, 0.99);
        }

        let strain = StrainMatrix::new(n, n_frames, spec.frame_period_ms, values)?;
        let is_lma: Vec<bool> = kinds.iter().map(|&k| k == SectorKind::Lma).collect();
        out.push(PhantomRecord {
            id: format!("{patient_id}-{}", level.as_str()),
            patient_id: patient_id.clone(),
            slice_level: level,
            strain,
            tos: TosCurve::new(onset.iter().map(|&f| f as f64 * spec.frame_period_ms).collect()),
            labels: SectorLabels::from_hard(&is_lma),
            scar_mask: kinds.iter().map(|&k| k == SectorKind::Scar).collect(),
            provenance: None,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

pub type Point = [f64; 2];
/// Circumferential segment of one sector, `[start, end]` in mm.
pub type Segment = [Point; 2];

fn chord(seg: &Segment) -> f64 {
    (seg[1][0] - seg[0][0]).hypot(seg[1][1] - seg[0][1])
}

/// Engineering circumferential strain `(L(s,t) - L(s,0)) / L(s,0)` from
/// per-frame segment endpoints (`segments[frame][sector]`, frame 0 is the
/// reference).
pub fn strain_from_displacement(segments: &[Vec<Segment>], frame_period_ms: f64) -> Result<StrainMatrix> {
    let n_frames = segments.len();
    let n_sectors = segments.first().map_or(0, Vec::len);
    if n_frames == 0 || n_sectors == 0 {
        return Err(config_err!("need at least one frame and one sector"));
    }
    if let Some(t) = segments.iter().position(|f| f.len() != n_sectors) {
        return Err(config_err!("frame {t} has {} sectors, expected {n_sectors}", segments[t].len()));
    }
    let reference: Vec<f64> = segments[0].iter().map(chord).collect();
    if let Some(s) = reference.iter().position(|&l| !(l > 0.0)) {
        return Err(Error::Geometry(format!("sector {s} has zero reference length")));
    }
    let mut values = vec![0.0; n_sectors * n_frames];
    for (t, frame) in segments.iter().enumerate() {
        for (s, seg) in frame.iter().enumerate() {
            values[s * n_frames + t] = (chord(seg) - reference[s]) / reference[s];
        }
    }
    StrainMatrix::new(n_sectors, n_frames, frame_period_ms, values)
}

/// Reference segments of a circular ring, sector `s` spanning angles
/// `[2πs/n, 2π(s+1)/n]`, counter-clockwise.
pub fn ring_segments(n_sectors: usize, radius_mm: f64, center: Point) -> Vec<Segment> {
    let at = |k: usize| {
        let a = 2.0 * PI * k as f64 / n_sectors as f64;
        [center[0] + radius_mm * a.cos(), center[1] + radius_mm * a.sin()]
    };
    (0..n_sectors).map(|s| [at(s), at(s + 1)]).collect()
}

/// Moves each reference segment's endpoints symmetrically about its midpoint
/// so that its chord realizes the strain in `m`; inverse of
/// [`strain_from_displacement`].
pub fn segments_from_strain(reference: &[Segment], m: &StrainMatrix) -> Result<Vec<Vec<Segment>>> {
    if reference.len() != m.n_sectors() {
        return Err(config_err!("{} reference segments for {} sectors", reference.len(), m.n_sectors()));
    }
    Ok((0..m.n_frames())
        .map(|t| {
            reference
                .iter()
                .enumerate()
                .map(|(s, seg)| {
                    let f = 1.0 + m.get(s, t);
                    let mid = [(seg[0][0] + seg[1][0]) / 2.0, (seg[0][1] + seg[1][1]) / 2.0];
                    let scale = |p: Point| [mid[0] + f * (p[0] - mid[0]), mid[1] + f * (p[1] - mid[1])];
                    [scale(seg[0]), scale(seg[1])]
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> CurveShape {
        CurveShape { peak: -0.12, pre_stretch: 0.1, scar_stretch_frames: 12.0, scar_residual: -0.02 }
    }

    #[test]
    fn normal_curve_is_zero_before_onset_and_peaks_after() {
        let c = sector_curve(SectorKind::Normal, 10.0, 40, &shape());
        assert!(c[..10].iter().all(|&v| v == 0.0));
        let (argmin, min) = c.iter().enumerate().fold((0, f64::MAX), |a, (i, &v)| if v < a.1 { (i, v) } else { a });
        assert!(min <= -0.12);
        assert!(argmin > 10);
    }

    #[test]
    fn onset_is_visible_within_one_frame() {
        for onset in 1..25 {
            for peak in [-0.12, -0.17, -0.22] {
                let s = CurveShape { peak, ..shape() };
                for kind in [SectorKind::Normal, SectorKind::Lma] {
                    let c = sector_curve(kind, onset as f64, 40, &s);
                    let first = c.iter().position(|&v| v < -0.05).unwrap();
                    assert!(first.abs_diff(onset) <= 1, "{kind:?} onset {onset} first {first}");
                }
            }
        }
    }

    #[test]
    fn scar_curve_stretches_early_without_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = PhantomSpec { noise_std: 0.0, ..Default::default() };
        for n_frames in [36, 42, 48] {
            for _ in 0..20 {
                let c = synth_sector_curve(34.0, SectorKind::Scar, n_frames, &spec, &mut rng).unwrap();
                let early = n_frames / 3;
                let mean: f64 = c[..early].iter().sum::<f64>() / early as f64;
                assert!(mean > 0.0);
                assert!(c.iter().cloned().fold(f64::MIN, f64::max) > 0.03);
                assert!(c[early..].iter().all(|&v| v > -0.03 && v < 0.05));
            }
        }
    }

    #[test]
    fn tos_past_last_frame_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = PhantomSpec::default();
        let err = synth_sector_curve(40.0 * 17.0, SectorKind::Normal, 36, &spec, &mut rng);
        assert!(matches!(err, Err(Error::Generation(_))));
    }

    #[test]
    fn gaussian_weights_are_normalized() {
        let w = circular_gaussian(1.0);
        assert_eq!(w.len(), 7);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(circular_gaussian(0.0), vec![1.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(PhantomSpec::default().validate().is_ok());
        let bad = PhantomSpec { scar_probability: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PhantomSpec { lma_width: [5, 3], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PhantomSpec { n_frames_range: [20, 48], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
