//! Preprocessing (frame trimming, padding to a common size) and augmentation
//! (circular sector shifts, mixup).

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::strain::{PhantomRecord, Provenance, SectorLabels, StrainMatrix, TosCurve, TransformStep};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub trim_last_frames: usize,
    pub target_frames: usize,
    pub target_sectors: usize,
    /// Distinct non-zero rotations emitted per record.
    pub shift_copies: usize,
    /// Mixed samples emitted per record.
    pub mixup_copies: usize,
    /// When set, overrides `mixup_copies`: the total number of generated
    /// samples (shifts + mixups) for the whole set, with mixups spread
    /// round-robin over records.
    pub generated_total: Option<usize>,
    /// Beta(α, α) parameter for mixup weights.
    pub mixup_alpha: f64,
    pub lma_threshold_ms: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            trim_last_frames: 5,
            target_frames: 48,
            target_sectors: 18,
            shift_copies: 8,
            mixup_copies: 4,
            generated_total: None,
            mixup_alpha: 0.3,
            lma_threshold_ms: 119.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_frames == 0 || self.target_sectors == 0 {
            return Err(config_err!("target dimensions must be >= 1"));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(config_err!("mixup alpha must be positive"));
        }
        if !(self.lma_threshold_ms > 0.0) {
            return Err(config_err!("LMA threshold must be positive"));
        }
        Ok(())
    }
}

/// Drops the last `k` frames.
pub fn trim_frames(m: &StrainMatrix, k: usize) -> Result<StrainMatrix> {
    if k >= m.n_frames() {
        return Err(config_err!("cannot trim {k} frames from a {}-frame matrix", m.n_frames()));
    }
    let keep = m.n_frames() - k;
    let values = (0..m.n_sectors()).flat_map(|s| m.row(s)[..keep].iter().copied()).collect();
    StrainMatrix::new(m.n_sectors(), keep, m.frame_period_ms(), values)
}

/// Zero-pads the time axis on the right and extends the sector axis by
/// circular duplication (row `n + j` repeats row `j mod n`).
pub fn pad_to(m: &StrainMatrix, target_sectors: usize, target_frames: usize) -> Result<StrainMatrix> {
    if target_sectors < m.n_sectors() || target_frames < m.n_frames() {
        return Err(config_err!(
            "cannot pad {}x{} down to {target_sectors}x{target_frames}",
            m.n_sectors(),
            m.n_frames()
        ));
    }
    let mut out = StrainMatrix::zeros(target_sectors, target_frames, m.frame_period_ms());
    for s in 0..target_sectors {
        out.row_mut(s)[..m.n_frames()].copy_from_slice(m.row(s % m.n_sectors()));
    }
    Ok(out)
}

fn rotate<T: Clone>(v: &[T], k: usize) -> Vec<T> {
    let n = v.len();
    (0..n).map(|s| v[(s + n - k % n) % n].clone()).collect()
}

/// Rotates matrix rows, TOS entries and label rows by `k` sectors: output
/// sector `s` is input sector `s - k (mod n)`.
pub fn circular_shift(
    m: &StrainMatrix,
    tos: &TosCurve,
    labels: &SectorLabels,
    k: usize,
) -> Result<(StrainMatrix, TosCurve, SectorLabels)> {
    let n = m.n_sectors();
    if tos.len() != n || labels.len() != n {
        return Err(config_err!("shift needs per-sector fields of length {n}"));
    }
    let k = k % n;
    let mut out = StrainMatrix::zeros(n, m.n_frames(), m.frame_period_ms());
    for s in 0..n {
        out.row_mut(s).copy_from_slice(m.row((s + n - k) % n));
    }
    Ok((out, TosCurve::new(rotate(&tos.tos_ms, k)), SectorLabels { probs: rotate(&labels.probs, k) }))
}

/// [`circular_shift`] applied to a whole record, including its scar mask.
pub fn shift_record(r: &PhantomRecord, k: usize) -> Result<PhantomRecord> {
    let (strain, tos, labels) = circular_shift(&r.strain, &r.tos, &r.labels, k)?;
    Ok(PhantomRecord {
        strain,
        tos,
        labels,
        scar_mask: rotate(&r.scar_mask, k % r.n_sectors()),
        ..r.clone()
    })
}

/// Convex combination `λ·a + (1 − λ)·b` of strain, TOS and label rows. The
/// scar mask is the union of both masks.
pub fn mixup(a: &PhantomRecord, b: &PhantomRecord, lambda: f64) -> Result<PhantomRecord> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(config_err!("mixup weight {lambda} outside [0, 1]"));
    }
    if a.strain.n_sectors() != b.strain.n_sectors() || a.strain.n_frames() != b.strain.n_frames() {
        return Err(config_err!(
            "mixup shape mismatch: {}x{} vs {}x{}",
            a.strain.n_sectors(),
            a.strain.n_frames(),
            b.strain.n_sectors(),
            b.strain.n_frames()
        ));
    }
    let mix = |x: f64, y: f64| if x == y { x } else { lambda * x + (1.0 - lambda) * y };
    let values = a.strain.values().iter().zip(b.strain.values()).map(|(&x, &y)| mix(x, y)).collect();
    let strain = StrainMatrix::new(a.strain.n_sectors(), a.strain.n_frames(), a.strain.frame_period_ms(), values)?;
    let tos = TosCurve::new(a.tos.tos_ms.iter().zip(&b.tos.tos_ms).map(|(&x, &y)| mix(x, y)).collect());
    let probs = a
        .labels
        .probs
        .iter()
        .zip(&b.labels.probs)
        .map(|(p, q)| {
            let lma = mix(p[1], q[1]);
            [1.0 - lma, lma]
        })
        .collect();
    Ok(PhantomRecord {
        id: format!("{}+{}", a.id, b.id),
        strain,
        tos,
        labels: SectorLabels { probs },
        scar_mask: a.scar_mask.iter().zip(&b.scar_mask).map(|(&x, &y)| x || y).collect(),
        provenance: None,
        ..a.clone()
    })
}

/// Hard labels: LMA iff `tos > threshold_ms`.
pub fn derive_lma_labels(tos: &TosCurve, threshold_ms: f64) -> SectorLabels {
    let hard: Vec<bool> = tos.tos_ms.iter().map(|&t| t > threshold_ms).collect();
    SectorLabels::from_hard(&hard)
}

fn pad_rotating<T: Clone>(v: &[T], n: usize) -> Vec<T> {
    (0..n).map(|s| v[s % v.len()].clone()).collect()
}

/// Trims then pads a record to the configured network input size.
pub fn preprocess_record(r: &PhantomRecord, cfg: &PreprocessConfig) -> Result<PhantomRecord> {
    let trimmed = trim_frames(&r.strain, cfg.trim_last_frames)?;
    let strain = pad_to(&trimmed, cfg.target_sectors, cfg.target_frames)?;
    let n = cfg.target_sectors;
    let mut transforms = r.provenance.as_ref().map(|p| p.transforms.clone()).unwrap_or_default();
    transforms.push(TransformStep::Trim { frames: cfg.trim_last_frames });
    transforms.push(TransformStep::Pad { sectors: n, frames: cfg.target_frames });
    Ok(PhantomRecord {
        strain,
        tos: TosCurve::new(pad_rotating(&r.tos.tos_ms, n)),
        labels: SectorLabels { probs: pad_rotating(&r.labels.probs, n) },
        scar_mask: pad_rotating(&r.scar_mask, n),
        provenance: Some(Provenance { sources: vec![r.id.clone()], transforms }),
        ..r.clone()
    })
}

fn with_step(mut r: PhantomRecord, id: String, step: TransformStep, extra_source: Option<&str>) -> PhantomRecord {
    r.id = id;
    let prov = r.provenance.get_or_insert_with(|| Provenance { sources: Vec::new(), transforms: Vec::new() });
    if let Some(src) = extra_source {
        prov.sources.push(src.to_string());
    }
    prov.transforms.push(step);
    r
}

/// Builds the augmented training set.
///
/// Per record: trim, pad, then emit the original, `shift_copies` distinct
/// rotations, and mixup samples whose first operand comes from the record's
/// own group and whose partner is drawn from the whole shifted pool.
pub fn build_training_set<R: Rng + ?Sized>(
    records: &[PhantomRecord],
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> Result<Vec<PhantomRecord>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(config_err!("cannot build a training set from zero records"));
    }
    let n = cfg.target_sectors;
    if cfg.shift_copies >= n {
        return Err(config_err!("at most {} distinct shifts exist, asked for {}", n - 1, cfg.shift_copies));
    }

    let mut groups: Vec<Vec<PhantomRecord>> = Vec::with_capacity(records.len());
    for r in records {
        let base = preprocess_record(r, cfg)?;
        let mut ks: Vec<usize> = sample(rng, n - 1, cfg.shift_copies).into_iter().map(|k| k + 1).collect();
        ks.sort_unstable();
        let mut group = vec![base.clone()];
        for k in ks {
            let shifted = shift_record(&base, k)?;
            group.push(with_step(shifted, format!("{}#s{k}", r.id), TransformStep::Shift { k }, None));
        }
        groups.push(group);
    }

    let mixups_per_record: Vec<usize> = match cfg.generated_total {
        Some(total) => {
            let shifts = cfg.shift_copies * records.len();
            if total < shifts {
                return Err(config_err!("generated_total {total} is below the {shifts} shifted copies"));
            }
            let extra = total - shifts;
            let (q, rem) = (extra / records.len(), extra % records.len());
            (0..records.len()).map(|i| q + usize::from(i < rem)).collect()
        }
        None => vec![cfg.mixup_copies; records.len()],
    };

    let pool: Vec<(usize, usize)> =
        groups.iter().enumerate().flat_map(|(g, grp)| (0..grp.len()).map(move |i| (g, i))).collect();
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).map_err(|e| config_err!("mixup alpha: {e}"))?;

    let mut out = Vec::with_capacity(pool.len() + mixups_per_record.iter().sum::<usize>());
    for (g, count) in mixups_per_record.iter().enumerate() {
        let mut mixed = Vec::with_capacity(*count);
        for j in 0..*count {
            let a = &groups[g][rng.random_range(0..groups[g].len())];
            let &(pg, pi) = pool.choose(rng).expect("pool is non-empty");
            let b = &groups[pg][pi];
            let lambda = beta.sample(rng);
            let m = mixup(a, b, lambda)?;
            let mut prov = a.provenance.clone().expect("preprocessed records carry provenance");
            prov.sources.extend(b.provenance.as_ref().map(|p| p.sources.clone()).unwrap_or_default());
            prov.transforms.push(TransformStep::Mixup { lambda, partner: b.id.clone() });
            mixed.push(PhantomRecord {
                id: format!("{}#m{j}", records[g].id),
                provenance: Some(prov),
                ..m
            });
        }
        out.extend(groups[g].iter().cloned());
        out.extend(mixed);
    }
    Ok(out)
}

/// Partitions records by patient: patients listed in `holdout` go to the
/// second set.
pub fn split_by_patients(
    records: &[PhantomRecord],
    holdout: &BTreeSet<String>,
) -> (Vec<PhantomRecord>, Vec<PhantomRecord>) {
    records.iter().cloned().partition(|r| !holdout.contains(&r.patient_id))
}

/// Distinct patient ids in first-appearance order.
pub fn patient_ids(records: &[PhantomRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    records.iter().filter(|r| seen.insert(r.patient_id.clone())).map(|r| r.patient_id.clone()).collect()
}

/// Picks `count` patients uniformly at random as the holdout set.
pub fn choose_holdout<R: Rng + ?Sized>(records: &[PhantomRecord], count: usize, rng: &mut R) -> BTreeSet<String> {
    let mut ids = patient_ids(records);
    ids.shuffle(rng);
    ids.into_iter().take(count).collect()
}
