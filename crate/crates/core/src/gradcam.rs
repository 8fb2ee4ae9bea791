//! Grad-CAM for the regression output at one sector.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{batch_tensor, MtlNet};
use crate::strain::{SectorLabels, StrainMatrix};
use crate::tensor::{Mode, Sequential, Tensor};

pub const DEFAULT_TARGET_LAYER: &str = "joint.conv3";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCamMap {
    pub n_sectors: usize,
    pub n_frames: usize,
    pub target_sector: usize,
    pub target_layer: String,
    /// Row-major by sector, all in `[0, 1]`.
    pub values: Vec<f64>,
}

impl GradCamMap {
    pub fn get(&self, sector: usize, frame: usize) -> f64 {
        self.values[sector * self.n_frames + frame]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Midpoint of the longest circular run of LMA sectors (lowest start on
/// ties, lower middle for even lengths). `None` without LMA sectors.
pub fn central_sector(labels: &SectorLabels) -> Option<usize> {
    let lma = labels.hard();
    let n = lma.len();
    if !lma.iter().any(|&l| l) {
        return None;
    }
    if lma.iter().all(|&l| l) {
        return Some((n - 1) / 2);
    }
    let mut best: Option<(usize, usize)> = None;
    for start in 0..n {
        if !lma[start] || lma[(start + n - 1) % n] {
            continue;
        }
        let len = (0..n).take_while(|&d| lma[(start + d) % n]).count();
        if best.is_none_or(|(_, l)| len > l) {
            best = Some((start, len));
        }
    }
    let (start, len) = best.expect("a run exists when some but not all sectors are LMA");
    Some((start + (len - 1) / 2) % n)
}

/// Sector window `center ± half_width` (circular) crossed with a frame range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub frames: Range<usize>,
    pub center_sector: usize,
    pub half_width: usize,
}

impl Region {
    pub fn sectors(&self, n_sectors: usize) -> Vec<usize> {
        let span = (2 * self.half_width + 1).min(n_sectors);
        let first = (self.center_sector + n_sectors * (self.half_width / n_sectors + 1) - self.half_width) % n_sectors;
        (0..span).map(|d| (first + d) % n_sectors).collect()
    }
}

/// Share of the map's total inside `region` (0 for an all-zero map).
pub fn attention_mass(map: &GradCamMap, region: &Region) -> f64 {
    let total: f64 = map.values.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let frames = region.frames.start.min(map.n_frames)..region.frames.end.min(map.n_frames);
    let inside: f64 = region
        .sectors(map.n_sectors)
        .into_iter()
        .map(|s| frames.clone().map(|f| map.get(s, f)).sum::<f64>())
        .sum();
    inside / total
}

/// Resamples an `h × w` map to `n_s × n_f` with cell-centred bilinear
/// interpolation, circular along sectors and edge-clamped along time.
pub fn upsample_circular(raw: &[f64], h: usize, w: usize, n_s: usize, n_f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_s * n_f);
    for s in 0..n_s {
        let u = (s as f64 + 0.5) * h as f64 / n_s as f64 - 0.5;
        let u0 = u.floor();
        let fu = u - u0;
        let r0 = (u0 as isize).rem_euclid(h as isize) as usize;
        let r1 = (r0 + 1) % h;
        for f in 0..n_f {
            let v = ((f as f64 + 0.5) * w as f64 / n_f as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let c0 = v.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let fv = v - c0 as f64;
            let row = |r: usize| raw[r * w + c0] * (1.0 - fv) + raw[r * w + c1] * fv;
            out.push(row(r0) * (1.0 - fu) + row(r1) * fu);
        }
    }
    out
}

/// Channel weights are spatial means of the gradient; the map is
/// `ReLU(Σ_k α_k A_k)`, upsampled and scaled to a unit maximum.
pub fn cam_from_activations(a: &Tensor, grad: &Tensor, n_s: usize, n_f: usize) -> Result<Vec<f64>> {
    let s = a.shape();
    if s.len() != 4 || s[0] != 1 || grad.shape() != s {
        return Err(config_err!("Grad-CAM needs matching [1, C, H, W] activations and gradients, got {s:?}"));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let mut raw = vec![0.0; plane];
    for k in 0..c {
        let ak = &a.data()[k * plane..(k + 1) * plane];
        let gk = &grad.data()[k * plane..(k + 1) * plane];
        let alpha = gk.iter().sum::<f64>() / plane as f64;
        for (r, v) in raw.iter_mut().zip(ak) {
            *r += alpha * v;
        }
    }
    for r in raw.iter_mut() {
        *r = r.max(0.0);
    }
    let mut map = upsample_circular(&raw, h, w, n_s, n_f);
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in map.iter_mut() {
            *v /= max;
        }
    }
    Ok(map)
}

/// Grad-CAM for any trunk/head pair: activations after `trunk` layer
/// `target`, gradient of head output `[0, target_sector]`.
pub fn gradcam_parts(
    trunk: &Sequential,
    target: usize,
    head: &Sequential,
    x: &Tensor,
    target_sector: usize,
) -> Result<Vec<f64>> {
    let (n_s, n_f) = (x.shape()[2], x.shape()[3]);
    let mut trunk = trunk.clone();
    let mut head = head.clone();
    let split = target + 1;
    let a = trunk.forward_range(x, 0..split, Mode::Eval)?;
    let features = trunk.forward_range(&a, split..trunk.len(), Mode::Eval)?;
    let out = head.forward(&features, Mode::Eval)?;
    let n_out = out.shape()[1];
    if target_sector >= n_out {
        return Err(config_err!("target sector {target_sector} outside 0..{n_out}"));
    }
    let mut seed = Tensor::zeros(out.shape());
    seed.data_mut()[target_sector] = 1.0;
    let d_features = head.backward(&seed)?;
    let d_a = trunk.backward_range(&d_features, split..trunk.len())?;
    cam_from_activations(&a, &d_a, n_s, n_f)
}

/// Grad-CAM of the regression output at `target_sector` with respect to the
/// named joint layer, for one preprocessed strain matrix.
pub fn gradcam(net: &MtlNet, m: &StrainMatrix, target_sector: usize, target_layer: &str) -> Result<GradCamMap> {
    let idx = net
        .joint
        .index_of(target_layer)
        .ok_or_else(|| config_err!("unknown Grad-CAM layer {target_layer:?} (joint layers: {:?})", net.joint.names()))?;
    let cfg = net.config();
    let x = batch_tensor([m], cfg.n_sectors, cfg.n_frames)?;
    let values = gradcam_parts(&net.joint, idx, &net.reg_head, &x, target_sector)?;
    Ok(GradCamMap {
        n_sectors: cfg.n_sectors,
        n_frames: cfg.n_frames,
        target_sector,
        target_layer: target_layer.to_string(),
        values,
    })
}
