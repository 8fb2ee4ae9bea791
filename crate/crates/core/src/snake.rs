//! Active-contour TOS estimation: a closed curve over the sector axis pulled
//! toward the best "not yet contracting / contracting" boundary of each row.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::strain::{StrainMatrix, TosCurve};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnakeConfig {
    /// Tension (first-difference) weight.
    pub lambda: f64,
    /// Rigidity (second-difference) weight.
    pub beta: f64,
    /// Initial gradient-descent step.
    pub gamma: f64,
    pub max_iters: usize,
    /// Convergence threshold on the largest node movement, in frames.
    pub convergence_tol: f64,
    /// A frame counts as contracting when strain < −ε.
    pub onset_strain_threshold: f64,
    /// Gaussian smoothing of the potential along time, in frames.
    pub potential_smoothing_sigma: f64,
}

impl Default for SnakeConfig {
    fn default() -> Self {
        Self {
            lambda: 0.60206,
            beta: 4.8778,
            gamma: 0.43512,
            max_iters: 2000,
            convergence_tol: 1e-4,
            onset_strain_threshold: 0.03,
            potential_smoothing_sigma: 1.0,
        }
    }
}

impl SnakeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.beta > 0.0) {
            return Err(config_err!("snake weights must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(config_err!("snake step must be >= 0"));
        }
        if !(self.potential_smoothing_sigma >= 0.0) || !(self.convergence_tol > 0.0) {
            return Err(config_err!("smoothing sigma must be >= 0 and tolerance > 0"));
        }
        Ok(())
    }
}

/// Step-fitting cost at integer boundaries `τ = 0..=n_frames` per sector.
#[derive(Clone, Debug, PartialEq)]
pub struct OnsetPotential {
    n_sectors: usize,
    n_taus: usize,
    values: Vec<f64>,
}

impl OnsetPotential {
    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    /// Number of tabulated boundaries (`n_frames + 1`).
    pub fn n_taus(&self) -> usize {
        self.n_taus
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_taus..(s + 1) * self.n_taus]
    }

    /// Linear interpolation at a real boundary position, clamped to the table.
    pub fn at(&self, s: usize, tau: f64) -> f64 {
        let row = self.row(s);
        let t = tau.clamp(0.0, (self.n_taus - 1) as f64);
        let i = (t.floor() as usize).min(self.n_taus - 2);
        let f = t - i as f64;
        row[i] * (1.0 - f) + row[i + 1] * f
    }

    /// Central difference with unit half-width, shrunk at the table edges.
    pub fn slope(&self, s: usize, tau: f64) -> f64 {
        let hi = (self.n_taus - 1) as f64;
        let (a, b) = ((tau - 1.0).max(0.0), (tau + 1.0).min(hi));
        if b <= a {
            return 0.0;
        }
        (self.at(s, b) - self.at(s, a)) / (b - a)
    }

    /// Integer boundary with the lowest cost (first on ties).
    pub fn argmin(&self, s: usize) -> usize {
        let row = self.row(s);
        (0..row.len()).fold(0, |best, i| if row[i] < row[best] { i } else { best })
    }
}

fn smooth_along_time(row: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return row.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let last = row.len() as isize - 1;
    (0..row.len() as isize)
        .map(|i| {
            (-radius..=radius)
                .zip(&kernel)
                .map(|(d, w)| w * row[(i + d).clamp(0, last) as usize])
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// `P(s, τ) = #{u < τ : e(s,u) < −ε} + #{u ≥ τ : e(s,u) ≥ −ε}`, smoothed
/// along τ with a Gaussian of width `sigma` (edge-replicated).
pub fn onset_potential(m: &StrainMatrix, eps: f64, sigma: f64) -> OnsetPotential {
    let (n_s, n_f) = (m.n_sectors(), m.n_frames());
    let n_taus = n_f + 1;
    let mut values = Vec::with_capacity(n_s * n_taus);
    for s in 0..n_s {
        let contracting: Vec<bool> = m.row(s).iter().map(|&e| e < -eps).collect();
        let mut p = contracting.iter().filter(|&&c| !c).count() as f64;
        let mut raw = Vec::with_capacity(n_taus);
        raw.push(p);
        for &c in &contracting {
            p += if c { 1.0 } else { -1.0 };
            raw.push(p);
        }
        values.extend(smooth_along_time(&raw, sigma));
    }
    OnsetPotential { n_sectors: n_s, n_taus, values }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnakeResult {
    pub tos: TosCurve,
    /// Node positions in frames.
    pub frames: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Step size after adaptive halving.
    pub final_gamma: f64,
    /// Energy of the initial curve followed by every accepted iterate.
    pub energies: Vec<f64>,
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Total snake energy of node positions `t` (frames).
pub fn snake_energy(t: &[f64], potential: &OnsetPotential, cfg: &SnakeConfig) -> f64 {
    let n = t.len();
    (0..n)
        .map(|s| {
            let i = s as isize;
            let d1 = t[wrap(i + 1, n)] - t[s];
            let d2 = t[wrap(i + 1, n)] - 2.0 * t[s] + t[wrap(i - 1, n)];
            cfg.lambda * d1 * d1 + cfg.beta * d2 * d2 + potential.at(s, t[s])
        })
        .sum()
}

fn energy_gradient(t: &[f64], potential: &OnsetPotential, cfg: &SnakeConfig) -> Vec<f64> {
    let n = t.len();
    let at = |i: isize| t[wrap(i, n)];
    let curv = |i: isize| at(i + 1) - 2.0 * at(i) + at(i - 1);
    (0..n)
        .map(|s| {
            let i = s as isize;
            let tension = 2.0 * cfg.lambda * (2.0 * at(i) - at(i - 1) - at(i + 1));
            let rigidity = 2.0 * cfg.beta * (curv(i - 1) - 2.0 * curv(i) + curv(i + 1));
            tension + rigidity + potential.slope(s, t[s])
        })
        .collect()
}

/// First frame with strain below `−eps`, or the last frame if none.
pub fn initial_frames(m: &StrainMatrix, eps: f64) -> Vec<f64> {
    (0..m.n_sectors())
        .map(|s| m.row(s).iter().position(|&e| e < -eps).unwrap_or(m.n_frames() - 1) as f64)
        .collect()
}

/// Runs explicit gradient descent on the snake energy, halving the step
/// whenever a proposal would raise the energy.
pub fn snake_tos(m: &StrainMatrix, cfg: &SnakeConfig) -> Result<SnakeResult> {
    cfg.validate()?;
    let potential = onset_potential(m, cfg.onset_strain_threshold, cfg.potential_smoothing_sigma);
    let hi = (m.n_frames() - 1) as f64;
    let mut t = initial_frames(m, cfg.onset_strain_threshold);
    let mut energy = snake_energy(&t, &potential, cfg);
    let mut energies = vec![energy];
    let mut gamma = cfg.gamma;
    let mut converged = gamma == 0.0;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let g = energy_gradient(&t, &potential, cfg);
        let proposal: Vec<f64> = t.iter().zip(&g).map(|(x, d)| (x - gamma * d).clamp(0.0, hi)).collect();
        let e_new = snake_energy(&proposal, &potential, cfg);
        if e_new > energy {
            gamma *= 0.5;
            if gamma < 1e-15 {
                converged = true;
            }
            continue;
        }
        let moved = t.iter().zip(&proposal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        t = proposal;
        energy = e_new;
        energies.push(energy);
        converged = moved < cfg.convergence_tol;
    }
    if !converged {
        log::warn!("snake did not converge within {} iterations", cfg.max_iters);
    }
    let period = m.frame_period_ms();
    Ok(SnakeResult {
        tos: TosCurve::new(t.iter().map(|f| f * period).collect()),
        frames: t,
        iterations,
        converged,
        final_gamma: gamma,
        energies,
    })
}
