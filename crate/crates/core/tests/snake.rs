use tos_core::augment::circular_shift;
use tos_core::phantom::{generate_phantom, PhantomSpec};
use tos_core::snake::{snake_tos, SnakeConfig};
use tos_core::strain::StrainMatrix;

fn cohort(scar: f64, noise: f64, seed: u64) -> Vec<tos_core::strain::PhantomRecord> {
    let spec = PhantomSpec { rng_seed: seed, scar_probability: scar, noise_std: noise, ..Default::default() };
    generate_phantom(&spec, 6).unwrap()
}

#[test]
fn uniform_step_onset_is_recovered() {
    let mut m = StrainMatrix::zeros(18, 40, 17.0);
    for s in 0..18 {
        for f in 10..40 {
            m.set(s, f, -0.2);
        }
    }
    let res = snake_tos(&m, &SnakeConfig::default()).unwrap();
    assert!(res.converged);
    for (s, f) in res.frames.iter().enumerate() {
        assert!((f - 10.0).abs() <= 0.5, "sector {s}: {f}");
    }
    assert!((res.tos.tos_ms[0] - 170.0).abs() <= 8.5);
}

#[test]
fn stiff_snake_is_nearly_constant() {
    let cfg = SnakeConfig { lambda: 0.60206e6, beta: 4.8778e6, max_iters: 20000, ..Default::default() };
    for r in cohort(1.0, 0.01, 3).iter().take(6) {
        let res = snake_tos(&r.strain, &cfg).unwrap();
        let lo = res.frames.iter().cloned().fold(f64::MAX, f64::min);
        let hi = res.frames.iter().cloned().fold(f64::MIN, f64::max);
        assert!(hi - lo <= 1.0, "{}: spread {}", r.id, hi - lo);
    }
}

#[test]
fn energy_never_increases() {
    for r in cohort(0.5, 0.0, 8) {
        let res = snake_tos(&r.strain, &SnakeConfig::default()).unwrap();
        assert_eq!(res.energies.len(), res.iterations + 1 - halvings(&res));
        for w in res.energies.windows(2) {
            assert!(w[1] <= w[0], "{}: {} -> {}", r.id, w[0], w[1]);
        }
    }
}

fn halvings(res: &tos_core::snake::SnakeResult) -> usize {
    (SnakeConfig::default().gamma / res.final_gamma).log2().round() as usize
}

#[test]
fn shift_equivariance() {
    let cfg = SnakeConfig::default();
    for r in cohort(0.5, 0.01, 4).iter().take(8) {
        let base = snake_tos(&r.strain, &cfg).unwrap();
        for k in [1, 5, 17] {
            let (m, _, labels) = circular_shift(&r.strain, &r.tos, &r.labels, k).unwrap();
            let shifted = snake_tos(&m, &cfg).unwrap();
            let (_, expect, _) = circular_shift(&r.strain, &base.tos, &labels, k).unwrap();
            let diff = shifted.tos.tos_ms.iter().zip(&expect.tos_ms).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let tol = 17.0 * 10.0 * cfg.convergence_tol;
            assert!(diff <= tol, "{} k={k}: max diff {diff} ms", r.id);
        }
    }
}

#[test]
fn scar_sectors_fool_the_snake() {
    let (mut scar, mut normal) = (Vec::new(), Vec::new());
    for r in cohort(1.0, 0.01, 12) {
        let res = snake_tos(&r.strain, &SnakeConfig::default()).unwrap();
        for s in 0..r.n_sectors() {
            let err = (res.tos.tos_ms[s] - r.tos.tos_ms[s]).abs();
            if r.scar_mask[s] {
                scar.push(err);
            } else if !r.labels.is_lma(s) {
                normal.push(err);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!scar.is_empty());
    assert!(mean(&scar) > mean(&normal), "scar {} vs normal {}", mean(&scar), mean(&normal));
}

#[test]
fn zero_step_keeps_initialization() {
    let r = &cohort(1.0, 0.01, 1)[0];
    let res = snake_tos(&r.strain, &SnakeConfig { gamma: 0.0, ..Default::default() }).unwrap();
    assert_eq!(res.frames, tos_core::snake::initial_frames(&r.strain, 0.03));
}
