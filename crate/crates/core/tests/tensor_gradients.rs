//! Finite-difference checks of every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tos_core::tensor::{
    gradient_check, BatchNorm, Conv2d, GradTarget, Layer, LayerConfig, Linear, Mode, ParamRole,
    ParamSelection, ParamTensor, Sequential, Tensor,
};
use tos_core::Result;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Loss `Σ c·y` (or `½Σ (y - c)²`) over the output of a layer stack, with the
/// input itself exposed as a parameter so its gradient is checked too.
struct Probe {
    net: Sequential,
    input: ParamTensor,
    coef: Tensor,
    mode: Mode,
    quadratic: bool,
    corrupt: f64,
}

impl Probe {
    fn new(net: Sequential, input: Tensor, rng: &mut ChaCha8Rng, mode: Mode) -> Self {
        let out = net.clone().forward(&input, mode).unwrap();
        let coef = random_tensor(out.shape(), rng);
        Self {
            net,
            input: ParamTensor::new("input", ParamRole::Bias, input),
            coef,
            mode,
            quadratic: false,
            corrupt: 1.0,
        }
    }

    fn eval(&mut self) -> Result<(f64, Tensor)> {
        let y = self.net.forward(&self.input.value, self.mode)?;
        let (loss, dy): (f64, Vec<f64>) = if self.quadratic {
            let d: Vec<f64> = y.data().iter().zip(self.coef.data()).map(|(a, c)| a - c).collect();
            (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
        } else {
            (y.data().iter().zip(self.coef.data()).map(|(a, c)| a * c).sum(), self.coef.data().to_vec())
        };
        Ok((loss, Tensor::new(y.shape().to_vec(), dy)?))
    }
}

impl GradTarget for Probe {
    fn loss_and_grad(&mut self) -> Result<f64> {
        for p in self.params_mut() {
            p.zero_grad();
        }
        let (loss, dy) = self.eval()?;
        let dx = self.net.backward(&dy)?;
        self.input.accumulate(dx.data());
        let corrupt = self.corrupt;
        if corrupt != 1.0 {
            for p in self.params_mut() {
                for g in p.grad.data_mut() {
                    *g *= corrupt;
                }
            }
        }
        Ok(loss)
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.eval()?.0)
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.net.params_mut();
        v.push(&mut self.input);
        v
    }
}

fn single(layer: Layer) -> Sequential {
    let mut s = Sequential::new();
    s.push("layer", layer);
    s
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let conv = Conv2d::new("c", 2, 3, 3, &mut rng).unwrap();
    let x = random_tensor(&[1, 2, 5, 6], &mut rng);
    let mut probe = Probe::new(single(Layer::Conv2d(conv)), x, &mut rng, Mode::Train);
    let r = gradient_check(&mut probe, 1e-5, 1e-12, ParamSelection::All).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    assert_eq!(r.checked, 3 * 2 * 9 + 3 + 60);
}

#[test]
fn conv2d_batched_5x5_kernel_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let conv = Conv2d::new("c", 3, 2, 5, &mut rng).unwrap();
    let x = random_tensor(&[2, 3, 4, 7], &mut rng);
    let mut probe = Probe::new(single(Layer::Conv2d(conv)), x, &mut rng, Mode::Train);
    let r = gradient_check(&mut probe, 1e-5, 1e-12, ParamSelection::All).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn linear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let lin = Linear::new("fc", 7, 4, &mut rng);
    let x = random_tensor(&[3, 7], &mut rng);
    let mut probe = Probe::new(single(Layer::Linear(lin)), x, &mut rng, Mode::Train);
    let r = gradient_check(&mut probe, 1e-5, 1e-12, ParamSelection::All).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn linear_quadratic_loss_is_near_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let lin = Linear::new("fc", 5, 3, &mut rng);
    let x = random_tensor(&[2, 5], &mut rng);
    let mut probe = Probe::new(single(Layer::Linear(lin)), x, &mut rng, Mode::Train);
    probe.quadratic = true;
    let r = gradient_check(&mut probe, 1e-5, 1e-12, ParamSelection::All).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn batchnorm_train_mode_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut bn = BatchNorm::new("bn", 3);
    for g in bn.gamma.value.data_mut() {
        *g = rng.random_range(0.5..1.5);
    }
    let x = random_tensor(&[4, 3, 2, 3], &mut rng);
    let mut probe = Probe::new(single(Layer::BatchNorm(bn)), x, &mut rng, Mode::Train);
    probe.quadratic = true;
    let r = gradient_check(&mut probe, 1e-5, 1e-12, ParamSelection::All).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn batchnorm_eval_mode_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut bn = BatchNorm::new("bn", 4);
    bn.running_mean = random_tensor(&[4], &mut rng);
    let x = random_tensor(&[1, 4], &mut rng);
    let mut probe = Probe::new(single(Layer::BatchNorm(bn)), x, &mut rng, Mode::Eval);
    let r = gradient_check(&mut probe, 1e-5, 1e-12, ParamSelection::All).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn conv_block_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfgs = [
        LayerConfig::Conv2d { in_channels: 1, out_channels: 3, kernel: 3 },
        LayerConfig::Batchnorm { features: 3, eps: 1e-5, momentum: 0.1 },
        LayerConfig::Maxpool { window: [2, 2] },
        LayerConfig::Relu,
        LayerConfig::Conv2d { in_channels: 3, out_channels: 2, kernel: 3 },
        LayerConfig::Maxpool { window: [1, 2] },
        LayerConfig::Flatten,
        LayerConfig::FullyConnected { inputs: 2 * 3 * 2, outputs: 4 },
        LayerConfig::Scale { factor: 17.0 },
        LayerConfig::ShiftedLeakyRelu { alpha: 0.01, t_min: 17.0 },
    ];
    let net = Sequential::from_configs("net", &cfgs, &mut rng).unwrap();
    let x = random_tensor(&[3, 1, 5, 5], &mut rng);
    let mut probe = Probe::new(net, x, &mut rng, Mode::Train);
    // conv biases feeding a train-mode batchnorm have an exactly zero true
    // gradient; the floor keeps their roundoff-level differences out.
    let r = gradient_check(&mut probe, 1e-5, 1e-5, ParamSelection::All).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn corrupted_backward_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let lin = Linear::new("fc", 3, 2, &mut rng);
    let x = random_tensor(&[2, 3], &mut rng);
    let mut probe = Probe::new(single(Layer::Linear(lin)), x, &mut rng, Mode::Train);
    probe.corrupt = 2.0;
    let r = gradient_check(&mut probe, 1e-5, 1e-12, ParamSelection::All).unwrap();
    assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{r:?}");
    assert!(!r.passes(1e-4));
}

#[test]
fn sampled_selection_caps_entries_per_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let lin = Linear::new("fc", 10, 10, &mut rng);
    let x = random_tensor(&[2, 10], &mut rng);
    let mut probe = Probe::new(single(Layer::Linear(lin)), x, &mut rng, Mode::Train);
    let r = gradient_check(&mut probe, 1e-5, 1e-12, ParamSelection::Sample { per_tensor: 5, seed: 1 }).unwrap();
    assert_eq!(r.checked, 5 + 5 + 5);
    assert!(r.max_rel_error < 1e-6);
}

#[test]
fn forward_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfgs = [
        LayerConfig::Conv2d { in_channels: 1, out_channels: 4, kernel: 3 },
        LayerConfig::Batchnorm { features: 4, eps: 1e-5, momentum: 0.1 },
        LayerConfig::Relu,
    ];
    let mut net = Sequential::from_configs("n", &cfgs, &mut rng).unwrap();
    let x = random_tensor(&[2, 1, 6, 9], &mut rng);
    let a = net.forward(&x, Mode::Train).unwrap();
    let b = net.forward(&x, Mode::Train).unwrap();
    assert_eq!(a, b);
    assert_eq!(net.infer(&x).unwrap(), net.infer(&x).unwrap());
}
