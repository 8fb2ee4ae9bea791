//! Joint convolutional trunk with a TOS regression head and an optional
//! per-sector LMA classification head.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::strain::{PhantomRecord, SectorLabels, StrainMatrix, TosCurve};
use crate::tensor::{GradTarget, LayerConfig, MaxPool2d, Mode, ParamTensor, Sequential, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Regression and classification heads.
    #[serde(rename = "mtl")]
    MultiTask,
    /// Regression head only.
    #[serde(rename = "reg")]
    Regression,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtl" => Ok(Task::MultiTask),
            "reg" => Ok(Task::Regression),
            other => Err(config_err!("unknown task {other:?} (expected mtl or reg)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub n_sectors: usize,
    pub n_frames: usize,
    pub channels: usize,
    pub kernel: usize,
    pub joint_convs: usize,
    pub head_convs: usize,
    pub joint_pool: [usize; 2],
    pub head_pool: [usize; 2],
    /// Hidden fully-connected widths of each head.
    pub hidden: Vec<usize>,
    pub leak_slope: f64,
    /// Shift of the final activation; the smallest TOS the head can emit
    /// with a non-negative pre-activation.
    pub t_min_ms: f64,
    /// Fixed multiplier on the regression head's last affine output, so
    /// that one unit of pre-activation is one frame.
    pub output_scale_ms: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::MultiTask,
            n_sectors: 18,
            n_frames: 48,
            channels: 16,
            kernel: 3,
            joint_convs: 3,
            head_convs: 3,
            joint_pool: [2, 2],
            head_pool: [1, 2],
            hidden: vec![256, 64],
            leak_slope: 0.01,
            t_min_ms: 17.0,
            output_scale_ms: 17.0,
        }
    }
}

impl ModelConfig {
    pub fn for_task(task: Task) -> Self {
        Self { task, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sectors == 0 || self.n_frames == 0 || self.channels == 0 {
            return Err(config_err!("model dimensions must be >= 1"));
        }
        if self.joint_convs == 0 {
            return Err(config_err!("the joint sub-network needs at least one conv layer"));
        }
        for cfg in self.joint_layers().iter().chain(&self.head_layers(self.n_sectors)) {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Feature-map size after the joint sub-network.
    pub fn joint_output_dims(&self) -> (usize, usize) {
        let pool = MaxPool2d::new(self.joint_pool[0], self.joint_pool[1]).expect("validated pool");
        (0..self.joint_convs).fold((self.n_sectors, self.n_frames), |(h, w), _| pool.output_dims(h, w))
    }

    fn head_flat_features(&self) -> usize {
        let pool = MaxPool2d::new(self.head_pool[0], self.head_pool[1]).expect("validated pool");
        let (h, w) = (0..self.head_convs).fold(self.joint_output_dims(), |(h, w), _| pool.output_dims(h, w));
        self.channels * h * w
    }

    fn conv_block(&self, inputs: usize, pool: [usize; 2]) -> [LayerConfig; 4] {
        [
            LayerConfig::Conv2d { in_channels: inputs, out_channels: self.channels, kernel: self.kernel },
            LayerConfig::Batchnorm { features: self.channels, eps: 1e-5, momentum: 0.1 },
            LayerConfig::Maxpool { window: pool },
            LayerConfig::Relu,
        ]
    }

    pub fn joint_layers(&self) -> Vec<LayerConfig> {
        (0..self.joint_convs)
            .flat_map(|i| self.conv_block(if i == 0 { 1 } else { self.channels }, self.joint_pool))
            .collect()
    }

    /// Conv blocks, flatten, hidden FC blocks, output FC with `outputs` units.
    pub fn head_layers(&self, outputs: usize) -> Vec<LayerConfig> {
        let mut v: Vec<LayerConfig> =
            (0..self.head_convs).flat_map(|_| self.conv_block(self.channels, self.head_pool)).collect();
        v.push(LayerConfig::Flatten);
        let mut width = self.head_flat_features();
        for &h in &self.hidden {
            v.push(LayerConfig::FullyConnected { inputs: width, outputs: h });
            v.push(LayerConfig::Batchnorm { features: h, eps: 1e-5, momentum: 0.1 });
            v.push(LayerConfig::Relu);
            width = h;
        }
        v.push(LayerConfig::FullyConnected { inputs: width, outputs });
        v
    }

    pub fn regression_layers(&self) -> Vec<LayerConfig> {
        let mut v = self.head_layers(self.n_sectors);
        v.push(LayerConfig::Scale { factor: self.output_scale_ms });
        v.push(LayerConfig::ShiftedLeakyRelu { alpha: self.leak_slope, t_min: self.t_min_ms });
        v
    }

    pub fn classification_layers(&self) -> Vec<LayerConfig> {
        self.head_layers(2 * self.n_sectors)
    }
}

/// Network outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Outputs {
    /// `[B, n_sectors]`, ms.
    pub tos: Tensor,
    /// `[B, n_sectors, 2]` raw logits.
    pub logits: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct MtlNet {
    config: ModelConfig,
    pub joint: Sequential,
    pub reg_head: Sequential,
    pub cls_head: Option<Sequential>,
}

impl MtlNet {
    /// Initializes the joint trunk, then the regression head, then the
    /// classification head, all from one stream seeded by `seed`. The joint
    /// and regression parameters therefore do not depend on the task.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joint = Sequential::from_configs("joint", &config.joint_layers(), &mut rng)?;
        let reg_head = Sequential::from_configs("reg", &config.regression_layers(), &mut rng)?;
        let cls_head = match config.task {
            Task::MultiTask => Some(Sequential::from_configs("cls", &config.classification_layers(), &mut rng)?),
            Task::Regression => None,
        };
        Ok(Self { config, joint, reg_head, cls_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.config.n_sectors || s[3] != self.config.n_frames {
            return Err(config_err!(
                "network expects [B, 1, {}, {}] input, got {s:?}",
                self.config.n_sectors,
                self.config.n_frames
            ));
        }
        Ok(())
    }

    fn reshape_logits(&self, t: Tensor) -> Result<Tensor> {
        let b = t.shape()[0];
        t.reshape(&[b, self.config.n_sectors, 2])
    }

    /// Caching forward pass for training or gradient computation.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Outputs> {
        self.forward_select(x, mode, true)
    }

    /// Forward pass that runs the classification head only if `with_cls`.
    pub fn forward_select(&mut self, x: &Tensor, mode: Mode, with_cls: bool) -> Result<Outputs> {
        self.check_input(x)?;
        let features = self.joint.forward(x, mode)?;
        self.forward_heads(&features, mode, with_cls)
    }

    /// Runs the heads on joint features.
    pub fn forward_heads(&mut self, features: &Tensor, mode: Mode, with_cls: bool) -> Result<Outputs> {
        let tos = self.reg_head.forward(features, mode)?;
        let logits = match self.cls_head.as_mut() {
            Some(h) if with_cls => Some(h.forward(features, mode)?),
            _ => None,
        };
        Ok(Outputs { tos, logits: logits.map(|l| self.reshape_logits(l)).transpose()? })
    }

    /// Backpropagates head gradients to the joint features and returns that
    /// gradient without entering the joint trunk.
    pub fn backward_heads(&mut self, d_tos: &Tensor, d_logits: Option<&Tensor>) -> Result<Tensor> {
        let mut d_feat = self.reg_head.backward(d_tos)?;
        if let (Some(head), Some(dl)) = (self.cls_head.as_mut(), d_logits) {
            let b = dl.shape()[0];
            let flat = dl.clone().reshape(&[b, 2 * self.config.n_sectors])?;
            let d_cls = head.backward(&flat)?;
            for (a, g) in d_feat.data_mut().iter_mut().zip(d_cls.data()) {
                *a += g;
            }
        }
        Ok(d_feat)
    }

    /// Full backward pass; `d_logits = None` skips the classification path.
    pub fn backward(&mut self, d_tos: &Tensor, d_logits: Option<&Tensor>) -> Result<()> {
        let d_feat = self.backward_heads(d_tos, d_logits)?;
        self.joint.backward_params(&d_feat)
    }

    /// Eval-mode forward pass without touching any layer state; safe to call
    /// concurrently.
    pub fn infer(&self, x: &Tensor) -> Result<Outputs> {
        self.check_input(x)?;
        let features = self.joint.infer(x)?;
        let tos = self.reg_head.infer(&features)?;
        let logits = match &self.cls_head {
            Some(h) => Some(self.reshape_logits(h.infer(&features)?)?),
            None => None,
        };
        Ok(Outputs { tos, logits })
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut v = self.joint.params();
        v.extend(self.reg_head.params());
        if let Some(h) = &self.cls_head {
            v.extend(h.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.joint.params_mut();
        v.extend(self.reg_head.params_mut());
        if let Some(h) = self.cls_head.as_mut() {
            v.extend(h.params_mut());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Running statistics of every batchnorm layer.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.joint.buffers();
        v.extend(self.reg_head.buffers());
        if let Some(h) = &self.cls_head {
            v.extend(h.buffers());
        }
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.joint.buffers_mut();
        v.extend(self.reg_head.buffers_mut());
        if let Some(h) = self.cls_head.as_mut() {
            v.extend(h.buffers_mut());
        }
        v
    }
}

/// Packs strain matrices into a `[B, 1, S, F]` batch.
pub fn batch_tensor<'a, I>(matrices: I, n_sectors: usize, n_frames: usize) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a StrainMatrix>,
{
    let mut data = Vec::new();
    let mut b = 0;
    for m in matrices {
        if m.n_sectors() != n_sectors || m.n_frames() != n_frames {
            return Err(config_err!(
                "strain matrix is {}x{}, network expects {n_sectors}x{n_frames}",
                m.n_sectors(),
                m.n_frames()
            ));
        }
        data.extend_from_slice(m.values());
        b += 1;
    }
    Tensor::new(vec![b, 1, n_sectors, n_frames], data)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionLoss {
    /// Per-sample Euclidean norm `‖t̂ − t‖₂`, averaged over the batch.
    Euclidean,
    /// Per-sample squared norm, averaged over the batch.
    Squared,
}

/// Unweighted loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub regression: f64,
    pub classification: f64,
    /// L1 norm of all weights (biases and batchnorm affines excluded).
    pub l1: f64,
}

/// Loss value plus gradients with respect to the network outputs.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub components: LossComponents,
    pub d_tos: Tensor,
    pub d_logits: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub l1: f64,
    pub regression: RegressionLoss,
}

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

/// Softmax probabilities `[B, S, 2]` from logits.
pub fn class_probabilities(logits: &Tensor) -> Vec<[f64; 2]> {
    logits.data().chunks_exact(2).map(|c| softmax2(c[0], c[1])).collect()
}

pub fn l1_norm<'a, I: IntoIterator<Item = &'a ParamTensor>>(params: I) -> f64 {
    params
        .into_iter()
        .filter(|p| p.is_l1_penalized())
        .map(|p| p.value.data().iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}

/// Joint loss `L_reg + λ_cls·CE + r·|w|₁` over a batch.
///
/// `labels` holds `B·S` rows of class probabilities. `l1` is the already
/// computed weight norm; its gradient is applied by [`add_l1_grad`].
pub fn loss(
    tos_pred: &Tensor,
    tos_gt: &[f64],
    logits: Option<&Tensor>,
    labels: &[[f64; 2]],
    l1: f64,
    weights: &LossWeights,
) -> Result<LossEval> {
    let (b, s) = (tos_pred.shape()[0], tos_pred.shape()[1]);
    if tos_gt.len() != b * s {
        return Err(config_err!("{} TOS targets for predictions of shape {:?}", tos_gt.len(), tos_pred.shape()));
    }
    let mut d_tos = vec![0.0; b * s];
    let mut reg = 0.0;
    for i in 0..b {
        let pred = &tos_pred.data()[i * s..(i + 1) * s];
        let gt = &tos_gt[i * s..(i + 1) * s];
        let sq: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
        match weights.regression {
            RegressionLoss::Euclidean => {
                let norm = sq.sqrt();
                reg += norm;
                if norm > 0.0 {
                    for j in 0..s {
                        d_tos[i * s + j] = (pred[j] - gt[j]) / (norm * b as f64);
                    }
                }
            }
            RegressionLoss::Squared => {
                reg += sq;
                for j in 0..s {
                    d_tos[i * s + j] = 2.0 * (pred[j] - gt[j]) / b as f64;
                }
            }
        }
    }
    reg /= b as f64;
    if !reg.is_finite() {
        return Err(Error::Numerical(format!("regression loss is {reg}")));
    }

    let mut ce = 0.0;
    let d_logits = match logits {
        Some(lg) => {
            if labels.len() != b * s || lg.len() != 2 * b * s {
                return Err(config_err!("{} label rows for logits of shape {:?}", labels.len(), lg.shape()));
            }
            let mut d = vec![0.0; 2 * b * s];
            let scale = 1.0 / (b * s) as f64;
            for (k, (c, l)) in lg.data().chunks_exact(2).zip(labels).enumerate() {
                let p = softmax2(c[0], c[1]);
                ce -= l[0] * p[0].max(PROB_FLOOR).ln() + l[1] * p[1].max(PROB_FLOOR).ln();
                let mass = l[0] + l[1];
                for j in 0..2 {
                    d[2 * k + j] = weights.lambda_cls * scale * (mass * p[j] - l[j]);
                }
            }
            ce *= scale;
            if !ce.is_finite() {
                return Err(Error::Numerical(format!("classification loss is {ce}")));
            }
            Some(Tensor::new(lg.shape().to_vec(), d)?)
        }
        _ => None,
    };
    if !l1.is_finite() {
        return Err(Error::Numerical(format!("L1 regularizer is {l1}")));
    }
    let total = reg + weights.lambda_cls * ce + weights.l1 * l1;
    Ok(LossEval {
        components: LossComponents { total, regression: reg, classification: ce, l1 },
        d_tos: Tensor::new(vec![b, s], d_tos)?,
        d_logits,
    })
}

/// Adds `r · sign(w)` to the gradient of every L1-penalized tensor.
pub fn add_l1_grad<'a, I: IntoIterator<Item = &'a mut ParamTensor>>(params: I, r: f64) {
    if r == 0.0 {
        return;
    }
    for p in params.into_iter().filter(|p| p.is_l1_penalized()) {
        let ParamTensor { value, grad, .. } = p;
        for (g, w) in grad.data_mut().iter_mut().zip(value.data()) {
            if *w != 0.0 {
                *g += r * w.signum();
            }
        }
        p.mark_grad();
    }
}

/// Total training loss of a network on one fixed batch.
#[derive(Clone, Debug)]
pub struct BatchObjective {
    pub net: MtlNet,
    pub x: Tensor,
    pub tos: Vec<f64>,
    pub labels: Vec<[f64; 2]>,
    pub weights: LossWeights,
}

impl BatchObjective {
    fn eval(&mut self) -> Result<LossEval> {
        let use_cls = self.net.cls_head.is_some() && self.weights.lambda_cls != 0.0;
        let l1 = l1_norm(self.net.params());
        let out = self.net.forward_select(&self.x, Mode::Train, use_cls)?;
        loss(&out.tos, &self.tos, out.logits.as_ref(), &self.labels, l1, &self.weights)
    }
}

impl GradTarget for BatchObjective {
    fn loss_and_grad(&mut self) -> Result<f64> {
        self.net.zero_grad();
        let e = self.eval()?;
        self.net.backward(&e.d_tos, e.d_logits.as_ref())?;
        add_l1_grad(self.net.params_mut(), self.weights.l1);
        Ok(e.components.total)
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.eval()?.components.total)
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.net.params_mut()
    }
}

// ---------------------------------------------------------------------------

/// Per-record inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub tos: TosCurve,
    /// Hard labels from the classification head, when present.
    pub labels: Option<SectorLabels>,
    /// Softmax probabilities behind `labels`.
    pub probs: Option<SectorLabels>,
}

impl MtlNet {
    /// Predicts already-preprocessed records (matching the network input
    /// size); only the first `n_sectors` entries of each output are kept.
    pub fn predict_batch(&self, matrices: &[&StrainMatrix], n_sectors: &[usize]) -> Result<Vec<Prediction>> {
        let (s, f) = (self.config.n_sectors, self.config.n_frames);
        let x = batch_tensor(matrices.iter().copied(), s, f)?;
        let out = self.infer(&x)?;
        if !out.tos.all_finite() {
            return Err(Error::Numerical("non-finite TOS prediction".into()));
        }
        let probs = out.logits.as_ref().map(class_probabilities);
        Ok((0..matrices.len())
            .map(|i| {
                let n = n_sectors[i];
                let tos = TosCurve::new(out.tos.data()[i * s..i * s + n].to_vec());
                let p = probs.as_ref().map(|p| SectorLabels { probs: p[i * s..i * s + n].to_vec() });
                let hard = p.as_ref().map(|p| SectorLabels::from_hard(&p.hard()));
                Prediction { tos, labels: hard, probs: p }
            })
            .collect())
    }

    pub fn predict(&self, m: &StrainMatrix) -> Result<Prediction> {
        let n = m.n_sectors().min(self.config.n_sectors);
        Ok(self.predict_batch(&[m], &[n])?.remove(0))
    }

    /// Preprocesses raw records with `prep` and predicts them in chunks.
    pub fn predict_records(
        &self,
        records: &[PhantomRecord],
        prep: &crate::augment::PreprocessConfig,
    ) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(64) {
            let pre: Vec<PhantomRecord> =
                chunk.iter().map(|r| crate::augment::preprocess_record(r, prep)).collect::<Result<_>>()?;
            let mats: Vec<&StrainMatrix> = pre.iter().map(|r| &r.strain).collect();
            let ns: Vec<usize> = chunk.iter().map(PhantomRecord::n_sectors).collect();
            out.extend(self.predict_batch(&mats, &ns)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(lambda_cls: f64, l1: f64) -> LossWeights {
        LossWeights { lambda_cls, l1, regression: RegressionLoss::Euclidean }
    }

    #[test]
    fn default_architecture_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.joint_output_dims(), (3, 6));
        assert_eq!(cfg.head_flat_features(), 16 * 3);
        let net = MtlNet::new(cfg, 1).unwrap();
        let x = Tensor::zeros(&[2, 1, 18, 48]);
        let out = net.infer(&x).unwrap();
        assert_eq!(out.tos.shape(), &[2, 18]);
        assert_eq!(out.logits.unwrap().shape(), &[2, 18, 2]);
    }

    #[test]
    fn pooled_dims_never_collapse() {
        let cfg = ModelConfig { n_sectors: 3, n_frames: 5, ..Default::default() };
        assert_eq!(cfg.joint_output_dims(), (1, 1));
        assert!(MtlNet::new(cfg, 0).is_ok());
    }

    #[test]
    fn exact_prediction_with_confident_logits_has_zero_loss() {
        let t = Tensor::new(vec![1, 3], vec![17.0, 200.0, 34.0]).unwrap();
        let labels = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let lg = Tensor::new(vec![1, 3, 2], vec![15.0, -15.0, -15.0, 15.0, 15.0, -15.0]).unwrap();
        let e = loss(&t, t.data(), Some(&lg), &labels, 123.0, &weights(10.0, 0.0)).unwrap();
        assert!(e.components.classification < 1e-12);
        assert!(e.components.total < 1e-11);
        assert_eq!(e.components.regression, 0.0);
    }

    #[test]
    fn euclidean_regression_term() {
        let mut pred = vec![0.0; 18];
        pred[0] = 3.0;
        pred[1] = 4.0;
        let t = Tensor::new(vec![1, 18], pred).unwrap();
        let e = loss(&t, &[0.0; 18], None, &[], 0.0, &weights(0.0, 0.0)).unwrap();
        assert_eq!(e.components.total, 5.0);
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let t = Tensor::new(vec![1, 2], vec![50.0, 60.0]).unwrap();
        let lg = Tensor::zeros(&[1, 2, 2]);
        let e = loss(&t, t.data(), Some(&lg), &[[1.0, 0.0], [0.0, 1.0]], 0.0, &weights(1.0, 0.0)).unwrap();
        assert!((e.components.total - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn l1_weight_enters_total() {
        let t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let e = loss(&t, &[1.0], None, &[], 40.0, &weights(0.0, 0.5)).unwrap();
        assert_eq!(e.components.total, 20.0);
    }

    #[test]
    fn non_finite_loss_names_component() {
        let t = Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap();
        match loss(&t, &[1.0], None, &[], 0.0, &weights(0.0, 0.0)) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("regression")),
            other => panic!("{other:?}"),
        }
        let t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        match loss(&t, &[1.0], None, &[], f64::INFINITY, &weights(0.0, 0.1)) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("L1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn task_parsing() {
        assert_eq!("mtl".parse::<Task>().unwrap(), Task::MultiTask);
        assert_eq!("reg".parse::<Task>().unwrap(), Task::Regression);
        assert!("both".parse::<Task>().is_err());
    }
}
