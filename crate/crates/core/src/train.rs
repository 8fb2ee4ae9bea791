//! Mini-batch Adam training with patient-level validation and early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_training_set, choose_holdout, patient_ids, preprocess_record, split_by_patients, PreprocessConfig};
use crate::error::{config_err, Error, Result};
use crate::model::{add_l1_grad, batch_tensor, l1_norm, loss, LossComponents, LossWeights, ModelConfig, MtlNet, RegressionLoss, Task};
use crate::strain::PhantomRecord;
use crate::tensor::{Adam, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the classification term; 0 disables that task's gradient.
    pub lambda_cls: f64,
    /// Weight of the L1 regularizer.
    pub l1_weight: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of patients held out for early stopping.
    pub val_fraction: f64,
    pub regression_loss: RegressionLoss,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mtl()
    }
}

impl TrainConfig {
    pub fn mtl() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            lambda_cls: 10.0,
            l1_weight: 0.1,
            max_epochs: 1000,
            patience: 50,
            val_fraction: 0.1,
            regression_loss: RegressionLoss::Euclidean,
            rng_seed: 0,
        }
    }

    pub fn regression() -> Self {
        Self { learning_rate: 1e-2, lambda_cls: 0.0, l1_weight: 0.5, ..Self::mtl() }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::MultiTask => Self::mtl(),
            Task::Regression => Self::regression(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning rate must be finite and >= 0"));
        }
        if !(self.lambda_cls >= 0.0) || !(self.l1_weight >= 0.0) {
            return Err(config_err!("loss weights must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be >= 2 for batch statistics"));
        }
        if self.patience == 0 {
            return Err(config_err!("patience must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_err!("validation fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_cls: self.lambda_cls, l1: self.l1_weight, regression: self.regression_loss }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossComponents,
    pub val: LossComponents,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "epoch,train_total,train_reg,train_cls,train_l1,val_total,val_reg,val_cls,val_l1"
        )?;
        for e in &self.epochs {
            let (t, v) = (&e.train, &e.val);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch, t.total, t.regression, t.classification, t.l1, v.total, v.regression, v.classification, v.l1
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn targets(records: &[&PhantomRecord], n_sectors: usize) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
    let mut tos = Vec::with_capacity(records.len() * n_sectors);
    let mut labels = Vec::with_capacity(records.len() * n_sectors);
    for r in records {
        if r.tos.len() != n_sectors || r.labels.len() != n_sectors {
            return Err(config_err!("record {} has {} sectors, network expects {n_sectors}", r.id, r.tos.len()));
        }
        tos.extend_from_slice(&r.tos.tos_ms);
        labels.extend_from_slice(&r.labels.probs);
    }
    Ok((tos, labels))
}

/// Loss of `net` on `records` in eval mode, sample-weighted over chunks.
pub fn evaluate_loss(net: &MtlNet, records: &[PhantomRecord], weights: &LossWeights) -> Result<LossComponents> {
    if records.is_empty() {
        return Err(config_err!("cannot evaluate on an empty set"));
    }
    let cfg = net.config();
    let l1 = l1_norm(net.params());
    let mut acc = LossComponents::default();
    for chunk in records.chunks(128) {
        let refs: Vec<&PhantomRecord> = chunk.iter().collect();
        let x = batch_tensor(refs.iter().map(|r| &r.strain), cfg.n_sectors, cfg.n_frames)?;
        let (tos, labels) = targets(&refs, cfg.n_sectors)?;
        let out = net.infer(&x)?;
        let e = loss(&out.tos, &tos, out.logits.as_ref(), &labels, l1, weights)?;
        let w = chunk.len() as f64 / records.len() as f64;
        acc.regression += w * e.components.regression;
        acc.classification += w * e.components.classification;
    }
    acc.l1 = l1;
    let lambda = if net.cls_head.is_some() { weights.lambda_cls } else { 0.0 };
    acc.total = acc.regression + lambda * acc.classification + weights.l1 * l1;
    Ok(acc)
}

/// Shuffled mini-batches; a trailing batch of one sample joins the previous
/// batch so that batch statistics stay defined.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Trains from scratch and returns the parameters of the best-validation
/// epoch.
pub fn train(
    train_set: &[PhantomRecord],
    val_set: &[PhantomRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(MtlNet, TrainHistory)> {
    train_observed(train_set, val_set, model, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after every epoch's parameter updates.
pub fn train_observed<F>(
    train_set: &[PhantomRecord],
    val_set: &[PhantomRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<(MtlNet, TrainHistory)>
where
    F: FnMut(&EpochRecord, &MtlNet),
{
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(config_err!("validation set is empty"));
    }
    if train_set.len() < 2 {
        return Err(config_err!("training needs at least two samples, got {}", train_set.len()));
    }
    let mut net = MtlNet::new(model.clone(), cfg.rng_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(1);
    let adam = Adam::new(cfg.learning_rate);
    let weights = cfg.weights();
    let use_cls = net.cls_head.is_some() && cfg.lambda_cls != 0.0;

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, MtlNet)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut acc = LossComponents::default();
        for batch in batches(train_set.len(), cfg.batch_size, &mut rng) {
            let refs: Vec<&PhantomRecord> = batch.iter().map(|&i| &train_set[i]).collect();
            let x = batch_tensor(refs.iter().map(|r| &r.strain), model.n_sectors, model.n_frames)?;
            let (tos, labels) = targets(&refs, model.n_sectors)?;
            let l1 = l1_norm(net.params());
            let out = net.forward_select(&x, Mode::Train, use_cls)?;
            let e = loss(&out.tos, &tos, out.logits.as_ref(), &labels, l1, &weights).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            net.backward(&e.d_tos, e.d_logits.as_ref())?;
            add_l1_grad(net.params_mut(), cfg.l1_weight);
            let mut params = net.params_mut();
            // parameters off the active paths still take their Adam step
            for p in params.iter_mut() {
                p.mark_grad();
            }
            adam.step(params)?;
            let w = refs.len() as f64 / train_set.len() as f64;
            acc.total += w * e.components.total;
            acc.regression += w * e.components.regression;
            acc.classification += w * e.components.classification;
            acc.l1 += w * e.components.l1;
        }
        let val = evaluate_loss(&net, val_set, &weights)?;
        let record = EpochRecord { epoch, train: acc, val };
        history.epochs.push(record);
        observe(&record, &net);
        log::debug!(
            "epoch {epoch}: train {:.4} (reg {:.3}, ce {:.4}), val {:.4}",
            acc.total,
            acc.regression,
            acc.classification,
            val.total
        );

        if best.as_ref().is_none_or(|(b, _)| val.total < *b) {
            best = Some((val.total, net.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let (_, net) = best.ok_or_else(|| config_err!("max_epochs must be >= 1"))?;
    Ok((net, history))
}

/// Training and validation sets ready for [`train`].
#[derive(Clone, Debug)]
pub struct PreparedData {
    /// Augmented training samples.
    pub train: Vec<PhantomRecord>,
    /// Preprocessed, unaugmented validation samples.
    pub val: Vec<PhantomRecord>,
    pub val_patients: Vec<String>,
}

/// Splits off `val_fraction` of the patients (at least one), augments the
/// rest and preprocesses the validation slices.
pub fn prepare_data(records: &[PhantomRecord], prep: &PreprocessConfig, cfg: &TrainConfig) -> Result<PreparedData> {
    let n_patients = patient_ids(records).len();
    if n_patients < 2 {
        return Err(config_err!("need at least two patients to hold out a validation set, got {n_patients}"));
    }
    let n_val = ((cfg.val_fraction * n_patients as f64).round() as usize).clamp(1, n_patients - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(2);
    let holdout = choose_holdout(records, n_val, &mut rng);
    let (train_raw, val_raw) = split_by_patients(records, &holdout);
    let train = build_training_set(&train_raw, prep, &mut rng)?;
    let val = val_raw.iter().map(|r| preprocess_record(r, prep)).collect::<Result<_>>()?;
    Ok(PreparedData { train, val, val_patients: holdout.into_iter().collect() })
}

/// Network input size implied by a preprocessing configuration.
pub fn model_for(task: Task, prep: &PreprocessConfig) -> ModelConfig {
    ModelConfig { n_sectors: prep.target_sectors, n_frames: prep.target_frames, ..ModelConfig::for_task(task) }
}
