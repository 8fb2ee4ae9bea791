use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tos_core::augment::PreprocessConfig;
use tos_core::checkpoint::{load_checkpoint, load_into, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointConfigs};
use tos_core::model::{
    batch_tensor, class_probabilities, l1_norm, BatchObjective, LossWeights, ModelConfig, MtlNet, RegressionLoss, Task,
};
use tos_core::phantom::{generate_phantom, PhantomSpec};
use tos_core::strain::PhantomRecord;
use tos_core::tensor::{gradient_check, Mode, ParamRole, ParamSelection, Tensor};
use tos_core::train::{model_for, prepare_data, train, train_observed, TrainConfig};
use tos_core::Error;

fn random_objective(cfg: ModelConfig, lambda_cls: f64, seed: u64) -> BatchObjective {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, f) = (cfg.n_sectors, cfg.n_frames);
    let x = Tensor::new(vec![4, 1, s, f], (0..4 * s * f).map(|_| rng.random_range(-0.2..0.2)).collect()).unwrap();
    let tos = (0..4 * s).map(|_| rng.random_range(17.0..300.0)).collect();
    let labels = (0..4 * s).map(|_| if rng.random_bool(0.3) { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
    let mut net = MtlNet::new(cfg, seed).unwrap();
    // keep L1-penalized weights clear of the kink at zero
    for p in net.params_mut() {
        if p.role == ParamRole::Weight {
            for w in p.value.data_mut() {
                if w.abs() < 1e-3 {
                    *w = 1e-3f64.copysign(*w);
                }
            }
        }
    }
    BatchObjective {
        net,
        x,
        tos,
        labels,
        weights: LossWeights { lambda_cls, l1: 0.1, regression: RegressionLoss::Euclidean },
    }
}

#[test]
fn full_network_gradient_all_parameters_small_input() {
    for lambda in [0.0, 10.0] {
        let cfg = ModelConfig { n_sectors: 6, n_frames: 8, ..Default::default() };
        let mut obj = random_objective(cfg, lambda, 3);
        let rep = gradient_check(&mut obj, 1e-6, 1e-2, ParamSelection::All).unwrap();
        assert!(rep.passes(1e-4), "lambda {lambda}: {rep:?}");
    }
}

#[test]
fn full_network_gradient_sampled_default_input() {
    for lambda in [0.0, 10.0] {
        let mut obj = random_objective(ModelConfig::default(), lambda, 11);
        let rep = gradient_check(&mut obj, 1e-6, 1e-2, ParamSelection::Sample { per_tensor: 6, seed: 5 }).unwrap();
        assert!(rep.passes(1e-4), "lambda {lambda}: {rep:?}");
    }
}

fn phantom(patients: usize, seed: u64, noise: f64) -> Vec<PhantomRecord> {
    generate_phantom(&PhantomSpec { rng_seed: seed, noise_std: noise, ..Default::default() }, patients).unwrap()
}

fn no_augment() -> PreprocessConfig {
    PreprocessConfig { shift_copies: 0, mixup_copies: 0, ..Default::default() }
}

#[test]
fn output_shapes_and_positivity() {
    let net = MtlNet::new(ModelConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(vec![5, 1, 18, 48], (0..5 * 18 * 48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let out = net.infer(&x).unwrap();
    assert_eq!(out.tos.shape(), &[5, 18]);
    assert_eq!(out.logits.unwrap().shape(), &[5, 18, 2]);
    assert!(out.tos.data().iter().all(|&t| t > 0.0));

    let reg = MtlNet::new(ModelConfig::for_task(Task::Regression), 4).unwrap();
    assert!(reg.infer(&x).unwrap().logits.is_none());

    let bad = Tensor::zeros(&[1, 1, 17, 48]);
    assert!(matches!(net.infer(&bad), Err(Error::Config(_))));
}

#[test]
fn identical_inputs_give_identical_rows() {
    let net = MtlNet::new(ModelConfig::default(), 2).unwrap();
    let recs = phantom(1, 3, 0.01);
    let prep: Vec<_> = recs.iter().map(|r| tos_core::augment::preprocess_record(r, &no_augment()).unwrap()).collect();
    let m = &prep[0].strain;
    let x = batch_tensor([m, m, m], 18, 48).unwrap();
    let out = net.infer(&x).unwrap();
    let rows: Vec<&[f64]> = out.tos.data().chunks(18).collect();
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[1], rows[2]);
    let logits = out.logits.unwrap();
    let lrows: Vec<&[f64]> = logits.data().chunks(36).collect();
    assert_eq!(lrows[0], lrows[2]);
}

#[test]
fn regularizer_and_ce_signs() {
    let mut net = MtlNet::new(ModelConfig::default(), 1).unwrap();
    assert!(l1_norm(net.params()) > 0.0);
    for p in net.params_mut() {
        if p.role == ParamRole::Weight {
            p.value.data_mut().fill(0.0);
        }
    }
    assert_eq!(l1_norm(net.params()), 0.0);

    let mut obj = random_objective(ModelConfig { n_sectors: 6, n_frames: 8, ..Default::default() }, 10.0, 8);
    let out = obj.net.forward(&obj.x, Mode::Train).unwrap();
    let e = tos_core::model::loss(&out.tos, &obj.tos, out.logits.as_ref(), &obj.labels, 0.0, &obj.weights).unwrap();
    assert!(e.components.classification >= 0.0);
    assert!(e.components.regression >= 0.0);
}

fn train_small(task: Task, seed: u64, epochs: usize) -> (MtlNet, tos_core::train::TrainHistory) {
    let recs = phantom(12, 21, 0.01);
    let prep = PreprocessConfig { shift_copies: 1, mixup_copies: 1, ..Default::default() };
    let cfg = TrainConfig { max_epochs: epochs, batch_size: 16, rng_seed: seed, ..TrainConfig::for_task(task) };
    let data = prepare_data(&recs, &prep, &cfg).unwrap();
    train(&data.train, &data.val, &model_for(task, &prep), &cfg).unwrap()
}

#[test]
fn training_is_deterministic() {
    let (a, ha) = train_small(Task::MultiTask, 5, 4);
    let (b, hb) = train_small(Task::MultiTask, 5, 4);
    assert_eq!(ha, hb);
    let pa: Vec<_> = a.params().iter().map(|p| p.value.clone()).collect();
    let pb: Vec<_> = b.params().iter().map(|p| p.value.clone()).collect();
    assert_eq!(pa, pb);
    let (_, hc) = train_small(Task::MultiTask, 6, 4);
    assert_ne!(ha, hc);
}

#[test]
fn history_tracks_epochs_and_best() {
    let (_, h) = train_small(Task::Regression, 1, 6);
    assert_eq!(h.len(), 6);
    assert!(h.best_epoch >= 1 && h.best_epoch <= h.len());
    let best = h.best().unwrap().val.total;
    assert!(h.epochs.iter().all(|e| e.val.total >= best));
    let mut csv = Vec::new();
    h.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,train_total,train_reg,train_cls,train_l1,val_total"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn early_stopping_returns_best_epoch() {
    let recs = phantom(12, 21, 0.01);
    let prep = no_augment();
    // a huge step rate makes validation loss blow up after a few epochs
    let cfg = TrainConfig { max_epochs: 40, patience: 3, learning_rate: 0.5, batch_size: 8, ..TrainConfig::mtl() };
    let data = prepare_data(&recs, &prep, &cfg).unwrap();
    let mut snapshots = Vec::new();
    let (net, h) = train_observed(&data.train, &data.val, &model_for(Task::MultiTask, &prep), &cfg, |_, n| {
        snapshots.push(n.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>())
    })
    .unwrap();
    assert!(h.stopped_early);
    assert_eq!(h.len(), h.best_epoch + cfg.patience);
    let got: Vec<_> = net.params().iter().map(|p| p.value.clone()).collect();
    assert_eq!(got, snapshots[h.best_epoch - 1]);
}

#[test]
fn zero_lambda_matches_regression_only_trajectory() {
    let recs = phantom(10, 4, 0.01);
    let prep = PreprocessConfig { shift_copies: 1, mixup_copies: 0, ..Default::default() };
    let base = TrainConfig { max_epochs: 5, patience: 100, batch_size: 16, rng_seed: 13, ..TrainConfig::regression() };
    let data = prepare_data(&recs, &prep, &base).unwrap();

    let shared = |n: &MtlNet| -> Vec<(String, Tensor)> {
        n.joint.params().into_iter().chain(n.reg_head.params()).map(|p| (p.name.clone(), p.value.clone())).collect()
    };
    let mut reg_traj = Vec::new();
    train_observed(&data.train, &data.val, &model_for(Task::Regression, &prep), &base, |_, n| reg_traj.push(shared(n)))
        .unwrap();
    let mut mtl_traj = Vec::new();
    let mtl_cfg = TrainConfig { lambda_cls: 0.0, ..base };
    train_observed(&data.train, &data.val, &model_for(Task::MultiTask, &prep), &mtl_cfg, |_, n| mtl_traj.push(shared(n)))
        .unwrap();
    assert_eq!(reg_traj.len(), 5);
    assert_eq!(reg_traj, mtl_traj);
}

#[test]
fn noiseless_set_is_learnable() {
    let recs = phantom(50, 8, 0.0);
    assert_eq!(recs.len(), 200);
    let prep = no_augment();
    let cfg = TrainConfig { max_epochs: 150, ..TrainConfig::mtl() };
    let data = prepare_data(&recs, &prep, &cfg).unwrap();
    let (_, h) = train(&data.train, &data.val, &model_for(Task::MultiTask, &prep), &cfg).unwrap();
    let first = h.epochs[0].train.total;
    let at_best = h.best().unwrap().train.total;
    assert!(at_best < 0.2 * first, "epoch 1 {first}, best epoch {} {at_best}", h.best_epoch);
}

#[test]
fn predictions_are_repeatable_finite_and_positive() {
    let (net, _) = train_small(Task::MultiTask, 2, 3);
    let recs = phantom(32, 77, 0.01);
    assert_eq!(recs.len(), 128);
    let a = net.predict_records(&recs, &no_augment()).unwrap();
    let b = net.predict_records(&recs, &no_augment()).unwrap();
    assert_eq!(a, b);
    for (p, r) in a.iter().zip(&recs) {
        assert_eq!(p.tos.len(), r.n_sectors());
        assert!(p.tos.tos_ms.iter().all(|t| t.is_finite() && *t > 0.0));
        assert_eq!(p.labels.as_ref().unwrap().len(), r.n_sectors());
    }
}

#[test]
fn labels_ignore_per_sector_logit_shift() {
    let net = MtlNet::new(ModelConfig::default(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![3, 1, 18, 48], (0..3 * 18 * 48).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap();
    let logits = net.infer(&x).unwrap().logits.unwrap();
    let mut shifted = logits.clone();
    for pair in shifted.data_mut().chunks_mut(2) {
        let c = rng.random_range(-50.0..50.0);
        pair[0] += c;
        pair[1] += c;
    }
    let hard = |t: &Tensor| class_probabilities(t).iter().map(|p| p[1] > p[0]).collect::<Vec<_>>();
    assert_eq!(hard(&logits), hard(&shifted));
}

fn configs_for(net: &MtlNet) -> CheckpointConfigs {
    CheckpointConfigs { model: net.config().clone(), train: Some(TrainConfig::mtl()), preprocess: Some(PreprocessConfig::default()) }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (net, _) = train_small(Task::MultiTask, 3, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&net, &configs_for(&net), &path).unwrap();
    let (back, cfgs) = load_checkpoint(&path).unwrap();
    assert_eq!(cfgs, configs_for(&net));
    for (a, b) in net.params().iter().zip(back.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    assert_eq!(net.buffers(), back.buffers());

    let recs = phantom(2, 1, 0.01);
    assert_eq!(
        net.predict_records(&recs, &PreprocessConfig::default()).unwrap(),
        back.predict_records(&recs, &PreprocessConfig::default()).unwrap()
    );

    let mut other = MtlNet::new(net.config().clone(), 99).unwrap();
    load_into(&mut other, &path).unwrap();
    assert_eq!(other.buffers(), net.buffers());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let net = MtlNet::new(ModelConfig::default(), 1).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&net, &configs_for(&net), &mut bytes).unwrap();
    for cut in [4, 12, 40, bytes.len() - 8] {
        let err = read_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}

#[test]
fn bad_magic_is_rejected() {
    let net = MtlNet::new(ModelConfig::default(), 1).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&net, &configs_for(&net), &mut bytes).unwrap();
    bytes[0] = b'X';
    let err = read_checkpoint(&bytes[..]).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
}

#[test]
fn mismatched_config_names_the_tensor() {
    let net = MtlNet::new(ModelConfig::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&net, &configs_for(&net), &path).unwrap();
    let mut other = MtlNet::new(ModelConfig { hidden: vec![128, 64], ..Default::default() }, 1).unwrap();
    let err = load_into(&mut other, &path).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("shape mismatch") && msg.contains("reg.fc1.weight"), "{msg}");

    let mut reg = MtlNet::new(ModelConfig::for_task(Task::Regression), 1).unwrap();
    assert!(load_into(&mut reg, &path).is_err());
}

#[test]
fn checkpoint_refuses_foreign_config() {
    let net = MtlNet::new(ModelConfig::default(), 1).unwrap();
    let cfgs = CheckpointConfigs { model: ModelConfig { hidden: vec![32], ..Default::default() }, train: None, preprocess: None };
    assert!(write_checkpoint(&net, &cfgs, Vec::new()).is_err());
}
