use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tos_core::augment::{choose_holdout, patient_ids, preprocess_record, split_by_patients};
use tos_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointConfigs};
use tos_core::dataset::{load_dataset, save_dataset};
use tos_core::eval::{
    load_predictions, render_svg_heatmap, render_svg_surface, save_predictions, scar_stratified_report, surface_map,
    CurveStyle, Method, PredictionRecord, Stratum,
};
use tos_core::gradcam::{central_sector, gradcam as grad_cam};
use tos_core::model::{MtlNet, Task};
use tos_core::phantom::generate_phantom;
use tos_core::snake::snake_tos;
use tos_core::strain::{PhantomRecord, SliceLevel, TosCurve};
use tos_core::train::{prepare_data, train as fit};

use crate::config::{meta, sidecar, stamp_svg, to_value, with_suffix, RunConfig, TrainOverrides};
use crate::{CenterArg, CliError, EvalArgs, GenArgs, GradcamArgs, PredictArgs, SnakeArgs, SurfaceArgs, TaskArg, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

/// Attaches the path to bare I/O errors from the core library.
fn at(path: &Path) -> impl Fn(tos_core::Error) -> CliError + '_ {
    move |e| match e {
        tos_core::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("JSON values serialize");
    text.push('\n');
    write(path, &text)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(tos_core::Error::from)?)
}

fn load_records(path: &Path, split: Option<&Path>) -> Result<(Vec<PhantomRecord>, Option<Vec<String>>)> {
    let recs = load_dataset(path).map_err(at(path))?;
    let Some(split) = split else { return Ok((recs, None)) };
    let test = read_split(split)?;
    let keep: Vec<PhantomRecord> = recs.into_iter().filter(|r| test.contains(&r.patient_id)).collect();
    if keep.is_empty() {
        return Err(CliError::Usage(format!("no records of the test patients in {} are in {}", split.display(), path.display())));
    }
    Ok((keep, Some(test.into_iter().collect())))
}

/// Test patients listed in the config JSON written by `train`.
fn read_split(path: &Path) -> Result<BTreeSet<String>> {
    let v = read_json(path)?;
    let ids = v
        .get("test_patients")
        .and_then(Value::as_array)
        .ok_or_else(|| tos_core::Error::Parse { line: 1, msg: format!("{}: missing test_patients", path.display()) })?;
    ids.iter()
        .map(|id| {
            id.as_str().map(str::to_string).ok_or_else(|| {
                tos_core::Error::Parse { line: 1, msg: format!("{}: test patient ids must be strings", path.display()) }.into()
            })
        })
        .collect()
}

/// Runs `f` on contiguous chunks of `items`, one per worker, keeping order.
fn shard<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&[T]) -> Result<Vec<U>> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() < 2 {
        return f(items);
    }
    let size = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(size).map(|c| s.spawn(|| f(c))).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn save_predictions_with_meta(preds: &[PredictionRecord], out: &Path, meta: &Value) -> Result<()> {
    save_predictions(preds, out).map_err(at(out))?;
    write_json(&sidecar(out), meta)
}

pub fn gen(cfg: &RunConfig, a: &GenArgs) -> Result<()> {
    if a.patients == 0 {
        return Err(CliError::Usage("--patients must be at least 1".into()));
    }
    let mut spec = cfg.phantom.clone();
    if let Some(s) = a.seed.or(cfg.seed) {
        spec.rng_seed = s;
    }
    if let Some(p) = a.scar_prob {
        spec.scar_probability = p;
    }
    let recs = generate_phantom(&spec, a.patients)?;
    save_dataset(&recs, &a.out).map_err(at(&a.out))?;
    write_json(&sidecar(&a.out), &meta("gen", json!({ "patients": a.patients, "phantom": to_value(&spec) })))?;

    let sectors: usize = recs.iter().map(PhantomRecord::n_sectors).sum();
    let lma: usize = recs.iter().map(|r| r.labels.hard().iter().filter(|&&l| l).count()).sum();
    let scar = recs.iter().filter(|r| r.has_scar()).count();
    println!("{} records from {} patients -> {}", recs.len(), a.patients, a.out.display());
    println!("LMA sectors: {lma}/{sectors} ({:.1}%)", 100.0 * lma as f64 / sectors as f64);
    println!("records with scar: {scar}/{}", recs.len());
    Ok(())
}

pub fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let task = match a.task {
        TaskArg::Mtl => Task::MultiTask,
        TaskArg::Reg => Task::Regression,
    };
    let flags = TrainOverrides {
        learning_rate: a.lr,
        batch_size: a.batch,
        lambda_cls: a.lambda_cls,
        l1_weight: a.reg_l1,
        max_epochs: a.epochs,
        patience: a.patience,
        val_fraction: None,
    };
    let tcfg = cfg.train_config(task, &flags, a.seed);
    let model = cfg.model_config(task);
    let mut split = cfg.split.clone();
    if let Some(n) = a.test_patients {
        split.test_patients = n;
    }
    if let Some(s) = a.split_seed {
        split.seed = s;
    }
    cfg.preprocess.validate()?;
    model.validate()?;
    tcfg.validate()?;

    let recs = load_dataset(&a.data).map_err(at(&a.data))?;
    let n_patients = patient_ids(&recs).len();
    if split.test_patients + 2 > n_patients {
        return Err(CliError::Usage(format!(
            "{n_patients} patients cannot cover {} test patients plus training and validation",
            split.test_patients
        )));
    }
    let test = choose_holdout(&recs, split.test_patients, &mut ChaCha8Rng::seed_from_u64(split.seed));
    let (pool, _) = split_by_patients(&recs, &test);
    let data = prepare_data(&pool, &cfg.preprocess, &tcfg)?;
    log::info!(
        "{} training samples, {} validation records, {} test patients held out",
        data.train.len(),
        data.val.len(),
        test.len()
    );
    let (net, history) = fit(&data.train, &data.val, &model, &tcfg)?;

    let configs = CheckpointConfigs { model, train: Some(tcfg), preprocess: Some(cfg.preprocess.clone()) };
    save_checkpoint(&net, &configs, &a.out).map_err(at(&a.out))?;
    let effective = json!({ "checkpoint": to_value(&configs), "split": to_value(&split) });

    let csv_path = with_suffix(&a.out, ".history.csv");
    let mut csv = Vec::new();
    history.write_csv(&mut csv)?;
    write(&csv_path, &String::from_utf8(csv).expect("CSV is UTF-8"))?;
    write_json(&sidecar(&csv_path), &meta("train", effective.clone()))?;

    let mut summary = meta("train", effective);
    summary["test_patients"] = to_value(&test);
    summary["val_patients"] = to_value(&data.val_patients);
    summary["best_epoch"] = json!(history.best_epoch);
    summary["epochs_run"] = json!(history.len());
    summary["stopped_early"] = json!(history.stopped_early);
    write_json(&with_suffix(&a.out, ".config.json"), &summary)?;

    let best = history.best().expect("at least one epoch");
    println!(
        "best epoch {} of {}: val loss {:.4} (regression {:.3}) -> {}",
        history.best_epoch,
        history.len(),
        best.val.total,
        best.val.regression,
        a.out.display()
    );
    Ok(())
}

fn method_of(net: &MtlNet) -> Method {
    match net.config().task {
        Task::MultiTask => Method::Mtl,
        Task::Regression => Method::Regression,
    }
}

pub fn predict(_cfg: &RunConfig, a: &PredictArgs, threads: usize) -> Result<()> {
    let (net, configs) = load_checkpoint(&a.model).map_err(at(&a.model))?;
    let prep = configs.preprocess.clone().unwrap_or_default();
    let (recs, test) = load_records(&a.data, a.split.as_deref())?;
    let method = method_of(&net);
    let preds = shard(&recs, threads, |chunk| {
        let out = net.predict_records(chunk, &prep)?;
        Ok(chunk
            .iter()
            .zip(out)
            .map(|(r, p)| PredictionRecord { id: r.id.clone(), method, tos_ms: p.tos.tos_ms, lma: p.labels })
            .collect())
    })?;
    let m = meta("predict", json!({ "checkpoint": to_value(&configs), "test_patients": test }));
    save_predictions_with_meta(&preds, &a.out, &m)?;
    println!("{} {} predictions -> {}", preds.len(), method.as_str(), a.out.display());
    Ok(())
}

pub fn snake(cfg: &RunConfig, a: &SnakeArgs, threads: usize) -> Result<()> {
    let mut sc = cfg.snake.clone();
    if let Some(v) = a.lambda {
        sc.lambda = v;
    }
    if let Some(v) = a.beta {
        sc.beta = v;
    }
    if let Some(v) = a.gamma {
        sc.gamma = v;
    }
    sc.validate()?;
    let (recs, test) = load_records(&a.data, a.split.as_deref())?;
    let preds = shard(&recs, threads, |chunk| {
        chunk
            .iter()
            .map(|r| {
                let res = snake_tos(&r.strain, &sc)?;
                Ok(PredictionRecord { id: r.id.clone(), method: Method::Snake, tos_ms: res.tos.tos_ms, lma: None })
            })
            .collect()
    })?;
    let m = meta("snake", json!({ "snake": to_value(&sc), "test_patients": test }));
    save_predictions_with_meta(&preds, &a.out, &m)?;
    println!("{} snake predictions -> {}", preds.len(), a.out.display());
    Ok(())
}

pub fn gradcam(_cfg: &RunConfig, a: &GradcamArgs) -> Result<()> {
    let (net, configs) = load_checkpoint(&a.model).map_err(at(&a.model))?;
    let prep = configs.preprocess.clone().unwrap_or_default();
    let recs = load_dataset(&a.data).map_err(at(&a.data))?;
    let r = recs
        .iter()
        .find(|r| r.id == a.record)
        .ok_or_else(|| CliError::Usage(format!("record {:?} not found in {}", a.record, a.data.display())))?;
    let pre = preprocess_record(r, &prep)?;
    let n = pre.strain.n_sectors();
    let pred = net.predict_batch(&[&pre.strain], &[n])?.remove(0);

    let sector = if a.sector == "auto" {
        let labels = match a.center {
            CenterArg::Predicted => pred.labels.clone().ok_or_else(|| {
                CliError::Usage(
                    "this model has no classification head; use --center ground-truth or an explicit --sector".into(),
                )
            })?,
            CenterArg::GroundTruth => pre.labels.clone(),
        };
        central_sector(&labels)
            .ok_or_else(|| CliError::Usage(format!("{} has no LMA sectors to centre on; pass --sector N", r.id)))?
    } else {
        let s: usize = a.sector.parse().map_err(|_| CliError::Usage(format!("--sector must be auto or an index, got {:?}", a.sector)))?;
        if s >= r.n_sectors() {
            return Err(CliError::Usage(format!("--sector {s} out of range for {} sectors", r.n_sectors())));
        }
        s
    };
    let map = grad_cam(&net, &pre.strain, sector, &a.layer)?;

    let center = match a.center {
        CenterArg::Predicted => "predicted",
        CenterArg::GroundTruth => "ground-truth",
    };
    let m = meta(
        "gradcam",
        json!({
            "checkpoint": to_value(&configs),
            "record": r.id,
            "sector": a.sector,
            "center": center,
            "layer": a.layer,
        }),
    );
    let mut doc = m.clone();
    doc["target_sector"] = json!(sector);
    doc["map"] = to_value(&map);
    write_json(&a.out, &doc)?;

    let curves = vec![
        (pre.tos.clone(), CurveStyle::new("ground truth", "#000000", false)),
        (pred.tos.clone(), CurveStyle::new(method_of(&net).as_str(), "#1b9e77", true)),
    ];
    let svg = render_svg_heatmap(&pre.strain, &curves, Some(&map))?;
    let svg_path = a.svg.clone().unwrap_or_else(|| with_suffix(&a.out, ".svg"));
    write(&svg_path, &stamp_svg(&svg, &m))?;
    println!("Grad-CAM of {} at sector {sector} ({}) -> {}", r.id, a.layer, a.out.display());
    Ok(())
}

fn style(method: Method) -> CurveStyle {
    match method {
        Method::Mtl => CurveStyle::new("MTL", "#1b9e77", false),
        Method::Regression => CurveStyle::new("regression", "#d95f02", true),
        Method::Snake => CurveStyle::new("snake", "#7570b3", true),
    }
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn eval(_cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let (recs, test) = load_records(&a.data, a.split.as_deref())?;
    let ids: BTreeSet<&str> = recs.iter().map(|r| r.id.as_str()).collect();
    let mut preds = Vec::new();
    for p in &a.pred {
        preds.extend(load_predictions(p).map_err(at(p))?.into_iter().filter(|r| ids.contains(r.id.as_str())));
    }
    let report = scar_stratified_report(&preds, &recs)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;

    let methods: Vec<&str> = report.methods.iter().map(|m| m.method.as_str()).collect();
    let m = meta("eval", json!({ "methods": methods, "records": recs.len(), "test_patients": test }));
    let mut doc = m.clone();
    doc["report"] = to_value(&report);
    write_json(&a.out_dir.join("report.json"), &doc)?;
    let csv_path = a.out_dir.join("report.csv");
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write(&csv_path, &String::from_utf8(csv).expect("CSV is UTF-8"))?;
    write_json(&sidecar(&csv_path), &m)?;

    let mut by_id: BTreeMap<&str, BTreeMap<Method, &PredictionRecord>> = BTreeMap::new();
    for p in &preds {
        by_id.entry(p.id.as_str()).or_default().entry(p.method).or_insert(p);
    }
    let fig_dir = a.out_dir.join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(|e| CliError::io(&fig_dir, e))?;
    for r in &recs {
        let mut curves = vec![(r.tos.clone(), CurveStyle::new("ground truth", "#000000", false))];
        for method in [Method::Mtl, Method::Regression, Method::Snake] {
            if let Some(p) = by_id.get(r.id.as_str()).and_then(|m| m.get(&method)) {
                curves.push((TosCurve::new(p.tos_ms.clone()), style(method)));
            }
        }
        let svg = render_svg_heatmap(&r.strain, &curves, None)?;
        write(&fig_dir.join(format!("{}.svg", file_stem(&r.id))), &stamp_svg(&svg, &m))?;
    }

    for mr in &report.methods {
        let fmt = |s: Stratum| mr.stratum(s).per_sector_mae_ms.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
        println!(
            "{:<10} MAE all {} ms, scar {} ms, LMA {} ms, normal {} ms",
            mr.method.as_str(),
            fmt(Stratum::All),
            fmt(Stratum::Scar),
            fmt(Stratum::Lma),
            fmt(Stratum::Normal)
        );
    }
    Ok(())
}

/// A slice file holds a JSON array of TOS values in ms, or an object with a
/// `tos_ms` array.
fn read_curve(path: &Path) -> Result<TosCurve> {
    let v = read_json(path)?;
    let arr = v.get("tos_ms").unwrap_or(&v);
    Ok(serde_json::from_value::<TosCurve>(arr.clone()).map_err(tos_core::Error::from)?)
}

pub fn surface(cfg: &RunConfig, a: &SurfaceArgs) -> Result<()> {
    let zs = &cfg.surface.slice_z;
    let (curves, source) = if !a.slices.is_empty() {
        if a.slices.len() < 2 {
            return Err(CliError::Usage("a surface needs at least 2 slices".into()));
        }
        if a.slices.len() != zs.len() {
            return Err(CliError::Usage(format!(
                "{} slice files given but {} slice positions are configured",
                a.slices.len(),
                zs.len()
            )));
        }
        let curves = a.slices.iter().map(|p| read_curve(p)).collect::<Result<Vec<_>>>()?;
        (curves, json!({ "slices": a.slices.len() }))
    } else if let (Some(pred), Some(data), Some(patient)) = (&a.pred, &a.data, &a.patient) {
        let levels: Vec<SliceLevel> = SliceLevel::ALL.iter().rev().copied().collect();
        if levels.len() != zs.len() {
            return Err(CliError::Usage(format!(
                "{} slice levels per patient but {} slice positions are configured",
                levels.len(),
                zs.len()
            )));
        }
        let recs = load_dataset(data).map_err(at(data))?;
        let method = a.method.as_deref().map(str::parse::<Method>).transpose()?;
        let preds: Vec<PredictionRecord> =
            load_predictions(pred).map_err(at(pred))?.into_iter().filter(|p| method.is_none_or(|m| p.method == m)).collect();
        let mut curves = Vec::new();
        for level in &levels {
            let r = recs
                .iter()
                .find(|r| &r.patient_id == patient && r.slice_level == *level)
                .ok_or_else(|| CliError::Usage(format!("patient {patient:?} has no {} slice", level.as_str())))?;
            let hits: Vec<&PredictionRecord> = preds.iter().filter(|p| p.id == r.id).collect();
            match hits.as_slice() {
                [p] => curves.push(TosCurve::new(p.tos_ms.clone())),
                [] => return Err(CliError::Usage(format!("no prediction for {}", r.id))),
                _ => return Err(CliError::Usage(format!("several predictions for {}; pass --method", r.id))),
            }
        }
        (curves, json!({ "patient": patient, "method": a.method }))
    } else {
        return Err(CliError::Usage("give --slices, or --pred with --data and --patient".into()));
    };

    let slices: Vec<(f64, TosCurve)> = zs.iter().copied().zip(curves).collect();
    let grid = surface_map(&slices, &cfg.surface.grid())?;
    let m = meta("surface", json!({ "surface": to_value(&cfg.surface), "source": source }));
    let mut doc = m.clone();
    doc["grid"] = to_value(&grid);
    write_json(&a.out, &doc)?;
    let svg_path = a.svg.clone().unwrap_or_else(|| with_suffix(&a.out, ".svg"));
    write(&svg_path, &stamp_svg(&render_svg_surface(&grid)?, &m))?;
    println!("{}x{} surface -> {}", grid.angles.len(), grid.zs.len(), a.out.display());
    Ok(())
}
