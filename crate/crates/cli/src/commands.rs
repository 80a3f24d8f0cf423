use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use numkit::{checkpoint, Graph};
use serde_json::json;
use ttm_core::evalkit::{self, AblationSpec, Metrics};
use ttm_core::headpose::{self, RotationMatrix, Rotation6D};
use ttm_core::rng::{stream, tag};
use ttm_core::scenario::{write_dataset, Split};
use ttm_core::{train, Prepared, RunConfig, TtmModel, Variant};

use crate::run::{self, invalid, RunDir};

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "none".into(), |v| v.to_string())
}

fn print_metrics(prefix: &str, m: &Metrics) {
    println!("{prefix} map={} acc={} frames={}", opt(m.map), m.acc, m.frames);
}

pub fn generate(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = RunDir::create(cfg, out)?;
    let mut files = serde_json::Map::new();
    for (split, ds) in [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .zip(ttm_core::scenario::generate_splits(&cfg.seeded_scenario())?)
    {
        let path = dir.file(&format!("{}.ttmd", split.name()));
        write_dataset(&ds, &path)?;
        let sha = run::sha256_hex(&std::fs::read(&path)?);
        println!(
            "split={} sequences={} positive_rate={} sha256={sha}",
            split.name(),
            ds.len(),
            ds.positive_rate()
        );
        files.insert(split.name().into(), json!({ "sequences": ds.len(), "sha256": sha }));
    }
    dir.summary("generate", cfg, json!({ "datasets": files }))
}

pub fn train(cfg: &RunConfig, variant: Variant, out: Option<&Path>) -> Result<()> {
    let dir = RunDir::create(cfg, out)?;
    let data = evalkit::seed_data(&cfg.scenario, cfg.seed)?;
    let mut model = TtmModel::new(cfg.model.clone(), variant, &data.train, cfg.seed)?;
    let train_set = model.prepare(&data.train)?;
    let val_set = model.prepare(&data.val)?;
    println!("event=start variant={} params={}", variant.name(), model.params.num_scalars());
    let report = train::fit(&mut model, &train_set, &val_set, &cfg.train, cfg.seed, cfg.eval.grouping, |e| {
        let (vm, va) = e.val.as_ref().map_or((None, None), |m| (m.map, Some(m.acc)));
        println!(
            "event=epoch epoch={} loss={} focal={} mse={} train_acc={} val_map={} val_acc={}",
            e.epoch,
            e.loss,
            e.focal,
            e.mse,
            e.train_acc,
            opt(vm),
            opt(va)
        );
    })?;
    checkpoint::save(&model.params, dir.file(run::CHECKPOINT))?;
    let test = train::evaluate(&model, &model.prepare(&data.test)?, cfg.eval.grouping)?;
    if let Some(m) = &report.best_val {
        print_metrics(&format!("event=best epoch={} split=val", report.best_epoch.unwrap_or(0)), m);
    }
    print_metrics("event=final split=test", &test);
    dir.summary(
        "train",
        cfg,
        json!({
            "variant": variant,
            "variant_name": variant.name(),
            "checkpoint": run::CHECKPOINT,
            "best_epoch": report.best_epoch,
            "val": report.best_val,
            "test": test,
            "epochs": report.epochs,
            "stopped_early": report.stopped_early,
        }),
    )
}

/// Model of a saved run with its checkpoint loaded. Normalization statistics
/// are recomputed from the regenerated training split.
fn restore(saved: &run::SavedRun) -> Result<(TtmModel, evalkit::SeedData)> {
    let cfg = &saved.cfg;
    let data = evalkit::seed_data(&cfg.scenario, cfg.seed)?;
    let mut model = TtmModel::new(cfg.model.clone(), saved.variant, &data.train, cfg.seed)?;
    let loaded = checkpoint::load(&saved.checkpoint).with_context(|| format!("loading {}", saved.checkpoint.display()))?;
    let fresh: Vec<(&str, &[usize])> = model.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
    let stored: Vec<(&str, &[usize])> = loaded.iter().map(|(n, p)| (n, p.value.shape())).collect();
    if fresh != stored {
        bail!("checkpoint parameters do not match the model described by the run config");
    }
    model.params.copy_values_from(&loaded);
    Ok((model, data))
}

fn split_data<'a>(data: &'a evalkit::SeedData, split: &str) -> Result<&'a ttm_core::scenario::ScenarioDataset> {
    match split {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        _ => Err(invalid(format!("unknown split `{split}`, expected train, val or test"))),
    }
}

pub fn eval(run_dir: &Path, out: Option<&Path>) -> Result<()> {
    let saved = run::load_run(run_dir)?;
    let (model, data) = restore(&saved)?;
    let cfg = &saved.cfg;
    let dir = RunDir::create(cfg, out)?;
    let mut results = serde_json::Map::new();
    for split in ["val", "test"] {
        let prepared = model.prepare(split_data(&data, split)?)?;
        let scores = train::predict_all(&model, &prepared)?;
        let labels: Vec<&[f64]> = prepared.iter().map(|p| p.labels.as_slice()).collect();
        let m = evalkit::metrics(&scores, &labels, cfg.eval.grouping, 0.5)?;
        print_metrics(&format!("split={split}"), &m);
        let ids: Vec<u32> = prepared.iter().map(|p| p.id).collect();
        dir.write(&format!("predictions_{split}.csv"), evalkit::predictions_csv(&ids, &scores, &labels, 0.5))?;
        results.insert(split.into(), serde_json::to_value(&m)?);
    }
    dir.summary(
        "eval",
        cfg,
        json!({
            "source_run": run_dir.display().to_string(),
            "variant_name": saved.variant.name(),
            "metrics": results,
        }),
    )
}

pub fn ablate(cfg: &RunConfig, out: Option<&Path>, thresholds: bool) -> Result<usize> {
    let dir = RunDir::create(cfg, out)?;
    let exp = cfg.experiment();
    let seeds = cfg.eval.seeds.clone();
    let data = evalkit::seed_cache(&cfg.scenario, &seeds)?;
    let rows = evalkit::run_ablation(&exp, &AblationSpec::full_grid(seeds.clone()), &data)?;
    let mut failures = 0;
    for r in &rows {
        failures += r.results.failures();
        let (m, lo, hi) = r.results.map().map_or((None, None, None), |(m, lo, hi)| (Some(m), Some(lo), Some(hi)));
        println!(
            "row={} map_mean={} map_min={} map_max={} acc_mean={} failures={}",
            r.variant.name(),
            opt(m),
            opt(lo),
            opt(hi),
            opt(r.results.acc().map(|a| a.0)),
            r.results.failures()
        );
    }
    dir.write("ablation.csv", evalkit::ablation_csv(&rows))?;
    let mut extra = json!({ "ablation": rows });
    if thresholds {
        let t = evalkit::run_threshold_study(&exp, &seeds, &data, cfg.eval.threshold_k)?;
        for r in &t {
            failures += r.results.failures();
            println!(
                "threshold={} map_mean={} failures={}",
                r.label,
                opt(r.results.map().map(|m| m.0)),
                r.results.failures()
            );
        }
        dir.write("thresholds.csv", evalkit::threshold_csv(&t))?;
        extra["thresholds"] = serde_json::to_value(&t)?;
    }
    extra["failures"] = failures.into();
    dir.summary("ablate", cfg, extra)?;
    Ok(failures)
}

pub fn snr_sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<usize> {
    let dir = RunDir::create(cfg, out)?;
    let seeds = cfg.eval.seeds.clone();
    let data = evalkit::seed_cache(&cfg.scenario, &seeds)?;
    let points = evalkit::run_snr_sweep(&cfg.experiment(), &seeds, &data, &cfg.eval.grid(), cfg.eval.sweep_noise)?;
    let mut failures = 0;
    for p in &points {
        failures += p.results.failures();
        println!(
            "snr_db={} variant={} map_mean={} acc_mean={} failures={}",
            opt(p.snr_db).replace("none", "clean"),
            p.variant,
            opt(p.results.map().map(|m| m.0)),
            opt(p.results.acc().map(|a| a.0)),
            p.results.failures()
        );
    }
    dir.write("snr.csv", evalkit::snr_csv(&points))?;
    dir.summary("snr-sweep", cfg, json!({ "points": points, "failures": failures }))?;
    Ok(failures)
}

/// Returns whether the worst relative error is within `tol`.
pub fn gradcheck(cfg: &RunConfig, variant: Variant, sequence: usize, eps: f64, tol: f64) -> Result<bool> {
    let [tr, _, _] = ttm_core::scenario::generate_splits(&cfg.seeded_scenario())?;
    let model = TtmModel::new(cfg.model.clone(), variant, &tr, cfg.seed)?;
    let data = model.prepare(&tr)?;
    let s: &Prepared = data
        .get(sequence)
        .ok_or_else(|| invalid(format!("sequence {sequence} out of range, training split has {}", data.len())))?;
    let mixed = if variant.psa {
        let fe = model.front_end()?;
        Some(train::mixed_input(&model, &fe, s, &cfg.train, &mut stream(cfg.seed, &[tag("gradcheck")]))?)
    } else {
        None
    };
    let report = train::gradcheck(&model, s, &cfg.train, mixed.as_ref(), eps)?;
    let worst = report.worst.as_ref().map_or_else(|| "none".into(), |(n, i)| format!("{n}[{i}]"));
    let pass = report.max_rel_err < tol && report.checked == model.params.num_scalars();
    println!(
        "max_rel_err={:e} worst={worst} checked={} scalars={} eps={eps:e} tol={tol:e} pass={pass}",
        report.max_rel_err,
        report.checked,
        model.params.num_scalars()
    );
    Ok(pass)
}

/// Rotation and angles for a single 6D vector, printed as key=value lines.
pub fn pose_vector(text: &str) -> Result<()> {
    let v: Vec<f64> = text
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| invalid(format!("bad 6D component `{x}`: {e}"))))
        .collect::<Result<_>>()?;
    let r = headpose::gram_schmidt_6d(&Rotation6D::from_slice(&v).map_err(|e| invalid(e.to_string()))?)?;
    for i in 0..3 {
        println!("row{i}={},{},{}", r.at(i, 0), r.at(i, 1), r.at(i, 2));
    }
    let e = headpose::euler_from_rotation(&r)?;
    println!("yaw={} pitch={} roll={}", e.yaw, e.pitch, e.roll);
    Ok(())
}

/// Per-frame head orientation of a trained model as CSV.
pub fn pose_run(run_dir: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let saved = run::load_run(run_dir)?;
    if !saved.variant.vstr || saved.variant.streams != ttm_core::model::StreamSet::All {
        return Err(invalid(format!("variant {} has no rotation head branch", saved.variant.name())));
    }
    let (model, data) = restore(&saved)?;
    let ds = split_data(&data, split)?;
    let prepared = model.prepare(ds)?;
    let mut csv = String::from("sequence_id,frame,present,yaw,pitch,roll,reg_yaw,reg_pitch,reg_roll,truth_yaw\n");
    for (p, seq) in prepared.iter().zip(&ds.sequences) {
        let mut g = Graph::new();
        let x = g.constant(p.head.clone());
        let f = headpose::backbone(&mut g, &model.params, x)?;
        let a = headpose::head_to_6d(&mut g, &model.params, f)?;
        let b = headpose::gram_schmidt_graph(&mut g, a)?;
        let theta = headpose::regress_angles(&mut g, &model.params, b)?;
        for t in 0..p.frames {
            let e = headpose::euler_from_rotation(&RotationMatrix::from_vec(g.value(b).row(t)));
            let [y, pi, r] = e.map_or([f64::NAN; 3], |e| [e.yaw, e.pitch, e.roll]);
            let th = g.value(theta).row(t);
            let _ = writeln!(
                csv,
                "{},{t},{},{y},{pi},{r},{},{},{},{}",
                p.id, seq.mask[t] as u8, th[0], th[1], th[2], seq.truth.yaw[t]
            );
        }
    }
    let dir = RunDir::create(&saved.cfg, out)?;
    let path = dir.write("pose.csv", csv)?;
    println!("pose_csv={} frames={}", path.display(), prepared.iter().map(|p| p.frames).sum::<usize>());
    dir.summary(
        "pose",
        &saved.cfg,
        json!({ "source_run": run_dir.display().to_string(), "split": split }),
    )
}
