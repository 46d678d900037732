//! The data and training commands: `gen`, `train`, `grid`, `eval`.
//!
//! Error metric, used everywhere a quality number is reported: a curve's
//! error is the RMSE over all its steps and all three stress components, in
//! MPa; a set's error is the mean of its curves' RMSEs; per-step series are
//! the mean absolute error over curves and components at each step.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use prnn_core::constitutive::Material;
use prnn_core::microfe::{build_rve, label_path_logged, PbcMap, Phase, RveMesh, StepLog};
use prnn_core::pathgen::files::{read_dataset, write_dataset};
use prnn_core::pathgen::{make_dataset, Curve, CurveKind, Dataset, LabelFailure};
use prnn_core::prnn::{forward_sequence, Checkpoint, PrnnConfig, TrainingMeta};
use prnn_core::train::{
    curve_rmse, grid_search, mean_of, train, write_grid_results, write_loss_history, GridResult,
    TrainingCurve,
};

use crate::config::ExperimentConfig;
use crate::failure::{user_error, Classify, CmdResult, Failure};

/// Written into every report so numbers are never ambiguous.
pub const METRIC_NOTE: &str = "per-curve RMSE (MPa) over all steps and stress components; \
     set error = mean of per-curve RMSEs; \
     per-step series = mean absolute error (MPa) over curves and components at that step";

/// Builds the oracle cell described by the config.
pub fn build_oracle(config: &ExperimentConfig) -> CmdResult<(RveMesh, PbcMap)> {
    let rve = &config.rve;
    match build_rve(rve.n_fibers, rve.vf, rve.n_div, rve.seed) {
        Ok(built) => Ok(built),
        Err(e @ prnn_core::microfe::MicroFeError::Config(_)) => {
            Err(Failure::User(anyhow::Error::new(e).context("invalid [rve] block")))
        }
        Err(e) => Err(Failure::Fault(anyhow::Error::new(e).context("cell construction"))),
    }
}

pub fn kind_label(kind: CurveKind) -> &'static str {
    match kind {
        CurveKind::KnownRamp => "known_ramp",
        CurveKind::RandomRamp => "random_ramp",
        CurveKind::UnloadReload => "unload_reload",
        CurveKind::DeepUnload => "deep_unload",
        CurveKind::FineRamp => "fine_ramp",
        CurveKind::GpWalk => "gp_walk",
    }
}

/// Generates every configured dataset and labels it with the oracle.
/// Curves whose labeling fails are dropped from the data files but recorded
/// in the manifest; reruns with the same config are byte-identical.
pub fn cmd_gen(config: &ExperimentConfig) -> CmdResult {
    if config.datasets.is_empty() {
        return user_error("config declares no [datasets]; nothing to generate");
    }
    let data_dir = config.data_dir();
    fs::create_dir_all(&data_dir)
        .with_context(|| format!("cannot create {}", data_dir.display()))
        .or_fault()?;

    let (mesh, pbc) = build_oracle(config)?;
    write_mesh_snapshot(&data_dir.join("mesh.json"), &mesh).or_fault()?;

    for (name, spec) in &config.datasets {
        let dataset = make_dataset(spec)
            .with_context(|| format!("dataset \"{name}\""))
            .or_user()?;

        // Label in parallel; collect preserves curve order, so output files
        // do not depend on scheduling.
        let labeled: Vec<Result<_, _>> = dataset
            .curves
            .par_iter()
            .map(|curve| label_path_logged(&mesh, &pbc, &curve.path))
            .collect();

        let mut curves: Vec<Curve> = Vec::with_capacity(dataset.curves.len());
        let mut failures: Vec<LabelFailure> = Vec::new();
        let mut logs: Vec<(u32, Vec<StepLog>)> = Vec::new();
        for (curve, outcome) in dataset.curves.into_iter().zip(labeled) {
            match outcome {
                Ok((stresses, log)) => {
                    logs.push((curve.id, log));
                    curves.push(Curve { stresses: Some(stresses), ..curve });
                }
                Err(e) => {
                    let step = match &e {
                        prnn_core::microfe::MicroFeError::PathFailed { step, .. } => *step,
                        _ => 0,
                    };
                    eprintln!("warning: dataset \"{name}\" curve {} dropped: {e:#}", curve.id);
                    failures.push(LabelFailure {
                        id: curve.id,
                        kind: curve.path.meta.kind,
                        seed: curve.path.meta.seed,
                        step,
                    });
                }
            }
        }

        let n_ok = curves.len();
        let n_bad = failures.len();
        let out = Dataset { spec: spec.clone(), curves, failures };
        write_dataset(&config.csv_path(name), &config.manifest_path(name), &out)
            .with_context(|| format!("writing dataset \"{name}\""))
            .or_fault()?;
        write_solver_log(&data_dir.join(format!("{name}_solver.csv")), &logs).or_fault()?;
        println!(
            "gen {name}: {n_ok} curves labeled, {n_bad} failed -> {}",
            config.csv_path(name).display()
        );
    }
    Ok(())
}

fn write_mesh_snapshot(path: &Path, mesh: &RveMesh) -> anyhow::Result<()> {
    let snapshot = serde_json::json!({
        "length": mesh.length,
        "n_div": mesh.n_div,
        "target_vf": mesh.target_vf,
        "measured_vf": mesh.measured_vf,
        "fibers": mesh
            .fibers
            .iter()
            .map(|f| serde_json::json!({ "x": f.center.x, "y": f.center.y, "r": f.radius }))
            .collect::<Vec<_>>(),
        "nodes": mesh.nodes.iter().map(|n| [n.x, n.y]).collect::<Vec<_>>(),
        "elements": mesh
            .elements
            .iter()
            .map(|e| {
                serde_json::json!({
                    "nodes": e.nodes,
                    "phase": match e.phase { Phase::Matrix => "matrix", Phase::Fiber => "fiber" },
                })
            })
            .collect::<Vec<_>>(),
    });
    fs::write(path, serde_json::to_string(&snapshot)?).context("writing mesh snapshot")?;
    Ok(())
}

fn write_solver_log(path: &Path, logs: &[(u32, Vec<StepLog>)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["curve", "step", "iterations", "residual"])?;
    for (curve, log) in logs {
        for row in log {
            w.write_record([
                curve.to_string(),
                row.step.to_string(),
                row.iterations.to_string(),
                format!("{:.6e}", row.residual),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a labeled dataset written by `gen`, or explains what to run first.
pub fn load_labeled(config: &ExperimentConfig, name: &str) -> CmdResult<Dataset> {
    let csv = config.csv_path(name);
    let manifest = config.manifest_path(name);
    if !csv.exists() || !manifest.exists() {
        return user_error(format!(
            "dataset \"{name}\" not found under {}; run `prnn gen` first",
            config.data_dir().display()
        ));
    }
    read_dataset(&csv, &manifest)
        .with_context(|| format!("reading dataset \"{name}\""))
        .or_user()
}

fn training_set(config: &ExperimentConfig, name: &str) -> CmdResult<Vec<TrainingCurve>> {
    let dataset = load_labeled(config, name)?;
    let curves = dataset.training_curves();
    if curves.is_empty() {
        return user_error(format!("dataset \"{name}\" has no labeled curves"));
    }
    Ok(curves)
}

pub fn network_config(config: &ExperimentConfig) -> PrnnConfig {
    PrnnConfig::new(config.network.n_points, Material::matrix_default())
}

/// Fits one network per configured seed and writes a checkpoint plus a loss
/// history for each.
pub fn cmd_train(config: &ExperimentConfig) -> CmdResult {
    let curves = training_set(config, &config.train.dataset)?;
    let net = network_config(config);
    net.validate().or_user()?;
    let models = config.models_dir();
    fs::create_dir_all(&models)
        .with_context(|| format!("cannot create {}", models.display()))
        .or_fault()?;

    for &seed in &config.train.seeds {
        let spec = config.train.spec(seed);
        let outcome = train(&net, &spec, &curves)
            .with_context(|| format!("training with seed {seed}"))
            .or_fault()?;
        let initial_loss = outcome.loss_history.first().copied().unwrap_or(f64::NAN);
        let final_loss = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
        let meta = TrainingMeta { seed, epochs: outcome.epochs_run, initial_loss, final_loss };
        let model_path = models.join(ExperimentConfig::model_file_for_seed(seed));
        Checkpoint::new(net.clone(), &outcome.params, Some(meta))
            .save(&model_path)
            .or_fault()?;
        write_loss_history(&models.join(format!("loss_seed{seed}.csv")), &outcome.loss_history)
            .or_fault()?;
        println!(
            "train seed {seed}: {} epochs, loss {initial_loss:.3e} -> {final_loss:.3e}, saved {}",
            outcome.epochs_run,
            model_path.display()
        );
    }
    Ok(())
}

/// Sweeps layer sizes over several seeds and reports train/validation error
/// per cell, plus a per-size summary table on stdout.
pub fn cmd_grid(config: &ExperimentConfig) -> CmdResult {
    let train_set = training_set(config, &config.grid.train_dataset)?;
    let val_set = training_set(config, &config.grid.val_dataset)?;
    let grid = &config.grid;
    if grid.sizes.is_empty() || grid.seeds.is_empty() {
        return user_error("grid sweep needs at least one size and one seed");
    }

    let results = grid_search(
        &Material::matrix_default(),
        &grid.sizes,
        &grid.seeds,
        &grid.spec(),
        &train_set,
        &val_set,
    );
    fs::create_dir_all(&config.out_dir).ok();
    let out = config.out_dir.join("grid.csv");
    write_grid_results(&out, &results).or_fault()?;

    print_grid_table(&grid.sizes, &results);
    println!("grid: {} cells -> {}", results.len(), out.display());
    Ok(())
}

fn print_grid_table(sizes: &[usize], results: &[GridResult]) {
    println!("{:>8} {:>8} {:>16} {:>16} {:>16}", "n_points", "runs", "mean_train_rmse", "mean_val_rmse", "min_val_rmse");
    let mut best: Option<(usize, f64)> = None;
    for &size in sizes {
        let ok: Vec<&GridResult> =
            results.iter().filter(|r| r.n_points == size && r.fault.is_none()).collect();
        let faults = results.iter().filter(|r| r.n_points == size && r.fault.is_some()).count();
        if ok.is_empty() {
            println!("{size:>8} {:>8}  (all {faults} runs faulted)", 0);
            continue;
        }
        let train_mean = mean_of(&ok.iter().map(|r| r.train_error).collect::<Vec<_>>());
        let vals: Vec<f64> = ok.iter().map(|r| r.val_error).collect();
        let val_mean = mean_of(&vals);
        let val_min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "{size:>8} {:>8} {train_mean:>16.6e} {val_mean:>16.6e} {val_min:>16.6e}",
            ok.len()
        );
        if best.map_or(true, |(_, v)| val_mean < v) {
            best = Some((size, val_mean));
        }
    }
    if let Some((size, val)) = best {
        println!("selected n_points = {size} (mean validation RMSE {val:.6e} MPa)");
    }
}

#[derive(Serialize)]
struct ModelScore {
    mean_rmse_mpa: f64,
    min_rmse_mpa: f64,
    max_rmse_mpa: f64,
}

#[derive(Serialize)]
struct SetSummary {
    n_curves: usize,
    models: BTreeMap<String, ModelScore>,
    best_model: String,
    best_mean_rmse_mpa: f64,
    worst_mean_rmse_mpa: f64,
    mean_over_models_mpa: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    schema_version: u32,
    metric: &'static str,
    sets: BTreeMap<String, SetSummary>,
}

/// CSV writer whose file starts with a `#`-comment naming the metric.
fn metric_csv(path: &Path) -> anyhow::Result<csv::Writer<File>> {
    let mut file = File::create(path)?;
    writeln!(file, "# metric: {METRIC_NOTE}")?;
    Ok(csv::Writer::from_writer(file))
}

pub struct SetScore {
    /// (curve id, kind, path seed, steps, rmse) per labeled curve.
    pub per_curve: Vec<(u32, CurveKind, u64, usize, f64)>,
    /// (mean abs error, contributing curves) per step.
    pub per_step: Vec<(f64, usize)>,
}

impl SetScore {
    pub fn mean_rmse(&self) -> f64 {
        mean_of(&self.per_curve.iter().map(|c| c.4).collect::<Vec<_>>())
    }
}

/// Scores one network on one labeled dataset.
pub fn score_set(net: &Checkpoint, dataset: &Dataset) -> CmdResult<SetScore> {
    let params = net.params().or_user()?;
    let labeled: Vec<&Curve> = dataset.curves.iter().filter(|c| c.stresses.is_some()).collect();
    if labeled.is_empty() {
        return user_error("dataset has no labeled curves to score");
    }

    let predictions: Vec<Vec<_>> = labeled
        .par_iter()
        .map(|curve| forward_sequence(&net.config, &params, &curve.path.strains).map(|(s, _)| s))
        .collect::<Result<_, _>>()
        .context("network evaluation")
        .or_fault()?;

    let mut per_curve = Vec::with_capacity(labeled.len());
    let max_len = labeled.iter().map(|c| c.path.strains.len()).max().unwrap_or(0);
    let mut abs_sum = vec![0.0; max_len];
    let mut abs_n = vec![0usize; max_len];
    for (curve, pred) in labeled.iter().zip(&predictions) {
        let target = curve.stresses.as_ref().expect("filtered to labeled curves");
        per_curve.push((
            curve.id,
            curve.path.meta.kind,
            curve.path.meta.seed,
            curve.path.strains.len(),
            curve_rmse(pred, target),
        ));
        for (t, (p, y)) in pred.iter().zip(target).enumerate() {
            abs_sum[t] += (p - y).abs().sum() / 3.0;
            abs_n[t] += 1;
        }
    }
    let per_step = abs_sum
        .into_iter()
        .zip(abs_n)
        .map(|(s, n)| (s / n.max(1) as f64, n))
        .collect();
    Ok(SetScore { per_curve, per_step })
}

/// Scores every configured checkpoint on every configured dataset; writes
/// per-curve and per-step CSVs plus a JSON summary.
pub fn cmd_eval(config: &ExperimentConfig) -> CmdResult {
    if config.eval.datasets.is_empty() {
        return user_error("config lists no [eval] datasets");
    }
    let eval_dir = config.eval_dir();
    fs::create_dir_all(&eval_dir)
        .with_context(|| format!("cannot create {}", eval_dir.display()))
        .or_fault()?;

    let mut nets: Vec<(String, Checkpoint)> = Vec::new();
    for file in config.eval_models() {
        let path = config.model_path(&file);
        if !path.exists() {
            return user_error(format!(
                "checkpoint {} not found; run `prnn train` first",
                path.display()
            ));
        }
        let net = Checkpoint::load(&path)
            .with_context(|| format!("loading {}", path.display()))
            .or_user()?;
        nets.push((file_stem(&path), net));
    }

    let mut sets = BTreeMap::new();
    for name in &config.eval.datasets {
        let dataset = load_labeled(config, name)?;
        let mut models = BTreeMap::new();
        let mut n_curves = 0;
        for (stem, net) in &nets {
            let score = score_set(net, &dataset)?;
            n_curves = score.per_curve.len();
            write_curve_report(&eval_dir.join(format!("{name}_{stem}_curves.csv")), &score)
                .or_fault()?;
            write_step_report(&eval_dir.join(format!("{name}_{stem}_steps.csv")), &score)
                .or_fault()?;
            let rmses: Vec<f64> = score.per_curve.iter().map(|c| c.4).collect();
            models.insert(
                stem.clone(),
                ModelScore {
                    mean_rmse_mpa: mean_of(&rmses),
                    min_rmse_mpa: rmses.iter().cloned().fold(f64::INFINITY, f64::min),
                    max_rmse_mpa: rmses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                },
            );
            println!("eval {name} / {stem}: mean RMSE {:.6e} MPa over {n_curves} curves", mean_of(&rmses));
        }
        let (best_model, best) = models
            .iter()
            .min_by(|a, b| a.1.mean_rmse_mpa.total_cmp(&b.1.mean_rmse_mpa))
            .map(|(k, v)| (k.clone(), v.mean_rmse_mpa))
            .expect("at least one model");
        let worst = models.values().map(|m| m.mean_rmse_mpa).fold(f64::NEG_INFINITY, f64::max);
        let mean_over =
            mean_of(&models.values().map(|m| m.mean_rmse_mpa).collect::<Vec<_>>());
        sets.insert(
            name.clone(),
            SetSummary {
                n_curves,
                models,
                best_model,
                best_mean_rmse_mpa: best,
                worst_mean_rmse_mpa: worst,
                mean_over_models_mpa: mean_over,
            },
        );
    }

    let summary = EvalSummary { schema_version: 1, metric: METRIC_NOTE, sets };
    let path = eval_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).or_fault()?)
        .with_context(|| format!("writing {}", path.display()))
        .or_fault()?;
    println!("eval summary -> {}", path.display());
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn write_curve_report(path: &Path, score: &SetScore) -> anyhow::Result<()> {
    let mut w = metric_csv(path)?;
    w.write_record(["curve", "kind", "seed", "steps", "rmse_mpa"])?;
    for (id, kind, seed, steps, rmse) in &score.per_curve {
        w.write_record([
            id.to_string(),
            kind_label(*kind).to_string(),
            seed.to_string(),
            steps.to_string(),
            format!("{rmse:.12e}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_step_report(path: &Path, score: &SetScore) -> anyhow::Result<()> {
    let mut w = metric_csv(path)?;
    w.write_record(["step", "mean_abs_error_mpa", "n_curves"])?;
    for (step, (err, n)) in score.per_step.iter().enumerate() {
        w.write_record([step.to_string(), format!("{err:.12e}"), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Resolves the checkpoint a single-model command should use.
pub fn default_model(config: &ExperimentConfig, explicit: Option<&String>) -> CmdResult<PathBuf> {
    let file = match explicit {
        Some(f) => f.clone(),
        None => {
            let seed = *config.train.seeds.first().unwrap_or(&0);
            ExperimentConfig::model_file_for_seed(seed)
        }
    };
    let path = config.model_path(&file);
    if !path.exists() {
        return user_error(format!(
            "checkpoint {} not found; run `prnn train` first or set a model in the config",
            path.display()
        ));
    }
    Ok(path)
}
