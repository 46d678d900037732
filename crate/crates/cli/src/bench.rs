//! Cost comparison: the network versus the finite element cell it
//! replaces, on the same strain ramp. Reports wall time and constitutive
//! call counts per step; the network's cost is a handful of material calls
//! regardless of mesh size, which is the whole point of the surrogate.

use std::fs;
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

use prnn_core::constitutive::{material_call_count, reset_material_call_count, StrainVec};
use prnn_core::microfe::{solve_step, MicroSolution};
use prnn_core::prnn::{forward_sequence, init_params, Checkpoint, PrnnConfig, PrnnParams};

use crate::config::ExperimentConfig;
use crate::failure::{Classify, CmdResult};
use crate::pipeline::{build_oracle, network_config};

#[derive(Serialize)]
pub struct SideCost {
    pub seconds_total: f64,
    pub seconds_per_step: f64,
    pub material_calls: u64,
    pub calls_per_step: f64,
}

#[derive(Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub model: String,
    pub n_steps: usize,
    pub step_size: f64,
    pub n_elements: usize,
    pub n_div: usize,
    pub n_points: usize,
    /// Total Newton iterations the cell needed over the whole ramp.
    pub oracle_newton_iterations: usize,
    pub oracle: SideCost,
    pub network: SideCost,
    pub speedup_wall: f64,
    pub speedup_calls: f64,
}

/// Times both sides on a shared uniaxial ramp and returns the report.
/// The ramp crosses the cell's yield point so the oracle pays a realistic
/// number of Newton iterations per step.
pub fn run_bench(
    config: &ExperimentConfig,
    net: &PrnnConfig,
    params: &PrnnParams,
    model: String,
) -> CmdResult<BenchReport> {
    let n_steps = config.bench.n_steps.max(1);
    let step_size = config.bench.step_size;
    let strains: Vec<StrainVec> = (0..=n_steps)
        .map(|t| StrainVec::new(step_size * t as f64, 0.0, 0.0))
        .collect();

    let (mesh, pbc) = build_oracle(config)?;
    reset_material_call_count();
    let started = Instant::now();
    let mut newton_iterations = 0;
    let mut solution = MicroSolution::virgin(&mesh);
    for strain in &strains {
        solution = solve_step(&mesh, &pbc, *strain, &solution)
            .context("oracle ramp")
            .or_fault()?;
        newton_iterations += solution.iterations;
    }
    let oracle_seconds = started.elapsed().as_secs_f64();
    let oracle_calls = material_call_count();

    reset_material_call_count();
    let started = Instant::now();
    forward_sequence(net, params, &strains).context("network ramp").or_fault()?;
    let network_seconds = started.elapsed().as_secs_f64();
    let network_calls = material_call_count();

    let steps = n_steps as f64;
    Ok(BenchReport {
        schema_version: 1,
        model,
        n_steps,
        step_size,
        n_elements: mesh.elements.len(),
        n_div: mesh.n_div,
        n_points: net.n_points,
        oracle_newton_iterations: newton_iterations,
        oracle: SideCost {
            seconds_total: oracle_seconds,
            seconds_per_step: oracle_seconds / steps,
            material_calls: oracle_calls,
            calls_per_step: oracle_calls as f64 / steps,
        },
        network: SideCost {
            seconds_total: network_seconds,
            seconds_per_step: network_seconds / steps,
            material_calls: network_calls,
            calls_per_step: network_calls as f64 / steps,
        },
        speedup_wall: oracle_seconds / network_seconds.max(f64::MIN_POSITIVE),
        speedup_calls: oracle_calls as f64 / (network_calls as f64).max(1.0),
    })
}

/// Benchmarks a checkpoint if one exists, otherwise a fresh network: the
/// per-step cost does not depend on the weights.
pub fn cmd_bench(config: &ExperimentConfig) -> CmdResult {
    let (net, params, model) = match checkpoint_params(config)? {
        Some((net, p, name)) => (net, p, name),
        None => {
            let net = network_config(config);
            let params = init_params(&net, 0);
            (net, params, "untrained".to_string())
        }
    };
    let report = run_bench(config, &net, &params, model)?;

    fs::create_dir_all(&config.out_dir).ok();
    let path = config.out_dir.join("bench.json");
    fs::write(&path, serde_json::to_string_pretty(&report).or_fault()?)
        .with_context(|| format!("writing {}", path.display()))
        .or_fault()?;

    println!(
        "bench: oracle {:.3e} s/step ({} elements, {:.0} material calls/step), network {:.3e} s/step ({:.0} calls/step)",
        report.oracle.seconds_per_step,
        report.n_elements,
        report.oracle.calls_per_step,
        report.network.seconds_per_step,
        report.network.calls_per_step,
    );
    println!(
        "bench: {:.0}x wall-clock speedup, {:.0}x fewer material calls -> {}",
        report.speedup_wall,
        report.speedup_calls,
        path.display()
    );
    Ok(())
}

fn checkpoint_params(
    config: &ExperimentConfig,
) -> CmdResult<Option<(PrnnConfig, PrnnParams, String)>> {
    let file = match &config.bench.model {
        Some(f) => f.clone(),
        None => {
            let seed = *config.train.seeds.first().unwrap_or(&0);
            ExperimentConfig::model_file_for_seed(seed)
        }
    };
    let path = config.model_path(&file);
    if !path.exists() {
        return Ok(None);
    }
    let net = Checkpoint::load(&path)
        .with_context(|| format!("loading {}", path.display()))
        .or_user()?;
    let params = net.params().or_user()?;
    Ok(Some((net.config, params, path.display().to_string())))
}
