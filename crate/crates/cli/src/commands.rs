//! The five subcommands: solve, sweep, compare, qlearn, truncation-study.

use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use dynbatch::discretize::to_dtmdp;
use dynbatch::policy::policy_to_csv;
use dynbatch::profile::traffic_intensity;
use dynbatch::qlearn::{policy_agreement, train, QLearnConfig};
use dynbatch::sim::{simulate, weighted_cost_of};
use dynbatch::smdp::build_truncated;
use dynbatch::solver::{
    default_overflow_cost, detect_control_limit, evaluate_policy, find_min_smax,
    relative_value_iteration, MinSmaxError,
};
use dynbatch::{
    EvalReport, FiniteSmdp, Policy, PolicySpec, RviParams, ServiceProfile, SolveReport,
    TruncationConfig, Weights, Workload,
};

use crate::config::RunConfig;
use crate::output::{opt_field, OutputDir};

/// Exit status for runs whose truncation misses the requested tolerance, or
/// whose comparison finds a benchmark beating the solved policy.
pub const EXIT_UNACCEPTABLE: u8 = 2;

struct Solved {
    policy: Policy,
    solve: SolveReport,
    eval: EvalReport,
    s_max: usize,
    c_o: f64,
    delta: f64,
}

fn rvi_params(config: &RunConfig) -> RviParams {
    RviParams {
        epsilon: config.solver.epsilon,
        iter_max: config.solver.iter_max,
        eta_fraction: config.solver.eta_fraction,
        ref_state: 0,
    }
}

/// Shared pipeline: build at the configured (or searched) truncation, solve,
/// evaluate.
fn solve_pipeline(
    config: &RunConfig,
    profile: &ServiceProfile,
    workload: &Workload,
    weights: &Weights,
) -> Result<Solved> {
    let params = rvi_params(config);
    let (s_max, c_o, delta) = match (&config.truncation, &config.auto_truncation) {
        (Some(t), _) => (t.s_max, t.c_o, t.delta),
        (None, Some(auto)) => {
            let grid = auto.grid();
            let result = find_min_smax(
                profile, workload, weights, auto.c_o, auto.delta, &params, &grid,
            )
            .map_err(|e| match e {
                MinSmaxError::Exhausted { ref records } => anyhow!(
                    "{e}; largest delta seen {:.3e}",
                    records.last().map(|r| r.delta_pi).unwrap_or(f64::NAN)
                ),
                MinSmaxError::Model(m) => anyhow!(m),
            })?;
            (result.chosen.s_max, auto.c_o, auto.delta)
        }
        (None, None) => bail!("config needs either truncation or auto_truncation"),
    };
    let trunc = TruncationConfig { s_max, c_o };
    let model = build_truncated(profile, workload, weights, &trunc)?;
    let dtmdp = to_dtmdp(model, params.eta_fraction)?;
    let (policy, solve) =
        relative_value_iteration(&dtmdp, params.epsilon, params.iter_max, params.ref_state)?;
    let eval = evaluate_policy(&policy, dtmdp.smdp(), delta)?;
    Ok(Solved {
        policy,
        solve,
        eval,
        s_max,
        c_o,
        delta,
    })
}

#[derive(Serialize)]
struct SolveMeta<'a> {
    config_hash: &'a str,
    rho: f64,
    lambda: f64,
    w1: f64,
    w2: f64,
    s_max: usize,
    c_o: f64,
    delta: f64,
    eta: f64,
    control_limit: Option<usize>,
}

pub fn cmd_solve(config: &RunConfig, dump_model: Option<&std::path::Path>) -> Result<ExitCode> {
    let profile = config.load_profile()?;
    let workload = config.workload_for(&profile)?;
    let weights = config.weights()?;
    let out = OutputDir::new(&config.out_dir, &config.hash())?;

    let solved = solve_pipeline(config, &profile, &workload, &weights)?;

    if let Some(path) = dump_model {
        let trunc = TruncationConfig {
            s_max: solved.s_max,
            c_o: solved.c_o,
        };
        let model = build_truncated(&profile, &workload, &weights, &trunc)?;
        dump_model_csv(&model, path, &config.hash())?;
    }

    let trunc = TruncationConfig {
        s_max: solved.s_max,
        c_o: solved.c_o,
    };
    let model = build_truncated(&profile, &workload, &weights, &trunc)?;
    let dtmdp = to_dtmdp(model, config.solver.eta_fraction)?;
    let hash = config.hash();
    let meta = SolveMeta {
        config_hash: &hash,
        rho: traffic_intensity(&profile, &workload).rho,
        lambda: workload.lambda(),
        w1: weights.w1,
        w2: weights.w2,
        s_max: solved.s_max,
        c_o: solved.c_o,
        delta: solved.delta,
        eta: dtmdp.eta(),
        control_limit: detect_control_limit(&solved.policy),
    };

    out.write_atomic(
        "policy.csv",
        &format!("# config={hash}\n{}", policy_to_csv(&solved.policy)),
    )?;
    #[derive(Serialize)]
    struct SolveOut<'a> {
        meta: &'a SolveMeta<'a>,
        report: &'a SolveReport,
    }
    out.write_json(
        "solve.json",
        &SolveOut {
            meta: &meta,
            report: &solved.solve,
        },
    )?;
    #[derive(Serialize)]
    struct EvalOut<'a> {
        meta: &'a SolveMeta<'a>,
        report: &'a EvalReport,
    }
    out.write_json(
        "eval.json",
        &EvalOut {
            meta: &meta,
            report: &solved.eval,
        },
    )?;

    println!(
        "solved: g = {:.6}, delta = {:.3e}, acceptable = {}, iterations = {} (converged = {})",
        solved.eval.g_pi,
        solved.eval.delta_pi,
        solved.eval.acceptable,
        solved.solve.iterations,
        solved.solve.converged
    );
    Ok(if solved.eval.acceptable {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_UNACCEPTABLE)
    })
}

fn dump_model_csv(model: &FiniteSmdp, path: &std::path::Path, hash: &str) -> Result<()> {
    let mut text = format!("# config={hash}\ns,a,y,c,lump_to_overflow\n");
    let space = model.space();
    for s in 0..space.num_states() {
        for a in space.feasible_actions(s) {
            text.push_str(&format!(
                "{s},{a},{},{},{}\n",
                model.sojourn(s, a),
                model.adapted_cost(s, a),
                model.overflow_lump(s, a)
            ));
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_sweep(config: &RunConfig) -> Result<ExitCode> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| anyhow!("config has no sweep section"))?;
    if sweep.rho_grid.is_empty() || sweep.w2_grid.is_empty() {
        bail!("sweep grids must be nonempty");
    }
    let profile = config.load_profile()?;
    let base_trunc = config
        .truncation
        .ok_or_else(|| anyhow!("sweep needs a truncation section"))?;
    let params = rvi_params(config);
    let w1 = config.weights.w1;
    let out = OutputDir::new(&config.out_dir, &config.hash())?;

    let points: Vec<(f64, f64)> = sweep
        .rho_grid
        .iter()
        .flat_map(|&rho| sweep.w2_grid.iter().map(move |&w2| (rho, w2)))
        .collect();

    struct Point {
        rho: f64,
        w2: f64,
        outcome: Result<(Policy, EvalReport, Option<usize>)>,
    }

    let results: Vec<Point> = points
        .par_iter()
        .map(|&(rho, w2)| {
            let outcome = (|| -> Result<_> {
                let workload = Workload::from_rho(&profile, rho)?;
                let weights = Weights::new(w1, w2)?;
                let c_o = if sweep.scale_overflow_cost {
                    base_trunc.c_o.max(default_overflow_cost(
                        &profile,
                        &workload,
                        &weights,
                        base_trunc.s_max,
                    )?)
                } else {
                    base_trunc.c_o
                };
                let trunc = TruncationConfig {
                    s_max: base_trunc.s_max,
                    c_o,
                };
                let model = build_truncated(&profile, &workload, &weights, &trunc)?;
                let dtmdp = to_dtmdp(model, params.eta_fraction)?;
                let (policy, _) = relative_value_iteration(
                    &dtmdp,
                    params.epsilon,
                    params.iter_max,
                    params.ref_state,
                )?;
                let eval = evaluate_policy(&policy, dtmdp.smdp(), base_trunc.delta)?;
                let limit = detect_control_limit(&policy);
                Ok((policy, eval, limit))
            })();
            Point { rho, w2, outcome }
        })
        .collect();

    let mut tradeoff_rows = Vec::new();
    let mut policy_rows = Vec::new();
    for point in &results {
        match &point.outcome {
            Ok((policy, eval, limit)) => {
                tradeoff_rows.push(format!(
                    "{},{w1},{},{},{},{},{},{},ok",
                    point.rho,
                    point.w2,
                    eval.g_pi,
                    eval.avg_response_time,
                    eval.avg_power,
                    opt_field(eval.energy_efficiency),
                    opt_field(*limit),
                ));
                for (s, &a) in policy.actions().iter().enumerate() {
                    policy_rows.push(format!("{},{w1},{},{s},{a}", point.rho, point.w2));
                }
            }
            Err(e) => {
                let msg = e.to_string().replace(',', ";");
                tradeoff_rows.push(format!("{},{w1},{},,,,,,error: {msg}", point.rho, point.w2));
            }
        }
    }

    out.write_csv(
        "tradeoff.csv",
        "rho,w1,w2,g,avg_response_time,avg_power,energy_efficiency,control_limit,status",
        &tradeoff_rows,
    )?;
    out.write_csv("policies.csv", "rho,w1,w2,s,action", &policy_rows)?;
    let failures = results.iter().filter(|p| p.outcome.is_err()).count();
    println!(
        "sweep: {} points, {failures} failures -> {}, {}",
        results.len(),
        out.path("tradeoff.csv").display(),
        out.path("policies.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

struct ComparisonRow {
    label: String,
    stable: bool,
    g_analytic: Option<f64>,
    sim_mean: Option<f64>,
    sim_stderr: Option<f64>,
    beats_solved: bool,
}

pub fn cmd_compare(config: &RunConfig) -> Result<ExitCode> {
    let compare = config
        .compare
        .as_ref()
        .ok_or_else(|| anyhow!("config has no compare section"))?;
    let profile = config.load_profile()?;
    let workload = config.workload_for(&profile)?;
    let weights = config.weights()?;
    let out = OutputDir::new(&config.out_dir, &config.hash())?;

    let solved = solve_pipeline(config, &profile, &workload, &weights)?;

    // Common evaluation ground: a truncation wide enough for the benchmark
    // queues, without any abstract overflow charge.
    let eval_s_max = compare.eval_s_max.max(solved.s_max);
    let eval_trunc = TruncationConfig {
        s_max: eval_s_max,
        c_o: 0.0,
    };
    let eval_model = build_truncated(&profile, &workload, &weights, &eval_trunc)?;

    let mut entries: Vec<(String, Policy, bool)> = Vec::new();
    let solved_extended = solved.policy.extend_draining(eval_s_max)?;
    entries.push(("smdp".into(), solved_extended, true));
    for spec in &compare.policies {
        let policy = spec.build(eval_s_max, profile.b_max())?;
        let stable = match spec {
            PolicySpec::Static { b } => workload.lambda() < profile.throughput(*b),
            _ => true,
        };
        entries.push((spec.label(), policy, stable));
    }

    let evaluated: Vec<(ComparisonRow, Option<dynbatch::SimReport>)> = entries
        .par_iter()
        .map(|(label, policy, stable)| {
            let g_analytic = if *stable {
                evaluate_policy(policy, &eval_model, solved.delta)
                    .ok()
                    .map(|e| e.g_pi)
            } else {
                None
            };
            let mut first_report = None;
            let sims: Vec<f64> = (0..config.simulation.replications)
                .filter_map(|rep| {
                    let report = simulate(
                        &profile,
                        &workload,
                        &weights,
                        policy,
                        config.simulation.horizon,
                        config.simulation.seed + rep as u64,
                    )
                    .ok()?;
                    let cost = weighted_cost_of(&report, &weights, &workload);
                    if rep == 0 {
                        first_report = Some(report);
                    }
                    Some(cost)
                })
                .collect();
            let (sim_mean, sim_stderr) = mean_stderr(&sims);
            let row = ComparisonRow {
                label: label.clone(),
                stable: *stable,
                g_analytic,
                sim_mean,
                sim_stderr,
                beats_solved: false,
            };
            (row, first_report)
        })
        .collect();

    // Full report of the first replication per policy, plus the batch-size
    // histograms side by side.
    let mut histogram_rows = Vec::new();
    for ((label, _, _), (_, report)) in entries.iter().zip(&evaluated) {
        if let Some(report) = report {
            let file_label = label.replace(['/', '\\', '.'], "_");
            out.write_json(&format!("sim_{file_label}.json"), report)?;
            for (b, &count) in report.batch_histogram.iter().enumerate() {
                if count > 0 {
                    histogram_rows.push(format!("{label},{b},{count}"));
                }
            }
        }
    }
    out.write_csv(
        "batch_histograms.csv",
        "policy,batch_size,count",
        &histogram_rows,
    )?;
    let rows: Vec<ComparisonRow> = evaluated.into_iter().map(|(row, _)| row).collect();

    let solved_g = rows
        .first()
        .and_then(|r| r.g_analytic)
        .ok_or_else(|| anyhow!("solved policy failed analytic evaluation"))?;
    let mut rows = rows;
    for row in rows.iter_mut().skip(1) {
        if let Some(g) = row.g_analytic {
            row.beats_solved = g < solved_g - 1e-9;
        }
    }

    let rho = traffic_intensity(&profile, &workload).rho;
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{rho},{},{},{},{},{},{},{}",
                r.label,
                weights.w1,
                weights.w2,
                r.stable,
                opt_field(r.g_analytic),
                opt_field(r.sim_mean),
                opt_field(r.sim_stderr),
                r.beats_solved
            )
        })
        .collect();
    out.write_csv(
        "comparison.csv",
        "policy,rho,w1,w2,stable,g_analytic,sim_mean,sim_stderr,beats_solved",
        &csv_rows,
    )?;

    let beaten = rows.iter().any(|r| r.beats_solved);
    println!(
        "compare: {} policies -> {} (solved g = {solved_g:.6}{})",
        rows.len(),
        out.path("comparison.csv").display(),
        if beaten {
            "; WARNING: a benchmark beats the solved policy"
        } else {
            ""
        }
    );
    Ok(if beaten {
        ExitCode::from(EXIT_UNACCEPTABLE)
    } else {
        ExitCode::SUCCESS
    })
}

fn mean_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

pub fn cmd_qlearn(config: &RunConfig) -> Result<ExitCode> {
    let section = config
        .qlearn
        .ok_or_else(|| anyhow!("config has no qlearn section"))?;
    let profile = config.load_profile()?;
    let workload = config.workload_for(&profile)?;
    let weights = config.weights()?;
    let trunc = config
        .truncation
        .ok_or_else(|| anyhow!("qlearn needs a truncation section"))?;
    let out = OutputDir::new(&config.out_dir, &config.hash())?;
    let params = rvi_params(config);

    let model = build_truncated(
        &profile,
        &workload,
        &weights,
        &TruncationConfig {
            s_max: trunc.s_max,
            c_o: trunc.c_o,
        },
    )?;
    let env = to_dtmdp(model, params.eta_fraction)?;
    let (reference_policy, _) =
        relative_value_iteration(&env, params.epsilon, params.iter_max, params.ref_state)?;
    let mu = dynbatch::solver::stationary_distribution(&reference_policy, env.smdp())?;
    let masked_mu: Vec<f64> = mu
        .iter()
        .map(|&m| if m >= 1e-4 { m } else { 0.0 })
        .collect();

    let result = train(
        &env,
        &QLearnConfig {
            epsilon0: section.epsilon0,
            iterations: section.iterations,
            seed: section.seed,
            snapshot_every: section.snapshot_every,
        },
    )?;

    let mut snapshot_rows = Vec::new();
    let mut agreement_rows = Vec::new();
    for snap in &result.snapshots {
        for (s, &a) in snap.policy.actions().iter().enumerate() {
            snapshot_rows.push(format!("{},{s},{a}", snap.iteration));
        }
        let plain: f64 = policy_agreement(&snap.policy, &reference_policy, None)?;
        let weighted: f64 = policy_agreement(&snap.policy, &reference_policy, Some(&masked_mu))?;
        agreement_rows.push(format!("{},{plain},{weighted}", snap.iteration));
    }
    out.write_csv("snapshots.csv", "iteration,state,action", &snapshot_rows)?;
    out.write_csv(
        "agreement.csv",
        "iteration,agreement,agreement_high_mass",
        &agreement_rows,
    )?;

    let final_weighted: f64 =
        policy_agreement(&result.policy, &reference_policy, Some(&masked_mu))?;
    println!(
        "qlearn: {} iterations, final high-mass agreement {final_weighted:.3} -> {}, {}",
        section.iterations,
        out.path("snapshots.csv").display(),
        out.path("agreement.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_truncation_study(config: &RunConfig) -> Result<ExitCode> {
    let study = config
        .study
        .as_ref()
        .ok_or_else(|| anyhow!("config has no study section"))?;
    let auto = config
        .auto_truncation
        .ok_or_else(|| anyhow!("truncation study needs an auto_truncation section"))?;
    let profile = config.load_profile()?;
    let workload = config.workload_for(&profile)?;
    let weights = config.weights()?;
    let params = rvi_params(config);
    let out = OutputDir::new(&config.out_dir, &config.hash())?;
    let grid = auto.grid();

    let mut table_rows = Vec::new();
    let mut record_rows = Vec::new();
    for &c_o in &study.c_o_grid {
        match find_min_smax(
            &profile, &workload, &weights, c_o, auto.delta, &params, &grid,
        ) {
            Ok(result) => {
                let r = result.chosen;
                table_rows.push(format!(
                    "{c_o},{},{},{},{},{},{}",
                    r.s_max,
                    r.iterations,
                    r.space_complexity,
                    r.time_complexity,
                    r.delta_pi,
                    r.g_pi
                ));
                for rec in &result.records {
                    record_rows.push(format!(
                        "{c_o},{},{},{},{},{},{}",
                        rec.s_max,
                        rec.acceptable,
                        rec.iterations,
                        rec.converged,
                        rec.delta_pi,
                        rec.g_pi
                    ));
                }
            }
            Err(MinSmaxError::Exhausted { records }) => {
                table_rows.push(format!("{c_o},,,,,,"));
                for rec in &records {
                    record_rows.push(format!(
                        "{c_o},{},{},{},{},{},{}",
                        rec.s_max,
                        rec.acceptable,
                        rec.iterations,
                        rec.converged,
                        rec.delta_pi,
                        rec.g_pi
                    ));
                }
                eprintln!(
                    "c_o = {c_o}: no s_max on the grid met delta = {}",
                    auto.delta
                );
            }
            Err(MinSmaxError::Model(e)) => return Err(e.into()),
        }
    }

    out.write_csv(
        "table1.csv",
        "c_o,min_s_max,iterations,space_complexity,time_complexity,delta_pi,g_pi",
        &table_rows,
    )?;
    out.write_csv(
        "study_records.csv",
        "c_o,s_max,acceptable,iterations,converged,delta_pi,g_pi",
        &record_rows,
    )?;
    println!(
        "truncation study: {} overflow costs -> {}, {}",
        study.c_o_grid.len(),
        out.path("table1.csv").display(),
        out.path("study_records.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}
