//! Experiment execution: one seeded run per entry in `seeds`, artifacts
//! under the output directory, metrics collected into the run report.
//!
//! Each seed gets its own scenario (the config's placeholder seed is
//! replaced), its own artifact files suffixed `_seed<N>`, and one metric
//! row. Nothing here reads the clock for anything but timings, and
//! timings stay out of `results.csv`.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmm_core::bellman::{
    self, greedy_improvement_loop_traced, gridworld_4x4, make_transition_dataset,
    policy_evaluation_exact, uniform_exploration, value_iteration, SamplingMode, TabularMDP,
    TransitionDataset,
};
use cmm_core::game::HRegularizer;
use cmm_core::ivr::{
    self, discrete_two_stage_baseline, generate_linear_iv, generate_nonlinear_iv,
    gradient_bias_experiment, instrument_cross_moment, LinearIvScenario, NonlinearIvScenario,
};
use cmm_core::solver::{kappa_of_n, run_no_regret_game, solve_ivanov, GameTrace, StopReason};
use cmm_core::{
    CmmError, Dataset, FeatureMap, ParamFunction, ReLaGame, Result, SlackReport, SolverConfig,
};

use crate::config::{DatasetBlock, ExperimentConfig, ExperimentSpec};
use crate::report::{RunReport, SeedFailure, SeedRow};

/// Cross-moment magnitude below which the instrument is flagged as weak.
pub const WEAK_INSTRUMENT_THRESHOLD: f64 = 0.05;

const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

/// Exit code for a completed run: 0 all seeds succeeded, 3 every seed
/// failed and at least one diverged, 4 any other failure mix.
pub fn exit_code(report: &RunReport) -> i32 {
    if report.failures.is_empty() {
        EXIT_OK
    } else if report.rows.is_empty() && report.failures.iter().any(|f| f.divergence) {
        EXIT_DIVERGENCE
    } else {
        EXIT_PARTIAL
    }
}

struct SeedOutput {
    metrics: BTreeMap<String, f64>,
    /// Artifact files written, relative to the output directory.
    files: Vec<String>,
}

impl SeedOutput {
    fn new() -> Self {
        Self { metrics: BTreeMap::new(), files: Vec::new() }
    }

    fn put(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }
}

/// Runs every seed of a validated config and writes `resolved_config.toml`,
/// per-seed artifacts, `results.csv`, and `report.json` under `config.out`.
pub fn execute(config: &ExperimentConfig, quiet: bool) -> Result<RunReport> {
    let config = config.clone().resolve();
    config.validate()?;
    preflight(&config.spec)?;
    let out_dir = config.out.clone();
    std::fs::create_dir_all(&out_dir)?;

    let mut report = RunReport::new(config.clone());
    std::fs::write(out_dir.join("resolved_config.toml"), config.to_toml_string()?)?;
    report.manifest.push("resolved_config.toml".to_string());

    let total_start = Instant::now();
    for &seed in &config.seeds {
        let start = Instant::now();
        match run_seed(&config, seed, &out_dir, quiet) {
            Ok(output) => {
                report.rows.push(SeedRow { seed, metrics: output.metrics });
                report.manifest.extend(output.files);
                if !quiet {
                    println!("seed {seed}: ok ({:.2}s)", start.elapsed().as_secs_f64());
                }
            }
            Err(e) => {
                let divergence = matches!(e, CmmError::Divergence);
                if !quiet {
                    println!("seed {seed}: failed: {e}");
                }
                report.failures.push(SeedFailure { seed, error: e.to_string(), divergence });
            }
        }
        report
            .timings
            .insert(format!("seed_{seed}"), start.elapsed().as_secs_f64());
    }
    report.timings.insert("total".to_string(), total_start.elapsed().as_secs_f64());
    report.finalize();

    if let ExperimentSpec::IvrLinear { scenario, .. } = &config.spec {
        if !report.rows.is_empty() {
            write_estimates_csv(&report, scenario.beta_star, &out_dir)?;
            report.manifest.push("estimates.csv".to_string());
            report.manifest.sort();
        }
    }

    report.write_results_csv(out_dir.join("results.csv"))?;
    report.manifest.push("results.csv".to_string());
    report.manifest.push("report.json".to_string());
    report.manifest.sort();
    std::fs::write(out_dir.join("report.json"), report.to_json_string()?)?;
    if !quiet {
        println!(
            "wrote {} ({} seed(s) ok, {} failed)",
            out_dir.join("results.csv").display(),
            report.rows.len(),
            report.failures.len()
        );
    }
    Ok(report)
}

/// Validation that needs referenced files: the MDP must load and any
/// explicit policies must fit it, before the first seed starts.
fn preflight(spec: &ExperimentSpec) -> Result<()> {
    match spec {
        ExperimentSpec::BellmanEval { mdp_path, policy, gamma, .. } => {
            let mdp = load_mdp(mdp_path.as_deref(), *gamma)?;
            if let Some(p) = policy {
                bellman::validate_policy(mdp.n_states(), mdp.n_actions(), p)?;
            }
            Ok(())
        }
        ExperimentSpec::BellmanImprove { mdp_path, initial_policy, gamma, .. } => {
            let mdp = load_mdp(mdp_path.as_deref(), *gamma)?;
            if let Some(p) = initial_policy {
                bellman::validate_policy(mdp.n_states(), mdp.n_actions(), p)?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    quiet: bool,
) -> Result<SeedOutput> {
    let solver = config.solver();
    match &config.spec {
        ExperimentSpec::IvrLinear { scenario, radius } => {
            run_ivr_linear(scenario, *radius, &solver, seed, out_dir, quiet)
        }
        ExperimentSpec::IvrNonlinear { scenario, h_degree, radius } => {
            run_ivr_nonlinear(scenario, *h_degree, *radius, &solver, seed, out_dir, quiet)
        }
        ExperimentSpec::BellmanEval { mdp_path, dataset, policy, gamma } => {
            let mdp = load_mdp(mdp_path.as_deref(), *gamma)?;
            run_bellman_eval(&mdp, dataset, policy.as_deref(), &solver, seed, out_dir)
        }
        ExperimentSpec::BellmanImprove {
            mdp_path,
            dataset,
            rounds,
            tie_tol,
            initial_policy,
            gamma,
        } => {
            let mdp = load_mdp(mdp_path.as_deref(), *gamma)?;
            let icfg = bellman::ImprovementConfig {
                rounds: *rounds,
                tie_tol: *tie_tol,
                initial_policy: initial_policy.clone(),
            };
            run_bellman_improve(&mdp, dataset, &icfg, &solver, seed, out_dir, quiet)
        }
        ExperimentSpec::BiasDemo { scenario, trials, h_degree, h_weights } => {
            run_bias_demo(scenario, *trials, *h_degree, h_weights, seed, out_dir)
        }
        ExperimentSpec::Ivanov { scenario, kappa, h_degree, outer } => {
            run_ivanov(scenario, *kappa, *h_degree, outer, &solver, seed, out_dir, quiet)
        }
    }
}

fn warn_if_weak(data: &Dataset, quiet: bool) {
    if quiet {
        return;
    }
    if let Ok(c) = instrument_cross_moment(data) {
        if c.abs() < WEAK_INSTRUMENT_THRESHOLD {
            println!(
                "warning: instrument cross-moment {c:.4} is below {WEAK_INSTRUMENT_THRESHOLD}; \
                 estimates may be unstable"
            );
        }
    }
}

fn trace_metrics(out: &mut SeedOutput, trace: &GameTrace) {
    out.put("best_payoff", trace.best_payoff);
    out.put("iters", trace.len() as f64);
    out.put(
        "hit_threshold",
        if trace.stopped_reason == StopReason::Threshold { 1.0 } else { 0.0 },
    );
}

fn write_h_and_trace(
    out: &mut SeedOutput,
    trace: &GameTrace,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let h_name = format!("h_seed{seed}.toml");
    std::fs::write(out_dir.join(&h_name), trace.best_h.to_toml_string()?)?;
    out.files.push(h_name);
    let t_name = format!("trace_seed{seed}.csv");
    trace.to_csv_path(out_dir.join(&t_name))?;
    out.files.push(t_name);
    Ok(())
}

fn run_ivr_linear(
    scenario: &LinearIvScenario,
    radius: f64,
    solver: &SolverConfig,
    seed: u64,
    out_dir: &Path,
    quiet: bool,
) -> Result<SeedOutput> {
    let sc = LinearIvScenario { seed, ..*scenario };
    let data = generate_linear_iv(&sc)?;
    warn_if_weak(&data, quiet);

    let tsls = ivr::tsls_estimate(&data)?;
    let poly1 = FeatureMap::polynomial(1, 1)?;
    let ols = ivr::ols_estimate(&data, &poly1)?;
    let game = ReLaGame::with_options(
        data,
        poly1.clone(),
        poly1.clone(),
        0.0,
        HRegularizer::None,
        Some(0.0),
    )?;
    let h0 = ParamFunction::zeros(poly1, radius)?;
    let trace = run_no_regret_game(&game, solver, &h0)?;

    let mut out = SeedOutput::new();
    let w = trace.best_h.weights();
    out.put("game_intercept", w[0]);
    out.put("game_slope", w[1]);
    out.put("tsls", tsls);
    out.put("ols_slope", ols.weights()[1]);
    out.put("gap_game_tsls", (w[1] - tsls).abs());
    out.put("abs_err_game", (w[1] - sc.beta_star).abs());
    out.put("abs_err_tsls", (tsls - sc.beta_star).abs());
    out.put("abs_err_ols", (ols.weights()[1] - sc.beta_star).abs());
    trace_metrics(&mut out, &trace);
    write_h_and_trace(&mut out, &trace, seed, out_dir)?;
    Ok(out)
}

fn run_ivr_nonlinear(
    scenario: &NonlinearIvScenario,
    h_degree: usize,
    radius: f64,
    solver: &SolverConfig,
    seed: u64,
    out_dir: &Path,
    quiet: bool,
) -> Result<SeedOutput> {
    let sc = NonlinearIvScenario { seed, ..*scenario };
    let k = sc.discrete_z.expect("validated: discrete_z is set");
    let data = generate_nonlinear_iv(&sc)?;
    warn_if_weak(&data, quiet);

    let h_class = FeatureMap::polynomial(h_degree, 1)?;
    let baseline = discrete_two_stage_baseline(&data, &h_class)?;
    let game = ReLaGame::with_options(
        data,
        h_class.clone(),
        FeatureMap::tabular(k)?,
        0.0,
        HRegularizer::None,
        Some(0.0),
    )?;
    let h0 = ParamFunction::zeros(h_class, radius)?;
    let trace = run_no_regret_game(&game, solver, &h0)?;

    let mut out = SeedOutput::new();
    let mut coeff_gap: f64 = 0.0;
    for (i, (g, b)) in trace.best_h.weights().iter().zip(baseline.weights()).enumerate() {
        out.put(&format!("game_c{i}"), *g);
        out.put(&format!("baseline_c{i}"), *b);
        coeff_gap = coeff_gap.max((g - b).abs());
    }
    out.put("coeff_gap", coeff_gap);
    trace_metrics(&mut out, &trace);
    write_h_and_trace(&mut out, &trace, seed, out_dir)?;
    Ok(out)
}

/// Loads the MDP (the shipped gridworld when no path is given) and applies
/// the optional discount override.
fn load_mdp(path: Option<&Path>, gamma: Option<f64>) -> Result<TabularMDP> {
    let mdp = match path {
        Some(p) => TabularMDP::load_toml_path(p)?,
        None => gridworld_4x4(),
    };
    match gamma {
        None => Ok(mdp),
        Some(g) => {
            let (ns, na) = (mdp.n_states(), mdp.n_actions());
            let mut transitions = Vec::with_capacity(ns * na * ns);
            let mut rewards = Vec::with_capacity(ns * na);
            for s in 0..ns {
                for a in 0..na {
                    transitions.extend_from_slice(mdp.transition(s, a));
                    rewards.push(mdp.reward(s, a));
                }
            }
            TabularMDP::new(ns, na, transitions, rewards, g)
        }
    }
}

fn build_dataset(
    mdp: &TabularMDP,
    block: &DatasetBlock,
    seed: u64,
) -> Result<TransitionDataset> {
    let dist = uniform_exploration(mdp);
    let mode = match block {
        DatasetBlock::Exact => SamplingMode::Exact,
        DatasetBlock::Sampled { n } => SamplingMode::Sampled { n: *n, seed },
    };
    make_transition_dataset(mdp, &dist, mode)
}

fn state_classes(mdp: &TabularMDP) -> Result<(FeatureMap, FeatureMap)> {
    let v = FeatureMap::tabular(mdp.n_states())?;
    let f = FeatureMap::tabular(mdp.n_states() * mdp.n_actions())?;
    Ok((v, f))
}

fn write_values_csv(
    path: &Path,
    rows: &[(usize, usize, f64, f64)],
    with_round: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    if with_round {
        w.write_record(["round", "state", "V_game", "V_exact", "abs_err"])?;
    } else {
        w.write_record(["state", "V_game", "V_exact", "abs_err"])?;
    }
    for &(round, state, game, exact) in rows {
        let err = (game - exact).abs();
        let mut rec = Vec::new();
        if with_round {
            rec.push(round.to_string());
        }
        rec.extend([
            state.to_string(),
            game.to_string(),
            exact.to_string(),
            err.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a value-comparison CSV: `(round, state, V_game, V_exact,
/// abs_err)`; `round` is 0 for the per-state evaluation table.
pub type ValueRow = (usize, usize, f64, f64, f64);

/// Reads back both value CSV shapes written by the Bellman runners
/// (`state,...` and `round,state,...`).
pub fn read_values_csv<R: std::io::Read>(input: R) -> Result<Vec<ValueRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| CmmError::Parse(e.to_string()))?.clone();
    let with_round = match headers.iter().collect::<Vec<_>>().as_slice() {
        ["round", "state", "V_game", "V_exact", "abs_err"] => true,
        ["state", "V_game", "V_exact", "abs_err"] => false,
        other => {
            return Err(CmmError::Parse(format!("unexpected value csv header: {other:?}")))
        }
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CmmError::Parse(format!("row {}: {e}", i + 2)))?;
        let field = |j: usize| -> Result<f64> {
            rec.get(j)
                .ok_or_else(|| CmmError::Parse(format!("row {}: short record", i + 2)))?
                .parse()
                .map_err(|e| CmmError::Parse(format!("row {}: {e}", i + 2)))
        };
        let offset = usize::from(with_round);
        let round = if with_round { field(0)? as usize } else { 0 };
        rows.push((
            round,
            field(offset)? as usize,
            field(offset + 1)?,
            field(offset + 2)?,
            field(offset + 3)?,
        ));
    }
    Ok(rows)
}

pub fn read_values_csv_path<P: AsRef<Path>>(path: P) -> Result<Vec<ValueRow>> {
    read_values_csv(std::fs::File::open(path)?)
}

fn run_bellman_eval(
    mdp: &TabularMDP,
    block: &DatasetBlock,
    policy: Option<&[usize]>,
    solver: &SolverConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<SeedOutput> {
    let dataset = build_dataset(mdp, block, seed)?;
    let default_policy: Vec<usize> =
        (0..mdp.n_states()).map(|s| s % mdp.n_actions()).collect();
    let policy = policy.unwrap_or(&default_policy);
    let (v_class, f_class) = state_classes(mdp)?;
    let (values, trace) = bellman::evaluate_policy_via_game_traced(
        &dataset,
        policy,
        mdp.gamma(),
        &v_class,
        &f_class,
        solver,
    )?;
    let exact = policy_evaluation_exact(mdp, policy)?;

    let rows: Vec<(usize, usize, f64, f64)> = values
        .iter()
        .zip(&exact)
        .enumerate()
        .map(|(s, (g, e))| (0, s, *g, *e))
        .collect();
    let name = format!("values_seed{seed}.csv");
    write_values_csv(&out_dir.join(&name), &rows, false)?;

    let mut out = SeedOutput::new();
    out.files.push(name);
    let sup = values
        .iter()
        .zip(&exact)
        .map(|(g, e)| (g - e).abs())
        .fold(0.0f64, f64::max);
    let mean = values
        .iter()
        .zip(&exact)
        .map(|(g, e)| (g - e).abs())
        .sum::<f64>()
        / values.len() as f64;
    out.put("sup_err", sup);
    out.put("mean_err", mean);
    trace_metrics(&mut out, &trace);
    write_h_and_trace(&mut out, &trace, seed, out_dir)?;
    Ok(out)
}

fn run_bellman_improve(
    mdp: &TabularMDP,
    block: &DatasetBlock,
    icfg: &bellman::ImprovementConfig,
    solver: &SolverConfig,
    seed: u64,
    out_dir: &Path,
    quiet: bool,
) -> Result<SeedOutput> {
    let dataset = build_dataset(mdp, block, seed)?;
    let (v_class, f_class) = state_classes(mdp)?;
    let (last, rounds) = greedy_improvement_loop_traced(
        &dataset,
        mdp.gamma(),
        &v_class,
        &f_class,
        solver,
        icfg,
    )?;
    let oracle = value_iteration(mdp, 1e-10)?;

    let mut rows = Vec::new();
    for (round, pair) in rounds.iter().enumerate() {
        // Reference values for the policy this round actually evaluated.
        let exact = policy_evaluation_exact(mdp, &pair.policy)?;
        for (s, (g, e)) in pair.values.iter().zip(&exact).enumerate() {
            rows.push((round, s, *g, *e));
        }
    }
    let name = format!("rounds_seed{seed}.csv");
    write_values_csv(&out_dir.join(&name), &rows, true)?;

    let exact_last = policy_evaluation_exact(mdp, &last.policy)?;
    let sup_final = last
        .values
        .iter()
        .zip(&exact_last)
        .map(|(g, e)| (g - e).abs())
        .fold(0.0f64, f64::max);
    let matches = last.policy == oracle.policy;
    if !quiet {
        println!("final policy (state: action):");
        for (s, a) in last.policy.iter().enumerate() {
            println!("  {s}: {a}");
        }
        println!("matches the value-iteration policy: {matches}");
    }

    let mut out = SeedOutput::new();
    out.files.push(name);
    out.put("rounds_used", rounds.len() as f64);
    out.put("policy_matches_oracle", if matches { 1.0 } else { 0.0 });
    out.put("sup_err_final", sup_final);
    Ok(out)
}

fn run_bias_demo(
    scenario: &NonlinearIvScenario,
    trials: usize,
    h_degree: usize,
    h_weights: &[f64],
    seed: u64,
    out_dir: &Path,
) -> Result<SeedOutput> {
    let sc = NonlinearIvScenario { seed, ..*scenario };
    let h_class = FeatureMap::polynomial(h_degree, 1)?;
    let h = ParamFunction::with_weights(h_class, h_weights.to_vec(), 1e4)?;
    let report = gradient_bias_experiment(&sc, &h, trials, seed)?;

    let name = format!("bias_seed{seed}.csv");
    report.to_csv_path(out_dir.join(&name))?;

    // Worst-coordinate deviations in stderr units: the two-stage gradient
    // should sit on its predicted bias and clearly off zero; the game
    // gradient should sit on zero.
    let sigma = |mean: f64, target: f64, se: f64| {
        if se > 0.0 {
            (mean - target).abs() / se
        } else if (mean - target).abs() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let mut ts_dev_from_predicted: f64 = 0.0;
    for c in &report.two_stage {
        ts_dev_from_predicted = ts_dev_from_predicted.max(sigma(
            c.single_sample_mean,
            c.exact + c.predicted_bias,
            c.single_sample_stderr,
        ));
    }
    let ts_max_bias_sigma = report
        .two_stage
        .iter()
        .map(|c| sigma(c.single_sample_mean, c.exact, c.single_sample_stderr))
        .fold(0.0f64, f64::max);
    let rela_max_sigma = report
        .rela
        .iter()
        .map(|c| sigma(c.single_sample_mean, c.exact, c.single_sample_stderr))
        .fold(0.0f64, f64::max);

    let mut out = SeedOutput::new();
    out.files.push(name);
    out.put("two_stage_dev_from_predicted_sigma", ts_dev_from_predicted);
    out.put("two_stage_max_bias_sigma", ts_max_bias_sigma);
    out.put("rela_max_bias_sigma", rela_max_sigma);
    out.put("trials", report.trials as f64);
    out.put("smoothed_cells", report.smoothed_cells as f64);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_ivanov(
    scenario: &NonlinearIvScenario,
    kappa: Option<f64>,
    h_degree: usize,
    outer: &crate::config::OuterBlock,
    solver: &SolverConfig,
    seed: u64,
    out_dir: &Path,
    quiet: bool,
) -> Result<SeedOutput> {
    let sc = NonlinearIvScenario { seed, ..*scenario };
    let k = sc.discrete_z.expect("validated: discrete_z is set");
    let data = generate_nonlinear_iv(&sc)?;
    warn_if_weak(&data, quiet);
    let n = data.n();
    let kappa = kappa.unwrap_or_else(|| kappa_of_n(k, n));

    let h_class = FeatureMap::polynomial(h_degree, 1)?;
    let game = ReLaGame::with_options(
        data,
        h_class.clone(),
        FeatureMap::tabular(k)?,
        0.0,
        HRegularizer::None,
        Some(0.0),
    )?;
    let icfg = outer.with_kappa(kappa);
    let (h, trace, slack) = solve_ivanov(&game, &icfg, solver)?;

    let f_star = game.best_response_f(&h)?;
    let slack_rep = game.slack_report(&h, &f_star)?;
    let name = format!("slack_seed{seed}.csv");
    slack_rep.to_csv_path(out_dir.join(&name))?;

    let mut out = SeedOutput::new();
    out.files.push(name);
    out.put("kappa", kappa);
    out.put("achieved_slack", slack);
    out.put("slack_margin", kappa + icfg.tolerance - slack);
    let h_name = format!("h_seed{seed}.toml");
    std::fs::write(out_dir.join(&h_name), h.to_toml_string()?)?;
    out.files.push(h_name);
    let t_name = format!("trace_seed{seed}.csv");
    trace.to_csv_path(out_dir.join(&t_name))?;
    out.files.push(t_name);
    out.put("iters", trace.len() as f64);
    Ok(out)
}

/// Aggregated estimator table for the linear benchmark:
/// `estimator,beta_hat,stderr,abs_error` with `beta_hat` the mean over
/// seeds and `abs_error` its distance to the scenario's true coefficient.
fn write_estimates_csv(report: &RunReport, beta_star: f64, out_dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(out_dir.join("estimates.csv"))?);
    w.write_record(["estimator", "beta_hat", "stderr", "abs_error"])?;
    for (name, metric) in
        [("game", "game_slope"), ("two-stage-ls", "tsls"), ("least-squares", "ols_slope")]
    {
        let agg = report
            .aggregates
            .get(metric)
            .ok_or_else(|| CmmError::Parse(format!("missing aggregate {metric}")))?;
        w.write_record([
            name.to_string(),
            agg.mean.to_string(),
            agg.stderr.to_string(),
            (agg.mean - beta_star).abs().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `estimates.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub estimator: String,
    pub beta_hat: f64,
    pub stderr: f64,
    pub abs_error: f64,
}

pub fn read_estimates_csv<R: std::io::Read>(input: R) -> Result<Vec<EstimateRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| CmmError::Parse(e.to_string()))?;
    if headers.iter().ne(["estimator", "beta_hat", "stderr", "abs_error"]) {
        return Err(CmmError::Parse("unexpected estimates header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CmmError::Parse(format!("row {}: {e}", i + 2)))?;
        let field = |j: usize| -> Result<f64> {
            rec.get(j)
                .ok_or_else(|| CmmError::Parse(format!("row {}: short record", i + 2)))?
                .parse()
                .map_err(|e| CmmError::Parse(format!("row {}: {e}", i + 2)))
        };
        rows.push(EstimateRow {
            estimator: rec
                .get(0)
                .ok_or_else(|| CmmError::Parse(format!("row {}: short record", i + 2)))?
                .to_string(),
            beta_hat: field(1)?,
            stderr: field(2)?,
            abs_error: field(3)?,
        });
    }
    Ok(rows)
}

pub fn read_estimates_csv_path<P: AsRef<Path>>(path: P) -> Result<Vec<EstimateRow>> {
    read_estimates_csv(std::fs::File::open(path)?)
}

/// Arguments for the slack diagnostic over a trained function and a
/// dataset.
#[derive(Debug, Clone)]
pub struct DiagnoseArgs {
    pub artifact: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub top: usize,
    /// Overrides the dataset's own z-bin count (needed when the CSV lacks
    /// `z_key`).
    pub cardinality: Option<usize>,
}

/// Loads the trained function and the dataset, plays the exact best
/// response against it, and writes the per-bin slack table to
/// `<out>/slack_report.csv`, printing the top rows by `n_z * f(z)^2`.
pub fn diagnose(args: &DiagnoseArgs, quiet: bool) -> Result<SlackReport> {
    let h = ParamFunction::from_toml_str(&std::fs::read_to_string(&args.artifact)?)?;
    let data = Dataset::from_csv_path(&args.dataset, args.cardinality)?;
    let k = data.z_cardinality().ok_or(CmmError::NotDiscreteInZ)?;
    let game = ReLaGame::with_options(
        data,
        h.features().clone(),
        FeatureMap::tabular(k)?,
        0.0,
        HRegularizer::None,
        Some(0.0),
    )?;
    let f_star = game.best_response_f(&h)?;
    let report = game.slack_report(&h, &f_star)?;

    std::fs::create_dir_all(&args.out)?;
    report.to_csv_path(args.out.join("slack_report.csv"))?;
    if !quiet {
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "z_key  n_z  f_value  residual_mean").ok();
        for e in report.entries.iter().take(args.top) {
            writeln!(
                stdout,
                "{:>5}  {:>3}  {:+.6}  {:+.6}",
                e.z_key, e.n_z, e.f_value, e.residual_mean
            )
            .ok();
        }
        writeln!(stdout, "aggregate E[f^2] = {:.6e} over n = {}", report.aggregate, report.total_n)
            .ok();
    }
    Ok(report)
}
