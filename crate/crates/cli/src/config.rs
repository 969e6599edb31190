//! Experiment configuration: one TOML file per run, with a `kind` tag
//! selecting the experiment and per-kind blocks for the scenario and
//! solver. Parsing materializes every default, so the resolved echo
//! written next to the results is sufficient to reproduce the run.

use std::path::{Path, PathBuf};

use cmm_core::ivr::{LinearIvScenario, NonlinearIvScenario};
use cmm_core::solver::HUpdate;
use cmm_core::{CmmError, IvanovConfig, Result, SolverConfig};
use serde::{Deserialize, Serialize};

pub const KINDS: [&str; 6] = [
    "ivr-linear",
    "ivr-nonlinear",
    "bellman-eval",
    "bellman-improve",
    "bias-demo",
    "ivanov",
];

fn default_radius() -> f64 {
    1e4
}

fn default_h_degree() -> usize {
    2
}

fn default_rounds() -> usize {
    10
}

fn default_tie_tol() -> f64 {
    0.03
}

fn default_trials() -> usize {
    10_000
}

fn default_bias_h() -> Vec<f64> {
    vec![0.2, 0.8, 0.6]
}

fn default_ivanov_h_degree() -> usize {
    1
}

fn default_nonlinear_scenario() -> NonlinearIvScenario {
    NonlinearIvScenario { n: 8_000, discrete_z: Some(10), ..NonlinearIvScenario::default() }
}

fn default_bias_scenario() -> NonlinearIvScenario {
    NonlinearIvScenario { n: 300, discrete_z: Some(4), ..NonlinearIvScenario::default() }
}

fn default_ivanov_scenario() -> NonlinearIvScenario {
    NonlinearIvScenario {
        h_star: cmm_core::ivr::HStar::Quadratic { a: 0.0, b: 2.0, c: 0.0 },
        n: 1_000,
        discrete_z: Some(10),
        ..NonlinearIvScenario::default()
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("cmm-out")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// How to turn the MDP into transition tuples; sampled mode draws with the
/// run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DatasetBlock {
    #[default]
    Exact,
    Sampled {
        n: usize,
    },
}

/// Outer-loop settings for the constrained solve, all optional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterBlock {
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub outer_iters: usize,
    pub tolerance: f64,
}

impl Default for OuterBlock {
    fn default() -> Self {
        let base = IvanovConfig::default();
        Self {
            penalty_init: base.penalty_init,
            penalty_growth: base.penalty_growth,
            outer_iters: base.outer_iters,
            tolerance: base.tolerance,
        }
    }
}

impl OuterBlock {
    pub fn with_kappa(&self, kappa: f64) -> IvanovConfig {
        IvanovConfig {
            kappa,
            penalty_init: self.penalty_init,
            penalty_growth: self.penalty_growth,
            outer_iters: self.outer_iters,
            tolerance: self.tolerance,
        }
    }
}

/// The experiment selector plus its kind-specific settings. `scenario`
/// seeds are placeholders: each run replaces them with the entries of the
/// top-level `seeds` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentSpec {
    /// Linear IV benchmark: game slope vs 2SLS and least squares.
    IvrLinear {
        #[serde(default)]
        scenario: LinearIvScenario,
        #[serde(default = "default_radius")]
        radius: f64,
    },
    /// Nonlinear IV with a discrete instrument: game vs the plug-in
    /// two-stage baseline.
    IvrNonlinear {
        #[serde(default = "default_nonlinear_scenario")]
        scenario: NonlinearIvScenario,
        #[serde(default = "default_h_degree")]
        h_degree: usize,
        #[serde(default = "default_radius")]
        radius: f64,
    },
    /// Policy evaluation on a tabular MDP (the shipped 4x4 gridworld when
    /// no file is given).
    BellmanEval {
        #[serde(default)]
        mdp_path: Option<PathBuf>,
        #[serde(default)]
        dataset: DatasetBlock,
        /// Action per state; defaults to `s mod n_actions`.
        #[serde(default)]
        policy: Option<Vec<usize>>,
        /// Overrides the MDP's discount.
        #[serde(default)]
        gamma: Option<f64>,
    },
    /// Greedy improvement loop against the value-iteration oracle.
    BellmanImprove {
        #[serde(default)]
        mdp_path: Option<PathBuf>,
        #[serde(default)]
        dataset: DatasetBlock,
        #[serde(default = "default_rounds")]
        rounds: usize,
        #[serde(default = "default_tie_tol")]
        tie_tol: f64,
        #[serde(default)]
        initial_policy: Option<Vec<usize>>,
        #[serde(default)]
        gamma: Option<f64>,
    },
    /// Single-sample gradient bias comparison at a fixed h.
    BiasDemo {
        #[serde(default = "default_bias_scenario")]
        scenario: NonlinearIvScenario,
        #[serde(default = "default_trials")]
        trials: usize,
        #[serde(default = "default_h_degree")]
        h_degree: usize,
        #[serde(default = "default_bias_h")]
        h_weights: Vec<f64>,
    },
    /// Slack-constrained solve against the data-driven budget |Z|/N.
    Ivanov {
        #[serde(default = "default_ivanov_scenario")]
        scenario: NonlinearIvScenario,
        /// Slack budget; defaults to |Z|/N.
        #[serde(default)]
        kappa: Option<f64>,
        #[serde(default = "default_ivanov_h_degree")]
        h_degree: usize,
        #[serde(default)]
        outer: OuterBlock,
    },
}

impl ExperimentSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ExperimentSpec::IvrLinear { .. } => "ivr-linear",
            ExperimentSpec::IvrNonlinear { .. } => "ivr-nonlinear",
            ExperimentSpec::BellmanEval { .. } => "bellman-eval",
            ExperimentSpec::BellmanImprove { .. } => "bellman-improve",
            ExperimentSpec::BiasDemo { .. } => "bias-demo",
            ExperimentSpec::Ivanov { .. } => "ivanov",
        }
    }

    fn default_for(kind: &str) -> Option<Self> {
        let spec = match kind {
            "ivr-linear" => ExperimentSpec::IvrLinear {
                scenario: LinearIvScenario::default(),
                radius: default_radius(),
            },
            "ivr-nonlinear" => ExperimentSpec::IvrNonlinear {
                scenario: default_nonlinear_scenario(),
                h_degree: default_h_degree(),
                radius: default_radius(),
            },
            "bellman-eval" => ExperimentSpec::BellmanEval {
                mdp_path: None,
                dataset: DatasetBlock::Exact,
                // Down the column, right along the bottom row: the optimal
                // policy for the default gridworld, so every state has a
                // nonzero value to compare. `none` means `s mod n_actions`.
                policy: Some(vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 3, 3, 3, 0]),
                gamma: None,
            },
            "bellman-improve" => ExperimentSpec::BellmanImprove {
                mdp_path: None,
                dataset: DatasetBlock::Exact,
                rounds: default_rounds(),
                tie_tol: default_tie_tol(),
                initial_policy: None,
                gamma: None,
            },
            "bias-demo" => ExperimentSpec::BiasDemo {
                scenario: default_bias_scenario(),
                trials: default_trials(),
                h_degree: default_h_degree(),
                h_weights: default_bias_h(),
            },
            "ivanov" => ExperimentSpec::Ivanov {
                scenario: default_ivanov_scenario(),
                kappa: None,
                h_degree: default_ivanov_h_degree(),
                outer: OuterBlock::default(),
            },
            _ => return None,
        };
        Some(spec)
    }

    /// Solver used when the config has no `[solver]` block; tuned for the
    /// default scenario of each kind (documented in the listing output).
    pub fn default_solver(&self) -> SolverConfig {
        let (epsilon, max_iters, reg) = match self {
            ExperimentSpec::IvrLinear { .. } => (1e-12, 60_000, 8.0),
            ExperimentSpec::IvrNonlinear { .. } => (1e-10, 40_000, 80.0),
            ExperimentSpec::BellmanEval { .. } | ExperimentSpec::BellmanImprove { .. } => {
                // reg 4.0 exceeds the curvature bound (1 + gamma)^2 for
                // one-hot value features, so it is stable for any MDP.
                (1e-10, 300_000, 4.0)
            }
            // The bias demo never runs the solver.
            ExperimentSpec::BiasDemo { .. } => return SolverConfig::default(),
            ExperimentSpec::Ivanov { .. } => (1e-6, 30_000, 8.0),
        };
        SolverConfig {
            epsilon,
            max_iters,
            h_update: HUpdate::Ftrl { reg_strength: reg },
            ..SolverConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let check_radius = |radius: f64| {
            if radius.is_finite() && radius > 0.0 {
                Ok(())
            } else {
                Err(CmmError::InvalidField {
                    field: "radius",
                    message: "must be finite and positive".into(),
                })
            }
        };
        let check_degree = |d: usize| {
            if (1..=8).contains(&d) {
                Ok(())
            } else {
                Err(CmmError::InvalidField {
                    field: "h_degree",
                    message: format!("{d} is outside 1..=8"),
                })
            }
        };
        let need_discrete = |sc: &NonlinearIvScenario| {
            sc.validate()?;
            if sc.discrete_z.is_none() {
                return Err(CmmError::InvalidField {
                    field: "discrete_z",
                    message: "this experiment needs a discrete instrument".into(),
                });
            }
            Ok(())
        };
        let check_gamma = |g: &Option<f64>| match g {
            Some(g) if !(g.is_finite() && (0.0..1.0).contains(g)) => {
                Err(CmmError::InvalidField {
                    field: "gamma",
                    message: format!("{g} is outside [0, 1)"),
                })
            }
            _ => Ok(()),
        };
        let check_dataset = |d: &DatasetBlock| match d {
            DatasetBlock::Sampled { n: 0 } => Err(CmmError::InvalidField {
                field: "n",
                message: "sampled dataset needs at least 1 draw".into(),
            }),
            _ => Ok(()),
        };
        match self {
            ExperimentSpec::IvrLinear { scenario, radius } => {
                scenario.validate()?;
                check_radius(*radius)
            }
            ExperimentSpec::IvrNonlinear { scenario, h_degree, radius } => {
                need_discrete(scenario)?;
                check_degree(*h_degree)?;
                check_radius(*radius)
            }
            ExperimentSpec::BellmanEval { dataset, gamma, .. } => {
                check_dataset(dataset)?;
                check_gamma(gamma)
            }
            ExperimentSpec::BellmanImprove { dataset, rounds, tie_tol, gamma, .. } => {
                check_dataset(dataset)?;
                check_gamma(gamma)?;
                if *rounds == 0 {
                    return Err(CmmError::InvalidField {
                        field: "rounds",
                        message: "must be at least 1".into(),
                    });
                }
                if !(tie_tol.is_finite() && *tie_tol >= 0.0) {
                    return Err(CmmError::InvalidField {
                        field: "tie_tol",
                        message: "must be finite and nonnegative".into(),
                    });
                }
                Ok(())
            }
            ExperimentSpec::BiasDemo { scenario, trials, h_degree, h_weights } => {
                need_discrete(scenario)?;
                check_degree(*h_degree)?;
                if *trials < 100 {
                    return Err(CmmError::InvalidField {
                        field: "trials",
                        message: "need at least 100 trials".into(),
                    });
                }
                if h_weights.len() != h_degree + 1 {
                    return Err(CmmError::InvalidField {
                        field: "h_weights",
                        message: format!(
                            "degree {h_degree} needs {} coefficients, got {}",
                            h_degree + 1,
                            h_weights.len()
                        ),
                    });
                }
                Ok(())
            }
            ExperimentSpec::Ivanov { scenario, kappa, h_degree, outer } => {
                need_discrete(scenario)?;
                check_degree(*h_degree)?;
                if let Some(k) = kappa {
                    if !(k.is_finite() && *k >= 0.0) {
                        return Err(CmmError::InvalidField {
                            field: "kappa",
                            message: "must be finite and nonnegative".into(),
                        });
                    }
                }
                outer.with_kappa(kappa.unwrap_or(0.0)).validate()
            }
        }
    }
}

/// A full run description: experiment spec, output directory, seed list,
/// and solver settings. The `solver` field is `None` only before
/// [`ExperimentConfig::resolve`]; resolved configs always carry it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub spec: ExperimentSpec,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub solver: Option<SolverConfig>,
}

impl ExperimentConfig {
    pub fn default_for_kind(kind: &str) -> Option<Self> {
        Some(
            Self {
                spec: ExperimentSpec::default_for(kind)?,
                out: default_out(),
                seeds: default_seeds(),
                solver: None,
            }
            .resolve(),
        )
    }

    /// Materializes every remaining default so the config echo reproduces
    /// the run exactly.
    pub fn resolve(mut self) -> Self {
        if self.solver.is_none() {
            self.solver = Some(self.spec.default_solver());
        }
        self
    }

    pub fn solver(&self) -> SolverConfig {
        self.solver.clone().unwrap_or_else(|| self.spec.default_solver())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CmmError::InvalidField {
                field: "seeds",
                message: "need at least one seed".into(),
            });
        }
        self.spec.validate()?;
        if let Some(solver) = &self.solver {
            solver.validate()?;
        }
        Ok(())
    }

    /// Parses a config, completing missing fields from the kind's defaults
    /// field by field: a partial `[scenario]` or `[solver]` block keeps the
    /// kind's documented values for whatever it does not mention.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value =
            text.parse().map_err(|e: toml::de::Error| CmmError::Parse(e.to_string()))?;
        let kind = user
            .get("kind")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CmmError::Parse("config needs a string `kind` field".into()))?;
        let defaults = Self::default_for_kind(kind).ok_or_else(|| {
            CmmError::Parse(format!("unknown experiment kind `{kind}`; one of: {}", KINDS.join(", ")))
        })?;
        let base = toml::Value::try_from(&defaults)
            .map_err(|e| CmmError::Parse(e.to_string()))?;
        merge_toml(base, user)
            .try_into()
            .map_err(|e: toml::de::Error| CmmError::Parse(e.to_string()))
    }

    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CmmError::Parse(e.to_string()))
    }
}

/// Recursive table merge, user values over defaults; arrays and scalars
/// are taken from the user wholesale. A table that switches a tagged
/// union's `kind`/`mode` replaces the default table entirely, so no stale
/// variant fields leak through.
fn merge_toml(default: toml::Value, user: toml::Value) -> toml::Value {
    match (default, user) {
        (toml::Value::Table(mut d), toml::Value::Table(u)) => {
            for tag in ["kind", "mode"] {
                if let (Some(dv), Some(uv)) = (d.get(tag), u.get(tag)) {
                    if dv != uv {
                        return toml::Value::Table(u);
                    }
                }
            }
            for (k, uv) in u {
                let merged = match d.remove(&k) {
                    Some(dv) => merge_toml(dv, uv),
                    None => uv,
                };
                d.insert(k, merged);
            }
            toml::Value::Table(d)
        }
        (_, user) => user,
    }
}

/// The `list-experiments` payload: every kind with its fully resolved
/// default config.
pub fn listing() -> String {
    let mut out = String::new();
    for kind in KINDS {
        let cfg = ExperimentConfig::default_for_kind(kind).expect("known kind");
        out.push_str(&format!("## {kind}\n"));
        out.push_str(&cfg.to_toml_string().expect("default config serializes"));
        out.push('\n');
    }
    out
}


impl ExperimentConfig {
    pub fn kind_name(&self) -> &'static str {
        self.spec.kind_name()
    }
}
