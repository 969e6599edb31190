//! No-regret solver for the conditional-moment game.
//!
//! One iteration: the multiplier plays an exact best response (or, for
//! experiments, a few gradient ascent steps), the payoff and h-gradient are
//! recorded, and the h-player takes an online-gradient-descent or
//! follow-the-regularized-leader step, projected back onto its weight ball.
//! The loop stops when the recorded payoff falls to the configured
//! threshold; the returned best iterate is the minimum over recorded
//! iterations, which is never worse than the running average.
//!
//! A constrained variant, [`solve_ivanov`], drives the conditional moment
//! slack below a budget `kappa` by rescaling the moment term with a growing
//! penalty and re-solving, keeping the inner game structure intact.

use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::RngHandle;
use crate::error::{CmmError, Result};
use crate::features::{project_in_place, FeatureMap, InputSide, ParamFunction, DEFAULT_RADIUS};
use crate::game::ReLaGame;

/// Abort threshold for the payoff magnitude.
const DIVERGENCE_LIMIT: f64 = 1e12;
/// Gradient-norm floor used when auto-tuning the OGD constant.
const TINY_NORM: f64 = 1e-12;

/// Update rule for the `h` player.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HUpdate {
    /// Online gradient descent with step schedule `c / sqrt(t)`. When `c`
    /// is absent it is tuned from observed gradient norms: set at t = 1
    /// from the first gradient, re-estimated once at t = 10 from the max
    /// norm seen so far.
    Ogd { c: Option<f64> },
    /// Follow the regularized leader with an l2 regularizer: the iterate is
    /// `-(1/reg_strength) * sum of past gradients`, projected. Equivalent
    /// to lazy constant-step descent while the ball constraint is slack.
    Ftrl { reg_strength: f64 },
}

impl Default for HUpdate {
    fn default() -> Self {
        HUpdate::Ogd { c: None }
    }
}

/// Update rule for the `f` player. The best response is the algorithm;
/// the gradient variant exists for stochastic-gradient experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FUpdate {
    #[default]
    BestResponse,
    Gradient { steps_per_iter: usize, rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Stop once the recorded payoff is at or below this.
    pub epsilon: f64,
    pub max_iters: usize,
    pub h_update: HUpdate,
    pub f_update: FUpdate,
    pub seed: u64,
    /// Gradient minibatch size; full batch when absent. The payoff and the
    /// best response stay full batch either way.
    pub minibatch: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_iters: 100_000,
            h_update: HUpdate::default(),
            f_update: FUpdate::default(),
            seed: 0,
            minibatch: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(CmmError::InvalidField {
                field: "epsilon",
                message: "must be finite and positive".into(),
            });
        }
        if self.max_iters == 0 {
            return Err(CmmError::InvalidField {
                field: "max_iters",
                message: "must be at least 1".into(),
            });
        }
        match self.h_update {
            HUpdate::Ogd { c: Some(c) } if !(c.is_finite() && c > 0.0) => {
                return Err(CmmError::InvalidField {
                    field: "c",
                    message: "must be finite and positive".into(),
                })
            }
            HUpdate::Ftrl { reg_strength } if !(reg_strength.is_finite() && reg_strength > 0.0) => {
                return Err(CmmError::InvalidField {
                    field: "reg_strength",
                    message: "must be finite and positive".into(),
                })
            }
            _ => {}
        }
        if let FUpdate::Gradient { steps_per_iter, rate } = self.f_update {
            if steps_per_iter == 0 {
                return Err(CmmError::InvalidField {
                    field: "steps_per_iter",
                    message: "must be at least 1".into(),
                });
            }
            if !(rate.is_finite() && rate > 0.0) {
                return Err(CmmError::InvalidField {
                    field: "rate",
                    message: "must be finite and positive".into(),
                });
            }
        }
        if let Some(m) = self.minibatch {
            if m == 0 {
                return Err(CmmError::InvalidField {
                    field: "minibatch",
                    message: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }
}

/// Outer-loop settings for the slack-constrained solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvanovConfig {
    /// Budget on the aggregate squared conditional residual means.
    pub kappa: f64,
    #[serde(default = "default_penalty_init")]
    pub penalty_init: f64,
    #[serde(default = "default_penalty_growth")]
    pub penalty_growth: f64,
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
    #[serde(default = "default_ivanov_tolerance")]
    pub tolerance: f64,
}

fn default_penalty_init() -> f64 {
    1.0
}
fn default_penalty_growth() -> f64 {
    10.0
}
fn default_outer_iters() -> usize {
    8
}
fn default_ivanov_tolerance() -> f64 {
    1e-3
}

impl Default for IvanovConfig {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            penalty_init: default_penalty_init(),
            penalty_growth: default_penalty_growth(),
            outer_iters: default_outer_iters(),
            tolerance: default_ivanov_tolerance(),
        }
    }
}

impl IvanovConfig {
    pub fn with_kappa(kappa: f64) -> Self {
        Self { kappa, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(CmmError::InvalidField {
                field: "kappa",
                message: "must be finite and nonnegative".into(),
            });
        }
        if !(self.penalty_init.is_finite() && self.penalty_init > 0.0) {
            return Err(CmmError::InvalidField {
                field: "penalty_init",
                message: "must be finite and positive".into(),
            });
        }
        if !(self.penalty_growth.is_finite() && self.penalty_growth > 1.0) {
            return Err(CmmError::InvalidField {
                field: "penalty_growth",
                message: "must be greater than 1".into(),
            });
        }
        if self.outer_iters == 0 {
            return Err(CmmError::InvalidField {
                field: "outer_iters",
                message: "must be at least 1".into(),
            });
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(CmmError::InvalidField {
                field: "tolerance",
                message: "must be finite and positive".into(),
            });
        }
        Ok(())
    }
}

/// Slack budget `|Z| / N` for a discrete instrument with `z_cardinality`
/// bins observed over `n` samples.
pub fn kappa_of_n(z_cardinality: usize, n: usize) -> f64 {
    z_cardinality as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Threshold,
    MaxIters,
}

/// One solver iteration: the payoff at the played pair and the norm of the
/// h-gradient used for the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: usize,
    pub payoff: f64,
    pub grad_norm: f64,
}

/// Full run history. `best_h` is the recorded iterate with the lowest
/// payoff (earliest on ties); `final_h` is the iterate at the stopping
/// point. Weight snapshots are kept at power-of-two iterations plus the
/// final one.
#[derive(Debug, Clone)]
pub struct GameTrace {
    pub records: Vec<IterRecord>,
    pub checkpoints: Vec<(usize, ParamFunction)>,
    pub best_t: usize,
    pub best_payoff: f64,
    pub best_h: ParamFunction,
    pub final_h: ParamFunction,
    pub stopped_reason: StopReason,
    radius: f64,
    regret_const_sum: f64,
    regret_cross_sum: Vec<f64>,
    regret_valid: bool,
}

impl GameTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean recorded payoff.
    pub fn average_payoff(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.records.iter().map(|r| r.payoff).sum::<f64>() / n
    }

    /// Gap between the average played payoff and the best average payoff
    /// any fixed `h` in the ball could have achieved against the played
    /// multiplier sequence. Available only for full-batch unregularized
    /// runs, where the per-iteration loss is linear in the h-weights.
    pub fn empirical_regret(&self) -> Option<f64> {
        if !self.regret_valid || self.records.is_empty() {
            return None;
        }
        let n = self.records.len() as f64;
        let avg_const = self.regret_const_sum / n;
        let cross_norm =
            self.regret_cross_sum.iter().map(|v| v * v).sum::<f64>().sqrt() / n;
        let best_fixed = avg_const - self.radius * cross_norm;
        Some(self.average_payoff() - best_fixed)
    }

    /// CSV with header `t,payoff,grad_norm`, one row per iteration.
    pub fn to_csv_writer<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "payoff", "grad_norm"])?;
        for r in &self.records {
            w.write_record([r.t.to_string(), r.payoff.to_string(), r.grad_norm.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_csv_writer(f)
    }

    /// Reads back the per-iteration records written by `to_csv_writer`.
    pub fn records_from_csv_reader<R: io::Read>(input: R) -> Result<Vec<IterRecord>> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        if rdr.headers()?.iter().ne(["t", "payoff", "grad_norm"]) {
            return Err(CmmError::Parse("unexpected trace header".into()));
        }
        let mut records = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| CmmError::Parse(format!("row {row}: {e}")))?;
            let t = rec[0]
                .parse()
                .map_err(|_| CmmError::Parse(format!("row {row}: bad t")))?;
            let payoff = rec[1]
                .parse()
                .map_err(|_| CmmError::Parse(format!("row {row}: bad payoff")))?;
            let grad_norm = rec[2]
                .parse()
                .map_err(|_| CmmError::Parse(format!("row {row}: bad grad_norm")))?;
            records.push(IterRecord { t, payoff, grad_norm });
        }
        Ok(records)
    }

    pub fn records_from_csv_path<P: AsRef<Path>>(path: P) -> Result<Vec<IterRecord>> {
        let f = std::fs::File::open(path)?;
        Self::records_from_csv_reader(f)
    }
}

/// One OGD step: `project(weights - (c / sqrt(t)) * grad)`.
pub fn ogd_step(h: &ParamFunction, grad: &[f64], t: usize, c: f64) -> Result<ParamFunction> {
    if t == 0 {
        return Err(CmmError::InvalidField { field: "t", message: "must be at least 1".into() });
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(CmmError::InvalidField {
            field: "c",
            message: "must be finite and positive".into(),
        });
    }
    if grad.len() != h.weights().len() {
        return Err(CmmError::DimensionMismatch(format!(
            "gradient has {} entries, weights {}",
            grad.len(),
            h.weights().len()
        )));
    }
    let step = c / (t as f64).sqrt();
    let mut w: Vec<f64> = h
        .weights()
        .iter()
        .zip(grad)
        .map(|(wi, gi)| wi - step * gi)
        .collect();
    project_in_place(&mut w, h.radius());
    ParamFunction::with_weights(h.features().clone(), w, h.radius())
}

/// One FTRL step from the accumulated gradient history:
/// `project(-(1/reg_strength) * grad_sum)`. The template supplies the
/// class and radius; its weights are ignored (the leader replays history
/// from the origin).
pub fn ftrl_step(
    template: &ParamFunction,
    grad_sum: &[f64],
    reg_strength: f64,
) -> Result<ParamFunction> {
    if !(reg_strength.is_finite() && reg_strength > 0.0) {
        return Err(CmmError::InvalidField {
            field: "reg_strength",
            message: "must be finite and positive".into(),
        });
    }
    if grad_sum.len() != template.weights().len() {
        return Err(CmmError::DimensionMismatch(format!(
            "gradient sum has {} entries, weights {}",
            grad_sum.len(),
            template.weights().len()
        )));
    }
    let mut w: Vec<f64> = grad_sum.iter().map(|g| -g / reg_strength).collect();
    project_in_place(&mut w, template.radius());
    ParamFunction::with_weights(template.features().clone(), w, template.radius())
}

/// Multiplier representation inside the prefeaturized core: a dense
/// feature matrix, or just the bin key per sample for one-hot classes
/// (keeps the best response a grouped mean instead of a matrix solve).
#[derive(Debug, Clone)]
pub(crate) enum FRep {
    Tabular { keys: Vec<usize>, cardinality: usize },
    Dense(DMatrix<f64>),
}

impl FRep {
    fn dim(&self) -> usize {
        match self {
            FRep::Tabular { cardinality, .. } => *cardinality,
            FRep::Dense(m) => m.ncols(),
        }
    }
}

/// Prefeaturized game: `psi` rows are the h-side feature vectors (for the
/// plain game, features of x; residuals are `y - psi . theta`), `w` the
/// normalized sample weights. `moment_scale` multiplies the moment part of
/// the payoff and its gradients; the best response is invariant to it.
#[derive(Debug, Clone)]
pub(crate) struct GameCore {
    psi: DMatrix<f64>,
    y: DVector<f64>,
    w: DVector<f64>,
    f_rep: FRep,
    alpha: f64,
    ridge: f64,
    pub(crate) moment_scale: f64,
}

impl GameCore {
    pub(crate) fn from_rela(game: &ReLaGame) -> Result<Self> {
        let data = game.data();
        let n = data.n();
        let dh = game.h_class().output_dim();
        let mut psi_rows = Vec::with_capacity(n * dh);
        for s in data.samples() {
            psi_rows.extend(game.h_class().featurize(&s.x)?);
        }
        let psi = DMatrix::from_row_iterator(n, dh, psi_rows.into_iter());
        let y = DVector::from_iterator(n, data.samples().iter().map(|s| s.y));
        let w = DVector::from_iterator(n, data.weights().iter().copied());
        let f_rep = if game.f_class().is_tabular() {
            let mut keys = Vec::with_capacity(n);
            for s in data.samples() {
                keys.push(game.f_class().tabular_z_key(s)?);
            }
            FRep::Tabular { keys, cardinality: game.f_class().output_dim() }
        } else {
            let df = game.f_class().output_dim();
            let mut rows = Vec::with_capacity(n * df);
            for s in data.samples() {
                rows.extend(game.f_class().featurize_side(s, InputSide::Z)?);
            }
            FRep::Dense(DMatrix::from_row_iterator(n, df, rows.into_iter()))
        };
        Ok(Self {
            psi,
            y,
            w,
            f_rep,
            alpha: game.anchor_coeff(),
            ridge: game.f_ridge(),
            moment_scale: 1.0,
        })
    }

    pub(crate) fn from_parts(
        psi: DMatrix<f64>,
        y: DVector<f64>,
        w: DVector<f64>,
        f_rep: FRep,
        ridge: f64,
    ) -> Self {
        let n = psi.nrows();
        debug_assert_eq!(y.len(), n);
        debug_assert_eq!(w.len(), n);
        if let FRep::Tabular { keys, .. } = &f_rep {
            debug_assert_eq!(keys.len(), n);
        }
        Self { psi, y, w, f_rep, alpha: 0.0, ridge, moment_scale: 1.0 }
    }

    pub(crate) fn n(&self) -> usize {
        self.psi.nrows()
    }

    pub(crate) fn dh(&self) -> usize {
        self.psi.ncols()
    }

    fn df(&self) -> usize {
        self.f_rep.dim()
    }

    fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.psi * theta
    }

    fn f_values(&self, theta_f: &DVector<f64>) -> DVector<f64> {
        match &self.f_rep {
            FRep::Tabular { keys, .. } => {
                DVector::from_iterator(keys.len(), keys.iter().map(|&k| theta_f[k]))
            }
            FRep::Dense(phi) => phi * theta_f,
        }
    }

    fn payoff_at(&self, theta: &DVector<f64>, fv: &DVector<f64>) -> f64 {
        let r = self.residuals(theta);
        let mut moment = 0.0;
        let mut anchor = 0.0;
        for i in 0..self.n() {
            let wi = self.w[i];
            moment += wi * (2.0 * r[i] * fv[i] - fv[i] * fv[i]);
            if self.alpha > 0.0 {
                anchor += wi * r[i] * r[i];
            }
        }
        self.moment_scale * moment + self.alpha * anchor
    }

    fn grad_h(&self, theta: &DVector<f64>, fv: &DVector<f64>) -> DVector<f64> {
        let mut coef = DVector::zeros(self.n());
        let r = self.residuals(theta);
        for i in 0..self.n() {
            let mut c = -2.0 * self.moment_scale * fv[i];
            if self.alpha > 0.0 {
                c += 2.0 * self.alpha * (-r[i]);
            }
            coef[i] = self.w[i] * c;
        }
        self.psi.tr_mul(&coef)
    }

    fn grad_h_minibatch(
        &self,
        theta: &DVector<f64>,
        fv: &DVector<f64>,
        picks: &[usize],
    ) -> DVector<f64> {
        let mut g = DVector::zeros(self.dh());
        for &i in picks {
            let hv = self.psi.row(i).dot(&theta.transpose());
            let mut c = -2.0 * self.moment_scale * fv[i];
            if self.alpha > 0.0 {
                c += 2.0 * self.alpha * (hv - self.y[i]);
            }
            g.axpy(c, &self.psi.row(i).transpose(), 1.0);
        }
        g / picks.len() as f64
    }

    fn grad_f(&self, theta: &DVector<f64>, theta_f: &DVector<f64>) -> DVector<f64> {
        let r = self.residuals(theta);
        let fv = self.f_values(theta_f);
        match &self.f_rep {
            FRep::Tabular { keys, cardinality } => {
                let mut g = DVector::zeros(*cardinality);
                for i in 0..self.n() {
                    g[keys[i]] += 2.0 * self.moment_scale * self.w[i] * (r[i] - fv[i]);
                }
                g
            }
            FRep::Dense(phi) => {
                let mut coef = DVector::zeros(self.n());
                for i in 0..self.n() {
                    coef[i] = 2.0 * self.moment_scale * self.w[i] * (r[i] - fv[i]);
                }
                phi.tr_mul(&coef)
            }
        }
    }

    fn best_response(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.residuals(theta);
        match &self.f_rep {
            FRep::Tabular { keys, cardinality } => {
                let mut num = DVector::<f64>::zeros(*cardinality);
                let mut den = DVector::<f64>::zeros(*cardinality);
                for i in 0..self.n() {
                    num[keys[i]] += self.w[i] * r[i];
                    den[keys[i]] += self.w[i];
                }
                let mut out = DVector::zeros(*cardinality);
                for k in 0..*cardinality {
                    out[k] = if den[k] > 0.0 || self.ridge > 0.0 {
                        num[k] / (den[k] + self.ridge)
                    } else {
                        0.0
                    };
                }
                Ok(out)
            }
            FRep::Dense(phi) => {
                let mut wphi = phi.clone();
                for (i, mut row) in wphi.row_iter_mut().enumerate() {
                    row *= self.w[i];
                }
                let mut gram = phi.tr_mul(&wphi);
                let wr = DVector::from_iterator(
                    self.n(),
                    (0..self.n()).map(|i| self.w[i] * r[i]),
                );
                let cross = phi.tr_mul(&wr);
                for i in 0..gram.nrows() {
                    gram[(i, i)] += self.ridge;
                }
                match gram.cholesky() {
                    Some(ch) => Ok(ch.solve(&cross)),
                    None => Err(CmmError::SingularGram),
                }
            }
        }
    }

    /// Unscaled moment payoff at the exact best response to `theta`. Over
    /// a tabular class with no ridge this is the aggregate squared
    /// conditional residual mean.
    #[cfg(test)]
    pub(crate) fn value_at_best_response(&self, theta: &DVector<f64>) -> Result<f64> {
        let f = self.best_response(theta)?;
        let fv = self.f_values(&f);
        let r = self.residuals(theta);
        let mut v = 0.0;
        for i in 0..self.n() {
            v += self.w[i] * (2.0 * r[i] * fv[i] - fv[i] * fv[i]);
        }
        Ok(v)
    }
}

/// Raw run output with plain weight vectors; wrapped into a [`GameTrace`]
/// once the caller's function class is known.
#[derive(Debug, Clone)]
pub(crate) struct CoreTrace {
    pub(crate) records: Vec<IterRecord>,
    pub(crate) checkpoints: Vec<(usize, Vec<f64>)>,
    pub(crate) best_t: usize,
    pub(crate) best_payoff: f64,
    pub(crate) best_w: Vec<f64>,
    pub(crate) final_w: Vec<f64>,
    pub(crate) stopped_reason: StopReason,
    radius: f64,
    regret_const_sum: f64,
    regret_cross_sum: Vec<f64>,
    regret_valid: bool,
}

impl CoreTrace {
    pub(crate) fn into_trace(self, class: FeatureMap, radius: f64) -> Result<GameTrace> {
        let wrap = |w: Vec<f64>| ParamFunction::with_weights(class.clone(), w, radius);
        let checkpoints = self
            .checkpoints
            .into_iter()
            .map(|(t, w)| Ok((t, wrap(w)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GameTrace {
            records: self.records,
            checkpoints,
            best_t: self.best_t,
            best_payoff: self.best_payoff,
            best_h: wrap(self.best_w)?,
            final_h: wrap(self.final_w)?,
            stopped_reason: self.stopped_reason,
            radius: self.radius,
            regret_const_sum: self.regret_const_sum,
            regret_cross_sum: self.regret_cross_sum,
            regret_valid: self.regret_valid,
        })
    }
}

pub(crate) fn run_core(
    core: &GameCore,
    cfg: &SolverConfig,
    init: &[f64],
    radius: f64,
) -> Result<CoreTrace> {
    cfg.validate()?;
    if init.len() != core.dh() {
        return Err(CmmError::DimensionMismatch(format!(
            "initial weights have {} entries, h class needs {}",
            init.len(),
            core.dh()
        )));
    }
    let mut theta = DVector::from_column_slice(init);
    project_in_place(theta.as_mut_slice(), radius);

    let mut records = Vec::with_capacity(cfg.max_iters.min(200_000));
    let mut checkpoints: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut best_t = 0usize;
    let mut best_payoff = f64::INFINITY;
    let mut best_w = theta.as_slice().to_vec();

    let mut grad_sum = DVector::<f64>::zeros(core.dh());
    let mut max_gnorm = 0.0f64;
    let mut auto_c = 0.0f64;

    let mut f_theta = DVector::<f64>::zeros(core.df());

    let mut rng = RngHandle::new(cfg.seed).rng();
    let sampler = match cfg.minibatch {
        Some(_) => Some(WeightedIndex::new(core.w.iter().copied()).map_err(|e| {
            CmmError::InvalidField { field: "weights", message: e.to_string() }
        })?),
        None => None,
    };

    let regret_valid = core.alpha == 0.0 && cfg.minibatch.is_none();
    let mut regret_const_sum = 0.0f64;
    let mut regret_cross_sum = DVector::<f64>::zeros(core.dh());

    let stopped_reason;
    let mut t = 1usize;
    loop {
        match cfg.f_update {
            FUpdate::BestResponse => {
                f_theta = core.best_response(&theta)?;
            }
            FUpdate::Gradient { steps_per_iter, rate } => {
                for _ in 0..steps_per_iter {
                    let gf = core.grad_f(&theta, &f_theta);
                    f_theta.axpy(rate, &gf, 1.0);
                    project_in_place(f_theta.as_mut_slice(), DEFAULT_RADIUS);
                }
            }
        }
        let fv = core.f_values(&f_theta);
        let payoff = core.payoff_at(&theta, &fv);
        if !payoff.is_finite() || payoff.abs() > DIVERGENCE_LIMIT {
            return Err(CmmError::Divergence);
        }
        let grad = match (&sampler, cfg.minibatch) {
            (Some(dist), Some(m)) => {
                let picks: Vec<usize> = (0..m).map(|_| dist.sample(&mut rng)).collect();
                core.grad_h_minibatch(&theta, &fv, &picks)
            }
            _ => core.grad_h(&theta, &fv),
        };
        let gnorm = grad.norm();
        if !gnorm.is_finite() {
            return Err(CmmError::Divergence);
        }

        records.push(IterRecord { t, payoff, grad_norm: gnorm });
        if payoff < best_payoff {
            best_payoff = payoff;
            best_t = t;
            best_w = theta.as_slice().to_vec();
        }
        if t.is_power_of_two() {
            checkpoints.push((t, theta.as_slice().to_vec()));
        }
        if regret_valid {
            // Loss at iteration t is linear in theta: L_t(θ) = c_t - θ·x_t
            // with x_t = -grad; recover c_t from the played payoff.
            regret_const_sum += payoff - theta.dot(&grad);
            regret_cross_sum -= &grad;
        }

        if payoff <= cfg.epsilon {
            stopped_reason = StopReason::Threshold;
            break;
        }
        if t == cfg.max_iters {
            stopped_reason = StopReason::MaxIters;
            break;
        }

        match cfg.h_update {
            HUpdate::Ogd { c } => {
                max_gnorm = max_gnorm.max(gnorm);
                let c_eff = match c {
                    Some(v) => v,
                    None => {
                        if t == 1 || t == 10 {
                            auto_c = radius / max_gnorm.max(TINY_NORM).sqrt();
                        }
                        auto_c
                    }
                };
                let step = c_eff / (t as f64).sqrt();
                theta.axpy(-step, &grad, 1.0);
            }
            HUpdate::Ftrl { reg_strength } => {
                grad_sum += &grad;
                theta = &grad_sum * (-1.0 / reg_strength);
            }
        }
        project_in_place(theta.as_mut_slice(), radius);
        t += 1;
    }

    if checkpoints.last().map(|(ct, _)| *ct) != Some(t) {
        checkpoints.push((t, theta.as_slice().to_vec()));
    }
    Ok(CoreTrace {
        records,
        checkpoints,
        best_t,
        best_payoff,
        best_w,
        final_w: theta.as_slice().to_vec(),
        stopped_reason,
        radius,
        regret_const_sum,
        regret_cross_sum: regret_cross_sum.as_slice().to_vec(),
        regret_valid,
    })
}

/// Runs the no-regret loop from `h0`: exact best-response multiplier,
/// recorded payoff, gradient step on `h`, projection onto the `h0` ball.
/// Stops at the threshold or the iteration cap; errors out if the payoff
/// leaves `[-1e12, 1e12]`.
pub fn run_no_regret_game(
    game: &ReLaGame,
    cfg: &SolverConfig,
    h0: &ParamFunction,
) -> Result<GameTrace> {
    if h0.features() != game.h_class() {
        return Err(CmmError::DimensionMismatch(
            "initial h does not belong to the game's h class".into(),
        ));
    }
    let core = GameCore::from_rela(game)?;
    let raw = run_core(&core, cfg, h0.weights(), h0.radius())?;
    raw.into_trace(game.h_class().clone(), h0.radius())
}

/// Minimizes the game payoff subject to the conditional slack budget
/// `sum_z P(z) mean_z^2 <= kappa`, by rescaling the moment term with a
/// growing penalty and re-solving from the previous best iterate. Starts
/// from zero weights in the default (effectively unconstrained) ball.
/// Returns the accepted iterate, the trace of the inner run that produced
/// it, and its achieved slack. Requires discrete `z`.
///
/// The step size is rescaled with the penalty (gradients grow linearly in
/// it), so each outer round replays the unit-penalty dynamics against the
/// tighter effective threshold `epsilon / rho`; growing the penalty never
/// destabilizes the inner runs.
pub fn solve_ivanov(
    game: &ReLaGame,
    icfg: &IvanovConfig,
    cfg: &SolverConfig,
) -> Result<(ParamFunction, GameTrace, f64)> {
    icfg.validate()?;
    cfg.validate()?;
    let mut core = GameCore::from_rela(game)?;
    let mut init = vec![0.0; game.h_class().output_dim()];
    let mut rho = icfg.penalty_init;
    let mut best_slack = f64::INFINITY;
    for _ in 0..icfg.outer_iters {
        core.moment_scale = rho;
        let mut inner = cfg.clone();
        inner.h_update = match cfg.h_update {
            HUpdate::Ftrl { reg_strength } => {
                HUpdate::Ftrl { reg_strength: reg_strength * rho }
            }
            HUpdate::Ogd { c: Some(c) } => HUpdate::Ogd { c: Some(c / rho) },
            // Auto-tuned OGD calibrates from observed gradient norms.
            auto => auto,
        };
        if let FUpdate::Gradient { steps_per_iter, rate } = cfg.f_update {
            inner.f_update = FUpdate::Gradient { steps_per_iter, rate: rate / rho };
        }
        let raw = run_core(&core, &inner, &init, DEFAULT_RADIUS)?;
        let h = ParamFunction::with_weights(
            game.h_class().clone(),
            raw.best_w.clone(),
            DEFAULT_RADIUS,
        )?;
        let slack = game.conditional_mse(&h)?;
        if slack <= icfg.kappa + icfg.tolerance {
            let trace = raw.into_trace(game.h_class().clone(), DEFAULT_RADIUS)?;
            return Ok((h, trace, slack));
        }
        best_slack = best_slack.min(slack);
        init = raw.best_w;
        rho *= icfg.penalty_growth;
    }
    Err(CmmError::InfeasibleSlack { best_slack, kappa: icfg.kappa })
}

/// Running payoff average and a log-log slope fit of its excess over the
/// terminal average.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    /// `(t, running average payoff up to t)` per recorded iteration.
    pub avg_payoff_curve: Vec<(usize, f64)>,
    pub slope_estimate: f64,
    /// The excess was zero or too flat to fit; slope is reported as 0.
    pub degenerate: bool,
}

const REGRET_BURN_IN: usize = 10;
const REGRET_MIN_POINTS: usize = 5;

/// Fits the decay rate of the running average payoff: least squares on
/// `ln(avg_t - avg_T)` vs `ln t` over post-burn-in iterations with strictly
/// positive excess. Needs at least 10 records; a flat curve is flagged
/// degenerate with slope 0.
pub fn regret_diagnostic(trace: &GameTrace) -> Result<RegretReport> {
    regret_diagnostic_from_records(&trace.records)
}

pub fn regret_diagnostic_from_records(records: &[IterRecord]) -> Result<RegretReport> {
    if records.len() < REGRET_BURN_IN {
        return Err(CmmError::TraceTooShort);
    }
    let mut curve = Vec::with_capacity(records.len());
    let mut sum = 0.0;
    for (i, r) in records.iter().enumerate() {
        sum += r.payoff;
        curve.push((r.t, sum / (i + 1) as f64));
    }
    let terminal = curve.last().unwrap().1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(t, avg) in curve.iter().take(curve.len() - 1) {
        let d = avg - terminal;
        if t >= REGRET_BURN_IN && d > 0.0 {
            xs.push((t as f64).ln());
            ys.push(d.ln());
        }
    }
    if xs.len() < REGRET_MIN_POINTS {
        return Ok(RegretReport { avg_payoff_curve: curve, slope_estimate: 0.0, degenerate: true });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return Ok(RegretReport { avg_payoff_curve: curve, slope_estimate: 0.0, degenerate: true });
    }
    Ok(RegretReport {
        avg_payoff_curve: curve,
        slope_estimate: sxy / sxx,
        degenerate: false,
    })
}
