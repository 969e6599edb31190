//! The conditional-moment game.
//!
//! For a dataset of `(x, y, z)` triples, minimizing player `h` and
//! maximizing player `f` play the payoff
//!
//! ```text
//! L(h, f) = E[ 2 (y - h(x)) f(z) - f(z)^2 ]  (+ alpha * R(h))
//! ```
//!
//! where expectations are empirical over the dataset and `R` is an optional
//! ordinary-least-squares anchor `E[(h(x) - y)^2]`. The maximizer over `f`
//! within a linear class has a closed form (a ridge-regularized Gram solve);
//! for a one-hot class over discrete `z` with no ridge it is exactly the
//! conditional residual mean per bin, and the resulting payoff equals
//! `sum_z P(z) * mean_z^2`. That identity, the gradients, and a per-bin
//! slack report are the module's surface.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    conditional_residual_means, group_by_z, group_masses, Accumulator, Dataset,
};
use crate::error::{CmmError, Result};
use crate::features::{gram_and_cross, FeatureMap, InputSide, ParamFunction, DEFAULT_RADIUS};

/// Relative scale of the default ridge added to the multiplier Gram.
const DEFAULT_RIDGE_SCALE: f64 = 1e-8;

/// Optional regularizer on the `h` player.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HRegularizer {
    #[default]
    None,
    /// Adds `alpha * E[(h(x) - y)^2]` to the payoff.
    OlsAnchor,
}

/// Game instance: data plus the two function classes and regularization
/// settings. The `f_ridge` is resolved at construction; when not given it
/// defaults to `1e-8 * trace(Gram_f) / dim_f`, a scale-aware nudge that
/// keeps the best-response solve well posed.
#[derive(Debug, Clone)]
pub struct ReLaGame {
    data: Dataset,
    h_class: FeatureMap,
    f_class: FeatureMap,
    alpha: f64,
    h_regularizer: HRegularizer,
    f_ridge: f64,
}

impl ReLaGame {
    /// Unregularized game with the default multiplier ridge.
    pub fn new(data: Dataset, h_class: FeatureMap, f_class: FeatureMap) -> Result<Self> {
        Self::with_options(data, h_class, f_class, 0.0, HRegularizer::None, None)
    }

    pub fn with_options(
        data: Dataset,
        h_class: FeatureMap,
        f_class: FeatureMap,
        alpha: f64,
        h_regularizer: HRegularizer,
        f_ridge: Option<f64>,
    ) -> Result<Self> {
        h_class.validate()?;
        f_class.validate()?;
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(CmmError::InvalidField {
                field: "alpha",
                message: "must be finite and nonnegative".into(),
            });
        }
        if h_class.input_dim() != data.dx() {
            return Err(CmmError::DimensionMismatch(format!(
                "h class reads {} coordinates, data has dx={}",
                h_class.input_dim(),
                data.dx()
            )));
        }
        match &f_class {
            FeatureMap::TabularOnehot { cardinality } => match data.z_cardinality() {
                Some(k) if k == *cardinality => {}
                Some(k) => {
                    return Err(CmmError::DimensionMismatch(format!(
                        "tabular f class has {cardinality} bins, data has z_cardinality {k}"
                    )))
                }
                None => return Err(CmmError::NotDiscreteInZ),
            },
            other => {
                if other.input_dim() != data.dz() {
                    return Err(CmmError::DimensionMismatch(format!(
                        "f class reads {} coordinates, data has dz={}",
                        other.input_dim(),
                        data.dz()
                    )));
                }
            }
        }
        let f_ridge = match f_ridge {
            Some(r) => {
                if !r.is_finite() || r < 0.0 {
                    return Err(CmmError::InvalidField {
                        field: "f_ridge",
                        message: "must be finite and nonnegative".into(),
                    });
                }
                r
            }
            None => {
                // trace(Gram_f) = E[|phi_f(z)|^2]; one pass, no matrix.
                let mut acc = Accumulator::default();
                for (s, &w) in data.samples().iter().zip(data.weights()) {
                    let phi = f_class.featurize_side(s, InputSide::Z)?;
                    acc.add(w * phi.iter().map(|v| v * v).sum::<f64>());
                }
                DEFAULT_RIDGE_SCALE * acc.value() / f_class.output_dim() as f64
            }
        };
        Ok(Self { data, h_class, f_class, alpha, h_regularizer, f_ridge })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn h_class(&self) -> &FeatureMap {
        &self.h_class
    }

    pub fn f_class(&self) -> &FeatureMap {
        &self.f_class
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn h_regularizer(&self) -> HRegularizer {
        self.h_regularizer
    }

    pub fn f_ridge(&self) -> f64 {
        self.f_ridge
    }

    fn check_h(&self, h: &ParamFunction) -> Result<()> {
        if h.features() != &self.h_class {
            return Err(CmmError::DimensionMismatch(
                "h does not belong to the game's h class".into(),
            ));
        }
        Ok(())
    }

    fn check_f(&self, f: &ParamFunction) -> Result<()> {
        if f.features() != &self.f_class {
            return Err(CmmError::DimensionMismatch(
                "f does not belong to the game's f class".into(),
            ));
        }
        Ok(())
    }

    fn anchor_active(&self) -> bool {
        self.h_regularizer == HRegularizer::OlsAnchor && self.alpha > 0.0
    }

    /// Effective anchor coefficient: `alpha` when the anchor is configured,
    /// zero otherwise.
    pub(crate) fn anchor_coeff(&self) -> f64 {
        if self.anchor_active() {
            self.alpha
        } else {
            0.0
        }
    }

    /// Game payoff `E[2 (y - h(x)) f(z) - f(z)^2]`, plus the anchored term
    /// when configured.
    pub fn payoff(&self, h: &ParamFunction, f: &ParamFunction) -> Result<f64> {
        self.check_h(h)?;
        self.check_f(f)?;
        let mut acc = Accumulator::default();
        for (s, &w) in self.data.samples().iter().zip(self.data.weights()) {
            let r = s.y - h.eval(&s.x)?;
            let fv = f.eval_side(s, InputSide::Z)?;
            acc.add(w * (2.0 * r * fv - fv * fv));
        }
        let mut value = acc.value();
        if self.anchor_active() {
            value += self.alpha * self.ols_anchor_r(h)?;
        }
        Ok(value)
    }

    /// OLS anchor `R(h) = E[(h(x) - y)^2]`.
    pub fn ols_anchor_r(&self, h: &ParamFunction) -> Result<f64> {
        self.check_h(h)?;
        let mut acc = Accumulator::default();
        for (s, &w) in self.data.samples().iter().zip(self.data.weights()) {
            let d = h.eval(&s.x)? - s.y;
            acc.add(w * d * d);
        }
        Ok(acc.value())
    }

    /// Payoff gradient in the `h` weights:
    /// `E[-2 f(z) phi_h(x)]` plus `alpha * E[2 (h(x) - y) phi_h(x)]` when
    /// the anchor is active.
    pub fn grad_h(&self, h: &ParamFunction, f: &ParamFunction) -> Result<Vec<f64>> {
        self.check_h(h)?;
        self.check_f(f)?;
        let dim = self.h_class.output_dim();
        let mut acc = vec![Accumulator::default(); dim];
        let anchor = self.anchor_active();
        for (s, &w) in self.data.samples().iter().zip(self.data.weights()) {
            let phi = self.h_class.featurize(&s.x)?;
            let fv = f.eval_side(s, InputSide::Z)?;
            let mut coef = -2.0 * fv;
            if anchor {
                let hv = crate::features::dot(h.weights(), &phi);
                coef += self.alpha * 2.0 * (hv - s.y);
            }
            for (a, p) in acc.iter_mut().zip(&phi) {
                a.add(w * coef * p);
            }
        }
        Ok(acc.iter().map(|a| a.value()).collect())
    }

    /// Contribution of sample `idx` to `grad_h`, without its weight. Drawing
    /// `idx` proportional to the dataset weights makes this an unbiased
    /// single-sample estimator of [`ReLaGame::grad_h`].
    pub fn grad_h_sample(
        &self,
        h: &ParamFunction,
        f: &ParamFunction,
        idx: usize,
    ) -> Result<Vec<f64>> {
        self.check_h(h)?;
        self.check_f(f)?;
        let s = self.data.sample(idx);
        let phi = self.h_class.featurize(&s.x)?;
        let fv = f.eval_side(s, InputSide::Z)?;
        let mut coef = -2.0 * fv;
        if self.anchor_active() {
            let hv = crate::features::dot(h.weights(), &phi);
            coef += self.alpha * 2.0 * (hv - s.y);
        }
        Ok(phi.into_iter().map(|p| coef * p).collect())
    }

    /// Payoff gradient in the `f` weights:
    /// `E[2 (y - h(x) - f(z)) phi_f(z)]`.
    pub fn grad_f(&self, h: &ParamFunction, f: &ParamFunction) -> Result<Vec<f64>> {
        self.check_h(h)?;
        self.check_f(f)?;
        let dim = self.f_class.output_dim();
        let mut acc = vec![Accumulator::default(); dim];
        for (s, &w) in self.data.samples().iter().zip(self.data.weights()) {
            let phi = self.f_class.featurize_side(s, InputSide::Z)?;
            let r = s.y - h.eval(&s.x)?;
            let fv = crate::features::dot(f.weights(), &phi);
            let coef = 2.0 * (r - fv);
            for (a, p) in acc.iter_mut().zip(&phi) {
                a.add(w * coef * p);
            }
        }
        Ok(acc.iter().map(|a| a.value()).collect())
    }

    /// Exact maximizer of the payoff over the multiplier class:
    /// `(Gram + f_ridge I) w = E[(y - h(x)) phi_f(z)]`.
    ///
    /// For a tabular class with `f_ridge = 0` the solve is diagonal and the
    /// result equals the conditional residual means, with empty bins mapped
    /// to zero (their cross moment is exactly zero, so the minimal-norm
    /// response is zero there). A singular Gram in any other unridged case
    /// is an error.
    pub fn best_response_f(&self, h: &ParamFunction) -> Result<ParamFunction> {
        self.check_h(h)?;
        let weights = self.best_response_weights(h)?;
        ParamFunction::with_weights(self.f_class.clone(), weights, DEFAULT_RADIUS)
    }

    fn best_response_weights(&self, h: &ParamFunction) -> Result<Vec<f64>> {
        if self.f_class.is_tabular() {
            // Grouped weighted means; identical arithmetic to
            // conditional_residual_means so the two agree bit-for-bit.
            let groups = group_by_z(&self.data)?;
            let mut weights = vec![0.0; groups.cardinality()];
            for (z, idx) in groups.iter() {
                let mut num = Accumulator::default();
                let mut den = Accumulator::default();
                for &i in idx {
                    let s = self.data.sample(i);
                    let w = self.data.weight(i);
                    num.add(w * (s.y - h.eval(&s.x)?));
                    den.add(w);
                }
                let mass = den.value();
                weights[z] = if mass > 0.0 || self.f_ridge > 0.0 {
                    num.value() / (mass + self.f_ridge)
                } else {
                    0.0
                };
            }
            return Ok(weights);
        }
        let (mut gram, cross) = gram_and_cross(
            &self.data,
            &self.f_class,
            |s| s.y - h.eval(&s.x).unwrap_or(f64::NAN),
            InputSide::Z,
        )?;
        if cross.iter().any(|v| !v.is_finite()) {
            return Err(CmmError::DimensionMismatch(
                "h evaluation failed inside best response".into(),
            ));
        }
        let d = gram.nrows();
        for i in 0..d {
            gram[(i, i)] += self.f_ridge;
        }
        match gram.cholesky() {
            Some(chol) => Ok(chol.solve(&cross).iter().copied().collect()),
            None => Err(CmmError::SingularGram),
        }
    }

    /// Squared conditional residual means weighted by bin mass:
    /// `sum_z P(z) * mean_z(y - h(x))^2`. Requires discrete `z`.
    pub fn conditional_mse(&self, h: &ParamFunction) -> Result<f64> {
        self.check_h(h)?;
        let means = conditional_residual_means(&self.data, |x| {
            h.eval(x).unwrap_or(f64::NAN)
        })?;
        if means.iter().any(|m| !m.is_finite()) {
            return Err(CmmError::DimensionMismatch(
                "h evaluation failed inside conditional_mse".into(),
            ));
        }
        let groups = group_by_z(&self.data)?;
        let masses = group_masses(&self.data, &groups);
        let mut acc = Accumulator::default();
        for (m, p) in means.iter().zip(&masses) {
            acc.add(p * m * m);
        }
        Ok(acc.value())
    }

    /// Payoff at the exact best response versus the closed-form game value
    /// `sum_z P(z) mean_z^2` (both sides include the anchored term when
    /// active). Requires a tabular multiplier class; with `f_ridge = 0` the
    /// two sides agree to rounding error for every `h`.
    pub fn equilibrium_payoff_identity(&self, h: &ParamFunction) -> Result<(f64, f64)> {
        if !self.f_class.is_tabular() {
            return Err(CmmError::NonTabularIdentity);
        }
        let f_star = self.best_response_f(h)?;
        let lhs = self.payoff(h, &f_star)?;
        let mut rhs = self.conditional_mse(h)?;
        if self.anchor_active() {
            rhs += self.alpha * self.ols_anchor_r(h)?;
        }
        Ok((lhs, rhs))
    }

    /// Per-bin view of what the multiplier tolerates at `(h, f)`: bin count,
    /// the multiplier's value, and the residual mean, sorted so the largest
    /// weighted violations come first. Empty bins are excluded.
    pub fn slack_report(&self, h: &ParamFunction, f: &ParamFunction) -> Result<SlackReport> {
        self.check_h(h)?;
        self.check_f(f)?;
        let groups = group_by_z(&self.data)?;
        let total_n = self.data.n();
        let mut entries = Vec::new();
        let mut agg = Accumulator::default();
        for (z, idx) in groups.iter() {
            if idx.is_empty() {
                continue;
            }
            let mut f_num = Accumulator::default();
            let mut r_num = Accumulator::default();
            let mut den = Accumulator::default();
            for &i in idx {
                let s = self.data.sample(i);
                let w = self.data.weight(i);
                let fv = f.eval_side(s, InputSide::Z)?;
                f_num.add(w * fv);
                r_num.add(w * (s.y - h.eval(&s.x)?));
                den.add(w);
                agg.add(w * fv * fv);
            }
            let mass = den.value();
            if mass <= 0.0 {
                continue;
            }
            entries.push(SlackEntry {
                z_key: z,
                n_z: idx.len(),
                f_value: f_num.value() / mass,
                residual_mean: r_num.value() / mass,
            });
        }
        entries.sort_by(|a, b| {
            let ka = a.n_z as f64 * a.f_value * a.f_value;
            let kb = b.n_z as f64 * b.f_value * b.f_value;
            kb.partial_cmp(&ka).unwrap().then(a.z_key.cmp(&b.z_key))
        });
        Ok(SlackReport { entries, aggregate: agg.value(), total_n })
    }
}

/// One bin of a [`SlackReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackEntry {
    pub z_key: usize,
    pub n_z: usize,
    pub f_value: f64,
    pub residual_mean: f64,
}

/// Equilibrium diagnostic: which bins the multiplier is paying attention
/// to. `aggregate` is `E[f(z)^2]` over the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackReport {
    pub entries: Vec<SlackEntry>,
    pub aggregate: f64,
    pub total_n: usize,
}

impl SlackReport {
    /// CSV with header `z_key,n_z,f_value,residual_mean`, one row per bin in
    /// report order, and a trailing aggregate row
    /// `aggregate,<total_n>,<aggregate>,`.
    pub fn to_csv_writer<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["z_key", "n_z", "f_value", "residual_mean"])?;
        for e in &self.entries {
            w.write_record([
                e.z_key.to_string(),
                e.n_z.to_string(),
                e.f_value.to_string(),
                e.residual_mean.to_string(),
            ])?;
        }
        w.write_record([
            "aggregate".to_string(),
            self.total_n.to_string(),
            self.aggregate.to_string(),
            String::new(),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_csv_writer(f)
    }

    pub fn from_csv_reader<R: io::Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let headers = rdr.headers()?.clone();
        let expect = ["z_key", "n_z", "f_value", "residual_mean"];
        if headers.iter().ne(expect) {
            return Err(CmmError::Parse("unexpected slack report header".into()));
        }
        let mut entries = Vec::new();
        let mut aggregate = None;
        let mut total_n = 0usize;
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| CmmError::Parse(format!("row {row}: {e}")))?;
            if &rec[0] == "aggregate" {
                total_n = rec[1]
                    .parse()
                    .map_err(|_| CmmError::Parse(format!("row {row}: bad total_n")))?;
                aggregate = Some(
                    rec[2]
                        .parse()
                        .map_err(|_| CmmError::Parse(format!("row {row}: bad aggregate")))?,
                );
                continue;
            }
            let parse_f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| CmmError::Parse(format!("row {row}: non-numeric '{s}'")))
            };
            entries.push(SlackEntry {
                z_key: rec[0]
                    .parse()
                    .map_err(|_| CmmError::Parse(format!("row {row}: bad z_key")))?,
                n_z: rec[1]
                    .parse()
                    .map_err(|_| CmmError::Parse(format!("row {row}: bad n_z")))?,
                f_value: parse_f(&rec[2])?,
                residual_mean: parse_f(&rec[3])?,
            });
        }
        let aggregate =
            aggregate.ok_or_else(|| CmmError::Parse("missing aggregate row".into()))?;
        Ok(Self { entries, aggregate, total_n })
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_csv_reader(f)
    }
}
