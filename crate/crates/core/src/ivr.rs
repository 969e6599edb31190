//! Instrumental-variable regression instantiation.
//!
//! Synthetic confounded scenarios follow the structural equations
//!
//! ```text
//! Z ~ N(0,1)   U ~ N(0,1)   eps ~ N(0,1)
//! X = a Z + b U + x_noise * eps
//! Y = h*(X) + U
//! ```
//!
//! with `a` the instrument strength and `b` the confounding. OLS and the
//! two-moment instrumental estimator are provided as closed-form oracles,
//! along with an exact "two-stage" baseline: fit the conditional frequency
//! table of X given a discrete instrument bin, then minimize the squared
//! error of the conditional mean prediction. The gradient-bias experiment
//! contrasts the single-sample gradient of that two-stage objective (biased
//! by a conditional covariance term) with the single-sample gradient of the
//! game payoff (unbiased).

use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Accumulator, Dataset, RngHandle, SampleTriple};
use crate::error::{CmmError, Result};
use crate::features::{gram_and_cross, FeatureMap, InputSide, ParamFunction, DEFAULT_RADIUS};

/// Hard relevance floor: below this the instrument moment is treated as
/// zero and estimation refuses to divide by it.
pub const WEAK_INSTRUMENT_FLOOR: f64 = 1e-12;
/// Soft relevance floor; callers may warn between the two.
pub const WEAK_INSTRUMENT_WARNING: f64 = 0.05;

/// Structural function catalog for nonlinear scenarios. Formulas:
/// `quadratic`: `a x^2 + b x + c`; `piecewise-linear`: `x` for `x >= 0`,
/// `0.5 x` otherwise; `sigmoid-shaped`: `4 / (1 + exp(-2x)) - 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HStar {
    Quadratic { a: f64, b: f64, c: f64 },
    PiecewiseLinear,
    SigmoidShaped,
}

impl HStar {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            HStar::Quadratic { a, b, c } => a * x * x + b * x + c,
            HStar::PiecewiseLinear => {
                if x >= 0.0 {
                    x
                } else {
                    0.5 * x
                }
            }
            HStar::SigmoidShaped => 4.0 / (1.0 + (-2.0 * x).exp()) - 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearIvScenario {
    pub beta_star: f64,
    pub instrument_strength: f64,
    pub confounding: f64,
    pub x_noise: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for LinearIvScenario {
    fn default() -> Self {
        Self {
            beta_star: 2.0,
            instrument_strength: 1.0,
            confounding: 1.0,
            x_noise: 0.0,
            n: 10_000,
            seed: 0,
        }
    }
}

impl LinearIvScenario {
    pub fn validate(&self) -> Result<()> {
        validate_structural(self.instrument_strength, self.confounding, self.x_noise, self.n)?;
        if !self.beta_star.is_finite() {
            return Err(CmmError::InvalidField {
                field: "beta_star",
                message: "must be finite".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonlinearIvScenario {
    pub h_star: HStar,
    pub instrument_strength: f64,
    pub confounding: f64,
    pub x_noise: f64,
    pub n: usize,
    pub seed: u64,
    /// When set, Z is drawn uniformly from this many equally spaced bin
    /// centers on [-2, 2] and samples carry the bin index as `z_key`.
    pub discrete_z: Option<usize>,
}

impl Default for NonlinearIvScenario {
    fn default() -> Self {
        Self {
            h_star: HStar::Quadratic { a: 1.0, b: 1.0, c: 0.0 },
            instrument_strength: 1.0,
            confounding: 1.0,
            x_noise: 0.0,
            n: 10_000,
            seed: 0,
            discrete_z: None,
        }
    }
}

impl NonlinearIvScenario {
    pub fn validate(&self) -> Result<()> {
        validate_structural(self.instrument_strength, self.confounding, self.x_noise, self.n)?;
        match self.h_star {
            HStar::Quadratic { a, b, c } if !(a.is_finite() && b.is_finite() && c.is_finite()) => {
                return Err(CmmError::InvalidField {
                    field: "h_star",
                    message: "quadratic coefficients must be finite".into(),
                })
            }
            _ => {}
        }
        if self.discrete_z == Some(0) {
            return Err(CmmError::InvalidField {
                field: "discrete_z",
                message: "needs at least one bin".into(),
            });
        }
        Ok(())
    }
}

fn validate_structural(a: f64, b: f64, x_noise: f64, n: usize) -> Result<()> {
    if !a.is_finite() || a == 0.0 {
        return Err(CmmError::InvalidField {
            field: "instrument_strength",
            message: "must be finite and nonzero (the instrument has to move x)".into(),
        });
    }
    if !b.is_finite() {
        return Err(CmmError::InvalidField {
            field: "confounding",
            message: "must be finite".into(),
        });
    }
    if !x_noise.is_finite() || x_noise < 0.0 {
        return Err(CmmError::InvalidField {
            field: "x_noise",
            message: "must be finite and nonnegative".into(),
        });
    }
    if n == 0 {
        return Err(CmmError::InvalidField { field: "n", message: "must be at least 1".into() });
    }
    Ok(())
}

/// Center of bin `j` out of `k` equally spaced bins on [-2, 2].
pub fn discrete_z_center(j: usize, k: usize) -> f64 {
    -2.0 + 4.0 * (j as f64 + 0.5) / k as f64
}

/// Draws the linear scenario. Per sample the draws are z, u, eps in that
/// order, so equal seeds give byte-identical datasets.
pub fn generate_linear_iv(sc: &LinearIvScenario) -> Result<Dataset> {
    sc.validate()?;
    let mut rng = RngHandle::new(sc.seed).rng();
    let mut samples = Vec::with_capacity(sc.n);
    for _ in 0..sc.n {
        let z: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let x = sc.instrument_strength * z + sc.confounding * u + sc.x_noise * e;
        let y = sc.beta_star * x + u;
        samples.push(SampleTriple::new(vec![x], y, vec![z]));
    }
    Dataset::new(samples)
}

/// Draws the nonlinear scenario: `Y = h*(X) + U`. With `discrete_z`, the
/// instrument is a uniformly drawn bin center (z coordinate holds the
/// center, `z_key` the index); the remaining draws match the linear
/// generator's order.
pub fn generate_nonlinear_iv(sc: &NonlinearIvScenario) -> Result<Dataset> {
    sc.validate()?;
    let mut rng = RngHandle::new(sc.seed).rng();
    let mut samples = Vec::with_capacity(sc.n);
    match sc.discrete_z {
        None => {
            for _ in 0..sc.n {
                let z: f64 = rng.sample(StandardNormal);
                let u: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                let x = sc.instrument_strength * z + sc.confounding * u + sc.x_noise * e;
                let y = sc.h_star.eval(x) + u;
                samples.push(SampleTriple::new(vec![x], y, vec![z]));
            }
            Dataset::new(samples)
        }
        Some(k) => {
            for _ in 0..sc.n {
                let j = rng.gen_range(0..k);
                let z = discrete_z_center(j, k);
                let u: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                let x = sc.instrument_strength * z + sc.confounding * u + sc.x_noise * e;
                let y = sc.h_star.eval(x) + u;
                samples.push(SampleTriple::keyed(vec![x], y, vec![z], j));
            }
            Dataset::with_z_cardinality(samples, k)
        }
    }
}

/// Unridged least squares of y on the x-features:
/// `weights = E[phi phi^T]^{-1} E[y phi]`.
pub fn ols_estimate(data: &Dataset, features: &FeatureMap) -> Result<ParamFunction> {
    features.validate()?;
    let (gram, cross) = gram_and_cross(data, features, |s| s.y, InputSide::X)?;
    match gram.cholesky() {
        Some(ch) => {
            let w = ch.solve(&cross);
            ParamFunction::with_weights(
                features.clone(),
                w.iter().copied().collect(),
                DEFAULT_RADIUS,
            )
        }
        None => Err(CmmError::SingularGram),
    }
}

/// Raw instrument cross moment `E[z x]` (scalar case). Exposed so callers
/// can warn on weak instruments before estimating.
pub fn instrument_cross_moment(data: &Dataset) -> Result<f64> {
    if data.dx() != 1 || data.dz() != 1 {
        return Err(CmmError::DimensionMismatch(
            "instrument moments need scalar x and z".into(),
        ));
    }
    let mut zx = Accumulator::default();
    for (s, &w) in data.samples().iter().zip(data.weights()) {
        zx.add(w * s.z[0] * s.x[0]);
    }
    Ok(zx.value())
}

/// Two-moment instrumental slope `E[z y] / E[z x]` on raw moments.
pub fn tsls_estimate(data: &Dataset) -> Result<f64> {
    let zx = instrument_cross_moment(data)?;
    if zx.abs() < WEAK_INSTRUMENT_FLOOR {
        return Err(CmmError::WeakInstrument);
    }
    let mut zy = Accumulator::default();
    for (s, &w) in data.samples().iter().zip(data.weights()) {
        zy.add(w * s.z[0] * s.y);
    }
    Ok(zy.value() / zx)
}

/// Replaces each x coordinate with the center of its equal-width bin
/// (per-coordinate range fitted on the data), making x discrete for the
/// conditional-table methods. Constant coordinates collapse to one bin.
pub fn quantize_x(data: &Dataset, bins: usize) -> Result<Dataset> {
    if bins == 0 {
        return Err(CmmError::InvalidField {
            field: "bins",
            message: "must be at least 1".into(),
        });
    }
    let dx = data.dx();
    let mut lo = vec![f64::INFINITY; dx];
    let mut hi = vec![f64::NEG_INFINITY; dx];
    for s in data.samples() {
        for (d, &v) in s.x.iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    let samples = data
        .samples()
        .iter()
        .map(|s| {
            let x = s
                .x
                .iter()
                .enumerate()
                .map(|(d, &v)| {
                    let width = hi[d] - lo[d];
                    if width <= 0.0 {
                        return lo[d];
                    }
                    let j = (((v - lo[d]) / width) * bins as f64).floor() as usize;
                    let j = j.min(bins - 1);
                    lo[d] + width * (j as f64 + 0.5) / bins as f64
                })
                .collect();
            SampleTriple { x, ..s.clone() }
        })
        .collect();
    match data.z_cardinality() {
        Some(k) => Dataset::with_z_cardinality(samples, k),
        None => Dataset::new(samples),
    }
}

/// Empirical conditional law of X given the instrument bin. The support is
/// the global list of distinct x values; each bin's row holds frequencies
/// over that support. A bin with no samples at all gets the uniform law
/// over the support (pseudocount 1 per cell, reported via
/// `smoothed_cells`); bins with samples keep their exact frequencies.
#[derive(Debug, Clone)]
pub struct ConditionalTable {
    support: Vec<Vec<f64>>,
    /// Per bin: (support index, probability), ascending in index.
    rows: Vec<Vec<(usize, f64)>>,
    /// Per bin: cumulative probabilities aligned with `rows`.
    cum: Vec<Vec<f64>>,
    smoothed_cells: usize,
}

impl ConditionalTable {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let k = data.z_cardinality().ok_or(CmmError::NotDiscreteInZ)?;
        let lex = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        };
        // Sort sample indices by x to build the distinct support and each
        // sample's support index in one pass.
        let mut order: Vec<usize> = (0..data.n()).collect();
        order.sort_by(|&i, &j| lex(&data.sample(i).x, &data.sample(j).x));
        let mut support: Vec<Vec<f64>> = Vec::new();
        let mut sample_support = vec![0usize; data.n()];
        for &i in &order {
            let x = &data.sample(i).x;
            if support.last().map(|u| u == x) != Some(true) {
                support.push(x.clone());
            }
            sample_support[i] = support.len() - 1;
        }
        let mut mass = vec![vec![0.0f64; support.len()]; k];
        let n = data.n() as f64;
        for (i, (s, &w)) in data.samples().iter().zip(data.weights()).enumerate() {
            let z = s.z_key.ok_or(CmmError::NotDiscreteInZ)?;
            mass[z][sample_support[i]] += w * n;
        }
        let mut rows = Vec::with_capacity(k);
        let mut cum = Vec::with_capacity(k);
        let mut smoothed_cells = 0usize;
        for row_mass in &mut mass {
            let total: f64 = row_mass.iter().sum();
            if total <= 0.0 {
                // Unobserved bin: uniform over the support.
                smoothed_cells += row_mass.len();
                row_mass.iter_mut().for_each(|m| *m = 1.0);
            }
            let total: f64 = row_mass.iter().sum();
            let mut row = Vec::new();
            let mut c = Vec::new();
            let mut acc = 0.0;
            for (j, &m) in row_mass.iter().enumerate() {
                if m > 0.0 {
                    let p = m / total;
                    acc += p;
                    row.push((j, p));
                    c.push(acc);
                }
            }
            if let Some(last) = c.last_mut() {
                *last = 1.0;
            }
            rows.push(row);
            cum.push(c);
        }
        Ok(Self { support, rows, cum, smoothed_cells })
    }

    pub fn z_cardinality(&self) -> usize {
        self.rows.len()
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn smoothed_cells(&self) -> usize {
        self.smoothed_cells
    }

    pub fn prob(&self, z: usize, support_idx: usize) -> f64 {
        self.rows[z]
            .iter()
            .find(|(j, _)| *j == support_idx)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    pub fn row(&self, z: usize) -> &[(usize, f64)] {
        &self.rows[z]
    }

    /// `E[g(X) | z]` under the table.
    pub fn expect_fn<G: Fn(&[f64]) -> f64>(&self, z: usize, g: G) -> f64 {
        self.rows[z]
            .iter()
            .map(|&(j, p)| p * g(&self.support[j]))
            .sum()
    }

    /// `E[phi(X) | z]` for a feature map over x.
    pub fn feature_mean(&self, z: usize, features: &FeatureMap) -> Result<Vec<f64>> {
        let mut mu = vec![0.0; features.output_dim()];
        for &(j, p) in &self.rows[z] {
            let phi = features.featurize(&self.support[j])?;
            for (m, v) in mu.iter_mut().zip(&phi) {
                *m += p * v;
            }
        }
        Ok(mu)
    }

    /// Per-feature conditional covariance `Cov(h(X), phi_k(X) | z)`,
    /// enumerated exactly over the table.
    pub fn cov_h_features(&self, z: usize, h: &ParamFunction) -> Result<Vec<f64>> {
        let features = h.features();
        let mu = self.feature_mean(z, features)?;
        let mean_h = crate::features::dot(h.weights(), &mu);
        let mut cov = vec![0.0; features.output_dim()];
        for &(j, p) in &self.rows[z] {
            let phi = features.featurize(&self.support[j])?;
            let hv = crate::features::dot(h.weights(), &phi);
            for (c, (v, m)) in cov.iter_mut().zip(phi.iter().zip(&mu)) {
                *c += p * (hv - mean_h) * (v - m);
            }
        }
        Ok(cov)
    }

    /// Draws a support index from the bin's law.
    pub fn sample_index<R: Rng>(&self, z: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let c = &self.cum[z];
        let pos = c.partition_point(|&v| v < u).min(c.len() - 1);
        self.rows[z][pos].0
    }
}

/// Exact two-stage estimator: fit `P(X|z)` as the empirical table, then
/// minimize `E_i[(y_i - E_{x ~ P(.|z_i)}[h(x)])^2]` over the feature
/// weights. With `mu_z = E[phi(X)|z]` this is weighted least squares of y
/// on `mu_{z_i}`.
pub fn discrete_two_stage_baseline(data: &Dataset, h_class: &FeatureMap) -> Result<ParamFunction> {
    h_class.validate()?;
    let table = ConditionalTable::from_dataset(data)?;
    let d = h_class.output_dim();
    let mut mus = Vec::with_capacity(table.z_cardinality());
    for z in 0..table.z_cardinality() {
        mus.push(DVector::from_vec(table.feature_mean(z, h_class)?));
    }
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut cross = DVector::<f64>::zeros(d);
    for (s, &w) in data.samples().iter().zip(data.weights()) {
        let z = s.z_key.ok_or(CmmError::NotDiscreteInZ)?;
        let mu = &mus[z];
        gram.ger(w, mu, mu, 1.0);
        cross.axpy(w * s.y, mu, 1.0);
    }
    match gram.cholesky() {
        Some(ch) => ParamFunction::with_weights(
            h_class.clone(),
            ch.solve(&cross).iter().copied().collect(),
            DEFAULT_RADIUS,
        ),
        None => Err(CmmError::SingularGram),
    }
}

/// One gradient coordinate's worth of the bias experiment: the exact
/// full-batch gradient, the mean and standard error of the single-sample
/// estimator across trials, and the bias the conditional covariance term
/// predicts (zero for the game estimator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCoordinate {
    pub coordinate: usize,
    pub exact: f64,
    pub single_sample_mean: f64,
    pub single_sample_stderr: f64,
    pub predicted_bias: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientBiasReport {
    pub two_stage: Vec<GradientCoordinate>,
    pub rela: Vec<GradientCoordinate>,
    pub trials: usize,
    pub smoothed_cells: usize,
}

impl GradientBiasReport {
    /// CSV: `estimator,coordinate,exact,single_sample_mean,
    /// single_sample_stderr,predicted_bias`.
    pub fn to_csv_writer<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "estimator",
            "coordinate",
            "exact",
            "single_sample_mean",
            "single_sample_stderr",
            "predicted_bias",
        ])?;
        for (name, rows) in [("two-stage", &self.two_stage), ("rela", &self.rela)] {
            for r in rows {
                w.write_record([
                    name.to_string(),
                    r.coordinate.to_string(),
                    r.exact.to_string(),
                    r.single_sample_mean.to_string(),
                    r.single_sample_stderr.to_string(),
                    r.predicted_bias.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_csv_writer(f)
    }

    /// Reads a report back; `trials` and `smoothed_cells` are not part of
    /// the CSV and come back as zero.
    pub fn from_csv_reader<R: io::Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let expect = [
            "estimator",
            "coordinate",
            "exact",
            "single_sample_mean",
            "single_sample_stderr",
            "predicted_bias",
        ];
        let headers = reader.headers()?.clone();
        if headers.iter().ne(expect) {
            return Err(CmmError::Parse(format!("unexpected header: {headers:?}")));
        }
        let mut two_stage = Vec::new();
        let mut rela = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |j: usize| -> Result<f64> {
                rec.get(j)
                    .ok_or_else(|| CmmError::Parse(format!("row {}: missing column {j}", i + 1)))?
                    .parse::<f64>()
                    .map_err(|e| CmmError::Parse(format!("row {}: {e}", i + 1)))
            };
            let coord = GradientCoordinate {
                coordinate: field(1)? as usize,
                exact: field(2)?,
                single_sample_mean: field(3)?,
                single_sample_stderr: field(4)?,
                predicted_bias: field(5)?,
            };
            match rec.get(0) {
                Some("two-stage") => two_stage.push(coord),
                Some("rela") => rela.push(coord),
                other => {
                    return Err(CmmError::Parse(format!(
                        "row {}: unknown estimator {other:?}",
                        i + 1
                    )))
                }
            }
        }
        Ok(Self { two_stage, rela, trials: 0, smoothed_cells: 0 })
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_csv_reader(f)
    }
}

const MIN_TRIALS: usize = 100;

/// Monte Carlo comparison of two single-sample gradient estimators at a
/// fixed `h`, on data drawn from the scenario (which must have a discrete
/// instrument).
///
/// Two-stage: objective `(1/2) E_i[(y_i - E[h(X)|z_i])^2]`, exact gradient
/// `-E_i[(y_i - theta . mu_i) mu_i]`. Its single-sample version draws one
/// `x ~ P(.|z_i)` and reuses it in both factors, `-(y_i - h(x)) phi(x)`,
/// which is off by exactly `E_i[Cov(h(X), phi(X) | z_i)]`.
///
/// Game: gradient `E[-2 f(z) phi(x)]` with `f` the frozen best response at
/// `h`; its single-sample version evaluates one uniformly drawn observed
/// pair and needs no conditional model, so it is unbiased by construction.
///
/// Trials use independent RNG streams indexed by trial, merged in order.
pub fn gradient_bias_experiment(
    sc: &NonlinearIvScenario,
    h: &ParamFunction,
    trials: usize,
    seed: u64,
) -> Result<GradientBiasReport> {
    if trials < MIN_TRIALS {
        return Err(CmmError::InsufficientTrials);
    }
    if sc.discrete_z.is_none() {
        return Err(CmmError::InvalidField {
            field: "discrete_z",
            message: "the bias experiment needs a discrete instrument".into(),
        });
    }
    let data = generate_nonlinear_iv(sc)?;
    let features = h.features().clone();
    if features.input_dim() != data.dx() {
        return Err(CmmError::DimensionMismatch(format!(
            "h reads {} coordinates, data has dx={}",
            features.input_dim(),
            data.dx()
        )));
    }
    let d = features.output_dim();
    let table = ConditionalTable::from_dataset(&data)?;
    let k = table.z_cardinality();

    let mut mus = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for z in 0..k {
        mus.push(table.feature_mean(z, &features)?);
        covs.push(table.cov_h_features(z, h)?);
    }

    // Residual means per bin give the frozen best-response multiplier.
    let f_means = crate::data::conditional_residual_means(&data, |x| h.eval(x).unwrap())?;

    let mut ts_exact = vec![0.0; d];
    let mut ts_bias = vec![0.0; d];
    let mut rela_exact = vec![0.0; d];
    let mut phis = Vec::with_capacity(data.n());
    for (s, &w) in data.samples().iter().zip(data.weights()) {
        let z = s.z_key.unwrap();
        let mu = &mus[z];
        let pred = crate::features::dot(h.weights(), mu);
        let phi = features.featurize(&s.x)?;
        for j in 0..d {
            ts_exact[j] += w * (-(s.y - pred) * mu[j]);
            ts_bias[j] += w * covs[z][j];
            rela_exact[j] += w * (-2.0 * f_means[z] * phi[j]);
        }
        phis.push(phi);
    }

    let picker = WeightedIndex::new(data.weights().iter().copied())
        .map_err(|e| CmmError::InvalidField { field: "weights", message: e.to_string() })?;

    let mut ts_sum = vec![0.0; d];
    let mut ts_sumsq = vec![0.0; d];
    let mut rela_sum = vec![0.0; d];
    let mut rela_sumsq = vec![0.0; d];
    let handle = RngHandle::new(seed);
    for trial in 0..trials {
        let mut rng = handle.stream(trial as u64);
        // Two-stage: one conditional draw per sample, same draw in both
        // factors.
        let mut g = vec![0.0; d];
        for (s, &w) in data.samples().iter().zip(data.weights()) {
            let z = s.z_key.unwrap();
            let j = table.sample_index(z, &mut rng);
            let xhat = &table.support()[j];
            let hv = h.eval(xhat)?;
            let phi = features.featurize(xhat)?;
            for c in 0..d {
                g[c] += w * (-(s.y - hv) * phi[c]);
            }
        }
        for c in 0..d {
            ts_sum[c] += g[c];
            ts_sumsq[c] += g[c] * g[c];
        }
        // Game: one observed pair, frozen multiplier.
        let i = picker.sample(&mut rng);
        let z = data.sample(i).z_key.unwrap();
        for c in 0..d {
            let v = -2.0 * f_means[z] * phis[i][c];
            rela_sum[c] += v;
            rela_sumsq[c] += v * v;
        }
    }

    let summarize = |exact: &[f64], bias: Option<&[f64]>, sum: &[f64], sumsq: &[f64]| {
        (0..d)
            .map(|c| {
                let mean = sum[c] / trials as f64;
                let var = (sumsq[c] - sum[c] * sum[c] / trials as f64) / (trials as f64 - 1.0);
                GradientCoordinate {
                    coordinate: c,
                    exact: exact[c],
                    single_sample_mean: mean,
                    single_sample_stderr: (var.max(0.0) / trials as f64).sqrt(),
                    predicted_bias: bias.map_or(0.0, |b| b[c]),
                }
            })
            .collect::<Vec<_>>()
    };

    Ok(GradientBiasReport {
        two_stage: summarize(&ts_exact, Some(&ts_bias), &ts_sum, &ts_sumsq),
        rela: summarize(&rela_exact, None, &rela_sum, &rela_sumsq),
        trials,
        smoothed_cells: table.smoothed_cells(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_formulas() {
        let q = HStar::Quadratic { a: 1.0, b: 2.0, c: 3.0 };
        assert_eq!(q.eval(2.0), 4.0 + 4.0 + 3.0);
        assert_eq!(HStar::PiecewiseLinear.eval(3.0), 3.0);
        assert_eq!(HStar::PiecewiseLinear.eval(-2.0), -1.0);
        assert_eq!(HStar::SigmoidShaped.eval(0.0), 0.0);
        assert!((HStar::SigmoidShaped.eval(10.0) - 2.0).abs() < 1e-6);
        assert!((HStar::SigmoidShaped.eval(-10.0) + 2.0).abs() < 1e-6);
    }

    #[test]
    fn linear_generator_is_deterministic() {
        let sc = LinearIvScenario { n: 50, seed: 9, ..LinearIvScenario::default() };
        let a = generate_linear_iv(&sc).unwrap();
        let b = generate_linear_iv(&sc).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = generate_linear_iv(&LinearIvScenario { seed: 10, ..sc }).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn degenerate_quadratic_reduces_to_linear() {
        let lin = LinearIvScenario { beta_star: 2.0, n: 40, seed: 3, ..LinearIvScenario::default() };
        let non = NonlinearIvScenario {
            h_star: HStar::Quadratic { a: 0.0, b: 2.0, c: 0.0 },
            n: 40,
            seed: 3,
            ..NonlinearIvScenario::default()
        };
        let a = generate_linear_iv(&lin).unwrap();
        let b = generate_nonlinear_iv(&non).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn discrete_z_populates_keys_and_centers() {
        let sc = NonlinearIvScenario {
            discrete_z: Some(4),
            n: 200,
            seed: 1,
            ..NonlinearIvScenario::default()
        };
        let data = generate_nonlinear_iv(&sc).unwrap();
        assert_eq!(data.z_cardinality(), Some(4));
        for s in data.samples() {
            let j = s.z_key.unwrap();
            assert!(j < 4);
            assert_eq!(s.z[0], discrete_z_center(j, 4));
        }
        // Centers for k = 4 on [-2, 2]: -1.5, -0.5, 0.5, 1.5.
        assert_eq!(discrete_z_center(0, 4), -1.5);
        assert_eq!(discrete_z_center(3, 4), 1.5);
    }

    #[test]
    fn scenario_validation() {
        let sc = LinearIvScenario { instrument_strength: 0.0, ..LinearIvScenario::default() };
        assert!(generate_linear_iv(&sc).is_err());
        let sc = NonlinearIvScenario { discrete_z: Some(0), ..NonlinearIvScenario::default() };
        assert!(generate_nonlinear_iv(&sc).is_err());
    }

    #[test]
    fn ols_recovers_exact_linear_relation() {
        let samples: Vec<SampleTriple> = (0..10)
            .map(|i| {
                let x = i as f64 * 0.5 - 2.0;
                SampleTriple::new(vec![x], 3.0 * x + 1.0, vec![0.0])
            })
            .collect();
        let data = Dataset::new(samples).unwrap();
        let h = ols_estimate(&data, &FeatureMap::polynomial(1, 1).unwrap()).unwrap();
        assert!((h.weights()[0] - 1.0).abs() <= 1e-10);
        assert!((h.weights()[1] - 3.0).abs() <= 1e-10);
    }

    #[test]
    fn ols_zero_variance_x_errors() {
        let samples: Vec<SampleTriple> = (0..5)
            .map(|i| SampleTriple::new(vec![1.0], i as f64, vec![0.0]))
            .collect();
        let data = Dataset::new(samples).unwrap();
        let err = ols_estimate(&data, &FeatureMap::polynomial(1, 1).unwrap()).unwrap_err();
        assert_eq!(err.to_string(), "f-class Gram singular; set f_ridge > 0");
    }

    #[test]
    fn tsls_hand_computation_and_weak_instrument() {
        let data = Dataset::new(vec![
            SampleTriple::new(vec![1.0], 2.0, vec![1.0]),
            SampleTriple::new(vec![-1.0], -2.0, vec![-1.0]),
        ])
        .unwrap();
        assert!((tsls_estimate(&data).unwrap() - 2.0).abs() < 1e-14);
        // x constant while z is symmetric: E[zx] = 0.
        let flat = Dataset::new(vec![
            SampleTriple::new(vec![1.0], 2.0, vec![1.0]),
            SampleTriple::new(vec![1.0], -2.0, vec![-1.0]),
        ])
        .unwrap();
        let err = tsls_estimate(&flat).unwrap_err();
        assert_eq!(err.to_string(), "weak/irrelevant instrument");
    }

    #[test]
    fn confounded_population_slopes() {
        // a = 1, b = 1, no extra x noise: OLS drifts to beta + b/(a^2+b^2)
        // = 2.5 while the instrumented slope stays at 2.
        let sc = LinearIvScenario { n: 30_000, seed: 11, ..LinearIvScenario::default() };
        let data = generate_linear_iv(&sc).unwrap();
        let ols = ols_estimate(&data, &FeatureMap::polynomial(1, 1).unwrap()).unwrap();
        assert!((ols.weights()[1] - 2.5).abs() < 0.05, "ols slope {}", ols.weights()[1]);
        let beta = tsls_estimate(&data).unwrap();
        assert!((beta - 2.0).abs() < 0.05, "tsls slope {beta}");
    }

    #[test]
    fn quantize_bins_to_centers() {
        let data = Dataset::new(vec![
            SampleTriple::new(vec![0.0], 0.0, vec![0.0]),
            SampleTriple::new(vec![0.4], 0.0, vec![0.0]),
            SampleTriple::new(vec![1.0], 0.0, vec![0.0]),
        ])
        .unwrap();
        let q = quantize_x(&data, 2).unwrap();
        // Range [0,1], two bins with centers 0.25 and 0.75.
        assert_eq!(q.sample(0).x, vec![0.25]);
        assert_eq!(q.sample(1).x, vec![0.25]);
        assert_eq!(q.sample(2).x, vec![0.75]);
        // Constant coordinate collapses.
        let flat = Dataset::new(vec![
            SampleTriple::new(vec![3.0], 0.0, vec![0.0]),
            SampleTriple::new(vec![3.0], 1.0, vec![0.0]),
        ])
        .unwrap();
        let q = quantize_x(&flat, 4).unwrap();
        assert_eq!(q.sample(0).x, vec![3.0]);
    }

    fn keyed(x: f64, y: f64, z: usize) -> SampleTriple {
        SampleTriple::keyed(vec![x], y, vec![z as f64], z)
    }

    #[test]
    fn conditional_table_frequencies_and_smoothing() {
        let data = Dataset::with_z_cardinality(
            vec![keyed(0.0, 0.0, 0), keyed(1.0, 0.0, 0), keyed(1.0, 0.0, 0), keyed(2.0, 0.0, 1)],
            3,
        )
        .unwrap();
        let table = ConditionalTable::from_dataset(&data).unwrap();
        assert_eq!(table.support(), &[vec![0.0], vec![1.0], vec![2.0]]);
        assert!((table.prob(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((table.prob(0, 1) - 2.0 / 3.0).abs() < 1e-12);
        // Observed bins keep exact zeros on unseen cells.
        assert_eq!(table.prob(0, 2), 0.0);
        assert_eq!(table.prob(1, 2), 1.0);
        // Bin 2 is unobserved: uniform over the support, and reported.
        for j in 0..3 {
            assert!((table.prob(2, j) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(table.smoothed_cells(), 3);
        // Conditional expectation of x under bin 0: 2/3.
        assert!((table.expect_fn(0, |x| x[0]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_sampling_follows_the_law() {
        let data = Dataset::with_z_cardinality(
            vec![keyed(0.0, 0.0, 0), keyed(1.0, 0.0, 0), keyed(1.0, 0.0, 0), keyed(1.0, 0.0, 0)],
            1,
        )
        .unwrap();
        let table = ConditionalTable::from_dataset(&data).unwrap();
        let mut rng = RngHandle::new(5).rng();
        let mut seen_one = 0;
        for _ in 0..4000 {
            if table.sample_index(0, &mut rng) == 1 {
                seen_one += 1;
            }
        }
        let frac = seen_one as f64 / 4000.0;
        assert!((frac - 0.75).abs() < 0.03, "sampled fraction {frac}");
    }

    #[test]
    fn two_stage_baseline_degenerate_table_is_groupwise_regression() {
        // X deterministic given z and y linear in x: exact recovery.
        let mut samples = Vec::new();
        for _ in 0..5 {
            samples.push(keyed(0.0, 1.0, 0));
            samples.push(keyed(1.0, 3.0, 1));
            samples.push(keyed(2.0, 5.0, 2));
        }
        let data = Dataset::with_z_cardinality(samples, 3).unwrap();
        let h = discrete_two_stage_baseline(&data, &FeatureMap::polynomial(1, 1).unwrap())
            .unwrap();
        assert!((h.weights()[0] - 1.0).abs() <= 1e-8);
        assert!((h.weights()[1] - 2.0).abs() <= 1e-8);
    }

    #[test]
    fn two_stage_baseline_matches_conditional_mse_minimizer() {
        // With the empirical table, the two-stage objective differs from
        // the conditional MSE only by a constant, so minimizers agree.
        let data = Dataset::with_z_cardinality(
            vec![
                keyed(0.0, 1.0, 0),
                keyed(1.0, 2.0, 0),
                keyed(1.0, 4.0, 1),
                keyed(2.0, 3.0, 1),
                keyed(3.0, 7.0, 2),
                keyed(2.0, 6.0, 2),
            ],
            3,
        )
        .unwrap();
        let class = FeatureMap::polynomial(1, 1).unwrap();
        let baseline = discrete_two_stage_baseline(&data, &class).unwrap();
        // Conditional-MSE minimizer: weighted least squares of the bin mean
        // of y on the bin mean of phi.
        let table = ConditionalTable::from_dataset(&data).unwrap();
        let groups = crate::data::group_by_z(&data).unwrap();
        let masses = crate::data::group_masses(&data, &groups);
        let mut gram = DMatrix::<f64>::zeros(2, 2);
        let mut cross = DVector::<f64>::zeros(2);
        for (z, idx) in groups.iter() {
            let mu = DVector::from_vec(table.feature_mean(z, &class).unwrap());
            let ybar: f64 =
                idx.iter().map(|&i| data.sample(i).y).sum::<f64>() / idx.len() as f64;
            gram.ger(masses[z], &mu, &mu, 1.0);
            cross.axpy(masses[z] * ybar, &mu, 1.0);
        }
        let direct = gram.cholesky().unwrap().solve(&cross);
        for (a, b) in baseline.weights().iter().zip(direct.iter()) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn bias_experiment_validates_inputs() {
        let sc = NonlinearIvScenario { discrete_z: Some(2), n: 60, ..NonlinearIvScenario::default() };
        let h = ParamFunction::zeros(FeatureMap::polynomial(2, 1).unwrap(), 10.0).unwrap();
        let err = gradient_bias_experiment(&sc, &h, 50, 0).unwrap_err();
        assert_eq!(err.to_string(), "insufficient trials");
        let cont = NonlinearIvScenario { discrete_z: None, ..sc };
        assert!(gradient_bias_experiment(&cont, &h, 200, 0).is_err());
    }

    #[test]
    fn bias_experiment_statistics_are_coherent() {
        let sc = NonlinearIvScenario {
            h_star: HStar::Quadratic { a: 1.0, b: 1.0, c: 0.0 },
            discrete_z: Some(3),
            n: 150,
            seed: 21,
            ..NonlinearIvScenario::default()
        };
        let h = ParamFunction::with_weights(
            FeatureMap::polynomial(2, 1).unwrap(),
            vec![0.2, 0.8, 0.6],
            DEFAULT_RADIUS,
        )
        .unwrap();
        let report = gradient_bias_experiment(&sc, &h, 600, 4).unwrap();
        assert_eq!(report.two_stage.len(), 3);
        assert_eq!(report.rela.len(), 3);
        // The single-sample two-stage mean tracks exact + predicted bias.
        for r in &report.two_stage {
            let expected = r.exact + r.predicted_bias;
            assert!(
                (r.single_sample_mean - expected).abs() <= 4.0 * r.single_sample_stderr.max(1e-12),
                "coordinate {}: mean {} vs expected {} (stderr {})",
                r.coordinate,
                r.single_sample_mean,
                expected,
                r.single_sample_stderr
            );
        }
        // The game estimator tracks its exact gradient with no correction.
        for r in &report.rela {
            assert_eq!(r.predicted_bias, 0.0);
            assert!(
                (r.single_sample_mean - r.exact).abs() <= 4.0 * r.single_sample_stderr.max(1e-12),
                "coordinate {}: mean {} vs exact {} (stderr {})",
                r.coordinate,
                r.single_sample_mean,
                r.exact,
                r.single_sample_stderr
            );
        }
        // Determinism of the whole experiment.
        let again = gradient_bias_experiment(&sc, &h, 600, 4).unwrap();
        assert_eq!(report.two_stage, again.two_stage);
        assert_eq!(report.rela, again.rela);
    }

    #[test]
    fn bias_report_csv_shape() {
        let sc = NonlinearIvScenario {
            discrete_z: Some(2),
            n: 80,
            seed: 2,
            ..NonlinearIvScenario::default()
        };
        let h = ParamFunction::with_weights(
            FeatureMap::polynomial(1, 1).unwrap(),
            vec![0.0, 1.0],
            DEFAULT_RADIUS,
        )
        .unwrap();
        let report = gradient_bias_experiment(&sc, &h, 120, 0).unwrap();
        let mut buf = Vec::new();
        report.to_csv_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "estimator,coordinate,exact,single_sample_mean,single_sample_stderr,predicted_bias\n"
        ));
        assert_eq!(text.lines().filter(|l| l.starts_with("two-stage,")).count(), 2);
        assert_eq!(text.lines().filter(|l| l.starts_with("rela,")).count(), 2);
    }
}
