//! Linear-in-parameters function classes.
//!
//! A [`FeatureMap`] turns an input vector into a feature vector; a
//! [`ParamFunction`] is a weight vector over those features together with an
//! l2 ball radius that makes the class compact. Both serialize to TOML so
//! trained functions can be stored and re-diagnosed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleTriple};
use crate::error::{CmmError, Result};

/// Default l2 radius: large enough to be effectively unconstrained.
pub const DEFAULT_RADIUS: f64 = 1e6;

/// Tolerance when reading a bin index out of a float coordinate.
const INDEX_TOL: f64 = 1e-6;

/// Which side of a sample a feature map reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSide {
    X,
    Z,
}

/// Per-feature affine standardization, applied as `(phi - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub shift: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureMap {
    /// One-hot over `cardinality` bins. The input is a single coordinate
    /// holding the bin index; on the z side of a sample the discrete key is
    /// used directly when present.
    TabularOnehot { cardinality: usize },

    /// All monomials of total degree `<= degree` in `input_dim` variables,
    /// constant first, then graded lexicographic order (for one variable:
    /// `1, x, x^2, ...`). `standardization`, when set, rescales each
    /// non-constant feature; entry 0 must be the identity.
    Polynomial {
        degree: usize,
        input_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        standardization: Option<Vec<FeatureScale>>,
    },

    /// Gaussian kernels around fixed centers plus a leading constant:
    /// `phi_0 = 1`, `phi_j(x) = exp(-|x - c_j|^2 / (2 bandwidth^2))`.
    /// The constant keeps the class able to express constant multipliers.
    GaussianRbf { centers: Vec<Vec<f64>>, bandwidth: f64 },
}

impl FeatureMap {
    pub fn tabular(cardinality: usize) -> Result<Self> {
        let map = FeatureMap::TabularOnehot { cardinality };
        map.validate()?;
        Ok(map)
    }

    pub fn polynomial(degree: usize, input_dim: usize) -> Result<Self> {
        let map = FeatureMap::Polynomial { degree, input_dim, standardization: None };
        map.validate()?;
        Ok(map)
    }

    pub fn gaussian_rbf(centers: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        let map = FeatureMap::GaussianRbf { centers, bandwidth };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeatureMap::TabularOnehot { cardinality } => {
                if *cardinality == 0 {
                    return Err(CmmError::InvalidField {
                        field: "cardinality",
                        message: "must be at least 1".into(),
                    });
                }
            }
            FeatureMap::Polynomial { input_dim, standardization, .. } => {
                if *input_dim == 0 {
                    return Err(CmmError::InvalidField {
                        field: "input_dim",
                        message: "must be at least 1".into(),
                    });
                }
                if let Some(scales) = standardization {
                    if scales.len() != self.output_dim() {
                        return Err(CmmError::DimensionMismatch(format!(
                            "standardization has {} entries for {} features",
                            scales.len(),
                            self.output_dim()
                        )));
                    }
                    if scales[0].shift != 0.0 || scales[0].scale != 1.0 {
                        return Err(CmmError::InvalidField {
                            field: "standardization",
                            message: "the constant feature must keep shift 0, scale 1".into(),
                        });
                    }
                    if scales.iter().any(|s| !s.scale.is_finite() || s.scale <= 0.0 || !s.shift.is_finite()) {
                        return Err(CmmError::InvalidField {
                            field: "standardization",
                            message: "scales must be finite and positive".into(),
                        });
                    }
                }
            }
            FeatureMap::GaussianRbf { centers, bandwidth } => {
                if centers.is_empty() {
                    return Err(CmmError::InvalidField {
                        field: "centers",
                        message: "need at least one center".into(),
                    });
                }
                let d = centers[0].len();
                if d == 0 || centers.iter().any(|c| c.len() != d) {
                    return Err(CmmError::DimensionMismatch(
                        "rbf centers must be nonempty and share a dimension".into(),
                    ));
                }
                if !bandwidth.is_finite() || *bandwidth <= 0.0 {
                    return Err(CmmError::InvalidField {
                        field: "bandwidth",
                        message: "must be finite and positive".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::TabularOnehot { cardinality } => *cardinality,
            FeatureMap::Polynomial { degree, input_dim, .. } => {
                n_monomials(*input_dim, *degree)
            }
            FeatureMap::GaussianRbf { centers, .. } => centers.len() + 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::TabularOnehot { .. } => 1,
            FeatureMap::Polynomial { input_dim, .. } => *input_dim,
            FeatureMap::GaussianRbf { centers, .. } => centers[0].len(),
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, FeatureMap::TabularOnehot { .. })
    }

    /// Feature vector at `input`.
    pub fn featurize(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(CmmError::DimensionMismatch(format!(
                "feature map expects input dim {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        match self {
            FeatureMap::TabularOnehot { cardinality } => {
                let idx = bin_index(input[0], *cardinality)?;
                let mut phi = vec![0.0; *cardinality];
                phi[idx] = 1.0;
                Ok(phi)
            }
            FeatureMap::Polynomial { degree, input_dim, standardization } => {
                let mut phi = Vec::with_capacity(self.output_dim());
                for expo in monomial_exponents(*input_dim, *degree) {
                    let mut v = 1.0;
                    for (xi, &e) in input.iter().zip(&expo) {
                        if e > 0 {
                            v *= xi.powi(e as i32);
                        }
                    }
                    phi.push(v);
                }
                if let Some(scales) = standardization {
                    for (v, s) in phi.iter_mut().zip(scales) {
                        *v = (*v - s.shift) / s.scale;
                    }
                }
                Ok(phi)
            }
            FeatureMap::GaussianRbf { centers, bandwidth } => {
                let mut phi = Vec::with_capacity(centers.len() + 1);
                phi.push(1.0);
                let denom = 2.0 * bandwidth * bandwidth;
                for c in centers {
                    let sq: f64 = input.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    phi.push((-sq / denom).exp());
                }
                Ok(phi)
            }
        }
    }

    /// Featurizes one side of a sample. On the z side a tabular map prefers
    /// the discrete key (the z coordinates may hold bin centers, not
    /// indices).
    pub fn featurize_side(&self, s: &SampleTriple, side: InputSide) -> Result<Vec<f64>> {
        match side {
            InputSide::X => self.featurize(&s.x),
            InputSide::Z => match (self, s.z_key) {
                (FeatureMap::TabularOnehot { .. }, Some(k)) => self.featurize(&[k as f64]),
                _ => self.featurize(&s.z),
            },
        }
    }

    /// Resolves the bin index a tabular map would use for the z side of a
    /// sample: the discrete key when present, otherwise the rounded first
    /// z coordinate.
    pub(crate) fn tabular_z_key(&self, s: &SampleTriple) -> Result<usize> {
        let FeatureMap::TabularOnehot { cardinality } = self else {
            return Err(CmmError::InvalidField {
                field: "feature map",
                message: "tabular_z_key on non-tabular map".into(),
            });
        };
        match s.z_key {
            Some(k) if k < *cardinality => Ok(k),
            Some(k) => Err(CmmError::InvalidField {
                field: "z_key",
                message: format!("{k} out of range 0..{cardinality}"),
            }),
            None => {
                if s.z.len() != 1 {
                    return Err(CmmError::DimensionMismatch(
                        "tabular z map needs a scalar z or a z_key".into(),
                    ));
                }
                bin_index(s.z[0], *cardinality)
            }
        }
    }

    /// Returns a copy with per-feature standardization fitted on the data
    /// (weighted mean/std; constant feature untouched). Polynomial only.
    pub fn standardized_for(&self, data: &Dataset, side: InputSide) -> Result<FeatureMap> {
        let FeatureMap::Polynomial { degree, input_dim, .. } = self else {
            return Err(CmmError::InvalidField {
                field: "standardization",
                message: "only polynomial maps support standardization".into(),
            });
        };
        let raw = FeatureMap::Polynomial { degree: *degree, input_dim: *input_dim, standardization: None };
        let d = raw.output_dim();
        let mut mean = vec![0.0; d];
        for (s, &w) in data.samples().iter().zip(data.weights()) {
            let phi = raw.featurize_side(s, side)?;
            for (m, v) in mean.iter_mut().zip(&phi) {
                *m += w * v;
            }
        }
        let mut var = vec![0.0; d];
        for (s, &w) in data.samples().iter().zip(data.weights()) {
            let phi = raw.featurize_side(s, side)?;
            for ((v, m), p) in var.iter_mut().zip(&mean).zip(&phi) {
                *v += w * (p - m) * (p - m);
            }
        }
        let mut scales = Vec::with_capacity(d);
        scales.push(FeatureScale { shift: 0.0, scale: 1.0 });
        for j in 1..d {
            let std = var[j].sqrt();
            scales.push(FeatureScale {
                shift: mean[j],
                scale: if std > 1e-12 { std } else { 1.0 },
            });
        }
        Ok(FeatureMap::Polynomial {
            degree: *degree,
            input_dim: *input_dim,
            standardization: Some(scales),
        })
    }
}

/// Reads a bin index out of a float coordinate, requiring it to be within
/// `INDEX_TOL` of an integer in `0..cardinality`.
pub(crate) fn bin_index(v: f64, cardinality: usize) -> Result<usize> {
    let r = v.round();
    if !v.is_finite() || (v - r).abs() > INDEX_TOL || r < 0.0 || r >= cardinality as f64 {
        return Err(CmmError::InvalidField {
            field: "bin index",
            message: format!("{v} is not an integer in 0..{cardinality}"),
        });
    }
    Ok(r as usize)
}

fn n_monomials(dim: usize, degree: usize) -> usize {
    // C(dim + degree, degree)
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for i in 1..=degree as u128 {
        num *= dim as u128 + i;
        den *= i;
    }
    (num / den) as usize
}

/// Exponent tuples with total degree `<= degree`, graded (degree ascending),
/// lexicographic descending within a degree.
fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn fill(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, remaining: u32) {
        if pos + 1 == cur.len() {
            cur[pos] = remaining;
            out.push(cur.clone());
            cur[pos] = 0;
            return;
        }
        for e in (0..=remaining).rev() {
            cur[pos] = e;
            fill(out, cur, pos + 1, remaining - e);
        }
        cur[pos] = 0;
    }
    let mut out = Vec::with_capacity(n_monomials(dim, degree));
    let mut cur = vec![0u32; dim];
    for total in 0..=degree as u32 {
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

/// A linear function over a feature map, constrained to an l2 ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFunction {
    features: FeatureMap,
    weights: Vec<f64>,
    radius: f64,
}

impl ParamFunction {
    /// Zero-initialized function.
    pub fn zeros(features: FeatureMap, radius: f64) -> Result<Self> {
        let dim = features.output_dim();
        Self::with_weights(features, vec![0.0; dim], radius)
    }

    pub fn with_weights(features: FeatureMap, weights: Vec<f64>, radius: f64) -> Result<Self> {
        features.validate()?;
        if weights.len() != features.output_dim() {
            return Err(CmmError::DimensionMismatch(format!(
                "{} weights for a map with output dim {}",
                weights.len(),
                features.output_dim()
            )));
        }
        if !radius.is_finite() || radius <= 0.0 {
            return Err(CmmError::InvalidField {
                field: "radius",
                message: "must be finite and positive".into(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(CmmError::InvalidField {
                field: "weights",
                message: "must be finite".into(),
            });
        }
        Ok(Self { features, weights, radius })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.features.output_dim() {
            return Err(CmmError::DimensionMismatch(format!(
                "{} weights for a map with output dim {}",
                weights.len(),
                self.features.output_dim()
            )));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn eval(&self, input: &[f64]) -> Result<f64> {
        let phi = self.features.featurize(input)?;
        Ok(dot(&self.weights, &phi))
    }

    /// Evaluates on one side of a sample (tabular z maps read the key).
    pub fn eval_side(&self, s: &SampleTriple, side: InputSide) -> Result<f64> {
        let phi = self.features.featurize_side(s, side)?;
        Ok(dot(&self.weights, &phi))
    }

    /// Gradient of the value with respect to the weights: the feature
    /// vector itself.
    pub fn grad_weights(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.features.featurize(input)
    }

    /// Euclidean projection onto the radius ball:
    /// `w <- w * min(1, radius / |w|)`.
    pub fn project(&self) -> ParamFunction {
        let mut out = self.clone();
        project_in_place(&mut out.weights, out.radius);
        out
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CmmError::Parse(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let pf: ParamFunction =
            toml::from_str(text).map_err(|e| CmmError::Parse(e.to_string()))?;
        // Re-validate: serde bypasses the constructor.
        Self::with_weights(pf.features, pf.weights, pf.radius)
    }

    pub fn save_toml_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load_toml_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn project_in_place(weights: &mut [f64], radius: f64) {
    let norm = dot(weights, weights).sqrt();
    if norm > radius {
        let s = radius / norm;
        for w in weights.iter_mut() {
            *w *= s;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted second-moment matrix and residual cross-moment of a feature map
/// over the dataset: `(E[phi phi^T], E[r * phi])` with `r` given per sample.
pub fn gram_and_cross<R>(
    data: &Dataset,
    features: &FeatureMap,
    residual: R,
    side: InputSide,
) -> Result<(DMatrix<f64>, DVector<f64>)>
where
    R: Fn(&SampleTriple) -> f64,
{
    let d = features.output_dim();
    let mut gram = DMatrix::zeros(d, d);
    let mut cross = DVector::zeros(d);
    for (s, &w) in data.samples().iter().zip(data.weights()) {
        let phi = features.featurize_side(s, side)?;
        let r = residual(s);
        for i in 0..d {
            let wpi = w * phi[i];
            cross[i] += wpi * r;
            for j in 0..d {
                gram[(i, j)] += wpi * phi[j];
            }
        }
    }
    Ok((gram, cross))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleTriple;

    #[test]
    fn tabular_eval_picks_the_bin_weight() {
        let f = ParamFunction::with_weights(
            FeatureMap::tabular(3).unwrap(),
            vec![5.0, 6.0, 7.0],
            10.0,
        )
        .unwrap();
        assert_eq!(f.eval(&[1.0]).unwrap(), 6.0);
    }

    #[test]
    fn polynomial_eval_degree_two() {
        let f = ParamFunction::with_weights(
            FeatureMap::polynomial(2, 1).unwrap(),
            vec![1.0, 2.0, 3.0],
            100.0,
        )
        .unwrap();
        // 1 + 2x + 3x^2 at x = 2.
        assert_eq!(f.eval(&[2.0]).unwrap(), 17.0);
    }

    #[test]
    fn rbf_at_its_center() {
        let map = FeatureMap::gaussian_rbf(vec![vec![0.7]], 1.3).unwrap();
        let phi = map.featurize(&[0.7]).unwrap();
        assert_eq!(phi, vec![1.0, 1.0]);
    }

    #[test]
    fn grad_weights_is_the_feature_vector() {
        let tab = ParamFunction::zeros(FeatureMap::tabular(4).unwrap(), 1.0).unwrap();
        assert_eq!(tab.grad_weights(&[2.0]).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);

        let poly = ParamFunction::zeros(FeatureMap::polynomial(2, 1).unwrap(), 1.0).unwrap();
        assert_eq!(poly.grad_weights(&[3.0]).unwrap(), vec![1.0, 3.0, 9.0]);

        let rbf = ParamFunction::zeros(
            FeatureMap::gaussian_rbf(vec![vec![0.0]], 1.0).unwrap(),
            1.0,
        )
        .unwrap();
        let g = rbf.grad_weights(&[1.0]).unwrap();
        assert_eq!(g[0], 1.0);
        assert!((g[1] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn projection_scales_onto_the_ball() {
        let f = ParamFunction::with_weights(
            FeatureMap::polynomial(0, 1).unwrap(),
            vec![10.0],
            5.0,
        )
        .unwrap();
        assert_eq!(f.project().weights(), &[5.0]);

        let inside = ParamFunction::with_weights(
            FeatureMap::polynomial(1, 1).unwrap(),
            vec![0.3, 0.4],
            5.0,
        )
        .unwrap();
        assert_eq!(inside.project().weights(), &[0.3, 0.4]);

        let zero = ParamFunction::zeros(FeatureMap::polynomial(1, 1).unwrap(), 1.0).unwrap();
        assert_eq!(zero.project().weights(), &[0.0, 0.0]);
    }

    #[test]
    fn output_dims() {
        assert_eq!(FeatureMap::tabular(7).unwrap().output_dim(), 7);
        assert_eq!(FeatureMap::polynomial(3, 1).unwrap().output_dim(), 4);
        assert_eq!(FeatureMap::polynomial(2, 2).unwrap().output_dim(), 6);
        assert_eq!(
            FeatureMap::gaussian_rbf(vec![vec![0.0], vec![1.0]], 0.5).unwrap().output_dim(),
            3
        );
    }

    #[test]
    fn monomial_order_is_graded() {
        let expo = monomial_exponents(2, 2);
        assert_eq!(
            expo,
            vec![
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2]
            ]
        );
    }

    #[test]
    fn tabular_rejects_fractional_or_out_of_range_input() {
        let map = FeatureMap::tabular(3).unwrap();
        assert!(map.featurize(&[1.5]).is_err());
        assert!(map.featurize(&[3.0]).is_err());
        assert!(map.featurize(&[-1.0]).is_err());
        assert!(map.featurize(&[2.0 + 1e-9]).is_ok());
    }

    #[test]
    fn eval_rejects_dimension_mismatch() {
        let map = FeatureMap::polynomial(1, 2).unwrap();
        assert!(map.featurize(&[1.0]).is_err());
    }

    #[test]
    fn z_side_tabular_uses_the_key() {
        // z coordinate holds a bin center, not the index.
        let s = SampleTriple::keyed(vec![0.0], 1.0, vec![-2.0], 3);
        let map = FeatureMap::tabular(5).unwrap();
        let phi = map.featurize_side(&s, InputSide::Z).unwrap();
        assert_eq!(phi[3], 1.0);
        // On the x side the coordinate itself is the index.
        let sx = SampleTriple::keyed(vec![1.0], 1.0, vec![0.0], 0);
        let phix = map.featurize_side(&sx, InputSide::X).unwrap();
        assert_eq!(phix[1], 1.0);
    }

    #[test]
    fn gram_onehot_two_keys() {
        let data = Dataset::new(vec![
            SampleTriple::keyed(vec![0.0], 1.0, vec![0.0], 0),
            SampleTriple::keyed(vec![0.0], 1.0, vec![1.0], 1),
        ])
        .unwrap();
        let map = FeatureMap::tabular(2).unwrap();
        let (g, _) = gram_and_cross(&data, &map, |_| 0.0, InputSide::Z).unwrap();
        assert_eq!(g[(0, 0)], 0.5);
        assert_eq!(g[(1, 1)], 0.5);
        assert_eq!(g[(0, 1)], 0.0);
    }

    #[test]
    fn gram_onehot_single_bin_cross_is_mean_residual() {
        let data = Dataset::new(vec![
            SampleTriple::keyed(vec![0.0], 1.0, vec![0.0], 0),
            SampleTriple::keyed(vec![0.0], 3.0, vec![0.0], 0),
        ])
        .unwrap();
        let map = FeatureMap::tabular(1).unwrap();
        let (g, c) = gram_and_cross(&data, &map, |s| s.y, InputSide::Z).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        assert_eq!(c[0], 2.0);
    }

    #[test]
    fn gram_polynomial_by_hand() {
        let data = Dataset::new(vec![
            SampleTriple::new(vec![1.0], 0.0, vec![0.0]),
            SampleTriple::new(vec![2.0], 0.0, vec![0.0]),
        ])
        .unwrap();
        let map = FeatureMap::polynomial(1, 1).unwrap();
        let (g, c) = gram_and_cross(&data, &map, |_| 1.0, InputSide::X).unwrap();
        assert!((g[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((g[(0, 1)] - 1.5).abs() < 1e-15);
        assert!((g[(1, 1)] - 2.5).abs() < 1e-15);
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!((c[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn toml_round_trip() {
        let f = ParamFunction::with_weights(
            FeatureMap::gaussian_rbf(vec![vec![0.0, 1.0], vec![2.0, 3.0]], 0.7).unwrap(),
            vec![0.5, -1.5, 2.5],
            9.0,
        )
        .unwrap();
        let text = f.to_toml_string().unwrap();
        let back = ParamFunction::from_toml_str(&text).unwrap();
        assert_eq!(back, f);

        let tab = ParamFunction::with_weights(
            FeatureMap::tabular(2).unwrap(),
            vec![1.0, 2.0],
            3.0,
        )
        .unwrap();
        let text = tab.to_toml_string().unwrap();
        assert!(text.contains("kind = \"tabular-onehot\""), "{text}");
        assert_eq!(ParamFunction::from_toml_str(&text).unwrap(), tab);
    }

    #[test]
    fn from_toml_revalidates() {
        let bad = "radius = -1.0\nweights = [1.0]\n[features]\nkind = \"tabular-onehot\"\ncardinality = 1\n";
        assert!(ParamFunction::from_toml_str(bad).is_err());
    }

    #[test]
    fn standardization_centers_features() {
        let data = Dataset::new(vec![
            SampleTriple::new(vec![1.0], 0.0, vec![0.0]),
            SampleTriple::new(vec![3.0], 0.0, vec![0.0]),
        ])
        .unwrap();
        let map = FeatureMap::polynomial(1, 1).unwrap();
        let std = map.standardized_for(&data, InputSide::X).unwrap();
        let lo = std.featurize(&[1.0]).unwrap();
        let hi = std.featurize(&[3.0]).unwrap();
        assert_eq!(lo[0], 1.0);
        assert!((lo[1] + 1.0).abs() < 1e-12);
        assert!((hi[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_length_is_checked() {
        let err = ParamFunction::with_weights(
            FeatureMap::tabular(3).unwrap(),
            vec![1.0, 2.0],
            1.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"));
    }
}
