//! Sample containers and weighted empirical moments.
//!
//! Everything downstream consumes a [`Dataset`]: a finite, validated
//! collection of `(x, y, z)` triples. Two usage modes share the type:
//!
//! - sampled data, where every row has weight `1/n`;
//! - exact-population data, where the rows enumerate a finite support and
//!   the weights are the true probabilities. Identities that hold in
//!   population then hold on the dataset to rounding error, which is how
//!   the equilibrium tests avoid sampling noise.
//!
//! Weights are normalized to sum to one at construction. Expectations use
//! Neumaier-compensated summation so large-`n` aggregates keep absolute
//! error near machine precision.

use std::io;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CmmError, Result};

/// One observation.
///
/// `z_key` is the bin index when the conditioning variable is discrete.
/// `weight` is an optional raw sampling weight; missing weights default to
/// uniform and all weights are normalized by [`Dataset`] construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriple {
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
    pub z_key: Option<usize>,
    pub weight: Option<f64>,
}

impl SampleTriple {
    pub fn new(x: Vec<f64>, y: f64, z: Vec<f64>) -> Self {
        Self { x, y, z, z_key: None, weight: None }
    }

    pub fn keyed(x: Vec<f64>, y: f64, z: Vec<f64>, z_key: usize) -> Self {
        Self { x, y, z, z_key: Some(z_key), weight: None }
    }

    pub fn weighted(mut self, weight: f64) -> Self {
        self.weight = Some(weight);
        self
    }
}

/// Validated sample collection. Construction normalizes weights to sum to
/// one and checks dimension consistency, finiteness, and key ranges.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<SampleTriple>,
    weights: Vec<f64>,
    dx: usize,
    dz: usize,
    z_cardinality: Option<usize>,
    explicit_weights: bool,
}

impl Dataset {
    /// Builds a dataset, inferring `z_cardinality` as `max(z_key) + 1` when
    /// every sample carries a key (and leaving it unset when none do).
    pub fn new(samples: Vec<SampleTriple>) -> Result<Self> {
        let keyed = samples.iter().filter(|s| s.z_key.is_some()).count();
        let cardinality = if keyed == 0 {
            None
        } else if keyed == samples.len() {
            Some(samples.iter().map(|s| s.z_key.unwrap() + 1).max().unwrap_or(1))
        } else {
            return Err(CmmError::InvalidField {
                field: "z_key",
                message: "either every sample or no sample may carry a z_key".into(),
            });
        };
        Self::build(samples, cardinality)
    }

    /// Builds a dataset with a declared bin count for discrete `z`. Trailing
    /// empty bins are allowed; every sample must carry `z_key < cardinality`.
    pub fn with_z_cardinality(samples: Vec<SampleTriple>, cardinality: usize) -> Result<Self> {
        if cardinality == 0 {
            return Err(CmmError::InvalidField {
                field: "z_cardinality",
                message: "must be at least 1".into(),
            });
        }
        Self::build(samples, Some(cardinality))
    }

    fn build(samples: Vec<SampleTriple>, z_cardinality: Option<usize>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CmmError::EmptyDataset);
        }
        let dx = samples[0].x.len();
        let dz = samples[0].z.len();
        if dx == 0 || dz == 0 {
            return Err(CmmError::DimensionMismatch(
                "x and z must each have at least one coordinate".into(),
            ));
        }
        let explicit_weights = samples.iter().any(|s| s.weight.is_some());
        let n = samples.len();
        let mut weights = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != dx || s.z.len() != dz {
                return Err(CmmError::DimensionMismatch(format!(
                    "sample {i}: expected dx={dx}, dz={dz}, got dx={}, dz={}",
                    s.x.len(),
                    s.z.len()
                )));
            }
            if !s.y.is_finite()
                || s.x.iter().any(|v| !v.is_finite())
                || s.z.iter().any(|v| !v.is_finite())
            {
                return Err(CmmError::InvalidField {
                    field: "sample",
                    message: format!("sample {i} contains a non-finite value"),
                });
            }
            if let Some(k) = z_cardinality {
                match s.z_key {
                    Some(key) if key < k => {}
                    Some(key) => {
                        return Err(CmmError::InvalidField {
                            field: "z_key",
                            message: format!("sample {i}: key {key} out of range 0..{k}"),
                        })
                    }
                    None => {
                        return Err(CmmError::InvalidField {
                            field: "z_key",
                            message: format!(
                                "sample {i}: missing key on a dataset with z_cardinality set"
                            ),
                        })
                    }
                }
            }
            let w = s.weight.unwrap_or(1.0 / n as f64);
            if !w.is_finite() || w < 0.0 {
                return Err(CmmError::InvalidField {
                    field: "weight",
                    message: format!("sample {i}: weights must be finite and nonnegative"),
                });
            }
            weights.push(w);
        }
        let total: f64 = {
            let mut acc = Accumulator::default();
            for &w in &weights {
                acc.add(w);
            }
            acc.value()
        };
        if total <= 0.0 {
            return Err(CmmError::InvalidField {
                field: "weight",
                message: "weights must have positive total mass".into(),
            });
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { samples, weights, dx, dz, z_cardinality, explicit_weights })
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn dz(&self) -> usize {
        self.dz
    }

    pub fn z_cardinality(&self) -> Option<usize> {
        self.z_cardinality
    }

    pub fn samples(&self) -> &[SampleTriple] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &SampleTriple {
        &self.samples[i]
    }

    /// Normalized weights; sums to 1 within rounding.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Writes the dataset as CSV with header
    /// `x_0..x_{dx-1}, y, z_0..z_{dz-1}[, z_key][, weight]`.
    ///
    /// The `z_key` column is present iff `z_cardinality` is set; the
    /// `weight` column iff weights were given explicitly (the stored,
    /// normalized values are written).
    pub fn to_csv_writer<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dx).map(|i| format!("x_{i}")).collect();
        header.push("y".into());
        header.extend((0..self.dz).map(|i| format!("z_{i}")));
        if self.z_cardinality.is_some() {
            header.push("z_key".into());
        }
        if self.explicit_weights {
            header.push("weight".into());
        }
        w.write_record(&header)?;
        for (s, &wt) in self.samples.iter().zip(&self.weights) {
            let mut rec: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
            rec.push(s.y.to_string());
            rec.extend(s.z.iter().map(|v| v.to_string()));
            if self.z_cardinality.is_some() {
                rec.push(s.z_key.unwrap().to_string());
            }
            if self.explicit_weights {
                rec.push(wt.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_csv_writer(f)
    }

    /// Loads a dataset written in the CSV schema above.
    ///
    /// `z_cardinality` overrides the inferred bin count (needed when the
    /// file does not mention trailing empty bins); pass `None` to infer
    /// `max(z_key) + 1` from the data.
    pub fn from_csv_reader<R: io::Read>(input: R, z_cardinality: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let headers = rdr.headers()?.clone();
        let layout = CsvLayout::from_headers(&headers)?;
        if z_cardinality.is_some() && !layout.has_z_key {
            return Err(CmmError::Parse(
                "z_cardinality given but the file has no z_key column".into(),
            ));
        }
        let mut samples = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2; // header is row 1
            let rec = rec.map_err(|e| CmmError::Parse(format!("row {row}: {e}")))?;
            samples.push(layout.parse_row(&rec, row)?);
        }
        match z_cardinality {
            Some(k) => Self::with_z_cardinality(samples, k),
            None => Self::new(samples),
        }
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P, z_cardinality: Option<usize>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_csv_reader(f, z_cardinality)
    }
}

struct CsvLayout {
    dx: usize,
    dz: usize,
    has_z_key: bool,
    has_weight: bool,
}

impl CsvLayout {
    fn from_headers(headers: &csv::StringRecord) -> Result<Self> {
        let names: Vec<&str> = headers.iter().collect();
        let mut pos = 0usize;
        let mut dx = 0usize;
        while pos < names.len() && names[pos] == format!("x_{dx}") {
            dx += 1;
            pos += 1;
        }
        if dx == 0 {
            return Err(CmmError::Parse("header must start with x_0".into()));
        }
        if pos >= names.len() || names[pos] != "y" {
            return Err(CmmError::Parse("missing y column after x block".into()));
        }
        pos += 1;
        let mut dz = 0usize;
        while pos < names.len() && names[pos] == format!("z_{dz}") {
            dz += 1;
            pos += 1;
        }
        if dz == 0 {
            return Err(CmmError::Parse("missing z_0 column after y".into()));
        }
        let has_z_key = pos < names.len() && names[pos] == "z_key";
        if has_z_key {
            pos += 1;
        }
        let has_weight = pos < names.len() && names[pos] == "weight";
        if has_weight {
            pos += 1;
        }
        if pos != names.len() {
            return Err(CmmError::Parse(format!("unexpected column '{}'", names[pos])));
        }
        Ok(Self { dx, dz, has_z_key, has_weight })
    }

    fn width(&self) -> usize {
        self.dx + 1 + self.dz + usize::from(self.has_z_key) + usize::from(self.has_weight)
    }

    fn parse_row(&self, rec: &csv::StringRecord, row: usize) -> Result<SampleTriple> {
        if rec.len() != self.width() {
            return Err(CmmError::Parse(format!(
                "row {row}: expected {} fields, got {}",
                self.width(),
                rec.len()
            )));
        }
        let num = |field: &str, name: &str| -> Result<f64> {
            field
                .trim()
                .parse::<f64>()
                .map_err(|_| CmmError::Parse(format!("row {row}: non-numeric {name} '{field}'")))
        };
        let mut it = rec.iter();
        let mut x = Vec::with_capacity(self.dx);
        for i in 0..self.dx {
            x.push(num(it.next().unwrap(), &format!("x_{i}"))?);
        }
        let y = num(it.next().unwrap(), "y")?;
        let mut z = Vec::with_capacity(self.dz);
        for i in 0..self.dz {
            z.push(num(it.next().unwrap(), &format!("z_{i}"))?);
        }
        let z_key = if self.has_z_key {
            let field = it.next().unwrap();
            Some(field.trim().parse::<usize>().map_err(|_| {
                CmmError::Parse(format!("row {row}: non-integer z_key '{field}'"))
            })?)
        } else {
            None
        };
        let weight = if self.has_weight {
            Some(num(it.next().unwrap(), "weight")?)
        } else {
            None
        };
        Ok(SampleTriple { x, y, z, z_key, weight })
    }
}

/// Weighted empirical expectation of `g` over the dataset,
/// `sum_i w_i * g(sample_i)`, with compensated summation.
pub fn empirical_expectation<G>(data: &Dataset, g: G) -> f64
where
    G: Fn(&SampleTriple) -> f64,
{
    let mut acc = Accumulator::default();
    for (s, &w) in data.samples.iter().zip(&data.weights) {
        acc.add(w * g(s));
    }
    acc.value()
}

/// Partition of sample indices by `z_key`. Bins that received no samples are
/// present with empty index lists so callers see the declared cardinality.
#[derive(Debug, Clone)]
pub struct ZGroups {
    indices: Vec<Vec<usize>>,
}

impl ZGroups {
    pub fn cardinality(&self) -> usize {
        self.indices.len()
    }

    /// Number of samples landing in bin `z`.
    pub fn count(&self, z: usize) -> usize {
        self.indices[z].len()
    }

    pub fn indices(&self, z: usize) -> &[usize] {
        &self.indices[z]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.indices.iter().enumerate().map(|(z, v)| (z, v.as_slice()))
    }
}

/// Groups samples by their discrete key. Errors with "dataset not discrete
/// in z" when `z_cardinality` is unset.
pub fn group_by_z(data: &Dataset) -> Result<ZGroups> {
    let k = data.z_cardinality().ok_or(CmmError::NotDiscreteInZ)?;
    let mut indices = vec![Vec::new(); k];
    for (i, s) in data.samples().iter().enumerate() {
        indices[s.z_key.expect("validated at construction")].push(i);
    }
    Ok(ZGroups { indices })
}

/// Total normalized weight per bin (the empirical `P(z)`).
pub fn group_masses(data: &Dataset, groups: &ZGroups) -> Vec<f64> {
    let mut masses = vec![0.0; groups.cardinality()];
    for (z, idx) in groups.iter() {
        let mut acc = Accumulator::default();
        for &i in idx {
            acc.add(data.weight(i));
        }
        masses[z] = acc.value();
    }
    masses
}

/// Weighted mean of the residual `y - h(x)` within each z bin.
///
/// Bins with no samples (or zero mass) map to `0.0` by convention, which is
/// also the value the exact best-response multiplier takes there.
pub fn conditional_residual_means<H>(data: &Dataset, h: H) -> Result<Vec<f64>>
where
    H: Fn(&[f64]) -> f64,
{
    let groups = group_by_z(data)?;
    let mut means = vec![0.0; groups.cardinality()];
    for (z, idx) in groups.iter() {
        let mut num = Accumulator::default();
        let mut den = Accumulator::default();
        for &i in idx {
            let s = data.sample(i);
            let w = data.weight(i);
            num.add(w * (s.y - h(&s.x)));
            den.add(w);
        }
        let mass = den.value();
        means[z] = if mass > 0.0 { num.value() / mass } else { 0.0 };
    }
    Ok(means)
}

/// Seeded handle producing platform-stable, independent RNG streams.
///
/// Stream `i` is the ChaCha12 stream with index `i` under the seed, so
/// fan-out loops (one stream per trial) stay reproducible regardless of
/// execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngHandle {
    seed: u64,
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self) -> ChaCha12Rng {
        self.stream(0)
    }

    pub fn stream(&self, idx: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(idx);
        rng
    }
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Accumulator {
    sum: f64,
    comp: f64,
}

impl Accumulator {
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
