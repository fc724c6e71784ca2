//! Seeded synthetic datasets.
//!
//! Every generator draws from the `Datagen` stream of the spec's seed, so a
//! spec fully determines its output.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KmsError, Result};
use crate::kernels::PointCloud;
use crate::ot::CostMatrix;
use crate::rng::{stream, Stream};

fn default_r_in() -> f64 {
    1.0
}
fn default_r_out() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_cov_d() -> usize {
    200
}
fn default_mix_d() -> usize {
    40
}
fn default_mix_shift() -> f64 {
    0.5
}
fn default_adv_d() -> usize {
    3
}

/// Distribution pair to sample from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dataset {
    /// `x` on the circle of radius `r_in`, `y` on radius `r_out`, both with
    /// isotropic gaussian noise of standard deviation `noise`.
    Circle {
        #[serde(default = "default_r_in")]
        r_in: f64,
        #[serde(default = "default_r_out")]
        r_out: f64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// `x ~ N(0, I_d)`, `y ~ N(0, I_d + rho E)` with `E` the all-ones matrix.
    GaussCovShift {
        #[serde(default = "default_cov_d")]
        d: usize,
        rho: f64,
    },
    /// `x ~ 1/2 N(0, I) + 1/2 N(shift 1, I)`; `y` is the same mixture with
    /// both covariances replaced by `I + rho E`.
    GaussMixture {
        #[serde(default = "default_mix_d")]
        d: usize,
        #[serde(default)]
        rho: f64,
        #[serde(default = "default_mix_shift")]
        shift: f64,
    },
    /// Both samples i.i.d. from the fair coin on `{0, 1}`.
    #[serde(rename = "two_point_1d")]
    TwoPoint1d,
    /// `x` holds `n` standard gaussian vectors `A_1..A_n`, `y` holds `n`
    /// independent probe points; the circulant cost family built from the
    /// `A_i` is available through [`circulant_instance`].
    CirculantAdversarial {
        #[serde(default = "default_adv_d")]
        d: usize,
    },
}

/// A dataset with its size and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub dataset: Dataset,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(dataset: Dataset, n: usize, seed: u64) -> Self {
        Self { dataset, n, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KmsError::InvalidParameter(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        match self.dataset {
            Dataset::Circle { r_in, r_out, noise } => {
                if !(r_in > 0.0 && r_out > 0.0) {
                    return bad(format!("radii must be positive, got {r_in} and {r_out}"));
                }
                if !(noise >= 0.0 && noise.is_finite()) {
                    return bad(format!("noise must be nonnegative, got {noise}"));
                }
            }
            Dataset::GaussCovShift { d, rho } | Dataset::GaussMixture { d, rho, .. } => {
                if d == 0 {
                    return bad("dimension must be positive".into());
                }
                if !(rho >= 0.0 && rho.is_finite()) {
                    return bad(format!("rho must be nonnegative, got {rho}"));
                }
            }
            Dataset::TwoPoint1d => {}
            Dataset::CirculantAdversarial { d } => {
                if d == 0 {
                    return bad("dimension must be positive".into());
                }
            }
        }
        if let Dataset::GaussMixture { shift, .. } = self.dataset {
            if !shift.is_finite() {
                return bad("shift must be finite".into());
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.dataset {
            Dataset::Circle { .. } => 2,
            Dataset::GaussCovShift { d, .. } | Dataset::GaussMixture { d, .. } => d,
            Dataset::TwoPoint1d => 1,
            Dataset::CirculantAdversarial { d } => d,
        }
    }
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `z + sqrt(rho) xi 1` has covariance `I + rho E`.
fn correlated_gaussian(rng: &mut ChaCha20Rng, d: usize, rho: f64, out: &mut Vec<f64>) {
    let common = rho.sqrt() * normal(rng);
    out.extend((0..d).map(|_| normal(rng) + common));
}

/// Sample the two clouds described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<(PointCloud, PointCloud)> {
    spec.validate()?;
    let n = spec.n;
    let d = spec.dim();
    let mut rng = stream(spec.seed, Stream::Datagen);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n * d);
    match spec.dataset {
        Dataset::Circle { r_in, r_out, noise } => {
            for (radius, out) in [(r_in, &mut x), (r_out, &mut y)] {
                for _ in 0..n {
                    let theta = rng.random::<f64>() * std::f64::consts::TAU;
                    out.push(radius * theta.cos() + noise * normal(&mut rng));
                    out.push(radius * theta.sin() + noise * normal(&mut rng));
                }
            }
        }
        Dataset::GaussCovShift { rho, .. } => {
            for _ in 0..n {
                correlated_gaussian(&mut rng, d, 0.0, &mut x);
            }
            for _ in 0..n {
                correlated_gaussian(&mut rng, d, rho, &mut y);
            }
        }
        Dataset::GaussMixture { rho, shift, .. } => {
            for (r, out) in [(0.0, &mut x), (rho, &mut y)] {
                for _ in 0..n {
                    let offset = if rng.random::<bool>() { shift } else { 0.0 };
                    let start = out.len();
                    correlated_gaussian(&mut rng, d, r, out);
                    out[start..].iter_mut().for_each(|v| *v += offset);
                }
            }
        }
        Dataset::TwoPoint1d => {
            for out in [&mut x, &mut y] {
                out.extend((0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }));
            }
        }
        Dataset::CirculantAdversarial { .. } => {
            x.extend((0..n * d).map(|_| normal(&mut rng)));
            y.extend((0..n * d).map(|_| normal(&mut rng)));
        }
    }
    Ok((PointCloud::new(x, n, d)?, PointCloud::new(y, n, d)?))
}

/// The circulant family: entry `(i, j)` is `A_{(j - i) mod n}`, so row `i`
/// is the first row shifted circularly by `i` places.
#[derive(Clone, Debug, PartialEq)]
pub struct CirculantInstance {
    vectors: Vec<DVector<f64>>,
}

pub fn circulant_instance(a: &[Vec<f64>]) -> Result<CirculantInstance> {
    let Some(first) = a.first() else {
        return Err(KmsError::InvalidParameter(
            "need at least one vector".into(),
        ));
    };
    if let Some(bad) = a.iter().find(|v| v.len() != first.len()) {
        return Err(KmsError::DimensionMismatch {
            expected: first.len(),
            actual: bad.len(),
        });
    }
    Ok(CirculantInstance {
        vectors: a.iter().map(|v| DVector::from_column_slice(v)).collect(),
    })
}

impl CirculantInstance {
    pub fn n(&self) -> usize {
        self.vectors.len()
    }

    /// Index into `A` of entry `(i, j)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        let n = self.n();
        (j + n - i % n) % n
    }

    pub fn entry(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.vectors[self.index(i, j)]
    }

    /// Costs `(A_{index(i,j)}^T w)^2`.
    pub fn costs(&self, w: &DVector<f64>) -> Result<CostMatrix> {
        let d = self.vectors[0].len();
        if w.len() != d {
            return Err(KmsError::DimensionMismatch {
                expected: d,
                actual: w.len(),
            });
        }
        let proj: Vec<f64> = self.vectors.iter().map(|v| v.dot(w).powi(2)).collect();
        CostMatrix::from_fn(self.n(), |i, j| proj[self.index(i, j)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_roundtrip() {
        let spec = DatasetSpec::new(
            Dataset::Circle {
                r_in: 1.0,
                r_out: 2.0,
                noise: 0.1,
            },
            10,
            3,
        );
        let s = serde_json::to_string(&spec).unwrap();
        let back: DatasetSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let parsed: DatasetSpec =
            serde_json::from_str(r#"{"kind":"gauss_cov_shift","rho":0.06,"n":5}"#).unwrap();
        assert_eq!(parsed.dim(), 200);
    }

    #[test]
    fn invalid_parameters() {
        let spec = DatasetSpec::new(Dataset::GaussCovShift { d: 3, rho: -0.1 }, 5, 0);
        assert!(generate(&spec).is_err());
        let spec = DatasetSpec::new(
            Dataset::Circle {
                r_in: 0.0,
                r_out: 1.0,
                noise: 0.1,
            },
            5,
            0,
        );
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn circulant_rows_shift() {
        let inst = circulant_instance(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let row2: Vec<f64> = (0..3).map(|j| inst.entry(1, j)[0]).collect();
        assert_eq!(row2, vec![3.0, 1.0, 2.0]);
        assert!(circulant_instance(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
