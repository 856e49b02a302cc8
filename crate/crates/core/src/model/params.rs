use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{ArchConfig, InitScheme};
use super::network::Plan;
use super::real::Real;
use crate::error::{Error, Result};

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// e.g. `block2.conv1.weight`
    pub name: String,
    /// Owning layer id, e.g. `block2`.
    pub layer: String,
    pub offset: usize,
    pub len: usize,
    /// Fan-in used for initialization; zero for biases.
    pub fan_in: usize,
}

impl Segment {
    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter vector of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    arch: ArchConfig,
    values: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Initializes parameters deterministically from `arch.seed`.
    pub fn build(arch: &ArchConfig) -> Result<Self> {
        let plan = Plan::new(arch)?;
        let mut values = vec![T::zero(); plan.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let gain = match arch.init {
            InitScheme::HeNormal => 2.0,
            InitScheme::LecunNormal => 1.0,
            InitScheme::Zeros => 0.0,
        };
        if gain > 0.0 {
            for seg in plan.segments.iter().filter(|s| !s.is_bias()) {
                let std = (gain / seg.fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                for v in &mut values[seg.range()] {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(Self {
            arch: arch.clone(),
            values,
        })
    }

    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        let n = Plan::new(arch)?.n_params;
        Ok(Self {
            arch: arch.clone(),
            values: vec![T::zero(); n],
        })
    }

    pub fn from_values(arch: &ArchConfig, values: Vec<T>) -> Result<Self> {
        let n = Plan::new(arch)?.n_params;
        if values.len() != n {
            return Err(Error::Dimension(format!(
                "{} values for an architecture with {n} parameters",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: "parameters".into(),
            });
        }
        Ok(Self {
            arch: arch.clone(),
            values,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Segment table of this parameter vector.
    pub fn segments(&self) -> Vec<Segment> {
        Plan::new(&self.arch)
            .expect("arch validated at construction")
            .segments
    }

    pub fn segment(&self, name: &str) -> Option<Segment> {
        self.segments().into_iter().find(|s| s.name == name)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Gradient with the same layout as [`ModelParams`]. Always `f64` so that
/// sums over many frames do not lose precision in 32-bit mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(n: usize) -> Self {
        GradVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self += alpha * x`
    pub fn axpy<T: Real>(&mut self, alpha: f64, x: &[T]) {
        debug_assert_eq!(self.0.len(), x.len());
        for (s, v) in self.0.iter_mut().zip(x) {
            *s += alpha * v.f64();
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `||self - other|| / max(||other||, tiny)`
    pub fn rel_l2_err(&self, other: &GradVector) -> f64 {
        let diff: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.norm().max(f64::MIN_POSITIVE)
    }

    pub fn bytes(&self) -> usize {
        self.0.len() * std::mem::size_of::<f64>()
    }
}
