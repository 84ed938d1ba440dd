//! Preference vectors on the 2-simplex, Dirichlet sampling for training and
//! deterministic grids for front sweeps.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("preference vector [{0}, {1}] is not on the 2-simplex")]
    InvalidPreference(f64, f64),
    #[error("Dirichlet parameters must be strictly positive, got [{0}, {1}]")]
    InvalidParams(f64, f64),
    #[error("preference grid needs at least 2 points, got {0}")]
    InvalidGrid(usize),
    #[error("grid clamp must lie in [0, 0.5), got {0}")]
    InvalidClamp(f64),
}

/// A point `[pi_c, pi_o]` on the 2-simplex weighting the click and order
/// objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector {
    pi_c: f64,
    pi_o: f64,
}

impl PreferenceVector {
    pub const SIMPLEX_TOL: f64 = 1e-12;

    pub fn new(pi_c: f64, pi_o: f64) -> Result<Self, SamplingError> {
        let valid = pi_c >= 0.0
            && pi_o >= 0.0
            && pi_c.is_finite()
            && pi_o.is_finite()
            && (pi_c + pi_o - 1.0).abs() <= Self::SIMPLEX_TOL;
        if valid {
            Ok(Self { pi_c, pi_o })
        } else {
            Err(SamplingError::InvalidPreference(pi_c, pi_o))
        }
    }

    /// Build from the order weight alone; `pi_c` is the complement.
    pub fn from_pi_o(pi_o: f64) -> Result<Self, SamplingError> {
        Self::new(1.0 - pi_o, pi_o)
    }

    pub fn pi_c(&self) -> f64 {
        self.pi_c
    }

    pub fn pi_o(&self) -> f64 {
        self.pi_o
    }
}

/// Parameters of the 2-dimensional Dirichlet used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    beta: [f64; 2],
}

impl DirichletParams {
    pub fn new(beta_c: f64, beta_o: f64) -> Result<Self, SamplingError> {
        if beta_c > 0.0 && beta_o > 0.0 && beta_c.is_finite() && beta_o.is_finite() {
            Ok(Self {
                beta: [beta_c, beta_o],
            })
        } else {
            Err(SamplingError::InvalidParams(beta_c, beta_o))
        }
    }

    pub fn beta(&self) -> [f64; 2] {
        self.beta
    }
}

impl Default for DirichletParams {
    /// `beta = [1/2, 1/2]`, the fixed training choice.
    fn default() -> Self {
        Self { beta: [0.5, 0.5] }
    }
}

/// Draw one preference vector from `Dir(beta)` via two independent gamma
/// draws normalized to sum 1. The marginal of `pi_c` is `Beta(beta_c, beta_o)`.
pub fn sample_preference<R: Rng + ?Sized>(
    rng: &mut R,
    params: &DirichletParams,
) -> PreferenceVector {
    let [bc, bo] = params.beta();
    let gamma_c = Gamma::new(bc, 1.0).expect("validated shape");
    let gamma_o = Gamma::new(bo, 1.0).expect("validated shape");
    loop {
        let gc: f64 = gamma_c.sample(rng);
        let go: f64 = gamma_o.sample(rng);
        let sum = gc + go;
        // Underflow to 0 + 0 is possible at shape 1/2; redraw.
        if sum > 0.0 && sum.is_finite() {
            let pi_c = gc / sum;
            return PreferenceVector {
                pi_c,
                pi_o: 1.0 - pi_c,
            };
        }
    }
}

/// `n` preference vectors with `pi_o` evenly spaced over `[clamp, 1 - clamp]`,
/// strictly increasing. `clamp = 0` yields the unclamped grid used by the
/// pure-click recall protocol.
pub fn preference_grid(n: usize, clamp: f64) -> Result<Vec<PreferenceVector>, SamplingError> {
    if n < 2 {
        return Err(SamplingError::InvalidGrid(n));
    }
    if !(0.0..0.5).contains(&clamp) {
        return Err(SamplingError::InvalidClamp(clamp));
    }
    let span = 1.0 - 2.0 * clamp;
    let step = span / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let pi_o = if i == n - 1 {
                1.0 - clamp
            } else {
                clamp + i as f64 * step
            };
            PreferenceVector::from_pi_o(pi_o)
        })
        .collect()
}

/// Default clamp keeping sweep endpoints away from the simplex corners.
pub const DEFAULT_GRID_CLAMP: f64 = 1e-3;
