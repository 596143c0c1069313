//! Discrete-time control environments.
//!
//! Continuous plants are discretized with one RK4 step per control period
//! (zero-order hold on the action). Rewards follow `scale·(R − xᵀQx)` inside
//! the domain and a single `−scale·c` on the step that leaves it, after which
//! the episode ends.

mod dynamics;

pub use dynamics::{
    cartpole_dynamics, pendulum_dynamics, quad2d_dynamics, rk4_step, CartpoleParams, PendulumParams,
    Quad2dParams,
};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{cholesky, Matrix};

pub const DEFAULT_EPISODE_CAP: usize = 500;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("state {state:?} lies outside the domain")]
    OutsideDomain { state: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("integration produced a non-finite state")]
    NonFiniteState,
    #[error("invalid environment: {0}")]
    InvalidSpec(String),
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
}

/// Axis-aligned box `[low, high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl BoxSet {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self, EnvError> {
        if low.len() != high.len() {
            return Err(EnvError::DimensionMismatch {
                expected: low.len(),
                got: high.len(),
            });
        }
        if low.iter().zip(&high).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(EnvError::InvalidSpec(format!("bad box bounds {low:?} / {high:?}")));
        }
        Ok(Self { low, high })
    }

    pub fn symmetric(half_widths: &[f64]) -> Self {
        Self {
            low: half_widths.iter().map(|h| -h).collect(),
            high: half_widths.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.low.iter().zip(&self.high)).all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn contains_origin_in_interior(&self) -> bool {
        self.low.iter().zip(&self.high).all(|(l, h)| *l < 0.0 && 0.0 < *h)
    }

    pub fn clip(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    /// Largest absolute coordinate per dimension.
    pub fn half_widths(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| l.abs().max(h.abs())).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn is_subset_of(&self, other: &BoxSet) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| other.low[i] <= self.low[i] && self.high[i] <= other.high[i])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(&l, &h)| if l == h { l } else { rng.random_range(l..h) })
            .collect()
    }
}

/// The plant behind an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plant {
    Pendulum(PendulumParams),
    Cartpole(CartpoleParams),
    Quad2d(Quad2dParams),
    /// Discrete linear map `x' = A·x + B·u` (no integration).
    Linear { a: Matrix, b: Matrix },
}

impl Plant {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Plant::Pendulum(_) => (2, 1),
            Plant::Cartpole(_) => (4, 1),
            Plant::Quad2d(_) => (6, 2),
            Plant::Linear { a, b } => (a.rows(), b.cols()),
        }
    }

    pub fn derivative(&self, x: &[f64], u: &[f64]) -> Option<Vec<f64>> {
        match self {
            Plant::Pendulum(p) => Some(pendulum_dynamics(p, x, u)),
            Plant::Cartpole(p) => Some(cartpole_dynamics(p, x, u)),
            Plant::Quad2d(p) => Some(quad2d_dynamics(p, x, u)),
            Plant::Linear { .. } => None,
        }
    }

    /// Physical parameters as a name → value map.
    pub fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match self {
            Plant::Pendulum(p) => vec![
                ("mass", p.mass),
                ("length", p.length),
                ("gravity", p.gravity),
                ("damping", p.damping),
            ],
            Plant::Cartpole(p) => vec![
                ("cart_mass", p.cart_mass),
                ("pole_mass", p.pole_mass),
                ("pole_half_length", p.pole_half_length),
                ("gravity", p.gravity),
            ],
            Plant::Quad2d(p) => vec![
                ("mass", p.mass),
                ("inertia", p.inertia),
                ("arm", p.arm),
                ("gravity", p.gravity),
            ],
            Plant::Linear { .. } => vec![],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Overrides parameters by name; unknown names are rejected.
    pub fn set_params(&mut self, overrides: &BTreeMap<String, f64>) -> Result<(), EnvError> {
        for (key, &value) in overrides {
            let slot = match (&mut *self, key.as_str()) {
                (Plant::Pendulum(p), "mass") => &mut p.mass,
                (Plant::Pendulum(p), "length") => &mut p.length,
                (Plant::Pendulum(p), "gravity") => &mut p.gravity,
                (Plant::Pendulum(p), "damping") => &mut p.damping,
                (Plant::Cartpole(p), "cart_mass") => &mut p.cart_mass,
                (Plant::Cartpole(p), "pole_mass") => &mut p.pole_mass,
                (Plant::Cartpole(p), "pole_half_length") => &mut p.pole_half_length,
                (Plant::Cartpole(p), "gravity") => &mut p.gravity,
                (Plant::Quad2d(p), "mass") => &mut p.mass,
                (Plant::Quad2d(p), "inertia") => &mut p.inertia,
                (Plant::Quad2d(p), "arm") => &mut p.arm,
                (Plant::Quad2d(p), "gravity") => &mut p.gravity,
                _ => return Err(EnvError::InvalidSpec(format!("unknown physical parameter `{key}`"))),
            };
            *slot = value;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub plant: Plant,
    pub dt: f64,
    pub domain: BoxSet,
    pub action_bounds: BoxSet,
    pub q_reward: Matrix,
    pub r_const: f64,
    pub terminal_penalty: f64,
    pub reward_scale: f64,
    pub init_box: BoxSet,
    pub max_episode_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    /// Unscaled state cost `xᵀQx` of the departing state.
    pub raw_cost: f64,
}

/// `Q = diag(1 / (n · w_i²))` for half-widths `w_i`, so `max_D xᵀQx = 1`.
pub fn normalized_q(domain: &BoxSet) -> Matrix {
    let n = domain.dim() as f64;
    let diag: Vec<f64> = domain
        .low
        .iter()
        .zip(&domain.high)
        .map(|(l, h)| {
            let w = l.abs().max(h.abs());
            1.0 / (n * w * w)
        })
        .collect();
    Matrix::from_diagonal(&diag)
}

impl EnvSpec {
    /// Assembles a spec with the default reward constants and a normalized Q.
    pub fn with_defaults(name: &str, plant: Plant, dt: f64, domain: BoxSet, action_bounds: BoxSet, init_box: BoxSet) -> Self {
        let q_reward = normalized_q(&domain);
        Self {
            name: name.to_string(),
            plant,
            dt,
            domain,
            action_bounds,
            q_reward,
            r_const: 1.0,
            terminal_penalty: 10.0,
            reward_scale: 2.0,
            init_box,
            max_episode_steps: DEFAULT_EPISODE_CAP,
        }
    }

    pub fn pendulum() -> Self {
        Self::with_defaults(
            "pendulum",
            Plant::Pendulum(PendulumParams::default()),
            0.02,
            BoxSet::symmetric(&[PI / 2.0, 8.0]),
            BoxSet::symmetric(&[6.0]),
            BoxSet::symmetric(&[0.5, 0.5]),
        )
    }

    pub fn cartpole() -> Self {
        Self::with_defaults(
            "cartpole",
            Plant::Cartpole(CartpoleParams::default()),
            0.02,
            BoxSet::symmetric(&[5.0, 10.0, PI / 2.0, 10.0]),
            BoxSet::symmetric(&[10.0]),
            BoxSet::symmetric(&[0.5, 0.5, 0.3, 0.5]),
        )
    }

    pub fn quad2d() -> Self {
        Self::with_defaults(
            "quad2d",
            Plant::Quad2d(Quad2dParams::default()),
            0.02,
            BoxSet::symmetric(&[5.0, 5.0, PI / 2.0, 10.0, 10.0, 20.0]),
            BoxSet::symmetric(&[3.0, 3.0]),
            BoxSet::symmetric(&[1.0, 1.0, 0.3, 0.5, 0.5, 0.5]),
        )
    }

    /// Linear plant `x' = A·x + B·u` on a box domain.
    pub fn linear(a: Matrix, b: Matrix, domain_half_width: f64, action_half_width: f64, init_half_width: f64) -> Self {
        let (n, m) = (a.rows(), b.cols());
        Self::with_defaults(
            "linear",
            Plant::Linear { a, b },
            1.0,
            BoxSet::symmetric(&vec![domain_half_width; n]),
            BoxSet::symmetric(&vec![action_half_width; m]),
            BoxSet::symmetric(&vec![init_half_width; n]),
        )
    }

    /// The scalar test plant `x' = 0.9x + 0.1u`.
    pub fn linear_scalar() -> Self {
        Self::linear(Matrix::from_rows(&[&[0.9]]), Matrix::from_rows(&[&[0.1]]), 2.0, 1.0, 1.0)
    }

    pub fn by_name(name: &str) -> Result<Self, EnvError> {
        match name {
            "pendulum" => Ok(Self::pendulum()),
            "cartpole" => Ok(Self::cartpole()),
            "quad2d" => Ok(Self::quad2d()),
            "linear" => Ok(Self::linear_scalar()),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.plant.dims().0
    }

    pub fn action_dim(&self) -> usize {
        self.plant.dims().1
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let (n, m) = self.plant.dims();
        let bad = |what: &str| Err(EnvError::InvalidSpec(what.to_string()));
        if let Plant::Linear { a, b } = &self.plant {
            if !a.is_square() || b.rows() != n {
                return bad("linear plant needs square A and B with matching rows");
            }
        }
        if self.domain.dim() != n || self.init_box.dim() != n || self.action_bounds.dim() != m {
            return bad("box dimensions do not match the plant");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !self.domain.contains_origin_in_interior() {
            return bad("origin must lie in the interior of the domain");
        }
        if !self.action_bounds.contains_origin_in_interior() {
            return bad("zero action must lie in the interior of the action bounds");
        }
        if !self.init_box.is_subset_of(&self.domain) {
            return bad("init_box must lie inside the domain");
        }
        if self.q_reward.shape() != (n, n) || cholesky(&self.q_reward).is_err() {
            return bad("q_reward must be an n×n positive definite matrix");
        }
        if !(self.terminal_penalty >= 0.0) {
            return bad("terminal_penalty must be non-negative");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale must be positive");
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be positive");
        }
        Ok(())
    }

    /// One-step state map with the action clipped into the bounds; no
    /// domain check.
    pub fn transition(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, EnvError> {
        let (n, m) = self.plant.dims();
        if x.len() != n {
            return Err(EnvError::DimensionMismatch { expected: n, got: x.len() });
        }
        if u.len() != m {
            return Err(EnvError::DimensionMismatch { expected: m, got: u.len() });
        }
        let u = self.action_bounds.clip(u);
        match &self.plant {
            Plant::Linear { a, b } => {
                let ax = a.matvec(x).expect("dims checked");
                let bu = b.matvec(&u).expect("dims checked");
                let next: Vec<f64> = ax.iter().zip(&bu).map(|(p, q)| p + q).collect();
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(EnvError::NonFiniteState);
                }
                Ok(next)
            }
            plant => rk4_step(|s, a| plant.derivative(s, a).expect("continuous plant"), x, &u, self.dt),
        }
    }
}

/// Advances the environment one control period.
pub fn env_step(spec: &EnvSpec, x: &[f64], u: &[f64]) -> Result<StepResult, EnvError> {
    if !spec.domain.contains(x) {
        return Err(EnvError::OutsideDomain { state: x.to_vec() });
    }
    let next_state = spec.transition(x, u)?;
    let raw_cost = spec.q_reward.quad_form(x);
    let terminated = !spec.domain.contains(&next_state);
    let reward = if terminated {
        -spec.reward_scale * spec.terminal_penalty
    } else {
        spec.reward_scale * (spec.r_const - raw_cost)
    };
    Ok(StepResult {
        next_state,
        reward,
        terminated,
        raw_cost,
    })
}

/// Uniform draw from the initial-state box.
pub fn env_reset<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    spec.init_box.sample(rng)
}

/// Central finite differences of `x ↦ transition(x, u)` at `(0, 0)`.
pub fn linearize_env(spec: &EnvSpec) -> Result<(Matrix, Matrix), EnvError> {
    let (n, m) = spec.plant.dims();
    let zeros_x = vec![0.0; n];
    let zeros_u = vec![0.0; m];
    jacobians_at(spec, &zeros_x, &zeros_u, 1e-6)
}

pub(crate) fn jacobians_at(spec: &EnvSpec, x: &[f64], u: &[f64], h: f64) -> Result<(Matrix, Matrix), EnvError> {
    let (n, m) = spec.plant.dims();
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, m);
    for c in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let fp = spec.transition(&xp, u)?;
        let fm = spec.transition(&xm, u)?;
        for r in 0..n {
            a[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    for c in 0..m {
        let mut up = u.to_vec();
        let mut um = u.to_vec();
        up[c] += h;
        um[c] -= h;
        let fp = spec.transition(x, &up)?;
        let fm = spec.transition(x, &um)?;
        for r in 0..n {
            b[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    Ok((a, b))
}
