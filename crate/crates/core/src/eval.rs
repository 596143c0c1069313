//! Deterministic evaluation, closed-loop linearization and sampled
//! Lyapunov region-of-attraction checks.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvfmt::{f64_cell, opt_f64};
use crate::envs::{env_step, EnvError, EnvSpec};
use crate::nn::{GaussianPolicy, NnError};
use crate::numerics::{
    cholesky, is_schur_stable, min_eigenvalue_sym, solve_discrete_lyapunov, LyapunovOptions, Matrix, NumericsError,
};
use crate::rng::{stream, Stream};
use crate::sysid::sample_in_ball;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("initial state {0:?} lies outside the domain")]
    StartOutsideDomain(Vec<f64>),
    #[error("controller maps {got} states, environment has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A deterministic state feedback.
pub trait Controller {
    fn state_dim(&self) -> usize;
    fn act(&self, x: &[f64]) -> Result<Vec<f64>, EvalError>;
}

impl Controller for GaussianPolicy {
    fn state_dim(&self) -> usize {
        GaussianPolicy::state_dim(self)
    }

    fn act(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.mean_action(x)?)
    }
}

/// `u = −K·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeedback {
    pub k: Matrix,
}

impl Controller for LinearFeedback {
    fn state_dim(&self) -> usize {
        self.k.cols()
    }

    fn act(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.k.matvec(x)?.into_iter().map(|v| -v).collect())
    }
}

/// Always `u = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroController {
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Controller for ZeroController {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn act(&self, _: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(vec![0.0; self.action_dim])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    /// Executed (clipped) actions.
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub step_costs: Vec<f64>,
    /// Running sums of `xᵀQx + uᵀRu`.
    pub accumulated_cost: Vec<f64>,
    /// Whether the rollout ended by leaving the domain.
    pub terminated: bool,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.accumulated_cost.last().copied().unwrap_or(0.0)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("at least the initial state")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.states[0].len();
        let m = self.actions.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.extend(["reward", "step_cost", "accumulated_cost"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for (k, x) in self.states.iter().enumerate() {
            let mut cells = vec![k.to_string()];
            cells.extend(x.iter().map(|v| f64_cell(*v)));
            match self.actions.get(k) {
                Some(u) => {
                    cells.extend(u.iter().map(|v| f64_cell(*v)));
                    cells.push(f64_cell(self.rewards[k]));
                    cells.push(f64_cell(self.step_costs[k]));
                    cells.push(f64_cell(self.accumulated_cost[k]));
                }
                None => cells.extend(std::iter::repeat_n(String::new(), m + 3)),
            }
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Deterministic rollout until `horizon` steps or domain exit.
pub fn rollout(
    controller: &dyn Controller,
    env: &EnvSpec,
    x0: &[f64],
    horizon: usize,
    q_cost: &Matrix,
    r_cost: &Matrix,
) -> Result<Trajectory, EvalError> {
    if controller.state_dim() != env.state_dim() {
        return Err(EvalError::DimensionMismatch {
            expected: env.state_dim(),
            got: controller.state_dim(),
        });
    }
    if !env.domain.contains(x0) {
        return Err(EvalError::StartOutsideDomain(x0.to_vec()));
    }
    let mut traj = Trajectory {
        states: vec![x0.to_vec()],
        actions: Vec::new(),
        rewards: Vec::new(),
        step_costs: Vec::new(),
        accumulated_cost: Vec::new(),
        terminated: false,
    };
    let mut total = 0.0;
    let mut x = x0.to_vec();
    for _ in 0..horizon {
        let u = env.action_bounds.clip(&controller.act(&x)?);
        let step = env_step(env, &x, &u)?;
        let cost = q_cost.quad_form(&x) + r_cost.quad_form(&u);
        total += cost;
        traj.actions.push(u);
        traj.rewards.push(step.reward);
        traj.step_costs.push(cost);
        traj.accumulated_cost.push(total);
        traj.states.push(step.next_state.clone());
        if step.terminated {
            traj.terminated = true;
            break;
        }
        x = step.next_state;
    }
    Ok(traj)
}

/// Default evaluation cost pair: the reward's `Q` and `R = 0.1·I`.
pub fn default_cost_matrices(env: &EnvSpec) -> (Matrix, Matrix) {
    (env.q_reward.clone(), Matrix::identity(env.action_dim()).scale(0.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostCurve {
    pub name: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Mean over starts of `‖x_k‖`, k = 0..=horizon.
    pub mean_norm: Vec<f64>,
    pub terminated_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub name: String,
    pub final_mean_cost: f64,
    /// First step after which the mean state norm stays below the
    /// settling tolerance.
    pub settling_step: Option<usize>,
    pub final_window_mean_norm: f64,
    pub terminated_runs: usize,
}

pub const SETTLING_TOL: f64 = 1e-2;
pub const FINAL_WINDOW: usize = 100;

impl CostCurve {
    pub fn summary(&self) -> PolicySummary {
        let settling_step = {
            let mut k = self.mean_norm.len();
            while k > 0 && self.mean_norm[k - 1] <= SETTLING_TOL {
                k -= 1;
            }
            (k < self.mean_norm.len()).then_some(k)
        };
        let window = &self.mean_norm[self.mean_norm.len().saturating_sub(FINAL_WINDOW)..];
        PolicySummary {
            name: self.name.clone(),
            final_mean_cost: self.mean.last().copied().unwrap_or(0.0),
            settling_step,
            final_window_mean_norm: window.iter().sum::<f64>() / window.len().max(1) as f64,
            terminated_runs: self.terminated_runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub starts: Vec<Vec<f64>>,
    pub curves: Vec<CostCurve>,
}

/// Uniform starts from the environment's initial box.
pub fn sample_starts(env: &EnvSpec, n_starts: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Eval);
    (0..n_starts).map(|_| env.init_box.sample(&mut rng)).collect()
}

/// Rolls every controller out from the same starts. Runs that leave the
/// domain keep their last accumulated cost and state norm for the rest of
/// the horizon.
pub fn compare_costs(
    controllers: &[(String, &dyn Controller)],
    env: &EnvSpec,
    starts: &[Vec<f64>],
    horizon: usize,
    q_cost: &Matrix,
    r_cost: &Matrix,
) -> Result<CostTable, EvalError> {
    let mut curves = Vec::with_capacity(controllers.len());
    for (name, ctrl) in controllers {
        let mut costs = vec![vec![0.0; starts.len()]; horizon];
        let mut norms = vec![vec![0.0; starts.len()]; horizon + 1];
        let mut terminated_runs = 0;
        for (s, x0) in starts.iter().enumerate() {
            let traj = rollout(*ctrl, env, x0, horizon, q_cost, r_cost)?;
            terminated_runs += usize::from(traj.terminated);
            for k in 0..horizon {
                costs[k][s] = traj.accumulated_cost.get(k).copied().unwrap_or(traj.total_cost());
            }
            for (k, row) in norms.iter_mut().enumerate() {
                row[s] = norm(traj.states.get(k).unwrap_or_else(|| traj.states.last().expect("nonempty")));
            }
        }
        let stats = |row: &Vec<f64>| {
            let cnt = row.len().max(1) as f64;
            let mean = row.iter().sum::<f64>() / cnt;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cnt;
            (mean, var.sqrt())
        };
        let (mean, std): (Vec<f64>, Vec<f64>) = costs.iter().map(stats).unzip();
        curves.push(CostCurve {
            name: name.clone(),
            mean,
            std,
            mean_norm: norms.iter().map(|r| stats(r).0).collect(),
            terminated_runs,
        });
    }
    Ok(CostTable {
        starts: starts.to_vec(),
        curves,
    })
}

pub const COST_CURVE_HEADER: &str = "step,policy_name,mean_cost,std_cost";
pub const SUMMARY_HEADER: &str = "policy_name,final_mean_cost,settling_step,final_window_mean_norm,terminated_runs";

impl CostTable {
    pub fn write_curves<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{COST_CURVE_HEADER}")?;
        for c in &self.curves {
            for (k, (m, s)) in c.mean.iter().zip(&c.std).enumerate() {
                writeln!(w, "{},{},{},{}", k, c.name, f64_cell(*m), f64_cell(*s))?;
            }
        }
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for s in self.curves.iter().map(CostCurve::summary) {
            writeln!(
                w,
                "{},{},{},{},{}",
                s.name,
                f64_cell(s.final_mean_cost),
                s.settling_step.map(|k| k.to_string()).unwrap_or_default(),
                f64_cell(s.final_window_mean_norm),
                s.terminated_runs
            )?;
        }
        Ok(())
    }
}

pub const FD_STEP: f64 = 1e-6;

/// Central-difference Jacobian of `x ↦ f(x, π(x))` at the origin.
pub fn linearize_closed_loop(env: &EnvSpec, controller: &dyn Controller) -> Result<Matrix, EvalError> {
    let n = env.state_dim();
    let map = |x: &[f64]| -> Result<Vec<f64>, EvalError> {
        let u = controller.act(x)?;
        Ok(env.transition(x, &u)?)
    };
    let mut a = Matrix::zeros(n, n);
    for c in 0..n {
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        plus[c] = FD_STEP;
        minus[c] = -FD_STEP;
        let (fp, fm) = (map(&plus)?, map(&minus)?);
        for r in 0..n {
            a[(r, c)] = (fp[r] - fm[r]) / (2.0 * FD_STEP);
        }
    }
    Ok(a)
}

/// `P` with `A_clᵀ·P·A_cl − P = −Q_v`.
pub fn quadratic_lyapunov(a_cl: &Matrix, q_v: &Matrix) -> Result<Matrix, EvalError> {
    Ok(solve_discrete_lyapunov(a_cl, q_v, LyapunovOptions::default())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoaOptions {
    /// Samples per checked level.
    pub samples: usize,
    pub bisection_steps: usize,
    /// Decrease margin `ε = margin_scale·λ_min(Q_v)`.
    pub margin_scale: f64,
}

impl Default for RoaOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            bisection_steps: 20,
            margin_scale: 1e-6,
        }
    }
}

pub const ROA_NOTE: &str = "certified by sampling: decrease checked at sampled states only, not a formal proof";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoaReport {
    pub p_lyap: Matrix,
    pub level: f64,
    /// Largest sublevel set contained in the domain box.
    pub domain_level: f64,
    pub samples_checked: usize,
    pub violations: usize,
    pub certified_by_sampling: bool,
    pub margin: f64,
    pub min_samples: usize,
    pub violating_state: Option<Vec<f64>>,
    pub note: String,
}

struct LevelCheck {
    samples: usize,
    violations: usize,
    first_violation: Option<Vec<f64>>,
}

/// Bisection for the largest sublevel set `{xᵀPx ≤ ℓ} ⊆ D` on which the
/// sampled decrease `V(x⁺) − V(x) ≤ −ε‖x‖²` holds without violations.
pub fn roa_estimate(
    env: &EnvSpec,
    controller: &dyn Controller,
    p: &Matrix,
    q_v: &Matrix,
    options: &RoaOptions,
    seed: u64,
) -> Result<RoaReport, EvalError> {
    let n = env.state_dim();
    let l = cholesky(p)?;
    let p_inv = crate::numerics::lu_solve(p, &Matrix::identity(n))?;
    let domain_level = (0..n)
        .map(|i| {
            let d = env.domain.low[i].abs().min(env.domain.high[i].abs());
            d * d / p_inv[(i, i)]
        })
        .fold(f64::INFINITY, f64::min);
    let margin = options.margin_scale * min_eigenvalue_sym(q_v)?;
    // x = √ℓ·L⁻ᵀz for z uniform in the unit ball gives xᵀPx = ℓ‖z‖²
    let lt = l.transpose();
    let check = |level: f64| -> Result<LevelCheck, EvalError> {
        let mut rng = stream(seed, Stream::Verify);
        let mut out = LevelCheck {
            samples: 0,
            violations: 0,
            first_violation: None,
        };
        for _ in 0..options.samples {
            let z = sample_in_ball(n, 1.0, &mut rng);
            let y = crate::numerics::lu_solve(&lt, &Matrix::column(&z))?;
            let x: Vec<f64> = (0..n).map(|i| level.sqrt() * y[(i, 0)]).collect();
            out.samples += 1;
            let ok = env.domain.contains(&x) && {
                let u = controller.act(&x)?;
                let next = env.transition(&x, &u)?;
                env.domain.contains(&next) && {
                    let dv = p.quad_form(&next) - p.quad_form(&x);
                    dv <= -margin * norm(&x).powi(2)
                }
            };
            if !ok {
                out.violations += 1;
                if out.first_violation.is_none() {
                    out.first_violation = Some(x);
                }
            }
        }
        Ok(out)
    };
    let report = |level: f64, c: LevelCheck| RoaReport {
        p_lyap: p.clone(),
        level,
        domain_level,
        samples_checked: c.samples,
        violations: c.violations,
        certified_by_sampling: c.violations == 0 && c.samples >= options.samples && level > 0.0,
        margin,
        min_samples: options.samples,
        violating_state: c.first_violation,
        note: ROA_NOTE.to_string(),
    };
    let top = check(domain_level)?;
    if top.violations == 0 {
        return Ok(report(domain_level, top));
    }
    let (mut lo, mut hi) = (0.0, domain_level);
    let mut best: Option<LevelCheck> = None;
    let mut smallest_fail = top;
    for _ in 0..options.bisection_steps {
        let mid = 0.5 * (lo + hi);
        let c = check(mid)?;
        if c.violations == 0 {
            lo = mid;
            best = Some(c);
        } else {
            hi = mid;
            smallest_fail = c;
        }
    }
    Ok(match best {
        Some(c) => report(lo, c),
        None => report(0.0, smallest_fail),
    })
}

/// Output of the verification pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyReport {
    pub a_cl: Matrix,
    pub schur_stable: bool,
    pub roa: Option<RoaReport>,
}

/// Linearize, test Schur stability, build `V = xᵀPx`, then estimate the ROA.
pub fn verify(
    env: &EnvSpec,
    controller: &dyn Controller,
    q_v: &Matrix,
    options: &RoaOptions,
    seed: u64,
) -> Result<VerifyReport, EvalError> {
    let a_cl = linearize_closed_loop(env, controller)?;
    let schur_stable = is_schur_stable(&a_cl);
    let roa = if schur_stable {
        let p = quadratic_lyapunov(&a_cl, q_v)?;
        Some(roa_estimate(env, controller, &p, q_v, options, seed)?)
    } else {
        None
    };
    Ok(VerifyReport { a_cl, schur_stable, roa })
}

pub fn summary_row_display(s: &PolicySummary) -> String {
    format!(
        "{}: final cost {}, settling {}, tail norm {}",
        s.name,
        f64_cell(s.final_mean_cost),
        s.settling_step.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
        opt_f64(Some(s.final_window_mean_norm))
    )
}
