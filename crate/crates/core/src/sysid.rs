//! Local linear model identification near the equilibrium.
//!
//! Transitions are collected only while `‖x‖ < η`: first under zero action
//! (to fit `Â`), then under non-zero exploratory actions (to fit `B̂` on the
//! residual `x' − Â·x`). The identified pair feeds the DARE for the LQR gain.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{linearize_env, EnvError, EnvSpec};
use crate::numerics::{is_schur_stable, solve_dare, solve_least_squares, Matrix, NumericsError, DARE_MAX_ITER, DARE_TOL};

pub const DEFAULT_ETA: f64 = 0.2;
pub const DEFAULT_THRESHOLD: usize = 1000;
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SysIdError {
    #[error("phase {0:?} data not ready")]
    NotReady(Phase),
    #[error("gain unavailable: {0}")]
    GainUnavailable(NumericsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    CollectingA,
    CollectingB,
    Done,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::CollectingA => "collecting_a",
            Phase::CollectingB => "collecting_b",
            Phase::Done => "done",
        }
    }
}

/// What the caller should do with the action at the current state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Execute `u = 0` so the sample can identify `Â`.
    Zero,
    /// Execute a non-zero exploratory action.
    Explore,
    /// No identification interest; act with the policy.
    PolicyOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectOutcome {
    pub stored: bool,
    pub requested: ActionMode,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖x ⊘ scale‖`; an empty scale means the plain Euclidean norm.
pub fn scaled_norm(x: &[f64], scale: &[f64]) -> f64 {
    if scale.is_empty() {
        return norm(x);
    }
    x.iter().zip(scale).map(|(v, s)| (v / s) * (v / s)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysIdBuffer {
    phase: Phase,
    eta: f64,
    /// Per-coordinate divisors applied before measuring `‖x‖`.
    norm_scale: Vec<f64>,
    pub threshold_a: usize,
    pub threshold_b: usize,
    xs_a: Vec<Vec<f64>>,
    ys_a: Vec<Vec<f64>>,
    xs_b: Vec<Vec<f64>>,
    us_b: Vec<Vec<f64>>,
    ys_b: Vec<Vec<f64>>,
}

impl SysIdBuffer {
    pub fn new(eta: f64, threshold_a: usize, threshold_b: usize) -> Self {
        assert!(eta > 0.0, "collection radius must be positive");
        Self {
            phase: Phase::CollectingA,
            eta,
            norm_scale: Vec::new(),
            threshold_a,
            threshold_b,
            xs_a: Vec::new(),
            ys_a: Vec::new(),
            xs_b: Vec::new(),
            us_b: Vec::new(),
            ys_b: Vec::new(),
        }
    }

    /// Measures the collection radius in units of `scale` per coordinate.
    pub fn with_norm_scale(mut self, scale: Vec<f64>) -> Self {
        assert!(scale.iter().all(|&s| s > 0.0), "norm scale must be positive");
        self.norm_scale = scale;
        self
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn samples_a(&self) -> usize {
        self.xs_a.len()
    }

    pub fn samples_b(&self) -> usize {
        self.xs_b.len()
    }

    pub fn in_ball(&self, x: &[f64]) -> bool {
        scaled_norm(x, &self.norm_scale) < self.eta
    }

    pub fn action_mode(&self, x: &[f64]) -> ActionMode {
        if !self.in_ball(x) {
            return ActionMode::PolicyOnly;
        }
        match self.phase {
            Phase::CollectingA => ActionMode::Zero,
            Phase::CollectingB => ActionMode::Explore,
            Phase::Done => ActionMode::PolicyOnly,
        }
    }

    /// Records `(x, u, x')` when it is useful for the current phase.
    pub fn maybe_collect(&mut self, x: &[f64], u: &[f64], x_next: &[f64]) -> CollectOutcome {
        let requested = self.action_mode(x);
        let zero_action = u.iter().all(|&v| v == 0.0);
        let stored = match requested {
            ActionMode::Zero if zero_action => {
                self.xs_a.push(x.to_vec());
                self.ys_a.push(x_next.to_vec());
                true
            }
            ActionMode::Explore if !zero_action => {
                self.xs_b.push(x.to_vec());
                self.us_b.push(u.to_vec());
                self.ys_b.push(x_next.to_vec());
                true
            }
            _ => false,
        };
        CollectOutcome { stored, requested }
    }

    pub fn ready_for_a(&self) -> bool {
        self.phase == Phase::CollectingA && self.xs_a.len() >= self.threshold_a
    }

    pub fn ready_for_b(&self) -> bool {
        self.phase == Phase::CollectingB && self.xs_b.len() >= self.threshold_b
    }

    /// Moves CollectingA → CollectingB.
    pub fn complete_phase_a(&mut self) {
        if self.phase == Phase::CollectingA {
            self.phase = Phase::CollectingB;
        }
    }

    /// Moves CollectingB → Done.
    pub fn complete_phase_b(&mut self) {
        if self.phase == Phase::CollectingB {
            self.phase = Phase::Done;
        }
    }
}

fn stack(rows: &[Vec<f64>]) -> Matrix {
    let cols = rows.first().map_or(0, Vec::len);
    Matrix::new(rows.len(), cols, rows.concat()).expect("rows share a length")
}

fn rms_residual(x: &Matrix, y: &Matrix, m: &Matrix) -> f64 {
    let pred = x.matmul(&m.transpose()).expect("shapes");
    let diff = y.sub(&pred).expect("shapes");
    diff.frobenius_norm() / (y.rows().max(1) as f64).sqrt()
}

/// `Â = argmin ‖Y − A·X‖` over the zero-action rows.
pub fn estimate_a(buffer: &SysIdBuffer, ridge: f64) -> Result<Matrix, SysIdError> {
    if buffer.xs_a.is_empty() || buffer.xs_a.len() < buffer.threshold_a {
        return Err(SysIdError::NotReady(Phase::CollectingA));
    }
    let x = stack(&buffer.xs_a);
    let y = stack(&buffer.ys_a);
    Ok(solve_least_squares(&x, &y, ridge)?)
}

/// `B̂ = argmin ‖(Y − Â·X) − B·U‖` over the exploratory rows.
pub fn estimate_b(buffer: &SysIdBuffer, a_hat: &Matrix, ridge: f64) -> Result<Matrix, SysIdError> {
    if buffer.xs_b.is_empty() || buffer.xs_b.len() < buffer.threshold_b {
        return Err(SysIdError::NotReady(Phase::CollectingB));
    }
    let x = stack(&buffer.xs_b);
    let u = stack(&buffer.us_b);
    let y = stack(&buffer.ys_b);
    let residual = y.sub(&x.matmul(&a_hat.transpose())?)?;
    Ok(solve_least_squares(&u, &residual, ridge)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a_hat: Matrix,
    pub b_hat: Matrix,
    /// RMS residuals of the A and B fits.
    pub fit_residuals: (f64, f64),
}

impl LinearModel {
    /// Fits both estimators from the buffer contents.
    pub fn identify(buffer: &SysIdBuffer, ridge: f64) -> Result<Self, SysIdError> {
        let a_hat = estimate_a(buffer, ridge)?;
        let b_hat = estimate_b(buffer, &a_hat, ridge)?;
        let res_a = rms_residual(&stack(&buffer.xs_a), &stack(&buffer.ys_a), &a_hat);
        let resid = stack(&buffer.ys_b).sub(&stack(&buffer.xs_b).matmul(&a_hat.transpose())?)?;
        let res_b = rms_residual(&stack(&buffer.us_b), &resid, &b_hat);
        Ok(Self {
            a_hat,
            b_hat,
            fit_residuals: (res_a, res_b),
        })
    }

    /// Joint fit `x' ≈ A·x + B·u` over arbitrary near-origin transitions.
    pub fn identify_joint(xs: &[Vec<f64>], us: &[Vec<f64>], ys: &[Vec<f64>], ridge: f64) -> Result<Self, SysIdError> {
        if xs.is_empty() || xs.len() != us.len() || xs.len() != ys.len() {
            return Err(SysIdError::NotReady(Phase::Done));
        }
        let n = xs[0].len();
        let rows: Vec<Vec<f64>> = xs.iter().zip(us).map(|(x, u)| [x.as_slice(), u.as_slice()].concat()).collect();
        let reg = stack(&rows);
        let y = stack(ys);
        let m_joint = solve_least_squares(&reg, &y, ridge)?;
        let m = reg.cols() - n;
        let mut a_hat = Matrix::zeros(n, n);
        let mut b_hat = Matrix::zeros(n, m);
        for r in 0..n {
            for c in 0..n {
                a_hat[(r, c)] = m_joint[(r, c)];
            }
            for c in 0..m {
                b_hat[(r, c)] = m_joint[(r, n + c)];
            }
        }
        let res = rms_residual(&reg, &y, &m_joint);
        Ok(Self {
            a_hat,
            b_hat,
            fit_residuals: (res, res),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEstimate {
    pub k_hat: Matrix,
    pub p: Matrix,
    /// Whether `Â − B̂·K̂` is Schur stable.
    pub schur_stable: bool,
    pub dare_residual: f64,
    /// Environment step at which the estimate was produced.
    pub timestamp: u64,
}

/// LQR gain for the identified model; the controller is `u = −K̂·x`.
pub fn compute_gain(model: &LinearModel, q: &Matrix, r: &Matrix, timestamp: u64) -> Result<GainEstimate, SysIdError> {
    let sol = solve_dare(&model.a_hat, &model.b_hat, q, r, DARE_TOL, DARE_MAX_ITER).map_err(SysIdError::GainUnavailable)?;
    let closed = model.a_hat.sub(&model.b_hat.matmul(&sol.k)?)?;
    Ok(GainEstimate {
        schur_stable: is_schur_stable(&closed),
        k_hat: sol.k,
        p: sol.p,
        dare_residual: sol.residual,
        timestamp,
    })
}

/// One line of the identification report.
#[derive(Debug, Clone, PartialEq)]
pub struct SysIdReportRow {
    pub phase: Phase,
    pub samples_a: usize,
    pub samples_b: usize,
    pub fro_err_a: Option<f64>,
    pub fro_err_b: Option<f64>,
    pub schur_stable: Option<bool>,
    pub dare_residual: Option<f64>,
}

impl SysIdReportRow {
    /// Builds a row comparing the model against the finite-difference
    /// linearization of the environment, when one is available.
    pub fn compare(
        phase: Phase,
        buffer: &SysIdBuffer,
        a_hat: Option<&Matrix>,
        b_hat: Option<&Matrix>,
        gain: Option<&GainEstimate>,
        truth: Option<&(Matrix, Matrix)>,
    ) -> Self {
        let rel = |est: Option<&Matrix>, reference: Option<&Matrix>| match (est, reference) {
            (Some(e), Some(r)) => e.sub(r).ok().map(|d| d.frobenius_norm() / r.frobenius_norm().max(f64::MIN_POSITIVE)),
            _ => None,
        };
        Self {
            phase,
            samples_a: buffer.samples_a(),
            samples_b: buffer.samples_b(),
            fro_err_a: rel(a_hat, truth.map(|t| &t.0)),
            fro_err_b: rel(b_hat, truth.map(|t| &t.1)),
            schur_stable: gain.map(|g| g.schur_stable),
            dare_residual: gain.map(|g| g.dare_residual),
        }
    }
}

pub const SYSID_REPORT_HEADER: &str = "phase,samples_A,samples_B,fro_err_A_vs_linearization,fro_err_B_vs_linearization,schur_stable,dare_residual";

pub fn write_sysid_report<W: Write>(mut w: W, rows: &[SysIdReportRow]) -> std::io::Result<()> {
    use crate::csvfmt::{opt_bool, opt_f64};
    writeln!(w, "{SYSID_REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.phase.label(),
            r.samples_a,
            r.samples_b,
            opt_f64(r.fro_err_a),
            opt_f64(r.fro_err_b),
            opt_bool(r.schur_stable),
            opt_f64(r.dare_residual)
        )?;
    }
    Ok(())
}

/// Uniform draw from the open ball `‖x‖ < radius`.
pub fn sample_in_ball<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let len = norm(&dir);
        if len == 0.0 {
            continue;
        }
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        let x: Vec<f64> = dir.iter().map(|d| d / len * r).collect();
        if norm(&x) < radius {
            return x;
        }
    }
}

/// Outcome of an identification run against a known environment.
#[derive(Debug, Clone)]
pub struct SysIdFixture {
    pub model: LinearModel,
    pub gain: Option<GainEstimate>,
    pub truth: (Matrix, Matrix),
    pub report: Vec<SysIdReportRow>,
}

/// Drives an environment directly through both collection phases:
/// zero-action rollouts from random states in the η-ball, then single
/// uniformly random actions. The ball is measured in coordinates
/// normalized by the domain half-widths. Used to check the estimators against the
/// finite-difference linearization.
pub fn identify_by_simulation<R: Rng + ?Sized>(
    spec: &EnvSpec,
    eta: f64,
    rows: usize,
    lqr_r: &Matrix,
    rng: &mut R,
) -> Result<SysIdFixture, SysIdError> {
    let (n, m) = (spec.state_dim(), spec.action_dim());
    let truth = linearize_env(spec)?;
    let scale = spec.domain.half_widths();
    let mut buffer = SysIdBuffer::new(eta, rows, rows).with_norm_scale(scale.clone());
    let draw = |rng: &mut R| -> Vec<f64> { sample_in_ball(n, eta, rng).iter().zip(&scale).map(|(z, s)| z * s).collect() };
    let mut report = Vec::new();
    while !buffer.ready_for_a() {
        let mut x = draw(rng);
        while buffer.action_mode(&x) == ActionMode::Zero && !buffer.ready_for_a() {
            let u = vec![0.0; m];
            let next = spec.transition(&x, &u)?;
            buffer.maybe_collect(&x, &u, &next);
            x = next;
        }
    }
    let a_hat = estimate_a(&buffer, DEFAULT_RIDGE)?;
    report.push(SysIdReportRow::compare(Phase::CollectingA, &buffer, Some(&a_hat), None, None, Some(&truth)));
    buffer.complete_phase_a();
    let floor = 0.01;
    while !buffer.ready_for_b() {
        let x = draw(rng);
        let u: Vec<f64> = (0..m)
            .map(|i| {
                let (lo, hi) = (spec.action_bounds.low[i], spec.action_bounds.high[i]);
                let v: f64 = rng.random_range(lo..hi);
                let min_mag = floor * hi.abs().max(lo.abs());
                if v.abs() < min_mag {
                    min_mag.copysign(if v == 0.0 { 1.0 } else { v })
                } else {
                    v
                }
            })
            .collect();
        let next = spec.transition(&x, &u)?;
        buffer.maybe_collect(&x, &u, &next);
    }
    let model = LinearModel::identify(&buffer, DEFAULT_RIDGE)?;
    buffer.complete_phase_b();
    let gain = compute_gain(&model, &spec.q_reward, lqr_r, 0).ok();
    report.push(SysIdReportRow::compare(
        Phase::Done,
        &buffer,
        Some(&model.a_hat),
        Some(&model.b_hat),
        gain.as_ref(),
        Some(&truth),
    ));
    Ok(SysIdFixture {
        model,
        gain,
        truth,
        report,
    })
}
