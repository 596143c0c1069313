//! Continuous-time plant models and the RK4 integrator.
//!
//! Angles are measured from the upright (unstable) equilibrium, so every
//! model has `f(0, 0) = 0`.

use serde::{Deserialize, Serialize};

use super::EnvError;

/// Classical fourth-order Runge–Kutta step with the action held constant.
pub fn rk4_step<F>(derivative: F, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>, EnvError>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if !(dt > 0.0) {
        return Err(EnvError::InvalidSpec(format!("dt must be positive, got {dt}")));
    }
    let offset = |base: &[f64], k: &[f64], h: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(b, k)| b + h * k).collect()
    };
    let k1 = derivative(x, u);
    let k2 = derivative(&offset(x, &k1, 0.5 * dt), u);
    let k3 = derivative(&offset(x, &k2, 0.5 * dt), u);
    let k4 = derivative(&offset(x, &k3, dt), u);
    let next: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(EnvError::NonFiniteState);
    }
    Ok(next)
}

/// Point-mass pendulum on a massless rod, torque actuated.
/// State `(θ, θ̇)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 0.15,
            length: 0.5,
            gravity: 9.81,
            damping: 0.0,
        }
    }
}

pub fn pendulum_dynamics(p: &PendulumParams, x: &[f64], u: &[f64]) -> Vec<f64> {
    let (theta, omega) = (x[0], x[1]);
    let inertia = p.mass * p.length * p.length;
    let alpha = p.gravity / p.length * theta.sin() + (u[0] - p.damping * omega) / inertia;
    vec![omega, alpha]
}

/// Pole on a cart pushed by a horizontal force.
/// State `(x, ẋ, θ, θ̇)`; `pole_half_length` is the distance to the pole's
/// centre of mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_half_length: f64,
    pub gravity: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.81,
        }
    }
}

pub fn cartpole_dynamics(p: &CartpoleParams, x: &[f64], u: &[f64]) -> Vec<f64> {
    let (_, v, theta, omega) = (x[0], x[1], x[2], x[3]);
    let total = p.cart_mass + p.pole_mass;
    let (s, c) = theta.sin_cos();
    let l = p.pole_half_length;
    let temp = (u[0] + p.pole_mass * l * omega * omega * s) / total;
    let theta_acc = (p.gravity * s - c * temp) / (l * (4.0 / 3.0 - p.pole_mass * c * c / total));
    let x_acc = temp - p.pole_mass * l * theta_acc * c / total;
    vec![v, x_acc, omega, theta_acc]
}

/// Planar quadrotor with two rotors; the inputs are thrust deviations from
/// hover (`m·g/2` per rotor). State `(x, z, φ, ẋ, ż, φ̇)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad2dParams {
    pub mass: f64,
    pub inertia: f64,
    pub arm: f64,
    pub gravity: f64,
}

impl Default for Quad2dParams {
    fn default() -> Self {
        Self {
            mass: 0.5,
            inertia: 0.01,
            arm: 0.1,
            gravity: 9.81,
        }
    }
}

pub fn quad2d_dynamics(p: &Quad2dParams, x: &[f64], u: &[f64]) -> Vec<f64> {
    let hover = 0.5 * p.mass * p.gravity;
    let (t1, t2) = (hover + u[0], hover + u[1]);
    let phi = x[2];
    let (s, c) = phi.sin_cos();
    let thrust = t1 + t2;
    vec![
        x[3],
        x[4],
        x[5],
        -thrust * s / p.mass,
        thrust * c / p.mass - p.gravity,
        p.arm * (t2 - t1) / p.inertia,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_fixed_point_and_exactness() {
        let zero = |_: &[f64], _: &[f64]| vec![0.0, 0.0];
        assert_eq!(rk4_step(zero, &[1.5, -2.0], &[0.0], 0.1).unwrap(), vec![1.5, -2.0]);
        let integrator = |_: &[f64], u: &[f64]| vec![u[0]];
        assert_eq!(rk4_step(integrator, &[0.0], &[2.0], 0.5).unwrap(), vec![1.0]);
    }

    #[test]
    fn rk4_exponential_decay() {
        let decay = |x: &[f64], _: &[f64]| vec![-x[0]];
        let y = rk4_step(decay, &[1.0], &[], 0.1).unwrap()[0];
        assert!((y - (-0.1f64).exp()).abs() < 1e-7);
        assert!((y - 0.904_837_42).abs() < 1e-7);
    }

    #[test]
    fn rk4_rejects_bad_dt_and_nan() {
        let f = |x: &[f64], _: &[f64]| vec![x[0]];
        assert!(rk4_step(f, &[1.0], &[], 0.0).is_err());
        let nan = |_: &[f64], _: &[f64]| vec![f64::NAN];
        assert_eq!(rk4_step(nan, &[1.0], &[], 0.1), Err(EnvError::NonFiniteState));
    }

    #[test]
    fn equilibria_at_origin() {
        assert_eq!(pendulum_dynamics(&PendulumParams::default(), &[0.0; 2], &[0.0]), vec![0.0; 2]);
        assert_eq!(cartpole_dynamics(&CartpoleParams::default(), &[0.0; 4], &[0.0]), vec![0.0; 4]);
        let q = quad2d_dynamics(&Quad2dParams::default(), &[0.0; 6], &[0.0, 0.0]);
        assert!(q.iter().all(|v| v.abs() < 1e-15), "{q:?}");
    }

    #[test]
    fn pendulum_small_angle() {
        let p = PendulumParams::default();
        let d = pendulum_dynamics(&p, &[1e-3, 0.0], &[0.0]);
        // sin θ − θ ≈ −θ³/6 contributes (g/l)·1.7e-10
        assert!((d[1] - p.gravity / p.length * 1e-3).abs() < 1e-8);
    }

    #[test]
    fn quad2d_symmetric_thrust_no_torque() {
        let d = quad2d_dynamics(&Quad2dParams::default(), &[0.3, -0.2, 0.1, 0.0, 0.5, 0.0], &[0.7, 0.7]);
        assert_eq!(d[5], 0.0);
        assert!(d[4] > 0.0);
    }

    #[test]
    fn rk4_order_on_pendulum() {
        let p = PendulumParams::default();
        let f = |x: &[f64], u: &[f64]| pendulum_dynamics(&p, x, u);
        let x0 = [1.0, 2.0];
        let u = [0.3];
        let reference = |h: f64| {
            let mut x = x0.to_vec();
            for _ in 0..100 {
                x = rk4_step(f, &x, &u, h / 100.0).unwrap();
            }
            x
        };
        let err = |h: f64| {
            let one = rk4_step(f, &x0, &u, h).unwrap();
            let r = reference(h);
            one.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio >= 16.0 * 0.8, "ratio {ratio}");
    }
}
