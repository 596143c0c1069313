//! Tanh-squashed Gaussian policy.
//!
//! A single MLP maps the state to `[μ ; log σ]` (the last linear layer acts
//! as the two heads over a shared tanh trunk). Pre-actions `w = μ + σ⊙ε` are
//! squashed into the action box by `y = a⊙tanh(w) + b`.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use super::{Layer, Mlp, MlpGrads, NnError};
use crate::numerics::Matrix;

pub const LOG_STD_CLAMP: (f64, f64) = (-20.0, 2.0);
pub const POLICY_FORMAT_VERSION: u32 = 1;

/// `ln(1 − tanh²(w))`, stable for large |w|.
pub fn log_one_minus_tanh_sq(w: f64) -> f64 {
    let z = -2.0 * w;
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    2.0 * (LN_2 - w - softplus)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    net: Mlp,
    pub log_std_clamp: (f64, f64),
    bound_scale: Vec<f64>,
    bound_offset: Vec<f64>,
    mean_shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub presquash: Vec<f64>,
}

/// Reparameterized samples for a batch of states, with everything needed
/// to backpropagate into the policy parameters.
#[derive(Debug, Clone)]
pub struct BatchSample {
    cache: super::ForwardCache,
    noise: Matrix,
    /// tanh(w), batch × m
    squashed: Matrix,
    /// σ, batch × m
    std: Matrix,
    /// 1 where the raw log σ lies inside the clamp, else 0
    clamp_mask: Matrix,
    pub actions: Matrix,
    pub log_probs: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(net: Mlp, bound_scale: Vec<f64>, bound_offset: Vec<f64>) -> Result<Self, NnError> {
        let m = bound_scale.len();
        if net.out_dim() != 2 * m || bound_offset.len() != m {
            return Err(NnError::DimensionMismatch {
                expected: 2 * m,
                got: net.out_dim(),
            });
        }
        if bound_scale.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(NnError::InvalidLayers("bound_scale must be strictly positive".into()));
        }
        Ok(Self {
            net,
            log_std_clamp: LOG_STD_CLAMP,
            bound_scale,
            bound_offset,
            mean_shift: vec![0.0; m],
        })
    }

    /// Policy for the action box `[low, high]` with the given hidden sizes.
    pub fn init<R: rand::Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        low: &[f64],
        high: &[f64],
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let m = low.len();
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * m);
        let net = Mlp::init(&dims, rng)?;
        let scale = low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect();
        let offset = low.iter().zip(high).map(|(l, h)| 0.5 * (h + l)).collect();
        Self::new(net, scale, offset)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.bound_scale.len()
    }

    pub fn bound_scale(&self) -> &[f64] {
        &self.bound_scale
    }

    pub fn bound_offset(&self) -> &[f64] {
        &self.bound_offset
    }

    pub fn mean_shift(&self) -> &[f64] {
        &self.mean_shift
    }

    pub fn action_low(&self) -> Vec<f64> {
        self.bound_offset.iter().zip(&self.bound_scale).map(|(b, a)| b - a).collect()
    }

    pub fn action_high(&self) -> Vec<f64> {
        self.bound_offset.iter().zip(&self.bound_scale).map(|(b, a)| b + a).collect()
    }

    /// Mean and clamped log-std of the pre-squash Gaussian.
    pub fn heads(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let out = self.net.forward(x)?;
        let m = self.action_dim();
        let (lo, hi) = self.log_std_clamp;
        let mu = out[..m].to_vec();
        let ls = out[m..].iter().map(|v| v.clamp(lo, hi)).collect();
        Ok((mu, ls))
    }

    fn shift_and_clip(&self, mut y: Vec<f64>) -> (Vec<f64>, bool) {
        let mut clipped = false;
        for i in 0..y.len() {
            if self.mean_shift[i] != 0.0 {
                y[i] -= self.mean_shift[i];
                let lo = self.bound_offset[i] - self.bound_scale[i];
                let hi = self.bound_offset[i] + self.bound_scale[i];
                if y[i] < lo || y[i] > hi {
                    clipped = true;
                    y[i] = y[i].clamp(lo, hi);
                }
            }
        }
        (y, clipped)
    }

    fn squash(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(self.bound_scale.iter().zip(&self.bound_offset))
            .map(|(w, (a, b))| a * w.tanh() + b)
            .collect()
    }

    /// Draws `y = a⊙tanh(μ + σ⊙noise) + b` (minus any finalization shift)
    /// with its squashed log-density.
    pub fn sample(&self, x: &[f64], noise: &[f64]) -> Result<PolicySample, NnError> {
        let m = self.action_dim();
        if noise.len() != m {
            return Err(NnError::DimensionMismatch {
                expected: m,
                got: noise.len(),
            });
        }
        let (mu, ls) = self.heads(x)?;
        let w: Vec<f64> = (0..m).map(|i| mu[i] + ls[i].exp() * noise[i]).collect();
        let mut log_prob = 0.0;
        for i in 0..m {
            log_prob += -0.5 * noise[i] * noise[i] - ls[i] - 0.5 * (2.0 * PI).ln()
                - self.bound_scale[i].ln()
                - log_one_minus_tanh_sq(w[i]);
        }
        let (action, _) = self.shift_and_clip(self.squash(&w));
        Ok(PolicySample {
            action,
            log_prob,
            presquash: w,
        })
    }

    /// Squashed mean before the finalization shift.
    pub fn raw_mean_action(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let (mu, _) = self.heads(x)?;
        Ok(self.squash(&mu))
    }

    /// Deterministic action `a⊙tanh(μ(x)) + b − shift`, clipped into the
    /// action box; the flag reports whether clipping was active.
    pub fn mean_action_checked(&self, x: &[f64]) -> Result<(Vec<f64>, bool), NnError> {
        Ok(self.shift_and_clip(self.raw_mean_action(x)?))
    }

    pub fn mean_action(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.mean_action_checked(x)?.0)
    }

    /// Jacobian of the (unclipped) deterministic action map.
    pub fn action_jacobian(&self, x: &[f64]) -> Result<Matrix, NnError> {
        let tape = self.net.forward_jacobian(x)?;
        let m = self.action_dim();
        let n = self.state_dim();
        let mut j = Matrix::zeros(m, n);
        for i in 0..m {
            let t = tape.output[i].tanh();
            let s = self.bound_scale[i] * (1.0 - t * t);
            for c in 0..n {
                j[(i, c)] = s * tape.jacobian[(i, c)];
            }
        }
        Ok(j)
    }

    /// Moves the deterministic action at the origin to zero. Applying it a
    /// second time adds a zero shift.
    pub fn finalize(&mut self) -> Result<Vec<f64>, NnError> {
        let origin = vec![0.0; self.state_dim()];
        let y0 = self.shifted_mean_unclipped(&origin)?;
        for (s, v) in self.mean_shift.iter_mut().zip(&y0) {
            *s += v;
        }
        Ok(y0)
    }

    fn shifted_mean_unclipped(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let raw = self.raw_mean_action(x)?;
        Ok(raw.iter().zip(&self.mean_shift).map(|(r, s)| r - s).collect())
    }

    /// Batched reparameterized sampling. `noise` is batch × m.
    pub fn sample_batch(&self, states: &Matrix, noise: &Matrix) -> Result<BatchSample, NnError> {
        let m = self.action_dim();
        if noise.cols() != m || noise.rows() != states.rows() {
            return Err(NnError::DimensionMismatch {
                expected: m,
                got: noise.cols(),
            });
        }
        let batch = states.rows();
        let cache = self.net.forward_batch(states)?;
        let out = cache.output();
        let (lo, hi) = self.log_std_clamp;
        let mut squashed = Matrix::zeros(batch, m);
        let mut std = Matrix::zeros(batch, m);
        let mut clamp_mask = Matrix::zeros(batch, m);
        let mut actions = Matrix::zeros(batch, m);
        let mut log_probs = vec![0.0; batch];
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        for b in 0..batch {
            let row = out.row(b);
            let mut lp = 0.0;
            for i in 0..m {
                let raw_ls = row[m + i];
                let ls = raw_ls.clamp(lo, hi);
                let sigma = ls.exp();
                let eps = noise[(b, i)];
                let w = row[i] + sigma * eps;
                let t = w.tanh();
                squashed[(b, i)] = t;
                std[(b, i)] = sigma;
                clamp_mask[(b, i)] = if (lo..=hi).contains(&raw_ls) { 1.0 } else { 0.0 };
                actions[(b, i)] = self.bound_scale[i] * t + self.bound_offset[i];
                lp += -0.5 * eps * eps - ls - half_ln_2pi - self.bound_scale[i].ln() - log_one_minus_tanh_sq(w);
            }
            log_probs[b] = lp;
        }
        Ok(BatchSample {
            cache,
            noise: noise.clone(),
            squashed,
            std,
            clamp_mask,
            actions,
            log_probs,
        })
    }

    /// Parameter gradients of a loss whose partials with respect to the
    /// sampled actions (`d_action`, batch × m) and log-probabilities
    /// (`d_log_prob`, per sample) are given.
    pub fn backward_sample(
        &self,
        sample: &BatchSample,
        d_action: &Matrix,
        d_log_prob: &[f64],
    ) -> Result<MlpGrads, NnError> {
        let m = self.action_dim();
        let batch = sample.actions.rows();
        let mut upstream = Matrix::zeros(batch, 2 * m);
        for b in 0..batch {
            for i in 0..m {
                let t = sample.squashed[(b, i)];
                let dw = d_action[(b, i)] * self.bound_scale[i] * (1.0 - t * t) + d_log_prob[b] * 2.0 * t;
                upstream[(b, i)] = dw;
                let d_ls = dw * sample.std[(b, i)] * sample.noise[(b, i)] - d_log_prob[b];
                upstream[(b, m + i)] = d_ls * sample.clamp_mask[(b, i)];
            }
        }
        let (grads, _) = self.net.backward(&sample.cache, &upstream)?;
        Ok(grads)
    }

    /// Gain-shaping penalty
    /// `weight · (Σ_g ‖J(x_g) − target‖_F + ‖y(0)‖)` where `J` is the
    /// Jacobian of the deterministic action map `y`, with its exact
    /// parameter gradient (including the second-order path through the
    /// tanh derivatives).
    pub fn gain_penalty(
        &self,
        states: &[Vec<f64>],
        target: &Matrix,
        weight: f64,
    ) -> Result<(f64, MlpGrads), NnError> {
        let m = self.action_dim();
        let n = self.state_dim();
        if target.shape() != (m, n) {
            return Err(NnError::DimensionMismatch {
                expected: m,
                got: target.rows(),
            });
        }
        let mut grads = self.net.zero_grads();
        let mut total = 0.0;
        for x in states {
            let tape = self.net.forward_jacobian(x)?;
            let mut err = Matrix::zeros(m, n);
            let mut scale = vec![0.0; m];
            let mut tanh = vec![0.0; m];
            for i in 0..m {
                let t = tape.output[i].tanh();
                tanh[i] = t;
                scale[i] = self.bound_scale[i] * (1.0 - t * t);
                for c in 0..n {
                    err[(i, c)] = scale[i] * tape.jacobian[(i, c)] - target[(i, c)];
                }
            }
            let norm = err.frobenius_norm();
            total += norm;
            if norm == 0.0 {
                continue;
            }
            let mut grad_out = vec![0.0; 2 * m];
            let mut grad_jac = Matrix::zeros(2 * m, n);
            for i in 0..m {
                let mut ds = 0.0;
                for c in 0..n {
                    let g = weight * err[(i, c)] / norm;
                    grad_jac[(i, c)] = g * scale[i];
                    ds += g * tape.jacobian[(i, c)];
                }
                let t = tanh[i];
                grad_out[i] = ds * self.bound_scale[i] * (-2.0 * t * (1.0 - t * t));
            }
            self.net.backward_jacobian(&tape, &grad_out, &grad_jac, &mut grads)?;
        }
        // offset term at the origin
        let origin = vec![0.0; n];
        let tape = self.net.forward_jacobian(&origin)?;
        let y0: Vec<f64> = (0..m)
            .map(|i| self.bound_scale[i] * tape.output[i].tanh() + self.bound_offset[i] - self.mean_shift[i])
            .collect();
        let offset = y0.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += offset;
        if offset > 0.0 {
            let mut grad_out = vec![0.0; 2 * m];
            for i in 0..m {
                let t = tape.output[i].tanh();
                grad_out[i] = weight * (y0[i] / offset) * self.bound_scale[i] * (1.0 - t * t);
            }
            let zero_jac = Matrix::zeros(2 * m, n);
            self.net.backward_jacobian(&tape, &grad_out, &zero_jac, &mut grads)?;
        }
        Ok((weight * total, grads))
    }

    /// Value of [`GaussianPolicy::gain_penalty`] only.
    pub fn gain_penalty_value(&self, states: &[Vec<f64>], target: &Matrix, weight: f64) -> Result<f64, NnError> {
        let mut total = 0.0;
        for x in states {
            total += self.action_jacobian(x)?.sub(target).map_err(NnError::from)?.frobenius_norm();
        }
        let origin = vec![0.0; self.state_dim()];
        let y0 = self.shifted_mean_unclipped(&origin)?;
        total += y0.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(weight * total)
    }

    /// Central-difference gradient of the gain penalty, one parameter at a
    /// time. Slow; kept as a cross-check and fallback.
    pub fn gain_penalty_fd(
        &self,
        states: &[Vec<f64>],
        target: &Matrix,
        weight: f64,
        step: f64,
    ) -> Result<(f64, MlpGrads), NnError> {
        let value = self.gain_penalty_value(states, target, weight)?;
        let count = self.net.param_count();
        let mut probe = self.clone();
        let mut flat = Vec::with_capacity(count);
        for idx in 0..count {
            let orig = *probe.net.params_mut().nth(idx).expect("index in range");
            *probe.net.params_mut().nth(idx).expect("index in range") = orig + step;
            let plus = probe.gain_penalty_value(states, target, weight)?;
            *probe.net.params_mut().nth(idx).expect("index in range") = orig - step;
            let minus = probe.gain_penalty_value(states, target, weight)?;
            *probe.net.params_mut().nth(idx).expect("index in range") = orig;
            flat.push((plus - minus) / (2.0 * step));
        }
        let mut grads = self.net.zero_grads();
        let mut it = flat.into_iter();
        for layer in grads.layers.iter_mut() {
            for v in layer.weight.as_mut_slice().iter_mut().chain(layer.bias.iter_mut()) {
                *v = it.next().expect("sized");
            }
        }
        Ok((value, grads))
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument {
            version: POLICY_FORMAT_VERSION,
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            layer_dims: self.net.dims(),
            weights: self.net.layers().iter().map(|l| l.weight.as_slice().to_vec()).collect(),
            biases: self.net.layers().iter().map(|l| l.bias.clone()).collect(),
            log_std_clamp: [self.log_std_clamp.0, self.log_std_clamp.1],
            bound_scale: self.bound_scale.clone(),
            bound_offset: self.bound_offset.clone(),
            mean_shift: self.mean_shift.clone(),
        }
    }

    pub fn from_document(doc: &PolicyDocument) -> Result<Self, NnError> {
        if doc.version != POLICY_FORMAT_VERSION {
            return Err(NnError::Format(format!("unsupported policy version {}", doc.version)));
        }
        let dims = &doc.layer_dims;
        if dims.len() < 2 || doc.weights.len() != dims.len() - 1 || doc.biases.len() != dims.len() - 1 {
            return Err(NnError::Format("layer_dims inconsistent with weights/biases".into()));
        }
        if dims[0] != doc.state_dim || dims[dims.len() - 1] != 2 * doc.action_dim {
            return Err(NnError::Format(format!(
                "layer_dims {dims:?} do not match state_dim {} / action_dim {}",
                doc.state_dim, doc.action_dim
            )));
        }
        let layers = dims
            .windows(2)
            .zip(doc.weights.iter().zip(&doc.biases))
            .map(|(d, (w, b))| {
                Ok(Layer {
                    weight: Matrix::new(d[1], d[0], w.clone())?,
                    bias: b.clone(),
                })
            })
            .collect::<Result<Vec<_>, NnError>>()?;
        let mut policy = Self::new(Mlp::new(layers)?, doc.bound_scale.clone(), doc.bound_offset.clone())?;
        if doc.mean_shift.len() != doc.action_dim {
            return Err(NnError::Format("mean_shift length mismatch".into()));
        }
        policy.log_std_clamp = (doc.log_std_clamp[0], doc.log_std_clamp[1]);
        policy.mean_shift = doc.mean_shift.clone();
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("policy document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let doc: PolicyDocument = serde_json::from_str(text).map_err(|e| NnError::Format(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// On-disk policy format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDocument {
    pub version: u32,
    pub state_dim: usize,
    pub action_dim: usize,
    pub layer_dims: Vec<usize>,
    /// Row-major (out × in) weights per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub log_std_clamp: [f64; 2],
    pub bound_scale: Vec<f64>,
    pub bound_offset: Vec<f64>,
    pub mean_shift: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

    /// Policy whose head outputs are the constants (μ, log σ) for every state.
    fn constant_policy(mu: f64, log_std: f64, a: f64, b: f64) -> GaussianPolicy {
        let mut net = Mlp::zeros(&[1, 2]).unwrap();
        net.layers_mut()[0].bias = vec![mu, log_std];
        GaussianPolicy::new(net, vec![a], vec![b]).unwrap()
    }

    #[test]
    fn log_prob_unit_scale() {
        let p = constant_policy(0.0, 0.0, 1.0, 0.0);
        let s = p.sample(&[0.3], &[0.0]).unwrap();
        assert_eq!(s.action, vec![0.0]);
        assert!((s.log_prob + HALF_LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn log_prob_scale_two() {
        let p = constant_policy(0.0, 0.0, 2.0, 0.0);
        let s = p.sample(&[0.0], &[0.0]).unwrap();
        assert_eq!(s.action, vec![0.0]);
        assert!((s.log_prob - (-HALF_LN_2PI - 2f64.ln())).abs() < 1e-12);
        assert!((s.log_prob + 1.61209).abs() < 1e-5);
    }

    #[test]
    fn stable_log_one_minus_tanh_sq() {
        for w in [-30.0, -3.0, -0.1, 0.0, 0.5, 4.0, 40.0] {
            let direct = (1.0 - f64::tanh(w).powi(2)).ln();
            let stable = log_one_minus_tanh_sq(w);
            if direct.is_finite() && w.abs() < 10.0 {
                assert!((direct - stable).abs() < 1e-10, "w={w}");
            }
            assert!(stable.is_finite());
        }
    }

    #[test]
    fn offset_box_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GaussianPolicy::init(3, &[8], &[4.0, -6.0], &[6.0, -4.0], &mut rng).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let noise: Vec<f64> = (0..2).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let a = p.sample(&x, &noise).unwrap().action;
            assert!((4.0..=6.0).contains(&a[0]) && (-6.0..=-4.0).contains(&a[1]));
        }
    }

    #[test]
    fn mean_action_matches_zero_noise_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = GaussianPolicy::init(2, &[6, 6], &[-2.0], &[3.0], &mut rng).unwrap();
        let x = [0.4, -1.2];
        assert_eq!(p.mean_action(&x).unwrap(), p.sample(&x, &[0.0]).unwrap().action);
        p.finalize().unwrap();
        assert_eq!(p.mean_action(&x).unwrap(), p.sample(&x, &[0.0]).unwrap().action);
    }

    #[test]
    fn zero_network_zero_action() {
        let p = GaussianPolicy::new(Mlp::zeros(&[2, 4, 2]).unwrap(), vec![1.0], vec![0.0]).unwrap();
        assert_eq!(p.mean_action(&[5.0, -3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn finalize_zeroes_origin_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = GaussianPolicy::init(2, &[5], &[-1.0, -1.0], &[1.0, 1.0], &mut rng).unwrap();
        p.net_mut().layers_mut()[1].bias[0] = 0.3;
        let j_before = p.action_jacobian(&[0.0, 0.0]).unwrap();
        p.finalize().unwrap();
        let y0 = p.mean_action(&[0.0, 0.0]).unwrap();
        assert!(y0.iter().all(|v| v.abs() <= 1e-12));
        let shift = p.mean_shift().to_vec();
        let second = p.finalize().unwrap();
        assert!(second.iter().all(|&v| v == 0.0));
        assert_eq!(p.mean_shift(), &shift[..]);
        assert_eq!(p.action_jacobian(&[0.0, 0.0]).unwrap(), j_before);
    }

    #[test]
    fn already_centered_policy_unchanged() {
        let p0 = GaussianPolicy::new(Mlp::zeros(&[2, 3, 2]).unwrap(), vec![1.0], vec![0.0]).unwrap();
        let mut p = p0.clone();
        p.finalize().unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = GaussianPolicy::init(4, &[7, 3], &[-10.0], &[10.0], &mut rng).unwrap();
        p.net_mut().layers_mut()[0].bias[1] = 1.0 / 3.0;
        p.finalize().unwrap();
        let back = GaussianPolicy::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let bits = |q: &GaussianPolicy| q.net().params().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&p));
    }

    #[test]
    fn bad_documents_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = GaussianPolicy::init(2, &[3], &[-1.0], &[1.0], &mut rng).unwrap();
        let mut doc = p.to_document();
        doc.version = 9;
        assert!(GaussianPolicy::from_document(&doc).is_err());
        let mut doc = p.to_document();
        doc.state_dim = 3;
        assert!(GaussianPolicy::from_document(&doc).is_err());
    }

    /// Trapezoid-free midpoint quadrature of exp(log π(y)) over (b−a, b+a),
    /// evaluating the density through `sample` by inverting the squash.
    pub(crate) fn density_mass(mu: f64, log_std: f64, a: f64, b: f64, cells: usize) -> f64 {
        let p = constant_policy(mu, log_std, a, b);
        let sigma = log_std.exp();
        let h = 2.0 / cells as f64;
        (0..cells)
            .map(|k| {
                // integrate in z = tanh(w) ∈ (−1, 1); dy = a·dz
                let z = -1.0 + (k as f64 + 0.5) * h;
                let w = z.atanh();
                let noise = (w - mu) / sigma;
                let lp = p.sample(&[0.0], &[noise]).unwrap().log_prob;
                lp.exp() * a * h
            })
            .sum()
    }

    #[test]
    fn density_integrates_to_one() {
        let mass = density_mass(0.3, -0.5, 2.0, 1.0, 200_000);
        assert!((mass - 1.0).abs() < 1e-4, "mass {mass}");
    }

    #[test]
    fn bound_containment_many_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = GaussianPolicy::init(2, &[4], &[-0.5, 1.0], &[0.5, 3.0], &mut rng).unwrap();
        let (lo, hi) = (p.action_low(), p.action_high());
        for _ in 0..100_000 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let noise = [5.0 * rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
            let a = p.sample(&x, &noise).unwrap().action;
            for i in 0..2 {
                assert!(a[i] >= lo[i] && a[i] <= hi[i]);
            }
        }
    }

    #[test]
    fn batch_sample_agrees_with_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = GaussianPolicy::init(3, &[5, 5], &[-2.0, 0.0], &[2.0, 1.0], &mut rng).unwrap();
        let states = Matrix::from_rows(&[&[0.1, 0.2, -0.3], &[1.0, -1.0, 0.5]]);
        let noise = Matrix::from_rows(&[&[0.3, -1.0], &[2.0, 0.1]]);
        let batch = p.sample_batch(&states, &noise).unwrap();
        for b in 0..2 {
            let s = p.sample(states.row(b), noise.row(b)).unwrap();
            for i in 0..2 {
                assert!((s.action[i] - batch.actions[(b, i)]).abs() < 1e-14);
            }
            assert!((s.log_prob - batch.log_probs[b]).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_vanishes_on_exact_linear_match() {
        // single linear layer: μ = W x, log σ = 0; a = 1, so J(0) = W when tanh'(0)=1
        let layer = Layer {
            weight: Matrix::from_rows(&[&[-0.4, -0.1], &[0.0, 0.0]]),
            bias: vec![0.0, 0.0],
        };
        let p = GaussianPolicy::new(Mlp::new(vec![layer]).unwrap(), vec![1.0], vec![0.0]).unwrap();
        let target = Matrix::from_rows(&[&[-0.4, -0.1]]);
        let (v, g) = p.gain_penalty(&[vec![0.0, 0.0]], &target, 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| x == 0.0));
    }

    #[test]
    fn penalty_gradient_analytic_matches_fd_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = GaussianPolicy::init(2, &[6, 6], &[-3.0, -1.0], &[3.0, 2.0], &mut rng).unwrap();
        p.net_mut().layers_mut()[2].bias[0] = 0.2;
        let states = vec![vec![0.0, 0.0], vec![0.1, -0.05], vec![-0.08, 0.02]];
        let target = Matrix::from_rows(&[&[-1.2, -0.3], &[0.4, -0.9]]);
        let (va, ga) = p.gain_penalty(&states, &target, 0.7).unwrap();
        let (vf, gf) = p.gain_penalty_fd(&states, &target, 0.7, 1e-5).unwrap();
        assert!((va - vf).abs() < 1e-12);
        for (a, f) in ga.iter().zip(gf.iter()) {
            assert!((a - f).abs() / a.abs().max(f.abs()).max(1e-4) <= 1e-5, "analytic {a} fd {f}");
        }
    }

    proptest! {
        #[test]
        fn squashed_actions_inside_box(seed in any::<u64>(), n0 in -50.0f64..50.0, x0 in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = GaussianPolicy::init(1, &[4], &[5.0 - 1.0], &[5.0 + 1.0], &mut rng).unwrap();
            let a = p.sample(&[x0], &[n0]).unwrap().action[0];
            prop_assert!((4.0..=6.0).contains(&a));
        }
    }
}
