//! Multilayer perceptron with tanh hidden layers and a linear output layer.

use rand::Rng;

use super::NnError;
use crate::numerics::Matrix;

/// Affine layer `y = W·x + b`, with `W` stored as (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Parameter gradients, laid out like the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    /// Flat view in the same order as [`Mlp::params_mut`].
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()).copied())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().collect()
    }
}

/// Activations retained from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the (batch × in) input of layer `l`; hidden outputs are
    /// post-tanh.
    inputs: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Forward pass that also carries `∂h/∂x` through every layer.
#[derive(Debug, Clone)]
pub struct JacobianTape {
    /// per layer: input activation and its input tangent
    inputs: Vec<Vec<f64>>,
    tangents: Vec<Matrix>,
    /// per hidden layer: tanh output and pre-activation tangent `W·T`
    hidden: Vec<Vec<f64>>,
    pre_tangents: Vec<Matrix>,
    pub output: Vec<f64>,
    pub jacobian: Matrix,
}

fn affine_batch(layer: &Layer, x: &Matrix) -> Matrix {
    let (batch, in_dim) = x.shape();
    let out_dim = layer.out_dim();
    let w = layer.weight.as_slice();
    let mut out = Matrix::zeros(batch, out_dim);
    for b in 0..batch {
        let xr = x.row(b);
        let orow = out.row_mut(b);
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut s = layer.bias[o];
            for (wi, xi) in wr.iter().zip(xr) {
                s += wi * xi;
            }
            orow[o] = s;
        }
    }
    out
}

fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let in_dim = layer.in_dim();
    let w = layer.weight.as_slice();
    (0..layer.out_dim())
        .map(|o| {
            let mut s = layer.bias[o];
            for (wi, xi) in w[o * in_dim..(o + 1) * in_dim].iter().zip(x) {
                s += wi * xi;
            }
            s
        })
        .collect()
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidLayers("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(NnError::InvalidLayers(format!(
                    "layer {i}: bias length {} != out_dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(NnError::InvalidLayers(format!("layer {i}: non-finite parameter")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::InvalidLayers(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Weights ~ U(−1/√fan_in, 1/√fan_in), zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::InvalidLayers(format!("bad layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|d| {
                let bound = 1.0 / (d[0] as f64).sqrt();
                let data = (0..d[0] * d[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Matrix::new(d[1], d[0], data).expect("sized"),
                    bias: vec![0.0; d[1]],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::InvalidLayers(format!("bad layer dims {dims:?}")));
        }
        Self::new(
            dims.windows(2)
                .map(|d| Layer {
                    weight: Matrix::zeros(d[1], d[0]),
                    bias: vec![0.0; d[1]],
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Weights then bias, layer by layer.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()).copied())
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    fn check_input(&self, len: usize) -> Result<(), NnError> {
        if len != self.in_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.in_dim(),
                got: len,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x.len())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = affine(layer, &h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(h)
    }

    /// Batched forward over the rows of `x` (batch × in_dim).
    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardCache, NnError> {
        self.check_input(x.cols())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine_batch(layer, &h);
            if i < last {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(h);
            h = z;
        }
        Ok(ForwardCache { inputs, output: h })
    }

    /// Reverse-mode pass: given `∂L/∂output` per sample, returns the
    /// parameter gradients summed over the batch and `∂L/∂input` per sample.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(MlpGrads, Matrix), NnError> {
        if upstream.shape() != cache.output.shape() {
            return Err(NnError::DimensionMismatch {
                expected: cache.output.cols(),
                got: upstream.cols(),
            });
        }
        let batch = upstream.rows();
        let mut grads = self.zero_grads();
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
            let g = &mut grads.layers[l];
            {
                let gw = g.weight.as_mut_slice();
                for b in 0..batch {
                    let d = delta.row(b);
                    let a = input.row(b);
                    for o in 0..out_dim {
                        let dv = d[o];
                        if dv == 0.0 {
                            continue;
                        }
                        let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for (gwi, ai) in row.iter_mut().zip(a) {
                            *gwi += dv * ai;
                        }
                    }
                    for (gb, dv) in g.bias.iter_mut().zip(d) {
                        *gb += dv;
                    }
                }
            }
            let w = layer.weight.as_slice();
            let mut d_in = Matrix::zeros(batch, in_dim);
            for b in 0..batch {
                let d = delta.row(b);
                let row = d_in.row_mut(b);
                for o in 0..out_dim {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    for (ri, wi) in row.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                        *ri += dv * wi;
                    }
                }
            }
            if l > 0 {
                // input of layer l is the tanh output of layer l-1
                for (dv, h) in d_in.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *dv *= 1.0 - h * h;
                }
            }
            delta = d_in;
        }
        Ok((grads, delta))
    }

    /// Forward pass propagating the input tangent alongside the activations.
    pub fn forward_jacobian(&self, x: &[f64]) -> Result<JacobianTape, NnError> {
        self.check_input(x.len())?;
        let n = x.len();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut tangents = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(last);
        let mut pre_tangents = Vec::with_capacity(last);
        let mut a = x.to_vec();
        let mut t = Matrix::identity(n);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &a);
            let zt = layer.weight.matmul(&t).expect("chained dims");
            inputs.push(a);
            tangents.push(t);
            if i < last {
                let h: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
                let mut next_t = zt.clone();
                for (r, hv) in h.iter().enumerate() {
                    let s = 1.0 - hv * hv;
                    next_t.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                hidden.push(h.clone());
                pre_tangents.push(zt);
                a = h;
                t = next_t;
            } else {
                return Ok(JacobianTape {
                    inputs,
                    tangents,
                    hidden,
                    pre_tangents,
                    output: z,
                    jacobian: zt,
                });
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Reverse pass through [`Mlp::forward_jacobian`]: accumulates into
    /// `grads` the parameter gradient of a loss with partials `grad_out`
    /// (w.r.t. the output) and `grad_jac` (w.r.t. the input Jacobian).
    pub fn backward_jacobian(
        &self,
        tape: &JacobianTape,
        grad_out: &[f64],
        grad_jac: &Matrix,
        grads: &mut MlpGrads,
    ) -> Result<(), NnError> {
        if grad_out.len() != self.out_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.out_dim(),
                got: grad_out.len(),
            });
        }
        if grad_jac.shape() != tape.jacobian.shape() {
            return Err(NnError::DimensionMismatch {
                expected: tape.jacobian.rows(),
                got: grad_jac.rows(),
            });
        }
        let mut ga = grad_out.to_vec();
        let mut gt = grad_jac.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (gz, gzt) = if l == self.layers.len() - 1 {
                (ga, gt)
            } else {
                let h = &tape.hidden[l];
                let zt = &tape.pre_tangents[l];
                let mut gzt = gt.clone();
                let mut gz = vec![0.0; h.len()];
                for r in 0..h.len() {
                    let s = 1.0 - h[r] * h[r];
                    let gs: f64 = gt.row(r).iter().zip(zt.row(r)).map(|(a, b)| a * b).sum();
                    gzt.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    gz[r] = (ga[r] - 2.0 * h[r] * gs) * s;
                }
                (gz, gzt)
            };
            let input = &tape.inputs[l];
            let tangent = &tape.tangents[l];
            let g = &mut grads.layers[l];
            let gw_t = gzt.matmul(&tangent.transpose()).expect("chained dims");
            for o in 0..layer.out_dim() {
                let row = g.weight.row_mut(o);
                for (i, v) in row.iter_mut().enumerate() {
                    *v += gz[o] * input[i] + gw_t[(o, i)];
                }
                g.bias[o] += gz[o];
            }
            if l > 0 {
                ga = layer.weight.transpose().matvec(&gz).expect("chained dims");
                gt = layer.weight.t_matmul(&gzt).expect("chained dims");
            } else {
                break;
            }
        }
        Ok(())
    }

    /// Exact Jacobian of the network output with respect to its input.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Matrix, NnError> {
        Ok(self.forward_jacobian(x)?.jacobian)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: f64, b: f64) -> Layer {
        Layer {
            weight: Matrix::from_rows(&[&[w]]),
            bias: vec![b],
        }
    }

    fn fd_jacobian(net: &Mlp, x: &[f64], h: f64) -> Matrix {
        let mut j = Matrix::zeros(net.out_dim(), x.len());
        for c in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let yp = net.forward(&xp).unwrap();
            let ym = net.forward(&xm).unwrap();
            for r in 0..net.out_dim() {
                j[(r, c)] = (yp[r] - ym[r]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn affine_single_layer() {
        let net = Mlp::new(vec![linear(2.0, 1.0)]).unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
        assert_eq!(net.input_jacobian(&[-4.0]).unwrap(), Matrix::from_rows(&[&[2.0]]));
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp::zeros(&[3, 4, 2]).unwrap();
        net.layers_mut()[1].bias = vec![0.5, -1.5];
        assert_eq!(net.forward(&[9.0, -2.0, 0.1]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn two_layer_hand_value() {
        let net = Mlp::new(vec![linear(1.0, 0.0), linear(1.0, 0.0)]).unwrap();
        let y = net.forward(&[0.5]).unwrap()[0];
        assert!((y - 0.5f64.tanh()).abs() < 1e-15);
        assert!((y - 0.46212).abs() < 1e-5);
        assert_eq!(net.input_jacobian(&[0.0]).unwrap(), Matrix::from_rows(&[&[1.0]]));
    }

    #[test]
    fn scalar_chain_rule() {
        let net = Mlp::new(vec![linear(2.0, 0.0)]).unwrap();
        let cache = net.forward_batch(&Matrix::from_rows(&[&[1.0]])).unwrap();
        // loss ½(y − 0)², dL/dy = y = 2
        let up = cache.output().clone();
        let (g, _) = net.backward(&cache, &up).unwrap();
        assert_eq!(g.layers[0].weight[(0, 0)], 2.0);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::init(&[3, 8, 2], &mut rng).unwrap();
        let x = Matrix::from_rows(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.0]]);
        let cache = net.forward_batch(&x).unwrap();
        let (g, dx) = net.backward(&cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.iter().all(|v| v == 0.0));
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let net = Mlp::zeros(&[2, 3, 1]).unwrap();
        assert_eq!(
            net.forward(&[1.0]),
            Err(NnError::DimensionMismatch { expected: 2, got: 1 })
        );
        assert!(Mlp::new(vec![linear(1.0, 0.0), Layer {
            weight: Matrix::zeros(1, 2),
            bias: vec![0.0],
        }])
        .is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::init(&[2, 16, 1], &mut rng).unwrap();
        let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
        let x = Matrix::new(5, 2, xs).unwrap();
        let loss = |n: &Mlp| -> f64 {
            (0..5)
                .map(|b| {
                    let y = n.forward(x.row(b)).unwrap()[0];
                    0.5 * (y - 0.3).powi(2)
                })
                .sum()
        };
        let cache = net.forward_batch(&x).unwrap();
        let mut up = cache.output().clone();
        up.as_mut_slice().iter_mut().for_each(|v| *v -= 0.3);
        let (g, _) = net.backward(&cache, &up).unwrap();
        let analytic = g.to_vec();
        let h = 1e-5;
        for idx in 0..net.param_count() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            *plus.params_mut().nth(idx).unwrap() += h;
            *minus.params_mut().nth(idx).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-3);
            assert!(err <= 1e-6, "param {idx}: fd {fd} analytic {}", analytic[idx]);
        }
    }

    #[test]
    fn input_gradient_matches_jacobian_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::init(&[3, 5, 5, 2], &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let cache = net.forward_batch(&Matrix::from_rows(&[&x])).unwrap();
        let up = Matrix::from_rows(&[&[1.0, -2.0]]);
        let (_, dx) = net.backward(&cache, &up).unwrap();
        let j = net.input_jacobian(&x).unwrap();
        for c in 0..3 {
            let expect = j[(0, c)] - 2.0 * j[(1, c)];
            assert!((dx[(0, c)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_random_points_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::init(&[2, 16, 2], &mut rng).unwrap();
        for _ in 0..5 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let j = net.input_jacobian(&x).unwrap();
            let fd = fd_jacobian(&net, &x, 1e-5);
            for (a, b) in j.as_slice().iter().zip(fd.as_slice()) {
                assert!((a - b).abs() / b.abs().max(1e-3) <= 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_backward_matches_fd_of_jacobian_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Mlp::init(&[2, 6, 6, 2], &mut rng).unwrap();
        let x = [0.4, -0.2];
        let target = Matrix::from_rows(&[&[0.3, -0.1], &[0.0, 0.5]]);
        // L = ½‖J − T‖² + 0.7·y₀
        let loss = |n: &Mlp| {
            let tape = n.forward_jacobian(&x).unwrap();
            0.5 * tape.jacobian.sub(&target).unwrap().frobenius_norm().powi(2) + 0.7 * tape.output[0]
        };
        let tape = net.forward_jacobian(&x).unwrap();
        let gj = tape.jacobian.sub(&target).unwrap();
        let mut grads = net.zero_grads();
        net.backward_jacobian(&tape, &[0.7, 0.0], &gj, &mut grads).unwrap();
        let analytic = grads.to_vec();
        let h = 1e-5;
        for idx in 0..net.param_count() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            *plus.params_mut().nth(idx).unwrap() += h;
            *minus.params_mut().nth(idx).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-4);
            assert!(err <= 1e-5, "param {idx}: fd {fd} analytic {}", analytic[idx]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn jacobian_matches_fd_on_random_nets(seed in any::<u64>(), hidden in 1usize..12, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::init(&[2, hidden, hidden, 3], &mut rng).unwrap();
            let x = [x0, x1];
            let j = net.input_jacobian(&x).unwrap();
            let fd = fd_jacobian(&net, &x, 1e-5);
            for (a, b) in j.as_slice().iter().zip(fd.as_slice()) {
                prop_assert!((a - b).abs() / b.abs().max(1e-2) <= 1e-5, "analytic {} fd {}", a, b);
            }
        }
    }
}
