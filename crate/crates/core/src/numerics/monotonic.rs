//! Layers whose output is strictly increasing in (part of) their input.
//!
//! Positivity of the weights is obtained by parametrizing them as
//! `exp(raw)`; composing such layers with strictly increasing activations
//! yields a map that is strictly increasing in every input coordinate.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::activation::{sigmoid, softplus, Activation};
use super::param::{join, Module, Param};
use super::{check_cols, Layer, Tensor2};
use crate::error::{Error, Result};

/// Dense layer with effective weight `exp(raw)` (elementwise).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotonicDense {
    pub raw_weight: Param,
    pub bias: Param,
    #[serde(skip)]
    cache: Option<(Tensor2, Tensor2)>,
}

impl MonotonicDense {
    /// Raw weights are drawn around `ln(1/fan_in)` so that the effective
    /// weights start at a sensible scale.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let center = -(fan_in.max(1) as f64).ln();
        let normal = Normal::new(center, 0.3).expect("valid normal");
        let raw = Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng));
        Self::from_raw(raw, Array2::zeros((1, fan_out)))
    }

    pub fn from_raw(raw_weight: Array2<f64>, bias: Array2<f64>) -> Self {
        assert_eq!(raw_weight.ncols(), bias.ncols());
        Self { raw_weight: Param::new(raw_weight), bias: Param::new(bias), cache: None }
    }

    pub fn fan_in(&self) -> usize {
        self.raw_weight.value.nrows()
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        self.raw_weight.value.mapv(f64::exp)
    }

    pub fn infer(&self, x: &Tensor2) -> Tensor2 {
        x.dot(&self.effective_weight()) + &self.bias.value
    }
}

impl Module for MonotonicDense {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "raw_weight"), &mut self.raw_weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Layer for MonotonicDense {
    fn forward(&mut self, x: &Tensor2, _train: bool) -> Result<Tensor2> {
        check_cols("monotonic dense", x, self.fan_in())?;
        let w = self.effective_weight();
        let y = x.dot(&w) + &self.bias.value;
        self.cache = Some((x.clone(), w));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor2) -> Tensor2 {
        let (x, w) = self.cache.as_ref().expect("monotonic backward before forward");
        let dw = x.t().dot(grad);
        self.raw_weight.grad += &(&dw * w);
        self.bias.grad += &grad.sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.dot(&w.t())
    }
}

/// A stack of [`MonotonicDense`] layers joined by strictly increasing
/// activations; strictly increasing in every input coordinate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotonicMlp {
    pub layers: Vec<MonotonicDense>,
    pub activation: Activation,
    #[serde(skip)]
    outputs: Vec<(Tensor2, Tensor2)>,
}

impl MonotonicMlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if !activation.is_strictly_increasing() {
            return Err(Error::InvalidConfig(format!(
                "activation {activation:?} is not strictly increasing"
            )));
        }
        if widths.len() < 2 {
            return Err(Error::InvalidConfig("monotonic MLP needs at least one layer".into()));
        }
        let layers = widths.windows(2).map(|w| MonotonicDense::new(w[0], w[1], rng)).collect();
        Ok(Self { layers, activation, outputs: Vec::new() })
    }

    pub fn infer(&self, x: &Tensor2) -> Tensor2 {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.infer(&h);
            if i < last {
                h = self.activation.forward(&h);
            }
        }
        h
    }
}

impl Module for MonotonicMlp {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

impl Layer for MonotonicMlp {
    fn forward(&mut self, x: &Tensor2, train: bool) -> Result<Tensor2> {
        self.outputs.clear();
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = self.layers[i].forward(&h, train)?;
            if i < last {
                let a = self.activation.forward(&h);
                self.outputs.push((h, a.clone()));
                h = a;
            }
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor2) -> Tensor2 {
        let mut g = grad.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let (pre, post) = &self.outputs[i];
                g = self.activation.backward(pre, post, &g);
            }
            g = self.layers[i].backward(&g);
        }
        g
    }
}

/// Lower bound added to the noise scale so the path never flattens.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Slope of the direct (identity) noise path is `SKIP_FLOOR + exp(raw)`.
pub const SKIP_FLOOR: f64 = 1e-3;

/// Conditional, per-dimension monotone noise transform.
///
/// For output dimension `i` with noise `u_i` and conditioning features
/// supplying a location `mu_i`, a log-scale `rho_i` and unit offsets
/// `beta_ik`:
///
/// ```text
/// z_ik  = tanh(exp(w_ik) u_i + beta_ik)
/// m_i   = (SKIP_FLOOR + exp(w0_i)) u_i + sum_k exp(v_ik) z_ik
/// out_i = mu_i + (softplus(rho_i) + SIGMA_FLOOR) m_i
/// ```
///
/// Each `(w_i, v_i)` pair is a two-layer [`MonotonicDense`] stack of width
/// `units`, so `out_i` is strictly increasing in `u_i` and independent of
/// `u_j` for `j != i`, whatever the conditioning values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotoneNoiseHead {
    pub skip_raw: Param,
    pub hidden: Vec<MonotonicDense>,
    pub output: Vec<MonotonicDense>,
    #[serde(skip)]
    cache: Option<HeadCache>,
}

#[derive(Clone, Debug)]
struct HeadCache {
    u: Tensor2,
    z: Vec<Tensor2>,
    m: Tensor2,
    rho: Tensor2,
    sigma: Tensor2,
}

/// Gradients with respect to the head's inputs.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub u: Tensor2,
    pub mu: Tensor2,
    pub rho: Tensor2,
    pub beta: Tensor2,
}

impl MonotoneNoiseHead {
    pub fn new<R: Rng + ?Sized>(dims: usize, units: usize, rng: &mut R) -> Self {
        let hidden = (0..dims)
            .map(|_| {
                let mut l = MonotonicDense::new(1, units, rng);
                l.bias.value.fill(0.0);
                l
            })
            .collect();
        let output = (0..dims).map(|_| MonotonicDense::new(units, 1, rng)).collect();
        Self { skip_raw: Param::zeros(1, dims), hidden, output, cache: None }
    }

    pub fn dims(&self) -> usize {
        self.hidden.len()
    }

    pub fn units(&self) -> usize {
        self.hidden.first().map_or(0, |l| l.bias.value.ncols())
    }

    fn check(&self, u: &Tensor2, mu: &Tensor2, rho: &Tensor2, beta: &Tensor2) -> Result<()> {
        let d = self.dims();
        check_cols("noise head u", u, d)?;
        check_cols("noise head mu", mu, d)?;
        check_cols("noise head rho", rho, d)?;
        check_cols("noise head beta", beta, d * self.units())?;
        let b = u.nrows();
        if mu.nrows() != b || rho.nrows() != b || beta.nrows() != b {
            return Err(Error::Dimension("noise head batch sizes differ".into()));
        }
        Ok(())
    }

    /// Returns `(out, m, z)`; shared by the caching and pure paths.
    fn compute(&self, u: &Tensor2, mu: &Tensor2, rho: &Tensor2, beta: &Tensor2) -> (Tensor2, Tensor2, Tensor2, Vec<Tensor2>) {
        let k = self.units();
        let mut m = Array2::zeros(u.raw_dim());
        let mut zs = Vec::with_capacity(self.dims());
        for i in 0..self.dims() {
            let ui = u.slice(s![.., i..i + 1]).to_owned();
            let pre = self.hidden[i].infer(&ui) + &beta.slice(s![.., i * k..(i + 1) * k]);
            let z = pre.mapv(f64::tanh);
            let mi = self.output[i].infer(&z);
            let skip = SKIP_FLOOR + self.skip_raw.value[[0, i]].exp();
            let mut col = m.column_mut(i);
            col.assign(&(&mi.column(0) + &(&ui.column(0) * skip)));
            zs.push(z);
        }
        let sigma = rho.mapv(|r| softplus(r) + SIGMA_FLOOR);
        let out = mu + &(&sigma * &m);
        (out, m, sigma, zs)
    }

    pub fn infer(&self, u: &Tensor2, mu: &Tensor2, rho: &Tensor2, beta: &Tensor2) -> Result<Tensor2> {
        self.check(u, mu, rho, beta)?;
        Ok(self.compute(u, mu, rho, beta).0)
    }

    pub fn forward(&mut self, u: &Tensor2, mu: &Tensor2, rho: &Tensor2, beta: &Tensor2) -> Result<Tensor2> {
        self.check(u, mu, rho, beta)?;
        let (out, m, sigma, z) = self.compute(u, mu, rho, beta);
        self.cache = Some(HeadCache { u: u.clone(), z, m, rho: rho.clone(), sigma });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor2) -> HeadGrads {
        let c = self.cache.take().expect("noise head backward before forward");
        let k = self.units();
        let d = self.dims();
        let dm = grad * &c.sigma;
        let mut drho = grad * &c.m;
        ndarray::Zip::from(&mut drho).and(&c.rho).for_each(|g, &r| *g *= sigmoid(r));
        let mut du = Array2::zeros(c.u.raw_dim());
        let mut dbeta = Array2::zeros((c.u.nrows(), d * k));
        for i in 0..d {
            let dmi = dm.slice(s![.., i..i + 1]).to_owned();
            let ui = c.u.slice(s![.., i..i + 1]).to_owned();
            let skip_eff = self.skip_raw.value[[0, i]].exp();
            self.skip_raw.grad[[0, i]] += (&dmi * &ui).sum() * skip_eff;

            // output layer: m_i = z W_out + b
            let w_out = self.output[i].effective_weight();
            self.output[i].raw_weight.grad += &(&c.z[i].t().dot(&dmi) * &w_out);
            self.output[i].bias.grad[[0, 0]] += dmi.sum();
            let dz = dmi.dot(&w_out.t());
            let z = &c.z[i];
            let dpre = &dz * &z.mapv(|v| 1.0 - v * v);

            // hidden layer: pre = u_i W_hid + b + beta_i
            let w_hid = self.hidden[i].effective_weight();
            self.hidden[i].raw_weight.grad += &(&ui.t().dot(&dpre) * &w_hid);
            self.hidden[i].bias.grad += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
            dbeta.slice_mut(s![.., i * k..(i + 1) * k]).assign(&dpre);
            let du_i = dpre.dot(&w_hid.t()) + &(&dmi * (SKIP_FLOOR + skip_eff));
            du.slice_mut(s![.., i..i + 1]).assign(&du_i);
        }
        HeadGrads { u: du, mu: grad.clone(), rho: drho, beta: dbeta }
    }

    /// Lower bound on `d out_i / d u_i` for a given log-scale.
    pub fn slope_lower_bound(&self, rho: f64, dim: usize) -> f64 {
        (softplus(rho) + SIGMA_FLOOR) * (SKIP_FLOOR + self.skip_raw.value[[0, dim]].exp())
    }
}

impl Module for MonotoneNoiseHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "skip_raw"), &mut self.skip_raw);
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("hidden{i}")), f);
        }
        for (i, l) in self.output.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("output{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_raw_weights_give_unit_effective_weights() {
        let l = MonotonicDense::from_raw(Array2::zeros((3, 2)), Array2::zeros((1, 2)));
        assert!(l.effective_weight().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn effective_weights_positive_for_arbitrary_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-30.0..30.0));
        let l = MonotonicDense::from_raw(raw, Array2::zeros((1, 5)));
        assert!(l.effective_weight().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn monotonic_mlp_rejects_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MonotonicMlp::new(&[2, 3, 1], Activation::Relu, &mut rng).is_err());
    }

    #[test]
    fn monotonic_mlp_is_increasing_in_each_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = MonotonicMlp::new(&[3, 8, 8, 2], Activation::Tanh, &mut rng).unwrap();
        for _ in 0..200 {
            let x = Array2::from_shape_fn((1, 3), |_| rng.gen_range(-3.0..3.0));
            let mut xp = x.clone();
            let j = rng.gen_range(0..3);
            xp[[0, j]] += rng.gen_range(0.01..1.0);
            let (y, yp) = (net.infer(&x), net.infer(&xp));
            assert!(yp.iter().zip(y.iter()).all(|(a, b)| a > b));
        }
    }

    #[test]
    fn noise_head_is_separable_and_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = MonotoneNoiseHead::new(2, 4, &mut rng);
        let mu = array![[0.3, -1.0]];
        let rho = array![[-2.0, 0.5]];
        let beta = Array2::from_shape_fn((1, 8), |_| rng.gen_range(-2.0..2.0));
        let base = head.infer(&array![[0.1, 0.2]], &mu, &rho, &beta).unwrap();
        let bump0 = head.infer(&array![[0.4, 0.2]], &mu, &rho, &beta).unwrap();
        assert!(bump0[[0, 0]] > base[[0, 0]]);
        assert_eq!(bump0[[0, 1]], base[[0, 1]]);
    }
}
