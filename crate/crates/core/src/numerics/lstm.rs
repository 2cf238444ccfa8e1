//! Single-layer LSTM used to summarize a short `(s, a)` history into a
//! subject embedding.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::activation::sigmoid;
use super::param::{join, Module, Param};
use super::{check_cols, Tensor2};
use crate::error::{Error, Result};

/// LSTM cell with gate layout `[input, forget, candidate, output]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_input: Param,
    pub w_hidden: Param,
    pub bias: Param,
    #[serde(skip)]
    steps: Vec<StepCache>,
}

#[derive(Clone, Debug)]
struct StepCache {
    x: Tensor2,
    h_prev: Tensor2,
    c_prev: Tensor2,
    i: Tensor2,
    f: Tensor2,
    g: Tensor2,
    o: Tensor2,
    tanh_c: Tensor2,
}

/// Gate activations and new state for one step.
struct StepOut {
    i: Tensor2,
    f: Tensor2,
    g: Tensor2,
    o: Tensor2,
    c: Tensor2,
    tanh_c: Tensor2,
    h: Tensor2,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w_input = Array2::from_shape_fn((input, 4 * hidden), |_| dist.sample(rng));
        let w_hidden = Array2::from_shape_fn((hidden, 4 * hidden), |_| dist.sample(rng));
        let mut bias = Array2::zeros((1, 4 * hidden));
        bias.slice_mut(s![.., hidden..2 * hidden]).fill(1.0);
        Self { w_input: Param::new(w_input), w_hidden: Param::new(w_hidden), bias: Param::new(bias), steps: Vec::new() }
    }

    pub fn input_size(&self) -> usize {
        self.w_input.value.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.value.nrows()
    }

    fn step(&self, x: &Tensor2, h: &Tensor2, c: &Tensor2) -> StepOut {
        let n = self.hidden_size();
        let z = x.dot(&self.w_input.value) + h.dot(&self.w_hidden.value) + &self.bias.value;
        let i = z.slice(s![.., 0..n]).mapv(sigmoid);
        let f = z.slice(s![.., n..2 * n]).mapv(sigmoid);
        let g = z.slice(s![.., 2 * n..3 * n]).mapv(f64::tanh);
        let o = z.slice(s![.., 3 * n..4 * n]).mapv(sigmoid);
        let c_new = &f * c + &i * &g;
        let tanh_c = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c;
        StepOut { i, f, g, o, c: c_new, tanh_c, h: h_new }
    }

    /// One cell application from the given state; returns `(h, c)`.
    pub fn cell(&self, x: &Tensor2, h: &Tensor2, c: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        check_cols("lstm input", x, self.input_size())?;
        let out = self.step(x, h, c);
        Ok((out.h, out.c))
    }

    fn check_sequence(&self, seq: &[Tensor2]) -> Result<usize> {
        let first = seq.first().ok_or(Error::EmptySequence)?;
        let batch = first.nrows();
        for x in seq {
            check_cols("lstm input", x, self.input_size())?;
            if x.nrows() != batch {
                return Err(Error::Dimension("lstm sequence batch sizes differ".into()));
            }
        }
        Ok(batch)
    }

    /// Runs the sequence from a zero state and returns the final hidden
    /// vector (batch x hidden). No state is cached.
    pub fn encode(&self, seq: &[Tensor2]) -> Result<Tensor2> {
        let batch = self.check_sequence(seq)?;
        let n = self.hidden_size();
        let mut h = Array2::zeros((batch, n));
        let mut c = Array2::zeros((batch, n));
        for x in seq {
            let out = self.step(x, &h, &c);
            h = out.h;
            c = out.c;
        }
        Ok(h)
    }

    /// Same as [`encode`](Self::encode) but caches every step for
    /// [`backward`](Self::backward).
    pub fn forward(&mut self, seq: &[Tensor2]) -> Result<Tensor2> {
        let batch = self.check_sequence(seq)?;
        let n = self.hidden_size();
        self.steps.clear();
        let mut h = Array2::zeros((batch, n));
        let mut c = Array2::zeros((batch, n));
        for x in seq {
            let out = self.step(x, &h, &c);
            self.steps.push(StepCache {
                x: x.clone(),
                h_prev: h,
                c_prev: c,
                i: out.i,
                f: out.f,
                g: out.g,
                o: out.o,
                tanh_c: out.tanh_c,
            });
            h = out.h;
            c = out.c;
        }
        Ok(h)
    }

    /// Backpropagation through time from a gradient on the final hidden
    /// vector. Returns the gradient for each input step.
    pub fn backward(&mut self, grad_h: &Tensor2) -> Vec<Tensor2> {
        assert!(!self.steps.is_empty(), "lstm backward before forward");
        let n = self.hidden_size();
        let mut dh = grad_h.clone();
        let mut dc: Tensor2 = Array2::zeros(grad_h.raw_dim());
        let mut dxs = vec![Array2::zeros((0, 0)); self.steps.len()];
        for (t, st) in self.steps.iter().enumerate().rev() {
            let d_o = &dh * &st.tanh_c;
            dc = dc + &(&dh * &st.o * &st.tanh_c.mapv(|v| 1.0 - v * v));
            let d_f = &dc * &st.c_prev;
            let d_i = &dc * &st.g;
            let d_g = &dc * &st.i;
            let dc_prev = &dc * &st.f;

            let mut dz = Array2::zeros((dh.nrows(), 4 * n));
            dz.slice_mut(s![.., 0..n]).assign(&(&d_i * &st.i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., n..2 * n]).assign(&(&d_f * &st.f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * n..3 * n]).assign(&(&d_g * &st.g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * n..4 * n]).assign(&(&d_o * &st.o.mapv(|v| v * (1.0 - v))));

            self.w_input.grad += &st.x.t().dot(&dz);
            self.w_hidden.grad += &st.h_prev.t().dot(&dz);
            self.bias.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            dxs[t] = dz.dot(&self.w_input.value.t());
            dh = dz.dot(&self.w_hidden.value.t());
            dc = dc_prev;
        }
        dxs
    }
}

impl Module for LstmCell {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w_input"), &mut self.w_input);
        f(&join(prefix, "w_hidden"), &mut self.w_hidden);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, batch: usize, width: usize) -> Vec<Tensor2> {
        (0..len).map(|_| Array2::from_shape_fn((batch, width), |_| rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(3, 4, &mut rng);
        assert!(matches!(cell.encode(&[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn single_step_equals_one_cell_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(3, 5, &mut rng);
        let seq = random_seq(&mut rng, 1, 2, 3);
        let zeros = Array2::zeros((2, 5));
        let (h, _) = cell.cell(&seq[0], &zeros, &zeros).unwrap();
        assert_eq!(cell.encode(&seq).unwrap(), h);
    }

    #[test]
    fn encoding_is_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::new(3, 6, &mut rng);
        let seq = random_seq(&mut rng, 4, 1, 3);
        let mut rev = seq.clone();
        rev.reverse();
        let a = cell.encode(&seq).unwrap();
        let b = cell.encode(&rev).unwrap();
        let diff: f64 = (&a - &b).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn gates_lie_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cell = LstmCell::new(2, 3, &mut rng);
        let seq: Vec<Tensor2> = (0..3).map(|_| Array2::from_elem((2, 2), 50.0)).collect();
        cell.forward(&seq).unwrap();
        for st in &cell.steps {
            for gate in [&st.i, &st.f, &st.o] {
                assert!(gate.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
