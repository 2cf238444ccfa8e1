use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    /// True for strictly increasing maps, the only ones allowed on a
    /// monotone noise path.
    pub fn is_strictly_increasing(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    pub fn forward(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => x.clone(),
            _ => x.mapv(|v| self.apply(v)),
        }
    }

    /// Backward pass given the pre-activation input and the activation
    /// output of the forward pass.
    pub fn backward(self, input: &Array2<f64>, output: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        let mut out = grad.clone();
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                ndarray::Zip::from(&mut out).and(input).for_each(|g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            Activation::Tanh => {
                ndarray::Zip::from(&mut out).and(output).for_each(|g, &y| *g *= 1.0 - y * y);
            }
            Activation::Sigmoid => {
                ndarray::Zip::from(&mut out).and(output).for_each(|g, &y| *g *= y * (1.0 - y));
            }
            Activation::Softplus => {
                ndarray::Zip::from(&mut out).and(input).for_each(|g, &x| *g *= sigmoid(x));
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softplus_matches_definition() {
        for &x in &[-5.0, -0.3, 0.0, 2.0, 10.0] {
            assert!((softplus(x) - (1.0 + f64::exp(x)).ln()).abs() < 1e-12);
        }
        assert_eq!(softplus(100.0), 100.0);
    }

    #[test]
    fn relu_is_not_admissible_on_noise_path() {
        assert!(!Activation::Relu.is_strictly_increasing());
        assert!(Activation::Tanh.is_strictly_increasing());
    }
}
