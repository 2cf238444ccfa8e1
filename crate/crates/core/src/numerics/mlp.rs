use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::batchnorm::BatchNorm;
use super::dense::Linear;
use super::param::{join, Module, Param};
use super::{Layer, Tensor2};
use crate::error::{Error, Result};

/// Architecture of a feed-forward network: every hidden layer is
/// linear → (batch norm) → activation; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self { input, hidden: hidden.to_vec(), output, batch_norm: true, activation: Activation::Relu }
    }

    pub fn without_batch_norm(mut self) -> Self {
        self.batch_norm = false;
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Hidden {
    linear: Linear,
    norm: Option<BatchNorm>,
    #[serde(skip)]
    act_io: Option<(Tensor2, Tensor2)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    hidden: Vec<Hidden>,
    out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        if spec.input == 0 || spec.output == 0 || spec.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig(format!("zero-width layer in {spec:?}")));
        }
        let mut prev = spec.input;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        for &w in &spec.hidden {
            hidden.push(Hidden {
                linear: Linear::new(prev, w, rng),
                norm: spec.batch_norm.then(|| BatchNorm::new(w)),
                act_io: None,
            });
            prev = w;
        }
        let out = Linear::new(prev, spec.output, rng);
        Ok(Self { spec, hidden, out })
    }

    pub fn input_size(&self) -> usize {
        self.spec.input
    }

    pub fn output_size(&self) -> usize {
        self.spec.output
    }

    /// Inference-mode forward pass (running batch-norm statistics); takes
    /// `&self` so trained networks can be shared read-only.
    pub fn infer(&self, x: &Tensor2) -> Tensor2 {
        let mut h = x.clone();
        for layer in &self.hidden {
            h = layer.linear.infer(&h);
            if let Some(bn) = &layer.norm {
                h = bn.infer(&h);
            }
            h = self.spec.activation.forward(&h);
        }
        self.out.infer(&h)
    }

    /// Last layer access for heads that need to be re-initialized.
    pub fn output_layer_mut(&mut self) -> &mut Linear {
        &mut self.out
    }
}

impl Module for Mlp {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            let p = join(prefix, &format!("hidden{i}"));
            layer.linear.visit_params(&join(&p, "linear"), f);
            if let Some(bn) = &mut layer.norm {
                bn.visit_params(&join(&p, "bn"), f);
            }
        }
        self.out.visit_params(&join(prefix, "out"), f);
    }
}

impl Layer for Mlp {
    fn forward(&mut self, x: &Tensor2, train: bool) -> Result<Tensor2> {
        let act = self.spec.activation;
        let mut h = x.clone();
        for layer in &mut self.hidden {
            h = layer.linear.forward(&h, train)?;
            if let Some(bn) = &mut layer.norm {
                h = bn.forward(&h, train)?;
            }
            let a = act.forward(&h);
            layer.act_io = Some((h, a.clone()));
            h = a;
        }
        self.out.forward(&h, train)
    }

    fn backward(&mut self, grad: &Tensor2) -> Tensor2 {
        let act = self.spec.activation;
        let mut g = self.out.backward(grad);
        for layer in self.hidden.iter_mut().rev() {
            let (pre, post) = layer.act_io.as_ref().expect("mlp backward before forward");
            g = act.backward(pre, post, &g);
            if let Some(bn) = &mut layer.norm {
                g = bn.backward(&g);
            }
            g = layer.linear.backward(&g);
        }
        g
    }
}
