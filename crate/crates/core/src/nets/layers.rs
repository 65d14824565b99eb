use serde::{Deserialize, Serialize};

use super::{init::orthogonal, uniform_fill, InitScheme, Module};
use crate::diffcore::{linalg, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: &Var) -> Var {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMap {
    #[default]
    Identity,
    L2Normalize,
    Softmax,
}

impl OutputMap {
    pub fn apply(self, x: &Var) -> Result<Var> {
        match self {
            OutputMap::Identity => Ok(x.clone()),
            OutputMap::L2Normalize => x.l2_normalize_rows(),
            OutputMap::Softmax => x.softmax_rows(),
        }
    }
}

fn check_input(op: &'static str, x: &Var, d_in: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != d_in {
        return Err(shape_err(op, &s, &[0, d_in]));
    }
    Ok(())
}

/// `z = x Wᵀ + b` with `W` of shape `[d_out, d_in]`.
#[derive(Clone, Debug)]
pub struct LinearEncoder {
    pub w: Tensor,
    pub b: Option<Tensor>,
    /// Keep `|det W| = 1` after every update.
    pub volume_preserving: bool,
}

impl LinearEncoder {
    pub fn new(d_in: usize, d_out: usize, bias: bool) -> Self {
        LinearEncoder {
            w: Tensor::zeros(&[d_out, d_in]),
            b: bias.then(|| Tensor::zeros(&[d_out])),
            volume_preserving: false,
        }
    }

    pub fn identity(d: usize) -> Self {
        LinearEncoder {
            w: Tensor::eye(d),
            b: None,
            volume_preserving: false,
        }
    }

    pub fn forward(&self, p: &[Var], x: &Var) -> Result<Var> {
        check_input("linear_encoder", x, self.w.shape()[1])?;
        let z = x.matmul_t(&p[0])?;
        match p.get(1) {
            Some(b) => z.add(b),
            None => Ok(z),
        }
    }

    /// Rescales `W ← W / |det W|^{1/d}`.
    pub fn renormalize(&mut self) -> Result<()> {
        let d = self.w.require_square("renormalize")?;
        let (_, logabs) = linalg::slogdet(&self.w)?;
        self.w = self.w.scale((-logabs / d as f64).exp());
        Ok(())
    }
}

impl Module for LinearEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("w".to_string(), &self.w)];
        if let Some(b) = &self.b {
            v.push(("b".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w];
        if let Some(b) = &mut self.b {
            v.push(b);
        }
        v
    }

    fn init(&mut self, rng: &mut dyn rand::RngCore, scheme: InitScheme) {
        let (o, i) = (self.w.shape()[0], self.w.shape()[1]);
        let bound = 1.0 / (i as f64).sqrt();
        match scheme {
            InitScheme::UniformFanIn => {
                uniform_fill(&mut self.w, bound, rng);
                if let Some(b) = &mut self.b {
                    uniform_fill(b, bound, rng);
                }
            }
            InitScheme::OrthogonalLinear => {
                self.w = orthogonal(o, i, rng);
                if let Some(b) = &mut self.b {
                    *b = Tensor::zeros(&[o]);
                }
            }
        }
    }
}

/// Fully connected network; hidden layers use `activation`, the last layer
/// is affine followed by `output_map`.
#[derive(Clone, Debug)]
pub struct Mlp {
    /// `(weight [out, in], bias [out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
    pub activation: Activation,
    pub output_map: OutputMap,
}

impl Mlp {
    /// Zero-initialized network with layer widths `dims`.
    pub fn new(dims: &[usize], activation: Activation, output_map: OutputMap) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| (Tensor::zeros(&[w[1], w[0]]), Tensor::zeros(&[w[1]])))
            .collect();
        Mlp {
            layers,
            activation,
            output_map,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].0.shape()[1]];
        d.extend(self.layers.iter().map(|(w, _)| w.shape()[0]));
        d
    }

    pub fn forward(&self, p: &[Var], x: &Var) -> Result<Var> {
        check_input("mlp", x, self.layers[0].0.shape()[1])?;
        let n = self.layers.len();
        let mut h = x.clone();
        for l in 0..n {
            h = h.matmul_t(&p[2 * l])?.add(&p[2 * l + 1])?;
            if l + 1 < n {
                h = self.activation.apply(&h);
            }
        }
        self.output_map.apply(&h)
    }
}

impl Module for Mlp {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("layer{i}.w"), w), (format!("layer{i}.b"), b)])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn init(&mut self, rng: &mut dyn rand::RngCore, scheme: InitScheme) {
        for (w, b) in &mut self.layers {
            let (o, i) = (w.shape()[0], w.shape()[1]);
            let bound = 1.0 / (i as f64).sqrt();
            match scheme {
                InitScheme::UniformFanIn => {
                    uniform_fill(w, bound, rng);
                    uniform_fill(b, bound, rng);
                }
                InitScheme::OrthogonalLinear => {
                    *w = orthogonal(o, i, rng);
                    *b = Tensor::zeros(&[o]);
                }
            }
        }
    }
}
