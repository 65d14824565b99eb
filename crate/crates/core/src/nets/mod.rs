//! Encoders and predictors built on the tape.

mod checkpoint;
mod init;
mod layers;
mod optim;
mod rnn;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use init::{orthogonal, InitScheme};
pub use layers::{Activation, LinearEncoder, Mlp, OutputMap};
pub use optim::Adam;
pub use rnn::Rnn;

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;

/// A parametric network whose parameters are bound to a tape per forward pass.
///
/// `forward` receives the parameter vars in the order of `named_params`.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn init(&mut self, rng: &mut dyn rand::RngCore, scheme: InitScheme);

    fn num_params(&self) -> usize {
        self.named_params().len()
    }

    /// Records the parameters as gradient-requiring leaves.
    fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    /// Records the parameters as constants.
    fn bind_frozen(&self, tape: &Tape) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Seeds `net` deterministically.
pub fn init_params(net: &mut dyn Module, seed: u64, scheme: InitScheme) {
    let mut rng = crate::rng(seed);
    net.init(&mut rng, scheme);
}

/// Gradients of bound parameters, zeros where a parameter was not reached.
pub fn collect_grads(vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect()
}

/// Concatenates gradients into one flat vector.
pub fn flatten(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}

/// The encoder `f` mapping observations to latents.
#[derive(Clone, Debug)]
pub enum Encoder {
    Linear(LinearEncoder),
    Mlp(Mlp),
}

impl Encoder {
    pub fn forward(&self, p: &[Var], x: &Var) -> Result<Var> {
        match self {
            Encoder::Linear(e) => e.forward(p, x),
            Encoder::Mlp(e) => e.forward(p, x),
        }
    }

    /// Forward pass without gradient bookkeeping.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind_frozen(&tape);
        Ok(self.forward(&p, &tape.constant(x.clone()))?.value())
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Encoder::Linear(e) => e.w.shape()[1],
            Encoder::Mlp(e) => e.dims()[0],
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Encoder::Linear(e) => e.w.shape()[0],
            Encoder::Mlp(e) => *e.dims().last().expect("nonempty"),
        }
    }
}

impl Module for Encoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Encoder::Linear(e) => e.named_params(),
            Encoder::Mlp(e) => e.named_params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Encoder::Linear(e) => e.params_mut(),
            Encoder::Mlp(e) => e.params_mut(),
        }
    }

    fn init(&mut self, rng: &mut dyn rand::RngCore, scheme: InitScheme) {
        match self {
            Encoder::Linear(e) => e.init(rng, scheme),
            Encoder::Mlp(e) => e.init(rng, scheme),
        }
    }
}

pub(crate) fn uniform_fill(t: &mut Tensor, bound: f64, rng: &mut dyn rand::RngCore) {
    for x in t.data_mut() {
        *x = rng.random_range(-bound..=bound);
    }
}
