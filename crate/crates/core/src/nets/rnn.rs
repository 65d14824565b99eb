use super::{uniform_fill, InitScheme, Mlp, Module};
use crate::diffcore::{Tensor, Var};
use crate::error::{shape_err, Result};

const CELL_PARAMS: usize = 5;

/// Gated recurrent predictor followed by an MLP head.
///
/// The prediction for step `t` is `head(h_t)`, where `h_0` is learned and
/// `h_{t+1} = cell(h_t, z_t)`, so it only sees `z_0 .. z_{t-1}`.
#[derive(Clone, Debug)]
pub struct Rnn {
    /// `[3H, d]`, gate blocks ordered reset, update, candidate.
    pub w_ih: Tensor,
    /// `[3H, H]`
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
    pub h_init: Tensor,
    pub head: Mlp,
}

impl Rnn {
    pub fn new(input_dim: usize, hidden_dim: usize, head: Mlp) -> Self {
        assert_eq!(head.dims()[0], hidden_dim, "head input must equal hidden dim");
        let g = 3 * hidden_dim;
        Rnn {
            w_ih: Tensor::zeros(&[g, input_dim]),
            w_hh: Tensor::zeros(&[g, hidden_dim]),
            b_ih: Tensor::zeros(&[g]),
            b_hh: Tensor::zeros(&[g]),
            h_init: Tensor::zeros(&[hidden_dim]),
            head,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.h_init.numel()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    fn cell(&self, p: &[Var], h: &Var, z: &Var) -> Result<Var> {
        let hd = self.hidden_dim();
        let gi = z.matmul_t(&p[0])?.add(&p[2])?;
        let gh = h.matmul_t(&p[1])?.add(&p[3])?;
        let r = gi.slice_cols(0, hd)?.add(&gh.slice_cols(0, hd)?)?.sigmoid();
        let u = gi
            .slice_cols(hd, 2 * hd)?
            .add(&gh.slice_cols(hd, 2 * hd)?)?
            .sigmoid();
        let n = gi
            .slice_cols(2 * hd, 3 * hd)?
            .add(&r.mul(&gh.slice_cols(2 * hd, 3 * hd)?)?)?
            .tanh();
        // h' = n + u (h - n)
        n.add(&u.mul(&h.sub(&n)?)?)
    }

    /// Initial hidden state repeated over a batch of `b`.
    pub fn initial_hidden(&self, p: &[Var], b: usize) -> Result<Var> {
        let tape = p[4].tape();
        tape.constant(Tensor::zeros(&[b, self.hidden_dim()])).add(&p[4])
    }

    /// One recurrence step.
    pub fn step(&self, p: &[Var], h: &Var, z: &Var) -> Result<Var> {
        self.cell(&p[..CELL_PARAMS], h, z)
    }

    pub fn predict(&self, p: &[Var], h: &Var) -> Result<Var> {
        self.head.forward(&p[CELL_PARAMS..], h)
    }

    /// Mean predictions for every step of `z_seq` (each `[batch, d]`), plus
    /// the hidden states they were read from.
    pub fn forward_recurrent(&self, p: &[Var], z_seq: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let t_len = z_seq.len();
        if t_len < 2 {
            return Err(shape_err("forward_recurrent", &[t_len], &[2]));
        }
        let s = z_seq[0].shape();
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(shape_err("forward_recurrent", &s, &[0, self.input_dim()]));
        }
        let mut h = self.initial_hidden(p, s[0])?;
        let mut preds = Vec::with_capacity(t_len);
        let mut hidden = Vec::with_capacity(t_len);
        for (t, z) in z_seq.iter().enumerate() {
            preds.push(self.predict(p, &h)?);
            hidden.push(h.clone());
            if t + 1 < t_len {
                h = self.step(p, &h, z)?;
            }
        }
        Ok((preds, hidden))
    }
}

impl Module for Rnn {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("cell.w_ih".to_string(), &self.w_ih),
            ("cell.w_hh".to_string(), &self.w_hh),
            ("cell.b_ih".to_string(), &self.b_ih),
            ("cell.b_hh".to_string(), &self.b_hh),
            ("cell.h_init".to_string(), &self.h_init),
        ];
        v.extend(
            self.head
                .named_params()
                .into_iter()
                .map(|(n, t)| (format!("head.{n}"), t)),
        );
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.b_ih,
            &mut self.b_hh,
            &mut self.h_init,
        ];
        v.extend(self.head.params_mut());
        v
    }

    fn init(&mut self, rng: &mut dyn rand::RngCore, scheme: InitScheme) {
        let bound = 1.0 / (self.hidden_dim() as f64).sqrt();
        for t in [&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh] {
            uniform_fill(t, bound, rng);
        }
        self.h_init = Tensor::zeros(&[self.hidden_dim()]);
        self.head.init(rng, scheme);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, Tape};
    use crate::nets::{init_params, Activation, OutputMap};

    fn small() -> Rnn {
        let head = Mlp::new(&[4, 6, 2], Activation::Tanh, OutputMap::Identity);
        let mut r = Rnn::new(2, 4, head);
        init_params(&mut r, 11, InitScheme::UniformFanIn);
        r
    }

    fn seq(t_len: usize, b: usize, shift: f64) -> Vec<Tensor> {
        (0..t_len)
            .map(|t| {
                Tensor::matrix(
                    b,
                    2,
                    (0..2 * b)
                        .map(|k| ((t * 7 + k) as f64 * 0.61 + shift).sin())
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn run(r: &Rnn, zs: &[Tensor]) -> Vec<Tensor> {
        let tape = Tape::new();
        let p = r.bind_frozen(&tape);
        let vars: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let (preds, _) = r.forward_recurrent(&p, &vars).unwrap();
        preds.iter().map(Var::value).collect()
    }

    #[test]
    fn predictions_are_causal() {
        let r = small();
        let base = seq(6, 3, 0.0);
        let before = run(&r, &base);
        for t in 0..6 {
            let mut pert = base.clone();
            pert[t].data_mut()[0] += 0.5;
            let after = run(&r, &pert);
            for s in 0..=t {
                assert_eq!(before[s], after[s], "perturbing z_{t} changed prediction {s}");
            }
            if t + 1 < 6 {
                assert_ne!(before[t + 1], after[t + 1]);
            }
        }
    }

    #[test]
    fn zero_weights_give_constant_predictions() {
        let head = Mlp::new(&[4, 6, 2], Activation::Tanh, OutputMap::Identity);
        let r = Rnn::new(2, 4, head);
        let preds = run(&r, &seq(5, 2, 0.3));
        for p in &preds[1..] {
            assert_eq!(p, &preds[0]);
        }
    }

    #[test]
    fn rejects_short_sequences() {
        let r = small();
        let tape = Tape::new();
        let p = r.bind_frozen(&tape);
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(r.forward_recurrent(&p, &[z]).is_err());
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        let r = small();
        let zs = seq(5, 2, 0.1);
        let inputs: Vec<Tensor> = r.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let err = gradcheck(
            |tape, ps| {
                let vars: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
                let (preds, _) = r.forward_recurrent(ps, &vars)?;
                let mut loss = tape.scalar(0.0);
                for (p, z) in preds.iter().zip(&vars) {
                    loss = loss.add(&p.sub(z)?.square().sum())?;
                }
                Ok(loss)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
