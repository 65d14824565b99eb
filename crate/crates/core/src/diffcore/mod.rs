//! Dense tensors with a define-by-run reverse-mode tape.

pub mod linalg;
mod tape;
mod tensor;

pub use tape::{BackwardCtx, BackwardFn, Tape, Var};
pub(crate) use tape::softplus;
pub use tensor::Tensor;

use crate::error::Result;

/// Central finite-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_grad(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    which: usize,
    eps: f64,
) -> Result<Tensor> {
    let mut work = inputs.to_vec();
    let mut g = Tensor::zeros(inputs[which].shape());
    for k in 0..inputs[which].numel() {
        let x0 = inputs[which].data()[k];
        work[which].data_mut()[k] = x0 + eps;
        let fp = f(&work)?;
        work[which].data_mut()[k] = x0 - eps;
        let fm = f(&work)?;
        work[which].data_mut()[k] = x0;
        g.data_mut()[k] = (fp - fm) / (2.0 * eps);
    }
    Ok(g)
}

/// Largest norm-relative error `max|a − n| / max(‖n‖∞, 1e-8)` between
/// reverse-mode and central-difference gradients over all inputs.
///
/// `build` records a scalar loss on a fresh tape from leaves holding `inputs`.
pub fn gradcheck(
    build: impl Fn(&Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &leaves)?;
    tape.backward(&loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        Ok(build(&t, &vs)?.item())
    };
    let mut worst = 0.0_f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = tape.grad(leaf).expect("leaf");
        let numeric = numeric_grad(&eval, inputs, i, eps)?;
        let diff = analytic.sub(&numeric)?.max_abs();
        worst = worst.max(diff / numeric.max_abs().max(1e-8));
    }
    Ok(worst)
}
