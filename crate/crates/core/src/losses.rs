//! Adversarial objectives built from graph primitives so they differentiate
//! through the networks that produced their inputs.

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Predictions are kept this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn targets_like(g: &mut Graph, p: Var, targets: &[f64]) -> Result<Var> {
    let shape = g.shape(p)?.to_vec();
    if shape.iter().product::<usize>() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "bce targets",
            left: shape,
            right: vec![targets.len()],
        });
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("target {t} outside [0, 1]")));
    }
    g.constant(Tensor::new(shape, targets.to_vec())?)
}

/// Mean binary cross-entropy `-[t log p + (1 - t) log(1 - p)]`.
pub fn bce_loss(g: &mut Graph, p: Var, targets: &[f64]) -> Result<Var> {
    let t = targets_like(g, p, targets)?;
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = g.ln(pc)?;
    let neg = g.scale(pc, -1.0)?;
    let q = g.add_scalar(neg, 1.0)?;
    let log_q = g.ln(q)?;
    let neg_t = g.scale(t, -1.0)?;
    let u = g.add_scalar(neg_t, 1.0)?;
    let a = g.mul(t, log_p)?;
    let b = g.mul(u, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -1.0)
}

/// Cross-entropy on the real batch against its soft labels plus
/// cross-entropy on the synthetic batch against zeros.
pub fn gan_discriminator_loss(
    g: &mut Graph,
    d_real: Var,
    real_targets: &[f64],
    d_fake: Var,
) -> Result<Var> {
    let real = bce_loss(g, d_real, real_targets)?;
    let n = g.value(d_fake)?.numel();
    let fake = bce_loss(g, d_fake, &vec![0.0; n])?;
    g.add(real, fake)
}

/// Non-saturating generator loss `-log D(fake)`, or cross-entropy against
/// `targets` when given.
pub fn gan_generator_loss(g: &mut Graph, d_fake: Var, targets: Option<&[f64]>) -> Result<Var> {
    match targets {
        Some(t) => bce_loss(g, d_fake, t),
        None => {
            let n = g.value(d_fake)?.numel();
            bce_loss(g, d_fake, &vec![1.0; n])
        }
    }
}

/// `(mean(fake) - mean(real), -mean(fake))` for critic and generator.
pub fn wasserstein_losses(g: &mut Graph, critic_real: Var, critic_fake: Var) -> Result<(Var, Var)> {
    let mr = g.mean(critic_real)?;
    let mf = g.mean(critic_fake)?;
    let critic = g.sub(mf, mr)?;
    let generator = g.scale(mf, -1.0)?;
    Ok((critic, generator))
}
