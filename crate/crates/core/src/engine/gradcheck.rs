use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

fn evaluate<F>(f: &mut F, params: &[Tensor], track: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| {
            let mut leaf = Tensor::from_parts(p.shape().to_vec(), p.data().to_vec());
            leaf.set_requires_grad(track);
            g.leaf(leaf)
        })
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    let loss = g.value(root)?.item()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    if !track {
        return Ok((loss, None));
    }
    g.backward(root)?;
    let grads = vars
        .iter()
        .map(|&v| Ok(g.grad(v)?.map(<[f64]>::to_vec).unwrap_or_default()))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, Some(grads)))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error
/// `|a - n| / max(1e-8, |a| + |n|)` over every parameter entry.
///
/// `f` receives a fresh graph and one leaf per parameter. It must be
/// deterministic; a function whose value changes between two evaluations
/// at the same point is rejected with [`Error::NonDeterministic`].
pub fn check_gradients<F>(mut f: F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let (loss, grads) = evaluate(&mut f, params, true)?;
    let grads = grads.expect("tracked evaluation returns gradients");
    let (again, _) = evaluate(&mut f, params, false)?;
    if again.to_bits() != loss.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, analytic) in grads.iter().enumerate() {
        for (ei, &a) in analytic.iter().enumerate() {
            let orig = probe[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + FD_STEP;
            let (plus, _) = evaluate(&mut f, &probe, false)?;
            probe[pi].data_mut()[ei] = orig - FD_STEP;
            let (minus, _) = evaluate(&mut f, &probe, false)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = Tensor::new(vec![4, 4], a).unwrap();
        let x = Tensor::new(vec![4, 1], x).unwrap();
        let err = check_gradients(
            |g, p| {
                let ax = g.matmul(p[0], p[1])?;
                let xt = g.reshape(p[1], &[1, 4])?;
                let q = g.matmul(xt, ax)?;
                g.sum(q)
            },
            &[a, x],
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic form error {err}");
    }

    #[test]
    fn nondeterminism_is_rejected() {
        let mut calls = 0u32;
        let x = Tensor::from_vec(vec![0.3, -0.2]);
        let err = check_gradients(
            |g, p| {
                calls += 1;
                let mask = g.constant(Tensor::from_vec(vec![calls as f64, 1.0]))?;
                let y = g.mul(p[0], mask)?;
                g.sum(y)
            },
            &[x],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic));
    }
}
