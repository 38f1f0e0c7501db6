//! Gradient extraction and central-difference verification.

use super::tape::{Tape, Var};
use super::{NumError, Tensor};

/// Evaluates `f` on a tape with `params` as leaves and returns the loss value
/// together with the gradient for each parameter.
pub fn grad<'a, F>(params: &[&'a Tensor], f: F) -> Result<(f64, Vec<Tensor>), NumError>
where
    F: FnOnce(&mut Tape<'a>, &[Var]) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let out = leaves
        .iter()
        .zip(params)
        .map(|(v, p)| grads.tensor(*v, p))
        .collect();
    Ok((tape.scalar(loss), out))
}

fn eval<F>(params: &[Tensor], f: &F) -> Result<f64, NumError>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &leaves)?;
    Ok(tape.scalar(loss))
}

/// Max over all coordinates of `|analytic - numeric| / max(1, |numeric|)`,
/// where `numeric` is the central difference with step `eps`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64, NumError>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, NumError>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(NumError::Usage(format!("finite-difference step {eps} must be > 0")));
    }
    let refs: Vec<&Tensor> = params.iter().collect();
    let (_, analytic) = grad(&refs, |t, v| f(t, v))?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = work[pi].as_slice()[k];
            work[pi].as_mut_slice()[k] = orig + eps;
            let up = eval(&work, &f)?;
            work[pi].as_mut_slice()[k] = orig - eps;
            let down = eval(&work, &f)?;
            work[pi].as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (g.as_slice()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
