//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-8;

/// Compare reverse-mode gradients of a scalar loss against central finite
/// differences, perturbing every entry of every input.
///
/// `build` must construct the same loss from the given leaf ids each time it
/// is called on a fresh tape. Gradient checks run in 64-bit only. Returns
/// the maximum of |g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-8).
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_entries(build, inputs, &entries)
}

/// [`grad_check`] restricted to chosen `(input index, element index)` pairs.
/// Keeps large-model checks affordable: autodiff still covers everything,
/// only the finite-difference probes are sampled.
pub fn grad_check_entries<F>(
    build: F,
    inputs: &[Tensor<f64>],
    entries: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    for &(i, j) in entries {
        if i >= inputs.len() || j >= inputs[i].numel() {
            return Err(Error::invalid(format!(
                "grad_check: entry ({i},{j}) out of range for {} inputs",
                inputs.len()
            )));
        }
    }

    // Reverse-mode gradients, one tape.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::invalid(format!(
            "grad_check: builder produced shape {:?}, expected a scalar",
            tape.shape(loss)
        )));
    }
    // A builder that never touches the inputs records nothing; both gradient
    // estimates are zero then, so skip the reverse sweep.
    let grads =
        if tape.n_records() == 0 { super::Gradients::default() } else { tape.backward(loss)? };

    // Central differences on a working copy; constants keep replays cheap.
    let eval = |work: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = work.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for &(i, j) in entries {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = orig - FD_STEP;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let g_fd = (fp - fm) / (2.0 * FD_STEP);
        let g_ad = grads.get(ids[i]).map(|g| g[j]).unwrap_or(0.0);
        let rel = (g_ad - g_fd).abs() / g_ad.abs().max(g_fd.abs()).max(FD_FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
