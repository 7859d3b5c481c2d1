//! Central-difference verification of tape gradients.

use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::tape::{NodeId, Tape};

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("objective returned non-finite value {value} while probing {name:?}[{index}]")]
    NonFinite {
        name: String,
        index: usize,
        value: f64,
    },
    #[error("objective returned non-finite value {0} at the unperturbed point")]
    NonFiniteBase(f64),
}

/// How many coordinates of each tensor to probe. Probing everything costs a
/// full forward pass per coordinate; sampling keeps large checks affordable.
#[derive(Debug, Clone, Copy)]
pub enum Probes {
    All,
    PerTensor(usize),
}

/// Max relative error between tape gradients and central differences of `f`.
///
/// `f` receives a fresh tape plus one leaf per parameter (in set order) and
/// returns the scalar objective node. The relative error at a coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(
    f: F,
    params: &ParamSet,
    eps: f64,
    probes: Probes,
    rng: &mut SeededRng,
) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    assert!(eps > 0.0, "eps must be positive");

    let eval_value = |p: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = p.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &leaves);
        tape.value(root).item()
    };

    let (base, analytic) = {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &leaves);
        let value = tape.value(root).item();
        let grads = tape.backward(root);
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .zip(params.iter())
            .map(|(&id, (_, t))| grads.wrt_or_zeros(id, t.shape()).values().to_vec())
            .collect();
        (value, analytic)
    };
    if !base.is_finite() {
        return Err(GradCheckError::NonFiniteBase(base));
    }

    let mut max_err = 0.0f64;
    let mut work = params.clone();
    for ti in 0..params.len() {
        let (name, tensor) = params.at(ti);
        let n = tensor.numel();
        let coords: Vec<usize> = match probes {
            Probes::All => (0..n).collect(),
            Probes::PerTensor(k) if k >= n => (0..n).collect(),
            Probes::PerTensor(k) => rng.sample_indices(n, k),
        };
        for ci in coords {
            let orig = tensor.values()[ci];
            work.at_mut(ti).1.values_mut()[ci] = orig + eps;
            let plus = eval_value(&work);
            work.at_mut(ti).1.values_mut()[ci] = orig - eps;
            let minus = eval_value(&work);
            work.at_mut(ti).1.values_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckError::NonFinite {
                    name: name.to_string(),
                    index: ci,
                    value: if plus.is_finite() { minus } else { plus },
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
