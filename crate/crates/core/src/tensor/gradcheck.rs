//! Central finite-difference gradient checks for tape computations.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement between tape and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares `Tape::backward` with central differences of step `h` for the
/// scalar `f(inputs)`. `coords` restricts the check to `(input, element)`
/// pairs; `None` checks every element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    coords: Option<&[(usize, usize)]>,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(tape);

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
            &all
        }
    };
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let x = inputs[i].data()[j];
        probe[i].data_mut()[j] = x + h;
        let up = eval(&f, &probe)?;
        probe[i].data_mut()[j] = x - h;
        let down = eval(&f, &probe)?;
        probe[i].data_mut()[j] = x;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i].data()[j], numeric, floor);
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratics() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(&[x], 1e-5, 1e-8, None, |t, v| {
            let s = t.square(v[0]);
            Ok(t.sum(s))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn detects_wrong_gradients() {
        // A step straddling the kink of abs sees a slope of 0.1, not 1.
        let x = Tensor::new([1], vec![1e-6]).unwrap();
        let r = check_gradients(&[x], 1e-5, 1e-8, None, |t, v| {
            let a = t.abs(v[0]);
            Ok(t.sum(a))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn rejects_non_scalar_outputs() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        assert!(check_gradients(&[x], 1e-5, 1e-8, None, |_, v| Ok(v[0])).is_err());
    }
}
