//! Central finite-difference gradient checking, used by test suites across
//! the workspace.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing the tape gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    /// ‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-8), pooled over
    /// every input.
    pub fn relative_error(&self) -> f64 {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            for (x, y) in a.iter().zip(n) {
                diff += (x - y) * (x - y);
                na += x * x;
                nn += y * y;
            }
        }
        diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-8)
    }
}

/// Builds `f` on fresh tapes: once to take the analytic gradient with respect
/// to every entry of `inputs`, then twice per scalar entry at `x ± h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; x.len()])
        })
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for which in 0..inputs.len() {
        let mut g = vec![0.0; inputs[which].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[which].data()[j];
            work[which].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[which].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[which].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(GradCheck { analytic, numeric })
}
