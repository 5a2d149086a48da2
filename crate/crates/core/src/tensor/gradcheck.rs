use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative error budget for analytic vs numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst per-input relative error `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, floor)`,
    /// where `floor` is the finite-difference roundoff level `1e-6 · max(1, |f|)`.
    pub max_rel_error: f64,
    /// Index of the input holding the worst error.
    pub worst_input: usize,
    /// Number of scalar coordinates perturbed.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOL
    }
}

/// Compare tape gradients of a scalar function against central finite
/// differences.
///
/// `build` receives a fresh tape and one leaf per entry of `inputs` and must
/// return a scalar. At most `max_coords` evenly spaced coordinates of each
/// input are perturbed (all of them when `None`).
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor],
    max_coords: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    tape.backward(out)?;
    // central differences carry roundoff of about machine epsilon · |f| / step,
    // so gradients below this floor are compared in absolute terms
    let floor = 1e-6 * f0.abs().max(1.0);

    let mut worst: f64 = 0.0;
    let mut worst_input = 0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = tape
            .grad(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            diff2 += (analytic[j] - numeric).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        checked += coords.len();
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor);
        if rel > worst {
            worst = rel;
            worst_input = i;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        worst_input,
        checked,
    })
}
