//! Central-difference verification of backward gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;

/// Worst entry of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Gradient magnitude, per unit of loss, below which entries are compared
/// absolutely. Rounding noise of the central difference sits near `eps·|f|/h`,
/// so the floor grows with `|f|`.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `∂loss/∂θ` from [`Graph::backward_into`] against
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every trainable parameter.
///
/// `loss_fn` must build a fresh graph from the given parameters and return the
/// scalar loss node.
pub fn grad_check<F>(loss_fn: F, params: &ParamSet, h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&ParamSet) -> Result<(Graph, Var)>,
{
    grad_check_scaled(loss_fn, params, h, tol, 1.0)
}

/// [`grad_check`] with the analytic gradient multiplied by `analytic_scale`
/// before comparison. Anything other than 1 simulates a broken backward pass.
pub fn grad_check_scaled<F>(loss_fn: F, params: &ParamSet, h: f64, tol: f64, analytic_scale: f64) -> Result<GradReport>
where
    F: Fn(&ParamSet) -> Result<(Graph, Var)>,
{
    let mut analytic = params.clone();
    analytic.clear_grads();
    let (graph, loss) = loss_fn(&analytic)?;
    graph.backward_into(loss, &mut analytic)?;

    let floor = REL_FLOOR * graph.scalar(loss).abs().max(1.0);

    let mut probe = params.clone();
    probe.clear_grads();
    let mut report = GradReport { tol, params: Vec::new() };
    let names: Vec<String> =
        params.iter().filter(|p| p.tensor.requires_grad()).map(|p| p.name.clone()).collect();
    for name in names {
        let grad = analytic.tensor(&name)?.grad().map(<[f64]>::to_vec).unwrap_or_default();
        let mut check = ParamCheck { name: name.clone(), max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for (i, &a) in grad.iter().enumerate() {
            let a = a * analytic_scale;
            let orig = probe.tensor(&name)?.data()[i];
            probe.tensor_mut(&name)?.data_mut()[i] = orig + h;
            let (g, l) = loss_fn(&probe)?;
            let plus = g.scalar(l);
            probe.tensor_mut(&name)?.data_mut()[i] = orig - h;
            let (g, l) = loss_fn(&probe)?;
            let minus = g.scalar(l);
            probe.tensor_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error_floored(a, numeric, floor);
            if i == 0 || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
