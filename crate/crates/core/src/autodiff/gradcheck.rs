//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::ParameterSet;
use crate::error::{Error, Result};

/// Worst disagreement found for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Stencils shrunk because they straddled a kink.
    pub refinements: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Halvings-by-ten allowed when a stencil straddles a kink.
const MAX_REFINEMENTS: u32 = 4;

/// Checks the graph gradient of the scalar built by `f` against central
/// differences with step `step` over every value of every parameter.
///
/// The five-point stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
/// is used. When any stencil point takes a different branch (relu sign,
/// argmax) than the unperturbed point, the function is not smooth on the
/// stencil and `h` is divided by ten and the point retried.
pub fn gradient_check<Fun>(
    params: &ParameterSet<f64>,
    f: Fun,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &ParameterSet<f64>) -> Result<Var>,
{
    let value = |p: &ParameterSet<f64>| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        Ok((g.value(loss).data()[0], Some(g.branch_signature())))
    };
    let analytic = |p: &ParameterSet<f64>| -> Result<ParameterSet<f64>> {
        let mut with_grads = p.clone();
        with_grads.zero_grads();
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        g.backward(loss, &mut with_grads)?;
        Ok(with_grads)
    };
    check(params, value, analytic, step, tolerance)
}

/// Compares gradients produced by `analytic` with central differences of
/// `value`. Parameters whose gradient `analytic` leaves unset count as zero.
pub fn compare_gradients<V, A>(
    params: &ParameterSet<f64>,
    value: V,
    analytic: A,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    V: Fn(&ParameterSet<f64>) -> Result<f64>,
    A: Fn(&ParameterSet<f64>) -> Result<ParameterSet<f64>>,
{
    check(params, |p| Ok((value(p)?, None)), analytic, step, tolerance)
}

fn check<V, A>(
    params: &ParameterSet<f64>,
    value: V,
    analytic: A,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    V: Fn(&ParameterSet<f64>) -> Result<(f64, Option<u64>)>,
    A: Fn(&ParameterSet<f64>) -> Result<ParameterSet<f64>>,
{
    let with_grads = analytic(params)?;
    let (_, base_signature) = value(params)?;
    let mut report = GradCheckReport {
        params: Vec::new(),
        tolerance,
        refinements: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let grads = with_grads.get(name)?.grad().map(<[f64]>::to_vec);
        let mut check = ParamCheck {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..tensor.len() {
            let original = tensor.data()[i];
            let mut h = step;
            let mut numeric = 0.0;
            for attempt in 0..=MAX_REFINEMENTS {
                let mut f = [0.0; 4];
                let mut smooth = true;
                for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                    probe.get_mut(name)?.data_mut()[i] = original + offset * h;
                    let (v, sig) = value(&probe)?;
                    if !v.is_finite() {
                        probe.get_mut(name)?.data_mut()[i] = original;
                        return Err(Error::NonFinite(format!("function value at {name}[{i}] + {offset}*{h}")));
                    }
                    f[slot] = v;
                    smooth &= sig == base_signature;
                }
                probe.get_mut(name)?.data_mut()[i] = original;
                numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
                if smooth || attempt == MAX_REFINEMENTS {
                    break;
                }
                report.refinements += 1;
                h /= 10.0;
            }
            let a = grads.as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
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
