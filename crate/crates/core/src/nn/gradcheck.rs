//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::layer::Sequential;
use super::params::{Grads, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_EPS: f64 = 1e-5;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.values().cloned().fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn worst(&self) -> Option<(&String, &f64)> {
        self.entries.iter().max_by(|a, b| a.1.total_cmp(b.1))
    }
}

fn param_mut<'a, N: Network>(net: &'a mut N, name: &str) -> Option<&'a mut Tensor> {
    for m in net.modules_mut() {
        for l in &mut m.layers {
            for (n, t) in l.param_names().into_iter().zip(l.params.iter_mut()) {
                if n == name {
                    return Some(t);
                }
            }
        }
    }
    None
}

/// Compare `analytic` against central differences of `loss` over every
/// parameter of `net` whose name is present in `analytic`.
pub fn check_network<N, F>(net: &N, analytic: &Grads, mut loss: F) -> Result<GradCheckReport>
where
    N: Network + Clone,
    F: FnMut(&N) -> Result<f64>,
{
    let mut work = net.clone();
    let mut report = GradCheckReport::default();
    for (name, g) in analytic {
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let orig = param_mut(&mut work, name).ok_or_else(|| Error::UnknownParam(name.clone()))?.data()[i];
            param_mut(&mut work, name).unwrap().data_mut()[i] = orig + FD_EPS;
            let up = loss(&work)?;
            param_mut(&mut work, name).unwrap().data_mut()[i] = orig - FD_EPS;
            let down = loss(&work)?;
            param_mut(&mut work, name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(relative_error(g.data()[i], numeric));
        }
        report.entries.insert(name.clone(), worst);
    }
    Ok(report)
}

/// Finite-difference check of the input gradient of a scalar function.
pub fn check_input<F>(x: &Tensor, analytic: &Tensor, mut loss: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut work = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + FD_EPS;
        let up = loss(&work)?;
        work.data_mut()[i] = orig - FD_EPS;
        let down = loss(&work)?;
        work.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * FD_EPS)));
    }
    Ok(worst)
}

impl Network for Sequential {
    fn modules(&self) -> Vec<&Sequential> {
        vec![self]
    }

    fn modules_mut(&mut self) -> Vec<&mut Sequential> {
        vec![self]
    }
}

/// Check one layer chain under a scalar loss of its output. `loss_fn` returns
/// the loss and its gradient with respect to the output. The input gradient is
/// reported under the key `"input"`.
pub fn grad_check<F>(stack: &Sequential, input: &Tensor, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    let mut net = stack.clone();
    net.zero_grads();
    let (out, mut tape) = net.forward(input)?;
    let (_, g) = loss_fn(&out);
    let dx = net.backward(&mut tape, &g)?;
    let analytic = net.grads();
    let mut report = check_network(&net, &analytic, |n| Ok(loss_fn(&n.infer(input)?).0))?;
    let input_err = check_input(input, &dx, |x| Ok(loss_fn(&net.infer(x)?).0))?;
    report.entries.insert("input".into(), input_err);
    Ok(report)
}
