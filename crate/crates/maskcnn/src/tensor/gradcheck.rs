//! Central-difference gradient verification.
//!
//! [`check_gradients`] rebuilds the given forward computation with each
//! parameter (and, optionally, input) coordinate perturbed by ±`step` and
//! compares `(f(x+h) − f(x−h)) / 2h` against the analytic gradient from one
//! backward pass. All checking runs in `f64`.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Worst relative error seen across every checked coordinate, plus where.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

const STEP: f64 = 1e-5;

/// Compare analytic gradients against central differences.
///
/// `build` reconstructs the forward pass from scratch: it receives leaf
/// variables for every parameter in `store` (in id order) and every tensor
/// in `inputs`, and returns the scalar loss. Gradients are checked for the
/// parameters **and** the inputs, so activations-path ops (relu, pooling,
/// normalization) get exercised even when they have no parameters upstream.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var], &[Var]) -> Result<Var>,
{
    let run = |store: &ParamStore<f64>,
               inputs: &[Tensor<f64>],
               build: &mut F|
     -> Result<(f64, Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let param_vars: Vec<Var> = store
            .ids()
            .map(|id| g.leaf(store.get(id).value.clone()))
            .collect::<Result<_>>()?;
        let input_vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &param_vars, &input_vars)?;
        g.backward(loss)?;
        let pg = param_vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect();
        let ig = input_vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect();
        Ok((g.value(loss).data()[0], pg, ig))
    };

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let param_vars: Vec<Var> = store
            .ids()
            .map(|id| g.input(store.get(id).value.clone()))
            .collect::<Result<_>>()?;
        let input_vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &param_vars, &input_vars)?;
        Ok(g.value(loss).data()[0])
    };

    let (_, param_grads, input_grads) = run(store, inputs, &mut build)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };

    let check_coord = |analytic: f64,
                           plus: f64,
                           minus: f64,
                           name: &str,
                           coord: usize,
                           report: &mut GradCheckReport| {
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        report.coords_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name.to_string();
            report.worst_coord = coord;
        }
    };

    // Parameters.
    let ids: Vec<_> = store.ids().collect();
    for (pi, &id) in ids.iter().enumerate() {
        let count = store.get(id).value.shape().count();
        let name = store.get(id).name.clone();
        for coord in 0..count {
            let original = store.get(id).value.data()[coord];
            store.get_mut(id).value.data_mut()[coord] = original + STEP;
            let plus = eval(store, inputs, &mut build)?;
            store.get_mut(id).value.data_mut()[coord] = original - STEP;
            let minus = eval(store, inputs, &mut build)?;
            store.get_mut(id).value.data_mut()[coord] = original;
            check_coord(
                param_grads[pi].data()[coord],
                plus,
                minus,
                &name,
                coord,
                &mut report,
            );
        }
    }

    // Inputs.
    for ii in 0..inputs.len() {
        let count = inputs[ii].shape().count();
        let name = format!("input[{ii}]");
        for coord in 0..count {
            let original = inputs[ii].data()[coord];
            inputs[ii].data_mut()[coord] = original + STEP;
            let plus = eval(store, inputs, &mut build)?;
            inputs[ii].data_mut()[coord] = original - STEP;
            let minus = eval(store, inputs, &mut build)?;
            inputs[ii].data_mut()[coord] = original;
            check_coord(
                input_grads[ii].data()[coord],
                plus,
                minus,
                &name,
                coord,
                &mut report,
            );
        }
    }

    if report.coords_checked == 0 {
        return Err(Error::Config(
            "gradient check ran over zero coordinates".into(),
        ));
    }
    Ok(report)
}
