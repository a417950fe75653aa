//! Central finite-difference verification of tape gradients.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Location of the worst coordinate, e.g. `param mha1.key.weight[3,1]`.
    pub worst: String,
    pub checked: usize,
}

/// Options for [`grad_check_with`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many evenly strided coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Relative errors use `max(|analytic|, |numeric|, abs_floor)` as denominator.
    pub abs_floor: f64,
    /// Also check gradients with respect to the inputs.
    pub check_inputs: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            max_coords_per_tensor: None,
            abs_floor: 1e-6,
            check_inputs: true,
        }
    }
}

/// Compares analytic gradients of the scalar `block(tape, inputs)` with
/// respect to every parameter in `store` and every input against central
/// differences. Returns the maximum relative error.
pub fn grad_check<B>(
    store: &ParamStore<f64>,
    inputs: &[Array2<f64>],
    epsilon: f64,
    block: B,
) -> Result<f64>
where
    B: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let opts = GradCheckOptions {
        epsilon,
        ..Default::default()
    };
    Ok(grad_check_with(store, inputs, &opts, block)?.max_relative_error)
}

pub fn grad_check_with<B>(
    store: &ParamStore<f64>,
    inputs: &[Array2<f64>],
    opts: &GradCheckOptions,
    block: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }
    let eval = |s: &ParamStore<f64>, xs: &[Array2<f64>]| -> f64 {
        let mut tape = Tape::new(s);
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = block(&mut tape, &vars);
        tape.value(out)[[0, 0]]
    };

    let (param_grads, input_grads) = {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = block(&mut tape, &vars);
        let grads = tape.backward(out);
        let ig: Vec<Array2<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, x)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(x.dim()))
            })
            .collect();
        let pg: Vec<Array2<f64>> = store
            .iter()
            .map(|(id, _, v)| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(v.dim()))
            })
            .collect();
        (pg, ig)
    };

    let eps = opts.epsilon;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |analytic: f64, numeric: f64, loc: String| {
        let denom = analytic.abs().max(numeric.abs()).max(opts.abs_floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_relative_error || !rel.is_finite() {
            report.max_relative_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst = loc;
        }
    };

    let mut work = store.clone();
    for (pi, (id, name, value)) in store.iter().enumerate() {
        for idx in coords(value.dim(), opts.max_coords_per_tensor) {
            let orig = value[idx];
            work.value_mut(id)[idx] = orig + eps;
            let up = eval(&work, inputs);
            work.value_mut(id)[idx] = orig - eps;
            let down = eval(&work, inputs);
            work.value_mut(id)[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            record(
                param_grads[pi][idx],
                numeric,
                format!("param {name}[{},{}]", idx.0, idx.1),
            );
        }
    }

    if opts.check_inputs {
        let mut xs = inputs.to_vec();
        for (ii, x) in inputs.iter().enumerate() {
            for idx in coords(x.dim(), opts.max_coords_per_tensor) {
                let orig = x[idx];
                xs[ii][idx] = orig + eps;
                let up = eval(store, &xs);
                xs[ii][idx] = orig - eps;
                let down = eval(store, &xs);
                xs[ii][idx] = orig;
                let numeric = (up - down) / (2.0 * eps);
                record(
                    input_grads[ii][idx],
                    numeric,
                    format!("input {ii}[{},{}]", idx.0, idx.1),
                );
            }
        }
    }
    Ok(report)
}

fn coords(dim: (usize, usize), cap: Option<usize>) -> Vec<(usize, usize)> {
    let n = dim.0 * dim.1;
    let take = cap.map_or(n, |c| c.min(n));
    if take == 0 {
        return Vec::new();
    }
    // Evenly strided flat indices, always including the first element.
    (0..take)
        .map(|i| i * n / take)
        .map(|f| (f / dim.1, f % dim.1))
        .collect()
}
