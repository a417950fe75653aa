//! Linear probes: multinomial logistic regression fit by full-batch Adam.

use ndarray::{Array1, Array2, Axis};

use crate::error::{shape_err, Error, Result};
use crate::params::{Adam, ParamId, ParamStore};
use crate::tape::Tape;

#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// Per-feature standardization fitted on the training set.
    mean: Array1<f64>,
    scale: Array1<f64>,
    params: ParamStore<f64>,
    w: ParamId,
    b: ParamId,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub iters: usize,
    pub learning_rate: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            iters: 300,
            learning_rate: 0.05,
        }
    }
}

impl LinearProbe {
    pub fn fit(x: &Array2<f64>, labels: &[usize], num_classes: usize, opts: ProbeOptions) -> Result<Self> {
        if x.nrows() != labels.len() {
            return shape_err(format!("{} rows, {} labels", x.nrows(), labels.len()));
        }
        if x.nrows() == 0 {
            return Err(Error::InsufficientData("empty probe training set".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        let xs = (x - &mean) * &scale;
        let mut params = ParamStore::new();
        let w = params.add_zeros("w", (x.ncols(), num_classes));
        let b = params.add_zeros("b", (1, num_classes));
        let mut adam = Adam::new(&params, opts.learning_rate);
        for _ in 0..opts.iters {
            let grads = {
                let mut tape = Tape::new(&params);
                let xv = tape.constant(xs.clone());
                let wv = tape.param(w);
                let bv = tape.param(b);
                let logits = tape.matmul(xv, wv);
                let logits = tape.add_row(logits, bv);
                let loss = tape.softmax_cross_entropy(logits, labels);
                tape.backward(loss).into_param_grads()
            };
            adam.step(&mut params, &grads);
        }
        Ok(LinearProbe {
            mean,
            scale,
            params,
            w,
            b,
            num_classes,
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        if x.ncols() != self.mean.len() {
            return shape_err("probe input width differs from training");
        }
        let xs = (x - &self.mean) * &self.scale;
        let logits = xs.dot(self.params.value(self.w)) + self.params.value(self.b);
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() || pred.is_empty() {
            return shape_err("labels do not match probe inputs");
        }
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}
