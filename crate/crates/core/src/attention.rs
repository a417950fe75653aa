//! Scaled dot-product multi-head attention.
//!
//! The layer has no positional encoding of its own: permuting key and value
//! rows together leaves the output unchanged. The output projection may map
//! to a width different from the model width, which is how the stylebook
//! layer reduces its 256-wide heads to 64-wide style vectors.

use ndarray::Array2;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tape::{softmax_rows_unchecked, Tape, Var};
use crate::tensor::{all_finite, Scalar};

/// Parameter handles of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub model_dim: usize,
    pub out_dim: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

/// Result of a forward pass: the projected output and each head's
/// row-stochastic attention matrix (`queries × keys`).
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    /// `in_dims` are the query, key and value input widths.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dims: [usize; 3],
        model_dim: usize,
        num_heads: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            num_heads > 0 && model_dim % num_heads == 0,
            "model_dim {model_dim} not divisible by {num_heads} heads"
        );
        MultiHeadAttention {
            num_heads,
            model_dim,
            out_dim,
            query: Linear::new(store, &format!("{name}.query"), in_dims[0], model_dim, rng),
            key: Linear::new(store, &format!("{name}.key"), in_dims[1], model_dim, rng),
            value: Linear::new(store, &format!("{name}.value"), in_dims[2], model_dim, rng),
            output: Linear::new(store, &format!("{name}.output"), model_dim, out_dim, rng),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn in_dims(&self) -> [usize; 3] {
        [self.query.in_dim, self.key.in_dim, self.value.in_dim]
    }

    pub fn query_proj(&self) -> &Linear {
        &self.query
    }

    pub fn key_proj(&self) -> &Linear {
        &self.key
    }

    pub fn value_proj(&self) -> &Linear {
        &self.value
    }

    pub fn output_proj(&self) -> &Linear {
        &self.output
    }

    /// Validates input shapes against the layer.
    pub fn check_shapes(
        &self,
        queries: (usize, usize),
        keys: (usize, usize),
        values: (usize, usize),
    ) -> Result<()> {
        let [dq, dk, dv] = self.in_dims();
        if queries.1 != dq {
            return shape_err(format!("query width {} != {dq}", queries.1));
        }
        if keys.1 != dk {
            return shape_err(format!("key width {} != {dk}", keys.1));
        }
        if values.1 != dv {
            return shape_err(format!("value width {} != {dv}", values.1));
        }
        if keys.0 != values.0 {
            return shape_err(format!(
                "key rows {} != value rows {}",
                keys.0, values.0
            ));
        }
        if keys.0 == 0 {
            return Err(Error::InsufficientData("attention over zero keys".into()));
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> AttentionOutput {
        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, keys);
        let v = self.value.forward(tape, values);
        let hd = self.head_dim();
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (qh, kh, vh) = if self.num_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hd, (h + 1) * hd),
                    tape.slice_cols(k, h * hd, (h + 1) * hd),
                    tape.slice_cols(v, h * hd, (h + 1) * hd),
                )
            };
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
            weights.push(attn);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let output = self.output.forward(tape, cat);
        AttentionOutput { output, weights }
    }
}

/// Row-wise softmax; rejects non-finite input.
pub fn softmax_rows<F: Scalar>(logits: &Array2<F>) -> Result<Array2<F>> {
    if !all_finite(logits) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_rows_unchecked(logits))
}

/// Evaluates an attention layer outside of training.
pub fn mha_forward<F: Scalar>(
    store: &ParamStore<F>,
    layer: &MultiHeadAttention,
    queries: &Array2<F>,
    keys: &Array2<F>,
    values: &Array2<F>,
) -> Result<Array2<F>> {
    Ok(mha_forward_with_weights(store, layer, queries, keys, values)?.0)
}

/// Like [`mha_forward`], also returning per-head attention weights.
pub fn mha_forward_with_weights<F: Scalar>(
    store: &ParamStore<F>,
    layer: &MultiHeadAttention,
    queries: &Array2<F>,
    keys: &Array2<F>,
    values: &Array2<F>,
) -> Result<(Array2<F>, Vec<Array2<F>>)> {
    layer.check_shapes(queries.dim(), keys.dim(), values.dim())?;
    let mut tape = Tape::new(store);
    let q = tape.constant(queries.clone());
    let k = tape.constant(keys.clone());
    let v = tape.constant(values.clone());
    let out = layer.forward(&mut tape, q, k, v);
    let weights = out.weights.iter().map(|&w| tape.value(w).clone()).collect();
    Ok((tape.value(out.output).clone(), weights))
}
