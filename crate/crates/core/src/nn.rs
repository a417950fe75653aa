//! Layer building blocks over the [`Tape`].

use ndarray::Array2;
use rand::Rng;

use crate::attention::MultiHeadAttention;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

const LN_EPS: f64 = 1e-5;

/// Dense layer `x · W + b`, `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(
            format!("{name}.weight"),
            (in_dim, out_dim),
            1.0 / (in_dim as f64).sqrt(),
            rng,
        );
        let b = store.add_zeros(format!("{name}.bias"), (1, out_dim));
        Linear {
            in_dim,
            out_dim,
            w,
            b,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

/// Row-wise layer normalization with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    offset: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(format!("{name}.gain"), (1, dim)),
            offset: store.add_zeros(format!("{name}.offset"), (1, dim)),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, F::of(LN_EPS));
        let g = tape.param(self.gain);
        let o = tape.param(self.offset);
        let y = tape.mul_row(n, g);
        tape.add_row(y, o)
    }
}

/// Stack of dense layers with SiLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width including input and output.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.silu(h);
            }
            h = layer.forward(tape, h);
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Same-padded 1-D convolution over the time (row) axis.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    w: ParamId,
    b: ParamId,
}

impl Conv1d {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels keep the length");
        let fan_in = in_ch * kernel;
        let w = store.add_normal(
            format!("{name}.weight"),
            (fan_in, out_ch),
            1.0 / (fan_in as f64).sqrt(),
            rng,
        );
        let b = store.add_zeros(format!("{name}.bias"), (1, out_ch));
        Conv1d {
            kernel,
            in_ch,
            out_ch,
            w,
            b,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let cols = if self.kernel == 1 {
            x
        } else {
            tape.unfold(x, self.kernel)
        };
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(cols, w);
        tape.add_row(y, b)
    }
}

/// Pre-norm Transformer encoder layer (self-attention + feed-forward).
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: Mlp,
}

impl TransformerLayer {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        TransformerLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                [dim, dim, dim],
                dim,
                heads,
                dim,
                rng,
            ),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff: Mlp::new(store, &format!("{name}.ff"), &[dim, ff_dim, dim], rng),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let h = self.norm_attn.forward(tape, x);
        let a = self.attn.forward(tape, h, h, h).output;
        let x = tape.add(x, a);
        let h = self.norm_ff.forward(tape, x);
        let f = self.ff.forward(tape, h);
        tape.add(x, f)
    }
}

/// Sinusoidal encoding of positions `0..len` (or of arbitrary real
/// positions), `dim` columns: sines in the first half, cosines in the second.
pub fn sinusoidal_encoding<F: Scalar>(positions: &[f64], dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut out = Array2::zeros((positions.len(), dim));
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            out[[i, j]] = F::of((p * freq).sin());
            out[[i, half + j]] = F::of((p * freq).cos());
        }
    }
    out
}
