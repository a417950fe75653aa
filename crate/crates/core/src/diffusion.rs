//! Score-based diffusion decoder.
//!
//! Forward process: a mean-reverting variance-preserving SDE
//! `dx = ½β(t)(μ − x)dt + √β(t) dW` with linear `β(t)`, whose marginal is
//! `x_t = μ + (x₀ − μ)e^{−½∫β} + √(1 − e^{−∫β}) ε`. The prior mean `μ` is a
//! linear projection of the content embeddings. The score network predicts
//! `ε`; the score is `−ε̂ / σ_t`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{sinusoidal_encoding, Conv1d, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Smallest diffusion time used for training draws.
pub const T_MIN: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub beta_0: f64,
    pub beta_1: f64,
    /// Reverse-time integration steps `N`.
    pub steps: usize,
    pub guidance_scale_content: f64,
    pub guidance_scale_style: f64,
    /// Probability of replacing the style conditioning with the
    /// unconditional embedding during training.
    pub uncond_drop_prob: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            beta_0: 0.05,
            beta_1: 20.0,
            steps: 30,
            guidance_scale_content: 1.0,
            guidance_scale_style: 0.5,
            uncond_drop_prob: 0.1,
        }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_0 > 0.0 && self.beta_0 <= self.beta_1) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_0 <= beta_1, got {} and {}",
                self.beta_0, self.beta_1
            )));
        }
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_drop_prob) {
            return Err(Error::InvalidArgument("drop probability not in [0, 1]".into()));
        }
        if !self.guidance_scale_style.is_finite() || !self.guidance_scale_content.is_finite() {
            return Err(Error::InvalidArgument("guidance scales must be finite".into()));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_0 + (self.beta_1 - self.beta_0) * t
    }

    /// `∫₀ᵗ β(s) ds`
    pub fn beta_integral(&self, t: f64) -> f64 {
        self.beta_0 * t + 0.5 * (self.beta_1 - self.beta_0) * t * t
    }

    /// Mean decay factor `exp(−½∫β)`.
    pub fn decay(&self, t: f64) -> f64 {
        (-0.5 * self.beta_integral(t)).exp()
    }

    /// Marginal noise variance `1 − exp(−∫β)`.
    pub fn variance(&self, t: f64) -> f64 {
        -(-self.beta_integral(t)).exp_m1()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("diffusion time {t} not in (0, 1]")));
    }
    Ok(())
}

/// Closed-form forward perturbation of `x0` toward `mu` at time `t`.
pub fn forward_perturb<F: Scalar>(
    x0: &Array2<F>,
    mu: &Array2<F>,
    t: f64,
    noise: &Array2<F>,
    schedule: &DiffusionSchedule,
) -> Result<Array2<F>> {
    check_time(t)?;
    if x0.dim() != mu.dim() || x0.dim() != noise.dim() {
        return shape_err("x0, mu and noise must share a shape");
    }
    let a = F::of(schedule.decay(t));
    let s = F::of(schedule.variance(t).sqrt());
    let mut out = mu.clone();
    ndarray::Zip::from(&mut out)
        .and(x0)
        .and(noise)
        .for_each(|o, &x, &z| *o = *o + (x - *o) * a + s * z);
    Ok(out)
}

pub fn standard_normal<F: Scalar, R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        F::of(z)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channels at each of the three U-Net resolutions.
    pub channels: [usize; 3],
    pub time_dim: usize,
    pub kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: [128, 128, 256],
            time_dim: 64,
            kernel: 3,
        }
    }
}

/// Residual block with FiLM conditioning between its two convolutions.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    film: Linear,
    conv2: Conv1d,
    skip: Option<Linear>,
    out_ch: usize,
}

impl ResBlock {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        cond_dim: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), in_ch, out_ch, kernel, rng),
            film: Linear::new(store, &format!("{name}.film"), cond_dim, 2 * out_ch, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), out_ch, out_ch, kernel, rng),
            skip: (in_ch != out_ch)
                .then(|| Linear::new(store, &format!("{name}.skip"), in_ch, out_ch, rng)),
            out_ch,
        }
    }

    fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, cond: Var) -> Var {
        let h = tape.silu(x);
        let h = self.conv1.forward(tape, h);
        let f = self.film.forward(tape, cond);
        let scale = tape.slice_cols(f, 0, self.out_ch);
        let scale = tape.add_const(scale, F::one());
        let shift = tape.slice_cols(f, self.out_ch, 2 * self.out_ch);
        let h = tape.mul(h, scale);
        let h = tape.add(h, shift);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, h);
        let skip = match &self.skip {
            Some(l) => l.forward(tape, x),
            None => x,
        };
        tape.add(skip, h)
    }
}

/// 1-D U-Net over the time axis with three resolutions. Input channels are
/// `[x_t | μ]`; every block is FiLM-conditioned on `[style | time embedding]`
/// per frame. Output is the noise estimate. A linear skip from the input
/// channels to the output carries the part of the noise that is a linear
/// function of `x_t − μ`, so the U-Net only models the remainder.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    mel_dim: usize,
    time_dim: usize,
    time_mlp: Mlp,
    conv_in: Conv1d,
    down0: ResBlock,
    down1: ResBlock,
    mid0: ResBlock,
    mid1: ResBlock,
    up1: ResBlock,
    up0: ResBlock,
    out: Linear,
    /// Linear path from the input channels straight to the output.
    input_skip: Linear,
}

impl ScoreNet {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        mel_dim: usize,
        style_dim: usize,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Self {
        let [c0, c1, c2] = cfg.channels;
        let k = cfg.kernel;
        let td = cfg.time_dim;
        let cond = style_dim + td;
        let input_skip = Linear::new(store, "score.input_skip", 2 * mel_dim, mel_dim, rng);
        // Start from ε̂ = x_t − μ, the exact noise at t = 1 where σ = 1.
        let w = store.value_mut(input_skip.weight());
        w.fill(F::zero());
        for i in 0..mel_dim {
            w[[i, i]] = F::one();
            w[[mel_dim + i, i]] = -F::one();
        }
        ScoreNet {
            mel_dim,
            time_dim: td,
            time_mlp: Mlp::new(store, "score.time", &[td, 2 * td, td], rng),
            conv_in: Conv1d::new(store, "score.conv_in", 2 * mel_dim, c0, k, rng),
            down0: ResBlock::new(store, "score.down0", c0, c0, cond, k, rng),
            down1: ResBlock::new(store, "score.down1", c0, c1, cond, k, rng),
            mid0: ResBlock::new(store, "score.mid0", c1, c2, cond, k, rng),
            mid1: ResBlock::new(store, "score.mid1", c2, c2, cond, k, rng),
            up1: ResBlock::new(store, "score.up1", c2 + c1, c1, cond, k, rng),
            up0: ResBlock::new(store, "score.up0", c1 + c0, c0, cond, k, rng),
            out: Linear::new(store, "score.out", c0, mel_dim, rng),
            input_skip,
        }
    }

    /// Noise estimate for `x_t` (`T × mel`). Sequences whose length is not a
    /// multiple of 4 are zero-padded internally and cropped back.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x_t: Var,
        mu: Var,
        style: Var,
        t: f64,
    ) -> Var {
        let len = tape.shape(x_t).0;
        let padded = len.div_ceil(4) * 4;
        let pad = |tape: &mut Tape<'_, F>, v: Var| {
            if padded == len {
                v
            } else {
                let cols = tape.shape(v).1;
                let z = tape.constant(Array2::zeros((padded - len, cols)));
                tape.concat_rows(&[v, z])
            }
        };
        let x = pad(tape, x_t);
        let m = pad(tape, mu);
        let s = pad(tape, style);

        let temb = tape.constant(sinusoidal_encoding(&[t * 1000.0], self.time_dim));
        let temb = self.time_mlp.forward(tape, temb);
        let temb = tape.broadcast_rows(temb, padded);
        let c0 = tape.concat_cols(&[s, temb]);
        let c1 = tape.pool_pairs(c0);
        let c2 = tape.pool_pairs(c1);

        let inp = tape.concat_cols(&[x, m]);
        let h = self.conv_in.forward(tape, inp);
        let skip0 = self.down0.forward(tape, h, c0);
        let h = tape.pool_pairs(skip0);
        let skip1 = self.down1.forward(tape, h, c1);
        let h = tape.pool_pairs(skip1);
        let h = self.mid0.forward(tape, h, c2);
        let h = self.mid1.forward(tape, h, c2);
        let h = tape.repeat_pairs(h);
        let h = tape.concat_cols(&[h, skip1]);
        let h = self.up1.forward(tape, h, c1);
        let h = tape.repeat_pairs(h);
        let h = tape.concat_cols(&[h, skip0]);
        let h = self.up0.forward(tape, h, c0);
        let h = tape.silu(h);
        let out = self.out.forward(tape, h);
        let direct = self.input_skip.forward(tape, inp);
        let out = tape.add(out, direct);
        if padded == len {
            out
        } else {
            tape.slice_rows(out, 0, len)
        }
    }

    pub fn mel_dim(&self) -> usize {
        self.mel_dim
    }
}

/// Prior projection, score network and the unconditional style embedding.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub prior: Linear,
    pub score_net: ScoreNet,
    pub uncond_style: ParamId,
    style_dim: usize,
}

impl Decoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        content_dim: usize,
        mel_dim: usize,
        style_dim: usize,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Self {
        Decoder {
            prior: Linear::new(store, "prior", content_dim, mel_dim, rng),
            score_net: ScoreNet::new(store, mel_dim, style_dim, cfg, rng),
            uncond_style: store.add_normal("uncond_style", (1, style_dim), 1.0, rng),
            style_dim,
        }
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    /// Unconditional style embedding broadcast over `frames` rows.
    pub fn uncond_rows<F: Scalar>(&self, tape: &mut Tape<'_, F>, frames: usize) -> Var {
        let u = tape.param(self.uncond_style);
        tape.broadcast_rows(u, frames)
    }
}

/// A conditional score model `s(x_t, t | style)`; content conditioning is
/// bound into the implementor.
pub trait ConditionalScore<F: Scalar> {
    fn score(&self, x_t: &Array2<F>, t: f64, style: &Array2<F>) -> Array2<F>;
}

/// Guidance combination `s_c + γ(s_c − s_u)`.
pub fn guided<F: Scalar>(cond: &Array2<F>, uncond: &Array2<F>, gamma: f64) -> Array2<F> {
    let g = F::of(gamma);
    let mut out = cond.clone();
    ndarray::Zip::from(&mut out)
        .and(uncond)
        .for_each(|c, &u| *c = *c + g * (*c - u));
    out
}

/// Classifier-free guided score. The content scale multiplies the
/// conditional term (1.0 is the identity); only style has an unconditional
/// branch.
pub fn cfg_score<F: Scalar, S: ConditionalScore<F>>(
    model: &S,
    x_t: &Array2<F>,
    t: f64,
    style: &Array2<F>,
    uncond_style: &Array2<F>,
    schedule: &DiffusionSchedule,
) -> Result<Array2<F>> {
    if style.dim() != uncond_style.dim() || style.nrows() != x_t.nrows() {
        return shape_err("style, unconditional style and x_t must have matching rows");
    }
    let cond = model.score(x_t, t, style);
    if schedule.guidance_scale_style == 0.0 {
        return Ok(scale_content(cond, schedule));
    }
    let uncond = model.score(x_t, t, uncond_style);
    Ok(scale_content(
        guided(&cond, &uncond, schedule.guidance_scale_style),
        schedule,
    ))
}

fn scale_content<F: Scalar>(s: Array2<F>, schedule: &DiffusionSchedule) -> Array2<F> {
    if schedule.guidance_scale_content == 1.0 {
        s
    } else {
        s * F::of(schedule.guidance_scale_content)
    }
}

/// The trained network bound to one utterance's prior mean.
pub struct NetworkScore<'a, F: Scalar> {
    pub store: &'a ParamStore<F>,
    pub decoder: &'a Decoder,
    pub mu: &'a Array2<F>,
    pub schedule: &'a DiffusionSchedule,
}

impl<F: Scalar> ConditionalScore<F> for NetworkScore<'_, F> {
    fn score(&self, x_t: &Array2<F>, t: f64, style: &Array2<F>) -> Array2<F> {
        let mut tape = Tape::new(self.store);
        let x = tape.constant(x_t.clone());
        let m = tape.constant(self.mu.clone());
        let s = tape.constant(style.clone());
        let eps = self.decoder.score_net.forward(&mut tape, x, m, s, t);
        let sigma = self.schedule.variance(t).sqrt().max(1e-12);
        tape.value(eps).mapv(|e| -e / F::of(sigma))
    }
}

/// Euler–Maruyama integration of the reverse SDE from `t = 1` to `t = 0` in
/// `steps` uniform steps, starting at `μ + ε`. The last step adds no noise.
pub fn reverse_sde<F, S, R>(
    mut score: S,
    mu: &Array2<F>,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Array2<F>>
where
    F: Scalar,
    S: FnMut(&Array2<F>, f64) -> Result<Array2<F>>,
    R: Rng + ?Sized,
{
    schedule.validate()?;
    let n = schedule.steps;
    let h = 1.0 / n as f64;
    let mut x = mu + &standard_normal::<F, _>(mu.dim(), rng);
    for i in 0..n {
        let t = 1.0 - i as f64 * h;
        let s = score(&x, t)?;
        let b = schedule.beta(t);
        let (half_bh, bh) = (F::of(0.5 * b * h), F::of(b * h));
        ndarray::Zip::from(&mut x)
            .and(mu)
            .and(&s)
            .for_each(|x, &m, &s| *x = *x - half_bh * (m - *x) + bh * s);
        if i + 1 < n {
            let noise_scale = F::of((b * h).sqrt());
            let z = standard_normal::<F, _>(mu.dim(), rng);
            x.scaled_add(noise_scale, &z);
        }
    }
    Ok(x)
}

/// Generates mel frames for aligned content embeddings and style embeddings.
pub fn sample<F: Scalar>(
    store: &ParamStore<F>,
    decoder: &Decoder,
    content_emb: &Array2<F>,
    style_seq: &Array2<F>,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Array2<F>> {
    schedule.validate()?;
    if content_emb.nrows() != style_seq.nrows() {
        return shape_err(format!(
            "content has {} frames, style {}",
            content_emb.nrows(),
            style_seq.nrows()
        ));
    }
    if style_seq.ncols() != decoder.style_dim {
        return shape_err("style width does not match the decoder");
    }
    if content_emb.ncols() != decoder.prior.in_dim {
        return shape_err("content width does not match the decoder");
    }
    let frames = content_emb.nrows();
    let (mu, uncond) = {
        let mut tape = Tape::new(store);
        let c = tape.constant(content_emb.clone());
        let mu = decoder.prior.forward(&mut tape, c);
        let u = decoder.uncond_rows(&mut tape, frames);
        (tape.value(mu).clone(), tape.value(u).clone())
    };
    let net = NetworkScore {
        store,
        decoder,
        mu: &mu,
        schedule,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reverse_sde(
        |x, t| cfg_score(&net, x, t, style_seq, &uncond, schedule),
        &mu,
        schedule,
        &mut rng,
    )
}
