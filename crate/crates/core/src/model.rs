//! The full conversion model and its training objective.
//!
//! `L_total = L_Diff + L_Enc` where `L_Diff` is the noise-prediction MSE of
//! the score network and `L_Enc` is the MSE between the prior mean `μ` (a
//! linear map of the content embeddings) and the target mel frames. During
//! training every utterance is its own style target.
//!
//! The network works on per-dimension standardized mel frames. [`Model`]
//! methods take and return raw frames and apply [`MelNorm`] at the edges.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::content::{ContentEncoder, ContentEncoderConfig};
use crate::diffusion::{self, standard_normal, Decoder, DecoderConfig, DiffusionSchedule, T_MIN};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::stylebook::{self, DualAttention, StyleConfig, StyleEncoder};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mel_dim: usize,
    pub content: ContentEncoderConfig,
    pub style: StyleConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mel_dim: 64,
            content: ContentEncoderConfig::default(),
            style: StyleConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let c = &self.content;
        if self.mel_dim == 0 || c.out_dim == 0 || c.model_dim == 0 || c.num_units < 2 {
            return bad("model widths must be positive and num_units >= 2".into());
        }
        if c.heads == 0 || c.model_dim % c.heads != 0 {
            return bad(format!("content model_dim {} not divisible by {} heads", c.model_dim, c.heads));
        }
        let s = &self.style;
        if s.attn_heads == 0 || s.attn_dim % s.attn_heads != 0 {
            return bad(format!("attention dim {} not divisible by {} heads", s.attn_dim, s.attn_heads));
        }
        if s.num_queries == 0 || s.style_dim == 0 || s.query_dim == 0 {
            return bad("stylebook dimensions must be positive".into());
        }
        if s.kernel % 2 == 0 || self.decoder.kernel % 2 == 0 {
            return bad("convolution kernels must be odd".into());
        }
        if self.decoder.channels.contains(&0) || self.decoder.time_dim < 2 {
            return bad("decoder widths must be positive".into());
        }
        Ok(())
    }
}

/// Layer handles of every parameter group. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: ContentEncoder,
    pub style_encoder: StyleEncoder,
    pub dual: DualAttention,
    pub decoder: Decoder,
}

impl Network {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d_c = config.content.out_dim;
        let encoder = ContentEncoder::new(store, "content", &config.content, rng);
        let style_encoder = StyleEncoder::new(store, config.mel_dim, d_c, &config.style, rng);
        let dual = DualAttention::new(store, d_c, style_encoder.out_dim(), &config.style, rng);
        let decoder = Decoder::new(
            store,
            d_c,
            config.mel_dim,
            config.style.style_dim,
            &config.decoder,
            rng,
        );
        Ok(Network {
            config: config.clone(),
            encoder,
            style_encoder,
            dual,
            decoder,
        })
    }

    /// Builds the loss graph for a batch. Draws must match the batch.
    pub fn loss<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        batch: &[TrainExample<F>],
        draws: &LossDraws<F>,
        schedule: &DiffusionSchedule,
    ) -> LossVars {
        let inv_b = F::of(1.0 / batch.len() as f64);
        let mut diff_terms = Vec::with_capacity(batch.len());
        let mut enc_terms = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let frames = ex.units.len();
            let c = self.encoder.forward(tape, &ex.units);
            let mel = tape.constant(ex.mel.clone());
            let styles = if draws.drop[i] {
                self.decoder.uncond_rows(tape, frames)
            } else {
                let s = self.style_encoder.forward(tape, mel, c);
                let (book, _) = self.dual.summarize(tape, c, s);
                self.dual.retrieve(tape, c, book).0
            };
            let mu = self.decoder.prior.forward(tape, c);
            enc_terms.push(tape.mse(mu, mel));

            let t = draws.t[i];
            let a = F::of(schedule.decay(t));
            let sigma = F::of(schedule.variance(t).sqrt());
            let offset = tape.sub(mel, mu);
            let offset = tape.scale(offset, a);
            let x_t = tape.add(mu, offset);
            let noise = tape.constant(draws.noise[i].mapv(|z| z * sigma));
            let x_t = tape.add(x_t, noise);
            let eps_hat = self.decoder.score_net.forward(tape, x_t, mu, styles, t);
            let eps = tape.constant(draws.noise[i].clone());
            diff_terms.push(tape.mse(eps_hat, eps));
        }
        let sum = |tape: &mut Tape<'_, F>, terms: &[Var]| {
            let mut acc = terms[0];
            for &v in &terms[1..] {
                acc = tape.add(acc, v);
            }
            tape.scale(acc, inv_b)
        };
        let diff = sum(tape, &diff_terms);
        let enc = sum(tape, &enc_terms);
        let total = tape.add(diff, enc);
        LossVars { total, diff, enc }
    }

    fn check_batch<F: Scalar>(&self, batch: &[TrainExample<F>], draws: &LossDraws<F>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        if draws.t.len() != batch.len() || draws.noise.len() != batch.len() || draws.drop.len() != batch.len() {
            return Err(Error::InvalidArgument("draws do not match the batch size".into()));
        }
        for (ex, z) in batch.iter().zip(&draws.noise) {
            ex.check(self.config.mel_dim)?;
            self.encoder.check_units(&ex.units)?;
            if z.dim() != ex.mel.dim() {
                return shape_err("noise draw shape differs from the mel target");
            }
        }
        if let Some(t) = draws.t.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::InvalidArgument(format!("diffusion time {t} not in (0, 1]")));
        }
        Ok(())
    }
}

/// One training utterance: unit ids and the aligned mel frames.
#[derive(Clone, Debug)]
pub struct TrainExample<F> {
    pub units: Vec<usize>,
    pub mel: Array2<F>,
}

impl<F: Scalar> TrainExample<F> {
    fn check(&self, mel_dim: usize) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::InsufficientData("empty training example".into()));
        }
        if self.mel.nrows() != self.units.len() || self.mel.ncols() != mel_dim {
            return shape_err(format!(
                "example mel {:?} does not match {} units × {mel_dim}",
                self.mel.dim(),
                self.units.len()
            ));
        }
        Ok(())
    }
}

/// Random quantities of one loss evaluation, drawn up front so the loss is
/// a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct LossDraws<F> {
    pub t: Vec<f64>,
    pub noise: Vec<Array2<F>>,
    /// Whether the style conditioning is replaced by the unconditional
    /// embedding.
    pub drop: Vec<bool>,
}

impl<F: Scalar> LossDraws<F> {
    pub fn sample<R: Rng + ?Sized>(
        batch: &[TrainExample<F>],
        schedule: &DiffusionSchedule,
        rng: &mut R,
    ) -> Self {
        let mut draws = LossDraws {
            t: Vec::with_capacity(batch.len()),
            noise: Vec::with_capacity(batch.len()),
            drop: Vec::with_capacity(batch.len()),
        };
        for ex in batch {
            draws.t.push(rng.random_range(T_MIN..=1.0));
            draws.noise.push(standard_normal(ex.mel.dim(), rng));
            draws.drop.push(rng.random::<f64>() < schedule.uncond_drop_prob);
        }
        draws
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub diff: Var,
    pub enc: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub diff: f64,
    pub enc: f64,
}

/// Per-dimension mel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct MelNorm {
    pub mean: Array1<f32>,
    pub std: Array1<f32>,
}

/// Dimensions with less spread than this are only centered.
const MIN_STD: f64 = 1e-6;

impl MelNorm {
    pub fn identity(dim: usize) -> Self {
        MelNorm {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    /// Statistics over all frames of all parts (accumulated in f64).
    pub fn fit<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = ArrayView2<'a, f32>>,
    {
        let parts: Vec<_> = parts.into_iter().collect();
        let dim = parts.first().map_or(0, |p| p.ncols());
        if parts.iter().any(|p| p.ncols() != dim) {
            return shape_err("mel parts have different widths");
        }
        let n: usize = parts.iter().map(|p| p.nrows()).sum();
        if n == 0 {
            return Err(Error::InsufficientData("no mel frames to fit statistics".into()));
        }
        let mut sum = Array1::<f64>::zeros(dim);
        for p in &parts {
            for row in p.rows() {
                sum.zip_mut_with(&row, |a, &b| *a += b as f64);
            }
        }
        let mean = sum / n as f64;
        let mut sq = Array1::<f64>::zeros(dim);
        for p in &parts {
            for row in p.rows() {
                ndarray::Zip::from(&mut sq)
                    .and(&row)
                    .and(&mean)
                    .for_each(|a, &b, &m| *a += (b as f64 - m).powi(2));
            }
        }
        let std = sq.mapv(|v| (v / n as f64).sqrt().max(MIN_STD));
        Ok(MelNorm {
            mean: mean.mapv(|v| v as f32),
            std: std.mapv(|v| v as f32),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize<F: Scalar>(&self, mel: &Array2<F>) -> Array2<F> {
        let mut out = mel.clone();
        for mut row in out.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&self.mean)
                .and(&self.std)
                .for_each(|x, &m, &s| *x = (*x - F::of(m as f64)) / F::of(s as f64));
        }
        out
    }

    pub fn denormalize<F: Scalar>(&self, mel: &Array2<F>) -> Array2<F> {
        let mut out = mel.clone();
        for mut row in out.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&self.mean)
                .and(&self.std)
                .for_each(|x, &m, &s| *x = *x * F::of(s as f64) + F::of(m as f64));
        }
        out
    }

    /// Rows `[mean; std]`, the stored form.
    pub fn to_matrix(&self) -> Array2<f32> {
        ndarray::stack(Axis(0), &[self.mean.view(), self.std.view()]).expect("equal lengths")
    }

    pub fn from_matrix(m: &Array2<f32>) -> Result<Self> {
        if m.nrows() != 2 {
            return shape_err(format!("mel statistics need 2 rows, got {}", m.nrows()));
        }
        if m.row(1).iter().any(|&s| !(s > 0.0 && s.is_finite())) || m.row(0).iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("mel statistics must be finite with positive spread".into()));
        }
        Ok(MelNorm {
            mean: m.row(0).to_owned(),
            std: m.row(1).to_owned(),
        })
    }
}

/// Network structure, parameter values and mel statistics.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub net: Network,
    pub params: ParamStore<F>,
    pub mel_norm: MelNorm,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Network::new(&mut params, config, &mut rng)?;
        Ok(Model {
            net,
            params,
            mel_norm: MelNorm::identity(config.mel_dim),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
            mel_norm: self.mel_norm.clone(),
        }
    }

    pub fn training_loss(
        &self,
        batch: &[TrainExample<F>],
        draws: &LossDraws<F>,
        schedule: &DiffusionSchedule,
    ) -> Result<LossValues> {
        Ok(self.loss_and_grads_inner(batch, draws, schedule, false)?.0)
    }

    /// Loss values and parameter gradients of `L_total`.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainExample<F>],
        draws: &LossDraws<F>,
        schedule: &DiffusionSchedule,
    ) -> Result<(LossValues, Grads<F>)> {
        let (v, g) = self.loss_and_grads_inner(batch, draws, schedule, true)?;
        Ok((v, g.expect("gradients requested")))
    }

    fn loss_and_grads_inner(
        &self,
        batch: &[TrainExample<F>],
        draws: &LossDraws<F>,
        schedule: &DiffusionSchedule,
        grads: bool,
    ) -> Result<(LossValues, Option<Grads<F>>)> {
        self.net.check_batch(batch, draws)?;
        let batch: Vec<TrainExample<F>> = batch
            .iter()
            .map(|e| TrainExample {
                units: e.units.clone(),
                mel: self.mel_norm.normalize(&e.mel),
            })
            .collect();
        let mut tape = Tape::new(&self.params);
        let vars = self.net.loss(&mut tape, &batch, draws, schedule);
        let scalar = |v: Var| tape.value(v)[[0, 0]].as_f64();
        let values = LossValues {
            total: scalar(vars.total),
            diff: scalar(vars.diff),
            enc: scalar(vars.enc),
        };
        let g = grads.then(|| tape.backward(vars.total));
        Ok((values, g))
    }

    pub fn content_embeddings(&self, units: &[usize]) -> Result<Array2<F>> {
        crate::content::encode_content(&self.params, &self.net.encoder, units)
    }

    /// Summarizes target utterances (unit ids with aligned mel frames) into a
    /// `Q × d_s` stylebook. Utterances are encoded separately and their
    /// frames pooled.
    pub fn enroll(&self, targets: &[(Vec<usize>, Array2<F>)]) -> Result<Array2<F>> {
        if targets.is_empty() {
            return Err(Error::InsufficientData("no target utterances".into()));
        }
        let mut contents = Vec::with_capacity(targets.len());
        let mut styles = Vec::with_capacity(targets.len());
        for (units, mel) in targets {
            if mel.ncols() != self.net.config.mel_dim {
                return shape_err(format!(
                    "target mel width {} != {}",
                    mel.ncols(),
                    self.net.config.mel_dim
                ));
            }
            let c = self.content_embeddings(units)?;
            let mel = self.mel_norm.normalize(mel);
            let s = stylebook::encode_style(&self.params, &self.net.style_encoder, &mel, &c)?;
            contents.push(c);
            styles.push(s);
        }
        let c = concat_rows(&contents);
        let s = concat_rows(&styles);
        stylebook::build_stylebook(&self.params, &self.net.dual, &c, &s)
    }

    /// Per-frame style embeddings for source units and their head-averaged
    /// retrieval weights.
    pub fn retrieve(&self, units: &[usize], book: &Array2<F>) -> Result<(Array2<F>, Array2<F>, Array2<F>)> {
        let c = self.content_embeddings(units)?;
        let (s, w) = stylebook::retrieve_styles_with_weights(&self.params, &self.net.dual, &c, book)?;
        Ok((c, s, w))
    }

    /// Converts source units to mel frames in the style of `book`.
    pub fn convert(
        &self,
        units: &[usize],
        book: &Array2<F>,
        schedule: &DiffusionSchedule,
        seed: u64,
    ) -> Result<Array2<F>> {
        let (c, s, _) = self.retrieve(units, book)?;
        let y = diffusion::sample(&self.params, &self.net.decoder, &c, &s, schedule, seed)?;
        Ok(self.mel_norm.denormalize(&y))
    }

    /// The prior mean `μ` for source units.
    pub fn prior_mean(&self, units: &[usize]) -> Result<Array2<F>> {
        let c = self.content_embeddings(units)?;
        let mut tape = Tape::new(&self.params);
        let cv = tape.constant(c);
        let mu = self.net.decoder.prior.forward(&mut tape, cv);
        Ok(self.mel_norm.denormalize(tape.value(mu)))
    }
}

fn concat_rows<F: Scalar>(parts: &[Array2<F>]) -> Array2<F> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

/// A deliberately small configuration for tests and smoke runs.
pub fn tiny_config(mel_dim: usize, num_units: usize) -> ModelConfig {
    ModelConfig {
        mel_dim,
        content: ContentEncoderConfig {
            num_units,
            model_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 12,
            out_dim: 6,
        },
        style: StyleConfig {
            mel_hidden: 6,
            style_channels: 6,
            kernel: 3,
            num_queries: 5,
            query_dim: 6,
            attn_dim: 4,
            attn_heads: 2,
            style_dim: 3,
        },
        decoder: DecoderConfig {
            channels: [4, 4, 6],
            time_dim: 4,
            kernel: 3,
        },
    }
}
