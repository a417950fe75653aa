//! Transposed dual attention.
//!
//! A learned query set attends over a target speaker's frames (content
//! embeddings as keys, style-encoder outputs as values) and yields the
//! stylebook: a `Q × d_s` summary whose size does not depend on how much
//! target speech was used. For conversion the roles are swapped: source
//! content embeddings query the same query set, now used as keys, and the
//! stylebook rows are the values. Each source frame thereby receives its own
//! content-dependent style embedding at `O(Q)` cost.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MultiHeadAttention;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv1d, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    /// Hidden width of the 3-layer mel MLP.
    pub mel_hidden: usize,
    /// Channels of the 3-layer style CNN.
    pub style_channels: usize,
    pub kernel: usize,
    /// Number of stylebook entries `Q`.
    pub num_queries: usize,
    pub query_dim: usize,
    /// Embedding width inside both attention layers.
    pub attn_dim: usize,
    pub attn_heads: usize,
    /// Width `d_s` of stylebook rows and retrieved style embeddings.
    pub style_dim: usize,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            mel_hidden: 256,
            style_channels: 256,
            kernel: 3,
            num_queries: 128,
            query_dim: 256,
            attn_dim: 256,
            attn_heads: 2,
            style_dim: 64,
        }
    }
}

/// Mel MLP followed by a same-padded CNN over `[mel features | content]`.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    mel_mlp: Mlp,
    convs: Vec<Conv1d>,
}

impl StyleEncoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        mel_dim: usize,
        content_dim: usize,
        cfg: &StyleConfig,
        rng: &mut R,
    ) -> Self {
        let h = cfg.mel_hidden;
        let mel_mlp = Mlp::new(store, "mel_encoder", &[mel_dim, h, h, h], rng);
        let c = cfg.style_channels;
        let convs = vec![
            Conv1d::new(store, "style_encoder.0", h + content_dim, c, cfg.kernel, rng),
            Conv1d::new(store, "style_encoder.1", c, c, cfg.kernel, rng),
            Conv1d::new(store, "style_encoder.2", c, c, cfg.kernel, rng),
        ];
        StyleEncoder { mel_mlp, convs }
    }

    pub fn out_dim(&self) -> usize {
        self.convs.last().unwrap().out_ch
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, mel: Var, content: Var) -> Var {
        let m = self.mel_mlp.forward(tape, mel);
        let mut h = tape.concat_cols(&[m, content]);
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = tape.silu(h);
            }
            h = conv.forward(tape, h);
        }
        h
    }
}

/// Query set plus the summarizing and retrieving attention layers. The two
/// layers have separate projections; only the query set is shared.
#[derive(Clone, Debug)]
pub struct DualAttention {
    pub query_set: ParamId,
    pub summarize: MultiHeadAttention,
    pub retrieve: MultiHeadAttention,
    num_queries: usize,
    style_dim: usize,
}

impl DualAttention {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        content_dim: usize,
        style_in_dim: usize,
        cfg: &StyleConfig,
        rng: &mut R,
    ) -> Self {
        // Unit-variance entries put the query set on the same scale as the
        // layer-normed content features, so the initial attention is not
        // near uniform and the stylebook entries start out distinct.
        let query_set = store.add_normal("query_set", (cfg.num_queries, cfg.query_dim), 1.0, rng);
        let summarize = MultiHeadAttention::new(
            store,
            "summarize",
            [cfg.query_dim, content_dim, style_in_dim],
            cfg.attn_dim,
            cfg.attn_heads,
            cfg.style_dim,
            rng,
        );
        let retrieve = MultiHeadAttention::new(
            store,
            "retrieve",
            [content_dim, cfg.query_dim, cfg.style_dim],
            cfg.attn_dim,
            cfg.attn_heads,
            cfg.style_dim,
            rng,
        );
        DualAttention {
            query_set,
            summarize,
            retrieve,
            num_queries: cfg.num_queries,
            style_dim: cfg.style_dim,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    /// Stylebook `Q × d_s` from aligned target content embeddings and style
    /// sequence.
    pub fn summarize<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        content: Var,
        style_seq: Var,
    ) -> (Var, Vec<Var>) {
        let qs = tape.param(self.query_set);
        let out = self.summarize.forward(tape, qs, content, style_seq);
        (out.output, out.weights)
    }

    /// Per-frame style embeddings `T_src × d_s`.
    pub fn retrieve<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        source_content: Var,
        stylebook: Var,
    ) -> (Var, Vec<Var>) {
        let qs = tape.param(self.query_set);
        let out = self.retrieve.forward(tape, source_content, qs, stylebook);
        (out.output, out.weights)
    }
}

/// Style encoder outputs for a target utterance (or concatenated set).
pub fn encode_style<F: Scalar>(
    store: &ParamStore<F>,
    encoder: &StyleEncoder,
    target_mel: &Array2<F>,
    target_content_emb: &Array2<F>,
) -> Result<Array2<F>> {
    if target_mel.nrows() != target_content_emb.nrows() {
        return shape_err(format!(
            "mel has {} frames, content embeddings {}",
            target_mel.nrows(),
            target_content_emb.nrows()
        ));
    }
    if target_mel.nrows() == 0 {
        return Err(Error::InsufficientData("empty target".into()));
    }
    let mut tape = Tape::new(store);
    let m = tape.constant(target_mel.clone());
    let c = tape.constant(target_content_emb.clone());
    let y = encoder.forward(&mut tape, m, c);
    Ok(tape.value(y).clone())
}

/// Summarizes a target into a `Q × d_s` stylebook matrix.
pub fn build_stylebook<F: Scalar>(
    store: &ParamStore<F>,
    dual: &DualAttention,
    target_content_emb: &Array2<F>,
    target_style_seq: &Array2<F>,
) -> Result<Array2<F>> {
    if target_content_emb.nrows() == 0 {
        return Err(Error::InsufficientData("empty target set".into()));
    }
    dual.summarize.check_shapes(
        (dual.num_queries, dual.summarize.in_dims()[0]),
        target_content_emb.dim(),
        target_style_seq.dim(),
    )?;
    let mut tape = Tape::new(store);
    let c = tape.constant(target_content_emb.clone());
    let s = tape.constant(target_style_seq.clone());
    let (book, _) = dual.summarize(&mut tape, c, s);
    Ok(tape.value(book).clone())
}

/// Per-source-frame style embeddings, plus the head-averaged retrieval
/// attention weights (`T_src × Q`).
pub fn retrieve_styles_with_weights<F: Scalar>(
    store: &ParamStore<F>,
    dual: &DualAttention,
    source_content_emb: &Array2<F>,
    stylebook: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    if stylebook.nrows() != dual.num_queries {
        return shape_err(format!(
            "stylebook has {} rows, query set {}",
            stylebook.nrows(),
            dual.num_queries
        ));
    }
    dual.retrieve.check_shapes(
        source_content_emb.dim(),
        (dual.num_queries, dual.retrieve.in_dims()[1]),
        stylebook.dim(),
    )?;
    let mut tape = Tape::new(store);
    let c = tape.constant(source_content_emb.clone());
    let b = tape.constant(stylebook.clone());
    let (styles, weights) = dual.retrieve(&mut tape, c, b);
    let mut mean = Array2::<F>::zeros(tape.shape(weights[0]));
    for w in &weights {
        mean.scaled_add(F::one(), tape.value(*w));
    }
    mean.mapv_inplace(|v| v / F::of(weights.len() as f64));
    Ok((tape.value(styles).clone(), mean))
}

pub fn retrieve_styles<F: Scalar>(
    store: &ParamStore<F>,
    dual: &DualAttention,
    source_content_emb: &Array2<F>,
    stylebook: &Array2<F>,
) -> Result<Array2<F>> {
    Ok(retrieve_styles_with_weights(store, dual, source_content_emb, stylebook)?.0)
}

/// Per-class averaged retrieval attention and the cosine similarity between
/// class profiles.
#[derive(Clone, Debug)]
pub struct AttentionProfile {
    /// Classes that had at least one frame, ascending.
    pub classes: Vec<u32>,
    /// Classes in `0..num_classes` without frames.
    pub missing: Vec<u32>,
    /// `classes.len() × Q`, each row sums to 1.
    pub profiles: Array2<f64>,
    /// `classes.len() × classes.len()` cosine similarities.
    pub similarity: Array2<f64>,
}

/// Accumulates head-averaged attention rows per class.
#[derive(Clone, Debug)]
pub struct ProfileAccumulator {
    sums: Array2<f64>,
    counts: Vec<usize>,
}

impl ProfileAccumulator {
    pub fn new(num_classes: usize, num_queries: usize) -> Self {
        ProfileAccumulator {
            sums: Array2::zeros((num_classes, num_queries)),
            counts: vec![0; num_classes],
        }
    }

    pub fn add<F: Scalar>(&mut self, weights: &Array2<F>, labels: &[u32]) -> Result<()> {
        if weights.nrows() != labels.len() {
            return shape_err(format!(
                "{} attention rows, {} labels",
                weights.nrows(),
                labels.len()
            ));
        }
        if weights.ncols() != self.sums.ncols() {
            return shape_err("attention width does not match query count");
        }
        for (row, &l) in weights.rows().into_iter().zip(labels) {
            let l = l as usize;
            if l >= self.counts.len() {
                return Err(Error::InvalidArgument(format!("label {l} out of range")));
            }
            self.counts[l] += 1;
            for (s, &w) in self.sums.row_mut(l).iter_mut().zip(row) {
                *s += w.as_f64();
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> AttentionProfile {
        let classes: Vec<u32> = (0..self.counts.len())
            .filter(|&k| self.counts[k] > 0)
            .map(|k| k as u32)
            .collect();
        let missing = (0..self.counts.len())
            .filter(|&k| self.counts[k] == 0)
            .map(|k| k as u32)
            .collect();
        let q = self.sums.ncols();
        let mut profiles = Array2::zeros((classes.len(), q));
        for (i, &k) in classes.iter().enumerate() {
            let n = self.counts[k as usize] as f64;
            profiles
                .row_mut(i)
                .assign(&self.sums.row(k as usize).mapv(|v| v / n));
        }
        let similarity = cosine_matrix(&profiles);
        AttentionProfile {
            classes,
            missing,
            profiles,
            similarity,
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pairwise cosine similarity of rows; exactly symmetric with unit diagonal
/// for nonzero rows.
pub fn cosine_matrix(rows: &Array2<f64>) -> Array2<f64> {
    let n = rows.nrows();
    let mut sim = Array2::zeros((n, n));
    for i in 0..n {
        let ri = rows.row(i).to_vec();
        sim[[i, i]] = if ri.iter().any(|&v| v != 0.0) { 1.0 } else { 0.0 };
        for j in (i + 1)..n {
            let c = cosine(&ri, &rows.row(j).to_vec());
            sim[[i, j]] = c;
            sim[[j, i]] = c;
        }
    }
    sim
}

/// Class-averaged retrieval attention for one source utterance.
pub fn attention_profile<F: Scalar>(
    store: &ParamStore<F>,
    dual: &DualAttention,
    source_content_emb: &Array2<F>,
    stylebook: &Array2<F>,
    phone_labels: &[u32],
    num_classes: usize,
) -> Result<AttentionProfile> {
    let (_, weights) = retrieve_styles_with_weights(store, dual, source_content_emb, stylebook)?;
    let mut acc = ProfileAccumulator::new(num_classes, dual.num_queries);
    acc.add(&weights, phone_labels)?;
    Ok(acc.finish())
}

/// A stored target-speaker enrollment.
#[derive(Clone, Debug, PartialEq)]
pub struct Stylebook {
    /// `Q × d_s`
    pub entries: Array2<f32>,
    pub provenance: String,
}

pub const STYLEBOOK_MAGIC: [u8; 4] = *b"STBK";
pub const STYLEBOOK_VERSION: u32 = 1;
pub const STYLEBOOK_HEADER_LEN: usize = 24;

impl Stylebook {
    pub fn num_entries(&self) -> usize {
        self.entries.nrows()
    }

    pub fn style_dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Bytes of float payload, `Q · d_s · 4`.
    pub fn payload_bytes(&self) -> usize {
        self.entries.len() * 4
    }

    /// Header (magic, version, Q, d_s, flags, provenance length; all u32 LE
    /// after the magic), payload, provenance UTF-8.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (q, d) = self.entries.dim();
        let prov = self.provenance.as_bytes();
        let mut out = Vec::with_capacity(STYLEBOOK_HEADER_LEN + q * d * 4 + prov.len());
        out.extend_from_slice(&STYLEBOOK_MAGIC);
        for w in [STYLEBOOK_VERSION, q as u32, d as u32, 0, prov.len() as u32] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for v in self.entries.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(prov);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STYLEBOOK_HEADER_LEN || bytes[..4] != STYLEBOOK_MAGIC {
            return Err(Error::Format("not a stylebook file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != STYLEBOOK_VERSION {
            return Err(Error::Format(format!(
                "unsupported stylebook version {version}"
            )));
        }
        let (q, d, _flags, plen) = (
            word(8) as usize,
            word(12) as usize,
            word(16),
            word(20) as usize,
        );
        let end = STYLEBOOK_HEADER_LEN + q * d * 4;
        if bytes.len() != end + plen {
            return Err(Error::Format("stylebook length does not match header".into()));
        }
        let data = bytes[STYLEBOOK_HEADER_LEN..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let entries =
            Array2::from_shape_vec((q, d), data).map_err(|e| Error::Format(e.to_string()))?;
        let provenance = String::from_utf8(bytes[end..].to_vec())
            .map_err(|_| Error::Format("provenance is not UTF-8".into()))?;
        Ok(Stylebook {
            entries,
            provenance,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
