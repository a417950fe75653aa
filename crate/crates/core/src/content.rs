//! Content units and content embeddings.
//!
//! Continuous content features are discretized against a k-means codebook;
//! the resulting unit ids are embedded and passed through a small Transformer
//! encoder. The same encoder parameters serve source and target speech.

use std::collections::HashSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{sinusoidal_encoding, LayerNorm, Linear, TransformerLayer};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Learned k-means centroids, `K × content_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f32>,
}

/// Result of [`fit_codebook`].
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Total within-cluster squared distance measured at the assignment step
    /// of each Lloyd iteration; non-increasing.
    pub distortions: Vec<f64>,
}

impl Codebook {
    pub fn new(centroids: Array2<f32>) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(Error::InvalidArgument("codebook needs K >= 2".into()));
        }
        Ok(Codebook { centroids })
    }

    pub fn size(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Maps every frame to its nearest centroid (Euclidean; the lowest index
    /// wins ties).
    pub fn quantize(&self, features: &Array2<f32>) -> Result<Vec<usize>> {
        if features.ncols() != self.dim() {
            return shape_err(format!(
                "feature dim {} != codebook dim {}",
                features.ncols(),
                self.dim()
            ));
        }
        Ok(features
            .rows()
            .into_iter()
            .map(|f| nearest(&self.centroids, f.as_slice().unwrap_or(&f.to_vec())).0)
            .collect())
    }
}

/// Convenience wrapper for [`Codebook::quantize`].
pub fn quantize(codebook: &Codebook, features: &Array2<f32>) -> Result<Vec<usize>> {
    codebook.quantize(features)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &Array2<f32>, frame: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c.as_slice().unwrap(), frame);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Deterministic given `seed`.
pub fn fit_codebook(features: &Array2<f32>, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::InvalidArgument("K must be >= 2".into()));
    }
    let data = features.as_standard_layout();
    let rows: Vec<&[f32]> = data
        .rows()
        .into_iter()
        .map(|r| r.to_slice().unwrap())
        .collect();
    let distinct: HashSet<Vec<u32>> = rows
        .iter()
        .map(|r| r.iter().map(|x| x.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} distinct frames for K = {k}",
            distinct.len()
        )));
    }
    let dim = features.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = Array2::<f32>::zeros((k, dim));
    let first = rng.random_range(0..rows.len());
    centroids.row_mut(0).assign(&ndarray::aview1(rows[first]));
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, rows[first])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = d2.iter().rposition(|&d| d > 0.0).unwrap();
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            unreachable!("distinct-frame check guarantees positive mass")
        };
        centroids.row_mut(c).assign(&ndarray::aview1(rows[pick]));
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, rows[pick]));
        }
    }

    let mut assign = vec![usize::MAX; rows.len()];
    let mut distortions = Vec::with_capacity(iters);
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let (c, d) = nearest(&centroids, r);
            total += d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        distortions.push(total);
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            let c = assign[i];
            counts[c] += 1;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(r.iter()) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            // An empty cluster keeps its previous centroid.
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = (s / n) as f32;
                }
            }
        }
    }
    Ok(KMeansFit {
        codebook: Codebook { centroids },
        distortions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentEncoderConfig {
    pub num_units: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Width of the emitted content embeddings.
    pub out_dim: usize,
}

impl Default for ContentEncoderConfig {
    fn default() -> Self {
        ContentEncoderConfig {
            num_units: 100,
            model_dim: 128,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            out_dim: 256,
        }
    }
}

/// Unit embedding + sinusoidal positions + Transformer stack + projection.
#[derive(Clone, Debug)]
pub struct ContentEncoder {
    pub config: ContentEncoderConfig,
    embed: ParamId,
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
    out: Linear,
}

impl ContentEncoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        config: &ContentEncoderConfig,
        rng: &mut R,
    ) -> Self {
        // Stored at std 1/√d and multiplied by √d in the forward pass, so
        // rows start at unit scale but move √d times faster under Adam.
        let embed = store.add_normal(
            format!("{name}.embed"),
            (config.num_units, config.model_dim),
            1.0 / (config.model_dim as f64).sqrt(),
            rng,
        );
        let layers = (0..config.layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    &format!("{name}.layer{i}"),
                    config.model_dim,
                    config.heads,
                    config.ff_dim,
                    rng,
                )
            })
            .collect();
        ContentEncoder {
            config: config.clone(),
            embed,
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), config.model_dim),
            out: Linear::new(store, &format!("{name}.out"), config.model_dim, config.out_dim, rng),
        }
    }

    pub fn check_units(&self, units: &[usize]) -> Result<()> {
        if let Some(&u) = units.iter().find(|&&u| u >= self.config.num_units) {
            return Err(Error::InvalidArgument(format!(
                "unit id {u} out of range [0, {})",
                self.config.num_units
            )));
        }
        Ok(())
    }

    /// `T` unit ids → `T × out_dim` embeddings. Ids must be in range.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, units: &[usize]) -> Var {
        let table = tape.param(self.embed);
        let x = tape.gather(table, units);
        let x = tape.scale(x, F::of((self.config.model_dim as f64).sqrt()));
        let positions: Vec<f64> = (0..units.len()).map(|p| p as f64).collect();
        let pe = tape.constant(sinusoidal_encoding(&positions, self.config.model_dim));
        let mut h = tape.add(x, pe);
        for layer in &self.layers {
            h = layer.forward(tape, h);
        }
        let h = self.norm.forward(tape, h);
        self.out.forward(tape, h)
    }
}

/// Evaluates the encoder outside of training.
pub fn encode_content<F: Scalar>(
    store: &ParamStore<F>,
    encoder: &ContentEncoder,
    units: &[usize],
) -> Result<Array2<F>> {
    encoder.check_units(units)?;
    if units.is_empty() {
        return Err(Error::InsufficientData("empty unit sequence".into()));
    }
    let mut tape = Tape::new(store);
    let y = encoder.forward(&mut tape, units);
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quantize_exact_and_ties() {
        let cb = Codebook::new(Array2::from_shape_fn((8, 2), |(i, j)| (i * 10 + j) as f32)).unwrap();
        assert_eq!(cb.quantize(&array![[70.0, 71.0]]).unwrap(), vec![7]);
        assert_eq!(cb.quantize(&cb.centroids).unwrap(), (0..8).collect::<Vec<_>>());
        // midway between centroid 2 (20,21) and 5 (50,51)
        let cb2 = Codebook::new(array![[0.0, 0.0], [9.0, 9.0], [20.0, 21.0], [-9.0, 9.0], [9.0, -9.0], [50.0, 51.0]]).unwrap();
        assert_eq!(cb2.quantize(&array![[35.0, 36.0]]).unwrap(), vec![2]);
        assert!(cb.quantize(&array![[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn k_equal_distinct_frames_gives_zero_distortion() {
        let data = array![[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [5.0, 5.0]];
        let fit = fit_codebook(&data, 4, 10, 7).unwrap();
        assert_eq!(*fit.distortions.last().unwrap(), 0.0);
        let mut rows: Vec<Vec<f32>> = fit.codebook.centroids.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![5.0, 5.0]]);
    }

    #[test]
    fn too_few_distinct_frames() {
        let data = array![[1.0f32, 1.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(fit_codebook(&data, 3, 5, 0), Err(Error::InsufficientData(_))));
        assert!(fit_codebook(&data, 1, 5, 0).is_err());
    }

    #[test]
    fn encoder_rejects_out_of_range_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = ContentEncoderConfig { num_units: 5, model_dim: 8, layers: 1, heads: 2, ff_dim: 16, out_dim: 6 };
        let enc = ContentEncoder::new(&mut store, "enc", &cfg, &mut rng);
        assert!(encode_content(&store, &enc, &[0, 5]).is_err());
        assert_eq!(encode_content(&store, &enc, &[0, 4, 4]).unwrap().dim(), (3, 6));
    }
}
