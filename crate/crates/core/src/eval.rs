//! Evaluation probes on the synthetic corpus.
//!
//! Style similarity is a proxy: each speaker is summarized by a signature of
//! mel statistics (per-dimension mean and variance), centered by the average
//! signature of all reference speakers, and compared by cosine similarity.
//! Content preservation is measured by a nearest-class-mean classifier fitted
//! on the target speaker's ground-truth frames and applied to converted
//! frames.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::content::Codebook;
use crate::corpus::{nearest_row, Utterance};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::memory::{memory_table, MemoryRow};
use crate::model::Model;
use crate::probe::{LinearProbe, ProbeOptions};
use crate::stylebook::{cosine, cosine_matrix, ProfileAccumulator};

/// `[mean | variance]` over frames.
pub fn signature(frames: ArrayView2<'_, f32>) -> Array1<f64> {
    let x = frames.mapv(|v| v as f64);
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let var = x.var_axis(Axis(0), 0.0);
    ndarray::concatenate(Axis(0), &[mean.view(), var.view()]).expect("same rank")
}

#[derive(Clone, Debug)]
struct SpeakerStats {
    signature: Array1<f64>,
    /// Mean ground-truth frame per class (only classes seen).
    class_means: Array2<f64>,
    class_ids: Vec<u32>,
}

/// Ground-truth signatures and per-class frame means for every speaker.
#[derive(Clone, Debug)]
pub struct SpeakerReference {
    center: Array1<f64>,
    speakers: BTreeMap<usize, SpeakerStats>,
}

impl SpeakerReference {
    pub fn new(utterances: &[Utterance], num_classes: usize) -> Result<Self> {
        let mut by_speaker: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
        for u in utterances {
            by_speaker.entry(u.speaker_id).or_default().push(u);
        }
        if by_speaker.is_empty() {
            return Err(Error::InsufficientData("no reference utterances".into()));
        }
        let mut speakers = BTreeMap::new();
        for (&s, utts) in &by_speaker {
            let views: Vec<_> = utts.iter().map(|u| u.mel_frames.view()).collect();
            let frames = ndarray::concatenate(Axis(0), &views)
                .map_err(|e| Error::Shape(e.to_string()))?;
            let labels: Vec<u32> = utts.iter().flat_map(|u| u.phone_labels.iter().copied()).collect();
            let dim = frames.ncols();
            let mut sums = Array2::<f64>::zeros((num_classes, dim));
            let mut counts = vec![0usize; num_classes];
            for (row, &l) in frames.rows().into_iter().zip(&labels) {
                let l = l as usize;
                if l >= num_classes {
                    return Err(Error::InvalidArgument(format!("label {l} out of range")));
                }
                counts[l] += 1;
                sums.row_mut(l).zip_mut_with(&row, |a, &b| *a += b as f64);
            }
            let class_ids: Vec<u32> = (0..num_classes).filter(|&k| counts[k] > 0).map(|k| k as u32).collect();
            let mut class_means = Array2::zeros((class_ids.len(), dim));
            for (i, &k) in class_ids.iter().enumerate() {
                let n = counts[k as usize] as f64;
                class_means.row_mut(i).assign(&sums.row(k as usize).mapv(|v| v / n));
            }
            speakers.insert(
                s,
                SpeakerStats {
                    signature: signature(frames.view()),
                    class_means,
                    class_ids,
                },
            );
        }
        let n = speakers.len() as f64;
        let mut center = Array1::zeros(speakers.values().next().unwrap().signature.len());
        for st in speakers.values() {
            center += &st.signature;
        }
        center /= n;
        Ok(SpeakerReference { center, speakers })
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.speakers.keys().copied().collect()
    }

    fn stats(&self, speaker: usize) -> Result<&SpeakerStats> {
        self.speakers
            .get(&speaker)
            .ok_or_else(|| Error::InvalidArgument(format!("speaker {speaker} not in reference")))
    }

    /// Cosine similarity between the centered signature of `frames` and the
    /// centered ground-truth signature of `speaker`.
    pub fn style_similarity(&self, frames: ArrayView2<'_, f32>, speaker: usize) -> Result<f64> {
        let sig = signature(frames) - &self.center;
        let reference = &self.stats(speaker)?.signature - &self.center;
        Ok(cosine(sig.as_slice().unwrap(), reference.as_slice().unwrap()))
    }

    /// Nearest class mean of `speaker` for every frame.
    pub fn classify(&self, frames: ArrayView2<'_, f32>, speaker: usize) -> Result<Vec<u32>> {
        let st = self.stats(speaker)?;
        Ok(frames
            .rows()
            .into_iter()
            .map(|r| {
                let r = r.to_vec();
                st.class_ids[nearest_row(&st.class_means, &r)]
            })
            .collect())
    }
}

pub fn frame_accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { pairs: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub source_utterance: usize,
    pub source_speaker: usize,
    pub target_speaker: usize,
    pub similarity_to_target: f64,
    pub similarity_to_source: f64,
    pub content_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub within_class_similarity: f64,
    pub between_class_similarity: f64,
    /// Entries whose weight exceeds `1/Q` for at least 90% of classes.
    pub globally_used_entries: usize,
    /// 1-based rank of the adjacent class pair among unordered off-diagonal
    /// pairs sorted by descending similarity.
    pub adjacent_pair_rank: usize,
    pub off_diagonal_pairs: usize,
}

impl AttentionStats {
    pub fn adjacent_in_top_decile(&self) -> bool {
        let cutoff = (self.off_diagonal_pairs as f64 * 0.1).ceil().max(1.0) as usize;
        self.adjacent_pair_rank <= cutoff
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairResult>,
    /// Mean frame accuracy of the content probe over all pairs.
    pub content_accuracy: f64,
    pub mean_similarity_to_target: f64,
    pub mean_similarity_to_source: f64,
    /// Fraction of pairs with similarity-to-target above similarity-to-source.
    pub target_preference_rate: f64,
    pub attention: AttentionStats,
    pub memory: Vec<MemoryRow>,
}

impl EvalReport {
    /// Every similarity lies in `[-1, 1]`, every fraction in `[0, 1]`, and
    /// all values are finite.
    pub fn is_well_formed(&self) -> bool {
        let sim = |v: f64| v.is_finite() && (-1.0..=1.0).contains(&v);
        let frac = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        frac(self.content_accuracy)
            && frac(self.target_preference_rate)
            && sim(self.mean_similarity_to_target)
            && sim(self.mean_similarity_to_source)
            && sim(self.attention.within_class_similarity)
            && sim(self.attention.between_class_similarity)
            && self.pairs.iter().all(|p| {
                sim(p.similarity_to_target) && sim(p.similarity_to_source) && frac(p.content_accuracy)
            })
            && self.memory.iter().all(|m| m.kib.is_finite() && m.kib >= 0.0)
    }
}

/// Source/target combinations across distinct speakers: every utterance
/// against every other speaker, shuffled by `seed` and truncated to `pairs`.
pub fn select_pairs(utterances: &[Utterance], pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut speakers: Vec<usize> = utterances.iter().map(|u| u.speaker_id).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(Error::InsufficientData("evaluation needs at least 2 speakers".into()));
    }
    let mut all = Vec::new();
    for (i, u) in utterances.iter().enumerate() {
        for &s in &speakers {
            if s != u.speaker_id {
                all.push((i, s));
            }
        }
    }
    if all.len() < pairs || pairs == 0 {
        return Err(Error::InsufficientData(format!(
            "{pairs} pairs requested, {} available",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(pairs);
    all.sort_unstable();
    Ok(all)
}

/// Stylebooks for every speaker, enrolled from all of that speaker's
/// utterances.
pub fn enroll_speakers(
    model: &Model<f32>,
    codebook: &Codebook,
    utterances: &[Utterance],
) -> Result<BTreeMap<usize, Array2<f32>>> {
    let mut by_speaker: BTreeMap<usize, Vec<(Vec<usize>, Array2<f32>)>> = BTreeMap::new();
    for u in utterances {
        by_speaker
            .entry(u.speaker_id)
            .or_default()
            .push((codebook.quantize(&u.content_features)?, u.mel_frames.clone()));
    }
    by_speaker
        .into_iter()
        .map(|(s, targets)| Ok((s, model.enroll(&targets)?)))
        .collect()
}

/// Retrieval attention profiles over a set of utterances.
#[derive(Clone, Debug)]
pub struct AttentionAnalysis {
    pub classes: Vec<u32>,
    /// Pooled `C × Q` class profiles.
    pub profiles: Array2<f64>,
    /// `C × C` cosine similarity of pooled profiles.
    pub similarity: Array2<f64>,
    pub stats: AttentionStats,
}

/// Profiles are computed per utterance; within-class similarity compares the
/// same class across different utterances, between-class similarity compares
/// different classes across all utterance pairs.
pub fn analyze_attention(
    model: &Model<f32>,
    codebook: &Codebook,
    utterances: &[Utterance],
    num_classes: usize,
    adjacent: (u32, u32),
) -> Result<AttentionAnalysis> {
    if utterances.is_empty() {
        return Err(Error::InsufficientData("no utterances to analyze".into()));
    }
    let q = model.net.dual.num_queries();
    let zero_book = Array2::<f32>::zeros((q, model.net.dual.style_dim()));
    let mut pooled = ProfileAccumulator::new(num_classes, q);
    let mut per_utt = Vec::with_capacity(utterances.len());
    for u in utterances {
        let units = codebook.quantize(&u.content_features)?;
        let (_, _, w) = model.retrieve(&units, &zero_book)?;
        pooled.add(&w, &u.phone_labels)?;
        let mut acc = ProfileAccumulator::new(num_classes, q);
        acc.add(&w, &u.phone_labels)?;
        per_utt.push(acc.finish());
    }
    let pooled = pooled.finish();

    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (a, pa) in per_utt.iter().enumerate() {
        for (b, pb) in per_utt.iter().enumerate() {
            for (i, &ci) in pa.classes.iter().enumerate() {
                for (j, &cj) in pb.classes.iter().enumerate() {
                    if ci == cj && a == b {
                        continue;
                    }
                    let c = cosine(
                        pa.profiles.row(i).as_slice().unwrap(),
                        pb.profiles.row(j).as_slice().unwrap(),
                    );
                    if ci == cj {
                        within += c;
                        nw += 1;
                    } else {
                        between += c;
                        nb += 1;
                    }
                }
            }
        }
    }

    let similarity = cosine_matrix(&pooled.profiles);
    let ncls = pooled.classes.len();
    let threshold = 1.0 / q as f64;
    let globally_used_entries = (0..q)
        .filter(|&e| {
            let above = (0..ncls).filter(|&c| pooled.profiles[[c, e]] > threshold).count();
            ncls > 0 && above as f64 >= 0.9 * ncls as f64
        })
        .count();

    let mut off: Vec<(f64, u32, u32)> = Vec::new();
    for i in 0..ncls {
        for j in (i + 1)..ncls {
            off.push((similarity[[i, j]], pooled.classes[i], pooled.classes[j]));
        }
    }
    off.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (lo, hi) = (adjacent.0.min(adjacent.1), adjacent.0.max(adjacent.1));
    let adjacent_pair_rank = off
        .iter()
        .position(|&(_, a, b)| a == lo && b == hi)
        .map(|p| p + 1)
        .ok_or_else(|| Error::InsufficientData("adjacent classes not both present".into()))?;

    Ok(AttentionAnalysis {
        classes: pooled.classes,
        profiles: pooled.profiles,
        similarity,
        stats: AttentionStats {
            within_class_similarity: if nw > 0 { within / nw as f64 } else { 0.0 },
            between_class_similarity: if nb > 0 { between / nb as f64 } else { 0.0 },
            globally_used_entries,
            adjacent_pair_rank,
            off_diagonal_pairs: off.len(),
        },
    })
}

/// Converts sampled cross-speaker pairs and scores them.
pub fn evaluate(
    model: &Model<f32>,
    codebook: &Codebook,
    utterances: &[Utterance],
    num_classes: usize,
    config: &EvalConfig,
    schedule: &DiffusionSchedule,
) -> Result<EvalReport> {
    let pairs = select_pairs(utterances, config.pairs, config.seed)?;
    let reference = SpeakerReference::new(utterances, num_classes)?;
    let books = enroll_speakers(model, codebook, utterances)?;
    let mut results = Vec::with_capacity(pairs.len());
    let mut units_cache: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, &(ui, target)) in pairs.iter().enumerate() {
        let u = &utterances[ui];
        let units = match units_cache.get(&ui) {
            Some(v) => v.clone(),
            None => {
                let v = codebook.quantize(&u.content_features)?;
                units_cache.insert(ui, v.clone());
                v
            }
        };
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(n as u64);
        let converted = model.convert(&units, &books[&target], schedule, seed)?;
        let pred = reference.classify(converted.view(), target)?;
        results.push(PairResult {
            source_utterance: ui,
            source_speaker: u.speaker_id,
            target_speaker: target,
            similarity_to_target: reference.style_similarity(converted.view(), target)?,
            similarity_to_source: reference.style_similarity(converted.view(), u.speaker_id)?,
            content_accuracy: frame_accuracy(&pred, &u.phone_labels),
        });
    }
    let n = results.len() as f64;
    let attention = analyze_attention(model, codebook, utterances, num_classes, (0, 1))?.stats;
    Ok(EvalReport {
        content_accuracy: results.iter().map(|p| p.content_accuracy).sum::<f64>() / n,
        mean_similarity_to_target: results.iter().map(|p| p.similarity_to_target).sum::<f64>() / n,
        mean_similarity_to_source: results.iter().map(|p| p.similarity_to_source).sum::<f64>() / n,
        target_preference_rate: results
            .iter()
            .filter(|p| p.similarity_to_target > p.similarity_to_source)
            .count() as f64
            / n,
        pairs: results,
        attention,
        memory: memory_table(&[10.0, 60.0, 300.0])?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub phone_accuracy: f64,
    pub speaker_accuracy: f64,
    pub speaker_chance: f64,
}

/// Linear probes on frozen content embeddings: phone class and speaker id,
/// fitted on `train` and scored on `test`.
pub fn disentanglement_probe(
    model: &Model<f32>,
    codebook: &Codebook,
    train: &[Utterance],
    test: &[Utterance],
    num_classes: usize,
) -> Result<DisentanglementReport> {
    let embed = |utts: &[Utterance]| -> Result<(Array2<f64>, Vec<usize>, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut phones = Vec::new();
        let mut speakers = Vec::new();
        for u in utts {
            let c = model.content_embeddings(&codebook.quantize(&u.content_features)?)?;
            rows.push(c.mapv(|v| v as f64));
            phones.extend(u.phone_labels.iter().map(|&l| l as usize));
            speakers.extend(std::iter::repeat_n(u.speaker_id, u.len()));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok((x, phones, speakers))
    };
    let (xtr, ptr, str_) = embed(train)?;
    let (xte, pte, ste) = embed(test)?;
    let num_speakers = str_.iter().chain(&ste).max().map_or(0, |m| m + 1);
    let opts = ProbeOptions::default();
    let phone = LinearProbe::fit(&xtr, &ptr, num_classes, opts)?;
    let speaker = LinearProbe::fit(&xtr, &str_, num_speakers, opts)?;
    let mut distinct = ste.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(DisentanglementReport {
        phone_accuracy: phone.accuracy(&xte, &pte)?,
        speaker_accuracy: speaker.accuracy(&xte, &ste)?,
        speaker_chance: 1.0 / distinct.len() as f64,
    })
}
