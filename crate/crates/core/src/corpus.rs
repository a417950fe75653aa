//! Synthetic speech-feature corpus with known phone-class and speaker factors.
//!
//! Phone classes are Gaussian clusters around unit-norm centers in content
//! space. A speaker is an affine map from content space to mel space, applied
//! to the noiseless class center. Content features are therefore speaker
//! independent and mel frames carry both factors, which is what makes style
//! transfer measurable without pre-trained speech models.
//!
//! Classes 0 and 1 are generated with deliberately close centers (when the
//! corpus has at least two classes); the attention analysis expects them to
//! behave like a pair of phonetically similar phones.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_io::{read_matrix, write_matrix};

/// How speaker maps are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerMaps {
    /// Random well-conditioned linear map plus random bias.
    #[default]
    Random,
    /// Identity map without bias; requires `mel_dim == content_dim`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_phone_classes: usize,
    pub num_speakers: usize,
    pub content_dim: usize,
    pub mel_dim: usize,
    /// Frames per second.
    pub frame_rate: usize,
    /// Mean phone duration in frames.
    pub mean_phone_duration: f64,
    pub content_noise_sigma: f64,
    /// Mel noise is `mel_noise_ratio · content_noise_sigma`.
    pub mel_noise_ratio: f64,
    /// Center distance of the deliberately adjacent classes 0 and 1.
    pub adjacent_distance: f64,
    pub speaker_bias_std: f64,
    pub speaker_maps: SpeakerMaps,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_phone_classes: 10,
            num_speakers: 8,
            content_dim: 64,
            mel_dim: 64,
            frame_rate: 50,
            mean_phone_duration: 5.0,
            content_noise_sigma: 0.1,
            mel_noise_ratio: 0.5,
            adjacent_distance: 0.5,
            speaker_bias_std: 0.25,
            speaker_maps: SpeakerMaps::Random,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_phone_classes == 0 || self.num_speakers == 0 {
            return bad("phone classes and speakers must be >= 1");
        }
        if self.content_dim == 0 || self.mel_dim == 0 || self.frame_rate == 0 {
            return bad("dimensions and frame rate must be >= 1");
        }
        if !(self.mean_phone_duration >= 1.0) {
            return bad("mean phone duration must be >= 1 frame");
        }
        if !(self.content_noise_sigma >= 0.0) || !(self.mel_noise_ratio >= 0.0) {
            return bad("noise levels must be >= 0");
        }
        if !(self.speaker_bias_std >= 0.0) {
            return bad("speaker bias std must be >= 0");
        }
        if self.num_phone_classes >= 2
            && !(self.adjacent_distance >= 4.0 * self.content_noise_sigma
                && self.adjacent_distance > 0.0)
        {
            return bad("adjacent class distance must be >= 4 sigma and > 0");
        }
        if self.speaker_maps == SpeakerMaps::Identity && self.mel_dim != self.content_dim {
            return bad("identity speaker maps need mel_dim == content_dim");
        }
        Ok(())
    }

    pub fn mel_noise_sigma(&self) -> f64 {
        self.content_noise_sigma * self.mel_noise_ratio
    }
}

/// One synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `T × content_dim`
    pub content_features: Array2<f32>,
    /// `T × mel_dim`
    pub mel_frames: Array2<f32>,
    pub phone_labels: Vec<u32>,
    pub speaker_id: usize,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.phone_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phone_labels.is_empty()
    }

    /// Frames `start..end` as a new utterance.
    pub fn segment(&self, start: usize, end: usize) -> Utterance {
        use ndarray::s;
        Utterance {
            content_features: self.content_features.slice(s![start..end, ..]).to_owned(),
            mel_frames: self.mel_frames.slice(s![start..end, ..]).to_owned(),
            phone_labels: self.phone_labels[start..end].to_vec(),
            speaker_id: self.speaker_id,
        }
    }
}

/// Speaker-specific affine map `mel = map · center + bias`.
#[derive(Clone, Debug)]
pub struct SpeakerStyle {
    pub map: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Ground-truth generative factors of a corpus.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: CorpusSpec,
    /// `num_phone_classes × content_dim`, unit-norm rows.
    pub centers: Array2<f64>,
    pub speakers: Vec<SpeakerStyle>,
}

impl SyntheticWorld {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centers = draw_centers(spec, &mut rng);
        let speakers = (0..spec.num_speakers)
            .map(|_| draw_speaker(spec, &mut rng))
            .collect();
        Ok(SyntheticWorld {
            spec: spec.clone(),
            centers,
            speakers,
        })
    }

    /// Noiseless mel frame of `class` spoken by `speaker`.
    pub fn clean_mel(&self, speaker: usize, class: usize) -> Array1<f64> {
        let s = &self.speakers[speaker];
        s.map.dot(&self.centers.row(class)) + &s.bias
    }

    /// Index of the nearest class center (Euclidean, lowest index on ties).
    pub fn nearest_center(&self, frame: &[f32]) -> usize {
        nearest_row(&self.centers, frame)
    }
}

pub(crate) fn nearest_row(rows: &Array2<f64>, frame: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in rows.rows().into_iter().enumerate() {
        let d: f64 = c
            .iter()
            .zip(frame)
            .map(|(&a, &b)| (a - b as f64).powi(2))
            .sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn draw_centers<R: Rng + ?Sized>(spec: &CorpusSpec, rng: &mut R) -> Array2<f64> {
    let c = spec.num_phone_classes;
    let d = spec.content_dim;
    let min_sep = (4.0 * spec.content_noise_sigma).max(1e-9);
    let mut centers = Array2::zeros((c, d));
    if d == 1 {
        // Only ±1 exist on the unit sphere; spread along the line instead.
        for k in 0..c {
            centers[[k, 0]] = if c == 1 {
                1.0
            } else {
                -1.0 + 2.0 * k as f64 / (c - 1) as f64
            };
        }
        return centers;
    }
    for k in 0..c {
        let candidate = if k == 1 {
            // Rotate class 0 by the chord angle that gives the adjacent distance.
            let base = centers.row(0).to_owned();
            let mut dir = normal_vec(d, rng);
            dir = &dir - &(&base * base.dot(&dir));
            let dir = unit(dir);
            let half = (spec.adjacent_distance / 2.0).min(1.0).asin();
            let angle = 2.0 * half;
            &base * angle.cos() + &dir * angle.sin()
        } else {
            let mut tries = 0;
            loop {
                let v = unit(normal_vec(d, rng));
                let ok = (0..k).all(|j| {
                    let diff = &v - &centers.row(j);
                    diff.dot(&diff).sqrt() >= min_sep.max(spec.adjacent_distance)
                });
                tries += 1;
                if ok || tries > 1000 {
                    break v;
                }
            }
        };
        centers.row_mut(k).assign(&candidate);
    }
    centers
}

fn draw_speaker<R: Rng + ?Sized>(spec: &CorpusSpec, rng: &mut R) -> SpeakerStyle {
    let (m, d) = (spec.mel_dim, spec.content_dim);
    match spec.speaker_maps {
        SpeakerMaps::Identity => SpeakerStyle {
            map: Array2::eye(d),
            bias: Array1::zeros(m),
        },
        SpeakerMaps::Random => {
            let scale = 1.0 / (d as f64).sqrt();
            let g = DMatrix::from_fn(m, d, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            });
            let mut svd = g.svd(true, true);
            for s in svd.singular_values.iter_mut() {
                *s = s.clamp(0.5, 2.0);
            }
            let a = svd.recompose().expect("svd with u and v_t");
            let map = Array2::from_shape_fn((m, d), |(i, j)| a[(i, j)]);
            let bias = normal_vec(m, rng) * spec.speaker_bias_std;
            SpeakerStyle { map, bias }
        }
    }
}

/// Generates `utterances_per_speaker` utterances of `frames_per_utterance`
/// frames for every speaker. Identical spec and seed give identical output.
pub fn generate_corpus(
    spec: &CorpusSpec,
    utterances_per_speaker: usize,
    frames_per_utterance: usize,
) -> Result<Vec<Utterance>> {
    let world = SyntheticWorld::new(spec)?;
    generate_from_world(&world, utterances_per_speaker, frames_per_utterance)
}

pub fn generate_from_world(
    world: &SyntheticWorld,
    utterances_per_speaker: usize,
    frames_per_utterance: usize,
) -> Result<Vec<Utterance>> {
    if utterances_per_speaker == 0 || frames_per_utterance == 0 {
        return Err(Error::InvalidArgument(
            "utterance and frame counts must be >= 1".into(),
        ));
    }
    let spec = &world.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let durations = Geometric::new(1.0 / spec.mean_phone_duration)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let clean: Vec<Vec<Array1<f64>>> = (0..spec.num_speakers)
        .map(|s| {
            (0..spec.num_phone_classes)
                .map(|k| world.clean_mel(s, k))
                .collect()
        })
        .collect();
    let sigma = spec.content_noise_sigma;
    let mel_sigma = spec.mel_noise_sigma();
    let mut out = Vec::with_capacity(spec.num_speakers * utterances_per_speaker);
    for speaker in 0..spec.num_speakers {
        for _ in 0..utterances_per_speaker {
            let t = frames_per_utterance;
            let mut labels = Vec::with_capacity(t);
            let mut prev: Option<usize> = None;
            while labels.len() < t {
                let class = pick_class(spec.num_phone_classes, prev, &mut rng);
                let dur = 1 + durations.sample(&mut rng) as usize;
                for _ in 0..dur.min(t - labels.len()) {
                    labels.push(class as u32);
                }
                prev = Some(class);
            }
            let mut content = Array2::<f32>::zeros((t, spec.content_dim));
            let mut mel = Array2::<f32>::zeros((t, spec.mel_dim));
            for (i, &k) in labels.iter().enumerate() {
                let center = world.centers.row(k as usize);
                for (j, c) in content.row_mut(i).iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *c = (center[j] + sigma * z) as f32;
                }
                let m = &clean[speaker][k as usize];
                for (j, c) in mel.row_mut(i).iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *c = (m[j] + mel_sigma * z) as f32;
                }
            }
            out.push(Utterance {
                content_features: content,
                mel_frames: mel,
                phone_labels: labels,
                speaker_id: speaker,
            });
        }
    }
    Ok(out)
}

fn pick_class<R: Rng + ?Sized>(num_classes: usize, prev: Option<usize>, rng: &mut R) -> usize {
    match prev {
        Some(p) if num_classes > 1 => {
            let k = rng.random_range(0..num_classes - 1);
            if k >= p {
                k + 1
            } else {
                k
            }
        }
        _ => rng.random_range(0..num_classes),
    }
}

/// Splits by utterance so that every speaker appears in both partitions.
/// Per speaker, the first `round(n · fraction)` utterances (clamped to
/// `1..n`) go to the training side.
pub fn split_corpus(
    corpus: &[Utterance],
    train_fraction: f64,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let mut speakers: Vec<usize> = corpus.iter().map(|u| u.speaker_id).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for s in speakers {
        let utts: Vec<&Utterance> = corpus.iter().filter(|u| u.speaker_id == s).collect();
        let n = utts.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "speaker {s} has {n} utterance(s); at least 2 are needed to split"
            )));
        }
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        train.extend(utts[..n_train].iter().map(|u| (*u).clone()));
        eval.extend(utts[n_train..].iter().map(|u| (*u).clone()));
    }
    Ok((train, eval))
}

/// Manifest stored as `manifest.json` in a corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub content_dim: usize,
    pub mel_dim: usize,
    pub num_phone_classes: usize,
    pub spec: CorpusSpec,
    pub utterances: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub speaker_id: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one matrix file per utterance (content columns followed by mel
/// columns, phone labels in the label block) plus the manifest.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, utterances: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(utterances.len());
    let mut per_speaker = std::collections::BTreeMap::<usize, usize>::new();
    for u in utterances {
        let idx = per_speaker.entry(u.speaker_id).or_default();
        let file = format!("spk{:03}_utt{:04}.utt", u.speaker_id, idx);
        *idx += 1;
        let joined = ndarray::concatenate(
            ndarray::Axis(1),
            &[u.content_features.view(), u.mel_frames.view()],
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        write_matrix(&dir.join(&file), &joined, Some(&u.phone_labels))?;
        entries.push(ManifestEntry {
            file,
            speaker_id: u.speaker_id,
        });
    }
    let manifest = CorpusManifest {
        format: "stylebook-corpus".into(),
        version: 1,
        content_dim: spec.content_dim,
        mel_dim: spec.mel_dim,
        num_phone_classes: spec.num_phone_classes,
        spec: spec.clone(),
        utterances: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.format != "stylebook-corpus" {
        return Err(Error::Format(format!("unknown corpus format {}", m.format)));
    }
    Ok(m)
}

pub fn read_utterance(path: &Path, manifest: &CorpusManifest, speaker_id: usize) -> Result<Utterance> {
    use ndarray::s;
    let (m, labels) = read_matrix(path)?;
    let labels =
        labels.ok_or_else(|| Error::Format(format!("{}: missing labels", path.display())))?;
    if m.ncols() != manifest.content_dim + manifest.mel_dim {
        return Err(Error::Format(format!(
            "{}: {} columns, expected {}",
            path.display(),
            m.ncols(),
            manifest.content_dim + manifest.mel_dim
        )));
    }
    Ok(Utterance {
        content_features: m.slice(s![.., ..manifest.content_dim]).to_owned(),
        mel_frames: m.slice(s![.., manifest.content_dim..]).to_owned(),
        phone_labels: labels,
        speaker_id,
    })
}

pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<Utterance>)> {
    let manifest = read_manifest(dir)?;
    let utts = manifest
        .utterances
        .iter()
        .map(|e| read_utterance(&dir.join(&e.file), &manifest, e.speaker_id))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, utts))
}
