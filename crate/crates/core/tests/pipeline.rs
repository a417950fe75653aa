//! Corpus, content units, stylebook enrollment, memory model and training
//! loop behavior.

use ndarray::{concatenate, Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use stylebook_core::content::{fit_codebook, Codebook};
use stylebook_core::corpus::{generate_corpus, generate_from_world, CorpusSpec, SyntheticWorld};
use stylebook_core::diffusion::{standard_normal, DiffusionSchedule};
use stylebook_core::memory::{memory_model, memory_table, Method};
use stylebook_core::model::{tiny_config, Model};
use stylebook_core::stylebook::{build_stylebook, encode_style, retrieve_styles, DualAttention, StyleConfig, StyleEncoder, Stylebook};
use stylebook_core::train::{moving_average, prepare_examples, TrainConfig, Trainer};
use stylebook_core::ParamStore;

fn small_spec() -> CorpusSpec {
    CorpusSpec { num_speakers: 3, content_dim: 8, mel_dim: 8, ..Default::default() }
}

#[test]
fn content_frames_sit_nearest_their_own_center() {
    let spec = CorpusSpec::default();
    let world = SyntheticWorld::new(&spec).unwrap();
    let utts = generate_from_world(&world, 2, 250).unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for u in &utts {
        for (row, &l) in u.content_features.rows().into_iter().zip(&u.phone_labels) {
            hit += (world.nearest_center(row.as_slice().unwrap()) == l as usize) as usize;
            total += 1;
        }
    }
    assert!(hit as f64 / total as f64 >= 0.99, "{hit}/{total}");
}

fn corpus_digest(spec: &CorpusSpec) -> String {
    let mut h = Sha256::new();
    for u in generate_corpus(spec, 2, 40).unwrap() {
        for v in u.content_features.iter().chain(u.mel_frames.iter()) {
            h.update(v.to_le_bytes());
        }
        for l in &u.phone_labels {
            h.update(l.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[test]
fn corpus_generation_is_deterministic() {
    let spec = small_spec();
    assert_eq!(corpus_digest(&spec), corpus_digest(&spec));
    let other = CorpusSpec { seed: 1, ..spec.clone() };
    assert_ne!(corpus_digest(&spec), corpus_digest(&other));
}

#[test]
fn speaker_factor_dominates_mel_noise() {
    // Mean over frames of one class differs between speakers by far more
    // than the per-frame mel noise.
    let spec = CorpusSpec::default();
    let world = SyntheticWorld::new(&spec).unwrap();
    let sigma = spec.mel_noise_sigma();
    for k in 0..spec.num_phone_classes {
        let a = world.clean_mel(0, k);
        let b = world.clean_mel(1, k);
        let dist = (&a - &b).mapv(|v| v * v).sum().sqrt();
        assert!(dist > 10.0 * sigma, "class {k}: {dist}");
    }
}

#[test]
fn kmeans_recovers_three_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers = [[0.0f32, 0.0], [5.0, 5.0], [-5.0, 5.0]];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        let noise: Array2<f32> = standard_normal((200, 2), &mut rng);
        for r in noise.rows() {
            rows.push([center[0] + 0.5 * r[0], center[1] + 0.5 * r[1]]);
            labels.push(c);
        }
    }
    let x = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]);
    let fit = fit_codebook(&x, 3, 50, 0).unwrap();
    for w in fit.distortions.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9));
    }
    let units = fit.codebook.quantize(&x).unwrap();
    // Map each unit to its majority label, then score.
    let mut votes = [[0usize; 3]; 3];
    for (&u, &l) in units.iter().zip(&labels) {
        votes[u][l] += 1;
    }
    let correct: usize = votes.iter().map(|v| *v.iter().max().unwrap()).sum();
    assert!(correct as f64 / labels.len() as f64 >= 0.99);
}

#[test]
fn quantization_errors_on_dimension_mismatch() {
    let cb = Codebook::new(Array2::from_shape_fn((3, 2), |(i, j)| (i + j) as f32)).unwrap();
    assert!(cb.quantize(&Array2::zeros((4, 3))).is_err());
    assert!(Codebook::new(Array2::zeros((1, 2))).is_err());
}

#[test]
fn untrained_content_encoder_separates_sequences() {
    let model = Model::<f32>::new(&tiny_config(3, 5), 1).unwrap();
    let a = model.content_embeddings(&[0, 1, 2, 3]).unwrap();
    let b = model.content_embeddings(&[4, 4, 1, 0]).unwrap();
    assert_eq!(a.dim(), b.dim());
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-4));
    assert!(model.content_embeddings(&[5]).is_err());
}

fn style_setup() -> (ParamStore<f64>, StyleEncoder, DualAttention, StyleConfig) {
    let cfg = StyleConfig {
        mel_hidden: 6,
        style_channels: 6,
        kernel: 3,
        num_queries: 8,
        query_dim: 6,
        attn_dim: 8,
        attn_heads: 2,
        style_dim: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let enc = StyleEncoder::new(&mut store, 3, 5, &cfg, &mut rng);
    let dual = DualAttention::new(&mut store, 5, enc.out_dim(), &cfg, &mut rng);
    (store, enc, dual, cfg)
}

#[test]
fn style_encoder_is_length_preserving_and_local() {
    let (store, enc, _, _) = style_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mel: Array2<f64> = standard_normal((40, 3), &mut rng);
    let content: Array2<f64> = standard_normal((40, 5), &mut rng);
    let base = encode_style(&store, &enc, &mel, &content).unwrap();
    assert_eq!(base.nrows(), 40);
    // Three kernel-3 layers see at most three frames either side.
    let mut bumped = mel.clone();
    bumped[[20, 0]] += 1.0;
    let moved = encode_style(&store, &enc, &bumped, &content).unwrap();
    for t in 0..40 {
        let changed = (0..base.ncols()).any(|j| (base[[t, j]] - moved[[t, j]]).abs() > 0.0);
        if (t as i64 - 20).abs() > 3 {
            assert!(!changed, "frame {t} changed");
        }
    }
    assert!((17..=23).any(|t| (0..base.ncols()).any(|j| base[[t, j]] != moved[[t, j]])));
}

#[test]
fn stylebook_size_is_independent_of_target_length() {
    let (store, enc, dual, cfg) = style_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let src: Array2<f64> = standard_normal((30, 5), &mut rng);
    let mut sizes = Vec::new();
    for t in [50, 500, 5000, 15000] {
        let mel: Array2<f64> = standard_normal((t, 3), &mut rng);
        let content: Array2<f64> = standard_normal((t, 5), &mut rng);
        let style = encode_style(&store, &enc, &mel, &content).unwrap();
        let book = build_stylebook(&store, &dual, &content, &style).unwrap();
        assert_eq!(book.dim(), (cfg.num_queries, cfg.style_dim));
        let file = Stylebook { entries: book.mapv(|v| v as f32), provenance: format!("t={t}") };
        sizes.push(file.payload_bytes());
        let styles = retrieve_styles(&store, &dual, &src, &book).unwrap();
        assert_eq!(styles.dim(), (30, cfg.style_dim));
    }
    assert!(sizes.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(sizes[0], cfg.num_queries * cfg.style_dim * 4);
}

#[test]
fn stylebook_file_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spk.stbk");
    let book = Stylebook {
        entries: Array2::from_shape_fn((128, 64), |(i, j)| (i * 64 + j) as f32 * 0.01),
        provenance: "speaker 3".into(),
    };
    book.write(&path).unwrap();
    assert_eq!(Stylebook::read(&path).unwrap(), book);
    assert_eq!(book.payload_bytes(), 32_768);
    let mut bytes = book.to_bytes();
    bytes[0] = b'X';
    assert!(Stylebook::from_bytes(&bytes).is_err());
    let bytes = book.to_bytes();
    assert!(Stylebook::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stylebook_bytes_roundtrip(q in 1usize..12, d in 1usize..9, seed in any::<u64>(), prov in "[a-z0-9 ]{0,20}") {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let book = Stylebook { entries: standard_normal((q, d), &mut rng), provenance: prov };
        prop_assert_eq!(Stylebook::from_bytes(&book.to_bytes()).unwrap(), book);
    }

    #[test]
    fn quantizing_centroids_is_identity(k in 2usize..10, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centroids: Array2<f32> = standard_normal((k, d), &mut rng);
        let cb = Codebook::new(centroids.clone()).unwrap();
        let units = cb.quantize(&centroids).unwrap();
        let rebuilt = Array2::from_shape_fn((k, d), |(i, j)| centroids[[units[i], j]]);
        prop_assert_eq!(cb.quantize(&rebuilt).unwrap(), units);
    }

    #[test]
    fn retrieval_preserves_source_length(t in 1usize..60, seed in any::<u64>()) {
        let (store, _, dual, cfg) = style_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Array2<f64> = standard_normal((t, 5), &mut rng);
        let book: Array2<f64> = standard_normal((cfg.num_queries, cfg.style_dim), &mut rng);
        prop_assert_eq!(retrieve_styles(&store, &dual, &src, &book).unwrap().nrows(), t);
    }
}

#[test]
fn memory_table_values() {
    let table = memory_table(&[10.0, 60.0, 300.0]).unwrap();
    assert_eq!(table.len(), 15);
    for row in &table {
        let want = match (row.method, row.seconds as u32) {
            (Method::Yourtts, _) => 2.0,
            (Method::Freevc, _) => 1.0,
            (Method::Diffvc, _) => 1.5,
            (Method::Proposed, _) => 32.0,
            (Method::Knnvc, 10) => 2_000.0,
            (Method::Knnvc, 60) => 12_000.0,
            (Method::Knnvc, 300) => 60_000.0,
            other => panic!("unexpected row {other:?}"),
        };
        assert_eq!(row.kib, want);
    }
    assert!(memory_model(Method::Knnvc, -1.0).is_err());
    assert_eq!("KNNVC".parse::<Method>().unwrap(), Method::Knnvc);
    assert!("wavenet".parse::<Method>().is_err());
}

fn tiny_trainer(seed: u64, steps: usize, lr: f64) -> Trainer {
    let spec = CorpusSpec {
        num_speakers: 2,
        content_dim: 4,
        mel_dim: 3,
        num_phone_classes: 3,
        ..Default::default()
    };
    let utts = generate_corpus(&spec, 3, 40).unwrap();
    let views: Vec<_> = utts.iter().map(|u| u.content_features.view()).collect();
    let feats = concatenate(Axis(0), &views).unwrap();
    let cb = fit_codebook(&feats, 5, 20, 0).unwrap().codebook;
    let examples = prepare_examples(&cb, &utts).unwrap();
    let model = Model::<f32>::new(&tiny_config(3, 5), seed).unwrap();
    let cfg = TrainConfig { steps, batch_size: 4, segment_frames: 16, learning_rate: lr, seed, checkpoint_every: 0, ..Default::default() };
    Trainer::new(model, examples, cfg, DiffusionSchedule::default()).unwrap()
}

#[test]
fn training_lowers_the_loss() {
    let mut tr = tiny_trainer(0, 200, 1e-2);
    tr.run(|_, _| Ok(())).unwrap();
    assert_eq!(tr.steps_done(), 200);
    let early = moving_average(&tr.log, 0, 20);
    let late = moving_average(&tr.log, 180, 20);
    assert!(late < early, "{early} -> {late}");
    assert!(tr.log.iter().all(|r| r.total.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut tr = tiny_trainer(3, 10, 1e-3);
        tr.run(|_, _| Ok(())).unwrap();
        (tr.log.clone(), tr.model.params.value(tr.model.params.ids().next().unwrap()).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_corpus_is_rejected() {
    let model = Model::<f32>::new(&tiny_config(3, 5), 0).unwrap();
    assert!(Trainer::new(model, Vec::new(), TrainConfig::default(), DiffusionSchedule::default()).is_err());
}
