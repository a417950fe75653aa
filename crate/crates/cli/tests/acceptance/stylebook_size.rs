//! Enrollment from short and long targets yields identical storage, and
//! retrieval cost does not depend on how long the target was.

use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use ndarray::{concatenate, Axis};
use stylebook_core::content::fit_codebook;
use stylebook_core::corpus::{generate_corpus, CorpusSpec};
use stylebook_core::memory::KNN_FRAME_RATE;
use stylebook_core::model::{Model, ModelConfig};
use stylebook_core::stylebook::{Stylebook, STYLEBOOK_HEADER_LEN};

use crate::Outcome;

const UTTERANCE_FRAMES: usize = 250;

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

pub fn fixed_size(ctx: &crate::Context) -> Result<Outcome> {
    let dir = ctx.work.join("stylebook_size");
    std::fs::create_dir_all(&dir)?;
    let config = ModelConfig::default();
    let model = Model::<f32>::new(&config, 0)?;

    // Targets are whole utterances of one synthetic speaker, so the 5 min
    // target is 60 utterances of 250 frames.
    let seconds = [10.0, 60.0, 300.0];
    let longest = (seconds[2] * KNN_FRAME_RATE) as usize / UTTERANCE_FRAMES;
    let spec = CorpusSpec { num_speakers: 2, ..Default::default() };
    let utts: Vec<_> = generate_corpus(&spec, longest, UTTERANCE_FRAMES)?
        .into_iter()
        .filter(|u| u.speaker_id == 0)
        .collect();
    let views: Vec<_> = utts.iter().take(4).map(|u| u.content_features.view()).collect();
    let codebook = fit_codebook(&concatenate(Axis(0), &views)?, config.content.num_units, 10, 0)?.codebook;
    let quantized = utts
        .iter()
        .map(|u| Ok((codebook.quantize(&u.content_features)?, u.mel_frames.clone())))
        .collect::<Result<Vec<_>>>()?;
    let source = codebook.quantize(&utts[0].content_features)?;

    let mut sizes = Vec::new();
    let mut payloads = Vec::new();
    let mut timings = Vec::new();
    for s in seconds {
        let n = (s * KNN_FRAME_RATE) as usize / UTTERANCE_FRAMES;
        let entries = model.enroll(&quantized[..n])?;
        let book = Stylebook { entries, provenance: "synthetic speaker 0".into() };
        let path = dir.join(format!("target_{s}s.stbk"));
        book.write(&path)?;
        let read = Stylebook::read(&path)?;
        ensure!(read == book, "stylebook for {s} s did not round-trip");
        sizes.push(std::fs::metadata(&path)?.len());
        payloads.push(read.payload_bytes());

        model.retrieve(&source, &read.entries)?;
        let runs = (0..9)
            .map(|_| {
                let t = Instant::now();
                model.retrieve(&source, &read.entries).map(|_| t.elapsed())
            })
            .collect::<stylebook_core::Result<Vec<_>>>()?;
        timings.push(median(runs));
    }
    let same_size = sizes.iter().all(|&b| b == sizes[0]);
    let payload_ok = payloads.iter().all(|&p| p == 32_768)
        && sizes[0] as usize == STYLEBOOK_HEADER_LEN + 32_768 + "synthetic speaker 0".len();
    let fastest = timings.iter().min().copied().unwrap_or_default();
    let slowest = timings.iter().max().copied().unwrap_or_default();
    let ratio = slowest.as_secs_f64() / fastest.as_secs_f64().max(1e-12);
    Ok(Outcome::all(vec![
        Outcome::new(same_size, format!("file sizes {sizes:?} bytes")),
        Outcome::new(payload_ok, format!("payloads {payloads:?} bytes")),
        Outcome::new(
            ratio < 2.0,
            format!(
                "retrieval medians {:?} ms, ratio {ratio:.2}",
                timings.iter().map(|d| (d.as_secs_f64() * 1e4).round() / 10.0).collect::<Vec<_>>()
            ),
        ),
    ]))
}
