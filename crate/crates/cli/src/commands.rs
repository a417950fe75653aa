use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::{concatenate, s, Array2, Axis};
use serde::Serialize;
use stylebook_core::checkpoint::{Checkpoint, CheckpointMeta};
use stylebook_core::config::RunConfig;
use stylebook_core::content::{fit_codebook, Codebook};
use stylebook_core::corpus::{generate_corpus, read_corpus, split_corpus, write_corpus, Utterance};
use stylebook_core::eval::{analyze_attention, evaluate, EvalReport};
use stylebook_core::knn::{bank_memory_bytes, knn_match, TargetBank};
use stylebook_core::matrix_io::{read_matrix, write_matrix};
use stylebook_core::memory::memory_table;
use stylebook_core::model::Model;
use stylebook_core::stylebook::Stylebook;
use stylebook_core::train::{prepare_examples, StepRecord, Trainer};

use crate::settings::{ensure_parent, Settings};
use crate::{
    AttentionArgs, Cli, Command, ConvertArgs, EnrollArgs, EvaluateArgs, FitUnitsArgs, KnnArgs, MemoryArgs, SynthArgs,
    TrainArgs,
};

const CORPUS_DIR: &str = "corpus";
const UNITS_FILE: &str = "units.sbmt";
const CHECKPOINT_FILE: &str = "checkpoint.sbck";

pub fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::resolve(&cli.global)?;
    match cli.command {
        Command::SynthCorpus(a) => synth_corpus(&mut settings, a),
        Command::FitUnits(a) => fit_units(&mut settings, a),
        Command::Train(a) => train(&mut settings, a),
        Command::Enroll(a) => enroll(&settings, a),
        Command::Convert(a) => convert(&settings, a),
        Command::BaselineKnn(a) => baseline_knn(&settings, a),
        Command::BenchMemory(a) => bench_memory(&settings, a),
        Command::Evaluate(a) => evaluate_cmd(&mut settings, a),
        Command::AnalyzeAttention(a) => analyze_attention_cmd(&settings, a),
    }
}

fn validated(cfg: &RunConfig) -> Result<()> {
    cfg.validate().context("invalid configuration")
}

/// Training and evaluation splits of a stored corpus.
fn load_split(settings: &Settings, dir: &Option<PathBuf>) -> Result<(Vec<Utterance>, Vec<Utterance>, usize)> {
    let dir = settings.path_or(dir, CORPUS_DIR);
    let (manifest, utts) = read_corpus(&dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    let (train, eval) = split_corpus(&utts, settings.config.corpus.train_fraction)?;
    Ok((train, eval, manifest.num_phone_classes))
}

fn load_checkpoint(settings: &Settings, path: &Option<PathBuf>) -> Result<Checkpoint> {
    let path = settings.path_or(path, CHECKPOINT_FILE);
    Checkpoint::read(&path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Content and mel columns of an utterance file.
fn read_frames(path: &Path, content_dim: usize, mel_dim: usize) -> Result<(Array2<f32>, Array2<f32>)> {
    let (m, _) = read_matrix(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        m.ncols() == content_dim + mel_dim,
        "{}: {} columns, expected {} content + {} mel",
        path.display(),
        m.ncols(),
        content_dim,
        mel_dim
    );
    Ok((m.slice(s![.., ..content_dim]).to_owned(), m.slice(s![.., content_dim..]).to_owned()))
}

fn synth_corpus(settings: &mut Settings, a: SynthArgs) -> Result<()> {
    if let Some(seed) = a.seed {
        settings.config.corpus.spec.seed = seed;
    }
    validated(&settings.config)?;
    let c = &settings.config.corpus;
    let utts = generate_corpus(&c.spec, c.utterances_per_speaker, c.frames_per_utterance)?;
    let out = settings.path_or(&a.out, CORPUS_DIR);
    write_corpus(&out, &c.spec, &utts).with_context(|| format!("writing corpus {}", out.display()))?;
    println!("wrote {} utterances to {}", utts.len(), out.display());
    Ok(())
}

fn fit_units(settings: &mut Settings, a: FitUnitsArgs) -> Result<()> {
    if let Some(k) = a.k {
        settings.config.units.k = k;
        settings.config.model.content.num_units = k;
    }
    validated(&settings.config)?;
    let (train, _, _) = load_split(settings, &a.corpus)?;
    let views: Vec<_> = train.iter().map(|u| u.content_features.view()).collect();
    let feats = concatenate(Axis(0), &views)?;
    let u = &settings.config.units;
    let fit = fit_codebook(&feats, u.k, u.iters, u.seed)?;
    let out = settings.path_or(&a.out, UNITS_FILE);
    ensure_parent(&out)?;
    write_matrix(&out, &fit.codebook.centroids, None)?;
    println!(
        "fitted {} units on {} frames (distortion {:.6}) -> {}",
        u.k,
        feats.nrows(),
        fit.distortions.last().copied().unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn loss_tsv(log: &[StepRecord]) -> String {
    let mut s = String::from("step\ttotal\tdiff\tenc\tgrad_norm\tlearning_rate\n");
    for r in log {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", r.step, r.total, r.diff, r.enc, r.grad_norm, r.learning_rate);
    }
    s
}

fn train(settings: &mut Settings, a: TrainArgs) -> Result<()> {
    let cfg = &mut settings.config;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    validated(cfg)?;
    let cfg = settings.config.clone();
    let (train, _, _) = load_split(settings, &a.corpus)?;
    let units_path = settings.path_or(&a.units, UNITS_FILE);
    let (centroids, _) =
        read_matrix(&units_path).with_context(|| format!("reading units {}", units_path.display()))?;
    let codebook = Codebook::new(centroids)?;
    ensure!(
        codebook.size() == cfg.model.content.num_units,
        "codebook has {} units, config expects {}",
        codebook.size(),
        cfg.model.content.num_units
    );
    let examples = prepare_examples(&codebook, &train)?;
    let model = Model::<f32>::new(&cfg.model, cfg.model_seed)?;
    let mut trainer = Trainer::new(model, examples, cfg.train.clone(), cfg.schedule.clone())?;

    let run_config = serde_json::to_value(&cfg)?;
    let snapshot = |t: &Trainer| Checkpoint {
        meta: CheckpointMeta {
            model: cfg.model.clone(),
            schedule: cfg.schedule.clone(),
            step: t.steps_done(),
            run_config: run_config.clone(),
            loss_log: t.log.clone(),
        },
        codebook: codebook.clone(),
        model: t.model.clone(),
    };
    let ckpt_dir = settings.run_dir.join("checkpoints");
    let every = cfg.train.checkpoint_every;
    trainer.run(|t, r| {
        if r.step % 100 == 0 || r.step == t.config.steps {
            println!(
                "step {:>6}  total {:.5}  diff {:.5}  enc {:.5}  grad norm {:.3}  lr {:.2e}",
                r.step, r.total, r.diff, r.enc, r.grad_norm, r.learning_rate
            );
        }
        if every > 0 && r.step % every == 0 && r.step < t.config.steps {
            fs::create_dir_all(&ckpt_dir)?;
            snapshot(t).write(&ckpt_dir.join(format!("step{:06}.sbck", r.step)))?;
        }
        Ok(())
    })?;

    let out = settings.path_or(&a.out, CHECKPOINT_FILE);
    ensure_parent(&out)?;
    snapshot(&trainer).write(&out)?;
    fs::write(settings.run_dir.join("loss.tsv"), loss_tsv(&trainer.log))?;
    fs::write(settings.run_dir.join("config.toml"), cfg.to_toml()?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn enroll(settings: &Settings, a: EnrollArgs) -> Result<()> {
    let ck = load_checkpoint(settings, &a.checkpoint)?;
    let (content_dim, mel_dim) = (ck.codebook.dim(), ck.meta.model.mel_dim);
    let (targets, provenance, out) = match a.speaker {
        Some(spk) => {
            let (_, eval, _) = load_split(settings, &a.corpus)?;
            let mine: Vec<&Utterance> = eval.iter().filter(|u| u.speaker_id == spk).collect();
            if mine.is_empty() {
                bail!("speaker {spk} has no evaluation utterances");
            }
            let t: Vec<_> = mine.iter().map(|u| (u.content_features.clone(), u.mel_frames.clone())).collect();
            let frames: usize = mine.iter().map(|u| u.len()).sum();
            let out = settings.path_or(&a.out, &format!("stylebooks/spk{spk:03}.stbk"));
            (t, format!("speaker {spk}: {} utterances, {frames} frames", mine.len()), out)
        }
        None => {
            let t = a
                .targets
                .iter()
                .map(|p| read_frames(p, content_dim, mel_dim))
                .collect::<Result<Vec<_>>>()?;
            let names: Vec<String> = a
                .targets
                .iter()
                .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()))
                .collect();
            (t, names.join(","), a.out.clone().expect("clap requires --out without --speaker"))
        }
    };
    let quantized = targets
        .into_iter()
        .map(|(c, m)| Ok((ck.codebook.quantize(&c)?, m)))
        .collect::<Result<Vec<_>>>()?;
    let entries = ck.model.enroll(&quantized)?;
    let book = Stylebook { entries, provenance };
    ensure_parent(&out)?;
    book.write(&out)?;
    println!(
        "enrolled {} x {} stylebook ({} payload bytes) -> {}",
        book.num_entries(),
        book.style_dim(),
        book.payload_bytes(),
        out.display()
    );
    Ok(())
}

fn convert(settings: &Settings, a: ConvertArgs) -> Result<()> {
    let ck = load_checkpoint(settings, &a.checkpoint)?;
    let mut schedule = ck.meta.schedule.clone();
    if let Some(n) = a.steps {
        schedule.steps = n;
    }
    if let Some(g) = a.guidance_style {
        schedule.guidance_scale_style = g;
    }
    schedule.validate()?;
    let book = Stylebook::read(&a.stylebook).with_context(|| format!("reading stylebook {}", a.stylebook.display()))?;
    let (q, ds) = (ck.model.net.dual.num_queries(), ck.model.net.dual.style_dim());
    ensure!(
        book.num_entries() == q && book.style_dim() == ds,
        "stylebook is {} x {}, checkpoint expects {q} x {ds}",
        book.num_entries(),
        book.style_dim()
    );
    let (content, _) = read_frames(&a.source, ck.codebook.dim(), ck.meta.model.mel_dim)?;
    let units = ck.codebook.quantize(&content)?;
    let seed = a.seed.unwrap_or(settings.config.sample_seed);
    let y = ck.model.convert(&units, &book.entries, &schedule, seed)?;
    ensure_parent(&a.out)?;
    write_matrix(&a.out, &y, None)?;
    println!("converted {} frames -> {}", y.nrows(), a.out.display());
    Ok(())
}

fn baseline_knn(settings: &Settings, a: KnnArgs) -> Result<()> {
    let spec = &settings.config.corpus.spec;
    let (cd, md) = (spec.content_dim, spec.mel_dim);
    let mels = a
        .targets
        .iter()
        .map(|p| Ok(read_frames(p, cd, md)?.1))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = mels.iter().map(|m| m.view()).collect();
    let bank = TargetBank::new(concatenate(Axis(0), &views)?);
    let (_, source) = read_frames(&a.source, cd, md)?;
    let y = knn_match(&bank, &source, a.k)?;
    ensure_parent(&a.out)?;
    write_matrix(&a.out, &y, None)?;
    if let Some(p) = &a.bank_out {
        ensure_parent(p)?;
        write_matrix(p, &bank.frames, None)?;
    }
    println!(
        "matched {} frames against a {}-frame bank ({} bytes) -> {}",
        y.nrows(),
        bank.len(),
        bank_memory_bytes(&bank),
        a.out.display()
    );
    Ok(())
}

fn bench_memory(settings: &Settings, a: MemoryArgs) -> Result<()> {
    let rows = memory_table(&a.seconds)?;
    let mut tsv = String::from("method\tseconds\tkib\n");
    for r in &rows {
        let _ = writeln!(tsv, "{}\t{}\t{}", r.method, r.seconds, r.kib);
    }
    let out = settings.path_or(&a.out, "memory.tsv");
    ensure_parent(&out)?;
    fs::write(&out, &tsv)?;
    print!("{tsv}");
    Ok(())
}

/// Evaluation report plus the training loss curve of the checkpoint.
#[derive(Serialize)]
struct EvaluationOutput<'a> {
    checkpoint_step: usize,
    report: &'a EvalReport,
    loss_curve: &'a [StepRecord],
}

fn evaluate_cmd(settings: &mut Settings, a: EvaluateArgs) -> Result<()> {
    if let Some(p) = a.pairs {
        settings.config.eval.pairs = p;
    }
    if let Some(s) = a.seed {
        settings.config.eval.seed = s;
    }
    let ck = load_checkpoint(settings, &a.checkpoint)?;
    let (_, eval, classes) = load_split(settings, &a.corpus)?;
    let report = evaluate(&ck.model, &ck.codebook, &eval, classes, &settings.config.eval, &ck.meta.schedule)?;
    ensure!(report.is_well_formed(), "evaluation produced out-of-range values");
    let out = settings.path_or(&a.out, "eval.json");
    ensure_parent(&out)?;
    let doc = EvaluationOutput {
        checkpoint_step: ck.meta.step,
        report: &report,
        loss_curve: &ck.meta.loss_log,
    };
    fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
    println!(
        "pairs {}  content accuracy {:.4}  target preference {:.4}  similarity to target {:.4} / source {:.4}",
        report.pairs.len(),
        report.content_accuracy,
        report.target_preference_rate,
        report.mean_similarity_to_target,
        report.mean_similarity_to_source
    );
    println!(
        "attention within {:.6}  between {:.6}  adjacent pair rank {}/{}  globally used entries {}",
        report.attention.within_class_similarity,
        report.attention.between_class_similarity,
        report.attention.adjacent_pair_rank,
        report.attention.off_diagonal_pairs,
        report.attention.globally_used_entries
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn matrix_tsv(row_labels: &[u32], col_prefix: &str, cols: &[String], m: &Array2<f64>) -> String {
    let mut s = String::from(col_prefix);
    for c in cols {
        s.push('\t');
        s.push_str(c);
    }
    s.push('\n');
    for (label, row) in row_labels.iter().zip(m.rows()) {
        let _ = write!(s, "{label}");
        for v in row {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

fn analyze_attention_cmd(settings: &Settings, a: AttentionArgs) -> Result<()> {
    let ck = load_checkpoint(settings, &a.checkpoint)?;
    let (_, eval, classes) = load_split(settings, &a.corpus)?;
    let analysis = analyze_attention(&ck.model, &ck.codebook, &eval, classes, (0, 1))?;
    let dir = settings.path_or(&a.out_dir, "attention");
    fs::create_dir_all(&dir)?;
    let entries: Vec<String> = (0..analysis.profiles.ncols()).map(|e| format!("e{e}")).collect();
    let class_cols: Vec<String> = analysis.classes.iter().map(|c| format!("c{c}")).collect();
    fs::write(dir.join("profiles.tsv"), matrix_tsv(&analysis.classes, "class", &entries, &analysis.profiles))?;
    fs::write(
        dir.join("similarity.tsv"),
        matrix_tsv(&analysis.classes, "class", &class_cols, &analysis.similarity),
    )?;
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&analysis.stats)? + "\n")?;
    let st = &analysis.stats;
    println!(
        "within {:.6}  between {:.6}  adjacent pair rank {}/{}  globally used entries {}",
        st.within_class_similarity,
        st.between_class_similarity,
        st.adjacent_pair_rank,
        st.off_diagonal_pairs,
        st.globally_used_entries
    );
    println!("wrote {}", dir.display());
    Ok(())
}
