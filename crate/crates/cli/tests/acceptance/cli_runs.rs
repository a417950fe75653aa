//! Criteria that drive the `stylebook` binary: the default training run,
//! its evaluation and attention analysis, and rerun determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context as _, Result};
use serde_json::Value;

use crate::Outcome;

const BIN: &str = env!("CARGO_BIN_EXE_stylebook");
const TRAINING_LIMIT: Duration = Duration::from_secs(30 * 60);
const ANALYSIS_LIMIT: Duration = Duration::from_secs(2 * 60);

/// Runs one subcommand with `run_dir` passed through the environment.
fn stylebook(run_dir: &Path, args: &[&str]) -> Result<String> {
    let out = Command::new(BIN)
        .args(args)
        .env("STYLEBOOK_RUN_DIR", run_dir)
        .output()
        .with_context(|| format!("spawning {BIN}"))?;
    if !out.status.success() {
        bail!("stylebook {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

pub struct TrainedRun {
    pub dir: PathBuf,
    pub elapsed: Duration,
}

/// Corpus, codebook and a default-config training run.
pub fn default_training(work: &Path) -> Result<TrainedRun> {
    let dir = work.join("default_run");
    let start = Instant::now();
    stylebook(&dir, &["synth-corpus"])?;
    stylebook(&dir, &["fit-units"])?;
    stylebook(&dir, &["train"])?;
    Ok(TrainedRun { dir, elapsed: start.elapsed() })
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn number(v: &Value, key: &str) -> Result<f64> {
    v[key].as_f64().with_context(|| format!("{key} missing"))
}

pub fn end_to_end(ctx: &crate::Context) -> Result<Outcome> {
    let run = ctx.trained().map_err(anyhow::Error::msg)?;
    stylebook(&run.dir, &["evaluate"])?;
    let doc = read_json(&run.dir.join("eval.json"))?;
    let report = &doc["report"];
    let pairs = report["pairs"].as_array().map_or(0, Vec::len);
    let cross = report["pairs"]
        .as_array()
        .into_iter()
        .flatten()
        .all(|p| p["source_speaker"] != p["target_speaker"]);
    let pref = number(report, "target_preference_rate")?;
    let content = number(report, "content_accuracy")?;
    Ok(Outcome::all(vec![
        Outcome::new(
            run.elapsed < TRAINING_LIMIT,
            format!(
                "pipeline to step {} took {:.1} min",
                doc["checkpoint_step"],
                run.elapsed.as_secs_f64() / 60.0
            ),
        ),
        Outcome::new(pairs >= 100 && cross, format!("{pairs} cross-speaker pairs")),
        Outcome::new(
            pref >= 0.80,
            format!(
                "target preferred in {:.1}% of pairs (need 80%; similarity {:.3} to target vs {:.3} to source)",
                100.0 * pref,
                number(report, "mean_similarity_to_target")?,
                number(report, "mean_similarity_to_source")?
            ),
        ),
        Outcome::new(content >= 0.85, format!("content probe {:.1}% (need 85%)", 100.0 * content)),
    ]))
}

/// Parses a TSV written by `analyze-attention`: header row, then a label
/// column followed by numbers.
fn read_tsv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .map(|line| line.split('\t').skip(1).map(|v| v.parse::<f64>().map_err(Into::into)).collect())
        .collect()
}

pub fn attention_profiles(ctx: &crate::Context) -> Result<Outcome> {
    let run = ctx.trained().map_err(anyhow::Error::msg)?;
    let start = Instant::now();
    stylebook(&run.dir, &["analyze-attention"])?;
    let elapsed = start.elapsed();
    let dir = run.dir.join("attention");
    let stats = read_json(&dir.join("stats.json"))?;
    let profiles = read_tsv(&dir.join("profiles.tsv"))?;
    let sim = read_tsv(&dir.join("similarity.tsv"))?;
    ensure!(!profiles.is_empty() && sim.len() == profiles.len(), "profile and similarity tables disagree");

    let rows_ok = profiles.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
    let n = sim.len();
    let sym_ok = (0..n).all(|i| {
        sim[i].len() == n && (sim[i][i] - 1.0).abs() <= 1e-6 && (0..n).all(|j| (sim[i][j] - sim[j][i]).abs() <= 1e-6)
    });
    let within = number(&stats, "within_class_similarity")?;
    let between = number(&stats, "between_class_similarity")?;
    let rank = number(&stats, "adjacent_pair_rank")? as usize;
    let off = number(&stats, "off_diagonal_pairs")? as usize;
    let cutoff = (off as f64 * 0.1).ceil() as usize;
    Ok(Outcome::all(vec![
        Outcome::new(rows_ok && sym_ok, format!("{n} classes, tables well formed")),
        Outcome::new(within > between, format!("within-class {within:.4} vs between-class {between:.4}")),
        Outcome::new(rank <= cutoff, format!("adjacent pair ranks {rank} of {off} (top decile is 1..={cutoff})")),
        Outcome::new(elapsed < ANALYSIS_LIMIT, format!("analysis took {:.1} s", elapsed.as_secs_f64())),
    ]))
}

/// Small enough that every subcommand runs in seconds.
const SMALL_CONFIG: &str = r#"
[corpus]
utterances_per_speaker = 4
frames_per_utterance = 120

[units]
k = 32
iters = 10

[model.content]
num_units = 32

[train]
steps = 6
batch_size = 4
checkpoint_every = 3

[schedule]
steps = 8

[eval]
pairs = 12
"#;

/// Every primary output file, as paths relative to the run directory.
const PRIMARY_OUTPUTS: &[&str] = &[
    "units.sbmt",
    "checkpoint.sbck",
    "checkpoints/step000003.sbck",
    "loss.tsv",
    "config.toml",
    "stylebooks/spk001.stbk",
    "stylebooks/files.stbk",
    "converted.sbmt",
    "knn.sbmt",
    "knn_bank.sbmt",
    "memory.tsv",
    "eval.json",
    "attention/profiles.tsv",
    "attention/similarity.tsv",
    "attention/stats.json",
];

/// Runs all nine subcommands into `dir`.
fn full_pipeline(dir: &Path, config: &Path) -> Result<()> {
    let cfg = config.to_str().context("config path is not UTF-8")?;
    let at = |rel: &str| dir.join(rel).to_string_lossy().into_owned();
    let run = |args: &[&str]| -> Result<String> {
        let mut all = vec!["--config", cfg];
        all.extend_from_slice(args);
        stylebook(dir, &all)
    };
    run(&["synth-corpus"])?;
    run(&["fit-units"])?;
    run(&["train"])?;
    run(&["enroll", "--speaker", "1"])?;
    let (t0, t1, src) = (at("corpus/spk001_utt0000.utt"), at("corpus/spk001_utt0001.utt"), at("corpus/spk000_utt0003.utt"));
    run(&["enroll", "--target", &t0, "--target", &t1, "--out", &at("stylebooks/files.stbk")])?;
    run(&["convert", "--stylebook", &at("stylebooks/spk001.stbk"), "--source", &src, "--out", &at("converted.sbmt")])?;
    run(&["baseline-knn", "--target", &t0, "--target", &t1, "--source", &src, "--out", &at("knn.sbmt"), "--bank-out", &at("knn_bank.sbmt")])?;
    run(&["bench-memory"])?;
    run(&["evaluate"])?;
    run(&["analyze-attention"])?;
    Ok(())
}

fn corpus_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir.join("corpus"))?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_>>()?;
    names.sort();
    Ok(names.into_iter().map(|n| format!("corpus/{n}")).collect())
}

pub fn determinism(ctx: &crate::Context) -> Result<Outcome> {
    let root = ctx.work.join("determinism");
    fs::create_dir_all(&root)?;
    let config = root.join("small.toml");
    fs::write(&config, SMALL_CONFIG)?;
    let (a, b) = (root.join("a"), root.join("b"));
    full_pipeline(&a, &config)?;
    full_pipeline(&b, &config)?;

    let mut files = corpus_files(&a)?;
    ensure!(files.len() > 1, "no corpus files written");
    ensure!(files == corpus_files(&b)?, "corpus file lists differ");
    files.extend(PRIMARY_OUTPUTS.iter().map(|s| s.to_string()));
    let mut differing = Vec::new();
    for f in &files {
        let (x, y) = (fs::read(a.join(f)).with_context(|| f.clone())?, fs::read(b.join(f)).with_context(|| f.clone())?);
        if x != y {
            differing.push(f.clone());
        }
    }

    // Conversion needs only the checkpoint, the stylebook file and the
    // source: rerun it where no target utterance exists.
    let iso = root.join("isolated");
    fs::create_dir_all(&iso)?;
    for (from, to) in [
        ("checkpoint.sbck", "checkpoint.sbck"),
        ("stylebooks/spk001.stbk", "book.stbk"),
        ("corpus/spk000_utt0003.utt", "source.utt"),
    ] {
        fs::copy(a.join(from), iso.join(to))?;
    }
    let s = |p: &str| iso.join(p).to_string_lossy().into_owned();
    stylebook(
        &iso,
        &["--config", config.to_str().context("config path is not UTF-8")?, "convert", "--stylebook", &s("book.stbk"), "--source", &s("source.utt"), "--out", &s("converted.sbmt")],
    )?;
    let isolated_same = fs::read(iso.join("converted.sbmt"))? == fs::read(a.join("converted.sbmt"))?;

    Ok(Outcome::all(vec![
        Outcome::new(
            differing.is_empty(),
            if differing.is_empty() {
                format!("{} output files byte-identical across reruns of 9 subcommands", files.len())
            } else {
                format!("differing outputs: {}", differing.join(", "))
            },
        ),
        Outcome::new(isolated_same, format!("conversion from the stylebook file alone identical: {isolated_same}")),
    ]))
}
