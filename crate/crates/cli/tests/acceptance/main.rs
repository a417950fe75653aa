//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! Criteria 7 and 8 share one default training run driven through the CLI
//! binary; it dominates the suite's runtime.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

mod cli_runs;
mod numerics;
mod oracles;
mod stylebook_size;

/// What a criterion measured; `pass` is decided against its threshold.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }

    /// All parts must pass; details are joined.
    pub fn all(parts: Vec<Outcome>) -> Self {
        let pass = parts.iter().all(|p| p.pass);
        let detail = parts.iter().map(|p| p.detail.as_str()).collect::<Vec<_>>().join("; ");
        Outcome { pass, detail }
    }
}

pub struct Context {
    pub work: PathBuf,
    trained: std::cell::OnceCell<Result<cli_runs::TrainedRun, String>>,
}

impl Context {
    /// The default training run shared by criteria 7 and 8.
    pub fn trained(&self) -> Result<&cli_runs::TrainedRun, String> {
        self.trained
            .get_or_init(|| cli_runs::default_training(&self.work).map_err(|e| format!("{e:#}")))
            .as_ref()
            .map_err(Clone::clone)
    }
}

type Check = fn(&Context) -> anyhow::Result<Outcome>;

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Option<Duration>,
    check: Check,
}

const MINUTE: Duration = Duration::from_secs(60);

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, name: "memory table", limit: Some(Duration::from_secs(1)), check: numerics::memory },
        Criterion { id: 2, name: "fixed-size stylebook", limit: Some(MINUTE), check: stylebook_size::fixed_size },
        Criterion { id: 3, name: "attention correctness", limit: Some(MINUTE), check: numerics::attention },
        Criterion { id: 4, name: "gradient suite", limit: Some(5 * MINUTE), check: numerics::gradients },
        Criterion { id: 5, name: "diffusion numerics", limit: Some(5 * MINUTE), check: numerics::diffusion },
        Criterion { id: 6, name: "kNN oracle", limit: None, check: numerics::knn },
        Criterion { id: 7, name: "end-to-end conversion", limit: None, check: cli_runs::end_to_end },
        Criterion { id: 8, name: "attention profiles", limit: None, check: cli_runs::attention_profiles },
        Criterion { id: 9, name: "CLI determinism", limit: None, check: cli_runs::determinism },
    ]
}

fn main() -> ExitCode {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if work.exists() {
        std::fs::remove_dir_all(&work).expect("clearing the acceptance work directory");
    }
    std::fs::create_dir_all(&work).expect("creating the acceptance work directory");
    let ctx = Context { work, trained: Default::default() };

    // `STYLEBOOK_ACCEPTANCE_ONLY=7,8` runs a subset.
    let selected: Vec<Criterion> = match std::env::var("STYLEBOOK_ACCEPTANCE_ONLY") {
        Ok(list) => {
            let ids: Vec<u8> = list.split(',').filter_map(|s| s.trim().parse().ok()).collect();
            criteria().into_iter().filter(|c| ids.contains(&c.id)).collect()
        }
        Err(_) => criteria(),
    };

    let mut failed = 0;
    for c in &selected {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| (c.check)(&ctx)));
        let elapsed = start.elapsed();
        let (mut pass, mut detail) = match result {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panic: {msg}"))
            }
        };
        if let Some(limit) = c.limit {
            if elapsed > limit {
                pass = false;
                detail.push_str(&format!("; runtime over the {:.0} s limit", limit.as_secs_f64()));
            }
        }
        failed += !pass as usize;
        println!(
            "{} criterion {} ({}): {} [{:.2} s]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", selected.len() - failed, selected.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
