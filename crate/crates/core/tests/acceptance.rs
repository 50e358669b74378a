//! Acceptance checks A1–A10 at full budget. Prints one line per check and
//! fails if any check fails.

use std::process::ExitCode;
use std::time::Instant;

use milestoning::validation::{self, Budget};

const SEED: u64 = 1;

fn main() -> ExitCode {
    let start = Instant::now();
    let report = validation::run(&Budget::default(), SEED, &[]);
    for c in &report.criteria {
        println!("{}", c.line());
    }
    println!("acceptance: {:.0}s", start.elapsed().as_secs_f64());
    if report.all_passed() {
        println!("acceptance: all {} criteria passed", report.criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", report.failures().join(", "));
        ExitCode::FAILURE
    }
}
