//! Acceptance run: every suite at full scale, one verdict line each.
//!
//! `UHUBERT_ACCEPTANCE_SCALE=smoke` runs the same code paths on tiny
//! settings; positional arguments restrict the run to the named suites.

use std::process::ExitCode;

use uhubert::repro::{run_suite, Scale, SUITES};

fn main() -> ExitCode {
    let scale = match std::env::var("UHUBERT_ACCEPTANCE_SCALE").as_deref() {
        Ok("smoke") => Scale::Smoke,
        _ => Scale::Full,
    };
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut hard_failures = 0;
    for suite in SUITES.iter().filter(|s| wanted.is_empty() || wanted.iter().any(|w| w == *s)) {
        match run_suite(suite, scale) {
            Ok(report) => {
                for c in &report.checks {
                    let mark = if c.passed { "ok" } else if c.gate { "MISS" } else { "miss" };
                    println!("    {mark:<4} {}: {:.4} vs {:.4} {}", c.name, c.value, c.threshold, c.detail);
                }
                println!("{}", report.line());
                if !report.passed && !report.soft {
                    hard_failures += 1;
                }
            }
            Err(e) => {
                println!("FAIL {suite}: {e}");
                hard_failures += 1;
            }
        }
    }
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{hard_failures} acceptance suite(s) failed");
        ExitCode::FAILURE
    }
}
