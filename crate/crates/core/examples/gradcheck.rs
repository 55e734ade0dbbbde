//! Runs the finite-difference gradient suite over every operation and the three network updates.

use memadapt::gradcheck_suite::{run, Scope, TOLERANCE};

fn main() -> memadapt::Result<()> {
    let cases = std::env::args().nth(1).map_or(5, |s| s.parse().expect("case count"));
    let results = run(Scope::All, cases, 0)?;
    for r in &results {
        println!(
            "{} {:<28} max rel err {:.2e}  {:.2}s",
            if r.passed() { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.seconds
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks within {TOLERANCE:e}", results.len() - failed, results.len());
    Ok(())
}
