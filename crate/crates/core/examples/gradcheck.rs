//! Runs the finite-difference suite and prints the worst error per check.
//!
//! `cargo run --release --example gradcheck [filter]`

use mamat::gradsuite::{run_suite, SuiteOptions};

fn main() {
    let filter = std::env::args().nth(1);
    let opts = SuiteOptions::default();
    let mut failed = 0;
    for e in run_suite(&opts, filter.as_deref()) {
        match &e.report {
            Ok(r) => {
                let worst = r.worst().map(|(n, _)| n).unwrap_or("-");
                println!(
                    "{:<22} max rel err {:.2e}  coords {:>5}  refined {:>2}  worst {:<32} {:>6.1}s  {}",
                    e.name,
                    r.max_rel_err,
                    r.coords_checked,
                    r.refined,
                    worst,
                    e.seconds,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            Err(err) => println!("{:<22} error: {err}", e.name),
        }
        failed += usize::from(!e.passed());
    }
    std::process::exit(i32::from(failed > 0));
}
