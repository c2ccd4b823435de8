//! Acceptance criteria, one PASS/FAIL line each. Pass criterion ids as
//! arguments to run a subset.

use evogen::verify::{run_criterion, CRITERIA};

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, _) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let r = run_criterion(id);
        println!("{}", r.line());
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
