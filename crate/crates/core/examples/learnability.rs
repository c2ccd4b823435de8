//! Seed-pinned learnability run on the synthetic corpus. Prints the metrics
//! as JSON; pass a path to also write them there.
//!
//! cargo run --release --example learnability -- tests/data/learnability.json

use evogen::verify::{learnability, LearnabilityMetrics};

fn main() -> evogen::Result<()> {
    let m: LearnabilityMetrics = learnability()?;
    let json = serde_json::to_string_pretty(&m)? + "\n";
    print!("{json}");
    if let Some(p) = std::env::args().nth(1) {
        std::fs::write(p, json)?;
    }
    Ok(())
}
