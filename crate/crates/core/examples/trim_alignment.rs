//! Trim a deep alignment to a depth cap and report what survived.
//!
//! cargo run --example trim_alignment -- [path.a3m] [n_max]

use evogen::msa::{coverage, parse_a3m, sequence_identity, write_a3m};
use evogen::tensor::SeedStream;
use evogen::trim::{trim, TrimConfig};
use evogen::verify::random_msa;

fn main() -> evogen::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let msa = match args.first() {
        Some(p) => parse_a3m(&std::fs::read_to_string(p)?)?,
        None => random_msa(&mut SeedStream::new(1), 300, 60),
    };
    let n_max = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let out = trim(&msa, &TrimConfig::with_n_max(n_max));
    println!("depth {} -> {}", msa.depth(), out.depth());
    for row in out.rows().iter().take(5) {
        let id = sequence_identity(row, out.query())?;
        println!("{:<16} identity {:.2} coverage {:.2}", row.header, id, coverage(row));
    }
    if args.is_empty() {
        print!("{}", write_a3m(&out).lines().take(6).collect::<Vec<_>>().join("\n"));
        println!();
    }
    Ok(())
}
