//! Tokenize an alignment, split it into context and targets, and write the
//! feature container.

use evogen::featurize::{context_size, export_features, import_features, split_context_target, tokenize, FeatureGrid};
use evogen::msa::parse_a3m;
use evogen::tensor::SeedStream;

const A3M: &str = ">query\nMKTAYIAKQR\n>a\nMKTAYLAKQR\n>b\nMRT-YIAkkKQR\n>c\n--TAYIGKQR\n>d\nMKSAYIAKHR\n";

fn main() -> evogen::Result<()> {
    let msa = parse_a3m(A3M)?;
    let grid = tokenize(&msa);
    println!("{} rows x {} columns, deletions {:?}", grid.n, grid.l, &grid.del_raw[20..30]);

    for r in [0.0, 0.5, 0.9] {
        let split = split_context_target(grid.n, r, &mut SeedStream::new(3))?;
        println!("r_ctx {r}: {} context rows {:?}, targets {:?}", context_size(grid.n, r), split.context, split.targets);
    }

    let features = FeatureGrid::from_msa(&msa);
    let mut buf = Vec::new();
    export_features(&features, &mut buf)?;
    let back = import_features(buf.as_slice())?;
    println!("container {} bytes, round trip exact: {}", buf.len(), back == features);
    Ok(())
}
