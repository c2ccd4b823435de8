//! Rotary embeddings make attention scores depend only on relative offsets.

use evogen::hyperformer::rope_apply;

fn main() -> evogen::Result<()> {
    let q = [0.3, -1.2, 0.8, 0.1, 2.0, -0.4];
    let k = [1.1, 0.4, -0.7, 0.9, 0.2, 0.6];
    let dot = |i: usize, j: usize| -> evogen::Result<f64> {
        let (a, b) = (rope_apply(&q, i, 10000.0)?, rope_apply(&k, j, 10000.0)?);
        Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
    };
    for (i, j) in [(0, 3), (10, 13), (500, 503), (4, 0), (104, 100)] {
        println!("positions ({i:>3}, {j:>3}) offset {:>3}: score {:+.12}", j as i64 - i as i64, dot(i, j)?);
    }
    Ok(())
}
