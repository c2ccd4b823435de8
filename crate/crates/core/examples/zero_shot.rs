//! Generate alignments from a single sequence.

use evogen::model::{Model, ModelConfig};
use evogen::protocols::{zero_shot, AugmentationConfig};
use evogen::tensor::SeedStream;

fn main() -> evogen::Result<()> {
    let query = std::env::args().nth(1).unwrap_or_else(|| "MKTAYIAKQRQISFVKSHFSRQ".into());
    let model = Model::init(ModelConfig::desk(), &SeedStream::new(1))?;
    let cfg = AugmentationConfig::zero_shot();
    for t in zero_shot(&query, &model, &cfg)? {
        let row1 = t.features.row(1.min(t.features.n - 1));
        let top = row1.iter().cloned().fold(0f32, f32::max);
        println!("n_aug {:>3} trial {}: {} x {} features, max prob in row 1 {top:.3}", t.n_aug, t.trial, t.features.n, t.features.l);
    }
    Ok(())
}
