//! Calibrate a shallow alignment and augment it to a deeper virtual one.

use evogen::model::{Model, ModelConfig};
use evogen::protocols::{augment, calibrate, AugmentationConfig, CalibrationConfig, OutputMode};
use evogen::synth::{synth_corpus, SyntheticFamilyConfig};
use evogen::tensor::SeedStream;

fn main() -> evogen::Result<()> {
    let msa = synth_corpus(&SyntheticFamilyConfig { n_families: 1, depth: 10, length: 20, ..Default::default() })?.remove(0).msa;
    let model = Model::init(ModelConfig::desk(), &SeedStream::new(1))?;

    for t in calibrate(&msa, &model, &CalibrationConfig { trials: 1, ..Default::default() })? {
        println!("calibrated r_ctx {}: context {:?}, depth {}", t.r_ctx, t.context, t.msa.depth());
    }

    let cfg = AugmentationConfig { n_aug: vec![32], r_ctx: vec![0.7], trials: 1, mode: OutputMode::Hard, ..Default::default() };
    for t in augment(&msa, &model, &cfg)? {
        let m = t.msa.expect("hard mode keeps sequences");
        println!("augmented to {} rows; first generated: {}", m.depth(), m.row(1).sequence());
    }
    Ok(())
}
