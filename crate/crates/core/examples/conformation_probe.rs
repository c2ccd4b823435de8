//! Probe a two-state pool: subsample, calibrate, score, and group the
//! predictions into ensembles.

use evogen::critic::SyntheticCritic;
use evogen::model::{Model, ModelConfig};
use evogen::protocols::{probe, ProbeConfig};
use evogen::synth::synth_two_state;
use evogen::tensor::SeedStream;

fn main() -> evogen::Result<()> {
    let (pool, a, b) = synth_two_state(16, 40, 0.0, 7)?;
    let critic = SyntheticCritic::two_minimum(a, b)?;
    let model = Model::init(ModelConfig::toy(), &SeedStream::new(1))?;
    let cfg = ProbeConfig { n_sub: vec![2], r_ctx: vec![1.0], trials: 8, ..Default::default() };
    let res = probe(&pool, &model, &critic, &cfg)?;
    println!("pool depth {}, {} trials", res.pool_depth, res.trials.len());
    for (i, e) in res.ensembles.iter().enumerate() {
        println!("ensemble {i}: members {:?}, mean confidence {:.1}, best {}", e.members, e.mean_confidence, e.best);
    }
    Ok(())
}
