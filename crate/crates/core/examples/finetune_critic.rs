//! Fine-tune against the synthetic critic and watch its fape-like channel.

use evogen::critic::{SyntheticCritic, FAPE};
use evogen::model::{Model, ModelConfig};
use evogen::msa::Msa;
use evogen::synth::{synth_corpus, SyntheticFamilyConfig};
use evogen::tensor::SeedStream;
use evogen::training::{FeedMode, TrainConfig, Trainer};

fn main() -> evogen::Result<()> {
    let corpus: Vec<Msa> = synth_corpus(&SyntheticFamilyConfig { n_families: 8, depth: 8, length: 8, ..Default::default() })?
        .into_iter()
        .map(|f| f.msa)
        .collect();
    let critic = SyntheticCritic::new(vec![0, 4, 9, 12, 7, 7, 19, 2])?;
    for feed in [FeedMode::Soft, FeedMode::Hard] {
        let cfg = TrainConfig { batch_size: 2, finetune_lr: 1e-3, finetune_rows: 8, feed, ..Default::default() };
        let mut tr = Trainer::new(Model::init(ModelConfig::toy(), &SeedStream::new(1))?, cfg, SeedStream::new(2))?;
        print!("{feed:?}:");
        for step in 0..200 {
            let batch: Vec<Msa> = tr.sample_batch(corpus.len()).into_iter().map(|i| corpus[i].clone()).collect();
            let m = tr.finetune_step(&batch, &critic)?;
            if step % 50 == 0 {
                print!(" {:.3} (|g| {:.2e})", m.critic.as_ref().map(|c| c[FAPE]).unwrap_or(f64::NAN), m.critic_grad_norm.unwrap_or(0.0));
            }
        }
        println!();
    }
    Ok(())
}
