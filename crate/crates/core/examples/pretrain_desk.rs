//! A short pretraining run of the desk-sized model on a synthetic corpus,
//! printing the metrics stream.
//!
//! cargo run --release --example pretrain_desk -- [steps]

use evogen::model::{Model, ModelConfig};
use evogen::msa::Msa;
use evogen::synth::{synth_corpus, SyntheticFamilyConfig};
use evogen::tensor::SeedStream;
use evogen::training::{TrainConfig, Trainer};

fn main() -> evogen::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let corpus: Vec<Msa> = synth_corpus(&SyntheticFamilyConfig { n_families: 20, ..Default::default() })?.into_iter().map(|f| f.msa).collect();
    let model = Model::init(ModelConfig::desk(), &SeedStream::new(1))?;
    println!("{} parameters", model.num_parameters());
    let cfg = TrainConfig { batch_size: 4, warmup_steps: 10, decay_steps: steps, lr_peak: 2e-3, lr_final: 1e-4, ..Default::default() };
    let mut tr = Trainer::new(model, cfg, SeedStream::new(2))?;
    for _ in 0..steps {
        let batch: Vec<Msa> = tr.sample_batch(corpus.len()).into_iter().map(|i| corpus[i].clone()).collect();
        let m = tr.pretrain_step(&batch)?;
        if m.step % 10 == 0 || m.step + 1 == steps {
            println!("{}", m.to_json_line());
        }
    }
    Ok(())
}
