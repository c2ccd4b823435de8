//! Compare the ELBO with an importance-sampling estimate of the conditional
//! log-likelihood of one target row.

use evogen::featurize::tokenize;
use evogen::model::{elbo_estimate, importance_log_likelihood, Model, ModelConfig};
use evogen::synth::{synth_corpus, SyntheticFamilyConfig};
use evogen::tensor::SeedStream;

fn main() -> evogen::Result<()> {
    let fam = synth_corpus(&SyntheticFamilyConfig { n_families: 1, depth: 6, length: 4, ..Default::default() })?;
    let grid = tokenize(&fam[0].msa);
    let (ctx, tgt) = (grid.select_rows(&[0, 1, 2, 3]), grid.select_rows(&[5]));
    let cfg = ModelConfig { n_enc_blocks: 1, n_dec_blocks: 1, ..ModelConfig::toy() };
    let model = Model::init(cfg, &SeedStream::new(1))?;
    for n in [100, 1_000, 10_000] {
        let (is, is_se, _) = importance_log_likelihood(&model, &ctx, &tgt, n, 1_000, &SeedStream::new(2))?;
        let (el, el_se) = elbo_estimate(&model, &ctx, &tgt, n, 1_000, &SeedStream::new(3))?;
        println!("{n:>6} samples: log p >= {is:.4} ± {is_se:.4}, ELBO {el:.4} ± {el_se:.4}");
    }
    Ok(())
}
