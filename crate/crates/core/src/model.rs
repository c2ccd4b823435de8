//! The U-shaped generative model: embedding, encoder stack, latent levels,
//! decoder stack and readout.
//!
//! The encoder sees context rows and target rows. The decoder sees context
//! rows plus one slot per target row; slots start as the mean of the
//! context-row embeddings and receive each latent level's sample at evenly
//! spaced depths. Level `j` (decoding order, coarse first) is injected before
//! decoder block `floor(j·n_dec/K)`; its prior reads the mean context
//! activation at that point, its posterior the encoder's target-row
//! activation at the mirrored depth. When reconstructing, encoder context
//! activations are also added into the mirrored decoder blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{tokenize, OutputLogits, TokenGrid, NUM_DEL_BINS};
use crate::hyperformer::{block_specs, hyperformer_block, relpos_buckets, BlockConfig, BlockMode, Streams};
use crate::latent::{level_specs, prior_from_context, run_level, LatentLevel};
use crate::layers::{linear, linear_specs, norm, norm_specs};
use crate::msa::{Msa, VOCAB_SIZE};
use crate::tensor::{read_checkpoint, write_checkpoint, Binder, Graph, Init, ParamSpec, ParamStore, SeedStream, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub c_s: usize,
    pub c_p: usize,
    pub heads: usize,
    pub opm_dim: usize,
    pub transition_factor: usize,
    /// Latent dimensions in encoding order; strictly increasing.
    pub latent_dims: Vec<usize>,
    pub latent_hidden: usize,
    pub vocab: usize,
    pub del_bins: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub rope_base: f64,
    /// Encoder-to-decoder context skips while reconstructing.
    pub skips: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            n_enc_blocks: 12,
            n_dec_blocks: 12,
            c_s: 256,
            c_p: 128,
            heads: 8,
            opm_dim: 32,
            transition_factor: 4,
            latent_dims: vec![64, 128, 256],
            latent_hidden: 256,
            vocab: VOCAB_SIZE,
            del_bins: NUM_DEL_BINS,
            num_buckets: 32,
            max_distance: 128,
            rope_base: 10000.0,
            skips: true,
        }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            c_s: 32,
            c_p: 16,
            heads: 2,
            opm_dim: 8,
            transition_factor: 2,
            latent_dims: vec![4, 8],
            latent_hidden: 32,
            num_buckets: 16,
            max_distance: 64,
            ..ModelConfig::full()
        }
    }

    /// Dimensions used by gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            c_s: 8,
            c_p: 4,
            heads: 2,
            opm_dim: 2,
            transition_factor: 2,
            latent_dims: vec![2],
            latent_hidden: 8,
            num_buckets: 8,
            max_distance: 16,
            ..ModelConfig::full()
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            c_s: self.c_s,
            c_p: self.c_p,
            heads: self.heads,
            opm_dim: self.opm_dim,
            transition_factor: self.transition_factor,
            num_buckets: self.num_buckets,
            max_distance: self.max_distance,
            rope_base: Some(self.rope_base),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.latent_dims.len()
    }

    /// Dimension of level `j` in decoding order.
    pub fn level_dim(&self, j: usize) -> usize {
        self.latent_dims[self.num_levels() - 1 - j]
    }

    /// Decoder block before which level `j` is injected.
    pub fn injection_depth(&self, j: usize) -> usize {
        j * self.n_dec_blocks / self.num_levels()
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.n_enc_blocks == 0 || self.n_dec_blocks == 0 || self.latent_hidden == 0 {
            return Err(Error::invalid("block counts and latent_hidden must be positive"));
        }
        if self.n_enc_blocks != self.n_dec_blocks {
            return Err(Error::invalid("encoder and decoder need the same number of blocks (mirrored depths)"));
        }
        if self.latent_dims.is_empty() || self.latent_dims.contains(&0) {
            return Err(Error::invalid("need at least one positive latent dimension"));
        }
        if self.latent_dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("latent dimensions must strictly increase in encoding order"));
        }
        if self.vocab != VOCAB_SIZE || self.del_bins != NUM_DEL_BINS {
            return Err(Error::invalid(format!("vocab must be {VOCAB_SIZE} and del_bins {NUM_DEL_BINS}")));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        linear_specs(&mut s, "embed/seq", self.vocab + 1, self.c_s, false);
        s.push(ParamSpec::new("embed/pair", &[self.num_buckets, self.c_p], Init::Normal(1.0)));
        let block = self.block();
        for k in 0..self.n_enc_blocks {
            s.extend(block_specs(&format!("enc/{k}"), &block, BlockMode::Encoder));
        }
        for k in 0..self.n_dec_blocks {
            s.extend(block_specs(&format!("dec/{k}"), &block, BlockMode::Decoder));
        }
        for j in 0..self.num_levels() {
            let prev = (j > 0).then(|| self.level_dim(j - 1));
            s.extend(level_specs(&format!("latent/{j}"), self.c_s, self.latent_hidden, self.level_dim(j), prev));
            linear_specs(&mut s, &format!("inject/{j}"), self.level_dim(j), self.c_s, false);
        }
        norm_specs(&mut s, "readout/ln", self.c_s);
        linear_specs(&mut s, "readout/trunk", self.c_s, self.c_s, false);
        linear_specs(&mut s, "readout/aa", self.c_s, self.vocab, false);
        linear_specs(&mut s, "readout/del", self.c_s, self.del_bins, false);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Sequence activations `[N, L, c_s]` from one-hot tokens and deletion values.
pub fn embed_rows<'g>(b: &Binder<'g>, grid: &TokenGrid) -> Result<Var<'g>> {
    let g = b.graph();
    let mut feats = vec![0.0; grid.n * grid.l * (VOCAB_SIZE + 1)];
    for k in 0..grid.n * grid.l {
        feats[k * (VOCAB_SIZE + 1) + grid.tokens[k]] = 1.0;
        feats[k * (VOCAB_SIZE + 1) + VOCAB_SIZE] = grid.del_value[k];
    }
    let x = g.constant(Tensor::new(vec![grid.n, grid.l, VOCAB_SIZE + 1], feats)?);
    linear(b, "embed/seq", x)
}

/// Pair activations `[L, L, c_p]` from relative-position buckets.
pub fn embed_pair<'g>(b: &Binder<'g>, cfg: &ModelConfig, l: usize) -> Result<Var<'g>> {
    let idx = relpos_buckets(l, cfg.num_buckets, cfg.max_distance);
    b.p("embed/pair")?.gather(&idx, 0)?.reshape(&[l, l, cfg.c_p])
}

/// Encoder activations after each block, index 0 being the embedding.
pub struct Encoded<'g> {
    pub ctx: Vec<Var<'g>>,
    pub tgt: Vec<Var<'g>>,
}

impl<'g> Encoded<'g> {
    /// Same encoding with a single target row repeated `n` times.
    pub fn repeat_target(&self, n: usize) -> Result<Encoded<'g>> {
        let tgt = self
            .tgt
            .iter()
            .map(|t| {
                let s = t.shape();
                if s[0] != 1 {
                    return Err(Error::shape("repeat_target needs exactly one encoded target row"));
                }
                t.broadcast_to(&[n, s[1], s[2]])
            })
            .collect::<Result<_>>()?;
        Ok(Encoded { ctx: self.ctx.clone(), tgt })
    }
}

fn check_grids(ctx: &TokenGrid, tgt: Option<&TokenGrid>) -> Result<()> {
    if ctx.n == 0 || ctx.l == 0 {
        return Err(Error::EmptyInput);
    }
    if let Some(t) = tgt {
        if t.n == 0 {
            return Err(Error::invalid("empty target set"));
        }
        if t.l != ctx.l {
            return Err(Error::shape(format!("targets of length {} for context of length {}", t.l, ctx.l)));
        }
    }
    Ok(())
}

pub fn encode<'g>(b: &Binder<'g>, cfg: &ModelConfig, ctx: &TokenGrid, tgt: &TokenGrid) -> Result<Encoded<'g>> {
    check_grids(ctx, Some(tgt))?;
    let block = cfg.block();
    let mut s = Streams { ctx: embed_rows(b, ctx)?, tgt: Some(embed_rows(b, tgt)?) };
    let mut pair = embed_pair(b, cfg, ctx.l)?;
    let mut out = Encoded { ctx: vec![s.ctx], tgt: vec![s.tgt.expect("set")] };
    for k in 0..cfg.n_enc_blocks {
        (s, pair) = hyperformer_block(b, &format!("enc/{k}"), &block, BlockMode::Encoder, s, pair)?;
        out.ctx.push(s.ctx);
        out.tgt.push(s.tgt.expect("set"));
    }
    Ok(out)
}

/// Where each level's sample comes from.
pub enum Latents<'a, 'g> {
    /// Ancestral sampling from the priors.
    Prior { noise: &'a [Tensor] },
    /// Sampling from the posteriors built on an encoding of the targets.
    Posterior { encoded: &'a Encoded<'g>, noise: &'a [Tensor] },
    /// Given samples `[T, L, d_j]`; priors are evaluated along them.
    Fixed { samples: &'a [Tensor] },
}

pub struct Decoded<'g> {
    /// `[T, L, 22]`.
    pub aa_logits: Var<'g>,
    /// `[T, L, 6]`.
    pub del_logits: Var<'g>,
    pub levels: Vec<LatentLevel<'g>>,
}

impl Decoded<'_> {
    pub fn to_logits(&self) -> OutputLogits {
        let s = self.aa_logits.shape();
        OutputLogits::new(s[0], s[1], self.aa_logits.value().into_data(), self.del_logits.value().into_data())
            .expect("readout shapes")
    }
}

/// Standard-normal noise for every level, `[t_rows, l, d_j]` each.
pub fn level_noise(cfg: &ModelConfig, t_rows: usize, l: usize, seed: &SeedStream) -> Vec<Tensor> {
    (0..cfg.num_levels())
        .map(|j| seed.child(&format!("level{j}")).normal_tensor(&[t_rows, l, cfg.level_dim(j)]))
        .collect()
}

/// Context made of the query row alone, for conditioning on a single
/// sequence.
pub fn query_context(msa: &Msa) -> Result<TokenGrid> {
    Ok(tokenize(&msa.select(&[0])?))
}

/// Runs the decoder for `t_rows` target slots. `skips` adds the encoder's
/// context activations into the mirrored decoder blocks.
pub fn decode<'g>(
    b: &Binder<'g>,
    cfg: &ModelConfig,
    ctx: &TokenGrid,
    t_rows: usize,
    latents: Latents<'_, 'g>,
    skips: Option<&Encoded<'g>>,
) -> Result<Decoded<'g>> {
    check_grids(ctx, None)?;
    if t_rows == 0 {
        return Err(Error::invalid("need at least one target slot"));
    }
    let k_levels = cfg.num_levels();
    let given = match &latents {
        Latents::Prior { noise } | Latents::Posterior { noise, .. } => noise.len(),
        Latents::Fixed { samples } => samples.len(),
    };
    if given != k_levels {
        return Err(Error::invalid(format!("{given} latent inputs for {k_levels} levels")));
    }
    let g = b.graph();
    let l = ctx.l;
    let block = cfg.block();
    let n = cfg.n_dec_blocks;
    let emb = embed_rows(b, ctx)?;
    let slot = emb.mean(0)?.reshape(&[1, l, cfg.c_s])?.broadcast_to(&[t_rows, l, cfg.c_s])?;
    let mut s = Streams { ctx: emb, tgt: Some(slot) };
    let mut pair = embed_pair(b, cfg, l)?;
    let mut levels: Vec<LatentLevel<'g>> = Vec::with_capacity(k_levels);
    for i in 0..n {
        if let Some(e) = skips {
            s.ctx = s.ctx.add(e.ctx[n - i])?;
        }
        for j in (0..k_levels).filter(|&j| cfg.injection_depth(j) == i) {
            let prefix = format!("latent/{j}");
            let summary = s.ctx.mean(0)?.reshape(&[1, l, cfg.c_s])?;
            let prev = levels.last().map(|lv| lv.sample);
            let level = match &latents {
                Latents::Prior { noise } => run_level(b, &prefix, summary, prev, None, &noise[j])?,
                Latents::Posterior { encoded, noise } => {
                    let tsum = encoded.tgt[cfg.n_enc_blocks - i];
                    run_level(b, &prefix, summary, prev, Some(tsum), &noise[j])?
                }
                Latents::Fixed { samples } => {
                    let want = [t_rows, l, cfg.level_dim(j)];
                    if samples[j].shape() != want {
                        return Err(Error::shape(format!("level {j} sample {:?}, expected {want:?}", samples[j].shape())));
                    }
                    let z = g.constant(samples[j].clone());
                    let prior = prior_from_context(b, &prefix, summary, prev, z)?;
                    LatentLevel { dim: want[2], prior, deviation: None, posterior: None, sample: z, kl: None }
                }
            };
            let tgt = s.tgt.expect("slots present");
            s.tgt = Some(tgt.add(linear(b, &format!("inject/{j}"), level.sample)?)?);
            levels.push(level);
        }
        (s, pair) = hyperformer_block(b, &format!("dec/{i}"), &block, BlockMode::Decoder, s, pair)?;
    }
    let h = norm(b, "readout/ln", s.tgt.expect("slots present"))?;
    let h = linear(b, "readout/trunk", h)?.gelu()?;
    Ok(Decoded { aa_logits: linear(b, "readout/aa", h)?, del_logits: linear(b, "readout/del", h)?, levels })
}

/// Per-target-row terms of the negative ELBO.
pub struct ElboTerms<'g> {
    /// Mean over target rows of `recon_aa + recon_del + β·Σ kl`.
    pub total: Var<'g>,
    /// `[T]` each.
    pub recon_aa: Var<'g>,
    pub recon_del: Var<'g>,
    pub kl: Vec<Var<'g>>,
    pub per_row: Var<'g>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub recon_aa: f64,
    pub recon_del: f64,
    pub kl: Vec<f64>,
    pub total: f64,
}

fn mean_of(v: Var<'_>) -> f64 {
    v.with_value(|t| t.sum() / t.numel() as f64)
}

impl ElboTerms<'_> {
    pub fn record(&self) -> LossRecord {
        LossRecord {
            recon_aa: mean_of(self.recon_aa),
            recon_del: mean_of(self.recon_del),
            kl: self.kl.iter().map(|&k| mean_of(k)).collect(),
            total: self.total.item(),
        }
    }
}

/// Cross-entropy of `labels` under `logits` (`[T, L, K]`), summed per row.
pub fn row_cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let s = logits.shape();
    let oh = logits.graph().one_hot(labels, &s[..2], s[2])?;
    logits.log_softmax(2)?.mul(oh)?.sum(2)?.sum(1)?.neg()
}

/// Negative ELBO of the target rows given the context, with the KL weighted
/// by `beta`. Sampling noise comes from `seed`.
pub fn elbo<'g>(
    b: &Binder<'g>,
    cfg: &ModelConfig,
    ctx: &TokenGrid,
    tgt: &TokenGrid,
    beta: f64,
    seed: &SeedStream,
) -> Result<ElboTerms<'g>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("KL weight {beta} outside [0, 1]")));
    }
    let enc = encode(b, cfg, ctx, tgt)?;
    let noise = level_noise(cfg, tgt.n, tgt.l, seed);
    let skips = cfg.skips.then_some(&enc);
    let dec = decode(b, cfg, ctx, tgt.n, Latents::Posterior { encoded: &enc, noise: &noise }, skips)?;
    let recon_aa = row_cross_entropy(dec.aa_logits, &tgt.tokens)?;
    let recon_del = row_cross_entropy(dec.del_logits, &tgt.del_bins())?;
    let kl: Vec<Var<'g>> = dec.levels.iter().map(|lv| lv.kl.expect("posterior path")).collect();
    let mut per_row = recon_aa.add(recon_del)?;
    for &k in &kl {
        per_row = per_row.add(k.scale(beta)?)?;
    }
    Ok(ElboTerms { total: per_row.mean(0)?, recon_aa, recon_del, kl, per_row })
}

/// Decodes `n_out` rows from the priors, without skips.
pub fn generate<'g>(
    b: &Binder<'g>,
    cfg: &ModelConfig,
    ctx: &TokenGrid,
    n_out: usize,
    seed: &SeedStream,
) -> Result<Decoded<'g>> {
    if n_out < 1 {
        return Err(Error::invalid("n_out must be at least 1"));
    }
    let noise = level_noise(cfg, n_out, ctx.l, seed);
    decode(b, cfg, ctx, n_out, Latents::Prior { noise: &noise }, None)
}

/// Configuration and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: &SeedStream) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.param_specs(), &seed.child("params"))?;
        Ok(Model { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Logits of `n_out` generated rows.
    pub fn generate_logits(&self, ctx: &TokenGrid, n_out: usize, seed: &SeedStream) -> Result<OutputLogits> {
        let g = Graph::new();
        let b = Binder::frozen(&g, &self.params);
        Ok(generate(&b, &self.config, ctx, n_out, seed)?.to_logits())
    }

    /// Logits of the target rows passed through encoder, posterior and decoder.
    pub fn reconstruct_logits(&self, ctx: &TokenGrid, tgt: &TokenGrid, seed: &SeedStream) -> Result<OutputLogits> {
        let g = Graph::new();
        let b = Binder::frozen(&g, &self.params);
        let enc = encode(&b, &self.config, ctx, tgt)?;
        let noise = level_noise(&self.config, tgt.n, tgt.l, seed);
        let skips = self.config.skips.then_some(&enc);
        let dec = decode(&b, &self.config, ctx, tgt.n, Latents::Posterior { encoded: &enc, noise: &noise }, skips)?;
        Ok(dec.to_logits())
    }

    pub fn loss(&self, ctx: &TokenGrid, tgt: &TokenGrid, beta: f64, seed: &SeedStream) -> Result<LossRecord> {
        let g = Graph::new();
        let b = Binder::frozen(&g, &self.params);
        Ok(elbo(&b, &self.config, ctx, tgt, beta, seed)?.record())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        write_checkpoint(f, &self.config.to_json(), &self.params)
    }

    /// Loads a checkpoint; with `expected`, refuses one built under a
    /// different configuration.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let ck = read_checkpoint(BufReader::new(File::open(path)?))?;
        if let Some(cfg) = expected {
            if crate::tensor::config_digest(&cfg.to_json()) != ck.config_digest() {
                return Err(Error::DigestMismatch);
            }
        }
        let config: ModelConfig = serde_json::from_str(&ck.config_json)?;
        config.validate()?;
        let want = ParamStore::init(&config.param_specs(), &SeedStream::new(0))?;
        if !want.same_layout(&ck.params) {
            return Err(Error::Format("checkpoint parameters do not match its configuration".into()));
        }
        Ok(Model { config, params: ck.params })
    }
}

/// Log-sum-exp mean of log-weights with a delta-method standard error.
pub fn log_mean_exp(log_w: &[f64]) -> (f64, f64) {
    let n = log_w.len() as f64;
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|x| (x - m).exp()).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m + mean.ln(), (var / n).sqrt() / mean)
}

/// Importance-sampling estimate of `log p(target | context)` with the
/// posterior as proposal, for a single target row. Returns the estimate,
/// its standard error and the per-sample log-weights.
pub fn importance_log_likelihood(
    model: &Model,
    ctx: &TokenGrid,
    target: &TokenGrid,
    n_samples: usize,
    chunk: usize,
    seed: &SeedStream,
) -> Result<(f64, f64, Vec<f64>)> {
    if target.n != 1 {
        return Err(Error::invalid("importance sampling takes exactly one target row"));
    }
    let cfg = &model.config;
    let mut log_w = Vec::with_capacity(n_samples);
    let mut done = 0;
    let mut c = 0u64;
    while done < n_samples {
        let s = chunk.min(n_samples - done);
        let g = Graph::new();
        let b = Binder::frozen(&g, &model.params);
        let enc = encode(&b, cfg, ctx, target)?.repeat_target(s)?;
        let noise = level_noise(cfg, s, target.l, &seed.child_index(c));
        let skips = cfg.skips.then_some(&enc);
        let dec = decode(&b, cfg, ctx, s, Latents::Posterior { encoded: &enc, noise: &noise }, skips)?;
        let tokens: Vec<usize> = (0..s).flat_map(|_| target.tokens.iter().cloned()).collect();
        let bins: Vec<usize> = (0..s).flat_map(|_| target.del_bins()).collect();
        let mut lw = row_cross_entropy(dec.aa_logits, &tokens)?.add(row_cross_entropy(dec.del_logits, &bins)?)?.neg()?;
        for lv in &dec.levels {
            let lp = crate::latent::gaussian_log_density(lv.prior, lv.sample)?;
            let lq = crate::latent::gaussian_log_density(lv.posterior.expect("posterior path"), lv.sample)?;
            lw = lw.add(lp)?.sub(lq)?;
        }
        log_w.extend_from_slice(lw.value().data());
        done += s;
        c += 1;
    }
    let (est, se) = log_mean_exp(&log_w);
    Ok((est, se, log_w))
}

/// Monte-Carlo estimate of the ELBO (KL weight 1) of a single target row,
/// with its standard error.
pub fn elbo_estimate(
    model: &Model,
    ctx: &TokenGrid,
    target: &TokenGrid,
    n_samples: usize,
    chunk: usize,
    seed: &SeedStream,
) -> Result<(f64, f64)> {
    if target.n != 1 {
        return Err(Error::invalid("ELBO estimate takes exactly one target row"));
    }
    let mut vals = Vec::with_capacity(n_samples);
    let mut c = 0u64;
    while vals.len() < n_samples {
        let s = chunk.min(n_samples - vals.len());
        let rep = target.select_rows(&vec![0; s]);
        let g = Graph::new();
        let b = Binder::frozen(&g, &model.params);
        let terms = elbo(&b, &model.config, ctx, &rep, 1.0, &seed.child_index(c))?;
        vals.extend(terms.per_row.value().data().iter().map(|x| -x));
        c += 1;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msa::parse_a3m;
    use crate::tensor::gradcheck::{check, GradcheckConfig};

    fn grid(rows: &[&str]) -> TokenGrid {
        let text: String = rows.iter().enumerate().map(|(i, r)| format!(">r{i}\n{r}\n")).collect();
        tokenize(&parse_a3m(&text).unwrap())
    }

    fn jitter(model: &mut Model, scale: f64) {
        let s = SeedStream::new(77);
        let names: Vec<String> = model.params.names().cloned().collect();
        for n in names {
            let mut r = s.child(&n);
            model.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x += scale * r.normal());
        }
    }

    #[test]
    fn configs_validate() {
        assert!(ModelConfig::full().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());
        let bad = ModelConfig { latent_dims: vec![4, 4], ..ModelConfig::toy() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { n_dec_blocks: 3, ..ModelConfig::toy() };
        assert!(bad.validate().is_err());
        let p = ModelConfig::full();
        assert_eq!((p.level_dim(0), p.level_dim(2)), (256, 64));
        assert_eq!((0..3).map(|j| p.injection_depth(j)).collect::<Vec<_>>(), vec![0, 4, 8]);
    }

    #[test]
    fn embedding_contracts() {
        let m = Model::init(ModelConfig::toy(), &SeedStream::new(1)).unwrap();
        let g = Graph::new();
        let b = Binder::frozen(&g, &m.params);
        let gr = grid(&["MKVL", "MKVL", "M-VA"]);
        let e = embed_rows(&b, &gr).unwrap().value();
        assert_eq!(e.shape(), &[3, 4, 8]);
        assert_eq!(&e.data()[..32], &e.data()[32..64]);
        assert_eq!(embed_pair(&b, &m.config, 4).unwrap().shape(), vec![4, 4, 4]);

        let mut zero = m.clone();
        let names: Vec<String> = zero.params.names().cloned().collect();
        for n in names {
            zero.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let g = Graph::new();
        let b = Binder::frozen(&g, &zero.params);
        assert!(embed_rows(&b, &gr).unwrap().value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shapes_and_determinism() {
        let mut m = Model::init(ModelConfig::toy(), &SeedStream::new(2)).unwrap();
        jitter(&mut m, 0.2);
        let ctx = grid(&["MKVLAA", "MKILAA"]);
        let seed = SeedStream::new(3);
        let a = m.generate_logits(&ctx, 5, &seed).unwrap();
        let b = m.generate_logits(&ctx, 5, &seed).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.t, a.l, a.aa.len(), a.del.len()), (5, 6, 5 * 6 * 22, 5 * 6 * 6));
        let c = m.generate_logits(&ctx, 5, &SeedStream::new(4)).unwrap();
        assert_ne!(a.aa, c.aa);
        // bare query context
        let q = grid(&["MKVLAA"]);
        assert!(m.generate_logits(&q, 2, &seed).unwrap().aa.iter().all(|x| x.is_finite()));
        assert!(m.generate_logits(&q, 0, &seed).is_err());
        for row in a.aa_probs().chunks(22) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_levels_and_zero_deviation() {
        let cfg = ModelConfig { latent_dims: vec![2, 3], ..ModelConfig::toy() };
        let m = Model::init(cfg.clone(), &SeedStream::new(5)).unwrap();
        let g = Graph::new();
        let b = Binder::frozen(&g, &m.params);
        let ctx = grid(&["MKVL", "MKIL"]);
        let tgt = grid(&["MRVL", "M-VL", "AKVL"]);
        let enc = encode(&b, &cfg, &ctx, &tgt).unwrap();
        assert_eq!(enc.tgt.len(), cfg.n_enc_blocks + 1);
        let noise = level_noise(&cfg, 3, 4, &SeedStream::new(6));
        let dec = decode(&b, &cfg, &ctx, 3, Latents::Posterior { encoded: &enc, noise: &noise }, Some(&enc)).unwrap();
        assert_eq!(dec.levels.len(), 2);
        assert_eq!(dec.levels[0].sample.shape(), vec![3, 4, 3]);
        assert_eq!(dec.levels[1].sample.shape(), vec![3, 4, 2]);
        for lv in &dec.levels {
            // deviation heads start at zero
            assert_eq!(lv.posterior.unwrap().mean.value(), lv.prior.mean.value());
            assert_eq!(lv.posterior.unwrap().logvar.value(), lv.prior.logvar.value());
        }
        assert!(decode(&b, &cfg, &ctx, 3, Latents::Prior { noise: &noise[..1] }, None).is_err());
    }

    #[test]
    fn elbo_limits() {
        let mut m = Model::init(ModelConfig::toy(), &SeedStream::new(7)).unwrap();
        jitter(&mut m, 0.2);
        let ctx = grid(&["MKVL", "MKIL"]);
        let tgt = grid(&["MRVL", "MKVL"]);
        let s = SeedStream::new(8);
        let r0 = m.loss(&ctx, &tgt, 0.0, &s).unwrap();
        assert!((r0.total - (r0.recon_aa + r0.recon_del)).abs() < 1e-12);
        let r1 = m.loss(&ctx, &tgt, 1.0, &s).unwrap();
        assert!((r1.total - (r1.recon_aa + r1.recon_del + r1.kl.iter().sum::<f64>())).abs() < 1e-9);
        assert!(r1.kl.iter().all(|&k| k >= 0.0));
        assert!(m.loss(&ctx, &tgt, 1.5, &s).is_err());
        let empty = TokenGrid { n: 0, l: 4, tokens: vec![], del_raw: vec![], del_value: vec![] };
        assert!(m.loss(&ctx, &empty, 1.0, &s).is_err());
    }

    #[test]
    fn perfect_reconstruction_has_zero_cross_entropy() {
        let g = Graph::new();
        let mut logits = vec![-1e3; 2 * 3 * 22];
        let labels = [0usize, 5, 21, 3, 3, 1];
        for (k, &t) in labels.iter().enumerate() {
            logits[k * 22 + t] = 0.0;
        }
        let v = g.constant(Tensor::new(vec![2, 3, 22], logits).unwrap());
        assert_eq!(row_cross_entropy(v, &labels).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn transferable_across_depth_and_length() {
        let mut m = Model::init(ModelConfig::toy(), &SeedStream::new(9)).unwrap();
        jitter(&mut m, 0.1);
        let s = SeedStream::new(10);
        for &n in &[1usize, 2, 8] {
            for &l in &[4usize, 16, 64] {
                let rows: Vec<String> = (0..n).map(|i| "ACDEFGHIKL".chars().cycle().skip(i).take(l).collect()).collect();
                let mut text = format!(">q\n{}\n", "ACDEFGHIKL".chars().cycle().take(l).collect::<String>());
                for (i, r) in rows.iter().enumerate() {
                    text.push_str(&format!(">r{i}\n{r}\n"));
                }
                let gr = tokenize(&parse_a3m(&text).unwrap());
                let ctx = gr.select_rows(&(0..n).collect::<Vec<_>>());
                let tgt = gr.select_rows(&[n]);
                assert!(m.loss(&ctx, &tgt, 1.0, &s).unwrap().total.is_finite());
            }
        }
    }

    #[test]
    fn full_model_gradients() {
        let cfg = ModelConfig::toy();
        let mut m = Model::init(cfg.clone(), &SeedStream::new(11)).unwrap();
        jitter(&mut m, 0.3);
        let gr = grid(&["MKVLAC", "MKILAC", "MRVL-C"]);
        let ctx = gr.select_rows(&[0, 1]);
        let tgt = gr.select_rows(&[2]);
        let seed = SeedStream::new(12);
        let r = check(
            "model",
            &m.params,
            |b| Ok(elbo(b, &cfg, &ctx, &tgt, 1.0, &seed)?.total),
            &GradcheckConfig { max_entries: 2, ..Default::default() },
        )
        .unwrap();
        assert!(r.passed, "{:e} at {:?}", r.max_rel_err, r.worst);
    }

    #[test]
    fn checkpoint_reload_is_bit_identical() {
        let mut m = Model::init(ModelConfig::toy(), &SeedStream::new(13)).unwrap();
        jitter(&mut m, 0.2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path, Some(&m.config)).unwrap();
        assert_eq!(back, m);
        let ctx = grid(&["MKVL", "MKIL"]);
        let s = SeedStream::new(14);
        assert_eq!(back.generate_logits(&ctx, 3, &s).unwrap(), m.generate_logits(&ctx, 3, &s).unwrap());
        let other = ModelConfig { c_s: 16, ..ModelConfig::toy() };
        assert!(matches!(Model::load(&path, Some(&other)), Err(Error::DigestMismatch)));
    }

    #[test]
    fn log_mean_exp_matches_direct() {
        let lw = [-1.0, -2.0, -0.5, -3.0];
        let direct = (lw.iter().map(|x: &f64| x.exp()).sum::<f64>() / 4.0).ln();
        assert!((log_mean_exp(&lw).0 - direct).abs() < 1e-14);
        assert_eq!(log_mean_exp(&[-2.0, -2.0]).1, 0.0);
    }
}
