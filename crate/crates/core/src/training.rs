//! Pretraining on the ELBO, schedules, and critic-guided fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::critic::{Critic, CHANNELS, CONFIDENCE, FAPE, TORSION, VIOLATION};
use crate::error::{Error, Result};
use crate::featurize::{split_context_target, tokenize, TokenGrid};
use crate::model::{decode, elbo, level_noise, Latents, Model};
use crate::msa::{Msa, VOCAB_SIZE};
use crate::tensor::{
    adam_step, clip_by_global_norm, global_norm, AdamConfig, AdamState, Binder, Grads, Graph, SeedStream, Tensor, Var,
};

/// Weights of the fine-tuning loss channels and of the generative term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneWeights {
    pub fape: f64,
    pub torsion: f64,
    pub violation: f64,
    pub confidence: f64,
    pub evogen: f64,
}

impl Default for FinetuneWeights {
    fn default() -> Self {
        FinetuneWeights { fape: 0.5, torsion: 0.5, violation: 0.01, confidence: 0.01, evogen: 0.1 }
    }
}

impl FinetuneWeights {
    pub fn channel(&self, name: &str) -> f64 {
        match name {
            FAPE => self.fape,
            TORSION => self.torsion,
            VIOLATION => self.violation,
            CONFIDENCE => self.confidence,
            _ => 0.0,
        }
    }
}

/// What the critic receives from the generator during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedMode {
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop_len: usize,
    pub crop_depth: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub total_pretrain_steps: u64,
    pub total_finetune_steps: u64,
    pub clip_norm: f64,
    pub kl_warmup_fraction: f64,
    pub r_ctx_min: f64,
    pub r_ctx_max: f64,
    pub adam: AdamConfig,
    pub finetune_weights: FinetuneWeights,
    pub feed: FeedMode,
    pub gumbel_temperature: f64,
    pub finetune_lr: f64,
    /// Rows generated per MSA for the critic.
    pub finetune_rows: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            crop_len: 256,
            crop_depth: 128,
            lr_peak: 5e-4,
            lr_final: 1e-5,
            warmup_steps: 3000,
            decay_steps: 100_000,
            total_pretrain_steps: 150_000,
            total_finetune_steps: 50_000,
            clip_norm: 0.1,
            kl_warmup_fraction: 0.3,
            r_ctx_min: 0.3,
            r_ctx_max: 0.9,
            adam: AdamConfig::default(),
            finetune_weights: FinetuneWeights::default(),
            feed: FeedMode::Soft,
            gumbel_temperature: 1.0,
            finetune_lr: 1e-4,
            finetune_rows: 32,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop_len == 0 || self.crop_depth < 2 || self.finetune_rows == 0 {
            return Err(Error::invalid("batch_size, crop_len, finetune_rows must be positive and crop_depth ≥ 2"));
        }
        let positive = [self.lr_peak, self.lr_final, self.clip_norm, self.gumbel_temperature, self.finetune_lr];
        if positive.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("learning rates, clip_norm and temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return Err(Error::invalid("kl_warmup_fraction outside [0, 1]"));
        }
        if !(0.0 < self.r_ctx_min && self.r_ctx_min <= self.r_ctx_max && self.r_ctx_max <= 1.0) {
            return Err(Error::invalid("need 0 < r_ctx_min ≤ r_ctx_max ≤ 1"));
        }
        Ok(())
    }
}

/// Linear warm-up from 0, cosine decay to `lr_final`, then constant.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let t = step - cfg.warmup_steps;
    if t >= cfg.decay_steps {
        return cfg.lr_final;
    }
    let frac = t as f64 / cfg.decay_steps as f64;
    cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// KL weight: linear from 0 to 1 over the first `kl_warmup_fraction` of
/// pretraining.
pub fn kl_beta(step: u64, cfg: &TrainConfig) -> f64 {
    let ramp = cfg.kl_warmup_fraction * cfg.total_pretrain_steps as f64;
    if ramp <= 0.0 {
        return 1.0;
    }
    (step as f64 / ramp).min(1.0)
}

pub fn loss_weight(target_length: usize) -> f64 {
    (target_length as f64).sqrt()
}

/// Contiguous column window at a random offset, then a depth subsample that
/// keeps the query and the original row order.
pub fn crop_msa(msa: &Msa, max_len: usize, max_depth: usize, rng: &mut SeedStream) -> Result<Msa> {
    let mut out = if msa.len() > max_len {
        let start = rng.below(msa.len() - max_len + 1);
        msa.crop_columns(start, max_len)?
    } else {
        msa.clone()
    };
    if out.depth() > max_depth {
        let mut keep: Vec<usize> = rng.choose(out.depth() - 1, max_depth - 1).into_iter().map(|i| i + 1).collect();
        keep.sort_unstable();
        keep.insert(0, 0);
        out = out.select(&keep)?;
    }
    Ok(out)
}

/// Gumbel-softmax relaxation with its hard one-hot and the straight-through
/// combination.
pub struct GumbelSample<'g> {
    pub soft: Var<'g>,
    pub hard: Tensor,
    /// Forward value equals `hard` exactly; adjoints pass to `soft` unchanged.
    pub st: Var<'g>,
}

pub fn gumbel_st<'g>(logits: Var<'g>, temperature: f64, rng: &mut SeedStream) -> Result<GumbelSample<'g>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let g = logits.graph();
    let shape = logits.shape();
    let axis = logits.last();
    let noise = g.constant(rng.gumbel_tensor(&shape));
    let soft = logits.add(noise)?.scale(1.0 / temperature)?.softmax(axis)?;
    let mut hard = Tensor::zeros(&shape);
    let k = *shape.last().expect("rank checked by softmax");
    soft.with_value(|s| {
        for (row, out) in s.data().chunks(k).zip(hard.data_mut().chunks_mut(k)) {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            out[best] = 1.0;
        }
    });
    let st = g.constant(hard.clone()).add(soft.sub(soft.stop_gradient())?)?;
    Ok(GumbelSample { soft, hard, st })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub phase: String,
    pub step: u64,
    pub lr: f64,
    pub beta: f64,
    pub loss: f64,
    pub recon_aa: f64,
    pub recon_del: f64,
    pub kl: Vec<f64>,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub n_msas: usize,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_grad_norm: Option<f64>,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

struct Prepared {
    ctx: TokenGrid,
    tgt: TokenGrid,
    query: Vec<usize>,
}

fn prepare(msa: &Msa, cfg: &TrainConfig, s: &SeedStream) -> Result<Option<Prepared>> {
    if msa.depth() < 2 {
        return Ok(None);
    }
    let cropped = crop_msa(msa, cfg.crop_len, cfg.crop_depth, &mut s.child("crop"))?;
    let grid = tokenize(&cropped);
    let mut rs = s.child("split");
    let r = rs.uniform_range(cfg.r_ctx_min, cfg.r_ctx_max);
    let split = split_context_target(grid.n, r, &mut rs)?;
    if split.targets.is_empty() {
        return Ok(None);
    }
    Ok(Some(Prepared {
        ctx: grid.select_rows(&split.context),
        tgt: grid.select_rows(&split.targets),
        query: grid.row_tokens(0).to_vec(),
    }))
}

struct Accum {
    recon_aa: f64,
    recon_del: f64,
    kl: Vec<f64>,
    used: usize,
}

impl Accum {
    fn new(levels: usize) -> Self {
        Accum { recon_aa: 0.0, recon_del: 0.0, kl: vec![0.0; levels], used: 0 }
    }

    fn add(&mut self, r: &crate::model::LossRecord) {
        self.recon_aa += r.recon_aa;
        self.recon_del += r.recon_del;
        self.kl.iter_mut().zip(&r.kl).for_each(|(a, b)| *a += b);
        self.used += 1;
    }

    fn means(&self) -> (f64, f64, Vec<f64>) {
        let n = self.used.max(1) as f64;
        (self.recon_aa / n, self.recon_del / n, self.kl.iter().map(|k| k / n).collect())
    }
}

fn add_grads(a: &mut BTreeMap<String, Tensor>, b: BTreeMap<String, Tensor>) {
    for (k, t) in b {
        match a.get_mut(&k) {
            Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += y),
            None => {
                a.insert(k, t);
            }
        }
    }
}

/// Owns the model and optimizer state across steps.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub step: u64,
    pub cfg: TrainConfig,
    pub seed: SeedStream,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, seed: SeedStream) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { model, opt: AdamState::default(), step: 0, cfg, seed })
    }

    /// Corpus indices for the current step, without replacement.
    pub fn sample_batch(&self, corpus_len: usize) -> Vec<usize> {
        self.seed.child("batch").child_index(self.step).choose(corpus_len, self.cfg.batch_size)
    }

    fn msa_stream(&self, i: usize) -> SeedStream {
        self.seed.child("step").child_index(self.step).child_index(i as u64)
    }

    /// Length-weighted negative ELBO of one prepared MSA: `sqrt(L)` times the
    /// per-position negative ELBO.
    fn weighted_elbo<'g>(&self, b: &Binder<'g>, p: &Prepared, beta: f64, s: &SeedStream) -> Result<(Var<'g>, crate::model::LossRecord)> {
        let terms = elbo(b, &self.model.config, &p.ctx, &p.tgt, beta, &s.child("noise"))?;
        let l = p.tgt.l;
        Ok((terms.total.scale(loss_weight(l) / l as f64)?, terms.record()))
    }

    fn apply(&mut self, mut grads: BTreeMap<String, Tensor>, lr: f64) -> Result<(f64, f64)> {
        if grads.values().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let norm = clip_by_global_norm(&mut grads, self.cfg.clip_norm);
        let clipped = global_norm(&grads);
        adam_step(&mut self.model.params, &grads, &mut self.opt, lr, &self.cfg.adam)?;
        self.step += 1;
        Ok((norm, clipped))
    }

    pub fn pretrain_step(&mut self, batch: &[Msa]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        let beta = kl_beta(self.step, &self.cfg);
        let lr = lr_at_step(self.step, &self.cfg);
        let g = Graph::new();
        let b = Binder::new(&g, &self.model.params);
        let mut acc = Accum::new(self.model.config.num_levels());
        let mut total: Option<Var> = None;
        let mut skipped = 0;
        for (i, msa) in batch.iter().enumerate() {
            let s = self.msa_stream(i);
            let Some(p) = prepare(msa, &self.cfg, &s)? else {
                log::warn!("skipping MSA of depth {} with no possible target", msa.depth());
                skipped += 1;
                continue;
            };
            let (w, rec) = self.weighted_elbo(&b, &p, beta, &s)?;
            acc.add(&rec);
            total = Some(match total {
                Some(t) => t.add(w)?,
                None => w,
            });
        }
        let Some(total) = total else {
            return Err(Error::invalid("no MSA in the batch has a target row"));
        };
        let loss = total.item();
        if !loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss".into()));
        }
        let grads = b.collect(&g.backward(total)?);
        drop(b);
        let step = self.step;
        let (grad_norm, clipped_norm) = self.apply(grads, lr)?;
        let (recon_aa, recon_del, kl) = acc.means();
        Ok(StepMetrics {
            phase: "pretrain".into(),
            step,
            lr,
            beta,
            loss,
            recon_aa,
            recon_del,
            kl,
            grad_norm,
            clipped_norm,
            n_msas: acc.used,
            skipped,
            critic: None,
            critic_loss: None,
            critic_grad_norm: None,
        })
    }

    /// One step on the weighted critic channels of generated rows plus the
    /// weighted negative ELBO. The critic's feature gradient enters through
    /// `sum(features ⊙ stop_grad(G))`.
    pub fn finetune_step(&mut self, batch: &[Msa], critic: &dyn Critic) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !critic.capabilities().differentiable {
            return Err(Error::invalid("fine-tuning needs a differentiable critic"));
        }
        let w = self.cfg.finetune_weights;
        let lr = self.cfg.finetune_lr;
        let mcfg = self.model.config.clone();
        let g = Graph::new();
        let b = Binder::new(&g, &self.model.params);
        let mut acc = Accum::new(mcfg.num_levels());
        let mut critic_sum: BTreeMap<String, f64> = CHANNELS.iter().map(|c| (c.to_string(), 0.0)).collect();
        let mut critic_loss = 0.0;
        let mut surrogate: Option<Var> = None;
        let mut generative: Option<Var> = None;
        let mut skipped = 0;
        for (i, msa) in batch.iter().enumerate() {
            let s = self.msa_stream(i);
            let Some(p) = prepare(msa, &self.cfg, &s)? else {
                log::warn!("skipping MSA of depth {} with no possible target", msa.depth());
                skipped += 1;
                continue;
            };
            let (wel, rec) = self.weighted_elbo(&b, &p, 1.0, &s)?;
            acc.add(&rec);
            let wel = wel.scale(w.evogen)?;
            generative = Some(match generative {
                Some(t) => t.add(wel)?,
                None => wel,
            });

            let t = self.cfg.finetune_rows;
            let noise = level_noise(&mcfg, t, p.ctx.l, &s.child("generate"));
            let dec = decode(&b, &mcfg, &p.ctx, t, Latents::Prior { noise: &noise }, None)?;
            let rows = match self.cfg.feed {
                FeedMode::Soft => dec.aa_logits.softmax(2)?,
                FeedMode::Hard => gumbel_st(dec.aa_logits, self.cfg.gumbel_temperature, &mut s.child("gumbel"))?.st,
            };
            let query = g.one_hot(&p.query, &[1, p.ctx.l], VOCAB_SIZE)?;
            let features = g.concat(&[query, rows], 0)?;
            let (report, fgrads) = critic.differentiable_score(&features.value())?;
            report.validate()?;
            let mut gsum = Tensor::zeros(&features.shape());
            for (name, gr) in &fgrads {
                let wc = w.channel(name);
                if !gr.is_finite() {
                    return Err(Error::NonFinite(format!("critic gradient for {name}")));
                }
                gsum.data_mut().iter_mut().zip(gr.data()).for_each(|(a, x)| *a += wc * x);
            }
            for (name, v) in &report.channels {
                *critic_sum.entry(name.clone()).or_default() += v;
                critic_loss += w.channel(name) * v;
            }
            let sur = features.mul(g.constant(gsum))?.sum_all()?;
            surrogate = Some(match surrogate {
                Some(t) => t.add(sur)?,
                None => sur,
            });
        }
        let (Some(surrogate), Some(generative)) = (surrogate, generative) else {
            return Err(Error::invalid("no MSA in the batch has a target row"));
        };
        let used = acc.used as f64;
        let loss = critic_loss + generative.item();
        if !loss.is_finite() {
            return Err(Error::NonFinite("fine-tuning loss".into()));
        }
        let crit_grads = b.collect(&g.backward(surrogate)?);
        let critic_grad_norm = global_norm(&crit_grads);
        let mut grads = b.collect(&g.backward(generative)?);
        add_grads(&mut grads, crit_grads);
        drop(b);
        let step = self.step;
        let (grad_norm, clipped_norm) = self.apply(grads, lr)?;
        let (recon_aa, recon_del, kl) = acc.means();
        Ok(StepMetrics {
            phase: "finetune".into(),
            step,
            lr,
            beta: 1.0,
            loss,
            recon_aa,
            recon_del,
            kl,
            grad_norm,
            clipped_norm,
            n_msas: acc.used,
            skipped,
            critic: Some(critic_sum.into_iter().map(|(k, v)| (k, v / used)).collect()),
            critic_loss: Some(critic_loss / used),
            critic_grad_norm: Some(critic_grad_norm),
        })
    }
}

/// Adjoints of `loss` for each leaf in `leaves`, for tests that compare
/// paths through [`gumbel_st`].
pub fn leaf_grads(g: &Graph, loss: Var<'_>, leaves: &[Var<'_>]) -> Result<Vec<Tensor>> {
    let gr: Grads = g.backward(loss)?;
    Ok(leaves.iter().map(|&l| gr.get(l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::SyntheticCritic;
    use crate::model::ModelConfig;
    use crate::synth::{synth_corpus, SyntheticFamilyConfig};
    use proptest::prelude::*;

    #[test]
    fn schedule_anchors() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_step(0, &c), 0.0);
        assert!((lr_at_step(3000, &c) - 5e-4).abs() < 1e-12);
        assert!((lr_at_step(103_000, &c) - 1e-5).abs() < 1e-12);
        assert_eq!(lr_at_step(140_000, &c), 1e-5);
        assert!((lr_at_step(1500, &c) - 2.5e-4).abs() < 1e-15);
        let mid = lr_at_step(53_000, &c);
        assert!((mid - (1e-5 + 0.5 * (5e-4 - 1e-5))).abs() < 1e-12);
    }

    #[test]
    fn kl_ramp() {
        let c = TrainConfig::default();
        assert_eq!(kl_beta(0, &c), 0.0);
        assert_eq!(kl_beta(22_500, &c), 0.5);
        assert_eq!(kl_beta(45_000, &c), 1.0);
        assert_eq!(kl_beta(149_999, &c), 1.0);
        let mut prev = 0.0;
        for s in (0..60_000).step_by(997) {
            let b = kl_beta(s, &c);
            assert!(b >= prev && b <= 1.0);
            prev = b;
        }
    }

    #[test]
    fn length_weights() {
        assert_eq!(loss_weight(1), 1.0);
        assert_eq!(loss_weight(256), 16.0);
        assert!((1..500).all(|l| loss_weight(l + 1) > loss_weight(l)));
    }

    #[test]
    fn defaults_match_quoted_values() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.crop_len, c.crop_depth), (128, 256, 128));
        assert_eq!(c.adam.eps, 1e-6);
        assert_eq!(c.clip_norm, 0.1);
        assert_eq!(c.finetune_weights, FinetuneWeights { fape: 0.5, torsion: 0.5, violation: 0.01, confidence: 0.01, evogen: 0.1 });
        assert_eq!((c.total_pretrain_steps, c.total_finetune_steps), (150_000, 50_000));
        assert_eq!(c.feed, FeedMode::Soft);
    }

    #[test]
    fn crop_keeps_query_and_limits() {
        let cfg = SyntheticFamilyConfig { n_families: 1, depth: 20, length: 30, ..Default::default() };
        let msa = synth_corpus(&cfg).unwrap().remove(0).msa;
        let mut rng = SeedStream::new(1);
        let c = crop_msa(&msa, 10, 5, &mut rng).unwrap();
        assert_eq!((c.depth(), c.len()), (5, 10));
        assert_eq!(c.query().header, msa.query().header);
        let same = crop_msa(&msa, 100, 100, &mut rng).unwrap();
        assert_eq!(same, msa);
    }

    fn hardness_check(logits: &Tensor, temperature: f64, seed: u64) {
        let g = Graph::new();
        let x = g.leaf(logits.clone());
        let s = gumbel_st(x, temperature, &mut SeedStream::new(seed)).unwrap();
        assert_eq!(s.st.value(), s.hard);
        for row in s.hard.data().chunks(logits.shape()[logits.rank() - 1]) {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), row.len() - 1);
        }
        let up = g.constant(SeedStream::new(seed ^ 7).normal_tensor(logits.shape()));
        let via_st = leaf_grads(&g, s.st.mul(up).unwrap().sum_all().unwrap(), &[x]).unwrap();
        let via_soft = leaf_grads(&g, s.soft.mul(up).unwrap().sum_all().unwrap(), &[x]).unwrap();
        assert_eq!(via_st, via_soft);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn straight_through_identity(seed in any::<u64>(), t in 1usize..4, l in 1usize..6, temp in 0.1f64..3.0) {
            let logits = SeedStream::new(seed).normal_tensor(&[t, l, VOCAB_SIZE]).map(|x| 3.0 * x);
            hardness_check(&logits, temp, seed);
        }
    }

    #[test]
    fn low_temperature_soft_is_nearly_hard() {
        let mut d = vec![0.0; 3 * 22];
        for (r, row) in d.chunks_mut(22).enumerate() {
            row[r * 5] = 30.0;
        }
        let g = Graph::new();
        let s = gumbel_st(g.constant(Tensor::new(vec![3, 22], d).unwrap()), 0.01, &mut SeedStream::new(2)).unwrap();
        let soft = s.soft.value();
        assert!(soft.data().iter().zip(s.hard.data()).all(|(a, b)| (a - b).abs() < 1e-3));
        assert!(gumbel_st(g.constant(Tensor::zeros(&[1, 22])), 0.0, &mut SeedStream::new(2)).is_err());
    }

    fn tiny() -> (Vec<Msa>, TrainConfig) {
        let sc = SyntheticFamilyConfig { n_families: 3, depth: 6, length: 8, ..Default::default() };
        let corpus = synth_corpus(&sc).unwrap().into_iter().map(|f| f.msa).collect();
        let tc = TrainConfig { batch_size: 2, warmup_steps: 2, total_pretrain_steps: 4, finetune_rows: 3, finetune_lr: 1e-3, ..Default::default() };
        (corpus, tc)
    }

    #[test]
    fn pretrain_is_deterministic_and_clipped() {
        let (corpus, tc) = tiny();
        let run = || {
            let m = Model::init(ModelConfig::toy(), &SeedStream::new(3)).unwrap();
            let mut tr = Trainer::new(m, tc.clone(), SeedStream::new(4)).unwrap();
            let mut out = Vec::new();
            for _ in 0..3 {
                let idx = tr.sample_batch(corpus.len());
                let batch: Vec<Msa> = idx.iter().map(|&i| corpus[i].clone()).collect();
                out.push(tr.pretrain_step(&batch).unwrap());
            }
            (tr.model, out)
        };
        let (ma, ra) = run();
        let (mb, rb) = run();
        assert_eq!(ma, mb);
        assert_eq!(ra, rb);
        for r in &ra {
            assert!(r.loss.is_finite() && r.kl.iter().all(|&k| k >= 0.0));
            assert!(r.clipped_norm <= tc.clip_norm + 1e-9);
        }
        assert_eq!(ra[0].lr, 0.0);
        assert!(ra[1].lr > 0.0);
        let line = ra[0].to_json_line();
        assert!(line.starts_with("{\"phase\":\"pretrain\""));
    }

    #[test]
    fn shallow_msas_are_skipped() {
        let (corpus, tc) = tiny();
        let m = Model::init(ModelConfig::toy(), &SeedStream::new(3)).unwrap();
        let mut tr = Trainer::new(m, tc, SeedStream::new(4)).unwrap();
        let lone = Msa::from_query("q", "MKVLAAGH").unwrap();
        let r = tr.pretrain_step(&[lone.clone(), corpus[0].clone()]).unwrap();
        assert_eq!((r.skipped, r.n_msas), (1, 1));
        assert!(tr.pretrain_step(&[lone]).is_err());
    }

    #[test]
    fn zero_critic_weights_reduce_to_scaled_pretraining() {
        let (corpus, mut tc) = tiny();
        tc.total_pretrain_steps = 0;
        let m = Model::init(ModelConfig::toy(), &SeedStream::new(5)).unwrap();
        let batch = &corpus[..2];
        let mut pre = Trainer::new(m.clone(), tc.clone(), SeedStream::new(6)).unwrap();
        let rp = pre.pretrain_step(batch).unwrap();
        let zero = FinetuneWeights { fape: 0.0, torsion: 0.0, violation: 0.0, confidence: 0.0, evogen: 0.1 };
        let mut ft = Trainer::new(m, TrainConfig { finetune_weights: zero, ..tc }, SeedStream::new(6)).unwrap();
        let critic = SyntheticCritic::new(vec![0; 8]).unwrap();
        let rf = ft.finetune_step(batch, &critic).unwrap();
        assert_eq!(rf.critic_grad_norm, Some(0.0));
        assert!((rf.loss - 0.1 * rp.loss).abs() <= 1e-12 * rp.loss.abs());
        assert!((rf.grad_norm - 0.1 * rp.grad_norm).abs() <= 1e-9 * rp.grad_norm);
    }

    #[test]
    fn critic_gradient_reaches_the_generator() {
        let (corpus, tc) = tiny();
        for feed in [FeedMode::Soft, FeedMode::Hard] {
            let m = Model::init(ModelConfig::toy(), &SeedStream::new(7)).unwrap();
            let mut ft = Trainer::new(m, TrainConfig { feed, ..tc.clone() }, SeedStream::new(8)).unwrap();
            let critic = SyntheticCritic::new(vec![3; 8]).unwrap();
            let r = ft.finetune_step(&corpus[..1], &critic).unwrap();
            assert!(r.critic_grad_norm.unwrap() > 0.0, "{feed:?}");
            assert!(r.critic.unwrap()[FAPE] > 0.0);
        }
    }
}
