//! Inference protocols: calibration, augmentation, zero-shot generation,
//! prediction ranking and conformation probing.

use serde::{Deserialize, Serialize};

use crate::critic::{structure_similarity, Critic, CriticReport};
use crate::error::{Error, Result};
use crate::featurize::{detokenize, split_context_target, tokenize, DetokenizeMode, FeatureGrid};
use crate::model::Model;
use crate::msa::{AlignedRow, Msa, VOCAB_SIZE};
use crate::tensor::{SeedStream, Tensor};
use crate::trim::{trim, TrimConfig};

pub const DEFAULT_SEED: u64 = 2022;

fn check_ratios(r: &[f64]) -> Result<()> {
    if r.is_empty() || r.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::invalid("r_ctx values must be non-empty and in (0, 1]"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub r_ctx: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { r_ctx: vec![0.5, 0.7, 0.9], trials: 5, seed: DEFAULT_SEED }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratios(&self.r_ctx)?;
        if self.trials == 0 {
            return Err(Error::invalid("trials must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub n_aug: Vec<usize>,
    pub r_ctx: Vec<f64>,
    pub trials: usize,
    pub mode: OutputMode,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig { n_aug: vec![128], r_ctx: vec![0.5, 0.7, 0.9], trials: 5, mode: OutputMode::Soft, seed: DEFAULT_SEED }
    }
}

impl AugmentationConfig {
    /// Settings for generation from the query alone.
    pub fn zero_shot() -> Self {
        AugmentationConfig { n_aug: vec![16, 32, 64], r_ctx: vec![1.0], trials: 2, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratios(&self.r_ctx)?;
        if self.n_aug.is_empty() || self.n_aug.contains(&0) || self.trials == 0 {
            return Err(Error::invalid("n_aug values and trials must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_max: usize,
    pub n_sub: Vec<usize>,
    pub r_ctx: Vec<f64>,
    pub trials: usize,
    pub similarity_threshold: f64,
    pub min_confidence: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_max: 512,
            n_sub: vec![16, 32, 64],
            r_ctx: vec![0.25, 0.5, 0.75],
            trials: 1,
            similarity_threshold: 0.7,
            min_confidence: 0.0,
            seed: DEFAULT_SEED,
        }
    }
}

impl ProbeConfig {
    /// The two recommended pool caps.
    pub const N_MAX_CHOICES: [usize; 2] = [512, 1024];

    pub fn validate(&self) -> Result<()> {
        check_ratios(&self.r_ctx)?;
        if self.n_sub.is_empty() || self.n_sub.iter().any(|&k| k == 0 || k > self.n_max) || self.trials == 0 {
            return Err(Error::invalid("n_sub values must be in 1..=n_max and trials positive"));
        }
        Ok(())
    }
}

/// Residue probabilities of a feature grid as an `[N, L, 22]` tensor.
pub fn feature_tensor(grid: &FeatureGrid) -> Tensor {
    Tensor::new(vec![grid.n, grid.l, VOCAB_SIZE], grid.probs.iter().map(|&x| x as f64).collect()).expect("grid shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedTrial {
    pub r_ctx: f64,
    pub trial: usize,
    /// Indices of rows kept as context.
    pub context: Vec<usize>,
    /// Argmax rows in place of the targets.
    pub msa: Msa,
    /// One-hot context rows and predicted probabilities for the targets.
    pub features: FeatureGrid,
    /// False when the input had nothing to calibrate and was passed through.
    pub calibrated: bool,
}

fn trial_stream(seed: u64, setting: usize, trial: usize) -> SeedStream {
    SeedStream::new(seed).child_index(setting as u64).child_index(trial as u64)
}

/// Reconstructs the non-context rows through the model for every
/// `(r_ctx, trial)`. Depth, row order, headers and the query are preserved.
pub fn calibrate(msa: &Msa, model: &Model, cfg: &CalibrationConfig) -> Result<Vec<CalibratedTrial>> {
    cfg.validate()?;
    if msa.depth() < 2 {
        return Ok(vec![CalibratedTrial {
            r_ctx: 1.0,
            trial: 0,
            context: vec![0],
            msa: msa.clone(),
            features: FeatureGrid::from_msa(msa),
            calibrated: false,
        }]);
    }
    let grid = tokenize(msa);
    let mut out = Vec::with_capacity(cfg.r_ctx.len() * cfg.trials);
    for (si, &r) in cfg.r_ctx.iter().enumerate() {
        for trial in 0..cfg.trials {
            let s = trial_stream(cfg.seed, si, trial);
            let split = split_context_target(msa.depth(), r, &mut s.child("split"))?;
            let mut features = FeatureGrid::from_msa(msa);
            if split.targets.is_empty() {
                out.push(CalibratedTrial { r_ctx: r, trial, context: split.context, msa: msa.clone(), features, calibrated: true });
                continue;
            }
            let ctx = grid.select_rows(&split.context);
            let tgt = grid.select_rows(&split.targets);
            let logits = model.reconstruct_logits(&ctx, &tgt, &s.child("noise"))?;
            let probs = logits.aa_probs();
            let new_rows = detokenize(&logits, DetokenizeMode::Argmax, "");
            let mut rows: Vec<AlignedRow> = msa.rows().to_vec();
            let w = msa.len() * VOCAB_SIZE;
            for (k, &ti) in split.targets.iter().enumerate() {
                rows[ti] = AlignedRow { header: rows[ti].header.clone(), ..new_rows[k].clone() };
                for (dst, &p) in features.probs[ti * w..(ti + 1) * w].iter_mut().zip(&probs[k * w..(k + 1) * w]) {
                    *dst = p as f32;
                }
            }
            out.push(CalibratedTrial { r_ctx: r, trial, context: split.context, msa: Msa::new(rows)?, features, calibrated: true });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedTrial {
    pub n_aug: usize,
    pub r_ctx: f64,
    pub trial: usize,
    pub context: Vec<usize>,
    /// `n_aug` rows; row 0 is the query.
    pub features: FeatureGrid,
    /// Sampled sequences, in hard mode.
    pub msa: Option<Msa>,
}

/// Generates `n_aug − 1` rows from the prior for every
/// `(n_aug, r_ctx, trial)`, conditioned on a seeded context subset.
pub fn augment(msa: &Msa, model: &Model, cfg: &AugmentationConfig) -> Result<Vec<AugmentedTrial>> {
    cfg.validate()?;
    let grid = tokenize(msa);
    let query = msa.select(&[0])?;
    let mut out = Vec::new();
    let mut setting = 0;
    for &n_aug in &cfg.n_aug {
        for &r in &cfg.r_ctx {
            for trial in 0..cfg.trials {
                let s = trial_stream(cfg.seed, setting, trial);
                let split = split_context_target(msa.depth(), r, &mut s.child("split"))?;
                let ctx = grid.select_rows(&split.context);
                let mut features = FeatureGrid::from_msa(&query);
                let mut hard = None;
                if n_aug > 1 {
                    let logits = model.generate_logits(&ctx, n_aug - 1, &s.child("noise"))?;
                    match cfg.mode {
                        OutputMode::Soft => {
                            features.probs.extend(logits.aa_probs().iter().map(|&p| p as f32));
                            features.n = n_aug;
                        }
                        OutputMode::Hard => {
                            let seed = s.child("sample").next_u64();
                            let mut rows = query.rows().to_vec();
                            rows.extend(detokenize(&logits, DetokenizeMode::Sample(seed), "gen_"));
                            let m = Msa::new(rows)?;
                            features = FeatureGrid::from_msa(&m);
                            hard = Some(m);
                        }
                    }
                } else if cfg.mode == OutputMode::Hard {
                    hard = Some(query.clone());
                }
                out.push(AugmentedTrial { n_aug, r_ctx: r, trial, context: split.context, features, msa: hard });
            }
            setting += 1;
        }
    }
    Ok(out)
}

/// Augmentation with the query as the only input.
pub fn zero_shot(query: &str, model: &Model, cfg: &AugmentationConfig) -> Result<Vec<AugmentedTrial>> {
    if query.is_empty() {
        return Err(Error::EmptyInput);
    }
    augment(&Msa::from_query("query", query)?, model, cfg)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub first: usize,
}

/// Descending by confidence; equal confidences keep input order.
pub fn rank_predictions(reports: &[CriticReport]) -> Result<Ranking> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[b].confidence.total_cmp(&reports[a].confidence));
    Ok(Ranking { first: order[0], order })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTrial {
    pub n_sub: usize,
    pub r_ctx: f64,
    pub trial: usize,
    /// Rows of the trimmed pool; always starts with the query.
    pub subsample: Vec<usize>,
    pub features: FeatureGrid,
    pub report: CriticReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<usize>,
    pub mean_confidence: f64,
    pub best: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub pool_depth: usize,
    pub trials: Vec<ProbeTrial>,
    pub ensembles: Vec<Ensemble>,
}

/// Single-linkage groups of `items` under `similar(a, b)`; groups and their
/// members are in ascending index order.
pub fn single_linkage(n: usize, similar: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if similar(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// Structure descriptor of a trial: the critic's when it reports one, else the
/// mean residue profile of the features.
fn descriptor(t: &ProbeTrial) -> Vec<f64> {
    if let Some(s) = &t.report.structure {
        return s.clone();
    }
    let f = &t.features;
    let mut m = vec![0.0; f.l * VOCAB_SIZE];
    for r in 0..f.n {
        m.iter_mut().zip(f.row(r)).for_each(|(a, &x)| *a += x as f64 / f.n as f64);
    }
    m
}

pub fn probe(pool: &Msa, model: &Model, critic: &dyn Critic, cfg: &ProbeConfig) -> Result<ProbeResult> {
    probe_with(pool, model, critic, cfg, &structure_similarity)
}

/// Trims the pool, then for every `(n_sub, r_ctx, trial)` calibrates a
/// query-keeping subsample, scores it, and clusters the confident trials by
/// `similarity` of their structure descriptors.
pub fn probe_with(
    pool: &Msa,
    model: &Model,
    critic: &dyn Critic,
    cfg: &ProbeConfig,
    similarity: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let trimmed = trim(pool, &TrimConfig::with_n_max(cfg.n_max));
    let min_sub = *cfg.n_sub.iter().min().expect("validated non-empty");
    if trimmed.depth() < min_sub {
        return Err(Error::invalid(format!("pool depth {} after trimming is below n_sub {min_sub}", trimmed.depth())));
    }
    let mut trials = Vec::new();
    let mut setting = 0;
    for &n_sub in &cfg.n_sub {
        for &r in &cfg.r_ctx {
            for trial in 0..cfg.trials {
                let s = trial_stream(cfg.seed, setting, trial);
                let k = n_sub.min(trimmed.depth());
                let mut rest: Vec<usize> = s.child("subsample").choose(trimmed.depth() - 1, k - 1).into_iter().map(|i| i + 1).collect();
                rest.sort_unstable();
                let subsample: Vec<usize> = std::iter::once(0).chain(rest).collect();
                let sub = trimmed.select(&subsample)?;
                let cal_cfg = CalibrationConfig { r_ctx: vec![r], trials: 1, seed: s.child("calibrate").next_u64() };
                let cal = calibrate(&sub, model, &cal_cfg)?.remove(0);
                let report = critic.score(&feature_tensor(&cal.features))?;
                trials.push(ProbeTrial { n_sub, r_ctx: r, trial, subsample, features: cal.features, report });
            }
            setting += 1;
        }
    }
    let confident: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].report.confidence >= cfg.min_confidence).collect();
    let desc: Vec<Vec<f64>> = confident.iter().map(|&i| descriptor(&trials[i])).collect();
    let groups = single_linkage(confident.len(), |a, b| similarity(&desc[a], &desc[b]) >= cfg.similarity_threshold);
    let ensembles = groups
        .into_iter()
        .map(|g| {
            let members: Vec<usize> = g.iter().map(|&k| confident[k]).collect();
            let reports: Vec<CriticReport> = members.iter().map(|&i| trials[i].report.clone()).collect();
            let best = members[rank_predictions(&reports).expect("non-empty group").first];
            let mean_confidence = reports.iter().map(|r| r.confidence).sum::<f64>() / reports.len() as f64;
            Ensemble { members, mean_confidence, best }
        })
        .collect();
    Ok(ProbeResult { pool_depth: trimmed.depth(), trials, ensembles })
}

/// One line of a run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub protocol: String,
    pub seed: u64,
    pub trial: usize,
    pub r_ctx: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_aug: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sub: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<usize>,
    pub outputs: Vec<String>,
}
