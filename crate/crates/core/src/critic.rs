//! Scorers of generated MSA features, standing in for a folding engine.
//!
//! Features are per-row residue probabilities `[N, L, 22]`. A critic reports
//! named loss channels, a confidence in `[0, 100]`, and optionally per-position
//! confidences and a structure descriptor used for clustering predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msa::VOCAB_SIZE;
use crate::tensor::{Graph, Tensor, Var};

pub const FAPE: &str = "fape";
pub const TORSION: &str = "torsion";
pub const VIOLATION: &str = "violation";
pub const CONFIDENCE: &str = "confidence";
pub const CHANNELS: [&str; 4] = [FAPE, TORSION, VIOLATION, CONFIDENCE];

const PROB_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub channels: BTreeMap<String, f64>,
    pub confidence: f64,
    pub per_position: Option<Vec<f64>>,
    /// Descriptor of the predicted structure; compared by probe clustering.
    pub structure: Option<Vec<f64>>,
}

impl CriticReport {
    pub fn channel(&self, name: &str) -> f64 {
        self.channels.get(name).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.channels.values().all(|v| v.is_finite())
            && self.per_position.iter().flatten().all(|v| v.is_finite())
            && self.structure.iter().flatten().all(|v| v.is_finite());
        if !finite || !self.confidence.is_finite() {
            return Err(Error::NonFinite("critic report".into()));
        }
        if !(0.0..=100.0).contains(&self.confidence) {
            return Err(Error::invalid(format!("confidence {} outside [0, 100]", self.confidence)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriticCapabilities {
    pub differentiable: bool,
    pub structure: bool,
}

pub trait Critic {
    fn score(&self, features: &Tensor) -> Result<CriticReport>;

    /// Report plus the gradient of every loss channel with respect to the
    /// features.
    fn differentiable_score(&self, features: &Tensor) -> Result<(CriticReport, BTreeMap<String, Tensor>)>;

    fn capabilities(&self) -> CriticCapabilities;
}

/// Differentiable scorer against one or two hidden residue profiles.
///
/// The fape channel is the per-position cross-entropy of the hidden profile
/// under the mean feature profile; torsion is the squared error of that mean
/// profile; violation is the mean gap probability; confidence is the
/// normalized entropy of the mean profile. With two profiles the fape channel
/// takes whichever is closer, giving two optima.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCritic {
    pub profile: Vec<usize>,
    pub alternate: Option<Vec<usize>>,
}

struct Channels<'g> {
    fape: Var<'g>,
    torsion: Var<'g>,
    violation: Var<'g>,
    confidence: Var<'g>,
    per_position_ce: Var<'g>,
    structure: Var<'g>,
}

impl SyntheticCritic {
    pub fn new(profile: Vec<usize>) -> Result<Self> {
        Self::check_profile(&profile)?;
        Ok(SyntheticCritic { profile, alternate: None })
    }

    pub fn two_minimum(a: Vec<usize>, b: Vec<usize>) -> Result<Self> {
        Self::check_profile(&a)?;
        Self::check_profile(&b)?;
        if a.len() != b.len() {
            return Err(Error::shape("both profiles need the same length"));
        }
        Ok(SyntheticCritic { profile: a, alternate: Some(b) })
    }

    fn check_profile(p: &[usize]) -> Result<()> {
        if p.is_empty() || p.iter().any(|&t| t >= VOCAB_SIZE) {
            return Err(Error::invalid("profile must be non-empty with tokens below 22"));
        }
        Ok(())
    }

    fn check(&self, features: &Tensor) -> Result<()> {
        let s = features.shape();
        if s.len() != 3 || s[1] != self.profile.len() || s[2] != VOCAB_SIZE || s[0] == 0 {
            return Err(Error::shape(format!("features {s:?} for a profile of length {}", self.profile.len())));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("critic features".into()));
        }
        Ok(())
    }

    fn channels<'g>(&self, g: &'g Graph, f: Var<'g>) -> Result<Channels<'g>> {
        let l = self.profile.len();
        let mean = f.mean(0)?;
        let logp = mean.clamp(PROB_FLOOR, 1.0)?.log()?;
        let ce_for = |p: &[usize]| -> Result<(Var<'g>, Var<'g>)> {
            let oh = g.one_hot(p, &[l], VOCAB_SIZE)?;
            let ce = logp.mul(oh)?.sum(1)?.neg()?;
            let sq = mean.sub(oh)?.square()?.sum(1)?.mean(0)?;
            Ok((ce, sq))
        };
        let (ce_a, sq_a) = ce_for(&self.profile)?;
        let (ce, torsion, structure) = match &self.alternate {
            None => (ce_a, sq_a, logp.mul(g.one_hot(&self.profile, &[l], VOCAB_SIZE)?)?.sum(1)?.exp()?),
            Some(b) => {
                let (ce_b, sq_b) = ce_for(b)?;
                let pa = mean.mul(g.one_hot(&self.profile, &[l], VOCAB_SIZE)?)?.sum(1)?;
                let pb = mean.mul(g.one_hot(b, &[l], VOCAB_SIZE)?)?.sum(1)?;
                if ce_a.mean(0)?.item() <= ce_b.mean(0)?.item() {
                    (ce_a, sq_a, pa.sub(pb)?)
                } else {
                    (ce_b, sq_b, pa.sub(pb)?)
                }
            }
        };
        let violation = f.slice(2, VOCAB_SIZE - 1, 1)?.mean_all()?;
        let entropy = mean.mul(logp)?.sum(1)?.neg()?.scale(1.0 / (VOCAB_SIZE as f64).ln())?.mean(0)?;
        Ok(Channels { fape: ce.mean(0)?, torsion, violation, confidence: entropy, per_position_ce: ce, structure })
    }

    fn report(c: &Channels<'_>) -> CriticReport {
        let mut channels = BTreeMap::new();
        channels.insert(FAPE.to_string(), c.fape.item());
        channels.insert(TORSION.to_string(), c.torsion.item());
        channels.insert(VIOLATION.to_string(), c.violation.item());
        channels.insert(CONFIDENCE.to_string(), c.confidence.item());
        CriticReport {
            confidence: 100.0 * (-c.fape.item()).exp(),
            per_position: Some(c.per_position_ce.value().data().iter().map(|x| 100.0 * (-x).exp()).collect()),
            structure: Some(c.structure.value().into_data()),
            channels,
        }
    }
}

impl Critic for SyntheticCritic {
    fn score(&self, features: &Tensor) -> Result<CriticReport> {
        self.check(features)?;
        let g = Graph::new();
        let f = g.constant(features.clone());
        let r = Self::report(&self.channels(&g, f)?);
        r.validate()?;
        Ok(r)
    }

    fn differentiable_score(&self, features: &Tensor) -> Result<(CriticReport, BTreeMap<String, Tensor>)> {
        self.check(features)?;
        let g = Graph::new();
        let f = g.leaf(features.clone());
        let c = self.channels(&g, f)?;
        let r = Self::report(&c);
        r.validate()?;
        let mut grads = BTreeMap::new();
        for (name, v) in [(FAPE, c.fape), (TORSION, c.torsion), (VIOLATION, c.violation), (CONFIDENCE, c.confidence)] {
            let mut gr = g.grad(v, &[f])?;
            grads.insert(name.to_string(), gr.pop().expect("one leaf"));
        }
        Ok((r, grads))
    }

    fn capabilities(&self) -> CriticCapabilities {
        CriticCapabilities { differentiable: true, structure: true }
    }
}

/// `1 − mean |a − b|`, the default similarity between structure descriptors.
pub fn structure_similarity(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    1.0 - a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeedStream;

    fn one_hot_features(n: usize, p: &[usize]) -> Tensor {
        let l = p.len();
        let mut d = vec![0.0; n * l * VOCAB_SIZE];
        for r in 0..n {
            for (i, &t) in p.iter().enumerate() {
                d[(r * l + i) * VOCAB_SIZE + t] = 1.0;
            }
        }
        Tensor::new(vec![n, l, VOCAB_SIZE], d).unwrap()
    }

    #[test]
    fn matching_features_score_perfectly() {
        let p = vec![0, 4, 7, 19, 2];
        let c = SyntheticCritic::new(p.clone()).unwrap();
        let r = c.score(&one_hot_features(3, &p)).unwrap();
        assert_eq!(r.channel(FAPE), 0.0);
        assert_eq!(r.confidence, 100.0);
        assert_eq!(r.channel(TORSION), 0.0);
        assert_eq!(r.channel(VIOLATION), 0.0);
    }

    #[test]
    fn uniform_features_cost_log_vocab() {
        let c = SyntheticCritic::new(vec![1, 2, 3]).unwrap();
        let f = Tensor::full(&[2, 3, VOCAB_SIZE], 1.0 / VOCAB_SIZE as f64);
        let r = c.score(&f).unwrap();
        assert!((r.channel(FAPE) - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        assert!((r.channel(CONFIDENCE) - 1.0).abs() < 1e-12);
        assert!((r.channel(VIOLATION) - 1.0 / 22.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = SyntheticCritic::new(vec![1, 5, 21]).unwrap();
        let mut rng = SeedStream::new(4);
        let raw = rng.normal_tensor(&[2, 3, VOCAB_SIZE]);
        let mut d = raw.data().to_vec();
        for row in d.chunks_mut(VOCAB_SIZE) {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter_mut().for_each(|x| *x = x.exp() / z);
        }
        let f = Tensor::new(vec![2, 3, VOCAB_SIZE], d).unwrap();
        let (_, grads) = c.differentiable_score(&f).unwrap();
        let h = 1e-6;
        for name in CHANNELS {
            for k in [0, 5, 27, 43, 65, 131] {
                let mut fp = f.clone();
                fp.data_mut()[k] += h;
                let mut fm = f.clone();
                fm.data_mut()[k] -= h;
                let num = (c.score(&fp).unwrap().channel(name) - c.score(&fm).unwrap().channel(name)) / (2.0 * h);
                let ana = grads[name].data()[k];
                assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "{name}[{k}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn two_minimum_has_two_optima() {
        let a = vec![0, 1, 2, 3];
        let b = vec![0, 9, 2, 8];
        let c = SyntheticCritic::two_minimum(a.clone(), b.clone()).unwrap();
        let ra = c.score(&one_hot_features(2, &a)).unwrap();
        let rb = c.score(&one_hot_features(2, &b)).unwrap();
        assert_eq!(ra.confidence, 100.0);
        assert_eq!(rb.confidence, 100.0);
        let sa = ra.structure.unwrap();
        let sb = rb.structure.unwrap();
        assert!(structure_similarity(&sa, &sa) == 1.0);
        assert!(structure_similarity(&sa, &sb) < 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(SyntheticCritic::new(vec![]).is_err());
        assert!(SyntheticCritic::new(vec![22]).is_err());
        let c = SyntheticCritic::new(vec![1, 2]).unwrap();
        assert!(c.score(&Tensor::zeros(&[1, 3, VOCAB_SIZE])).is_err());
        assert!(c.score(&Tensor::full(&[1, 2, VOCAB_SIZE], f64::NAN)).is_err());
    }
}
