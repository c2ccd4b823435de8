//! Model inputs and outputs: token grids, deletion features, context/target
//! splits, detokenization, and the feature container file.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::msa::{AlignedRow, Msa, ResidueSymbol, VOCAB_SIZE};
use crate::tensor::SeedStream;

pub const NUM_DEL_BINS: usize = 6;
pub const DEL_BIN_EDGES: [f64; NUM_DEL_BINS - 1] = [0.2, 0.35, 0.5, 0.65, 0.8];
pub const DEL_BIN_CENTERS: [f64; NUM_DEL_BINS] = [0.1, 0.275, 0.425, 0.575, 0.725, 0.875];

/// `(2/π)·atan(d/3)`, in `[0, 1)`.
pub fn deletion_transform(d: u32) -> f64 {
    std::f64::consts::FRAC_2_PI * (d as f64 / 3.0).atan()
}

pub fn discretize_deletion(v: f64) -> usize {
    DEL_BIN_EDGES.iter().take_while(|&&e| v >= e).count()
}

/// Deletion count represented by a bin: the transform inverted at the bin center.
pub fn bin_to_deletions(bin: usize) -> u32 {
    let c = DEL_BIN_CENTERS[bin];
    (3.0 * (std::f64::consts::FRAC_PI_2 * c).tan()).round() as u32
}

/// Row-major `N×L` token ids and deletion features.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub n: usize,
    pub l: usize,
    pub tokens: Vec<usize>,
    pub del_raw: Vec<u32>,
    pub del_value: Vec<f64>,
}

impl TokenGrid {
    pub fn select_rows(&self, rows: &[usize]) -> TokenGrid {
        let l = self.l;
        let mut out = TokenGrid { n: rows.len(), l, tokens: vec![], del_raw: vec![], del_value: vec![] };
        for &r in rows {
            out.tokens.extend_from_slice(&self.tokens[r * l..(r + 1) * l]);
            out.del_raw.extend_from_slice(&self.del_raw[r * l..(r + 1) * l]);
            out.del_value.extend_from_slice(&self.del_value[r * l..(r + 1) * l]);
        }
        out
    }

    pub fn del_bins(&self) -> Vec<usize> {
        self.del_value.iter().map(|&v| discretize_deletion(v)).collect()
    }

    pub fn row_tokens(&self, r: usize) -> &[usize] {
        &self.tokens[r * self.l..(r + 1) * self.l]
    }
}

pub fn tokenize(msa: &Msa) -> TokenGrid {
    let (n, l) = (msa.depth(), msa.len());
    let mut grid = TokenGrid {
        n,
        l,
        tokens: Vec::with_capacity(n * l),
        del_raw: Vec::with_capacity(n * l),
        del_value: Vec::with_capacity(n * l),
    };
    for row in msa.rows() {
        grid.tokens.extend(row.symbols.iter().map(|s| s.token() as usize));
        grid.del_raw.extend_from_slice(&row.deletions);
        grid.del_value.extend(row.deletions.iter().map(|&d| deletion_transform(d)));
    }
    grid
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextTargetSplit {
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
    pub r_ctx: f64,
}

pub fn context_size(n: usize, r_ctx: f64) -> usize {
    // the small slack keeps products like 0.3·10 from flooring to 2
    ((r_ctx * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Context of `max(1, floor(r_ctx·n))` rows always holding row 0, the rest
/// drawn without replacement; targets are the complement. Both sorted.
pub fn split_context_target(n: usize, r_ctx: f64, rng: &mut SeedStream) -> Result<ContextTargetSplit> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&r_ctx) {
        return Err(Error::invalid(format!("r_ctx {r_ctx} outside [0, 1]")));
    }
    let k = context_size(n, r_ctx);
    let mut context: Vec<usize> = rng.choose(n - 1, k - 1).into_iter().map(|i| i + 1).collect();
    context.push(0);
    context.sort_unstable();
    let mut in_ctx = vec![false; n];
    context.iter().for_each(|&i| in_ctx[i] = true);
    let targets = (0..n).filter(|&i| !in_ctx[i]).collect();
    Ok(ContextTargetSplit { context, targets, r_ctx })
}

/// Per target row and position: 22 residue logits and 6 deletion-bin logits.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputLogits {
    pub t: usize,
    pub l: usize,
    pub aa: Vec<f64>,
    pub del: Vec<f64>,
}

fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins, so ties go to the lowest index
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

impl OutputLogits {
    pub fn new(t: usize, l: usize, aa: Vec<f64>, del: Vec<f64>) -> Result<Self> {
        if aa.len() != t * l * VOCAB_SIZE || del.len() != t * l * NUM_DEL_BINS {
            return Err(Error::shape(format!(
                "logits for {t}×{l} need {} residue and {} deletion values, got {} and {}",
                t * l * VOCAB_SIZE,
                t * l * NUM_DEL_BINS,
                aa.len(),
                del.len()
            )));
        }
        Ok(OutputLogits { t, l, aa, del })
    }

    pub fn aa_probs(&self) -> Vec<f64> {
        softmax_rows(&self.aa, VOCAB_SIZE)
    }

    pub fn del_probs(&self) -> Vec<f64> {
        softmax_rows(&self.del, NUM_DEL_BINS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetokenizeMode {
    Argmax,
    Sample(u64),
}

/// Turns logits into aligned rows named `{prefix}{i}`.
pub fn detokenize(out: &OutputLogits, mode: DetokenizeMode, prefix: &str) -> Vec<AlignedRow> {
    let aa_p = out.aa_probs();
    let del_p = out.del_probs();
    let mut rng = match mode {
        DetokenizeMode::Sample(seed) => Some(SeedStream::new(seed).child("detokenize")),
        DetokenizeMode::Argmax => None,
    };
    (0..out.t)
        .map(|r| {
            let mut symbols = Vec::with_capacity(out.l);
            let mut dels = Vec::with_capacity(out.l);
            for j in 0..out.l {
                let k = r * out.l + j;
                let a = &aa_p[k * VOCAB_SIZE..(k + 1) * VOCAB_SIZE];
                let d = &del_p[k * NUM_DEL_BINS..(k + 1) * NUM_DEL_BINS];
                let (tok, bin) = match rng.as_mut() {
                    Some(s) => (s.categorical(a), s.categorical(d)),
                    None => (argmax(&out.aa[k * VOCAB_SIZE..(k + 1) * VOCAB_SIZE]), argmax(&out.del[k * NUM_DEL_BINS..(k + 1) * NUM_DEL_BINS])),
                };
                symbols.push(ResidueSymbol::from_token(tok as u8).expect("token in vocabulary"));
                dels.push(bin_to_deletions(bin));
            }
            AlignedRow::new(format!("{prefix}{r}"), symbols, dels).expect("lengths agree")
        })
        .collect()
}

/// `N×L×22` residue probabilities with the query they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub query: String,
    pub n: usize,
    pub l: usize,
    pub probs: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(query: String, n: usize, l: usize, probs: Vec<f32>) -> Result<Self> {
        if query.len() != l {
            return Err(Error::shape(format!("query of length {} for grid width {l}", query.len())));
        }
        if probs.len() != n * l * VOCAB_SIZE {
            return Err(Error::shape(format!("{} values for a {n}×{l}×{VOCAB_SIZE} grid", probs.len())));
        }
        Ok(FeatureGrid { query, n, l, probs })
    }

    /// One-hot features of an alignment.
    pub fn from_msa(msa: &Msa) -> Self {
        let grid = tokenize(msa);
        let mut probs = vec![0f32; grid.n * grid.l * VOCAB_SIZE];
        for (k, &t) in grid.tokens.iter().enumerate() {
            probs[k * VOCAB_SIZE + t] = 1.0;
        }
        FeatureGrid { query: msa.query().sequence(), n: grid.n, l: grid.l, probs }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.probs[r * self.l * VOCAB_SIZE..(r + 1) * self.l * VOCAB_SIZE]
    }
}

const FEAT_MAGIC: &[u8; 8] = b"EVGFEAT\0";
pub const FEATURE_VERSION: u32 = 1;

/// Layout (little-endian): magic `EVGFEAT\0`, u32 version, u32 n, u32 L,
/// u32 query length, query bytes, then `n·L·22` f32 values row-major.
pub fn export_features<W: Write>(grid: &FeatureGrid, mut w: W) -> Result<()> {
    w.write_all(FEAT_MAGIC)?;
    for v in [FEATURE_VERSION, grid.n as u32, grid.l as u32, grid.query.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(grid.query.as_bytes())?;
    let mut buf = Vec::with_capacity(grid.probs.len() * 4);
    for p in &grid.probs {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn import_features<R: Read>(mut r: R) -> Result<FeatureGrid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 24 {
        return Err(Error::Truncated("feature header".into()));
    }
    if &bytes[..8] != FEAT_MAGIC {
        return Err(Error::Format("not a feature container".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != FEATURE_VERSION {
        return Err(Error::Version { found: version, expected: FEATURE_VERSION });
    }
    let (n, l, qlen) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    let data_start = 24 + qlen;
    let expected = data_start + n * l * VOCAB_SIZE * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!("feature data: {} of {expected} bytes", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Format("trailing bytes after feature data".into()));
    }
    let query = String::from_utf8(bytes[24..data_start].to_vec())
        .map_err(|_| Error::Format("query is not UTF-8".into()))?;
    let probs = bytes[data_start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    FeatureGrid::new(query, n, l, probs)
}
