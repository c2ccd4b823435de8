//! The Hyperformer block.
//!
//! Sequence activations are kept as two streams: context rows `[Nc, L, c_s]`
//! (row 0 is the query) and target rows `[T, L, c_s]`. Context rows attend
//! to each other along the depth axis; each target row attends to the
//! context rows and to itself only, so target rows never see one another
//! and any number of them can be processed side by side. The pair
//! representation `[L, L, c_p]` is updated from context rows alone.
//!
//! Block order: outer-product mean into the pair, then on the sequence side
//! query conditioning (encoder only), row attention biased by the pair,
//! column attention and a transition MLP; on the pair side a transition
//! MLP. Every sublayer is a pre-norm residual whose output projection
//! starts at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{linear, linear_specs, norm, norm_specs, transition, transition_specs};
use crate::tensor::{Binder, Init, ParamSpec, Tensor, Var};

/// Large negative logit used to exclude attention entries.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockMode {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub c_s: usize,
    pub c_p: usize,
    pub heads: usize,
    pub opm_dim: usize,
    pub transition_factor: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    /// Rotary frequency base; `None` turns the rotation off.
    pub rope_base: Option<f64>,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.c_s / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if [self.c_s, self.c_p, self.heads, self.opm_dim, self.transition_factor, self.num_buckets]
            .iter()
            .any(|&v| v == 0)
        {
            return Err(Error::invalid("block dimensions must be positive"));
        }
        if self.c_s % self.heads != 0 {
            return Err(Error::invalid(format!("c_s {} not divisible by {} heads", self.c_s, self.heads)));
        }
        if self.rope_base.is_some() && self.head_dim() % 2 != 0 {
            return Err(Error::invalid("rotary embedding needs an even per-head dimension"));
        }
        if self.num_buckets % 2 != 0 || self.max_distance < self.num_buckets {
            return Err(Error::invalid("need an even bucket count and max_distance >= num_buckets"));
        }
        Ok(())
    }
}

/// Signed log-bucketed relative position of `i` with respect to `j`.
/// Half the buckets serve `i >= j`, the upper half `i < j`; offsets below a
/// quarter of the bucket count are exact, larger ones log-spaced up to
/// `max_distance` and clamped beyond it.
pub fn relpos_bucket(i: usize, j: usize, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let (offset, n) = if i >= j { (0, i - j) } else { (half, j - i) };
    let max_exact = (half / 2).max(1);
    if n < max_exact {
        return offset + n;
    }
    let scaled = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let bucket = max_exact + (scaled * (half - max_exact) as f64) as usize;
    offset + bucket.min(half - 1)
}

pub fn relpos_buckets(l: usize, num_buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            out.push(relpos_bucket(i, j, num_buckets, max_distance));
        }
    }
    out
}

/// Rotates the pairs `(v[2t], v[2t+1])` by `position·base^(−2t/d)`.
pub fn rope_apply(v: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    let d = v.len();
    if d % 2 != 0 {
        return Err(Error::shape(format!("rotary embedding needs an even dimension, got {d}")));
    }
    let mut out = v.to_vec();
    for t in 0..d / 2 {
        let theta = position as f64 * base.powf(-2.0 * t as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        out[2 * t] = v[2 * t] * c - v[2 * t + 1] * s;
        out[2 * t + 1] = v[2 * t] * s + v[2 * t + 1] * c;
    }
    Ok(out)
}

/// `softmax_j(rot(q_i)·rot(k_j)/√d + bias_ij) · v` for `q, k, v` of shape
/// `[.., L, d]`; `bias` broadcasts against `[.., L, L]`.
pub fn hyper_attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    bias: Option<Var<'g>>,
    rope_base: Option<f64>,
) -> Result<Var<'g>> {
    let shape = q.shape();
    if shape != k.shape() || shape.len() < 2 || v.shape()[..shape.len() - 1] != shape[..shape.len() - 1] {
        return Err(Error::shape(format!(
            "attention operands q{:?} k{:?} v{:?}",
            shape,
            k.shape(),
            v.shape()
        )));
    }
    let r = shape.len();
    let d = shape[r - 1];
    let (q, k) = match rope_base {
        Some(base) => (q.rope(base)?, k.rope(base)?),
        None => (q, k),
    };
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    let mut logits = q.matmul(k.transpose(&perm)?)?.scale(1.0 / (d as f64).sqrt())?;
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    logits.softmax(r - 1)?.matmul(v)
}

/// Sequence activations split into context and target rows.
#[derive(Clone, Copy, Debug)]
pub struct Streams<'g> {
    pub ctx: Var<'g>,
    pub tgt: Option<Var<'g>>,
}

impl<'g> Streams<'g> {
    fn map(self, mut f: impl FnMut(Var<'g>) -> Result<Var<'g>>) -> Result<Streams<'g>> {
        Ok(Streams { ctx: f(self.ctx)?, tgt: self.tgt.map(&mut f).transpose()? })
    }

    fn add(self, upd: Streams<'g>) -> Result<Streams<'g>> {
        Ok(Streams {
            ctx: self.ctx.add(upd.ctx)?,
            tgt: match (self.tgt, upd.tgt) {
                (Some(a), Some(b)) => Some(a.add(b)?),
                (a, _) => a,
            },
        })
    }
}

pub fn block_specs(prefix: &str, cfg: &BlockConfig, mode: BlockMode) -> Vec<ParamSpec> {
    let (c_s, c_p, h, o) = (cfg.c_s, cfg.c_p, cfg.heads, cfg.opm_dim);
    let mut s = Vec::new();
    norm_specs(&mut s, &format!("{prefix}/opm/ln"), c_s);
    linear_specs(&mut s, &format!("{prefix}/opm/a"), c_s, o, false);
    linear_specs(&mut s, &format!("{prefix}/opm/b"), c_s, o, false);
    linear_specs(&mut s, &format!("{prefix}/opm/out"), o * o, c_p, true);
    if mode == BlockMode::Encoder {
        linear_specs(&mut s, &format!("{prefix}/qc/gate"), 2 * c_s, c_s, false);
        linear_specs(&mut s, &format!("{prefix}/qc/out"), c_s, c_s, true);
    }
    for att in ["row", "col"] {
        norm_specs(&mut s, &format!("{prefix}/{att}/ln"), c_s);
        for p in ["q", "k", "v"] {
            s.push(ParamSpec::new(format!("{prefix}/{att}/{p}"), &[c_s, c_s], Init::FanIn));
        }
        linear_specs(&mut s, &format!("{prefix}/{att}/out"), c_s, c_s, true);
    }
    s.push(ParamSpec::new(format!("{prefix}/row/relpos"), &[cfg.num_buckets, h], Init::Zeros));
    norm_specs(&mut s, &format!("{prefix}/row/pair_ln"), c_p);
    s.push(ParamSpec::new(format!("{prefix}/row/pair_bias"), &[c_p, h], Init::FanIn));
    transition_specs(&mut s, &format!("{prefix}/seq_tr"), c_s, cfg.transition_factor);
    transition_specs(&mut s, &format!("{prefix}/pair_tr"), c_p, cfg.transition_factor);
    s
}

/// Pair update `[L, L, c_p]` from the mean outer product of projected rows.
pub fn outer_product_mean<'g>(b: &Binder<'g>, prefix: &str, seq: Var<'g>) -> Result<Var<'g>> {
    let shape = seq.shape();
    let (n, l) = (shape[0], shape[1]);
    let x = norm(b, &format!("{prefix}/ln"), seq)?;
    let a = linear(b, &format!("{prefix}/a"), x)?;
    let c = linear(b, &format!("{prefix}/b"), x)?;
    let o = a.shape()[2];
    let mean = outer_mean(a, c, n, l, o)?;
    linear(b, &format!("{prefix}/out"), mean)
}

/// `out[i, j, p·o + q] = mean_n a[n, i, p] · c[n, j, q]`.
pub(crate) fn outer_mean<'g>(a: Var<'g>, c: Var<'g>, n: usize, l: usize, o: usize) -> Result<Var<'g>> {
    let a2 = a.reshape(&[n, l * o])?.transpose(&[1, 0])?;
    let c2 = c.reshape(&[n, l * o])?;
    a2.matmul(c2)?
        .scale(1.0 / n as f64)?
        .reshape(&[l, o, l, o])?
        .transpose(&[0, 2, 1, 3])?
        .reshape(&[l, l, o * o])
}

/// `row + (σ([row, query]·W_g + b_g) ⊙ query)·W_o` for every row of `rows`
/// (`[N, L, c_s]`), with `query` of shape `[1, L, c_s]`.
pub fn query_conditioning<'g>(b: &Binder<'g>, prefix: &str, rows: Var<'g>, query: Var<'g>) -> Result<Var<'g>> {
    let shape = rows.shape();
    let q = query.broadcast_to(&shape)?;
    let both = b.graph().concat(&[rows, q], 2)?;
    let gate = linear(b, &format!("{prefix}/gate"), both)?.sigmoid()?;
    let upd = linear(b, &format!("{prefix}/out"), gate.mul(q)?)?;
    rows.add(upd)
}

fn split_heads<'g>(x: Var<'g>, heads: usize) -> Result<Var<'g>> {
    // [R, L, c] -> [R, H, L, dh]
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.transpose(&[0, 2, 1, 3])
}

fn merge_heads<'g>(x: Var<'g>) -> Result<Var<'g>> {
    // [R, H, L, dh] -> [R, L, H·dh]
    let s = x.shape();
    x.transpose(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Row-wise attention along the sequence, biased by relative position and
/// by a projection of the pair representation.
fn row_attention<'g>(
    b: &Binder<'g>,
    prefix: &str,
    cfg: &BlockConfig,
    s: Streams<'g>,
    pair: Var<'g>,
) -> Result<Streams<'g>> {
    let l = s.ctx.shape()[1];
    let h = cfg.heads;
    let buckets = relpos_buckets(l, cfg.num_buckets, cfg.max_distance);
    let rel = b.p(&format!("{prefix}/relpos"))?.gather(&buckets, 0)?.reshape(&[l, l, h])?;
    let pb = norm(b, &format!("{prefix}/pair_ln"), pair)?.matmul(b.p(&format!("{prefix}/pair_bias"))?)?;
    let bias = rel.add(pb)?.transpose(&[2, 0, 1])?; // [H, L, L]
    let (wq, wk, wv) = (b.p(&format!("{prefix}/q"))?, b.p(&format!("{prefix}/k"))?, b.p(&format!("{prefix}/v"))?);
    s.map(|x| {
        let x = norm(b, &format!("{prefix}/ln"), x)?;
        let q = split_heads(x.matmul(wq)?, h)?;
        let k = split_heads(x.matmul(wk)?, h)?;
        let v = split_heads(x.matmul(wv)?, h)?;
        let o = merge_heads(hyper_attention(q, k, v, Some(bias), cfg.rope_base)?)?;
        linear(b, &format!("{prefix}/out"), o)
    })
}

fn col_heads<'g>(x: Var<'g>, w: Var<'g>, heads: usize) -> Result<Var<'g>> {
    // [R, L, c] -> [L, H, R, dh]
    let s = x.shape();
    x.matmul(w)?.reshape(&[s[0], s[1], heads, s[2] / heads])?.transpose(&[1, 2, 0, 3])
}

fn col_merge<'g>(x: Var<'g>) -> Result<Var<'g>> {
    // [L, H, R, dh] -> [R, L, H·dh]
    let s = x.shape();
    x.transpose(&[2, 0, 1, 3])?.reshape(&[s[2], s[0], s[1] * s[3]])
}

/// Attention along the depth axis at every position: context rows over
/// context rows, each target row over the context rows plus itself.
fn column_attention<'g>(b: &Binder<'g>, prefix: &str, cfg: &BlockConfig, s: Streams<'g>) -> Result<Streams<'g>> {
    let h = cfg.heads;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let (wq, wk, wv) = (b.p(&format!("{prefix}/q"))?, b.p(&format!("{prefix}/k"))?, b.p(&format!("{prefix}/v"))?);
    let xc = norm(b, &format!("{prefix}/ln"), s.ctx)?;
    let (qc, kc, vc) = (col_heads(xc, wq, h)?, col_heads(xc, wk, h)?, col_heads(xc, wv, h)?);
    let ctx = col_merge(hyper_attention(qc, kc, vc, None, None)?)?;
    let ctx = linear(b, &format!("{prefix}/out"), ctx)?;
    let tgt = match s.tgt {
        None => None,
        Some(t) => {
            let nc = qc.shape()[2];
            let xt = norm(b, &format!("{prefix}/ln"), t)?;
            let (qt, kt, vt) = (col_heads(xt, wq, h)?, col_heads(xt, wk, h)?, col_heads(xt, wv, h)?);
            let cross = qt.matmul(kc.transpose(&[0, 1, 3, 2])?)?; // [L, H, T, Nc]
            let own = qt.mul(kt)?.sum(3)?;
            let own = own.reshape(&[own.shape(), vec![1]].concat())?; // [L, H, T, 1]
            let att = b.graph().concat(&[cross, own], 3)?.scale(scale)?.softmax(3)?;
            let out = att.slice(3, 0, nc)?.matmul(vc)?.add(att.slice(3, nc, 1)?.mul(vt)?)?;
            Some(linear(b, &format!("{prefix}/out"), col_merge(out)?)?)
        }
    };
    Ok(Streams { ctx, tgt })
}

/// One block; returns the updated streams and pair.
pub fn hyperformer_block<'g>(
    b: &Binder<'g>,
    prefix: &str,
    cfg: &BlockConfig,
    mode: BlockMode,
    s: Streams<'g>,
    pair: Var<'g>,
) -> Result<(Streams<'g>, Var<'g>)> {
    let cs = s.ctx.shape();
    if cs.len() != 3 || cs[2] != cfg.c_s || pair.shape() != [cs[1], cs[1], cfg.c_p] {
        return Err(Error::shape(format!(
            "block expects context [N, L, {}] and pair [L, L, {}], got {:?} and {:?}",
            cfg.c_s,
            cfg.c_p,
            cs,
            pair.shape()
        )));
    }
    if let Some(t) = s.tgt {
        let ts = t.shape();
        if ts.len() != 3 || ts[1..] != cs[1..] {
            return Err(Error::shape(format!("target rows {ts:?} do not match context rows {cs:?}")));
        }
    }
    let pair = pair.add(outer_product_mean(b, &format!("{prefix}/opm"), s.ctx)?)?;

    let mut s = s;
    if mode == BlockMode::Encoder {
        let q = s.ctx.slice(0, 0, 1)?;
        s.ctx = query_conditioning(b, &format!("{prefix}/qc"), s.ctx, q)?;
    }
    s = s.add(row_attention(b, &format!("{prefix}/row"), cfg, s, pair)?)?;
    s = s.add(column_attention(b, &format!("{prefix}/col"), cfg, s)?)?;
    s = s.add(s.map(|x| transition(b, &format!("{prefix}/seq_tr"), x))?)?;

    let pair = pair.add(transition(b, &format!("{prefix}/pair_tr"), pair)?)?;
    Ok((s, pair))
}

/// Reference evaluation of the column attention mask used by blocks, as a
/// dense `[R, R]` additive mask over the concatenated rows (context first).
/// Used by tests to check the split-stream implementation.
pub fn column_mask(n_ctx: usize, n_tgt: usize) -> Tensor {
    let r = n_ctx + n_tgt;
    let mut m = vec![MASKED; r * r];
    for i in 0..r {
        for j in 0..r {
            if j < n_ctx || i == j {
                m[i * r + j] = 0.0;
            }
        }
    }
    Tensor::new(vec![r, r], m).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check, GradcheckConfig};
    use crate::tensor::{Graph, ParamStore, SeedStream};
    use proptest::prelude::*;

    fn toy() -> BlockConfig {
        BlockConfig {
            c_s: 8,
            c_p: 4,
            heads: 2,
            opm_dim: 3,
            transition_factor: 2,
            num_buckets: 8,
            max_distance: 16,
            rope_base: Some(10000.0),
        }
    }

    /// Perturbs every parameter so zero-initialized layers carry signal.
    fn jittered(specs: &[ParamSpec], seed: u64) -> ParamStore {
        let s = SeedStream::new(seed);
        let mut p = ParamStore::init(specs, &s).unwrap();
        let names: Vec<String> = p.names().cloned().collect();
        for n in names {
            let mut r = s.child("jitter").child(&n);
            p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x += 0.3 * r.normal());
        }
        p
    }

    // independent transcription of the bucket rule
    fn bucket_ref(i: i64, j: i64, nb: i64, md: i64) -> i64 {
        let rel = j - i;
        let half = nb / 2;
        let mut ret = 0;
        let mut n = -rel;
        if n < 0 {
            ret += half;
            n = -n;
        }
        let max_exact = half / 2;
        if n < max_exact {
            return ret + n;
        }
        let v = max_exact
            + ((n as f64 / max_exact as f64).ln() / (md as f64 / max_exact as f64).ln() * (half - max_exact) as f64)
                as i64;
        ret + v.min(half - 1)
    }

    #[test]
    fn buckets() {
        assert_eq!(relpos_bucket(5, 5, 32, 128), 0);
        assert_eq!(relpos_bucket(6, 5, 32, 128), 1);
        assert_eq!(relpos_bucket(5, 6, 32, 128), 17);
        assert_eq!(relpos_bucket(300, 0, 32, 128), 15);
        assert_eq!(relpos_bucket(0, 300, 32, 128), 31);
        for i in 0..200 {
            for j in 0..200 {
                assert_eq!(relpos_bucket(i, j, 32, 128) as i64, bucket_ref(i as i64, j as i64, 32, 128));
            }
        }
    }

    #[test]
    fn rope_basics() {
        let v = [0.3, -1.2, 0.7, 2.0];
        assert_eq!(rope_apply(&v, 0, 10000.0).unwrap(), v.to_vec());
        assert!(rope_apply(&v[..3], 1, 10000.0).is_err());
        let r = rope_apply(&v, 17, 10000.0).unwrap();
        let n0: f64 = v.iter().map(|x| x * x).sum();
        let n1: f64 = r.iter().map(|x| x * x).sum();
        assert!((n0 - n1).abs() < 1e-12);
    }

    #[test]
    fn attention_limits() {
        let g = Graph::new();
        let mut s = SeedStream::new(2);
        // L = 1: output is the single value row
        let v = g.constant(s.normal_tensor(&[1, 3]));
        let q = g.constant(s.normal_tensor(&[1, 4]));
        let k = g.constant(s.normal_tensor(&[1, 4]));
        let o = hyper_attention(q, k, v, None, Some(10000.0)).unwrap();
        assert_eq!(o.value(), v.value());
        // zero q, k: mean of v
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let v = g.constant(s.normal_tensor(&[3, 2]));
        let o = hyper_attention(z, z, v, None, Some(10000.0)).unwrap().value();
        for c in 0..2 {
            let mean = (0..3).map(|r| v.value().at(&[r, c])).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((o.at(&[r, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_hand_example() {
        // L = 2, d = 1, no rotation: logits q_i k_j + b_ij
        let g = Graph::new();
        let q = g.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let k = g.constant(Tensor::new(vec![2, 1], vec![0.5, -1.0]).unwrap());
        let v = g.constant(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let o = hyper_attention(q, k, v, Some(b), None).unwrap().value();
        // row 0 logits [0.5, 0.0]; row 1 logits [1.0, -2.0]
        let w0 = 1.0 / (1.0 + (-0.5f64).exp());
        let w1 = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((o.data()[0] - (10.0 * w0 + 20.0 * (1.0 - w0))).abs() < 1e-12);
        assert!((o.data()[1] - (10.0 * w1 + 20.0 * (1.0 - w1))).abs() < 1e-12);
    }

    #[test]
    fn outer_product_mean_hand_case() {
        let g = Graph::new();
        // N = 2, L = 1, o = 2
        let a = g.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = g.constant(Tensor::new(vec![2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let m = outer_mean(a, c, 2, 1, 2).unwrap().value();
        // mean of [[5,6],[10,12]] and [[21,24],[28,32]]
        assert_eq!(m.data(), &[13.0, 15.0, 19.0, 22.0]);
        // N = 1: the single outer product
        let a1 = a.slice(0, 0, 1).unwrap();
        let c1 = c.slice(0, 0, 1).unwrap();
        assert_eq!(outer_mean(a1, c1, 1, 1, 2).unwrap().value().data(), &[5.0, 6.0, 10.0, 12.0]);
    }

    #[test]
    fn query_conditioning_limits() {
        let cfg = toy();
        let specs = block_specs("b", &cfg, BlockMode::Encoder);
        let p = ParamStore::init(&specs, &SeedStream::new(0)).unwrap();
        let g = Graph::new();
        let bd = crate::tensor::Binder::frozen(&g, &p);
        let mut s = SeedStream::new(4);
        let rows = g.constant(s.normal_tensor(&[3, 2, 8]));
        let q = rows.slice(0, 0, 1).unwrap();
        // zero output projection: identity
        assert_eq!(query_conditioning(&bd, "b/qc", rows, q).unwrap().value(), rows.value());

        // saturated gate and identity projection: row + query
        let mut p2 = p.clone();
        p2.insert("b/qc/gate/b", Tensor::full(&[8], 60.0));
        let mut eye = Tensor::zeros(&[8, 8]);
        (0..8).for_each(|i| eye.data_mut()[i * 9] = 1.0);
        p2.insert("b/qc/out/w", eye);
        let g2 = Graph::new();
        let bd2 = crate::tensor::Binder::frozen(&g2, &p2);
        let rows2 = g2.constant(rows.value());
        let out = query_conditioning(&bd2, "b/qc", rows2, rows2.slice(0, 0, 1).unwrap()).unwrap().value();
        let rv = rows.value();
        for n in 0..3 {
            for k in 0..16 {
                let want = rv.data()[n * 16 + k] + rv.data()[k];
                assert!((out.data()[n * 16 + k] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn query_conditioning_matches_reference() {
        let cfg = toy();
        let p = jittered(&block_specs("b", &cfg, BlockMode::Encoder), 8);
        let g = Graph::new();
        let bd = crate::tensor::Binder::frozen(&g, &p);
        let x = SeedStream::new(5).normal_tensor(&[2, 3, 8]);
        let rows = g.constant(x.clone());
        let out = query_conditioning(&bd, "b/qc", rows, rows.slice(0, 0, 1).unwrap()).unwrap().value();
        let (wg, bg) = (p.get("b/qc/gate/w").unwrap(), p.get("b/qc/gate/b").unwrap());
        let (wo, bo) = (p.get("b/qc/out/w").unwrap(), p.get("b/qc/out/b").unwrap());
        for n in 0..2 {
            for j in 0..3 {
                let row: Vec<f64> = (0..8).map(|c| x.at(&[n, j, c])).collect();
                let q: Vec<f64> = (0..8).map(|c| x.at(&[0, j, c])).collect();
                let cat: Vec<f64> = row.iter().chain(&q).cloned().collect();
                let gated: Vec<f64> = (0..8)
                    .map(|o| {
                        let z = bg.data()[o] + (0..16).map(|i| cat[i] * wg.at(&[i, o])).sum::<f64>();
                        q[o] / (1.0 + (-z).exp())
                    })
                    .collect();
                for o in 0..8 {
                    let want = row[o] + bo.data()[o] + (0..8).map(|i| gated[i] * wo.at(&[i, o])).sum::<f64>();
                    assert!((out.at(&[n, j, o]) - want).abs() < 1e-12);
                }
            }
        }
    }

    fn run_block(p: &ParamStore, cfg: &BlockConfig, mode: BlockMode, ctx: &Tensor, tgt: Option<&Tensor>, pair: &Tensor) -> (Tensor, Option<Tensor>, Tensor) {
        let g = Graph::new();
        let b = crate::tensor::Binder::frozen(&g, p);
        let s = Streams { ctx: g.constant(ctx.clone()), tgt: tgt.map(|t| g.constant(t.clone())) };
        let (s, pr) = hyperformer_block(&b, "b", cfg, mode, s, g.constant(pair.clone())).unwrap();
        (s.ctx.value(), s.tgt.map(|t| t.value()), pr.value())
    }

    #[test]
    fn zero_output_layers_make_identity() {
        let cfg = toy();
        for mode in [BlockMode::Encoder, BlockMode::Decoder] {
            let p = ParamStore::init(&block_specs("b", &cfg, mode), &SeedStream::new(1)).unwrap();
            let mut s = SeedStream::new(9);
            let (ctx, tgt, pair) = (s.normal_tensor(&[3, 5, 8]), s.normal_tensor(&[2, 5, 8]), s.normal_tensor(&[5, 5, 4]));
            let (c, t, pr) = run_block(&p, &cfg, mode, &ctx, Some(&tgt), &pair);
            assert_eq!(c, ctx);
            assert_eq!(t.unwrap(), tgt);
            assert_eq!(pr, pair);
        }
    }

    #[test]
    fn split_streams_match_dense_masked_attention() {
        // targets processed beside the context equal a dense masked
        // evaluation over all rows at once
        let cfg = toy();
        let p = jittered(&block_specs("b", &cfg, BlockMode::Decoder), 3);
        let mut s = SeedStream::new(6);
        let (nc, nt, l) = (3, 2, 4);
        let ctx = s.normal_tensor(&[nc, l, 8]);
        let tgt = s.normal_tensor(&[nt, l, 8]);
        let g = Graph::new();
        let b = crate::tensor::Binder::frozen(&g, &p);
        let streams = Streams { ctx: g.constant(ctx.clone()), tgt: Some(g.constant(tgt.clone())) };
        let split = column_attention(&b, "b/col", &cfg, streams).unwrap();

        let all = g.concat(&[streams.ctx, streams.tgt.unwrap()], 0).unwrap();
        let x = norm(&b, "b/col/ln", all).unwrap();
        let q = col_heads(x, b.p("b/col/q").unwrap(), 2).unwrap();
        let k = col_heads(x, b.p("b/col/k").unwrap(), 2).unwrap();
        let v = col_heads(x, b.p("b/col/v").unwrap(), 2).unwrap();
        let mask = g.constant(column_mask(nc, nt));
        let dense = col_merge(hyper_attention(q, k, v, Some(mask), None).unwrap()).unwrap();
        let dense = linear(&b, "b/col/out", dense).unwrap().value();
        let got = g.concat(&[split.ctx, split.tgt.unwrap()], 0).unwrap().value();
        for (a, e) in got.data().iter().zip(dense.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_do_not_interact() {
        let cfg = toy();
        let p = jittered(&block_specs("b", &cfg, BlockMode::Decoder), 5);
        let mut s = SeedStream::new(7);
        let ctx = s.normal_tensor(&[2, 4, 8]);
        let pair = s.normal_tensor(&[4, 4, 4]);
        let t2 = s.normal_tensor(&[2, 4, 8]);
        let t1 = kernels_slice(&t2, 0);
        let (_, both, _) = run_block(&p, &cfg, BlockMode::Decoder, &ctx, Some(&t2), &pair);
        let (_, one, _) = run_block(&p, &cfg, BlockMode::Decoder, &ctx, Some(&t1), &pair);
        let both = both.unwrap();
        let one = one.unwrap();
        for (a, e) in one.data().iter().zip(&both.data()[..one.numel()]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    fn kernels_slice(t: &Tensor, row: usize) -> Tensor {
        let s = t.shape();
        let w = s[1] * s[2];
        Tensor::new(vec![1, s[1], s[2]], t.data()[row * w..(row + 1) * w].to_vec()).unwrap()
    }

    #[test]
    fn rope_off_reduces_to_biased_attention() {
        let g = Graph::new();
        let mut s = SeedStream::new(12);
        let (q, k, v) = (s.normal_tensor(&[2, 5, 4]), s.normal_tensor(&[2, 5, 4]), s.normal_tensor(&[2, 5, 3]));
        let bias = s.normal_tensor(&[5, 5]);
        let out = hyper_attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), Some(g.constant(bias.clone())), None)
            .unwrap()
            .value();
        for h in 0..2 {
            for i in 0..5 {
                let logits: Vec<f64> = (0..5)
                    .map(|j| (0..4).map(|c| q.at(&[h, i, c]) * k.at(&[h, j, c])).sum::<f64>() / 2.0 + bias.at(&[i, j]))
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                for c in 0..3 {
                    let want: f64 = (0..5).map(|j| (logits[j] - m).exp() / z * v.at(&[h, j, c])).sum();
                    assert!((out.at(&[h, i, c]) - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = toy();
        for mode in [BlockMode::Encoder, BlockMode::Decoder] {
            let mut p = jittered(&block_specs("b", &cfg, mode), 21);
            let mut s = SeedStream::new(22);
            p.insert("in/ctx", s.normal_tensor(&[3, 4, 8]));
            p.insert("in/tgt", s.normal_tensor(&[2, 4, 8]));
            p.insert("in/pair", s.normal_tensor(&[4, 4, 4]));
            let w1 = s.normal_tensor(&[3, 4, 8]);
            let w2 = s.normal_tensor(&[2, 4, 8]);
            let w3 = s.normal_tensor(&[4, 4, 4]);
            let r = check(
                "block",
                &p,
                |b| {
                    let g = b.graph();
                    let st = Streams { ctx: b.p("in/ctx")?, tgt: Some(b.p("in/tgt")?) };
                    let (st, pair) = hyperformer_block(b, "b", &cfg, mode, st, b.p("in/pair")?)?;
                    let l1 = st.ctx.mul(g.constant(w1.clone()))?.sum_all()?;
                    let l2 = st.tgt.unwrap().mul(g.constant(w2.clone()))?.sum_all()?;
                    let l3 = pair.mul(g.constant(w3.clone()))?.sum_all()?;
                    l1.add(l2)?.add(l3)
                },
                &GradcheckConfig { max_entries: 6, ..Default::default() },
            )
            .unwrap();
            assert!(r.passed, "{mode:?}: {:e} at {:?}", r.max_rel_err, r.worst);
        }
    }

    #[test]
    fn decoder_block_is_row_permutation_equivariant() {
        let cfg = toy();
        let p = jittered(&block_specs("b", &cfg, BlockMode::Decoder), 30);
        let mut s = SeedStream::new(31);
        let ctx = s.normal_tensor(&[4, 3, 8]);
        let pair = s.normal_tensor(&[3, 3, 4]);
        let perm = [0usize, 3, 1, 2];
        let w = 3 * 8;
        let mut pd = Vec::new();
        for &r in &perm {
            pd.extend_from_slice(&ctx.data()[r * w..(r + 1) * w]);
        }
        let ctx_p = Tensor::new(vec![4, 3, 8], pd).unwrap();
        let (a, _, pa) = run_block(&p, &cfg, BlockMode::Decoder, &ctx, None, &pair);
        let (b, _, pb) = run_block(&p, &cfg, BlockMode::Decoder, &ctx_p, None, &pair);
        for (i, &r) in perm.iter().enumerate() {
            for k in 0..w {
                assert!((b.data()[i * w + k] - a.data()[r * w + k]).abs() < 1e-10);
            }
        }
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let cfg = toy();
        let p = ParamStore::init(&block_specs("b", &cfg, BlockMode::Decoder), &SeedStream::new(1)).unwrap();
        let g = Graph::new();
        let b = crate::tensor::Binder::frozen(&g, &p);
        let s = Streams { ctx: g.constant(Tensor::zeros(&[2, 3, 8])), tgt: None };
        assert!(hyperformer_block(&b, "b", &cfg, BlockMode::Decoder, s, g.constant(Tensor::zeros(&[4, 4, 4]))).is_err());
        let s = Streams { ctx: g.constant(Tensor::zeros(&[2, 3, 8])), tgt: Some(g.constant(Tensor::zeros(&[1, 4, 8]))) };
        assert!(hyperformer_block(&b, "b", &cfg, BlockMode::Decoder, s, g.constant(Tensor::zeros(&[3, 3, 4]))).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rope_shift_invariance(seed in any::<u64>(), i in 0usize..200, j in 0usize..200, sh in 0usize..200) {
            let mut s = SeedStream::new(seed);
            let q: Vec<f64> = (0..8).map(|_| s.normal()).collect();
            let k: Vec<f64> = (0..8).map(|_| s.normal()).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let base = dot(&rope_apply(&q, i, 10000.0).unwrap(), &rope_apply(&k, j, 10000.0).unwrap());
            let shifted = dot(&rope_apply(&q, i + sh, 10000.0).unwrap(), &rope_apply(&k, j + sh, 10000.0).unwrap());
            prop_assert!((base - shifted).abs() < 1e-6);
        }

        #[test]
        fn block_preserves_shapes(n in 1usize..4, t in 0usize..3, l in 1usize..6) {
            let cfg = toy();
            let p = jittered(&block_specs("b", &cfg, BlockMode::Encoder), 2);
            let mut s = SeedStream::new(3);
            let ctx = s.normal_tensor(&[n, l, 8]);
            let tgt = s.normal_tensor(&[t.max(1), l, 8]);
            let pair = s.normal_tensor(&[l, l, 4]);
            let (c, tg, pr) = run_block(&p, &cfg, BlockMode::Encoder, &ctx, (t > 0).then_some(&tgt), &pair);
            prop_assert_eq!(c.shape(), ctx.shape());
            if t > 0 { prop_assert_eq!(tg.unwrap().shape().to_vec(), tgt.shape().to_vec()); }
            prop_assert_eq!(pr.shape(), pair.shape());
            prop_assert!(c.is_finite() && pr.is_finite());
        }
    }
}
