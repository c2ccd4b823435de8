//! Hierarchical Gaussian latents.
//!
//! Each level holds an `L×d` latent per target row. Its prior is computed
//! from a context summary, the previous level's sample, and the level's own
//! earlier channels through strictly lower-triangular weights, so channel
//! `t` depends only on channels `< t`. The posterior adds a deviation
//! computed from a summary of the target row to the prior parameters.
//! Prior and deviation networks share a trunk and differ in their heads.
//!
//! Sampling walks the channels in order: channel `t` of the sample is drawn
//! after the parameters of channel `t` have been computed from the sample's
//! channels `< t`. The KL of a level is evaluated along that same path.

use crate::error::{Error, Result};
use crate::layers::{linear, linear_specs, norm, norm_specs};
use crate::tensor::{Binder, Init, ParamSpec, Tensor, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug)]
pub struct GaussianParams<'g> {
    pub mean: Var<'g>,
    pub logvar: Var<'g>,
}

#[derive(Clone, Copy, Debug)]
pub struct LatentLevel<'g> {
    pub dim: usize,
    pub prior: GaussianParams<'g>,
    pub deviation: Option<GaussianParams<'g>>,
    pub posterior: Option<GaussianParams<'g>>,
    /// `[T, L, dim]`.
    pub sample: Var<'g>,
    /// Per target row `[T]`; present when a posterior was formed.
    pub kl: Option<Var<'g>>,
}

pub fn level_specs(prefix: &str, c_s: usize, hidden: usize, dim: usize, prev_dim: Option<usize>) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    norm_specs(&mut s, &format!("{prefix}/trunk/ln"), c_s);
    linear_specs(&mut s, &format!("{prefix}/trunk/lin"), c_s, hidden, false);
    if let Some(p) = prev_dim {
        s.push(ParamSpec::new(format!("{prefix}/prior/prev"), &[p, hidden], Init::FanIn));
        s.push(ParamSpec::new(format!("{prefix}/post/prev"), &[p, hidden], Init::FanIn));
    }
    for head in ["prior", "post"] {
        linear_specs(&mut s, &format!("{prefix}/{head}/mean"), hidden, dim, true);
        linear_specs(&mut s, &format!("{prefix}/{head}/logvar"), hidden, dim, true);
    }
    s.push(ParamSpec::new(format!("{prefix}/prior/ar_mean"), &[dim, dim], Init::Zeros));
    s.push(ParamSpec::new(format!("{prefix}/prior/ar_logvar"), &[dim, dim], Init::Zeros));
    s
}

/// Strictly lower-triangular in the `(source, target)` sense: entry `[s, t]`
/// is 1 when `s < t`.
pub fn causal_mask(dim: usize) -> Tensor {
    let mut m = vec![0.0; dim * dim];
    for s in 0..dim {
        for t in s + 1..dim {
            m[s * dim + t] = 1.0;
        }
    }
    Tensor::new(vec![dim, dim], m).expect("square")
}

fn trunk<'g>(b: &Binder<'g>, prefix: &str, summary: Var<'g>) -> Result<Var<'g>> {
    let h = norm(b, &format!("{prefix}/trunk/ln"), summary)?;
    linear(b, &format!("{prefix}/trunk/lin"), h)?.gelu()
}

fn with_prev<'g>(b: &Binder<'g>, name: &str, h: Var<'g>, prev: Option<Var<'g>>) -> Result<Var<'g>> {
    match prev {
        Some(z) => h.add(z.matmul(b.p(name)?)?),
        None => Ok(h),
    }
}

/// Hidden features of the prior and of the deviation network; `[1 or T, L, hidden]`.
fn hiddens<'g>(
    b: &Binder<'g>,
    prefix: &str,
    ctx_summary: Var<'g>,
    prev: Option<Var<'g>>,
    target_summary: Option<Var<'g>>,
) -> Result<(Var<'g>, Option<Var<'g>>)> {
    let hp = with_prev(b, &format!("{prefix}/prior/prev"), trunk(b, prefix, ctx_summary)?, prev)?;
    let hq = match target_summary {
        Some(t) => Some(with_prev(b, &format!("{prefix}/post/prev"), trunk(b, prefix, t)?, prev)?),
        None => None,
    };
    Ok((hp, hq))
}

fn check_summary(s: &[usize], what: &str) -> Result<()> {
    if s.len() != 3 {
        return Err(Error::shape(format!("{what} must be [rows, L, c], got {s:?}")));
    }
    Ok(())
}

/// Prior parameters evaluated for a full sample path `z` (`[T, L, dim]`)
/// in one shot; channel `t` of the result depends on `z[..., <t]` only.
pub fn prior_from_context<'g>(
    b: &Binder<'g>,
    prefix: &str,
    ctx_summary: Var<'g>,
    prev: Option<Var<'g>>,
    z: Var<'g>,
) -> Result<GaussianParams<'g>> {
    check_summary(&ctx_summary.shape(), "context summary")?;
    let (hp, _) = hiddens(b, prefix, ctx_summary, prev, None)?;
    let dim = z.shape()[2];
    let mask = b.graph().constant(causal_mask(dim));
    let am = b.p(&format!("{prefix}/prior/ar_mean"))?.mul(mask)?;
    let av = b.p(&format!("{prefix}/prior/ar_logvar"))?.mul(mask)?;
    let mean = linear(b, &format!("{prefix}/prior/mean"), hp)?.add(z.matmul(am)?)?;
    let logvar = linear(b, &format!("{prefix}/prior/logvar"), hp)?.add(z.matmul(av)?)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
    Ok(GaussianParams { mean, logvar })
}

/// Posterior as prior plus deviation; the deviation log-variance is limited
/// so the posterior log-variance stays within the clamp range.
pub fn posterior_from_target<'g>(
    prior: GaussianParams<'g>,
    raw_deviation: GaussianParams<'g>,
) -> Result<(GaussianParams<'g>, GaussianParams<'g>)> {
    let lv = prior.logvar.add(raw_deviation.logvar)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
    let dev = GaussianParams { mean: raw_deviation.mean, logvar: lv.sub(prior.logvar)? };
    let post = GaussianParams { mean: prior.mean.add(dev.mean)?, logvar: prior.logvar.add(dev.logvar)? };
    Ok((post, dev))
}

/// `mean + exp(logvar/2) ⊙ noise`.
pub fn sample_reparam<'g>(p: GaussianParams<'g>, noise: Var<'g>) -> Result<Var<'g>> {
    if noise.shape() != p.mean.shape() {
        return Err(Error::shape(format!("noise {:?} for parameters {:?}", noise.shape(), p.mean.shape())));
    }
    p.mean.add(p.logvar.scale(0.5)?.exp()?.mul(noise)?)
}

/// Elementwise KL(q ‖ p) of diagonal Gaussians written through the
/// deviation: `½(e^{Δlv} + Δμ²·e^{−lv_p} − 1 − Δlv)`.
pub fn kl_elementwise<'g>(dev: GaussianParams<'g>, prior_logvar: Var<'g>) -> Result<Var<'g>> {
    let a = dev.logvar.exp()?;
    let c = dev.mean.square()?.mul(prior_logvar.neg()?.exp()?)?;
    a.add(c)?.sub(dev.logvar)?.add_scalar(-1.0)?.scale(0.5)
}

/// KL summed over everything but the leading (row) axis.
pub fn kl_term<'g>(posterior: GaussianParams<'g>, prior: GaussianParams<'g>) -> Result<Var<'g>> {
    if posterior.mean.shape() != prior.mean.shape() {
        return Err(Error::shape("posterior and prior shapes differ"));
    }
    let dev = GaussianParams { mean: posterior.mean.sub(prior.mean)?, logvar: posterior.logvar.sub(prior.logvar)? };
    let e = kl_elementwise(dev, prior.logvar)?;
    sum_rows(e)
}

fn sum_rows(e: Var<'_>) -> Result<Var<'_>> {
    let s = e.shape();
    let rows = s[0];
    e.reshape(&[rows, s[1..].iter().product()])?.sum(1)
}

/// Diagonal Gaussian log-density of `x`, summed per row.
pub fn gaussian_log_density<'g>(p: GaussianParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let d = x.sub(p.mean)?;
    let e = d.square()?.mul(p.logvar.neg()?.exp()?)?.add(p.logvar)?.add_scalar(LN_2PI)?.scale(-0.5)?;
    sum_rows(e)
}

/// Draws one level channel by channel.
///
/// `ctx_summary` is `[1, L, c_s]`, `prev` the previous level's sample
/// `[T, L, d_prev]`, `target_summary` `[T, L, c_s]` when a posterior is to
/// be formed (sampling then follows the posterior), and `noise` `[T, L, dim]`.
pub fn run_level<'g>(
    b: &Binder<'g>,
    prefix: &str,
    ctx_summary: Var<'g>,
    prev: Option<Var<'g>>,
    target_summary: Option<Var<'g>>,
    noise: &Tensor,
) -> Result<LatentLevel<'g>> {
    check_summary(&ctx_summary.shape(), "context summary")?;
    let ns = noise.shape().to_vec();
    if ns.len() != 3 || ns[1] != ctx_summary.shape()[1] {
        return Err(Error::shape(format!("noise {ns:?} for context summary {:?}", ctx_summary.shape())));
    }
    let (t_rows, l, dim) = (ns[0], ns[1], ns[2]);
    if let Some(p) = prev {
        if p.shape()[..2] != [t_rows, l] {
            return Err(Error::shape(format!("previous level {:?} for noise {ns:?}", p.shape())));
        }
    }
    if let Some(t) = target_summary {
        check_summary(&t.shape(), "target summary")?;
        if t.shape()[..2] != [t_rows, l] {
            return Err(Error::shape(format!("target summary {:?} for noise {ns:?}", t.shape())));
        }
    }
    let g = b.graph();
    let (hp, hq) = hiddens(b, prefix, ctx_summary, prev, target_summary)?;
    let rows = [t_rows, l, dim];
    let base_m = linear(b, &format!("{prefix}/prior/mean"), hp)?.broadcast_to(&rows)?;
    let base_v = linear(b, &format!("{prefix}/prior/logvar"), hp)?.broadcast_to(&rows)?;
    let raw_dev = match hq {
        Some(h) => Some((linear(b, &format!("{prefix}/post/mean"), h)?, linear(b, &format!("{prefix}/post/logvar"), h)?)),
        None => None,
    };
    let am = b.p(&format!("{prefix}/prior/ar_mean"))?;
    let av = b.p(&format!("{prefix}/prior/ar_logvar"))?;
    let eps = g.constant(noise.clone());

    let mut z_cols: Vec<Var<'g>> = Vec::with_capacity(dim);
    let mut pm = Vec::with_capacity(dim);
    let mut pv = Vec::with_capacity(dim);
    let mut dm = Vec::with_capacity(dim);
    let mut dv = Vec::with_capacity(dim);
    for t in 0..dim {
        let mut mean_t = base_m.slice(2, t, 1)?;
        let mut lv_t = base_v.slice(2, t, 1)?;
        if t > 0 {
            let z_prev = g.concat(&z_cols, 2)?;
            mean_t = mean_t.add(z_prev.matmul(am.slice(1, t, 1)?.slice(0, 0, t)?)?)?;
            lv_t = lv_t.add(z_prev.matmul(av.slice(1, t, 1)?.slice(0, 0, t)?)?)?;
        }
        let lv_t = lv_t.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        let prior_t = GaussianParams { mean: mean_t, logvar: lv_t };
        let draw_from = match &raw_dev {
            Some((m, v)) => {
                let raw = GaussianParams { mean: m.slice(2, t, 1)?, logvar: v.slice(2, t, 1)? };
                let (post, dev) = posterior_from_target(prior_t, raw)?;
                dm.push(dev.mean);
                dv.push(dev.logvar);
                post
            }
            None => prior_t,
        };
        pm.push(mean_t);
        pv.push(lv_t);
        z_cols.push(sample_reparam(draw_from, eps.slice(2, t, 1)?)?);
    }
    let prior = GaussianParams { mean: g.concat(&pm, 2)?, logvar: g.concat(&pv, 2)? };
    let sample = g.concat(&z_cols, 2)?;
    let (deviation, posterior, kl) = if raw_dev.is_some() {
        let dev = GaussianParams { mean: g.concat(&dm, 2)?, logvar: g.concat(&dv, 2)? };
        let post = GaussianParams { mean: prior.mean.add(dev.mean)?, logvar: prior.logvar.add(dev.logvar)? };
        let kl = sum_rows(kl_elementwise(dev, prior.logvar)?)?;
        (Some(dev), Some(post), Some(kl))
    } else {
        (None, None, None)
    };
    Ok(LatentLevel { dim, prior, deviation, posterior, sample, kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check, GradcheckConfig};
    use crate::tensor::{Graph, ParamStore, SeedStream};

    fn store(dim: usize, prev: Option<usize>, jitter: f64, seed: u64) -> ParamStore {
        let specs = level_specs("z", 6, 5, dim, prev);
        let s = SeedStream::new(seed);
        let mut p = ParamStore::init(&specs, &s).unwrap();
        let names: Vec<String> = p.names().cloned().collect();
        for n in names {
            let mut r = s.child("j").child(&n);
            p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x += jitter * r.normal());
        }
        p
    }

    #[test]
    fn zero_init_prior_is_standard_normal() {
        let p = store(3, None, 0.0, 1);
        let g = Graph::new();
        let b = Binder::frozen(&g, &p);
        let ctx = g.constant(Tensor::zeros(&[1, 4, 6]));
        let lvl = run_level(&b, "z", ctx, None, None, &Tensor::zeros(&[2, 4, 3])).unwrap();
        assert_eq!(lvl.prior.mean.value(), Tensor::zeros(&[2, 4, 3]));
        assert_eq!(lvl.prior.logvar.value(), Tensor::zeros(&[2, 4, 3]));
        // zero deviation heads: posterior equals prior, KL zero
        let tgt = g.constant(SeedStream::new(2).normal_tensor(&[2, 4, 6]));
        let lvl = run_level(&b, "z", ctx, None, Some(tgt), &SeedStream::new(3).normal_tensor(&[2, 4, 3])).unwrap();
        assert_eq!(lvl.posterior.unwrap().mean.value(), lvl.prior.mean.value());
        assert_eq!(lvl.kl.unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn sequential_sampling_matches_one_shot_prior() {
        let p = store(3, Some(2), 0.4, 4);
        let g = Graph::new();
        let b = Binder::frozen(&g, &p);
        let mut s = SeedStream::new(5);
        let ctx = g.constant(s.normal_tensor(&[1, 4, 6]));
        let prev = g.constant(s.normal_tensor(&[2, 4, 2]));
        let tgt = g.constant(s.normal_tensor(&[2, 4, 6]));
        let lvl = run_level(&b, "z", ctx, Some(prev), Some(tgt), &s.normal_tensor(&[2, 4, 3])).unwrap();
        let one = prior_from_context(&b, "z", ctx, Some(prev), lvl.sample).unwrap();
        for (a, e) in one.mean.value().data().iter().zip(lvl.prior.mean.value().data()) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in one.logvar.value().data().iter().zip(lvl.prior.logvar.value().data()) {
            assert!((a - e).abs() < 1e-12);
        }
        // additivity
        let post = lvl.posterior.unwrap();
        let dev = lvl.deviation.unwrap();
        assert_eq!(post.mean.value(), lvl.prior.mean.add(dev.mean).unwrap().value());
        assert_eq!(post.logvar.value(), lvl.prior.logvar.add(dev.logvar).unwrap().value());
        assert!(lvl.kl.unwrap().value().data().iter().all(|&k| k > 0.0));
    }

    #[test]
    fn chain_rule_density() {
        // the joint density of a drawn path equals the product of the
        // per-channel conditionals evaluated directly
        let p = store(3, None, 0.5, 6);
        let g = Graph::new();
        let b = Binder::frozen(&g, &p);
        let mut s = SeedStream::new(7);
        let ctx = g.constant(s.normal_tensor(&[1, 2, 6]));
        let lvl = run_level(&b, "z", ctx, None, None, &s.normal_tensor(&[1, 2, 3])).unwrap();
        let joint = gaussian_log_density(lvl.prior, lvl.sample).unwrap().item();

        let z = lvl.sample.value();
        let base_m = linear(&b, "z/prior/mean", trunk(&b, "z", ctx).unwrap()).unwrap().value();
        let base_v = linear(&b, "z/prior/logvar", trunk(&b, "z", ctx).unwrap()).unwrap().value();
        let (am, av) = (p.get("z/prior/ar_mean").unwrap(), p.get("z/prior/ar_logvar").unwrap());
        let mut direct = 0.0;
        for pos in 0..2 {
            for t in 0..3 {
                let mut m = base_m.at(&[0, pos, t]);
                let mut v = base_v.at(&[0, pos, t]);
                for s in 0..t {
                    m += z.at(&[0, pos, s]) * am.at(&[s, t]);
                    v += z.at(&[0, pos, s]) * av.at(&[s, t]);
                }
                let v = v.clamp(LOGVAR_MIN, LOGVAR_MAX);
                let x = z.at(&[0, pos, t]);
                direct += -0.5 * ((x - m).powi(2) / v.exp() + v + LN_2PI);
            }
        }
        assert!((joint - direct).abs() < 1e-10);
    }

    #[test]
    fn reparam_limits_and_moments() {
        let g = Graph::new();
        let mean = g.constant(Tensor::from_vec(vec![0.7, -1.0]).reshape(&[1, 2]).unwrap());
        let lv = g.constant(Tensor::from_vec(vec![0.4, -0.6]).reshape(&[1, 2]).unwrap());
        let p = GaussianParams { mean, logvar: lv };
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        assert_eq!(sample_reparam(p, zero).unwrap().value(), mean.value());
        let std = GaussianParams { mean: zero, logvar: zero };
        let e = g.constant(Tensor::new(vec![1, 2], vec![0.3, 2.0]).unwrap());
        assert_eq!(sample_reparam(std, e).unwrap().value(), e.value());
        assert!(sample_reparam(p, g.constant(Tensor::zeros(&[2, 2]))).is_err());

        let n = 100_000;
        let mut s = SeedStream::new(8);
        let noise = g.constant(s.normal_tensor(&[n, 2]));
        let mb = mean.broadcast_to(&[n, 2]).unwrap();
        let lb = lv.broadcast_to(&[n, 2]).unwrap();
        let x = sample_reparam(GaussianParams { mean: mb, logvar: lb }, noise).unwrap().value();
        for c in 0..2 {
            let var = lv.value().data()[c].exp();
            let xs: Vec<f64> = (0..n).map(|i| x.at(&[i, c])).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
            assert!((m - mean.value().data()[c]).abs() < 3.0 * (var / n as f64).sqrt());
            assert!((v - var).abs() < 3.0 * var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn kl_closed_forms() {
        let g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[1, 4]));
        let one = g.constant(Tensor::ones(&[1, 4]));
        let p = GaussianParams { mean: zero, logvar: zero };
        assert_eq!(kl_term(p, p).unwrap().value().data(), &[0.0]);
        let q = GaussianParams { mean: one, logvar: zero };
        assert!((kl_term(q, p).unwrap().item() - 2.0).abs() < 1e-15); // 0.5 per channel
        // deviation mean +1 on one channel shifts the posterior mean by exactly 1
        let dev_m = g.constant(Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let (post, _) = posterior_from_target(p, GaussianParams { mean: dev_m, logvar: zero }).unwrap();
        assert_eq!(post.mean.value().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let g = Graph::new();
        let n = 100_000;
        let (mq, lq, mp, lp) = (0.6, -0.4, -0.2, 0.3);
        let c = |v: f64| g.constant(Tensor::full(&[n, 1], v));
        let q = GaussianParams { mean: c(mq), logvar: c(lq) };
        let p = GaussianParams { mean: c(mp), logvar: c(lp) };
        let exact = kl_term(q, p).unwrap().value().data()[0];
        let x = sample_reparam(q, g.constant(SeedStream::new(9).normal_tensor(&[n, 1]))).unwrap();
        let lr = gaussian_log_density(q, x).unwrap().sub(gaussian_log_density(p, x).unwrap()).unwrap().value();
        let m = lr.sum() / n as f64;
        let sd = (lr.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((m - exact).abs() < 3.0 * sd / (n as f64).sqrt(), "mc {m} exact {exact}");
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_zero_deviation() {
        let mut s = SeedStream::new(10);
        for _ in 0..200 {
            let g = Graph::new();
            let dm = g.constant(s.normal_tensor(&[1, 3]));
            let dv = g.constant(s.normal_tensor(&[1, 3]));
            let lp = g.constant(s.normal_tensor(&[1, 3]));
            let k = kl_elementwise(GaussianParams { mean: dm, logvar: dv }, lp).unwrap().value();
            assert!(k.data().iter().all(|&x| x > 0.0));
            let z = g.constant(Tensor::zeros(&[1, 3]));
            let k0 = kl_elementwise(GaussianParams { mean: z, logvar: z }, lp).unwrap().value();
            assert!(k0.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn level_gradients_match_finite_differences() {
        let mut p = store(3, Some(2), 0.4, 11);
        let mut s = SeedStream::new(12);
        p.insert("in/ctx", s.normal_tensor(&[1, 3, 6]));
        p.insert("in/prev", s.normal_tensor(&[2, 3, 2]));
        p.insert("in/tgt", s.normal_tensor(&[2, 3, 6]));
        let noise = s.normal_tensor(&[2, 3, 3]);
        let w = s.normal_tensor(&[2, 3, 3]);
        let r = check(
            "latent",
            &p,
            |b| {
                let lvl = run_level(b, "z", b.p("in/ctx")?, Some(b.p("in/prev")?), Some(b.p("in/tgt")?), &noise)?;
                let sample_term = lvl.sample.mul(b.graph().constant(w.clone()))?.sum_all()?;
                sample_term.add(lvl.kl.unwrap().sum_all()?)
            },
            &GradcheckConfig { max_entries: 8, ..Default::default() },
        )
        .unwrap();
        assert!(r.passed, "{:e} at {:?}", r.max_rel_err, r.worst);
    }

    #[test]
    fn shape_errors() {
        let p = store(3, None, 0.0, 1);
        let g = Graph::new();
        let b = Binder::frozen(&g, &p);
        let ctx = g.constant(Tensor::zeros(&[1, 4, 6]));
        assert!(run_level(&b, "z", ctx, None, None, &Tensor::zeros(&[2, 5, 3])).is_err());
        let bad = g.constant(Tensor::zeros(&[4, 6]));
        assert!(run_level(&b, "z", bad, None, None, &Tensor::zeros(&[2, 4, 3])).is_err());
    }
}
