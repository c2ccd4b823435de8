//! Central finite-difference checks of graph adjoints.

use super::{Binder, Graph, ParamStore, SeedStream, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are compared absolutely. It is raised further to
    /// the rounding noise of the difference quotient divided by the
    /// tolerance, since `f(x±h)` carries about `eps·|f|` of rounding.
    pub floor: f64,
    /// Entries checked per tensor; larger tensors are subsampled.
    pub max_entries: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { step: 1e-5, tolerance: 1e-4, floor: 1e-5, max_entries: 16 }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Binder<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let b = Binder::frozen(&g, store);
    let loss = f(&b)?;
    let v = loss.with_value(|t| t.data().to_vec());
    if v.len() != 1 {
        return Err(Error::shape("gradcheck loss must be scalar"));
    }
    Ok(v[0])
}

/// Compares the adjoint of the scalar returned by `f` against central
/// differences, for every parameter of `store` that `f` binds.
pub fn check<F>(name: &str, store: &ParamStore, f: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Binder<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let b = Binder::new(&g, store);
        let loss = f(&b)?;
        let grads = g.backward(loss)?;
        b.collect(&grads)
    };
    let mut seed = SeedStream::new(0).child(name);
    let mut report = GradcheckReport { name: name.to_string(), checked: 0, max_rel_err: 0.0, worst: None, passed: true };
    let mut work = store.clone();
    for (pname, grad) in &analytic {
        let n = grad.numel();
        let entries = if n <= cfg.max_entries {
            (0..n).collect()
        } else {
            let mut e = seed.child(pname).choose(n, cfg.max_entries);
            e.sort_unstable();
            e
        };
        for i in entries {
            let orig = store.require(pname)?.data()[i];
            work.get_mut(pname).expect("bound")[i] = orig + cfg.step;
            let plus = eval(&work, &f)?;
            work.get_mut(pname).expect("bound")[i] = orig - cfg.step;
            let minus = eval(&work, &f)?;
            work.get_mut(pname).expect("bound")[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let noise = 16.0 * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * cfg.step);
            let mut err = relative_error(grad.data()[i], numeric, cfg.floor.max(noise / cfg.tolerance));
            if err.is_nan() {
                err = f64::INFINITY;
            }
            report.checked += 1;
            if std::env::var_os("EVOGEN_GRADCHECK_TRACE").is_some() && err > 1e-6 {
                eprintln!("{name} {pname}[{i}] analytic {:e} numeric {numeric:e} err {err:e}", grad.data()[i]);
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pname.clone(), i));
            }
        }
        seed = seed.child("next");
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

type LossFn = Box<dyn for<'g> Fn(&'g Binder<'g>) -> Result<Var<'g>>>;

fn weighted<'g>(b: &'g Binder<'g>, out: Var<'g>, tag: &str) -> Result<Var<'g>> {
    // random projection keeps every output entry in play with O(1) weights
    let mut s = SeedStream::new(99).child(tag);
    let w = b.graph().constant(s.normal_tensor(&out.shape()));
    out.mul(w)?.sum_all()
}

fn case(
    store: &mut Vec<(String, ParamStore, LossFn)>,
    name: &str,
    inputs: &[(&str, &[usize], bool)],
    f: LossFn,
) {
    let mut p = ParamStore::new();
    let root = SeedStream::new(1234).child(name);
    for &(iname, shape, positive) in inputs {
        let mut s = root.child(iname);
        let t = s.normal_tensor(shape);
        p.insert(iname, if positive { t.map(|x| 0.5 + x.abs()) } else { t });
    }
    store.push((name.to_string(), p, f));
}

/// Finite-difference checks of every differentiable primitive on small
/// random inputs.
pub fn primitive_suite(cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    let mut cases: Vec<(String, ParamStore, LossFn)> = Vec::new();
    macro_rules! add {
        ($name:expr, [$(($n:expr, $s:expr, $pos:expr)),*], |$b:ident| $body:expr) => {
            case(&mut cases, $name, &[$(($n, &$s, $pos)),*], Box::new(move |$b| {
                let out = $body?;
                weighted($b, out, $name)
            }))
        };
    }
    add!("add_broadcast", [("a", [3, 4], false), ("b", [4], false)], |b| b.p("a")?.add(b.p("b")?));
    add!("sub_broadcast", [("a", [2, 1, 3], false), ("b", [4, 1], false)], |b| b.p("a")?.sub(b.p("b")?));
    add!("mul", [("a", [3, 4], false), ("b", [3, 1], false)], |b| b.p("a")?.mul(b.p("b")?));
    add!("div", [("a", [3, 4], false), ("b", [3, 4], true)], |b| b.p("a")?.div(b.p("b")?));
    add!("neg_scale_shift", [("a", [5], false)], |b| b.p("a")?.neg()?.scale(1.7)?.add_scalar(0.3));
    add!("exp", [("a", [2, 3], false)], |b| b.p("a")?.exp());
    add!("log", [("a", [2, 3], true)], |b| b.p("a")?.log());
    add!("tanh", [("a", [2, 3], false)], |b| b.p("a")?.tanh());
    add!("sigmoid", [("a", [2, 3], false)], |b| b.p("a")?.sigmoid());
    add!("gelu", [("a", [2, 5], false)], |b| b.p("a")?.gelu());
    add!("clamp_interior", [("a", [6], false)], |b| b.p("a")?.clamp(-50.0, 50.0));
    add!("softmax_last", [("a", [3, 5], false)], |b| b.p("a")?.softmax(1));
    add!("softmax_first", [("a", [3, 5], false)], |b| b.p("a")?.softmax(0));
    add!("log_softmax", [("a", [2, 3, 4], false)], |b| b.p("a")?.log_softmax(1));
    add!("layer_norm_last", [("x", [3, 5], false), ("g", [5], false), ("o", [5], false)], |b| {
        b.p("x")?.layer_norm(b.p("g")?, b.p("o")?, 1)
    });
    add!("layer_norm_middle", [("x", [2, 4, 3], false), ("g", [4], false), ("o", [4], false)], |b| {
        b.p("x")?.layer_norm(b.p("g")?, b.p("o")?, 1)
    });
    add!("matmul_shared", [("a", [2, 3, 4], false), ("w", [4, 5], false)], |b| b.p("a")?.matmul(b.p("w")?));
    add!("matmul_batched", [("a", [2, 3, 4], false), ("w", [2, 4, 2], false)], |b| {
        b.p("a")?.matmul(b.p("w")?)
    });
    add!("sum_axis", [("a", [2, 3, 4], false)], |b| b.p("a")?.sum(1));
    add!("mean_axis", [("a", [2, 3, 4], false)], |b| b.p("a")?.mean(2));
    add!("mean_all", [("a", [2, 3], false)], |b| b.p("a")?.mean_all());
    add!("concat", [("a", [2, 3], false), ("b", [2, 1], false)], |b| {
        b.graph().concat(&[b.p("a")?, b.p("b")?, b.p("a")?], 1)
    });
    add!("slice", [("a", [3, 6], false)], |b| b.p("a")?.slice(1, 2, 3));
    add!("transpose", [("a", [2, 3, 4], false)], |b| b.p("a")?.transpose(&[2, 0, 1]));
    add!("reshape", [("a", [2, 6], false)], |b| b.p("a")?.reshape(&[3, 4]));
    add!("broadcast_to", [("a", [3, 1], false)], |b| b.p("a")?.broadcast_to(&[2, 3, 4]));
    add!("gather_repeats", [("a", [4, 3], false)], |b| b.p("a")?.gather(&[3, 0, 3, 1], 0));
    add!("rope", [("a", [2, 5, 4], false)], |b| b.p("a")?.rope(10000.0));
    add!("diamond", [("x", [4], false)], |b| {
        let x = b.p("x")?;
        let e = x.exp()?;
        e.mul(x)?.add(e)?.tanh()
    });
    cases.into_iter().map(|(name, p, f)| check(&name, &p, f, cfg)).collect()
}
