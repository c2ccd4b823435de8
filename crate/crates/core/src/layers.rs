//! Parameter-path conventions for the small building blocks shared by the
//! network modules.

use crate::error::Result;
use crate::tensor::{Binder, Init, ParamSpec, Var};

pub(crate) fn linear_specs(specs: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize, zero: bool) {
    let init = if zero { Init::Zeros } else { Init::FanIn };
    specs.push(ParamSpec::new(format!("{name}/w"), &[d_in, d_out], init));
    specs.push(ParamSpec::new(format!("{name}/b"), &[d_out], Init::Zeros));
}

pub(crate) fn norm_specs(specs: &mut Vec<ParamSpec>, name: &str, d: usize) {
    specs.push(ParamSpec::new(format!("{name}/g"), &[d], Init::Ones));
    specs.push(ParamSpec::new(format!("{name}/b"), &[d], Init::Zeros));
}

/// `x · w + b` over the last axis.
pub(crate) fn linear<'g>(b: &Binder<'g>, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    x.matmul(b.p(&format!("{name}/w"))?)?.add(b.p(&format!("{name}/b"))?)
}

pub(crate) fn norm<'g>(b: &Binder<'g>, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    x.layer_norm(b.p(&format!("{name}/g"))?, b.p(&format!("{name}/b"))?, x.last())
}

/// Pre-norm two-layer GELU MLP with a zero-initialized output layer.
pub(crate) fn transition_specs(specs: &mut Vec<ParamSpec>, name: &str, d: usize, factor: usize) {
    norm_specs(specs, &format!("{name}/ln"), d);
    linear_specs(specs, &format!("{name}/in"), d, d * factor, false);
    linear_specs(specs, &format!("{name}/out"), d * factor, d, true);
}

/// Residual update produced by [`transition_specs`] parameters (not added to `x`).
pub(crate) fn transition<'g>(b: &Binder<'g>, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    let h = norm(b, &format!("{name}/ln"), x)?;
    let h = linear(b, &format!("{name}/in"), h)?.gelu()?;
    linear(b, &format!("{name}/out"), h)
}
