//! Central finite-difference checks of tape gradients, in `f64`.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by the central difference.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a check. Relative error is elementwise,
/// `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`, and
/// `max_rel` is the worst entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel: f64,
    pub max_abs: f64,
    /// Name of the tensor with the largest relative error.
    pub worst: alloc::string::String,
    pub checked: usize,
}

/// Denominator floor of the elementwise relative error, so entries whose
/// true gradient is zero are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    a.iter().zip(n).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR)).fold(0.0, f64::max)
}

/// Checks `∂f/∂θ` for the listed `(tensor, element)` entries of `store`.
/// `f` must build a scalar from the bound tensors and nothing else that varies.
pub fn check_params(
    store: &ParamStore<f64>,
    entries: &[(ParamId, usize)],
    step: f64,
    f: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let b = s.bind(&mut t, false);
        let l = f(&mut t, &b)?;
        Ok(t.value(l).item())
    };
    let mut work = store.clone();
    let mut groups: Vec<(ParamId, Vec<f64>, Vec<f64>)> = Vec::new();
    for &(id, k) in entries {
        let analytic = tape.grad(bound.var(id)).map_or(0.0, |g| g[k]);
        let orig = work.get(id).data()[k];
        work.get_mut(id).data_mut()[k] = orig + step;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[k] = orig - step;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        match groups.iter_mut().find(|g| g.0 == id) {
            Some(g) => {
                g.1.push(analytic);
                g.2.push(numeric);
            }
            None => groups.push((id, alloc::vec![analytic], alloc::vec![numeric])),
        }
    }
    let mut report = GradReport { max_rel: 0.0, max_abs: 0.0, worst: Default::default(), checked: entries.len() };
    for (id, a, n) in &groups {
        let rel = rel_error(a, n);
        let abs = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        report.max_abs = report.max_abs.max(abs);
        if rel >= report.max_rel {
            report.max_rel = rel;
            report.worst = alloc::string::String::from(store.name(*id));
        }
    }
    Ok(report)
}

/// Checks every element of every input of `f`.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    step: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let mut store = ParamStore::default();
    for (i, t) in inputs.iter().enumerate() {
        store.push(&format!("input{i}"), t.clone());
    }
    let entries: Vec<(ParamId, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |k| (ParamId(i), k))).collect();
    check_params(&store, &entries, step, |tape, b| f(tape, b.vars()))
}

/// Reduces any tensor to a scalar as `Σ y ⊙ r` with fixed weights `r`, so
/// every output element contributes a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let r = Tensor::from_fn(&shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    });
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        let x = Tensor::new(&[3], alloc::vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check_inputs(&[x.clone()], DEFAULT_STEP, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(ok.max_rel < 1e-8);
        let store = {
            let mut s = ParamStore::default();
            s.push("x", x);
            s
        };
        // The closure depends on the tape's gradient flag, so the analytic
        // sweep and the finite difference see different functions.
        let bad = check_params(&store, &[(ParamId(0), 0)], DEFAULT_STEP, |t, b| {
            let v = b.vars()[0];
            let k = if t.requires_grad(v) { 2.0 } else { 1.0 };
            let y = t.scale(v, k)?;
            t.sum(y)
        })
        .unwrap();
        assert!(bad.max_rel > 0.4);
    }
}
