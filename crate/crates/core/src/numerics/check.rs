//! Drivers that run a graph program against a [`ParamStore`].

use std::collections::BTreeMap;

use super::{DenseArray, Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Graph handles for the parameters bound into a program.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    fn bind(g: &mut Graph, params: &ParamStore, differentiable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if differentiable { g.leaf(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    /// Binds `params` as constants alongside already-bound variables.
    pub fn with_constants(mut self, g: &mut Graph, params: &ParamStore) -> Self {
        for (k, v) in params.iter() {
            self.vars.entry(k.clone()).or_insert_with(|| g.constant(v.clone()));
        }
        self
    }
}

/// A loss or model expressed over the graph primitives.
pub trait GraphProgram: Fn(&mut Graph, &ParamVars) -> Result<Var> {}
impl<F: Fn(&mut Graph, &ParamVars) -> Result<Var>> GraphProgram for F {}

fn scalar_out(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::shape("loss", v.shape(), &[1]));
    }
    Ok(v.data()[0])
}

/// Runs `program` and returns its scalar value together with the gradient of
/// that value with respect to every entry in `params`.
pub fn forward_backward(program: impl GraphProgram, params: &ParamStore) -> Result<(f64, ParamStore)> {
    forward_backward_with(program, params, &ParamStore::new())
}

/// Like [`forward_backward`], with `frozen` bound as constants.
pub fn forward_backward_with(
    program: impl GraphProgram,
    params: &ParamStore,
    frozen: &ParamStore,
) -> Result<(f64, ParamStore)> {
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, params, true).with_constants(&mut g, frozen);
    let out = program(&mut g, &vars)?;
    let value = scalar_out(&g, out)?;
    let mut adj = g.backward(out)?;
    let mut grads = ParamStore::new();
    for (name, p) in params.iter() {
        let v = vars.get(name)?;
        let grad = adj.take(v).unwrap_or_else(|| DenseArray::zeros(p.shape()));
        grads.insert(name.clone(), grad)?;
    }
    Ok((value, grads))
}

/// Forward pass only; parameters are bound as constants.
pub fn forward_value(program: impl GraphProgram, params: &ParamStore) -> Result<DenseArray> {
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, params, false);
    let out = program(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Scalar forward pass.
pub fn evaluate(program: impl GraphProgram, params: &ParamStore) -> Result<f64> {
    let v = forward_value(program, params)?;
    if !v.is_scalar() {
        return Err(Error::shape("loss", v.shape(), &[1]));
    }
    Ok(v.data()[0])
}

/// Compares analytic gradients with central differences.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|)` over every scalar
/// of every parameter.
pub fn finite_diff_check(program: impl GraphProgram, params: &ParamStore, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("finite-difference eps {eps} outside (0, 1e-2]")));
    }
    let (_, grads) = forward_backward(&program, params)?;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, p) in params.iter() {
        let analytic = grads.get(name)?.data().to_vec();
        for i in 0..p.len() {
            let orig = p.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + eps;
            let up = evaluate(&program, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - eps;
            let down = evaluate(&program, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff_check" });
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
