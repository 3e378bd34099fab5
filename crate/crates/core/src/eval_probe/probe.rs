use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{forward_backward, sgd_step, DenseArray, Graph, ParamStore, ParamVars, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// L2 penalty `λ/2·‖w‖²`; the bias is not penalized.
    pub lambda: f64,
    pub steps: usize,
    /// Gradient-descent step size; `None` uses `1/L` for the loss's smoothness bound `L`.
    pub step_size: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            steps: 500,
            step_size: None,
        }
    }
}

/// Affine binary classifier `σ(w·x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub w: Vec<f64>,
    pub b: f64,
    /// Training loss before each step and after the last.
    pub loss_trace: Vec<f64>,
}

impl LinearProbe {
    pub fn predict(&self, x: &DenseArray) -> Result<Vec<f64>> {
        let (_, d) = x.dims2("probe_predict")?;
        if d != self.w.len() {
            return Err(Error::shape("probe_predict", x.shape(), &[self.w.len()]));
        }
        Ok(x.rows()
            .map(|r| {
                let z: f64 = r.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b;
                1.0 / (1.0 + (-z).exp())
            })
            .collect())
    }
}

/// One-hot `[n,2]` targets for binary labels.
pub(crate) fn binary_targets(labels: &[u32]) -> DenseArray {
    let mut t = DenseArray::zeros(&[labels.len(), 2]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[2 * i + l as usize] = 1.0;
    }
    t
}

/// Mean logistic loss plus `λ/2·‖w‖²`, written as a two-logit softmax
/// cross-entropy on `z·[−½, ½]` so `p(1) = σ(z)`.
pub fn probe_loss_graph(g: &mut Graph, v: &ParamVars, x: &DenseArray, targets: &DenseArray, lambda: f64) -> Result<Var> {
    let xv = g.constant(x.clone());
    let w = v.get("probe.w")?;
    let z = g.matmul(xv, w)?;
    let z = g.add(z, v.get("probe.b")?)?;
    let split = g.constant(DenseArray::from_rows(&[vec![-0.5, 0.5]])?);
    let logits = g.matmul(z, split)?;
    let ce = g.softmax_cross_entropy(logits, targets)?;
    let sq = g.mul(w, w)?;
    let pen = g.sum(sq)?;
    let pen = g.scale(pen, 0.5 * lambda)?;
    g.add(ce, pen)
}

/// Full-batch gradient descent on the regularized logistic loss from a zero start.
pub fn train_linear_probe(x: &DenseArray, labels: &[u32], cfg: &ProbeConfig) -> Result<LinearProbe> {
    let (n, d) = x.dims2("train_linear_probe")?;
    if labels.len() != n {
        return Err(Error::shape("train_linear_probe", x.shape(), &[labels.len()]));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("probe labels must be 0/1, found {l}")));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::SingleClass);
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::invalid("probe lambda must be >= 0"));
    }
    // Hessian bound: σ' ≤ 1/4 and each row contributes ‖[x, 1]‖².
    let max_sq = x.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).fold(0.0, f64::max);
    let lr = cfg.step_size.unwrap_or(1.0 / (0.25 * max_sq + cfg.lambda));
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("probe step size must be positive"));
    }
    let targets = binary_targets(labels);
    let mut p = ParamStore::new();
    p.insert("probe.w", DenseArray::zeros(&[d, 1]))?;
    p.insert("probe.b", DenseArray::zeros(&[1, 1]))?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let program = |g: &mut Graph, v: &ParamVars| probe_loss_graph(g, v, x, &targets, cfg.lambda);
    for _ in 0..cfg.steps {
        let (loss, grads) = forward_backward(program, &p)?;
        trace.push(loss);
        sgd_step(&mut p, &grads, lr)?;
    }
    trace.push(crate::numerics::evaluate(program, &p)?);
    Ok(LinearProbe {
        w: p.get("probe.w")?.data().to_vec(),
        b: p.get("probe.b")?.data()[0],
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_probe::metrics::accuracy;
    use crate::numerics::{finite_diff_check, Rng};

    fn clusters(n: usize, gap: f64, seed: u64) -> (DenseArray, Vec<u32>) {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u32;
            let c = if l == 1 { gap } else { -gap };
            rows.push(vec![c + 0.3 * rng.normal(), c + 0.3 * rng.normal()]);
            y.push(l);
        }
        (DenseArray::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn separable_clusters_are_fit() {
        let (x, y) = clusters(40, 2.0, 0);
        let p = train_linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(accuracy(&p.predict(&x).unwrap(), &y, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn loss_is_non_increasing() {
        for seed in 0..10 {
            let (x, y) = clusters(30, 0.3, seed);
            let p = train_linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
            assert!(p.loss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "seed {seed}");
        }
    }

    #[test]
    fn heavy_penalty_shrinks_to_half() {
        let (x, y) = clusters(20, 1.0, 1);
        let p = train_linear_probe(&x, &y, &ProbeConfig { lambda: 1e8, ..Default::default() }).unwrap();
        assert!(p.w.iter().all(|w| w.abs() < 1e-6));
        assert!(p.predict(&x).unwrap().iter().all(|s| (s - 0.5).abs() < 1e-6));
    }

    #[test]
    fn conflicting_labels_give_one_half() {
        let x = DenseArray::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let p = train_linear_probe(&x, &[0, 1], &ProbeConfig::default()).unwrap();
        assert!((p.predict(&x).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let (x, _) = clusters(4, 1.0, 2);
        assert!(matches!(train_linear_probe(&x, &[1; 4], &ProbeConfig::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (x, y) = clusters(12, 0.5, seed);
            let t = binary_targets(&y);
            let mut rng = Rng::new(seed + 40);
            let mut p = ParamStore::new();
            p.insert("probe.w", DenseArray::new(vec![2, 1], vec![rng.normal(), rng.normal()]).unwrap()).unwrap();
            p.insert("probe.b", DenseArray::full(&[1, 1], rng.normal())).unwrap();
            let err = finite_diff_check(|g: &mut Graph, v: &ParamVars| probe_loss_graph(g, v, &x, &t, 0.1), &p, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn loss_matches_logistic_formula() {
        let (x, y) = clusters(10, 0.5, 9);
        let t = binary_targets(&y);
        let mut p = ParamStore::new();
        p.insert("probe.w", DenseArray::new(vec![2, 1], vec![0.7, -0.2]).unwrap()).unwrap();
        p.insert("probe.b", DenseArray::full(&[1, 1], 0.1)).unwrap();
        let l = crate::numerics::evaluate(|g: &mut Graph, v: &ParamVars| probe_loss_graph(g, v, &x, &t, 0.2), &p).unwrap();
        let direct: f64 = x
            .rows()
            .zip(&y)
            .map(|(r, &l)| {
                let z = 0.7 * r[0] - 0.2 * r[1] + 0.1;
                let sign = if l == 1 { 1.0 } else { -1.0 };
                (1.0 + (-sign * z).exp()).ln()
            })
            .sum::<f64>()
            / 10.0
            + 0.1 * (0.49 + 0.04);
        assert!((l - direct).abs() < 1e-12);
    }
}
