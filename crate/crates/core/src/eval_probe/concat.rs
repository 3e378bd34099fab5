use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{forward_backward, forward_value, glorot, Adam, AdamConfig, DenseArray, Graph, ParamStore, ParamVars, Rng, Var};

/// Supervised two-layer perceptron on concatenated CT and clinical features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcatConfig {
    pub hidden_dim: usize,
    pub steps: usize,
    pub optimizer: AdamConfig,
}

impl Default for ConcatConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            steps: 300,
            optimizer: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        }
    }
}

fn logits(g: &mut Graph, v: &ParamVars, x: &DenseArray) -> Result<Var> {
    let xv = g.constant(x.clone());
    let h = g.affine(xv, v.get("concat.l1.weight")?, v.get("concat.l1.bias")?)?;
    let h = g.relu(h)?;
    g.affine(h, v.get("concat.l2.weight")?, v.get("concat.l2.bias")?)
}

#[derive(Clone, Debug)]
pub struct ConcatModel {
    params: ParamStore,
}

impl ConcatModel {
    /// Class probabilities `[n, K]`.
    pub fn predict(&self, x: &DenseArray) -> Result<Vec<Vec<f64>>> {
        let p = forward_value(
            |g: &mut Graph, v: &ParamVars| {
                let z = logits(g, v, x)?;
                g.row_softmax(z)
            },
            &self.params,
        )?;
        Ok(p.rows().map(<[f64]>::to_vec).collect())
    }
}

/// Full-batch Adam on softmax cross-entropy over `num_classes` logits.
pub fn train_concat_mlp(x: &DenseArray, labels: &[u32], num_classes: usize, cfg: &ConcatConfig, rng: &mut Rng) -> Result<ConcatModel> {
    let (n, d) = x.dims2("concat_mlp")?;
    if labels.len() != n || n == 0 {
        return Err(Error::shape("concat_mlp", x.shape(), &[labels.len()]));
    }
    if num_classes < 2 || labels.iter().any(|&l| l as usize >= num_classes) {
        return Err(Error::invalid("concat MLP labels must lie in 0..num_classes with >= 2 classes"));
    }
    let mut targets = DenseArray::zeros(&[n, num_classes]);
    for (i, &l) in labels.iter().enumerate() {
        targets.data_mut()[i * num_classes + l as usize] = 1.0;
    }
    let h = cfg.hidden_dim;
    let mut params = ParamStore::new();
    params.insert("concat.l1.weight", glorot(rng, d, h))?;
    params.insert("concat.l1.bias", DenseArray::zeros(&[1, h]))?;
    params.insert("concat.l2.weight", glorot(rng, h, num_classes))?;
    params.insert("concat.l2.bias", DenseArray::zeros(&[1, num_classes]))?;
    let mut opt = Adam::new(cfg.optimizer.clone(), &params);
    for _ in 0..cfg.steps {
        let (_, grads) = forward_backward(
            |g: &mut Graph, v: &ParamVars| {
                let z = logits(g, v, x)?;
                g.softmax_cross_entropy(z, &targets)
            },
            &params,
        )?;
        opt.step(&mut params, &grads)?;
    }
    Ok(ConcatModel { params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learns_a_nonlinear_rule() {
        let mut rng = Rng::new(0);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)]).collect();
        let labels: Vec<u32> = rows.iter().map(|r| u32::from(r[0] * r[1] > 0.0)).collect();
        let x = DenseArray::from_rows(&rows).unwrap();
        let cfg = ConcatConfig { steps: 600, ..Default::default() };
        let m = train_concat_mlp(&x, &labels, 2, &cfg, &mut Rng::new(1)).unwrap();
        let p = m.predict(&x).unwrap();
        let acc = p.iter().zip(&labels).filter(|(r, &l)| (r[1] >= 0.5) == (l == 1)).count() as f64 / 60.0;
        assert!(acc > 0.9, "{acc}");
        assert!(p.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }
}
