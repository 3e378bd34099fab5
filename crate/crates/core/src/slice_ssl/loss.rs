use crate::error::{Error, Result};
use crate::numerics::{evaluate, kernels, DenseArray, Graph, ParamStore, ParamVars, Var};

/// Logit assigned to an anchor's similarity with itself; `exp` of it underflows to 0.
const SELF_MASK: f64 = -1e30;

/// Tolerance on row norms accepted as "normalized".
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub(crate) fn check_unit_rows(z: &DenseArray, op: &str) -> Result<()> {
    for (i, n) in kernels::row_norms(z)?.iter().enumerate() {
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("{op}: row {i} has norm {n}, expected unit rows")));
        }
    }
    Ok(())
}

/// Pair layout targets: row `2k` and `2k+1` are each other's positive.
fn pair_targets(rows: usize) -> DenseArray {
    let mut t = DenseArray::zeros(&[rows, rows]);
    for i in 0..rows {
        t.data_mut()[i * rows + (i ^ 1)] = 1.0;
    }
    t
}

/// NT-Xent over `2N` unit rows arranged as consecutive positive pairs.
///
/// For every anchor, the candidates are all other rows; the loss is the mean
/// over anchors of `−log softmax(sim / tau)[positive]`.
pub fn nt_xent_graph(g: &mut Graph, z: Var, tau: f64) -> Result<Var> {
    let (rows, _) = g.value(z).dims2("nt_xent")?;
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::invalid(format!("nt_xent needs 2N rows with N >= 1, got {rows}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("nt_xent temperature must be positive"));
    }
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let mask = g.constant({
        let mut m = DenseArray::zeros(&[rows, rows]);
        for i in 0..rows {
            m.data_mut()[i * rows + i] = SELF_MASK;
        }
        m
    });
    let masked = g.add(logits, mask)?;
    g.softmax_cross_entropy(masked, &pair_targets(rows))
}

/// Scalar NT-Xent on already normalized embeddings.
pub fn nt_xent_loss(z: &DenseArray, tau: f64) -> Result<f64> {
    check_unit_rows(z, "nt_xent")?;
    let z = z.clone();
    evaluate(
        move |g: &mut Graph, _: &ParamVars| {
            let zv = g.constant(z.clone());
            nt_xent_graph(g, zv, tau)
        },
        &ParamStore::new(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, l2_normalize_rows, ParamStore, Rng};

    /// Direct evaluation: loops over anchors and candidates.
    fn brute_force(z: &DenseArray, tau: f64) -> f64 {
        let n = z.shape()[0];
        let dot = |a: usize, b: usize| -> f64 { z.row(a).iter().zip(z.row(b)).map(|(x, y)| x * y).sum() };
        let mut total = 0.0;
        for i in 0..n {
            let pos = (dot(i, i ^ 1) / tau).exp();
            let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (dot(i, k) / tau).exp()).sum();
            total -= (pos / denom).ln();
        }
        total / n as f64
    }

    fn unit_rows(rng: &mut Rng, rows: usize, dim: usize) -> DenseArray {
        let raw = DenseArray::new(vec![rows, dim], (0..rows * dim).map(|_| rng.normal()).collect()).unwrap();
        l2_normalize_rows(&raw, 1e-12).unwrap()
    }

    #[test]
    fn single_pair_is_zero() {
        let z = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(nt_xent_loss(&z, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_give_log_three() {
        let z = DenseArray::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        let l = nt_xent_loss(&z, 0.5).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!((3f64.ln() - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_pairs_closed_form() {
        let z = DenseArray::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let l = nt_xent_loss(&z, 1.0).unwrap();
        let e = 1f64.exp();
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((l - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn guards() {
        let z = DenseArray::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(nt_xent_loss(&z, 0.1).is_err());
        let odd = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(nt_xent_loss(&odd, 0.1).is_err());
    }

    #[test]
    fn matches_brute_force_and_is_nonnegative() {
        let mut rng = Rng::new(5);
        for trial in 0..50 {
            let n = 1 + trial % 6;
            let z = unit_rows(&mut rng, 2 * n, 3 + trial % 4);
            let tau = 0.05 + rng.uniform();
            let l = nt_xent_loss(&z, tau).unwrap();
            assert!(l >= 0.0);
            assert!((l - brute_force(&z, tau)).abs() < 1e-10, "trial {trial}");
        }
    }

    #[test]
    fn tiny_temperature_with_aligned_positives_approaches_zero() {
        let z = DenseArray::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!(nt_xent_loss(&z, 0.01).unwrap() < 1e-30);
    }

    #[test]
    fn invariant_to_reordering_pairs() {
        let mut rng = Rng::new(8);
        let z = unit_rows(&mut rng, 8, 5);
        let order = [2usize, 0, 3, 1];
        let rows: Vec<usize> = order.iter().flat_map(|&p| [2 * p, 2 * p + 1]).collect();
        let permuted = z.select_rows(&rows).unwrap();
        let (a, b) = (nt_xent_loss(&z, 0.2).unwrap(), nt_xent_loss(&permuted, 0.2).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let mut p = ParamStore::new();
            p.insert("z", DenseArray::new(vec![6, 4], (0..24).map(|_| rng.normal()).collect()).unwrap()).unwrap();
            let err = finite_diff_check(
                |g: &mut Graph, v: &ParamVars| {
                    let z = g.l2_normalize_rows(v.get("z")?, 1e-12)?;
                    nt_xent_graph(g, z, 0.5)
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
