use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Rng;

fn by_class(indices: impl Iterator<Item = usize>, labels: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in indices {
        m.entry(labels[i]).or_default().push(i);
    }
    m
}

/// Per-class random split; each class with ≥ 2 members keeps at least one
/// example on both sides. Returns sorted `(train, test)` indices.
pub fn stratified_split(labels: &[u32], test_fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut idx) in by_class(0..labels.len(), labels) {
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_test = if n < 2 { 0 } else { ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1) };
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// `k` training indices per class, drawn without replacement, sorted.
pub fn sample_per_class(train: &[usize], labels: &[u32], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("few-shot k must be >= 1"));
    }
    let mut out = Vec::new();
    for (class, idx) in by_class(train.iter().copied(), labels) {
        if idx.len() < k {
            return Err(Error::InsufficientSamples {
                class,
                available: idx.len(),
                needed: k,
            });
        }
        out.extend(rng.sample_indices(idx.len(), k).into_iter().map(|j| idx[j]));
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<u32> = (0..50).map(|i| u32::from(i % 5 == 0)).collect();
        let (train, test) = stratified_split(&labels, 0.3, &mut Rng::new(0)).unwrap();
        assert_eq!(train.len() + test.len(), 50);
        assert!(train.iter().all(|i| !test.contains(i)));
        assert_eq!(test.iter().filter(|&&i| labels[i] == 1).count(), 3);
        assert_eq!(test.iter().filter(|&&i| labels[i] == 0).count(), 12);
        assert_eq!(stratified_split(&labels, 0.3, &mut Rng::new(0)).unwrap(), (train, test));
    }

    #[test]
    fn sampling_respects_classes() {
        let labels = [0, 1, 0, 1, 0, 1, 0];
        let s = sample_per_class(&[0, 1, 2, 3, 4, 5], &labels, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 2);
        match sample_per_class(&[0, 1, 2, 3], &labels, 3, &mut Rng::new(1)) {
            Err(Error::InsufficientSamples { class, available, needed }) => assert_eq!((class, available, needed), (0, 2, 3)),
            other => panic!("unexpected {other:?}"),
        }
        let all = sample_per_class(&[0, 1, 2, 3], &labels, 2, &mut Rng::new(5)).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }
}
