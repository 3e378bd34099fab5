use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::concat::{train_concat_mlp, ConcatConfig};
use super::metrics::{accuracy, auroc, macro_auroc, MetricReport};
use super::probe::{train_linear_probe, ProbeConfig};
use super::split::{sample_per_class, stratified_split};
use crate::clinical_encoder::{standardize, ClinicalRecord, FeatureStats};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Rng};

pub const UNIMODAL: &str = "unimodal";
pub const CONCATENATION: &str = "concatenation";
pub const CONTRASTIVE: &str = "contrastive";

/// Patient embeddings with integer class labels `0..K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddingSet {
    pub patient_ids: Vec<String>,
    pub x: DenseArray,
    pub labels: Vec<u32>,
}

impl LabeledEmbeddingSet {
    pub fn new(patient_ids: Vec<String>, x: DenseArray, labels: Vec<u32>) -> Result<Self> {
        let (n, _) = x.dims2("labeled_embeddings")?;
        if patient_ids.len() != n || labels.len() != n {
            return Err(Error::shape("labeled_embeddings", x.shape(), &[patient_ids.len(), labels.len()]));
        }
        let set = Self { patient_ids, x, labels };
        let k = set.num_classes();
        if k < 2 {
            return Err(Error::SingleClass);
        }
        if let Some(c) = (0..k as u32).find(|c| !set.labels.contains(c)) {
            return Err(Error::invalid(format!("labels skip class {c}")));
        }
        Ok(set)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    fn rows(&self, idx: &[usize]) -> Result<(DenseArray, Vec<u32>)> {
        Ok((self.x.select_rows(idx)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub test_fraction: f64,
    pub repeats: usize,
    pub probe: ProbeConfig,
    pub concat: ConcatConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.3,
            repeats: 10,
            probe: ProbeConfig::default(),
            concat: ConcatConfig::default(),
        }
    }
}

/// `[n, K]` class scores from binary probes (one-vs-rest when `K > 2`).
fn probe_scores(train_x: &DenseArray, train_y: &[u32], test_x: &DenseArray, k: usize, cfg: &ProbeConfig) -> Result<Vec<Vec<f64>>> {
    if k == 2 {
        let p = train_linear_probe(train_x, train_y, cfg)?.predict(test_x)?;
        return Ok(p.into_iter().map(|v| vec![1.0 - v, v]).collect());
    }
    let mut cols = Vec::with_capacity(k);
    for c in 0..k as u32 {
        let y: Vec<u32> = train_y.iter().map(|&l| u32::from(l == c)).collect();
        cols.push(train_linear_probe(train_x, &y, cfg)?.predict(test_x)?);
    }
    Ok((0..test_x.shape()[0]).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

/// `(AUROC, ACC)`; binary tasks threshold `p(1)` at 0.5, multi-class tasks use
/// macro one-vs-rest AUROC and arg-max accuracy.
fn score_metrics(scores: &[Vec<f64>], labels: &[u32], k: usize) -> Result<(f64, f64)> {
    if k == 2 {
        let p: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        return Ok((auroc(&p, labels)?, accuracy(&p, labels, 0.5)?));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(r, &l)| {
            let best = (0..k).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).unwrap_or(0);
            best == l as usize
        })
        .count();
    Ok((macro_auroc(scores, labels, k)?, hits as f64 / labels.len() as f64))
}

fn reports(task: &str, model: &str, k: Option<usize>, values: &[(f64, f64)]) -> Result<Vec<MetricReport>> {
    Ok(vec![
        MetricReport::from_values(task, model, "auroc", k, values.iter().map(|v| v.0).collect())?,
        MetricReport::from_values(task, model, "acc", k, values.iter().map(|v| v.1).collect())?,
    ])
}

/// k-shot probing: a fixed stratified test split, then `repeats` independent
/// draws of `k` training examples per class. Returns AUROC and ACC reports.
pub fn fewshot_eval(set: &LabeledEmbeddingSet, k: usize, cfg: &EvalConfig, task: &str, model: &str, rng: &Rng) -> Result<Vec<MetricReport>> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    let classes = set.num_classes();
    let (train, test) = stratified_split(&set.labels, cfg.test_fraction, &mut rng.fork("split"))?;
    let (test_x, test_y) = set.rows(&test)?;
    let values: Vec<(f64, f64)> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let shots = sample_per_class(&train, &set.labels, k, &mut rng.fork_indexed("shots", r))?;
            let (x, y) = set.rows(&shots)?;
            let scores = probe_scores(&x, &y, &test_x, classes, &cfg.probe)?;
            score_metrics(&scores, &test_y, classes)
        })
        .collect::<Result<_>>()?;
    reports(task, model, Some(k), &values)
}

/// The three-way comparison on identical splits: a probe on unaligned pooled
/// CT embeddings, a supervised MLP on `[CT ‖ standardized clinical]`, and a
/// probe on alignment-trained CT embeddings.
pub fn run_comparison(
    unimodal: &LabeledEmbeddingSet,
    aligned: &LabeledEmbeddingSet,
    clinical: &[ClinicalRecord],
    cfg: &EvalConfig,
    task: &str,
    rng: &Rng,
) -> Result<Vec<MetricReport>> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    let clin_ids: Vec<&str> = clinical.iter().map(|r| r.patient_id.as_str()).collect();
    if unimodal.patient_ids != aligned.patient_ids || unimodal.patient_ids.iter().map(String::as_str).ne(clin_ids.iter().copied()) {
        return Err(Error::invalid("comparison inputs must list the same patients in the same order"));
    }
    if unimodal.labels != aligned.labels {
        return Err(Error::invalid("comparison inputs disagree on labels"));
    }
    let classes = unimodal.num_classes();
    let num_features = clinical.first().map_or(0, |r| r.values.len());
    let per_repeat: Vec<[(f64, f64); 3]> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let (train, test) = stratified_split(&unimodal.labels, cfg.test_fraction, &mut rng.fork_indexed("split", r))?;
            let (ux, uy) = unimodal.rows(&train)?;
            let (utx, uty) = unimodal.rows(&test)?;
            let uni = score_metrics(&probe_scores(&ux, &uy, &utx, classes, &cfg.probe)?, &uty, classes)?;

            let train_recs: Vec<&ClinicalRecord> = train.iter().map(|&i| &clinical[i]).collect();
            let test_recs: Vec<&ClinicalRecord> = test.iter().map(|&i| &clinical[i]).collect();
            let stats = FeatureStats::fit(&train_recs, num_features)?;
            let join = |ct: &DenseArray, recs: &[&ClinicalRecord]| -> Result<DenseArray> {
                let t = standardize(recs, &stats)?;
                let rows: Vec<Vec<f64>> = ct.rows().zip(t.rows()).map(|(a, b)| [a, b].concat()).collect();
                DenseArray::from_rows(&rows)
            };
            let model = train_concat_mlp(&join(&ux, &train_recs)?, &uy, classes, &cfg.concat, &mut rng.fork_indexed("concat.init", r))?;
            let cat = score_metrics(&model.predict(&join(&utx, &test_recs)?)?, &uty, classes)?;

            let (ax, ay) = aligned.rows(&train)?;
            let (atx, aty) = aligned.rows(&test)?;
            let con = score_metrics(&probe_scores(&ax, &ay, &atx, classes, &cfg.probe)?, &aty, classes)?;
            Ok([uni, cat, con])
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (m, name) in [UNIMODAL, CONCATENATION, CONTRASTIVE].into_iter().enumerate() {
        let vals: Vec<(f64, f64)> = per_repeat.iter().map(|r| r[m]).collect();
        out.extend(reports(task, name, None, &vals)?);
    }
    Ok(out)
}
