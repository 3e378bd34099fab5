//! Clinical numeric features: CSV ingestion, training-split standardization,
//! and a three-layer MLP mapping `t ∈ R^{N_c}` to `c ∈ R^d`.
//!
//! Categorical variables must already be encoded as numeric columns.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ct_preprocess::csv_err;
use crate::error::{Error, Result};
use crate::fsio::{read_json, write_json};
use crate::numerics::{forward_value, glorot, DenseArray, Graph, ParamStore, ParamVars, Rng, Var};
use crate::slice_ssl::Activation;

pub const CLINICAL_PREFIX: &str = "clinical.";

/// Standard deviations below this are treated as 1.
pub const STD_FLOOR: f64 = 1e-12;

/// Column layout of a clinical CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalSchema {
    pub patient_id_column: String,
    /// Ordered feature columns; their order defines the feature vector.
    pub feature_columns: Vec<String>,
}

impl ClinicalSchema {
    pub fn num_features(&self) -> usize {
        self.feature_columns.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_json(path)?;
        if s.feature_columns.is_empty() {
            return Err(Error::invalid(format!("{}: schema lists no feature columns", path.display())));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalRecord {
    pub patient_id: String,
    /// Missing entries hold 0.0.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl ClinicalRecord {
    pub fn new(patient_id: impl Into<String>, values: Vec<Option<f64>>) -> Result<Self> {
        let patient_id = patient_id.into();
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("clinical record {patient_id} has a non-finite value")));
        }
        Ok(Self {
            patient_id,
            missing: values.iter().map(Option::is_none).collect(),
            values: values.iter().map(|v| v.unwrap_or(0.0)).collect(),
        })
    }

    pub fn get(&self, j: usize) -> Option<f64> {
        (!self.missing[j]).then(|| self.values[j])
    }
}

/// Reads records in file order. Empty cells are missing; other cells must parse as finite numbers.
pub fn load_clinical_csv(path: &Path, schema: &ClinicalSchema) -> Result<Vec<ClinicalRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, 0, "", e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, 0, "", e))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            column: name.to_string(),
            message: "column missing from header".into(),
        })
    };
    let id_col = find(&schema.patient_id_column)?;
    let cols: Vec<usize> = schema.feature_columns.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_err(path, row, "", e))?;
        let pid = rec.get(id_col).unwrap_or("").trim().to_string();
        if pid.is_empty() {
            return Err(csv_err(path, row, &schema.patient_id_column, "empty patient id"));
        }
        if !seen.insert(pid.clone()) {
            return Err(csv_err(path, row, &schema.patient_id_column, format!("duplicate patient id {pid}")));
        }
        let mut values = Vec::with_capacity(cols.len());
        for (&c, name) in cols.iter().zip(&schema.feature_columns) {
            let cell = rec.get(c).unwrap_or("").trim();
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(Some(v)),
                _ => return Err(csv_err(path, row, name, format!("`{cell}` is not a finite number"))),
            }
        }
        out.push(ClinicalRecord::new(pid, values)?);
    }
    Ok(out)
}

pub fn write_clinical_csv(path: &Path, schema: &ClinicalSchema, records: &[ClinicalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, "", e))?;
    let header: Vec<&str> = std::iter::once(schema.patient_id_column.as_str())
        .chain(schema.feature_columns.iter().map(String::as_str))
        .collect();
    w.write_record(&header).map_err(|e| csv_err(path, 0, "", e))?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![r.patient_id.clone()];
        row.extend((0..r.values.len()).map(|j| r.get(j).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| csv_err(path, i + 1, "", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-feature mean and population standard deviation over present values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Features with no present value get mean 0 and std 1.
    pub fn fit(records: &[&ClinicalRecord], num_features: usize) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.values.len() != num_features) {
            return Err(Error::shape("feature_stats", &[r.values.len()], &[num_features]));
        }
        let mut mean = vec![0.0; num_features];
        let mut std = vec![1.0; num_features];
        for j in 0..num_features {
            let present: Vec<f64> = records.iter().filter_map(|r| r.get(j)).collect();
            if present.is_empty() {
                continue;
            }
            let n = present.len() as f64;
            let m = present.iter().sum::<f64>() / n;
            let var = present.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            let s = var.sqrt();
            std[j] = if s < STD_FLOOR { 1.0 } else { s };
        }
        Ok(Self { mean, std })
    }

    pub fn num_features(&self) -> usize {
        self.mean.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_json(path)?;
        if s.mean.len() != s.std.len() || s.std.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid(format!("{}: malformed feature stats", path.display())));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// `[B, N_c]` matrix of standardized rows; missing entries become 0.
pub fn standardize(records: &[&ClinicalRecord], stats: &FeatureStats) -> Result<DenseArray> {
    let nc = stats.num_features();
    let mut data = Vec::with_capacity(records.len() * nc);
    for r in records {
        if r.values.len() != nc {
            return Err(Error::shape("standardize", &[r.values.len()], &[nc]));
        }
        data.extend((0..nc).map(|j| r.get(j).map_or(0.0, |v| (v - stats.mean[j]) / stats.std[j])));
    }
    DenseArray::new(vec![records.len(), nc], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClinicalConfig {
    /// Hidden width `m`.
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl Default for ClinicalConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            activation: Activation::Relu,
        }
    }
}

fn key(name: &str) -> String {
    format!("{CLINICAL_PREFIX}{name}")
}

impl ClinicalConfig {
    /// Layers `N_c → m → m → d` with Glorot weights and zero biases.
    pub fn init_params(&self, num_features: usize, embed_dim: usize, rng: &mut Rng) -> Result<ParamStore> {
        if self.hidden_dim < 2 || num_features == 0 || embed_dim == 0 {
            return Err(Error::invalid("clinical MLP needs N_c >= 1, m >= 2 and d >= 1"));
        }
        let m = self.hidden_dim;
        let dims = [(num_features, m), (m, m), (m, embed_dim)];
        let mut p = ParamStore::new();
        for (i, &(fi, fo)) in dims.iter().enumerate() {
            p.insert(key(&format!("l{}.weight", i + 1)), glorot(rng, fi, fo))?;
            p.insert(key(&format!("l{}.bias", i + 1)), DenseArray::zeros(&[1, fo]))?;
        }
        Ok(p)
    }

    /// `[B, N_c]` → `[B, d]`.
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, t: Var) -> Result<Var> {
        let mut h = t;
        for i in 1..=3 {
            h = g.affine(h, vars.get(&key(&format!("l{i}.weight")))?, vars.get(&key(&format!("l{i}.bias")))?)?;
            if i < 3 {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }
}

/// Encodes a batch of standardized rows.
pub fn encode_clinical_batch(params: &ParamStore, cfg: &ClinicalConfig, t: &DenseArray) -> Result<DenseArray> {
    let (_, nc) = t.dims2("encode_clinical")?;
    let w = params.get(&key("l1.weight"))?;
    if w.shape()[0] != nc {
        return Err(Error::shape("encode_clinical", t.shape(), w.shape()));
    }
    forward_value(
        |g: &mut Graph, v: &ParamVars| {
            let x = g.constant(t.clone());
            cfg.forward(g, v, x)
        },
        params,
    )
}

pub fn encode_clinical(params: &ParamStore, cfg: &ClinicalConfig, t: &[f64]) -> Result<Vec<f64>> {
    let row = DenseArray::new(vec![1, t.len()], t.to_vec())?;
    Ok(encode_clinical_batch(params, cfg, &row)?.into_data())
}
