//! Paired synthetic cohorts: CT-like volumes and clinical vectors that share a
//! latent factor `z`, with label `[z₀ > threshold]`.
//!
//! Images carry `z₀` in the radius of a soft spherical lesion and `z₁` in its
//! intensity. Each volume also gets a random lesion offset, a distractor blob
//! and Gaussian noise. Clinical vectors are a fixed affine map of `z` plus
//! noise, so every latent coordinate reaches the clinical channel.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clinical_encoder::{write_clinical_csv, ClinicalRecord, ClinicalSchema};
use crate::ct_preprocess::{csv_err, write_manifest, write_volume, CtVolume, ManifestEntry};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Soft-tissue background level.
const TISSUE_HU: f64 = 0.0;
/// Width of the lesion's soft edge.
const EDGE_MM: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_patients: usize,
    /// `[z, y, x]` voxel counts.
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub latent_dim: usize,
    /// Labels are `[z₀ > label_threshold]`.
    pub label_threshold: f64,
    /// Draw labels independently of everything else.
    pub null_labels: bool,
    /// Voxel noise standard deviation in HU.
    pub image_noise_hu: f64,
    /// Clinical noise relative to each column's scale.
    pub clinical_noise: f64,
    pub num_features: usize,
    /// Probability that a clinical cell is left empty.
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_patients: 120,
            dims: [8, 20, 20],
            spacing_mm: [2.0, 1.28, 1.28],
            latent_dim: 4,
            label_threshold: 0.0,
            null_labels: false,
            image_noise_hu: 20.0,
            clinical_noise: 0.3,
            num_features: 8,
            missing_rate: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_patients < 4 {
            return Err(Error::invalid("synthetic cohort needs at least 4 patients"));
        }
        if self.latent_dim < 2 {
            return Err(Error::invalid("latent_dim must be >= 2"));
        }
        if self.dims.contains(&0) || self.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("volume dims and spacing must be positive"));
        }
        if !(self.image_noise_hu >= 0.0 && self.clinical_noise >= 0.0) {
            return Err(Error::invalid("noise levels must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::invalid("missing_rate must lie in [0, 1)"));
        }
        if self.num_features == 0 {
            return Err(Error::invalid("num_features must be >= 1"));
        }
        Ok(())
    }

    pub fn schema(&self) -> ClinicalSchema {
        ClinicalSchema {
            patient_id_column: "patient_id".into(),
            feature_columns: (0..self.num_features).map(|j| format!("feature_{j:02}")).collect(),
        }
    }
}

/// Lesion radius, increasing in `z₀`.
pub fn lesion_radius_mm(z0: f64) -> f64 {
    (4.0 + 1.5 * z0).clamp(1.5, 8.0)
}

/// Lesion contrast above tissue, increasing in `z₁`.
pub fn lesion_contrast_hu(z1: f64) -> f64 {
    (120.0 + 40.0 * z1).clamp(30.0, 220.0)
}

fn soft_ball(dist: f64, radius: f64) -> f64 {
    1.0 / (1.0 + ((dist - radius) / EDGE_MM).exp())
}

/// Renders one volume; all randomness comes from `rng`.
pub fn render_volume(patient_id: &str, z: &[f64], cfg: &SynthConfig, rng: &mut Rng) -> Result<CtVolume> {
    let [nz, ny, nx] = cfg.dims;
    let [sz, sy, sx] = cfg.spacing_mm;
    let extent = [nz as f64 * sz, ny as f64 * sy, nx as f64 * sx];
    let centre = |rng: &mut Rng, spread: f64| -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = extent[a] / 2.0 + rng.uniform_range(-spread, spread) * extent[a];
        }
        c
    };
    let lesion = centre(rng, 0.1);
    let (r, contrast) = (lesion_radius_mm(z[0]), lesion_contrast_hu(z[1]));
    let decoy = centre(rng, 0.3);
    let decoy_r = rng.uniform_range(1.0, 2.5);
    let decoy_hu = rng.uniform_range(-80.0, 80.0);
    let mut voxels = Vec::with_capacity(nz * ny * nx);
    for k in 0..nz {
        for i in 0..ny {
            for j in 0..nx {
                let p = [(k as f64 + 0.5) * sz, (i as f64 + 0.5) * sy, (j as f64 + 0.5) * sx];
                let dist = |c: &[f64; 3]| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let noise = if cfg.image_noise_hu > 0.0 { cfg.image_noise_hu * rng.normal() } else { 0.0 };
                voxels.push(TISSUE_HU + contrast * soft_ball(dist(&lesion), r) + decoy_hu * soft_ball(dist(&decoy), decoy_r) + noise);
            }
        }
    }
    CtVolume::new(patient_id, cfg.dims, cfg.spacing_mm, voxels)
}

/// Fixed per-cohort affine map from latent to clinical columns.
struct ClinicalMap {
    weights: Vec<Vec<f64>>,
    scale: Vec<f64>,
    offset: Vec<f64>,
}

impl ClinicalMap {
    fn new(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        let nc = cfg.num_features;
        let weights = (0..nc).map(|_| (0..cfg.latent_dim).map(|_| rng.normal()).collect()).collect();
        let scale = (0..nc).map(|_| rng.uniform_range(1.0, 20.0)).collect();
        let offset = (0..nc).map(|_| rng.uniform_range(-50.0, 80.0)).collect();
        Self { weights, scale, offset }
    }

    fn apply(&self, z: &[f64], noise: f64, missing_rate: f64, rng: &mut Rng) -> Vec<Option<f64>> {
        (0..self.scale.len())
            .map(|j| {
                let signal: f64 = self.weights[j].iter().zip(z).map(|(w, v)| w * v).sum();
                let eps = if noise > 0.0 { noise * rng.normal() } else { 0.0 };
                let v = self.offset[j] + self.scale[j] * (signal + eps);
                (missing_rate == 0.0 || !rng.bernoulli(missing_rate)).then_some(v)
            })
            .collect()
    }
}

/// In-memory patient of a synthetic cohort.
#[derive(Clone, Debug)]
pub struct SynthPatient {
    pub patient_id: String,
    pub latent: Vec<f64>,
    pub label: u32,
    pub volume: CtVolume,
    pub clinical: ClinicalRecord,
}

/// Draws a cohort in memory; patient `i` uses the stream `fork_indexed("patient", i)`.
pub fn sample_cohort(cfg: &SynthConfig, rng: &Rng) -> Result<Vec<SynthPatient>> {
    cfg.validate()?;
    let map = ClinicalMap::new(cfg, &mut rng.fork("clinical.map"));
    let patients: Vec<SynthPatient> = (0..cfg.num_patients)
        .into_par_iter()
        .map(|i| {
            let prng = rng.fork_indexed("patient", i);
            let id = format!("syn{i:04}");
            let mut lr = prng.fork("latent");
            let latent: Vec<f64> = (0..cfg.latent_dim).map(|_| lr.normal()).collect();
            let label = if cfg.null_labels {
                u32::from(prng.fork("null_label").bernoulli(0.5))
            } else {
                u32::from(latent[0] > cfg.label_threshold)
            };
            let volume = render_volume(&id, &latent, cfg, &mut prng.fork("render"))?;
            let values = map.apply(&latent, cfg.clinical_noise, cfg.missing_rate, &mut prng.fork("clinical"));
            let clinical = ClinicalRecord::new(&id, values)?;
            Ok(SynthPatient { patient_id: id, latent, label, volume, clinical })
        })
        .collect::<Result<_>>()?;
    let positives = patients.iter().filter(|p| p.label == 1).count();
    if positives == 0 || positives == patients.len() {
        return Err(Error::invalid("synthetic cohort drew a single class; change the seed or label threshold"));
    }
    Ok(patients)
}

/// Files written by [`generate_cohort`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortFiles {
    pub manifest: PathBuf,
    pub clinical_csv: PathBuf,
    pub schema: PathBuf,
    pub labels_csv: PathBuf,
}

pub fn write_labels_csv(path: &Path, labels: &[(String, u32)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, "", e))?;
    w.write_record(["patient_id", "label"]).map_err(|e| csv_err(path, 0, "", e))?;
    for (i, (id, l)) in labels.iter().enumerate() {
        w.write_record([id.as_str(), &l.to_string()]).map_err(|e| csv_err(path, i + 1, "", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `patient_id,label` rows in file order.
pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, u32)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, 0, "", e))?;
    let headers = r.headers().map_err(|e| csv_err(path, 0, "", e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["patient_id", "label"] {
        return Err(csv_err(path, 0, "header", "expected header patient_id,label"));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, i + 1, "", e))?;
        let label = rec[1].trim().parse::<u32>().map_err(|e| csv_err(path, i + 1, "label", e))?;
        out.push((rec[0].trim().to_string(), label));
    }
    Ok(out)
}

/// Writes a cohort under `out_dir`: `volumes/<id>.raw|.json`, `manifest.csv`,
/// `clinical.csv`, `clinical_schema.json` and `labels.csv`.
///
/// Odd-indexed patients store their slices in descending z order with
/// explicit positions, exercising the loader's z-sort.
pub fn generate_cohort(cfg: &SynthConfig, out_dir: &Path, rng: &Rng) -> Result<CohortFiles> {
    let patients = sample_cohort(cfg, rng)?;
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let entries: Vec<ManifestEntry> = patients
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let raw_rel = PathBuf::from("volumes").join(format!("{}.raw", p.patient_id));
            let side_rel = PathBuf::from("volumes").join(format!("{}.json", p.patient_id));
            let [nz, ny, nx] = p.volume.dims();
            let dz = p.volume.spacing_mm()[0];
            let (vol, z) = if i % 2 == 1 {
                let plane = ny * nx;
                let flipped: Vec<f64> = (0..nz).rev().flat_map(|k| p.volume.voxels()[k * plane..(k + 1) * plane].iter().copied()).collect();
                let z: Vec<f64> = (0..nz).rev().map(|k| k as f64 * dz).collect();
                (CtVolume::new(&p.patient_id, p.volume.dims(), p.volume.spacing_mm(), flipped)?, Some(z))
            } else {
                (p.volume.clone(), None)
            };
            write_volume(&vol, &out_dir.join(&raw_rel), &out_dir.join(&side_rel), z)?;
            Ok(ManifestEntry {
                patient_id: p.patient_id.clone(),
                volume_path: raw_rel,
                sidecar_path: side_rel,
                label: Some(p.label),
            })
        })
        .collect::<Result<_>>()?;
    let files = CohortFiles {
        manifest: out_dir.join("manifest.csv"),
        clinical_csv: out_dir.join("clinical.csv"),
        schema: out_dir.join("clinical_schema.json"),
        labels_csv: out_dir.join("labels.csv"),
    };
    write_manifest(&files.manifest, &entries)?;
    let schema = cfg.schema();
    schema.save(&files.schema)?;
    let records: Vec<ClinicalRecord> = patients.iter().map(|p| p.clinical.clone()).collect();
    write_clinical_csv(&files.clinical_csv, &schema, &records)?;
    let labels: Vec<(String, u32)> = patients.iter().map(|p| (p.patient_id.clone(), p.label)).collect();
    write_labels_csv(&files.labels_csv, &labels)?;
    Ok(files)
}
