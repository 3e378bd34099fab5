//! CT volume preprocessing: z-ordering, circular field-of-view masking,
//! trilinear resampling to a uniform voxel spacing, HU windowing and
//! normalization into stacks of axial slices.
//!
//! Volumes are stored as raw little-endian `f32` voxels in `(z, y, x)`
//! row-major order with a JSON sidecar:
//!
//! ```json
//! {"shape": [z, y, x], "spacing_mm": [z, y, x], "dtype": "f32le",
//!  "patient_id": "p001", "z_positions": [..]}
//! ```
//!
//! `z_positions` is optional; without it slices are taken in file order.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_MIN: f64 = -2048.0;
pub const HU_MAX: f64 = 4096.0;

/// A 3-D grid of Hounsfield units indexed `(z, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    pub patient_id: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    voxels: Vec<f64>,
}

impl CtVolume {
    pub fn new(patient_id: impl Into<String>, dims: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("volume extents {dims:?} must be >= 1")));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("voxel spacing {spacing_mm:?} must be positive")));
        }
        let n: usize = dims.iter().product();
        if voxels.len() != n {
            return Err(Error::invalid(format!(
                "shape {dims:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            dims,
            spacing_mm,
            voxels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        let [_, h, w] = self.dims;
        self.voxels[(z * h + y) * w + x]
    }

    fn with_voxels(&self, dims: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<f64>) -> Self {
        Self {
            patient_id: self.patient_id.clone(),
            dims,
            spacing_mm,
            voxels,
        }
    }
}

/// HU interval mapped linearly onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub name: String,
    pub hu_low: f64,
    pub hu_high: f64,
}

impl WindowSpec {
    pub fn new(name: impl Into<String>, hu_low: f64, hu_high: f64) -> Result<Self> {
        let w = Self {
            name: name.into(),
            hu_low,
            hu_high,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hu_low.is_finite() && self.hu_high.is_finite() && self.hu_low < self.hu_high) {
            return Err(Error::invalid(format!(
                "window `{}` needs hu_low < hu_high, got [{}, {}]",
                self.name, self.hu_low, self.hu_high
            )));
        }
        Ok(())
    }

    /// Named starting points. These are generic radiology windows, not tuned
    /// per cohort; pass an explicit window when it matters.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "lung" => Self::new("lung", -1000.0, 400.0),
            "breast" => Self::new("breast", -150.0, 250.0),
            "colorectal" => Self::new("colorectal", -150.0, 250.0),
            other => Err(Error::invalid(format!("unknown window preset `{other}`"))),
        }
    }

    pub fn normalize(&self, hu: f64) -> f64 {
        ((hu - self.hu_low) / (self.hu_high - self.hu_low)).clamp(0.0, 1.0)
    }
}

/// Normalized axial slices of one patient, ordered by ascending z.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub patient_id: String,
    shape: [usize; 3],
    pub source_spacing_mm: [f64; 3],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackFile {
    patient_id: String,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    data_b64: String,
}

impl SliceStack {
    pub fn new(patient_id: impl Into<String>, shape: [usize; 3], source_spacing_mm: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("slice stack shape {shape:?} must be >= 1")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid("slice stack data does not match its shape"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("slice stack values must lie in [0, 1]"));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            shape,
            source_spacing_mm,
            data,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.shape[0]
    }

    /// `(height, width)` of every slice.
    pub fn slice_dims(&self) -> (usize, usize) {
        (self.shape[1], self.shape[2])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2];
        &self.data[i * n..(i + 1) * n]
    }

    /// Reorders slices (used to check permutation invariance downstream).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.num_slices();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("slice permutation is not a permutation"));
        }
        let data = order.iter().flat_map(|&i| self.slice(i).iter().copied()).collect();
        Ok(Self {
            data,
            ..self.clone()
        })
    }

    /// Resizes every slice in-plane with bilinear interpolation.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let (h, w) = self.slice_dims();
        if (h, w) == (height, width) {
            return Ok(self.clone());
        }
        let data = (0..self.num_slices())
            .flat_map(|i| resize_bilinear(self.slice(i), h, w, height, width))
            .collect();
        Self::new(self.patient_id.clone(), [self.num_slices(), height, width], self.source_spacing_mm, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = StackFile {
            patient_id: self.patient_id.clone(),
            shape: self.shape,
            spacing_mm: self.source_spacing_mm,
            data_b64: B64.encode(bytes),
        };
        let text = serde_json::to_string(&file).expect("stack serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: StackFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let bytes = B64
            .decode(file.data_b64.as_bytes())
            .map_err(|e| Error::invalid(format!("{}: bad payload: {e}", path.display())))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::invalid(format!("{}: truncated payload", path.display())));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(file.patient_id, file.shape, file.spacing_mm, data)
    }
}

/// Bilinear resize of a single `h × w` plane, corner-aligned.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            let c = (n_in - 1) as f64 / 2.0;
            let i0 = c.floor() as usize;
            return (i0, (i0 + 1).min(n_in - 1), c - i0 as f64);
        }
        let c = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (c.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, ty) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, tx) = coord(ox, w, out_w);
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], tx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// JSON sidecar describing a raw volume file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_positions: Option<Vec<f64>>,
}

/// One row of the cohort manifest CSV (`patient_id,volume_path,sidecar_path,label`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub volume_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub label: Option<u32>,
}

/// Reads a cohort manifest. Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, 0, "", e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, 0, "", e))?.clone();
    let expected = ["patient_id", "volume_path", "sidecar_path", "label"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            column: "header".into(),
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, row + 1, "", e))?;
        let label = match rec[3].trim() {
            "" => None,
            s => Some(s.parse::<u32>().map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                row: row + 1,
                column: "label".into(),
                message: e.to_string(),
            })?),
        };
        out.push(ManifestEntry {
            patient_id: rec[0].to_string(),
            volume_path: base.join(&rec[1]),
            sidecar_path: base.join(&rec[2]),
            label,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, "", e))?;
    w.write_record(["patient_id", "volume_path", "sidecar_path", "label"])
        .map_err(|e| csv_err(path, 0, "", e))?;
    for (i, e) in entries.iter().enumerate() {
        let label = e.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([
            e.patient_id.as_str(),
            &e.volume_path.to_string_lossy(),
            &e.sidecar_path.to_string_lossy(),
            &label,
        ])
        .map_err(|err| csv_err(path, i + 1, "", err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, row: usize, column: &str, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message: e.to_string(),
    }
}

/// Writes a volume as raw `f32le` voxels plus sidecar.
pub fn write_volume(volume: &CtVolume, raw_path: &Path, sidecar_path: &Path, z_positions: Option<Vec<f64>>) -> Result<()> {
    let bytes: Vec<u8> = volume.voxels.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(raw_path, bytes).map_err(|e| Error::io(raw_path, e))?;
    let sidecar = Sidecar {
        shape: volume.dims,
        spacing_mm: volume.spacing_mm,
        dtype: "f32le".into(),
        patient_id: volume.patient_id.clone(),
        z_positions,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(sidecar_path, text).map_err(|e| Error::io(sidecar_path, e))
}

/// Loads a volume, orders its slices by ascending z and clamps HU to `[HU_MIN, HU_MAX]`.
pub fn load_volume(entry: &ManifestEntry) -> Result<CtVolume> {
    let text = std::fs::read_to_string(&entry.sidecar_path).map_err(|e| Error::io(&entry.sidecar_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&entry.sidecar_path, e))?;
    if sidecar.dtype != "f32le" {
        return Err(Error::invalid(format!("unsupported dtype `{}`", sidecar.dtype)));
    }
    if sidecar.patient_id != entry.patient_id {
        return Err(Error::invalid(format!(
            "sidecar patient `{}` does not match manifest patient `{}`",
            sidecar.patient_id, entry.patient_id
        )));
    }
    let bytes = std::fs::read(&entry.volume_path).map_err(|e| Error::io(&entry.volume_path, e))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::invalid(format!(
            "sidecar shape {:?} needs {n} voxels, file holds {} bytes",
            sidecar.shape,
            bytes.len()
        )));
    }
    let raw: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    volume_from_raw(&entry.patient_id, sidecar.shape, sidecar.spacing_mm, raw, sidecar.z_positions.as_deref())
}

/// Builds a z-ordered, HU-clamped volume from raw voxels in file order.
pub fn volume_from_raw(
    patient_id: &str,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    raw: Vec<f64>,
    z_positions: Option<&[f64]>,
) -> Result<CtVolume> {
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite voxel at flat index {i}")));
    }
    let order = match z_positions {
        Some(z) => slice_order(z, dims[0])?,
        None => (0..dims[0]).collect(),
    };
    let plane = dims[1] * dims[2];
    if raw.len() != dims[0] * plane {
        return Err(Error::invalid(format!("shape {dims:?} does not match {} voxels", raw.len())));
    }
    let voxels = order
        .iter()
        .flat_map(|&z| raw[z * plane..(z + 1) * plane].iter().map(|v| v.clamp(HU_MIN, HU_MAX)))
        .collect();
    CtVolume::new(patient_id, dims, spacing_mm, voxels)
}

/// Indices that sort slices by ascending z; duplicates are an error.
pub fn slice_order(z_positions: &[f64], n_slices: usize) -> Result<Vec<usize>> {
    if z_positions.len() != n_slices {
        return Err(Error::invalid(format!(
            "{} z positions for {n_slices} slices",
            z_positions.len()
        )));
    }
    if z_positions.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("non-finite z position"));
    }
    let mut order: Vec<usize> = (0..n_slices).collect();
    order.sort_by(|&a, &b| z_positions[a].total_cmp(&z_positions[b]));
    if let Some(w) = order.windows(2).find(|w| z_positions[w[0]] == z_positions[w[1]]) {
        return Err(Error::invalid(format!("duplicate z position {}", z_positions[w[0]])));
    }
    Ok(order)
}

/// Replaces voxels farther than `diameter_mm / 2` (in-plane, physical units)
/// from the slice center with `fill_hu`.
pub fn apply_circular_mask(v: &CtVolume, diameter_mm: f64, fill_hu: f64) -> Result<CtVolume> {
    if !(diameter_mm > 0.0) {
        return Err(Error::invalid(format!("mask diameter {diameter_mm} must be positive")));
    }
    let [d, h, w] = v.dims;
    let [_, sy, sx] = v.spacing_mm;
    let radius = diameter_mm / 2.0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let outside: Vec<bool> = (0..h * w)
        .map(|i| {
            let dy = (i / w) as f64 - cy;
            let dx = (i % w) as f64 - cx;
            (dy * sy).hypot(dx * sx) > radius
        })
        .collect();
    let mut voxels = v.voxels.clone();
    for z in 0..d {
        for (vox, &out) in voxels[z * h * w..(z + 1) * h * w].iter_mut().zip(&outside) {
            if out {
                *vox = fill_hu;
            }
        }
    }
    Ok(v.with_voxels(v.dims, v.spacing_mm, voxels))
}

/// Output extent for one axis: `round(n · in / out)`, half away from zero, at least 1.
pub fn resampled_extent(n: usize, in_spacing: f64, out_spacing: f64) -> usize {
    ((n as f64 * in_spacing / out_spacing).round() as usize).max(1)
}

/// Source sample `(i0, i1, t)` for output index `i` along one axis, clamped to the grid.
fn axis_weights(n_out: usize, n_in: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let c = i as f64 * ratio;
            let last = (n_in - 1) as f64;
            if c <= 0.0 {
                (0, 0, 0.0)
            } else if c >= last {
                (n_in - 1, n_in - 1, 0.0)
            } else {
                let i0 = c.floor() as usize;
                (i0, i0 + 1, c - i0 as f64)
            }
        })
        .collect()
}

/// Trilinear resampling in physical coordinates. Voxel `0` of both grids sits
/// at the same physical origin; samples beyond the source grid clamp to the edge.
pub fn resample(v: &CtVolume, target_spacing_mm: [f64; 3]) -> Result<CtVolume> {
    if target_spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!("target spacing {target_spacing_mm:?} must be positive")));
    }
    let [d, h, w] = v.dims;
    let out_dims: [usize; 3] = std::array::from_fn(|a| resampled_extent(v.dims[a], v.spacing_mm[a], target_spacing_mm[a]));
    let [od, oh, ow] = out_dims;
    let [wz, wy, wx]: [Vec<(usize, usize, f64)>; 3] =
        std::array::from_fn(|a| axis_weights(out_dims[a], v.dims[a], target_spacing_mm[a] / v.spacing_mm[a]));
    let src = &v.voxels;
    let at = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
    let _ = d;
    let mut out = vec![0.0; od * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oz, plane)| {
        let (z0, z1, tz) = wz[oz];
        for (oy, row) in plane.chunks_mut(ow).enumerate() {
            let (y0, y1, ty) = wy[oy];
            for (ox, o) in row.iter_mut().enumerate() {
                let (x0, x1, tx) = wx[ox];
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), tx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), tx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), tx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), tx);
                *o = lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz);
            }
        }
    });
    Ok(v.with_voxels(out_dims, target_spacing_mm, out))
}

/// Maps HU through the window onto `[0, 1]` and emits the axial slices.
pub fn window_normalize(v: &CtVolume, window: &WindowSpec) -> Result<SliceStack> {
    window.validate()?;
    let data = v.voxels.iter().map(|&hu| window.normalize(hu)).collect();
    SliceStack::new(v.patient_id.clone(), v.dims, v.spacing_mm, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowChoice {
    Preset(String),
    Explicit(WindowSpec),
}

impl WindowChoice {
    pub fn resolve(&self) -> Result<WindowSpec> {
        match self {
            WindowChoice::Preset(name) => WindowSpec::preset(name),
            WindowChoice::Explicit(w) => {
                w.validate()?;
                Ok(w.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub window: WindowChoice,
    pub target_spacing_mm: [f64; 3],
    pub mask_diameter_mm: f64,
    /// Defaults to the window's `hu_low`, so masked voxels normalize to 0.
    pub mask_fill_hu: Option<f64>,
    pub mask_after_resample: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: WindowChoice::Preset("lung".into()),
            target_spacing_mm: [1.0, 0.8, 0.8],
            mask_diameter_mm: 512.0,
            mask_fill_hu: None,
            mask_after_resample: false,
        }
    }
}

/// Runs the preprocessing stages on an already loaded volume.
pub fn preprocess_volume(volume: &CtVolume, cfg: &PreprocessConfig) -> Result<SliceStack> {
    let window = cfg.window.resolve().map_err(|e| e.in_stage("window"))?;
    let fill = cfg.mask_fill_hu.unwrap_or(window.hu_low);
    let mask = |v: &CtVolume| apply_circular_mask(v, cfg.mask_diameter_mm, fill).map_err(|e| e.in_stage("mask"));
    let resampled = if cfg.mask_after_resample {
        let r = resample(volume, cfg.target_spacing_mm).map_err(|e| e.in_stage("resample"))?;
        mask(&r)?
    } else {
        let m = mask(volume)?;
        resample(&m, cfg.target_spacing_mm).map_err(|e| e.in_stage("resample"))?
    };
    window_normalize(&resampled, &window).map_err(|e| e.in_stage("window"))
}

/// Load, mask, resample, window and normalize one patient.
pub fn preprocess_patient(entry: &ManifestEntry, cfg: &PreprocessConfig) -> Result<SliceStack> {
    let volume = load_volume(entry).map_err(|e| e.in_stage("load"))?;
    preprocess_volume(&volume, cfg)
}
