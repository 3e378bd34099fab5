use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::ct_preprocess::{PreprocessConfig, WindowChoice};
use crate::error::{Error, Result};
use crate::eval_probe::{ConcatConfig, EvalConfig, ProbeConfig};
use crate::slice_ssl::SslConfig;
use crate::synth_data::SynthConfig;

/// Input and output locations. Unset inputs come from the synthetic cohort.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub manifest: Option<PathBuf>,
    pub clinical_csv: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    /// `patient_id,label` file; falls back to the manifest's label column.
    pub labels_csv: Option<PathBuf>,
}

impl PathsConfig {
    pub fn uses_synthetic(&self) -> bool {
        self.manifest.is_none()
    }
}

/// A single shot count or a list of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSpec {
    One(usize),
    Many(Vec<usize>),
}

impl KSpec {
    pub fn values(&self) -> Vec<usize> {
        match self {
            KSpec::One(k) => vec![*k],
            KSpec::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub task: String,
    pub k: KSpec,
    pub test_fraction: f64,
    pub repeats: usize,
    pub probe: ProbeConfig,
    pub concat: ConcatConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            task: "label".into(),
            k: KSpec::Many(vec![1, 5, 10]),
            test_fraction: e.test_fraction,
            repeats: e.repeats,
            probe: e.probe,
            concat: e.concat,
        }
    }
}

impl EvalSection {
    pub fn protocol(&self) -> EvalConfig {
        EvalConfig {
            test_fraction: self.test_fraction,
            repeats: self.repeats,
            probe: self.probe.clone(),
            concat: self.concat.clone(),
        }
    }
}

/// Full pipeline configuration. `seed` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default = "default_preprocess")]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Abdominal soft-tissue window with a mask that trims the synthetic field of view.
fn default_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        window: WindowChoice::Preset("colorectal".into()),
        mask_diameter_mm: 24.0,
        ..PreprocessConfig::default()
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            paths: PathsConfig { out_dir: PathBuf::from("runs/default"), ..Default::default() },
            synth: SynthConfig::default(),
            preprocess: default_preprocess(),
            ssl: SslConfig::default(),
            align: AlignConfig::default(),
            eval: EvalSection::default(),
        }
    }

    /// SHA-256 of the canonical JSON form (keys sorted, no whitespace).
    /// The output directory is excluded: it does not affect any result.
    pub fn hash(&self) -> String {
        hash_value(&self.hashable())
    }

    /// Hash over `seed`, input `paths` and the listed sections.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let full = self.hashable();
        let mut sub = serde_json::Map::new();
        for key in ["seed", "paths"].iter().chain(sections) {
            sub.insert(key.to_string(), full[*key].clone());
        }
        hash_value(&Value::Object(sub))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, e: Error| Error::Config { key: key.into(), message: e.to_string() };
        self.synth.validate().map_err(|e| cfg_err("synth", e))?;
        self.preprocess.window.resolve().map_err(|e| cfg_err("preprocess.window", e))?;
        self.ssl.encoder.validate().map_err(|e| cfg_err("ssl.encoder", e))?;
        self.ssl.augment.validate().map_err(|e| cfg_err("ssl.augment", e))?;
        self.align.validate().map_err(|e| cfg_err("align", e))?;
        if self.eval.k.values().contains(&0) || self.eval.k.values().is_empty() {
            return Err(Error::Config { key: "eval.k".into(), message: "shot counts must be >= 1".into() });
        }
        if self.eval.repeats == 0 {
            return Err(Error::Config { key: "eval.repeats".into(), message: "must be >= 1".into() });
        }
        if self.paths.manifest.is_some() && self.paths.clinical_csv.is_none() {
            return Err(Error::Config {
                key: "paths.clinical_csv".into(),
                message: "required when paths.manifest is set".into(),
            });
        }
        Ok(())
    }
}

impl RunConfig {
    fn hashable(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["paths"].as_object_mut().expect("paths object").remove("out_dir");
        v
    }
}

fn hash_value(v: &Value) -> String {
    // serde_json's default map is ordered by key, so this form is canonical.
    let text = serde_json::to_string(v).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Sets `dotted.path = raw` inside a JSON object; `raw` is parsed as JSON and
/// falls back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        key: assignment.into(),
        message: "override must look like key.path=value".into(),
    })?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config { key: path.into(), message: "empty key segment".into() });
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config {
            key: parts[..i].join("."),
            message: "is not an object".into(),
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Options that shape a [`RunConfig`] before it is deserialized.
#[derive(Clone, Debug, Default)]
pub struct ConfigSource {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
}

/// Reads the config file (or starts from defaults), applies `--seed`,
/// `--out` and overrides, then deserializes strictly.
pub fn resolve_config(src: &ConfigSource) -> Result<RunConfig> {
    let mut root = match &src.config {
        Some(p) => read_config_value(p)?,
        None => {
            let mut v = serde_json::to_value(RunConfig::with_seed(0)).expect("config serializes");
            v.as_object_mut().expect("object").remove("seed");
            v
        }
    };
    if !root.is_object() {
        return Err(Error::Config { key: String::new(), message: "config must be a JSON object".into() });
    }
    if let Some(seed) = src.seed {
        root["seed"] = Value::from(seed);
    }
    if let Some(out) = &src.out {
        apply_override(&mut root, &format!("paths.out_dir={}", Value::String(out.to_string_lossy().into_owned())))?;
    }
    for o in &src.overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let key = e.path().to_string();
        Error::Config {
            key: if key == "." { "(root)".into() } else { key },
            message: e.inner().to_string(),
        }
    })?;
    if cfg.paths.out_dir.as_os_str().is_empty() {
        cfg.paths.out_dir = PathBuf::from("runs/default");
    }
    if let Some(base) = src.config.as_deref().and_then(Path::parent) {
        cfg.paths.resolve_relative(base);
    }
    cfg.validate()?;
    Ok(cfg)
}

impl PathsConfig {
    /// Input paths in a config file are relative to the file's directory.
    fn resolve_relative(&mut self, base: &Path) {
        for p in [&mut self.manifest, &mut self.clinical_csv, &mut self.schema, &mut self.labels_csv].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn read_config_value(path: &Path) -> Result<Value> {
    crate::fsio::read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut v = serde_json::json!({"seed": 1, "eval": {"k": [1, 5]}});
        apply_override(&mut v, "eval.k=5").unwrap();
        apply_override(&mut v, "eval.task=stage").unwrap();
        apply_override(&mut v, "align.tau=2.5").unwrap();
        assert_eq!(v["eval"]["k"], 5);
        assert_eq!(v["eval"]["task"], "stage");
        assert_eq!(v["align"]["tau"], 2.5);
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "seed.x=1").is_err());
    }

    #[test]
    fn strict_keys_and_required_seed() {
        let src = ConfigSource { overrides: vec!["eval.bogus=1".into()], seed: Some(1), ..Default::default() };
        match resolve_config(&src) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "eval.bogus"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(resolve_config(&ConfigSource::default()).is_err());
        let cfg = resolve_config(&ConfigSource { seed: Some(3), overrides: vec!["eval.k=5".into()], ..Default::default() }).unwrap();
        assert_eq!(cfg.eval.k.values(), vec![5]);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::with_seed(1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.paths.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.eval.repeats = 3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.section_hash(&["synth"]), b.section_hash(&["synth"]));
        assert_ne!(a.section_hash(&["eval"]), b.section_hash(&["eval"]));
        let round: RunConfig = serde_json::from_value(serde_json::to_value(&a).unwrap()).unwrap();
        assert_eq!(round, a);
    }
}
