use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::align::{embed_clinical, embed_slices, init_alignment_params, train_alignment, AlignStep, EpochLoss};
use crate::clinical_encoder::{load_clinical_csv, standardize, ClinicalRecord, ClinicalSchema, FeatureStats};
use crate::ct_preprocess::{preprocess_patient, read_manifest, SliceStack};
use crate::error::{Error, Result};
use crate::eval_probe::{fewshot_eval, run_comparison, LabeledEmbeddingSet, MetricReport, CONTRASTIVE, UNIMODAL};
use crate::fsio::{read_json, write_json};
use crate::mil_pool::AttentionRecord;
use crate::numerics::{ParamStore, Rng};
use crate::slice_ssl::{encode_stack, pretrain_slice_encoder, StepLoss};
use crate::synth_data::{generate_cohort, read_labels_csv};

/// Row-aligned CT and clinical embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedEmbeddings {
    pub patient_ids: Vec<String>,
    pub ct: Vec<Vec<f64>>,
    pub clinical: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    SynthGen,
    Preprocess,
    PretrainSlice,
    TrainAlign,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::SynthGen, Stage::Preprocess, Stage::PretrainSlice, Stage::TrainAlign, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthGen => "synth-gen",
            Stage::Preprocess => "preprocess",
            Stage::PretrainSlice => "pretrain-slice",
            Stage::TrainAlign => "train-align",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Config sections whose content determines this stage's outputs.
    fn sections(self) -> &'static [&'static str] {
        const ALL: [&str; 5] = ["synth", "preprocess", "ssl", "align", "eval"];
        &ALL[..self as usize + 1]
    }

    fn upstream(self, synthetic: bool) -> Option<Stage> {
        match self {
            Stage::SynthGen => None,
            Stage::Preprocess => synthetic.then_some(Stage::SynthGen),
            Stage::PretrainSlice => Some(Stage::Preprocess),
            Stage::TrainAlign => Some(Stage::PretrainSlice),
            Stage::Evaluate => Some(Stage::TrainAlign),
        }
    }
}

/// Written to `stages/<stage>.json` when a stage finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

/// One row of `results/results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    #[serde(flatten)]
    pub report: MetricReport,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// Summary written next to the alignment checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub batch_size: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of a uniform similarity matrix, `ln M`.
    pub chance_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslSummary {
    pub num_slices: usize,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Resolved locations of every pipeline artifact.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
    pub fn stacks_dir(&self) -> PathBuf {
        self.out.join("stacks")
    }
    pub fn stack_index(&self) -> PathBuf {
        self.stacks_dir().join("index.json")
    }
    pub fn encoder(&self) -> PathBuf {
        self.out.join("models").join("slice_encoder.json")
    }
    pub fn align_checkpoint(&self) -> PathBuf {
        self.out.join("models").join("align.json")
    }
    pub fn clinical_stats(&self) -> PathBuf {
        self.out.join("models").join("clinical_stats.json")
    }
    pub fn align_summary(&self) -> PathBuf {
        self.out.join("models").join("align_summary.json")
    }
    pub fn ssl_summary(&self) -> PathBuf {
        self.out.join("models").join("ssl_summary.json")
    }
    pub fn logs_dir(&self) -> PathBuf {
        self.out.join("logs")
    }
    pub fn results_dir(&self) -> PathBuf {
        self.out.join("results")
    }
    pub fn results(&self) -> PathBuf {
        self.results_dir().join("results.json")
    }
    pub fn attention(&self) -> PathBuf {
        self.out.join("attention").join("attention.json")
    }
    pub fn record(&self, stage: Stage) -> PathBuf {
        self.out.join("stages").join(format!("{}.json", stage.name()))
    }
}

/// Runs pipeline stages for one resolved config.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub force: bool,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        let layout = Layout { out: cfg.paths.out_dir.clone() };
        Self { cfg, force, layout }
    }

    fn synthetic(&self) -> bool {
        self.cfg.paths.uses_synthetic()
    }

    pub fn stage_hash(&self, stage: Stage) -> String {
        self.cfg.section_hash(stage.sections())
    }

    fn master(&self) -> Rng {
        Rng::new(self.cfg.seed)
    }

    fn manifest_path(&self) -> PathBuf {
        self.cfg.paths.manifest.clone().unwrap_or_else(|| self.layout.data_dir().join("manifest.csv"))
    }

    fn clinical_path(&self) -> PathBuf {
        self.cfg.paths.clinical_csv.clone().unwrap_or_else(|| self.layout.data_dir().join("clinical.csv"))
    }

    fn schema_path(&self) -> Option<PathBuf> {
        match &self.cfg.paths.schema {
            Some(p) => Some(p.clone()),
            None => self.synthetic().then(|| self.layout.data_dir().join("clinical_schema.json")),
        }
    }

    fn labels_path(&self) -> Option<PathBuf> {
        match &self.cfg.paths.labels_csv {
            Some(p) => Some(p.clone()),
            None => self.synthetic().then(|| self.layout.data_dir().join("labels.csv")),
        }
    }

    fn completed(&self, stage: Stage) -> Option<CompletionRecord> {
        let rec: CompletionRecord = read_json(&self.layout.record(stage)).ok()?;
        (rec.config_hash == self.stage_hash(stage) && rec.seed == self.cfg.seed).then_some(rec)
    }

    fn require_upstream(&self, stage: Stage) -> Result<()> {
        match stage.upstream(self.synthetic()) {
            Some(up) if self.completed(up).is_none() => Err(Error::Prerequisite {
                stage: stage.name(),
                prerequisite: up.name(),
            }),
            _ => Ok(()),
        }
    }

    /// Stages `all` executes, in dependency order.
    pub fn plan(&self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|&s| s != Stage::SynthGen || self.synthetic()).collect()
    }

    /// Runs one stage unless an identical completion record exists.
    pub fn run(&self, stage: Stage) -> Result<StageStatus> {
        if stage == Stage::SynthGen && !self.synthetic() {
            return Err(Error::Config {
                key: "paths.manifest".into(),
                message: "synth-gen only runs when no external manifest is configured".into(),
            });
        }
        self.require_upstream(stage)?;
        if !self.force && self.completed(stage).is_some() {
            log::info!("{}: up to date", stage.name());
            return Ok(StageStatus::UpToDate);
        }
        log::info!("{}: running", stage.name());
        for dir in ["models", "logs", "results", "attention", "stages"] {
            let d = self.layout.out.join(dir);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let outputs = match stage {
            Stage::SynthGen => self.synth_gen(),
            Stage::Preprocess => self.preprocess(),
            Stage::PretrainSlice => self.pretrain_slice(),
            Stage::TrainAlign => self.train_align(),
            Stage::Evaluate => self.evaluate(),
        }
        .map_err(|e| e.in_stage(stage.name()))?;
        let outputs = outputs
            .iter()
            .map(|p| p.strip_prefix(&self.layout.out).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .collect();
        let rec = CompletionRecord {
            stage: stage.name().into(),
            config_hash: self.stage_hash(stage),
            seed: self.cfg.seed,
            outputs,
        };
        write_json(&self.layout.record(stage), &rec)?;
        Ok(StageStatus::Ran)
    }

    /// Runs every planned stage in order.
    pub fn run_all(&self) -> Result<Vec<(Stage, StageStatus)>> {
        self.plan().into_iter().map(|s| self.run(s).map(|st| (s, st))).collect()
    }

    fn synth_gen(&self) -> Result<Vec<PathBuf>> {
        let files = generate_cohort(&self.cfg.synth, &self.layout.data_dir(), &self.master().fork("synth"))?;
        Ok(vec![files.manifest, files.clinical_csv, files.schema, files.labels_csv])
    }

    fn preprocess(&self) -> Result<Vec<PathBuf>> {
        let manifest = existing(self.manifest_path(), "paths.manifest")?;
        let entries = read_manifest(&manifest)?;
        if entries.is_empty() {
            return Err(Error::invalid(format!("{}: manifest lists no patients", manifest.display())));
        }
        let dir = self.layout.stacks_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ids: Vec<String> = entries
            .par_iter()
            .map(|e| {
                let stack = preprocess_patient(e, &self.cfg.preprocess)
                    .map_err(|err| Error::invalid(format!("patient {}: {err}", e.patient_id)))?;
                stack.save(&dir.join(format!("{}.json", e.patient_id)))?;
                Ok(e.patient_id.clone())
            })
            .collect::<Result<_>>()?;
        write_json(&self.layout.stack_index(), &ids)?;
        Ok(vec![self.layout.stack_index()])
    }

    fn load_stacks(&self) -> Result<Vec<SliceStack>> {
        let ids: Vec<String> = read_json(&self.layout.stack_index())?;
        let dir = self.layout.stacks_dir();
        ids.par_iter().map(|id| SliceStack::load(&dir.join(format!("{id}.json")))).collect()
    }

    fn pretrain_slice(&self) -> Result<Vec<PathBuf>> {
        let stacks = self.load_stacks()?;
        let enc = &self.cfg.ssl.encoder;
        let [h, w] = enc.input_extent;
        let slices: Vec<Vec<f64>> = stacks
            .iter()
            .map(|s| s.resized(h, w))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .flat_map(|s| (0..s.num_slices()).map(move |i| s.slice(i).to_vec()))
            .collect();
        let outcome = pretrain_slice_encoder(&slices, &self.cfg.ssl, &self.master().fork("ssl"))?;
        log::info!(
            "slice pretraining: validation loss {:.4} -> {:.4}",
            outcome.initial_val_loss,
            outcome.final_val_loss
        );
        outcome.params.save(&self.layout.encoder())?;
        let log_path = self.layout.logs_dir().join("ssl.jsonl");
        write_jsonl::<StepLoss>(&log_path, &outcome.log)?;
        let summary = SslSummary {
            num_slices: slices.len(),
            initial_val_loss: outcome.initial_val_loss,
            final_val_loss: outcome.final_val_loss,
        };
        write_json(&self.layout.ssl_summary(), &summary)?;
        Ok(vec![self.layout.encoder(), self.layout.ssl_summary(), log_path])
    }

    fn clinical(&self) -> Result<(ClinicalSchema, Vec<ClinicalRecord>)> {
        let schema_path = self.schema_path().ok_or_else(|| Error::Config {
            key: "paths.schema".into(),
            message: "required when paths.manifest is set".into(),
        })?;
        let schema = ClinicalSchema::load(&existing(schema_path, "paths.schema")?)?;
        let records = load_clinical_csv(&existing(self.clinical_path(), "paths.clinical_csv")?, &schema)?;
        Ok((schema, records))
    }

    fn train_align(&self) -> Result<Vec<PathBuf>> {
        let stacks = self.load_stacks()?;
        let (_, records) = self.clinical()?;
        let encoder = ParamStore::load(&self.layout.encoder())?;
        let cfg = &self.cfg.align;
        let outcome = train_alignment(&stacks, &records, &encoder, &self.cfg.ssl.encoder, cfg, &self.master().fork("align"))?;
        outcome.params.save(&self.layout.align_checkpoint())?;
        outcome.stats.save(&self.layout.clinical_stats())?;
        let summary = AlignSummary {
            batch_size: cfg.batch_size,
            initial_loss: outcome.initial_loss,
            final_loss: outcome.final_loss(),
            chance_loss: (cfg.batch_size as f64).ln(),
        };
        log::info!(
            "alignment: loss {:.4} -> {:.4} (chance {:.4})",
            summary.initial_loss,
            summary.final_loss,
            summary.chance_loss
        );
        write_json(&self.layout.align_summary(), &summary)?;
        let steps = self.layout.logs_dir().join("align.jsonl");
        let epochs = self.layout.logs_dir().join("align_epochs.jsonl");
        write_jsonl::<AlignStep>(&steps, &outcome.log)?;
        write_jsonl::<EpochLoss>(&epochs, &outcome.epoch_losses)?;
        Ok(vec![
            self.layout.align_checkpoint(),
            self.layout.clinical_stats(),
            self.layout.align_summary(),
            steps,
            epochs,
        ])
    }

    /// Labels by patient id, from the labels file or the manifest.
    fn labels(&self) -> Result<HashMap<String, u32>> {
        if let Some(p) = self.labels_path() {
            return Ok(read_labels_csv(&existing(p, "paths.labels_csv")?)?.into_iter().collect());
        }
        let manifest = self.manifest_path();
        read_manifest(&manifest)?
            .into_iter()
            .map(|e| match e.label {
                Some(l) => Ok((e.patient_id, l)),
                None => Err(Error::invalid(format!(
                    "{}: patient {} has no label; set paths.labels_csv",
                    manifest.display(),
                    e.patient_id
                ))),
            })
            .collect()
    }

    fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let stacks = self.load_stacks()?;
        let (schema, records) = self.clinical()?;
        let labels = self.labels()?;
        let by_id: HashMap<&str, &ClinicalRecord> = records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
        let ids: Vec<String> = stacks.iter().map(|s| s.patient_id.clone()).collect();
        let clinical: Vec<ClinicalRecord> = ids
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).map(|r| (*r).clone()).ok_or_else(|| Error::invalid(format!("no clinical record for patient {id}")))
            })
            .collect::<Result<_>>()?;
        let y: Vec<u32> = ids
            .iter()
            .map(|id| labels.get(id).copied().ok_or_else(|| Error::invalid(format!("no label for patient {id}"))))
            .collect::<Result<_>>()?;

        let enc_cfg = &self.cfg.ssl.encoder;
        let align_cfg = &self.cfg.align;
        let encoder = ParamStore::load(&self.layout.encoder())?;
        let aligned_params = ParamStore::load(&self.layout.align_checkpoint())?;
        // Same stream as the start of alignment training: the unaligned baseline.
        let unaligned_params =
            init_alignment_params(&encoder, enc_cfg, schema.num_features(), align_cfg, &self.master().fork("align"))?;

        let embedded: Vec<_> = stacks
            .par_iter()
            .map(|stack| {
                let base = encode_stack(&encoder, enc_cfg, stack)?;
                let uni = embed_slices(&stack.patient_id, &base, &unaligned_params, &align_cfg.mil)?;
                let tuned = if align_cfg.finetune_encoder {
                    encode_stack(&aligned_params, enc_cfg, stack)?
                } else {
                    base
                };
                let con = embed_slices(&stack.patient_id, &tuned, &aligned_params, &align_cfg.mil)?;
                Ok((uni, con))
            })
            .collect::<Result<_>>()?;
        let matrix = |rows: Vec<Vec<f64>>| crate::numerics::DenseArray::from_rows(&rows);
        let unimodal = LabeledEmbeddingSet::new(ids.clone(), matrix(embedded.iter().map(|e| e.0.s.clone()).collect())?, y.clone())?;
        let aligned = LabeledEmbeddingSet::new(ids.clone(), matrix(embedded.iter().map(|e| e.1.s.clone()).collect())?, y)?;

        let eval_cfg = self.cfg.eval.protocol();
        let task = &self.cfg.eval.task;
        let rng = self.master().fork("evaluate");
        let mut reports = run_comparison(&unimodal, &aligned, &clinical, &eval_cfg, task, &rng.fork("comparison"))?;
        let fewshot_rng = rng.fork("fewshot");
        for k in self.cfg.eval.k.values() {
            for (name, set) in [(CONTRASTIVE, &aligned), (UNIMODAL, &unimodal)] {
                reports.extend(fewshot_eval(set, k, &eval_cfg, task, name, &fewshot_rng)?);
            }
        }
        let config_hash = self.cfg.hash();
        let results: Vec<ResultRecord> = reports
            .into_iter()
            .map(|report| ResultRecord { report, seed: self.cfg.seed, config_hash: config_hash.clone() })
            .collect();
        write_json(&self.layout.results(), &results)?;

        let attention: Vec<AttentionRecord> = embedded.iter().map(|e| AttentionRecord::from(&e.1)).collect();
        write_json(&self.layout.attention(), &attention)?;
        Ok(vec![self.layout.results(), self.layout.attention()])
    }

    /// Unit-norm CT and clinical embeddings of every patient under the
    /// alignment checkpoint, in stack order.
    pub fn aligned_embeddings(&self) -> Result<PairedEmbeddings> {
        let stacks = self.load_stacks()?;
        let (_, records) = self.clinical()?;
        let by_id: HashMap<&str, &ClinicalRecord> = records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
        let params = ParamStore::load(&self.layout.align_checkpoint())?;
        let stats = FeatureStats::load(&self.layout.clinical_stats())?;
        let enc_cfg = &self.cfg.ssl.encoder;
        let ct: Vec<Vec<f64>> = stacks
            .par_iter()
            .map(|s| crate::align::embed_patient(&params, enc_cfg, &self.cfg.align.mil, s).map(|v| v.s))
            .collect::<Result<_>>()?;
        let recs: Vec<&ClinicalRecord> = stacks
            .iter()
            .map(|s| by_id.get(s.patient_id.as_str()).copied().ok_or_else(|| Error::invalid(format!("no clinical record for {}", s.patient_id))))
            .collect::<Result<_>>()?;
        let c = embed_clinical(&params, &self.cfg.align.clinical, &standardize(&recs, &stats)?)?;
        Ok(PairedEmbeddings {
            patient_ids: stacks.iter().map(|s| s.patient_id.clone()).collect(),
            ct,
            clinical: c.rows().map(<[f64]>::to_vec).collect(),
        })
    }
}

fn existing(path: PathBuf, key: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config {
            key: key.into(),
            message: format!("{} does not exist", path.display()),
        })
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
