//! Downstream evaluation: AUROC/ACC metrics, L2-regularized logistic probes,
//! stratified splits, k-shot sampling, and the three-way model comparison.

pub mod concat;
pub mod metrics;
pub mod probe;
pub mod protocol;
pub mod split;

pub use concat::{train_concat_mlp, ConcatConfig, ConcatModel};
pub use metrics::{accuracy, auroc, macro_auroc, MetricReport};
pub use probe::{probe_loss_graph, train_linear_probe, LinearProbe, ProbeConfig};
pub use protocol::{fewshot_eval, run_comparison, EvalConfig, LabeledEmbeddingSet, CONCATENATION, CONTRASTIVE, UNIMODAL};
pub use split::{sample_per_class, stratified_split};
