//! End-to-end pipelines over an output directory: data generation,
//! pretraining, method application, evaluation, attacks and reports.
//!
//! Every artifact carries the config hash, and each stage records the
//! SHA-256 of what it wrote in `run_manifest.json`.

mod config;
mod manifest;
mod stages;

pub use config::{
    EvalConfig, ExperimentConfig, ModelShape, Recipes, DEFAULT_OUTPUT_DIR, OUTPUT_DIR_ENV,
    SCHEMA_VERSION,
};
pub use manifest::{sha256_file, ArtifactRef, RunLock, RunManifest, StageRecord, RUN_MANIFEST_FILE};
pub use stages::{
    cmd_apply, cmd_attack, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_report, cmd_reproduce,
    load_data, load_variant, variant_label, DataSet, Layout, Variant, VariantSpec, ORIG,
};
