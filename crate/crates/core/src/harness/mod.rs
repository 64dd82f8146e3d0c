//! Training, evaluation and the mechanism analyses: attention attribution,
//! encoder-removal sweeps, ensemble comparison and the ablation grid.

mod audit;
mod checkpoint;
mod eval;
mod experiments;
mod model;
mod report;

pub use eval::{
    attribution_scores, blind_ceiling, evaluate, reference_caption, removal_sweep, EvalOptions, EvalResult, EvalSet,
    RemovalCurve, RemovalRow, CAPTION_METRIC, QA_METRIC,
};
pub use model::{train, Model, Stage, Task, TrainReport, TrainSpec, TrainableSet};
pub use experiments::{
    ablation_grid, compare_ensemble, fusion_vs_specialists, Ablation, AblationGrid, AblationRow, Arm, EnsembleComparison,
    EnsembleRow, Lab, Recipe, RunRecord, SpecialistComparison, SpecialistRow, Table, VariantResult, LORA_RANK,
};
pub use report::{OptimizerInfo, Report, REPORT_SCHEMA};
pub use audit::{gradient_audit, AuditRow, AUDIT_EPS, AUDIT_TOL};
pub use checkpoint::{load_model, reference_store, save_model, ModelMeta};
