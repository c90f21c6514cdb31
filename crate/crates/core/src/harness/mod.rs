//! Datasets, synthetic corpora, training and ablation grids.

pub mod ablation;
pub mod data;
pub mod synth;
pub mod train;

pub use ablation::{run_ablation, AblationResult, AblationSpec, CellResult, Modality};
pub use data::{
    class_counts, compute_class_weights, stratified_split, AudioRef, Dataset, DebateEntry,
};
pub use synth::{generate_synthetic, required_signal_bayes_floor, ContextSignal, SynthConfig};
pub use train::{
    fit, load_checkpoint, lr_at_step, predict_positions, save_checkpoint, train_on_dataset, AdamW,
    ClassWeightMode, Classifier, EarlyStopping, Example, ModelChoice, Scheduler, StopDecision,
    TrainConfig, TrainOutcome, TrainRun, TrainedModel,
};
