use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctxfusion::audio::length_statistics;
use ctxfusion::ensemble::{
    evaluate, majority_vote, optimize_weights, render_f1_table, weighted_logit_average,
    BayesOptConfig, EvalReport, LogitCache,
};
use ctxfusion::harness::{
    generate_synthetic, load_checkpoint, predict_positions, run_ablation, save_checkpoint,
    stratified_split, train_on_dataset, AblationSpec, ClassWeightMode, ContextSignal, Dataset,
    Modality, ModelChoice, Scheduler, SynthConfig, TrainConfig,
};
use ctxfusion::{Error, FallacyClass, Logits, Result};

#[derive(Parser)]
#[command(
    name = "ctxfusion",
    version,
    about = "Context-aware fallacy classification over text and audio"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic debate corpus (JSONL plus WAV files)
    Synth(SynthArgs),
    /// Train one classifier and write checkpoint, history and validation logits
    Train(TrainArgs),
    /// Train every architecture x window cell and print the ablation table
    Ablate(AblateArgs),
    /// Search ensemble weights on cached validation logits
    OptimizeEnsemble(EnsembleArgs),
    /// Majority vote over three cached models
    Vote(VoteArgs),
    /// Per-class F1 from a logit cache or a checkpoint
    Evaluate(EvaluateArgs),
    /// Audio length histogram, per-class durations and context durations
    AudioStats(AudioStatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1200)]
    entries: usize,
    #[arg(long, default_value = "required")]
    context_signal: ContextSignal,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives data.jsonl and audio/
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_audio: bool,
}

/// Flags overriding fields of the config file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelChoice>,
    #[arg(long)]
    context_window: Option<usize>,
    /// Sets both backbone and head learning rates
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    backbone_lr: Option<f64>,
    #[arg(long)]
    head_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    scheduler: Option<Scheduler>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    class_weights: Option<ClassWeightMode>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.model {
            cfg.model = v;
        }
        if let Some(v) = self.context_window {
            cfg.context_window = v;
        }
        if let Some(v) = self.lr {
            cfg.backbone_lr = v;
            cfg.head_lr = v;
        }
        if let Some(v) = self.backbone_lr {
            cfg.backbone_lr = v;
        }
        if let Some(v) = self.head_lr {
            cfg.head_lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.grad_accum {
            cfg.grad_accum = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.warmup_fraction {
            cfg.warmup_fraction = v;
        }
        if let Some(v) = self.scheduler {
            cfg.scheduler = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.class_weights {
            cfg.class_weights = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for model.ckpt, history.tsv, validation.tsv, logits.tsv
    #[arg(long)]
    out: PathBuf,
    /// Model id written to the logit cache (defaults to the architecture name)
    #[arg(long)]
    model_id: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "text")]
    modality: String,
    /// Comma-separated architectures (default: all for the modality)
    #[arg(long, value_delimiter = ',')]
    architectures: Vec<ModelChoice>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6")]
    windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Directory receiving ablation.txt and ablation.jsonl
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Logit cache files (merged)
    #[arg(long = "logits", required = true)]
    logits: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated model ids (default: every model in the caches)
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    #[arg(long, default_value_t = 15)]
    initial_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the weighted-average logits here under model id `ensemble`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VoteArgs {
    #[arg(long = "logits", required = true)]
    logits: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Exactly three comma-separated model ids
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<String>,
    /// Model whose prediction breaks three-way ties (default: `ensemble` if
    /// voting, else the third model)
    #[arg(long)]
    tiebreak: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Model id inside the logit cache (default: its only model)
    #[arg(long)]
    model: Option<String>,
    #[arg(long, conflicts_with = "logits")]
    checkpoint: Option<PathBuf>,
    /// With --checkpoint: score the whole dataset instead of its validation split
    #[arg(long)]
    all: bool,
    /// With --checkpoint: write the computed logits as a cache
    #[arg(long)]
    write_logits: Option<PathBuf>,
}

#[derive(Args)]
struct AudioStatsArgs {
    #[arg(long)]
    dataset: PathBuf,
}

fn gold_labels(dataset: &Dataset) -> HashMap<String, FallacyClass> {
    dataset
        .entries()
        .iter()
        .map(|e| (e.id(), e.label))
        .collect()
}

fn load_caches(paths: &[PathBuf]) -> Result<LogitCache> {
    let mut cache = LogitCache::default();
    for p in paths {
        cache.merge(LogitCache::load(p)?);
    }
    Ok(cache)
}

fn golds_for(
    entries: &[String],
    golds: &HashMap<String, FallacyClass>,
) -> Result<Vec<FallacyClass>> {
    entries
        .iter()
        .map(|id| {
            golds
                .get(id)
                .copied()
                .ok_or_else(|| Error::Parse(format!("entry {id} not in dataset")))
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(args.entries, args.context_signal, args.seed);
    cfg.with_audio = !args.no_audio;
    let mut ds = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    if cfg.with_audio {
        ds.externalize_audio(&args.out.join("audio"))?;
    }
    let path = args.out.join("data.jsonl");
    ds.save_jsonl(&path)?;
    println!(
        "wrote {} entries in {} debates to {}",
        ds.len(),
        ds.debate_count(),
        path.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let dataset = Dataset::load_jsonl(&args.dataset)?;
    let model_id = args
        .model_id
        .unwrap_or_else(|| cfg.model.slug().to_string());
    let run = train_on_dataset(&dataset, &cfg, &model_id)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    save_checkpoint(&args.out.join("model.ckpt"), &run.model, &cfg)?;
    let mut history = Vec::new();
    run.outcome.write_history(&mut history)?;
    std::fs::write(args.out.join("history.tsv"), history).map_err(|e| Error::io(&args.out, e))?;
    let mut val = String::from("step\tloss\tmacro_f1\n");
    for v in &run.outcome.validations {
        val.push_str(&format!("{}\t{:?}\t{:?}\n", v.step, v.loss, v.macro_f1));
    }
    write_file(&args.out.join("validation.tsv"), &val)?;
    run.val_logits.save(&args.out.join("logits.tsv"))?;
    write_file(&args.out.join("config.toml"), &cfg.to_toml())?;
    let best = run.outcome.best();
    println!(
        "steps {}  best validation loss {:.4} at step {}  early stop: {}",
        run.outcome.history.len(),
        best.loss,
        best.step,
        run.outcome.stopped_early
    );
    print!("{}", render_f1_table(&[(&model_id, &run.report)]));
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let base = args.cfg.resolve()?;
    let modality = match args.modality.as_str() {
        "text" => Modality::Text,
        "audio" => Modality::Audio,
        other => return Err(Error::Parse(format!("unknown modality `{other}`"))),
    };
    let architectures = if args.architectures.is_empty() {
        modality.default_architectures()
    } else {
        args.architectures
    };
    let dataset = Dataset::load_jsonl(&args.dataset)?;
    let spec = AblationSpec {
        modality,
        architectures,
        windows: args.windows,
        seeds: args.seeds,
        base,
        workers: args.workers,
    };
    let result = run_ablation(&dataset, &spec)?;
    let table = result.render();
    print!("{table}");
    for c in result.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell {} N={} failed: {}",
            c.row,
            c.window,
            c.error.as_deref().unwrap_or("")
        );
    }
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join("ablation.txt"), &table)?;
        write_file(&dir.join("ablation.jsonl"), &result.to_jsonl())?;
    }
    Ok(())
}

fn optimize_ensemble(args: EnsembleArgs) -> Result<()> {
    let cache = load_caches(&args.logits)?;
    let dataset = Dataset::load_jsonl(&args.dataset)?;
    let models = if args.models.is_empty() {
        cache.model_ids()
    } else {
        args.models
    };
    let (entries, per_model) = cache.aligned(&models)?;
    let golds = golds_for(&entries, &gold_labels(&dataset))?;
    let cfg = BayesOptConfig {
        iterations: args.iterations,
        initial_points: args.initial_points,
        seed: args.seed,
        ..BayesOptConfig::default()
    };
    let result = optimize_weights(&per_model, &golds, &cfg)?;
    for (m, w) in models.iter().zip(result.weights.as_slice()) {
        println!("{m}\t{w:.4}");
    }
    println!("validation macro F1\t{:.4}", result.f1);
    if let Some(out) = args.out {
        let mut ens = LogitCache::default();
        for (e, id) in entries.iter().enumerate() {
            let set: Vec<Logits> = per_model.iter().map(|m| m[e]).collect();
            ens.push(
                id.clone(),
                "ensemble",
                weighted_logit_average(&set, &result.weights)?,
            );
        }
        ens.save(&out)?;
    }
    Ok(())
}

fn vote(args: VoteArgs) -> Result<()> {
    if args.models.len() != 3 {
        return Err(Error::contract(format!(
            "vote needs exactly 3 models, got {}",
            args.models.len()
        )));
    }
    let cache = load_caches(&args.logits)?;
    let dataset = Dataset::load_jsonl(&args.dataset)?;
    let tiebreak_id = args.tiebreak.unwrap_or_else(|| {
        if args.models.iter().any(|m| m == "ensemble") {
            "ensemble".into()
        } else {
            args.models[2].clone()
        }
    });
    let tiebreak = args
        .models
        .iter()
        .position(|m| *m == tiebreak_id)
        .ok_or_else(|| {
            Error::contract(format!(
                "tiebreak model {tiebreak_id} is not one of the voters"
            ))
        })?;
    let (entries, per_model) = cache.aligned(&args.models)?;
    let golds = golds_for(&entries, &gold_labels(&dataset))?;
    let preds = (0..entries.len())
        .map(|e| {
            let p: Vec<FallacyClass> = per_model.iter().map(|m| m[e].argmax()).collect();
            majority_vote(&p, tiebreak)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&preds, &golds)?;
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for (m, logits) in args.models.iter().zip(&per_model) {
        let p: Vec<FallacyClass> = logits.iter().map(Logits::argmax).collect();
        rows.push((m.clone(), evaluate(&p, &golds)?));
    }
    rows.push(("majority vote".into(), report));
    let view: Vec<(&str, &EvalReport)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    print!("{}", render_f1_table(&view));
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let dataset = Dataset::load_jsonl(&args.dataset)?;
    let golds = gold_labels(&dataset);
    let (name, cache) = match (&args.logits, &args.checkpoint) {
        (Some(path), None) => {
            let cache = LogitCache::load(path)?;
            let ids = cache.model_ids();
            let name = match args.model {
                Some(m) => m,
                None if ids.len() == 1 => ids[0].clone(),
                None => {
                    return Err(Error::contract(format!(
                        "cache holds models {ids:?}; pick one with --model"
                    )))
                }
            };
            (name, cache)
        }
        (None, Some(path)) => {
            let (model, cfg) = load_checkpoint(path)?;
            let positions: Vec<usize> = if args.all {
                (0..dataset.len()).collect()
            } else {
                stratified_split(&dataset.labels(), cfg.train_fraction, cfg.split_seed)?.1
            };
            let name = args.model.unwrap_or_else(|| cfg.model.slug().to_string());
            let logits = predict_positions(&model, &cfg, &dataset, &positions)?;
            let mut cache = LogitCache::default();
            for (&p, l) in positions.iter().zip(logits) {
                cache.push(dataset.entries()[p].id(), name.clone(), l);
            }
            if let Some(out) = &args.write_logits {
                cache.save(out)?;
            }
            (name, cache)
        }
        _ => {
            return Err(Error::contract(
                "pass exactly one of --logits or --checkpoint",
            ))
        }
    };
    let (entries, per_model) = cache.aligned(std::slice::from_ref(&name))?;
    let gold = golds_for(&entries, &golds)?;
    let preds: Vec<FallacyClass> = per_model[0].iter().map(Logits::argmax).collect();
    let report = evaluate(&preds, &gold)?;
    print!("{}", render_f1_table(&[(&name, &report)]));
    Ok(())
}

fn audio_stats(args: AudioStatsArgs) -> Result<()> {
    let dataset = Dataset::load_jsonl(&args.dataset)?;
    print!("{}", length_statistics(&dataset.durations()?).render());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::OptimizeEnsemble(a) => optimize_ensemble(a),
        Command::Vote(a) => vote(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::AudioStats(a) => audio_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
