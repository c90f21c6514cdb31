use ctxfusion::audio::{AudioArchitecture, AudioEncoderConfig, ConvSpec};
use ctxfusion::encoder::{split_words, EncoderConfig, Vocab};
use ctxfusion::fusion::Architecture;
use ctxfusion::harness::train::build_model;
use ctxfusion::harness::{
    generate_synthetic, load_checkpoint, predict_positions, required_signal_bayes_floor,
    run_ablation, save_checkpoint, stratified_split, train_on_dataset, AblationSpec, ContextSignal,
    Dataset, Modality, ModelChoice, SynthConfig, TrainConfig, TrainedModel,
};
use ctxfusion::params::ParamStore;
use ctxfusion::NUM_CLASSES;

fn corpus(n: usize, signal: ContextSignal, seed: u64) -> Dataset {
    let mut sc = SynthConfig::new(n, signal, seed);
    sc.with_audio = false;
    generate_synthetic(&sc).unwrap()
}

fn tiny_text(model: Architecture, window: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: ModelChoice::Text(model),
        context_window: window,
        backbone_lr: 3e-3,
        head_lr: 3e-3,
        weight_decay: 0.01,
        batch_size: 8,
        grad_accum: 2,
        max_steps: 30,
        ..TrainConfig::default()
    };
    cfg.text.encoder = EncoderConfig {
        vocab_size: 0,
        model_dim: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_seq_len: 40,
        trainable_layer_count: 1,
    };
    cfg.text.head_hidden = vec![8];
    cfg
}

fn untrained(ds: &Dataset, cfg: &TrainConfig) -> TrainedModel {
    let (train, _) = stratified_split(&ds.labels(), cfg.train_fraction, cfg.split_seed).unwrap();
    let vocab = Vocab::build(train.iter().map(|&p| ds.entries()[p].text.as_str()));
    build_model(cfg, Some(vocab)).unwrap()
}

fn same_values(a: &ParamStore, b: &ParamStore, frozen_only: bool) -> bool {
    a.iter()
        .zip(b.iter())
        .filter(|((_, p), _)| !frozen_only || !p.trainable)
        .all(|((_, p), (_, q))| p.value.data() == q.value.data())
}

#[test]
fn training_never_touches_frozen_layers() {
    let ds = corpus(150, ContextSignal::Required, 2);
    let cfg = tiny_text(Architecture::CrossAttnGateAttnPool, 2);
    let run = train_on_dataset(&ds, &cfg, "m").unwrap();
    let fresh = untrained(&ds, &cfg);
    let frozen = run
        .model
        .store()
        .iter()
        .filter(|(_, p)| !p.trainable)
        .count();
    assert!(frozen > 0);
    assert!(same_values(run.model.store(), fresh.store(), true));
    assert!(!same_values(run.model.store(), fresh.store(), false));
    assert!(run
        .outcome
        .history
        .iter()
        .all(|r| r.loss.is_finite() && r.grad_norm.is_finite()));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = corpus(150, ContextSignal::None, 3);
    let mut cfg = tiny_text(Architecture::ContextPool, 1);
    cfg.backbone_lr = 0.0;
    cfg.head_lr = 0.0;
    cfg.text.encoder.trainable_layer_count = 2;
    let run = train_on_dataset(&ds, &cfg, "m").unwrap();
    assert!(same_values(
        run.model.store(),
        untrained(&ds, &cfg).store(),
        false
    ));
    assert!(run
        .outcome
        .history
        .iter()
        .all(|r| r.lr_backbone == 0.0 && r.grad_norm > 0.0));
}

#[test]
fn validation_cadence_and_final_round() {
    let ds = corpus(150, ContextSignal::None, 4);
    let mut cfg = tiny_text(Architecture::Concat, 0);
    cfg.patience = 100;
    let run = train_on_dataset(&ds, &cfg, "m").unwrap();
    let cadence = run
        .train_positions
        .len()
        .div_ceil(cfg.batch_size * cfg.grad_accum);
    let steps: Vec<usize> = run.outcome.validations.iter().map(|v| v.step).collect();
    let mut want: Vec<usize> = (1..=cfg.max_steps).filter(|s| s % cadence == 0).collect();
    if want.last() != Some(&cfg.max_steps) {
        want.push(cfg.max_steps);
    }
    assert_eq!(steps, want);
    let best = run.outcome.best();
    assert!(run.outcome.validations.iter().all(|v| v.loss >= best.loss));
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let ds = corpus(150, ContextSignal::Required, 5);
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        tiny_text(Architecture::CrossAttnGate, 3),
        tiny_audio(AudioArchitecture::TemporalAvg),
    ] {
        let ds = if cfg.model.is_text() {
            ds.clone()
        } else {
            audio_corpus()
        };
        let run = train_on_dataset(&ds, &cfg, "m").unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &run.model, &cfg).unwrap();
        let (back, back_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(back_cfg, cfg);
        let a = predict_positions(&run.model, &cfg, &ds, &run.val_positions).unwrap();
        let b = predict_positions(&back, &back_cfg, &ds, &run.val_positions).unwrap();
        assert_eq!(a, b);
        let cached: Vec<_> = run.val_logits.records.iter().map(|r| r.logits).collect();
        assert_eq!(cached, a);
    }
}

fn tiny_audio(arch: AudioArchitecture) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: ModelChoice::Audio(arch),
        context_window: 1,
        backbone_lr: 3e-3,
        head_lr: 3e-3,
        batch_size: 4,
        grad_accum: 1,
        max_steps: 6,
        ..TrainConfig::default()
    };
    cfg.audio.encoder = AudioEncoderConfig {
        conv: vec![
            ConvSpec {
                kernel: 40,
                stride: 40,
            },
            ConvSpec {
                kernel: 10,
                stride: 10,
            },
        ],
        model_dim: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        max_seconds: 1.0,
        trainable_layer_count: 2,
    };
    cfg.audio.head_hidden = vec![8];
    cfg
}

fn audio_corpus() -> Dataset {
    let mut sc = SynthConfig::new(120, ContextSignal::None, 7);
    sc.min_audio_seconds = 0.1;
    sc.max_audio_seconds = 0.2;
    generate_synthetic(&sc).unwrap()
}

#[test]
fn audio_models_train_from_jsonl_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = audio_corpus();
    ds.externalize_audio(&dir.path().join("audio")).unwrap();
    let path = dir.path().join("data.jsonl");
    ds.save_jsonl(&path).unwrap();
    let loaded = Dataset::load_jsonl(&path).unwrap();
    assert_eq!(loaded.len(), ds.len());
    for arch in AudioArchitecture::ALL {
        let run = train_on_dataset(&loaded, &tiny_audio(arch), arch.slug()).unwrap();
        assert_eq!(run.val_logits.records.len(), run.val_positions.len());
        assert!((0.0..=1.0).contains(&run.report.macro_f1));
    }
}

#[test]
fn ablation_cells_do_not_depend_on_execution_order() {
    let ds = corpus(150, ContextSignal::Required, 8);
    let mut base = tiny_text(Architecture::Concat, 0);
    base.max_steps = 8;
    let archs = vec![
        ModelChoice::Text(Architecture::ContextPool),
        ModelChoice::Text(Architecture::CrossAttnVanilla),
        ModelChoice::Text(Architecture::CrossAttnGateAttnPool),
    ];
    let spec = AblationSpec {
        modality: Modality::Text,
        architectures: archs,
        windows: vec![0, 1, 3],
        seeds: vec![0, 1],
        base,
        workers: 1,
    };
    let serial = run_ablation(&ds, &spec).unwrap();
    let mut reordered = spec.clone();
    reordered.architectures.reverse();
    reordered.windows = vec![3, 0, 1];
    reordered.workers = 3;
    let parallel = run_ablation(&ds, &reordered).unwrap();
    assert_eq!(serial.cells.len(), 1 + 3 * 2);
    for c in &serial.cells {
        let other = parallel.cell(&c.row, c.window).unwrap();
        assert_eq!(c.macro_f1, other.macro_f1, "{} N={}", c.row, c.window);
    }
    // Row order follows the architecture list; the set of rendered rows does not.
    let sorted = |t: String| {
        let mut v: Vec<String> = t.lines().map(str::to_string).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(sorted(serial.render()), sorted(parallel.render()));
}

/// Multinomial logistic regression on sentence bag-of-words counts.
fn bag_of_words_accuracy(ds: &Dataset) -> f64 {
    let labels = ds.labels();
    let (train, val) = stratified_split(&labels, 0.8, 0).unwrap();
    let vocab = Vocab::build(train.iter().map(|&p| ds.entries()[p].text.as_str()));
    let v = vocab.len();
    let feats = |p: usize| {
        let mut x = vec![0.0; v + 1];
        x[v] = 1.0;
        for w in split_words(&ds.entries()[p].text) {
            x[vocab.id(w)] += 1.0;
        }
        x
    };
    let xs: Vec<Vec<f64>> = (0..ds.len()).map(feats).collect();
    let mut w = vec![vec![0.0; v + 1]; NUM_CLASSES];
    let lr = 0.1;
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; v + 1]; NUM_CLASSES];
        for &p in &train {
            let scores: Vec<f64> = w
                .iter()
                .map(|wc| wc.iter().zip(&xs[p]).map(|(a, b)| a * b).sum())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..NUM_CLASSES {
                let prob =
                    (scores[c] - m).exp() / z - if labels[p].index() == c { 1.0 } else { 0.0 };
                for (g, x) in grad[c].iter_mut().zip(&xs[p]) {
                    *g += prob * x;
                }
            }
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= lr * g / train.len() as f64;
            }
        }
    }
    let hits = val
        .iter()
        .filter(|&&p| {
            let scores: Vec<f64> = w
                .iter()
                .map(|wc| wc.iter().zip(&xs[p]).map(|(a, b)| a * b).sum())
                .collect();
            let best = (0..NUM_CLASSES)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .unwrap();
            best == labels[p].index()
        })
        .count();
    hits as f64 / val.len() as f64
}

#[test]
fn context_free_oracle_respects_the_designed_floor() {
    let required = corpus(1200, ContextSignal::Required, 1);
    let floor = required_signal_bayes_floor(required.len(), required.debate_count());
    let acc = bag_of_words_accuracy(&required);
    assert!(
        acc <= floor + 0.05,
        "bag-of-words accuracy {acc} above floor {floor} + 0.05"
    );
    let separable = corpus(1200, ContextSignal::None, 1);
    let acc = bag_of_words_accuracy(&separable);
    assert!(
        acc >= 0.8,
        "bag-of-words accuracy {acc} on the separable corpus"
    );
}

#[test]
fn context_pool_at_width_64_fits_the_separable_corpus() {
    let ds = corpus(600, ContextSignal::None, 11);
    let mut cfg = TrainConfig {
        model: ModelChoice::Text(Architecture::ContextPool),
        context_window: 1,
        backbone_lr: 1e-3,
        head_lr: 1e-3,
        weight_decay: 0.01,
        batch_size: 16,
        grad_accum: 1,
        max_steps: 2000,
        patience: 3,
        ..TrainConfig::default()
    };
    cfg.text.encoder = EncoderConfig {
        vocab_size: 0,
        model_dim: 64,
        n_layers: 1,
        n_heads: 4,
        ffn_dim: 128,
        max_seq_len: 24,
        trainable_layer_count: 1,
    };
    cfg.text.head_hidden = vec![64];
    let run = train_on_dataset(&ds, &cfg, "m").unwrap();
    assert!(run.outcome.history.len() <= 2000);
    assert!(
        run.report.macro_f1 >= 0.9,
        "macro F1 {}",
        run.report.macro_f1
    );
}
