//! Late fusion: weighted logit averaging with Bayesian-optimized weights,
//! majority voting, and macro-F1 evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::labels::{FallacyClass, Logits, NUM_CLASSES};

/// Nonnegative per-model weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    /// Normalizes `raw` onto the simplex.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::contract(
                "ensemble weights must be finite and nonnegative",
            ));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::contract("ensemble weights sum to zero"));
        }
        Ok(EnsembleWeights(
            raw.into_iter().map(|w| w / total).collect(),
        ))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Elementwise `Σ w_i · logits_i`.
pub fn weighted_logit_average(logit_sets: &[Logits], w: &EnsembleWeights) -> Result<Logits> {
    if logit_sets.len() != w.len() {
        return Err(Error::contract(format!(
            "{} logit sets for {} weights",
            logit_sets.len(),
            w.len()
        )));
    }
    let mut out = [0.0; NUM_CLASSES];
    for (l, &wi) in logit_sets.iter().zip(w.as_slice()) {
        for (o, v) in out.iter_mut().zip(l.0.iter()) {
            *o += wi * v;
        }
    }
    Ok(Logits(out))
}

/// Strict-majority label of three predictions, else the prediction at
/// `tiebreak`.
pub fn majority_vote(predictions: &[FallacyClass], tiebreak: usize) -> Result<FallacyClass> {
    if predictions.len() != 3 {
        return Err(Error::contract(format!(
            "majority vote needs exactly 3 predictions, got {}",
            predictions.len()
        )));
    }
    if tiebreak >= 3 {
        return Err(Error::contract(format!(
            "tiebreak index {tiebreak} out of range"
        )));
    }
    let [a, b, c] = [predictions[0], predictions[1], predictions[2]];
    Ok(if a == b || a == c {
        a
    } else if b == c {
        b
    } else {
        predictions[tiebreak]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub per_class_f1: [f64; NUM_CLASSES],
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl EvalReport {
    pub fn support(&self, class: FallacyClass) -> usize {
        self.confusion[class.index()].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let hits: usize = (0..NUM_CLASSES).map(|i| self.confusion[i][i]).sum();
        hits as f64 / total as f64
    }
}

/// Per-class F1 (0 when a class is neither predicted nor present) and their
/// unweighted mean over all six classes.
pub fn evaluate(predictions: &[FallacyClass], golds: &[FallacyClass]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::contract("cannot evaluate zero predictions"));
    }
    if predictions.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (p, g) in predictions.iter().zip(golds) {
        confusion[g.index()][p.index()] += 1;
    }
    let mut per_class_f1 = [0.0; NUM_CLASSES];
    for (c, f1) in per_class_f1.iter_mut().enumerate() {
        let tp = confusion[c][c];
        let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..NUM_CLASSES).map(|g| confusion[g][c]).sum::<usize>() - tp;
        let denom = 2 * tp + fp + fn_;
        *f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
    }
    Ok(EvalReport {
        macro_f1: per_class_f1.iter().sum::<f64>() / NUM_CLASSES as f64,
        per_class_f1,
        confusion,
    })
}

/// Aligned per-class F1 table, one row per named report.
pub fn render_f1_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    write!(s, "{:<width$}", "Model").unwrap();
    for c in FallacyClass::ALL {
        write!(s, " | {:>6}", c.abbrev()).unwrap();
    }
    writeln!(s, " | {:>8}", "Macro F1").unwrap();
    for (name, r) in rows {
        write!(s, "{name:<width$}").unwrap();
        for f in r.per_class_f1 {
            write!(s, " | {f:>6.4}").unwrap();
        }
        writeln!(s, " | {:>8.4}", r.macro_f1).unwrap();
    }
    s
}

/// Cached validation logits: `per_model[m][e]` for model `m`, entry `e`.
fn ensemble_f1(
    per_model: &[Vec<Logits>],
    golds: &[FallacyClass],
    w: &EnsembleWeights,
) -> Result<f64> {
    let preds = (0..golds.len())
        .map(|e| {
            let set: Vec<Logits> = per_model.iter().map(|m| m[e]).collect();
            weighted_logit_average(&set, w).map(|l| l.argmax())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&preds, golds)?.macro_f1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesOptConfig {
    pub iterations: usize,
    pub initial_points: usize,
    pub candidates: usize,
    pub length_scale: f64,
    pub noise: f64,
    pub xi: f64,
    pub seed: u64,
}

impl Default for BayesOptConfig {
    fn default() -> Self {
        BayesOptConfig {
            iterations: 20,
            initial_points: 15,
            candidates: 1000,
            length_scale: 0.2,
            noise: 1e-6,
            xi: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub weights: EnsembleWeights,
    pub f1: f64,
    /// Every evaluated point in order: initial points first.
    pub trials: Vec<(EnsembleWeights, f64)>,
}

fn random_simplex_point(m: usize, rng: &mut ChaCha8Rng) -> EnsembleWeights {
    loop {
        let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        if let Ok(w) = EnsembleWeights::new(raw) {
            return w;
        }
    }
}

fn se_kernel(a: &[f64], b: &[f64], ls: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * ls * ls)).exp()
}

struct Surrogate {
    xs: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    mean: f64,
    scale: f64,
    ls: f64,
}

impl Surrogate {
    fn fit(xs: &[Vec<f64>], ys: &[f64], ls: f64, noise: f64) -> Self {
        let n = xs.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(n, ys.iter().map(|v| (v - mean) / scale));
        let mut jitter = noise;
        let chol = loop {
            let k = DMatrix::from_fn(n, n, |i, j| {
                se_kernel(&xs[i], &xs[j], ls) + if i == j { jitter } else { 0.0 }
            });
            if let Some(c) = k.cholesky() {
                break c;
            }
            jitter *= 10.0;
        };
        let alpha = chol.solve(&y);
        Surrogate {
            xs: xs.to_vec(),
            alpha,
            chol,
            mean,
            scale,
            ls,
        }
    }

    /// Posterior mean and standard deviation in original units.
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| se_kernel(xi, x, self.ls)),
        );
        let mu = k.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&k)
            .expect("triangular solve");
        let var = (1.0 - v.dot(&v)).max(0.0);
        (self.mean + self.scale * mu, self.scale * var.sqrt())
    }
}

fn expected_improvement(mu: f64, sigma: f64, best: f64, xi: f64) -> f64 {
    if sigma <= 1e-12 {
        return (mu - best - xi).max(0.0);
    }
    let n = Normal::standard();
    let z = (mu - best - xi) / sigma;
    (mu - best - xi) * n.cdf(z) + sigma * n.pdf(z)
}

/// Searches ensemble weights maximizing validation macro-F1 with a Gaussian
/// process surrogate and expected improvement. `per_model[m][e]` holds model
/// `m`'s cached logits for validation entry `e`. Returns the best observed
/// point (earliest on ties).
pub fn optimize_weights(
    per_model: &[Vec<Logits>],
    golds: &[FallacyClass],
    config: &BayesOptConfig,
) -> Result<OptimizationResult> {
    if golds.is_empty() {
        return Err(Error::contract("empty validation set"));
    }
    if per_model.is_empty() || per_model.iter().any(|m| m.len() != golds.len()) {
        return Err(Error::contract(
            "every model needs one logit vector per validation entry",
        ));
    }
    if config.initial_points == 0 {
        return Err(Error::contract("at least one initial point is required"));
    }
    let m = per_model.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trials = Vec::new();
    for _ in 0..config.initial_points {
        let w = random_simplex_point(m, &mut rng);
        let f = ensemble_f1(per_model, golds, &w)?;
        trials.push((w, f));
    }
    let corners: Vec<EnsembleWeights> = (0..m)
        .map(|i| {
            EnsembleWeights::new((0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).unwrap()
        })
        .collect();
    for _ in 0..config.iterations {
        let xs: Vec<Vec<f64>> = trials.iter().map(|(w, _)| w.as_slice().to_vec()).collect();
        let ys: Vec<f64> = trials.iter().map(|(_, f)| *f).collect();
        let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gp = Surrogate::fit(&xs, &ys, config.length_scale, config.noise);
        let mut pick: Option<(f64, EnsembleWeights)> = None;
        let candidates = corners
            .iter()
            .cloned()
            .chain((0..config.candidates).map(|_| random_simplex_point(m, &mut rng)))
            .collect::<Vec<_>>();
        for c in candidates {
            let (mu, sigma) = gp.predict(c.as_slice());
            let ei = expected_improvement(mu, sigma, best, config.xi);
            if pick.as_ref().is_none_or(|(b, _)| ei > *b) {
                pick = Some((ei, c));
            }
        }
        let (_, w) = pick.expect("candidate set non-empty");
        let f = ensemble_f1(per_model, golds, &w)?;
        trials.push((w, f));
    }
    let (weights, f1) = trials
        .iter()
        .fold(None::<&(EnsembleWeights, f64)>, |acc, t| match acc {
            Some(a) if a.1 >= t.1 => Some(a),
            _ => Some(t),
        })
        .cloned()
        .expect("at least one trial");
    Ok(OptimizationResult {
        weights,
        f1,
        trials,
    })
}

/// One cached logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub entry_id: String,
    pub model_id: String,
    pub logits: Logits,
}

pub const LOGIT_CACHE_HEADER: &str = "# logit-cache v1";

/// Tab-separated logit cache: a version header, then
/// `entry_id  model_id  l_AE l_AA l_AH l_FC l_SS l_S` per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitCache {
    pub records: Vec<LogitRecord>,
}

impl LogitCache {
    pub fn push(
        &mut self,
        entry_id: impl Into<String>,
        model_id: impl Into<String>,
        logits: Logits,
    ) {
        self.records.push(LogitRecord {
            entry_id: entry_id.into(),
            model_id: model_id.into(),
            logits,
        });
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{LOGIT_CACHE_HEADER}").unwrap();
        for r in &self.records {
            if r.entry_id.contains(['\t', '\n']) || r.model_id.contains(['\t', '\n']) {
                return Err(Error::contract(
                    "logit cache ids may not contain tabs or newlines",
                ));
            }
            write!(s, "{}\t{}", r.entry_id, r.model_id).unwrap();
            for v in r.logits.0 {
                // `{:?}` prints the shortest representation that round-trips.
                write!(s, "\t{v:?}").unwrap();
            }
            writeln!(s).unwrap();
        }
        w.write_all(s.as_bytes())
            .map_err(|e| Error::io("<logit cache>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io("<logit cache>", e))?
            .unwrap_or_default();
        if header.trim_end() != LOGIT_CACHE_HEADER {
            return Err(Error::Parse(format!("bad logit cache header `{header}`")));
        }
        let mut cache = LogitCache::default();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("<logit cache>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 + NUM_CLASSES {
                return Err(Error::Parse(format!(
                    "logit cache line {}: {} fields",
                    n + 2,
                    fields.len()
                )));
            }
            let values = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("logit cache line {}: {e}", n + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            cache.push(fields[0], fields[1], Logits::from_slice(&values)?);
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn merge(&mut self, other: LogitCache) {
        self.records.extend(other.records);
    }

    /// Model ids in first-appearance order.
    pub fn model_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.model_id) {
                out.push(r.model_id.clone());
            }
        }
        out
    }

    /// Logits aligned as `[model][entry]` over the entries every listed model
    /// covers, in the first model's order.
    pub fn aligned(&self, models: &[String]) -> Result<(Vec<String>, Vec<Vec<Logits>>)> {
        let mut table: BTreeMap<(&str, &str), Logits> = BTreeMap::new();
        for r in &self.records {
            table.insert((r.model_id.as_str(), r.entry_id.as_str()), r.logits);
        }
        let first = models
            .first()
            .ok_or_else(|| Error::contract("no models selected"))?;
        let entries: Vec<String> = self
            .records
            .iter()
            .filter(|r| &r.model_id == first)
            .map(|r| r.entry_id.clone())
            .filter(|e| {
                models
                    .iter()
                    .all(|m| table.contains_key(&(m.as_str(), e.as_str())))
            })
            .collect();
        let per_model = models
            .iter()
            .map(|m| {
                entries
                    .iter()
                    .map(|e| table[&(m.as_str(), e.as_str())])
                    .collect()
            })
            .collect();
        Ok((entries, per_model))
    }
}
