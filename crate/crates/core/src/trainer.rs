//! Training loop, evaluation, AdaGrad and a finite-difference gradient
//! checker.
//!
//! A batch is a set of independent runs submitted to the executor at once.
//! Their gradients are summed in instance order on the calling thread.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{generate_synthetic, shuffled, TreeInstance, TreeShape};
use crate::executor::{ExecError, Executor, RunOptions};
use crate::graph::{FinalizedGraph, OpKind};
use crate::models::{build_recursive, BuiltModel, ModelConfig, ModelError, ModelKind, ModelParams};
use crate::tensor::{Tensor, UnaryFn};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("shape mismatch for `{name}`: parameter {param}, gradient {grad}")]
    Shape { name: String, param: String, grad: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("metrics csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub threads: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (0 disables evaluation).
    pub eval_every: usize,
    /// Stop after the first evaluated epoch reaching this accuracy.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 25,
            epochs: 10,
            lr: 0.05,
            l2: 0.0,
            threads: 1,
            seed: 0,
            eval_every: 1,
            target_accuracy: None,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: usize,
    /// Cumulative training time at the end of this epoch, excluding evaluation.
    pub wall_time_s: f64,
    pub instances_per_s: f64,
    #[serde(rename = "loss")]
    pub loss_mean: f64,
    pub accuracy: f64,
}

/// Per-parameter accumulated squared gradients.
#[derive(Debug, Clone, Default)]
pub struct AdaGrad {
    pub state: BTreeMap<String, Tensor>,
}

pub const ADAGRAD_EPS: f64 = 1e-8;

/// `state += g^2; p -= lr * g / (sqrt(state) + eps)` with `g` including
/// `l2 * p`.
pub fn adagrad_update(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdaGrad,
    lr: f64,
    l2: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params.tensors.get_mut(name).ok_or_else(|| TrainError::Shape {
            name: name.clone(),
            param: "missing".into(),
            grad: g.shape().to_string(),
        })?;
        if p.shape() != g.shape() {
            return Err(TrainError::Shape {
                name: name.clone(),
                param: p.shape().to_string(),
                grad: g.shape().to_string(),
            });
        }
        let s = state
            .state
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        for ((pv, sv), gv) in p.data_mut().iter_mut().zip(s.data_mut()).zip(g.data()) {
            let gt = gv + l2 * *pv;
            *sv += gt * gt;
            *pv -= lr * gt / (sv.sqrt() + ADAGRAD_EPS);
        }
    }
    Ok(())
}

/// Per-instance losses and root predictions, plus parameter gradients
/// summed over the batch in instance order.
pub struct BatchResult {
    pub losses: Vec<f64>,
    pub predictions: Vec<usize>,
    pub grads: BTreeMap<String, Tensor>,
}

pub fn batch_gradients(
    model: &BuiltModel,
    params: &ModelParams,
    batch: &[&TreeInstance],
    executor: &Executor,
    opts: &RunOptions,
) -> Result<BatchResult, TrainError> {
    let shared = params.shared();
    let feeds = batch
        .iter()
        .map(|t| model.feeds(t, &shared))
        .collect::<Result<Vec<_>, _>>()?;
    let mut fetch = vec![model.loss, model.logits];
    fetch.extend(model.grads.iter().map(|(_, id)| *id));
    let outs = executor.run_batch(&model.train, &feeds, &fetch, opts);
    let mut losses = Vec::with_capacity(batch.len());
    let mut predictions = Vec::with_capacity(batch.len());
    let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
    for out in outs {
        let out = out?;
        losses.push(out.scalar(0)?);
        predictions.push(out.tensor(1)?.argmax());
        for (i, (name, _)) in model.grads.iter().enumerate() {
            let g = out.tensor(i + 2)?;
            match sum.get_mut(name) {
                Some(acc) => acc.add_assign(&g).expect("gradient shapes are fixed"),
                None => {
                    sum.insert(name.clone(), (*g).clone());
                }
            }
        }
    }
    Ok(BatchResult {
        losses,
        predictions,
        grads: sum,
    })
}

/// Train in place; returns one [`Metrics`] row per epoch. On evaluated
/// epochs accuracy is measured on `valid` (or the training corpus); on the
/// others it is the running accuracy of the training predictions.
pub fn train(
    model: &BuiltModel,
    params: &mut ModelParams,
    corpus: &[TreeInstance],
    valid: Option<&[TreeInstance]>,
    cfg: &TrainConfig,
    executor: &Executor,
) -> Result<Vec<Metrics>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::BatchSize);
    }
    let opts = RunOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ada = AdaGrad::default();
    let mut history = Vec::new();
    let mut elapsed = 0.0;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(corpus.len(), &mut rng);
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TreeInstance> = chunk.iter().map(|&i| &corpus[i]).collect();
            let r = batch_gradients(model, params, &batch, executor, &opts)?;
            let total: f64 = r.losses.iter().sum();
            if !total.is_finite() {
                return Err(TrainError::Divergence { step, loss: total });
            }
            loss_sum += total;
            correct += r
                .predictions
                .iter()
                .zip(&batch)
                .filter(|(p, t)| **p == t.root_label())
                .count();
            adagrad_update(params, &r.grads, &mut ada, cfg.lr, cfg.l2)?;
            step += 1;
        }
        let secs = start.elapsed().as_secs_f64();
        elapsed += secs;
        let evaluate_now = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let accuracy = if evaluate_now {
            evaluate(model, params, valid.unwrap_or(corpus), executor)?.accuracy
        } else {
            correct as f64 / corpus.len() as f64
        };
        let m = Metrics {
            epoch,
            wall_time_s: elapsed,
            instances_per_s: corpus.len() as f64 / secs.max(1e-12),
            loss_mean: loss_sum / corpus.len() as f64,
            accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} accuracy {:.4} ({:.1} inst/s, {:.1}s)",
            m.loss_mean,
            m.accuracy,
            m.instances_per_s,
            m.wall_time_s
        );
        history.push(m);
        if let Some(target) = cfg.target_accuracy {
            if evaluate_now && accuracy >= target {
                break;
            }
        }
    }
    Ok(history)
}

/// Chunk size for forward-only runs.
const EVAL_CHUNK: usize = 64;

/// Root-class predictions and per-instance losses (forward graph only).
pub fn predict(
    model: &BuiltModel,
    params: &ModelParams,
    corpus: &[TreeInstance],
    executor: &Executor,
) -> Result<(Vec<usize>, Vec<f64>), TrainError> {
    let shared = params.shared();
    let opts = RunOptions::default();
    let mut preds = Vec::with_capacity(corpus.len());
    let mut losses = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(EVAL_CHUNK) {
        let feeds = chunk
            .iter()
            .map(|t| model.feeds(t, &shared))
            .collect::<Result<Vec<_>, _>>()?;
        for out in executor.run_batch(&model.forward, &feeds, &[model.loss, model.logits], &opts) {
            let out = out?;
            losses.push(out.scalar(0)?);
            preds.push(out.tensor(1)?.argmax());
        }
    }
    Ok((preds, losses))
}

/// Forward-only accuracy, mean loss and throughput; `epoch` is 0.
pub fn evaluate(
    model: &BuiltModel,
    params: &ModelParams,
    corpus: &[TreeInstance],
    executor: &Executor,
) -> Result<Metrics, TrainError> {
    let start = Instant::now();
    let (preds, losses) = predict(model, params, corpus, executor)?;
    let secs = start.elapsed().as_secs_f64();
    let n = corpus.len().max(1) as f64;
    let correct = preds
        .iter()
        .zip(corpus)
        .filter(|(p, t)| **p == t.root_label())
        .count();
    Ok(Metrics {
        epoch: 0,
        wall_time_s: secs,
        instances_per_s: corpus.len() as f64 / secs.max(1e-12),
        loss_mean: losses.iter().sum::<f64>() / n,
        accuracy: correct as f64 / n,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[Metrics]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<Metrics>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<Metrics>, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub param: String,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub kind: ModelKind,
    pub trials: usize,
    pub tol: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.failures == 0)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "grad_check {} trials={} tol={:e}: {}",
            self.kind,
            self.trials,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "  {:<6} worst_rel={:.3e} worst_abs={:.3e} failures={}",
                r.param, r.worst_rel, r.worst_abs, r.failures
            )?;
        }
        Ok(())
    }
}

pub const FD_EPS: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-7;

/// Compare engine gradients of `model.train` with central differences of
/// the loss computed by `model.forward`, over every parameter scalar.
pub fn grad_check_model(
    model: &BuiltModel,
    params: &ModelParams,
    trees: &[TreeInstance],
    tol: f64,
    executor: &Executor,
) -> Result<Vec<GradCheckRow>, TrainError> {
    let opts = RunOptions::default();
    let mut rows: BTreeMap<String, GradCheckRow> = params
        .tensors
        .keys()
        .map(|k| {
            (
                k.clone(),
                GradCheckRow {
                    param: k.clone(),
                    worst_rel: 0.0,
                    worst_abs: 0.0,
                    failures: 0,
                },
            )
        })
        .collect();
    for tree in trees {
        let grads = batch_gradients(model, params, &[tree], executor, &opts)?.grads;
        // each perturbed copy is one independent forward run
        let mut probes = Vec::new();
        let mut feeds = Vec::new();
        for (name, t) in &params.tensors {
            for k in 0..t.data().len() {
                for sign in [1.0, -1.0] {
                    let mut p = params.clone();
                    p.tensors.get_mut(name).expect("own key").data_mut()[k] += sign * FD_EPS;
                    feeds.push(model.feeds(tree, &p.shared())?);
                }
                probes.push((name.clone(), k));
            }
        }
        let outs = executor.run_batch(&model.forward, &feeds, &[model.loss], &opts);
        let losses = outs
            .into_iter()
            .map(|o| o.and_then(|o| o.scalar(0)))
            .collect::<Result<Vec<_>, _>>()?;
        for (j, (name, k)) in probes.iter().enumerate() {
            let fd = (losses[2 * j] - losses[2 * j + 1]) / (2.0 * FD_EPS);
            let an = grads[name].data()[*k];
            let abs = (fd - an).abs();
            let rel = abs / fd.abs().max(an.abs()).max(f64::MIN_POSITIVE);
            let row = rows.get_mut(name).expect("row per parameter");
            if abs > ABS_FLOOR {
                row.worst_rel = row.worst_rel.max(rel);
                if rel > tol {
                    row.failures += 1;
                }
            }
            row.worst_abs = row.worst_abs.max(abs);
        }
    }
    Ok(rows.into_values().collect())
}

/// Small configuration used by [`grad_check`].
pub fn grad_check_config(kind: ModelKind) -> ModelConfig {
    ModelConfig::new(kind, 3, 8, 3)
}

/// Random trees of at most 31 nodes.
pub fn random_small_trees(n: usize, vocab: usize, classes: usize, seed: u64) -> Vec<TreeInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let shape = TreeShape::ALL[i % 3];
            let leaves = match shape {
                TreeShape::Balanced => 1 << (i % 5),
                _ => 1 + (i * 7) % 16,
            };
            generate_synthetic(shape, leaves, vocab, classes, &mut rng).expect("valid arguments")
        })
        .collect()
}

/// Finite-difference check of one model kind on `trials` random trees.
pub fn grad_check(kind: ModelKind, trials: usize, tol: f64, seed: u64) -> Result<GradCheckReport, TrainError> {
    let cfg = grad_check_config(kind);
    let model = build_recursive(&cfg)?;
    grad_check_with(&model, trials, tol, seed)
}

/// As [`grad_check`] for an already built (possibly instrumented) model.
pub fn grad_check_with(model: &BuiltModel, trials: usize, tol: f64, seed: u64) -> Result<GradCheckReport, TrainError> {
    let cfg = model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init_dense(&cfg, 0.5, &mut rng);
    let trees = random_small_trees(trials, cfg.vocab, cfg.classes, seed ^ 0x5eed);
    let executor = Executor::new(crate::executor::default_threads());
    let rows = if trials == 0 {
        Vec::new()
    } else {
        grad_check_model(model, &params, &trees, tol, &executor)?
    };
    Ok(GradCheckReport {
        kind: cfg.kind,
        trials,
        tol,
        rows,
    })
}

/// Test fixture: a copy of `model` whose training graph uses the sigmoid
/// derivative in place of the tanh derivative.
pub fn corrupt_tanh_derivative(model: &BuiltModel) -> BuiltModel {
    let mut g: FinalizedGraph = (*model.train).clone();
    g.rewrite_ops(|k| match k {
        OpKind::UnaryGrad(UnaryFn::Tanh) => Some(OpKind::UnaryGrad(UnaryFn::Sigmoid)),
        _ => None,
    });
    BuiltModel {
        train: Arc::new(g),
        ..model.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use crate::models::build_iterative;

    fn setup(kind: ModelKind) -> (BuiltModel, ModelParams, Vec<TreeInstance>) {
        let cfg = ModelConfig::new(kind, 4, 10, 2);
        let m = build_recursive(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::init(&cfg, &mut rng);
        let trees = synthetic_corpus(TreeShape::Moderate, 4, 12, 10, 2, &mut rng).unwrap();
        (m, p, trees)
    }

    #[test]
    fn adagrad_closed_form() {
        let cfg = ModelConfig::new(ModelKind::TreeRnn, 2, 3, 2);
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let before = p.clone();
        let ones: BTreeMap<String, Tensor> = p
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::ones(t.rows(), t.cols())))
            .collect();
        let mut st = AdaGrad::default();
        adagrad_update(&mut p, &ones, &mut st, 0.1, 0.0).unwrap();
        let first: Vec<f64> = p.get("W").data().iter().zip(before.get("W").data()).map(|(a, b)| a - b).collect();
        for d in &first {
            assert!((d + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        }
        let mid = p.clone();
        adagrad_update(&mut p, &ones, &mut st, 0.1, 0.0).unwrap();
        for ((a, b), f) in p.get("W").data().iter().zip(mid.get("W").data()).zip(&first) {
            assert!((a - b).abs() < f.abs());
        }
        let zeros: BTreeMap<String, Tensor> = p
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        let snap = p.clone();
        adagrad_update(&mut p, &zeros, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p, snap);
        let mut bad = BTreeMap::new();
        bad.insert("W".to_string(), Tensor::zeros(1, 1));
        assert!(matches!(
            adagrad_update(&mut p, &bad, &mut st, 0.1, 0.0),
            Err(TrainError::Shape { .. })
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        let (m, mut p, trees) = setup(ModelKind::TreeLstm);
        let before = p.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 5,
            eval_every: 0,
            ..Default::default()
        };
        train(&m, &mut p, &trees, None, &cfg, &Executor::new(2)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn repeated_instance_sums_linearly() {
        let (m, p, trees) = setup(ModelKind::Rntn);
        let ex = Executor::new(3);
        let opts = RunOptions::default();
        let one = batch_gradients(&m, &p, &[&trees[0]], &ex, &opts).unwrap().grads;
        let five = batch_gradients(&m, &p, &[&trees[0]; 5], &ex, &opts).unwrap().grads;
        for (k, g) in &one {
            assert!(five[k].max_abs_diff(&g.scale(5.0)) < 1e-9, "{k}");
        }
        let refs: Vec<&TreeInstance> = trees.iter().collect();
        let all = batch_gradients(&m, &p, &refs, &ex, &opts).unwrap().grads;
        let mut manual: BTreeMap<String, Tensor> = BTreeMap::new();
        for t in &trees {
            let g = batch_gradients(&m, &p, &[t], &ex, &opts).unwrap().grads;
            for (k, v) in g {
                manual.entry(k).and_modify(|a| a.add_assign(&v).unwrap()).or_insert(v);
            }
        }
        for (k, g) in &all {
            assert!(manual[k].max_abs_diff(g) < 1e-9);
        }
    }

    #[test]
    fn descent_sanity_for_every_model() {
        for kind in ModelKind::ALL {
            let (m, mut p, trees) = setup(kind);
            let one = vec![trees[3].clone()];
            let ex = Executor::new(1);
            let loss = |p: &ModelParams| predict(&m, p, &one, &ex).unwrap().1[0];
            let mut prev = loss(&p);
            let cfg = TrainConfig {
                lr: 1e-3,
                epochs: 1,
                batch_size: 1,
                eval_every: 0,
                ..Default::default()
            };
            for _ in 0..5 {
                train(&m, &mut p, &one, None, &cfg, &ex).unwrap();
                let now = loss(&p);
                assert!(now < prev, "{kind}: {now} !< {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn reproducible_single_thread() {
        let (m, p0, trees) = setup(ModelKind::TreeRnn);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut p = p0.clone();
            let h = train(&m, &mut p, &trees, None, &cfg, &Executor::new(1)).unwrap();
            (p, h.iter().map(|r| (r.loss_mean, r.accuracy)).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_reports_step() {
        let (m, mut p, trees) = setup(ModelKind::TreeRnn);
        p.tensors.get_mut("Ws").unwrap().data_mut()[0] = f64::NAN;
        let err = train(&m, &mut p, &trees, None, &TrainConfig::default(), &Executor::new(1)).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn empty_corpus_and_zero_batch_rejected() {
        let (m, mut p, trees) = setup(ModelKind::TreeRnn);
        let ex = Executor::new(1);
        assert!(matches!(
            train(&m, &mut p, &[], None, &TrainConfig::default(), &ex),
            Err(TrainError::EmptyCorpus)
        ));
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(train(&m, &mut p, &trees, None, &cfg, &ex), Err(TrainError::BatchSize)));
    }

    #[test]
    fn evaluate_is_thread_invariant_and_iterative_agrees() {
        let (m, p, trees) = setup(ModelKind::TreeLstm);
        let a = predict(&m, &p, &trees, &Executor::new(1)).unwrap();
        let b = predict(&m, &p, &trees, &Executor::new(8)).unwrap();
        assert_eq!(a.0, b.0);
        let it = build_iterative(&m.config, 31).unwrap();
        let c = predict(&it, &p, &trees, &Executor::new(2)).unwrap();
        assert_eq!(a.0, c.0);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            Metrics {
                epoch: 1,
                wall_time_s: 0.125,
                instances_per_s: 1234.5,
                loss_mean: 0.512_345_678_9,
                accuracy: 0.5,
            },
            Metrics {
                epoch: 2,
                wall_time_s: 0.3,
                instances_per_s: 1e-3,
                loss_mean: 1.0 / 3.0,
                accuracy: 0.75,
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,wall_time_s,instances_per_s,loss,accuracy\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    #[test]
    fn grad_check_passes_and_detects_corruption() {
        let ok = grad_check(ModelKind::TreeRnn, 3, 1e-4, 1).unwrap();
        assert!(ok.passed(), "{ok}");
        let m = build_recursive(&grad_check_config(ModelKind::TreeRnn)).unwrap();
        let bad = grad_check_with(&corrupt_tanh_derivative(&m), 3, 1e-4, 1).unwrap();
        assert!(!bad.passed());
        assert!(bad.rows.iter().any(|r| r.param == "W" && r.failures > 0));
        let empty = grad_check(ModelKind::Rntn, 0, 1e-4, 1).unwrap();
        assert!(empty.passed() && empty.rows.is_empty());
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        let cfg = ModelConfig::new(ModelKind::TreeRnn, 8, 10, 2);
        let m = build_recursive(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = ModelParams::init(&cfg, &mut rng);
        let trees = synthetic_corpus(TreeShape::Balanced, 4, 500, 10, 2, &mut rng).unwrap();
        let acc = evaluate(&m, &p, &trees, &Executor::new(2)).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }
}
