//! Plain SGD with a linear learning-rate decay, balanced batches, periodic
//! per-task evaluation, and rotation-angle logging for one probed expert.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterLayer;
use crate::autograd::backward;
use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::scalar::Scalar;
use crate::synth::{sample_batch, DatasetConfig, Sample, TaskSet};

fn default_lr0() -> f64 {
    3e-4
}

fn default_eval_samples() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    pub steps: usize,
    /// Seed of the adapter initialization.
    pub seed: u64,
    pub eval_every: usize,
    pub theta_log_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples_per_task: usize,
    /// Expert whose rotation angle is logged.
    #[serde(default)]
    pub probe_expert: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::config("lr0 must be finite and non-negative"));
        }
        if self.eval_every == 0 || self.theta_log_every == 0 {
            return Err(Error::config("eval_every and theta_log_every must be positive"));
        }
        if self.eval_samples_per_task == 0 {
            return Err(Error::config("eval_samples_per_task must be positive"));
        }
        Ok(())
    }
}

/// `lr0 · (1 − step/steps)`
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.steps == 0 {
        return 0.0;
    }
    cfg.lr0 * (1.0 - step as f64 / cfg.steps as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean squared error over the whole evaluation set.
    pub loss: f64,
    pub task_mse: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub step: usize,
    pub task_id: usize,
    pub expert_index: usize,
    pub theta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub layer: AdapterLayer<S>,
    pub metrics: Vec<MetricRecord>,
    pub thetas: Vec<ThetaRecord>,
}

impl<S> TrainOutcome<S> {
    pub fn final_metrics(&self) -> &MetricRecord {
        self.metrics.last().expect("train always records a final evaluation")
    }
}

/// Mean squared error per task, averaged over output components and samples.
pub fn evaluate<S: Scalar>(layer: &AdapterLayer<S>, samples: &[Sample<S>]) -> Result<BTreeMap<usize, f64>> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let (y, _) = layer.forward(&s.x)?;
        let r = y.sub(&s.y);
        let e = sums.entry(s.task_id).or_insert((0.0, 0));
        e.0 += r.dot(&r).as_f64() / r.dim() as f64;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(t, (sum, n))| (t, sum / n as f64)).collect())
}

/// One SGD update on `batch`: gradient of the batch-mean squared error,
/// then `params -= lr · grad`. Returns the batch loss before the update.
pub fn sgd_step<S: Scalar>(layer: &mut AdapterLayer<S>, batch: &[Sample<S>], lr: f64) -> Result<f64> {
    let d = layer.config.d;
    let mut grads = layer.params.zeros_like();
    let mut loss = 0.0;
    let norm = S::of(2.0 / (d * batch.len()) as f64);
    for s in batch {
        let (y, cache) = layer.forward(&s.x)?;
        let r = y.sub(&s.y);
        loss += r.dot(&r).as_f64() / (d * batch.len()) as f64;
        let g = backward(layer, &cache, &r.scaled(norm))?;
        grads.axpy(S::one(), &g);
    }
    if !loss.is_finite() {
        return Ok(loss);
    }
    layer.params.axpy(S::of(-lr), &grads);
    Ok(loss)
}

fn log_thetas<S: Scalar>(
    layer: &AdapterLayer<S>,
    probe: &[Sample<S>],
    step: usize,
    expert: usize,
    out: &mut Vec<ThetaRecord>,
) -> Result<()> {
    for s in probe {
        let theta = layer.rotation_angles(&s.x)?[expert].as_f64();
        out.push(ThetaRecord { step, task_id: s.task_id, expert_index: expert, theta });
    }
    Ok(())
}

fn eval_record<S: Scalar>(layer: &AdapterLayer<S>, eval: &[Sample<S>], step: usize, lr: f64) -> Result<MetricRecord> {
    let task_mse = evaluate(layer, eval)?;
    let loss = task_mse.values().sum::<f64>() / task_mse.len() as f64;
    Ok(MetricRecord { step, lr, loss, task_mse })
}

/// Trains `layer` on batches drawn from `tasks`. Batches and the held-out
/// evaluation set come from streams forked off `data.seed`; the evaluation
/// set doubles as the probe set for angle logging. A final evaluation and
/// angle snapshot are taken at `step == steps`.
pub fn train<S: Scalar>(
    mut layer: AdapterLayer<S>,
    tasks: &TaskSet<S>,
    data: &DatasetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    data.validate()?;
    if layer.config.d != data.d || tasks.d() != data.d {
        return Err(Error::shape("train", data.d, layer.config.d));
    }
    if cfg.probe_expert >= layer.config.n {
        return Err(Error::config(format!("probe_expert {} out of range for n = {}", cfg.probe_expert, layer.config.n)));
    }
    let mut rng = Rng::new(data.seed);
    let mut eval_rng = rng.fork();
    let mut batch_rng = rng.fork();
    let mut eval = Vec::with_capacity(cfg.eval_samples_per_task * tasks.n_task());
    for _ in 0..cfg.eval_samples_per_task {
        for t in 0..tasks.n_task() {
            eval.push(tasks.draw_sample(t, data.noise_std, &mut eval_rng)?);
        }
    }

    let mut metrics = Vec::new();
    let mut thetas = Vec::new();
    for step in 0..cfg.steps {
        let lr = lr_schedule(step, cfg);
        if step % cfg.theta_log_every == 0 {
            log_thetas(&layer, &eval, step, cfg.probe_expert, &mut thetas)?;
        }
        if step % cfg.eval_every == 0 {
            metrics.push(eval_record(&layer, &eval, step, lr)?);
        }
        let batch = sample_batch(tasks, data, &mut batch_rng)?;
        let loss = sgd_step(&mut layer, &batch, lr)?;
        if !loss.is_finite() || !layer.params.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("batch loss {loss}") });
        }
    }
    log_thetas(&layer, &eval, cfg.steps, cfg.probe_expert, &mut thetas)?;
    metrics.push(eval_record(&layer, &eval, cfg.steps, lr_schedule(cfg.steps, cfg))?);
    Ok(TrainOutcome { layer, metrics, thetas })
}

/// Writes an optional header object followed by one JSON record per line.
pub fn write_jsonl<T: Serialize, W: Write>(header: Option<&serde_json::Value>, records: &[T], mut out: W) -> Result<()> {
    if let Some(h) = header {
        serde_json::to_writer(&mut out, &serde_json::json!({ "header": h }))?;
        out.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
