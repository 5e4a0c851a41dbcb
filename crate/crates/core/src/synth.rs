//! Synthetic multi-task regression where tasks share one low-rank map and
//! differ only by the angle of an in-plane rotation.
//!
//! Task `t` maps `x ↦ W0·x + B*·R(φ_t)·A*·x`, with `R(φ_t)` turning the plane
//! `span(A*·x, q*)`. Inputs end with a one-hot task indicator so the gates
//! can tell tasks apart. A scaling-only router over one shared expert can
//! modulate the magnitude of its output but not its direction, so opposite
//! angles leave it with a loss floor.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterLayer, GateMode, LoraExpert, Params, RouterParams};
use crate::error::{Error, Result};
use crate::numkit::{kaiming_uniform, Matrix, Rng, Vector};
use crate::rotation::{apply_rotation, build_plane, DEFAULT_EPS};
use crate::scalar::Scalar;

/// Offset mixed into the data seed for the floor estimator's own stream.
const FLOOR_STREAM: u64 = 0x5EED_F100;

fn default_delta_scale() -> f64 {
    80.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub d: usize,
    pub r: usize,
    pub n_task: usize,
    pub noise_std: f64,
    pub samples_per_task_per_batch: usize,
    /// Gap between adjacent task angles, radians.
    pub phi_separation: f64,
    pub seed: u64,
    /// Gain on the shared low-rank delta. Its column space has norm
    /// `delta_scale * sqrt(d / r)` per direction.
    #[serde(default = "default_delta_scale")]
    pub delta_scale: f64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_task == 0 {
            return Err(Error::config("n_task must be positive"));
        }
        if self.d <= self.n_task {
            return Err(Error::config(format!("d ({}) must exceed n_task ({})", self.d, self.n_task)));
        }
        if self.r < 2 {
            return Err(Error::config("r must be >= 2"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be non-negative"));
        }
        if self.samples_per_task_per_batch == 0 {
            return Err(Error::config("samples_per_task_per_batch must be positive"));
        }
        if self.phi_separation.is_nan() || self.phi_separation < 0.0 || self.delta_scale.is_nan() || self.delta_scale <= 0.0 {
            return Err(Error::config("phi_separation must be >= 0 and delta_scale > 0"));
        }
        if self.n_task as f64 * self.phi_separation > std::f64::consts::TAU {
            return Err(Error::config(format!(
                "{} tasks cannot be spaced {} rad apart within one turn",
                self.n_task, self.phi_separation
            )));
        }
        Ok(())
    }

    /// Number of leading Gaussian features; the rest is the task indicator.
    pub fn feature_dim(&self) -> usize {
        self.d - self.n_task
    }

    pub fn batch_size(&self) -> usize {
        self.samples_per_task_per_batch * self.n_task
    }

    /// Task angles laid out symmetrically about zero, one separation apart.
    pub fn task_angles(&self) -> Vec<f64> {
        let mid = (self.n_task as f64 - 1.0) / 2.0;
        (0..self.n_task).map(|t| (t as f64 - mid) * self.phi_separation).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Target rotation angle in `(-π, π)`.
    pub phi: f64,
}

/// Generating parameters shared by all tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TaskSet<S> {
    /// Frozen base map, d×d.
    pub base: Matrix<S>,
    /// r×d; zero on the task-indicator columns.
    pub a_star: Matrix<S>,
    /// d×r
    pub b_star: Matrix<S>,
    /// Plane anchor.
    pub q_star: Vector<S>,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Sample<S> {
    pub task_id: usize,
    pub x: Vector<S>,
    pub y: Vector<S>,
}

/// `count` orthonormal vectors of length `dim`, by modified Gram-Schmidt on
/// Gaussian draws.
fn orthonormal_gaussian<S: Scalar>(count: usize, dim: usize, rng: &mut Rng) -> Result<Vec<Vector<S>>> {
    if count > dim {
        return Err(Error::config(format!("cannot fit {count} orthonormal vectors in dimension {dim}")));
    }
    let mut basis: Vec<Vector<S>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = Vector::from_vec((0..dim).map(|_| S::of(rng.normal())).collect());
        for b in &basis {
            let c = v.dot(b);
            v.axpy(-c, b);
        }
        let norm = v.l2_norm();
        if norm > S::of(1e-6) {
            basis.push(v.scaled(S::one() / norm));
        }
    }
    Ok(basis)
}

pub fn make_rotation_separable_tasks<S: Scalar>(cfg: &DatasetConfig, rng: &mut Rng) -> Result<TaskSet<S>> {
    cfg.validate()?;
    let (d, r, f) = (cfg.d, cfg.r, cfg.feature_dim());
    let base = kaiming_uniform(d, d, rng);
    // Orthonormal rows for A* and orthogonal columns for B*, so every
    // direction of the low-rank map has the same gain.
    let a_rows = orthonormal_gaussian(r, f, rng)?;
    let mut a_star = Matrix::zeros(r, d);
    for (i, row) in a_rows.iter().enumerate() {
        for j in 0..f {
            a_star[(i, j)] = row[j];
        }
    }
    let b_cols = orthonormal_gaussian(r, d, rng)?;
    let b_gain = S::of(cfg.delta_scale * (d as f64 / r as f64).sqrt());
    let mut b_star = Matrix::zeros(d, r);
    for (j, col) in b_cols.iter().enumerate() {
        for i in 0..d {
            b_star[(i, j)] = b_gain * col[i];
        }
    }
    let q_star = Vector::from_vec((0..r).map(|_| S::of(rng.normal())).collect());
    let tasks = cfg
        .task_angles()
        .into_iter()
        .enumerate()
        .map(|(task_id, phi)| TaskSpec { task_id, phi })
        .collect();
    Ok(TaskSet { base, a_star, b_star, q_star, tasks })
}

impl<S: Scalar> TaskSet<S> {
    pub fn n_task(&self) -> usize {
        self.tasks.len()
    }

    pub fn d(&self) -> usize {
        self.base.rows()
    }

    /// Noiseless target of task `task` at `x`.
    pub fn target(&self, task: usize, x: &Vector<S>) -> Result<Vector<S>> {
        let u = self.a_star.matvec(x)?;
        let plane = build_plane(&u, &self.q_star, S::of(DEFAULT_EPS))?;
        let rotated = apply_rotation(&u, &plane, S::of(self.tasks[task].phi));
        Ok(self.base.matvec(x)?.add(&self.b_star.matvec(&rotated)?))
    }

    /// Input for task `task`: Gaussian features then the one-hot indicator.
    pub fn draw_input(&self, task: usize, rng: &mut Rng) -> Vector<S> {
        let d = self.d();
        let f = d - self.n_task();
        let mut x = Vector::zeros(d);
        for j in 0..f {
            x[j] = S::of(rng.normal());
        }
        x[f + task] = S::one();
        x
    }

    pub fn draw_sample(&self, task: usize, noise_std: f64, rng: &mut Rng) -> Result<Sample<S>> {
        let x = self.draw_input(task, rng);
        let mut y = self.target(task, &x)?;
        if noise_std > 0.0 {
            for v in y.as_mut_slice() {
                *v += S::of(noise_std * rng.normal());
            }
        }
        Ok(Sample { task_id: task, x, y })
    }

    /// Rotmole layer with one expert set to the generating parameters and a
    /// rotation gate that reads the task indicator; reproduces every task's
    /// noiseless target.
    pub fn generating_layer(&self) -> Result<AdapterLayer<S>> {
        let (d, r) = (self.d(), self.a_star.rows());
        let f = d - self.n_task();
        let config = AdapterConfig::new(d, r, 1, 1, GateMode::Rotmole);
        let mut w_theta = Matrix::zeros(d, 1);
        for t in &self.tasks {
            // inverse of θ = 2π·sigmoid(t) − π
            let p = (t.phi + std::f64::consts::PI) / std::f64::consts::TAU;
            w_theta[(f + t.task_id, 0)] = S::of((p / (1.0 - p)).ln());
        }
        let router = RouterParams {
            w_g: Some(Matrix::zeros(d, 1)),
            w_theta: Some(w_theta),
            q: if r > 2 { vec![self.q_star.clone()] } else { Vec::new() },
            mlp_w1: None,
            mlp_w2: None,
        };
        let layer = AdapterLayer {
            config,
            w0: self.base.clone(),
            params: Params {
                experts: vec![LoraExpert { a: self.a_star.clone(), b: self.b_star.clone() }],
                router,
            },
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// Balanced batch: `samples_per_task_per_batch` samples of every task,
/// interleaved round-robin.
pub fn sample_batch<S: Scalar>(tasks: &TaskSet<S>, cfg: &DatasetConfig, rng: &mut Rng) -> Result<Vec<Sample<S>>> {
    if tasks.tasks.is_empty() {
        return Err(Error::config("no tasks to sample from"));
    }
    let mut batch = Vec::with_capacity(cfg.samples_per_task_per_batch * tasks.n_task());
    for _ in 0..cfg.samples_per_task_per_batch {
        for t in 0..tasks.n_task() {
            batch.push(tasks.draw_sample(t, cfg.noise_std, rng)?);
        }
    }
    Ok(batch)
}

/// Monte-Carlo estimate of the smallest per-component mean squared error
/// reachable by `g_t · B*·R(θ̂)·A*·x`: one shared angle `θ̂` for all tasks
/// and a non-negative scale `g_t` per task. Both are grid searched (0.01 rad
/// over `[-π, π]`, 0.01 over `[0, 4]`) on `n_mc` fresh inputs per task; the
/// noise variance is added analytically.
pub fn analytic_baseline_floor<S: Scalar>(tasks: &TaskSet<S>, cfg: &DatasetConfig, n_mc: usize) -> Result<f64> {
    if n_mc < 10_000 {
        return Err(Error::config(format!("n_mc must be at least 10000, got {n_mc}")));
    }
    let mut rng = Rng::new(cfg.seed.wrapping_add(FLOOR_STREAM));
    let d = tasks.d();
    let eps = S::of(DEFAULT_EPS);

    // Second moments of (P, Q) = (B*·u, ‖u‖·B*·e2) per task, so that the
    // candidate cosθ̂·P + sinθ̂·Q and target cosφ·P + sinφ·Q are both linear
    // in them.
    let mut moments = Vec::with_capacity(tasks.n_task());
    for t in 0..tasks.n_task() {
        let mut m = [[0.0f64; 2]; 2];
        for _ in 0..n_mc {
            let x = tasks.draw_input(t, &mut rng);
            let u = tasks.a_star.matvec(&x)?;
            let plane = build_plane(&u, &tasks.q_star, eps)?;
            let p = tasks.b_star.matvec(&u)?;
            let q = if plane.degenerate {
                Vector::zeros(d)
            } else {
                tasks.b_star.matvec(&plane.e2)?.scaled(plane.u_norm)
            };
            let (pp, pq, qq) = (p.dot(&p).as_f64(), p.dot(&q).as_f64(), q.dot(&q).as_f64());
            m[0][0] += pp;
            m[0][1] += pq;
            m[1][1] += qq;
        }
        m[0][0] /= n_mc as f64;
        m[0][1] /= n_mc as f64;
        m[1][1] /= n_mc as f64;
        m[1][0] = m[0][1];
        moments.push(m);
    }

    let quad = |m: &[[f64; 2]; 2], a: (f64, f64), b: (f64, f64)| {
        a.0 * (m[0][0] * b.0 + m[0][1] * b.1) + a.1 * (m[1][0] * b.0 + m[1][1] * b.1)
    };
    let scales: Vec<f64> = (0..=400).map(|i| i as f64 / 100.0).collect();
    let mut best = f64::INFINITY;
    for j in -314..=314 {
        let th = j as f64 / 100.0;
        let a = (th.cos(), th.sin());
        let mut total = 0.0;
        for (m, spec) in moments.iter().zip(&tasks.tasks) {
            let b = (spec.phi.cos(), spec.phi.sin());
            let (aa, ab, bb) = (quad(m, a, a), quad(m, a, b), quad(m, b, b));
            let err = scales
                .iter()
                .map(|&g| g * g * aa - 2.0 * g * ab + bb)
                .fold(f64::INFINITY, f64::min);
            total += err.max(0.0);
        }
        best = best.min(total / tasks.n_task() as f64);
    }
    Ok(best / d as f64 + cfg.noise_std * cfg.noise_std)
}

/// One JSON object `{task_id, x, y}` per line.
pub fn write_jsonl<S: Scalar, W: Write>(samples: &[Sample<S>], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
