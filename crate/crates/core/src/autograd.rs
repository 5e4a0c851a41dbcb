//! Hand-derived reverse-mode gradients of [`AdapterLayer::forward`] and a
//! central-difference oracle to certify them.
//!
//! Top-k selection is treated as a hard, non-differentiable choice: gradients
//! reach the gate only through the renormalized softmax of the selected
//! logits. A degenerate rotation plane acts as the identity and passes no
//! gradient to `q` or the rotation gate.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterLayer, ForwardCache, GateMode, Gradients, ParamGroup};
use crate::error::{Error, Result};
use crate::numkit::{sigmoid, Rng, Vector};
use crate::rotation::{rotation_matrix_2d, rotation_matrix_2d_derivative, RotationPlane};
use crate::scalar::Scalar;

/// Gradient of `R·u = cosθ·u + sinθ·‖u‖·e2` through the angle, the plane
/// construction, `u` and `q`. Returns `(du, dθ, dq)`.
fn rotation_backward<S: Scalar>(
    u: &Vector<S>,
    q: &Vector<S>,
    plane: &RotationPlane<S>,
    theta: S,
    d_rot: &Vector<S>,
) -> (Vector<S>, S, Vector<S>) {
    let (s, c) = theta.sin_cos();
    let (e1, e2) = (&plane.e1, &plane.e2);
    let norm = plane.u_norm;

    let mut d_angle_dir = u.scaled(-s);
    d_angle_dir.axpy(c * norm, e2);
    let d_theta = d_rot.dot(&d_angle_dir);

    let mut du = d_rot.scaled(c);
    let d_norm = s * d_rot.dot(e2);
    let d_e2 = d_rot.scaled(s * norm);

    // e2 = e2*/‖e2*‖
    let mut d_resid = d_e2.clone();
    d_resid.axpy(-d_e2.dot(e2), e2);
    let d_resid = d_resid.scaled(S::one() / plane.residual_norm);

    // e2* = q − (q·e1)e1
    let mut dq = d_resid.clone();
    dq.axpy(-e1.dot(&d_resid), e1);
    let mut d_e1 = d_resid.scaled(-q.dot(e1));
    d_e1.axpy(-e1.dot(&d_resid), q);

    // ‖u‖ and e1 = u/‖u‖
    du.axpy(d_norm, e1);
    let mut d_e1_perp = d_e1.clone();
    d_e1_perp.axpy(-d_e1.dot(e1), e1);
    du.axpy(S::one() / norm, &d_e1_perp);

    (du, d_theta, dq)
}

/// Reverse-mode pass: gradient of `dL_dy · y` with respect to every
/// trainable parameter. `W0` is frozen and has no entry.
pub fn backward<S: Scalar>(layer: &AdapterLayer<S>, cache: &ForwardCache<S>, dl_dy: &Vector<S>) -> Result<Gradients<S>> {
    let cfg = &layer.config;
    if cache.config != *cfg {
        return Err(Error::config("forward cache was produced by a differently configured layer"));
    }
    if dl_dy.dim() != cfg.d || cache.x.dim() != cfg.d {
        return Err(Error::shape("backward", cfg.d, dl_dy.dim()));
    }
    let x = &cache.x;
    let routing = &cache.routing;
    let mut grads = layer.params.zeros_like();
    let mut d_gate = vec![S::zero(); routing.selected.len()];
    let two_pi = S::PI() + S::PI();

    for (slot, ec) in cache.experts.iter().enumerate() {
        let i = ec.index;
        let g = routing.g[slot];
        d_gate[slot] = dl_dy.dot(&ec.out);

        let d_out = dl_dy.scaled(g);
        grads.experts[i].b.add_outer(S::one(), &d_out, &ec.rotated);
        let d_rot = layer.params.experts[i].b.matvec_t(&d_out)?;

        let theta = routing.theta[slot];
        let (du, d_theta) = match (cfg.mode, &ec.plane) {
            (GateMode::Rotmole, None) => {
                let du = rotation_matrix_2d(theta).matvec_t(&d_rot)?;
                let d_theta = d_rot.dot(&rotation_matrix_2d_derivative(theta).matvec(&ec.u)?);
                (du, d_theta)
            }
            (GateMode::Rotmole, Some(plane)) if !plane.degenerate => {
                let q = &layer.params.router.q[i];
                let (du, d_theta, dq) = rotation_backward(&ec.u, q, plane, theta, &d_rot);
                grads.router.q[i].axpy(S::one(), &dq);
                (du, d_theta)
            }
            _ => (d_rot, S::zero()),
        };
        grads.experts[i].a.add_outer(S::one(), &du, x);

        if let Some(dw) = grads.router.w_theta.as_mut() {
            let sg = sigmoid(cache.theta_logits[slot]);
            let d_logit = d_theta * two_pi * sg * (S::one() - sg);
            dw.add_to_column(i, d_logit, x);
        }
    }

    // g_s = softmax over the selected logits, so dz_s = g_s (dg_s − Σ g·dg).
    let mean: S = routing.g.iter().zip(&d_gate).map(|(&g, &dg)| g * dg).sum();
    let mut d_logits = Vector::zeros(cfg.n);
    for (slot, &i) in routing.selected.iter().enumerate() {
        d_logits[i] += routing.g[slot] * (d_gate[slot] - mean);
    }

    match cfg.mode {
        GateMode::ScalingOnly | GateMode::Rotmole => {
            let dw = grads.router.w_g.as_mut().expect("linear gate");
            for &i in &routing.selected {
                dw.add_to_column(i, d_logits[i], x);
            }
        }
        GateMode::MlpGate => {
            let pre = cache.mlp_pre.as_ref().expect("mlp cache");
            let hidden = Vector::from_vec(pre.iter().map(|&a| a.max(S::zero())).collect());
            let w2 = layer.params.router.mlp_w2.as_ref().expect("mlp gate");
            grads.router.mlp_w2.as_mut().expect("mlp gate").add_outer(S::one(), &hidden, &d_logits);
            let d_hidden = w2.matvec(&d_logits)?;
            let d_pre =
                Vector::from_vec(pre.iter().zip(d_hidden.iter()).map(|(&a, &dh)| if a > S::zero() { dh } else { S::zero() }).collect());
            grads.router.mlp_w1.as_mut().expect("mlp gate").add_outer(S::one(), x, &d_pre);
        }
    }
    Ok(grads)
}

/// Central differences of `loss` with respect to every trainable scalar of
/// `layer`, one coordinate at a time.
pub fn finite_diff_grad<S, F>(loss: F, layer: &AdapterLayer<S>, h: S) -> Gradients<S>
where
    S: Scalar,
    F: Fn(&AdapterLayer<S>) -> S,
{
    let mut work = layer.clone();
    let mut grads = layer.params.zeros_like();
    let lens: Vec<usize> = layer.params.segments().iter().map(|(_, s)| s.len()).collect();
    let two_h = h + h;
    for (si, &len) in lens.iter().enumerate() {
        for j in 0..len {
            let orig = work.params.segments()[si].1[j];
            work.params.segments_mut()[si].1[j] = orig + h;
            let plus = loss(&work);
            work.params.segments_mut()[si].1[j] = orig - h;
            let minus = loss(&work);
            work.params.segments_mut()[si].1[j] = orig;
            grads.segments_mut()[si].1[j] = (plus - minus) / two_h;
        }
    }
    grads
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Per-group comparison of two gradient sets with identical layout.
pub fn compare_gradients<S: Scalar>(analytic: &Gradients<S>, numeric: &Gradients<S>, tol: f64) -> CheckReport {
    let mut groups: Vec<GroupReport> = Vec::new();
    for ((group, a), (_, b)) in analytic.segments().into_iter().zip(numeric.segments()) {
        let err = a.iter().zip(b).map(|(&x, &y)| relative_error(x.as_f64(), y.as_f64())).fold(0.0, f64::max);
        match groups.last_mut() {
            Some(last) if last.name == group.name() => {
                last.max_rel_err = last.max_rel_err.max(err);
                last.n_params += a.len();
            }
            _ => groups.push(GroupReport { name: group.name().to_string(), max_rel_err: err, n_params: a.len() }),
        }
    }
    let pass = groups.iter().all(|g| g.max_rel_err < tol);
    CheckReport { groups, pass }
}

/// True when a selected expert's plane is within `margin·eps` of degeneracy,
/// where the forward map switches branches.
pub fn near_degenerate<S: Scalar>(cache: &ForwardCache<S>, margin: f64) -> bool {
    let limit = S::of(margin * cache.config.eps_degenerate);
    cache
        .experts
        .iter()
        .filter_map(|e| e.plane.as_ref())
        .any(|p| p.u_norm <= limit || p.residual_norm <= limit)
}

/// True when an MLP gate pre-activation lies within `margin` of the ReLU kink.
pub fn near_relu_kink<S: Scalar>(cache: &ForwardCache<S>, margin: S) -> bool {
    cache.mlp_pre.as_ref().is_some_and(|z| z.iter().any(|v| v.abs() <= margin))
}

/// Checks `backward` against central differences on the squared error
/// `‖y − target‖²` at input `x`, with the expert selection frozen.
pub fn grad_check<S: Scalar>(layer: &AdapterLayer<S>, x: &Vector<S>, target: &Vector<S>, h: S, tol: f64) -> Result<CheckReport> {
    if target.dim() != layer.config.d {
        return Err(Error::shape("grad_check target", layer.config.d, target.dim()));
    }
    let (y, cache) = layer.forward(x)?;
    if near_degenerate(&cache, 10.0) {
        return Err(Error::Degenerate("input lies on a rotation-plane degeneracy boundary".into()));
    }
    if near_relu_kink(&cache, S::of(10.0) * h * x.max_abs()) {
        return Err(Error::Degenerate("an MLP gate pre-activation sits within the difference step of zero".into()));
    }
    let residual = y.sub(target);
    let analytic = backward(layer, &cache, &residual.scaled(S::of(2.0)))?;
    let selected = cache.routing.selected.clone();
    let loss = |l: &AdapterLayer<S>| -> S {
        let (y, _) = l.forward_with_selection(x, &selected).expect("validated shapes");
        let r = y.sub(target);
        r.dot(&r)
    };
    let numeric = finite_diff_grad(loss, layer, h);
    Ok(compare_gradients(&analytic, &numeric, tol))
}

/// Fills every trainable tensor with uniform draws on `[-scale, scale]`, so
/// that gradient checks do not sit at the zero-`B` initialization.
pub fn randomize_params<S: Scalar>(layer: &mut AdapterLayer<S>, scale: f64, rng: &mut Rng) {
    for (_, seg) in layer.params.segments_mut() {
        for v in seg.iter_mut() {
            *v = S::of(rng.uniform(-scale, scale));
        }
    }
}

/// Uniform draws with variance `1/fan_in` for each tensor (fan-in is the
/// length of the vector the tensor multiplies), so activations stay O(1)
/// whatever the layer size. Centers `q` are drawn on `[-1, 1]`.
pub fn randomize_params_fan_in<S: Scalar>(layer: &mut AdapterLayer<S>, rng: &mut Rng) {
    let cfg = &layer.config;
    let hidden = cfg.mlp_hidden.unwrap_or(1);
    let bound = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
    let (d, r) = (cfg.d, cfg.r);
    for (group, seg) in layer.params.segments_mut() {
        let b = match group {
            ParamGroup::A | ParamGroup::Gate | ParamGroup::RotationGate | ParamGroup::MlpHidden => bound(d),
            ParamGroup::B => bound(r),
            ParamGroup::MlpOut => bound(hidden),
            ParamGroup::Centers => 1.0,
        };
        for v in seg.iter_mut() {
            *v = S::of(rng.uniform(-b, b));
        }
    }
}

/// `±U(0.5, 1.5)` per component.
fn away_from_zero<S: Scalar>(d: usize, rng: &mut Rng) -> Vector<S> {
    Vector::from_vec(
        (0..d)
            .map(|_| {
                let m = rng.uniform(0.5, 1.5);
                S::of(if rng.next_f64() < 0.5 { -m } else { m })
            })
            .collect(),
    )
}

/// Random layer, input and target for `config`, then [`grad_check`].
///
/// Input components and residual components `y − target` are kept away
/// from zero: a near-zero component zeroes a whole row or column of the true
/// gradient, where central differences only resolve rounding noise. Inputs
/// near a plane degeneracy are redrawn.
pub fn grad_check_random<S: Scalar>(
    config: &crate::adapter::AdapterConfig,
    rng: &mut Rng,
    h: S,
    tol: f64,
) -> Result<CheckReport> {
    let mut layer = AdapterLayer::init(config, rng)?;
    randomize_params_fan_in(&mut layer, rng);
    let d = config.d;
    for _ in 0..100 {
        let x = away_from_zero::<S>(d, rng);
        let (y, _) = layer.forward(&x)?;
        let target = y.sub(&away_from_zero(d, rng));
        match grad_check(&layer, &x, &target, h, tol) {
            Err(Error::Degenerate(_)) => continue,
            other => return other,
        }
    }
    Err(Error::Degenerate("could not draw an input away from plane degeneracy".into()))
}
