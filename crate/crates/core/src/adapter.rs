//! Mixture of low-rank experts with a scaling gate and, in `rotmole` mode, a
//! rotation gate plus per-expert center vectors:
//!
//! `y = W0·x + Σ_{i ∈ TopK} g_i · B_i · R_i(x) · A_i · x`
//!
//! `g` is the softmax of the gate logits renormalized over the selected
//! experts and `θ_i = 2π·sigmoid((x·W_θ)_i) − π`. For rank 2 the rotation is
//! the plain 2×2 matrix; for larger ranks it turns the plane
//! `span(A_i·x, q_i)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{kaiming_uniform, sigmoid, softmax, Matrix, Rng, Vector};
use crate::rotation::{apply_rotation, build_plane, rotation_matrix_2d, RotationPlane, DEFAULT_EPS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Conventional MoE-LoRA: linear softmax gate only.
    ScalingOnly,
    /// Scaling gate plus rotation gate.
    Rotmole,
    /// Two-layer ReLU MLP as the scaling gate, sized to match `Rotmole`.
    MlpGate,
}

impl GateMode {
    pub const ALL: [GateMode; 3] = [GateMode::ScalingOnly, GateMode::MlpGate, GateMode::Rotmole];

    pub fn name(self) -> &'static str {
        match self {
            GateMode::ScalingOnly => "scaling_only",
            GateMode::Rotmole => "rotmole",
            GateMode::MlpGate => "mlp_gate",
        }
    }
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Hidden dimension.
    pub d: usize,
    /// Expert rank.
    pub r: usize,
    /// Number of experts.
    pub n: usize,
    /// Experts activated per input.
    pub k: usize,
    pub mode: GateMode,
    #[serde(default = "default_eps")]
    pub eps_degenerate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_hidden: Option<usize>,
}

impl AdapterConfig {
    pub fn new(d: usize, r: usize, n: usize, k: usize, mode: GateMode) -> Self {
        AdapterConfig { d, r, n, k, mode, eps_degenerate: DEFAULT_EPS, mlp_hidden: None }
    }

    /// Same shape in another mode; `mlp_gate` gets the size-matched hidden width.
    pub fn with_mode(&self, mode: GateMode) -> Self {
        let mut cfg = self.clone();
        cfg.mode = mode;
        cfg.mlp_hidden = match mode {
            GateMode::MlpGate => Some(self.mlp_hidden.unwrap_or_else(|| mlp_hidden_dim(self))),
            _ => None,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("d must be positive"));
        }
        if self.r < 2 {
            return Err(Error::config(format!("r must be >= 2, got {}", self.r)));
        }
        if self.n == 0 {
            return Err(Error::config("n must be positive"));
        }
        if self.k == 0 || self.k > self.n {
            return Err(Error::config(format!("k must lie in 1..={}, got {}", self.n, self.k)));
        }
        if self.eps_degenerate.is_nan() || self.eps_degenerate <= 0.0 {
            return Err(Error::config("eps_degenerate must be positive"));
        }
        match (self.mode, self.mlp_hidden) {
            (GateMode::MlpGate, None) | (GateMode::MlpGate, Some(0)) => {
                Err(Error::config("mlp_gate mode needs a positive mlp_hidden"))
            }
            _ => Ok(()),
        }
    }

    /// Rotation is applied through `q`-anchored planes only for rank > 2.
    pub fn has_centers(&self) -> bool {
        self.mode == GateMode::Rotmole && self.r > 2
    }
}

/// Trainable routing parameters implied by the configuration.
///
/// scaling_only: `dn`; rotmole: `2dn` at rank 2 and `2dn + rn` above;
/// mlp_gate: `dH + Hn`.
pub fn count_trainable_routing_params(config: &AdapterConfig) -> usize {
    let (d, r, n) = (config.d, config.r, config.n);
    match config.mode {
        GateMode::ScalingOnly => d * n,
        GateMode::Rotmole if r == 2 => 2 * d * n,
        GateMode::Rotmole => 2 * d * n + r * n,
        GateMode::MlpGate => {
            let h = config.mlp_hidden.unwrap_or_else(|| mlp_hidden_dim(config));
            d * h + h * n
        }
    }
}

/// Hidden width `H = round((2dn + rn) / (d + n))` giving an MLP gate about as
/// large as the rotmole router.
pub fn mlp_hidden_dim(config: &AdapterConfig) -> usize {
    let (d, r, n) = (config.d as f64, config.r as f64, config.n as f64);
    (((2.0 * d * n + r * n) / (d + n)).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct LoraExpert<S> {
    /// r×d down projection.
    pub a: Matrix<S>,
    /// d×r up projection.
    pub b: Matrix<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RouterParams<S> {
    /// d×n scaling gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_g: Option<Matrix<S>>,
    /// d×n rotation gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_theta: Option<Matrix<S>>,
    /// Rotation plane anchors, one r-vector per expert.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub q: Vec<Vector<S>>,
    /// d×H hidden layer of the MLP gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_w1: Option<Matrix<S>>,
    /// H×n output layer of the MLP gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_w2: Option<Matrix<S>>,
}

/// Names of the trainable tensors, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    A,
    B,
    #[serde(rename = "W_g")]
    Gate,
    #[serde(rename = "W_theta")]
    RotationGate,
    #[serde(rename = "q")]
    Centers,
    #[serde(rename = "mlp_W1")]
    MlpHidden,
    #[serde(rename = "mlp_W2")]
    MlpOut,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::A => "A",
            ParamGroup::B => "B",
            ParamGroup::Gate => "W_g",
            ParamGroup::RotationGate => "W_theta",
            ParamGroup::Centers => "q",
            ParamGroup::MlpHidden => "mlp_W1",
            ParamGroup::MlpOut => "mlp_W2",
        }
    }

    pub fn is_routing(self) -> bool {
        !matches!(self, ParamGroup::A | ParamGroup::B)
    }
}

/// Every trainable tensor of a layer. Also used to hold gradients, which
/// mirror the parameters shape for shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Params<S> {
    pub experts: Vec<LoraExpert<S>>,
    pub router: RouterParams<S>,
}

/// Gradient of a scalar loss with respect to [`Params`].
pub type Gradients<S> = Params<S>;

impl<S: Scalar> Params<S> {
    /// Contiguous parameter blocks in canonical order.
    pub fn segments(&self) -> Vec<(ParamGroup, &[S])> {
        let mut out: Vec<(ParamGroup, &[S])> = Vec::new();
        out.extend(self.experts.iter().map(|e| (ParamGroup::A, e.a.as_slice())));
        out.extend(self.experts.iter().map(|e| (ParamGroup::B, e.b.as_slice())));
        let r = &self.router;
        if let Some(m) = &r.w_g {
            out.push((ParamGroup::Gate, m.as_slice()));
        }
        if let Some(m) = &r.w_theta {
            out.push((ParamGroup::RotationGate, m.as_slice()));
        }
        out.extend(r.q.iter().map(|q| (ParamGroup::Centers, q.as_slice())));
        if let Some(m) = &r.mlp_w1 {
            out.push((ParamGroup::MlpHidden, m.as_slice()));
        }
        if let Some(m) = &r.mlp_w2 {
            out.push((ParamGroup::MlpOut, m.as_slice()));
        }
        out
    }

    pub fn segments_mut(&mut self) -> Vec<(ParamGroup, &mut [S])> {
        let mut out: Vec<(ParamGroup, &mut [S])> = Vec::new();
        let (experts, r) = (&mut self.experts, &mut self.router);
        let mut bs = Vec::new();
        for e in experts.iter_mut() {
            out.push((ParamGroup::A, e.a.as_mut_slice()));
            bs.push((ParamGroup::B, e.b.as_mut_slice()));
        }
        out.extend(bs);
        if let Some(m) = &mut r.w_g {
            out.push((ParamGroup::Gate, m.as_mut_slice()));
        }
        if let Some(m) = &mut r.w_theta {
            out.push((ParamGroup::RotationGate, m.as_mut_slice()));
        }
        out.extend(r.q.iter_mut().map(|q| (ParamGroup::Centers, q.as_mut_slice())));
        if let Some(m) = &mut r.mlp_w1 {
            out.push((ParamGroup::MlpHidden, m.as_mut_slice()));
        }
        if let Some(m) = &mut r.mlp_w2 {
            out.push((ParamGroup::MlpOut, m.as_mut_slice()));
        }
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut gs: Vec<ParamGroup> = self.segments().into_iter().map(|(g, _)| g).collect();
        gs.dedup();
        gs
    }

    /// Number of scalars in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.segments().into_iter().filter(|(g, _)| *g == group).map(|(_, s)| s.len()).sum()
    }

    pub fn routing_count(&self) -> usize {
        self.segments()
            .into_iter()
            .filter(|(g, _)| g.is_routing())
            .map(|(_, s)| s.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, seg) in out.segments_mut() {
            seg.iter_mut().for_each(|v| *v = S::zero());
        }
        out
    }

    /// `self += alpha · other`; shapes must match.
    pub fn axpy(&mut self, alpha: S, other: &Self) {
        let src = other.segments();
        let dst = self.segments_mut();
        assert_eq!(src.len(), dst.len(), "parameter layouts differ");
        for ((_, d), (_, s)) in dst.into_iter().zip(src) {
            assert_eq!(d.len(), s.len(), "parameter layouts differ");
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv += alpha * sv;
            }
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for (_, seg) in self.segments_mut() {
            seg.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Largest magnitude within `group`, or `None` when the group is absent.
    pub fn group_max_abs(&self, group: ParamGroup) -> Option<S> {
        let segs: Vec<&[S]> =
            self.segments().into_iter().filter(|(g, _)| *g == group).map(|(_, s)| s).collect();
        if segs.is_empty() {
            return None;
        }
        Some(segs.iter().flat_map(|s| s.iter()).fold(S::zero(), |m, &v| m.max(v.abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.segments().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

/// Outcome of the gates for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<S> {
    /// Selected experts, highest gate first.
    pub selected: Vec<usize>,
    /// Renormalized gate values of the selected experts.
    pub g: Vec<S>,
    /// Rotation angles of the selected experts in radians.
    pub theta: Vec<S>,
}

/// Per-expert intermediates recorded by [`AdapterLayer::forward`].
#[derive(Debug, Clone)]
pub struct ExpertCache<S> {
    pub index: usize,
    /// `A_i · x`
    pub u: Vector<S>,
    /// Present only for rotmole layers with rank > 2.
    pub plane: Option<RotationPlane<S>>,
    /// Rotated intermediate `R_i · u`.
    pub rotated: Vector<S>,
    /// `B_i · rotated`, before gating.
    pub out: Vector<S>,
}

/// Everything backward needs, recorded during forward.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub config: AdapterConfig,
    pub x: Vector<S>,
    /// All n scaling-gate logits.
    pub gate_logits: Vector<S>,
    /// Softmax over all n logits.
    pub probs: Vector<S>,
    /// Sum of `probs` over the selected experts.
    pub renorm_sum: S,
    /// MLP pre-activations (mlp_gate mode).
    pub mlp_pre: Option<Vector<S>>,
    pub routing: RoutingDecision<S>,
    /// Rotation-gate logits of the selected experts.
    pub theta_logits: Vec<S>,
    pub experts: Vec<ExpertCache<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AdapterLayer<S> {
    pub config: AdapterConfig,
    /// Frozen base weight, d×d.
    #[serde(rename = "W0")]
    pub w0: Matrix<S>,
    #[serde(flatten)]
    pub params: Params<S>,
}

/// `2π·sigmoid(t) − π`, kept strictly inside `(-π, π)` where the sigmoid
/// saturates in floating point.
pub fn rotation_angle<S: Scalar>(logit: S) -> S {
    let pi = S::PI();
    let bound = pi * (S::one() - S::epsilon());
    ((pi + pi) * sigmoid(logit) - pi).max(-bound).min(bound)
}

/// Indices of the `k` largest logits, largest first; ties go to the lower index.
pub fn top_k<S: Scalar>(logits: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn relu<S: Scalar>(v: &Vector<S>) -> Vector<S> {
    Vector::from_vec(v.iter().map(|&a| a.max(S::zero())).collect())
}

impl<S: Scalar> AdapterLayer<S> {
    /// Fresh layer: Kaiming-uniform `W0`, `A_i`, gate weights and centers;
    /// `B_i = 0` and `W_θ = 0`.
    pub fn init(config: &AdapterConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w0 = kaiming_uniform(config.d, config.d, rng);
        Self::init_with_base(config, w0, rng)
    }

    /// As [`init`](Self::init) but with a caller-supplied frozen base.
    pub fn init_with_base(config: &AdapterConfig, w0: Matrix<S>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, r, n) = (config.d, config.r, config.n);
        if w0.shape() != (d, d) {
            return Err(Error::shape("init_with_base", format!("({d}, {d})"), format!("{:?}", w0.shape())));
        }
        let experts = (0..n)
            .map(|_| LoraExpert { a: kaiming_uniform(r, d, rng), b: Matrix::zeros(d, r) })
            .collect();
        let mut router = RouterParams { w_g: None, w_theta: None, q: Vec::new(), mlp_w1: None, mlp_w2: None };
        match config.mode {
            GateMode::ScalingOnly => router.w_g = Some(kaiming_uniform(d, n, rng)),
            GateMode::Rotmole => {
                router.w_g = Some(kaiming_uniform(d, n, rng));
                router.w_theta = Some(Matrix::zeros(d, n));
                if config.has_centers() {
                    router.q = (0..n)
                        .map(|_| Vector::from_vec(kaiming_uniform::<S>(1, r, rng).as_slice().to_vec()))
                        .collect();
                }
            }
            GateMode::MlpGate => {
                let h = config.mlp_hidden.expect("validated");
                router.mlp_w1 = Some(kaiming_uniform(d, h, rng));
                router.mlp_w2 = Some(kaiming_uniform(h, n, rng));
            }
        }
        Ok(AdapterLayer { config: config.clone(), w0, params: Params { experts, router } })
    }

    /// Checks every tensor against the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, r, n) = (c.d, c.r, c.n);
        let expect = |name: &'static str, m: &Matrix<S>, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::shape(name, format!("{shape:?}"), format!("{:?}", m.shape())));
            }
            Ok(())
        };
        let want = |name: &'static str, m: &Option<Matrix<S>>, shape: Option<(usize, usize)>| -> Result<()> {
            match (m, shape) {
                (Some(m), Some(s)) => expect(name, m, s),
                (None, None) => Ok(()),
                (Some(_), None) => Err(Error::config(format!("{name} not used in {} mode", c.mode.name()))),
                (None, Some(_)) => Err(Error::config(format!("{name} missing for {} mode", c.mode.name()))),
            }
        };
        expect("W0", &self.w0, (d, d))?;
        if self.params.experts.len() != n {
            return Err(Error::shape("experts", n, self.params.experts.len()));
        }
        for e in &self.params.experts {
            expect("A", &e.a, (r, d))?;
            expect("B", &e.b, (d, r))?;
        }
        let rt = &self.params.router;
        let linear_gate = matches!(c.mode, GateMode::ScalingOnly | GateMode::Rotmole);
        want("W_g", &rt.w_g, linear_gate.then_some((d, n)))?;
        want("W_theta", &rt.w_theta, (c.mode == GateMode::Rotmole).then_some((d, n)))?;
        let h = c.mlp_hidden.unwrap_or(0);
        want("mlp_W1", &rt.mlp_w1, (c.mode == GateMode::MlpGate).then_some((d, h)))?;
        want("mlp_W2", &rt.mlp_w2, (c.mode == GateMode::MlpGate).then_some((h, n)))?;
        let q_expected = if c.has_centers() { n } else { 0 };
        if rt.q.len() != q_expected || rt.q.iter().any(|q| q.dim() != r) {
            return Err(Error::shape("q", format!("{q_expected} vectors of dim {r}"), rt.q.len()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Vector<S>) -> Result<()> {
        if x.dim() != self.config.d {
            return Err(Error::shape("adapter input", self.config.d, x.dim()));
        }
        Ok(())
    }

    /// Scaling-gate logits for all n experts, with the MLP pre-activation
    /// when the gate is an MLP.
    fn gate_logits(&self, x: &Vector<S>) -> Result<(Vector<S>, Option<Vector<S>>)> {
        let rt = &self.params.router;
        match self.config.mode {
            GateMode::ScalingOnly | GateMode::Rotmole => {
                Ok((rt.w_g.as_ref().expect("linear gate").matvec_t(x)?, None))
            }
            GateMode::MlpGate => {
                let pre = rt.mlp_w1.as_ref().expect("mlp gate").matvec_t(x)?;
                let logits = rt.mlp_w2.as_ref().expect("mlp gate").matvec_t(&relu(&pre))?;
                Ok((logits, Some(pre)))
            }
        }
    }

    /// Rotation-gate logit of expert `i` (zero outside rotmole mode).
    fn theta_logit(&self, x: &Vector<S>, i: usize) -> S {
        match &self.params.router.w_theta {
            Some(w) => (0..self.config.d).map(|a| x[a] * w[(a, i)]).sum(),
            None => S::zero(),
        }
    }

    /// Rotation angles of all n experts; zeros outside rotmole mode.
    pub fn rotation_angles(&self, x: &Vector<S>) -> Result<Vec<S>> {
        self.check_input(x)?;
        Ok(match &self.params.router.w_theta {
            Some(w) => w.matvec_t(x)?.iter().map(|&t| rotation_angle(t)).collect(),
            None => vec![S::zero(); self.config.n],
        })
    }

    pub fn route(&self, x: &Vector<S>) -> Result<RoutingDecision<S>> {
        Ok(self.forward_impl(x, None)?.1.routing)
    }

    pub fn forward(&self, x: &Vector<S>) -> Result<(Vector<S>, ForwardCache<S>)> {
        self.forward_impl(x, None)
    }

    /// Forward pass with the expert set fixed to `selected` instead of the
    /// top-k choice. Used to hold routing constant under finite differences.
    pub fn forward_with_selection(&self, x: &Vector<S>, selected: &[usize]) -> Result<(Vector<S>, ForwardCache<S>)> {
        if selected.is_empty() || selected.iter().any(|&i| i >= self.config.n) {
            return Err(Error::config(format!("invalid expert selection {selected:?}")));
        }
        self.forward_impl(x, Some(selected))
    }

    fn forward_impl(&self, x: &Vector<S>, fixed: Option<&[usize]>) -> Result<(Vector<S>, ForwardCache<S>)> {
        self.check_input(x)?;
        let cfg = &self.config;
        let (gate_logits, mlp_pre) = self.gate_logits(x)?;
        let probs = softmax(&gate_logits);
        let selected = match fixed {
            Some(sel) => sel.to_vec(),
            None => top_k(gate_logits.as_slice(), cfg.k),
        };
        let renorm_sum: S = selected.iter().map(|&i| probs[i]).sum();
        // Renormalized selected probabilities equal a softmax over the
        // selected logits; evaluating it that way keeps g exactly
        // independent of the unselected logits.
        let selected_logits = Vector::from_vec(selected.iter().map(|&i| gate_logits[i]).collect());
        let g = softmax(&selected_logits).into_vec();
        debug_assert!((g.iter().copied().sum::<S>() - S::one()).abs() <= S::epsilon() * S::of_usize(8 * g.len()));

        let theta_logits: Vec<S> = selected.iter().map(|&i| self.theta_logit(x, i)).collect();
        let theta: Vec<S> = match cfg.mode {
            GateMode::Rotmole => theta_logits.iter().map(|&t| rotation_angle(t)).collect(),
            _ => vec![S::zero(); selected.len()],
        };

        let eps = S::of(cfg.eps_degenerate);
        let mut y = self.w0.matvec(x)?;
        let mut experts = Vec::with_capacity(selected.len());
        for (slot, &i) in selected.iter().enumerate() {
            let expert = &self.params.experts[i];
            let u = expert.a.matvec(x)?;
            let (plane, rotated) = match cfg.mode {
                GateMode::Rotmole if cfg.r == 2 => (None, rotation_matrix_2d(theta[slot]).matvec(&u)?),
                GateMode::Rotmole => {
                    let plane = build_plane(&u, &self.params.router.q[i], eps)?;
                    let rotated = apply_rotation(&u, &plane, theta[slot]);
                    (Some(plane), rotated)
                }
                _ => (None, u.clone()),
            };
            let out = expert.b.matvec(&rotated)?;
            y.axpy(g[slot], &out);
            experts.push(ExpertCache { index: i, u, plane, rotated, out });
        }

        let cache = ForwardCache {
            config: cfg.clone(),
            x: x.clone(),
            gate_logits,
            probs,
            renorm_sum,
            mlp_pre,
            routing: RoutingDecision { selected, g, theta },
            theta_logits,
            experts,
        };
        Ok((y, cache))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let layer: Self = serde_json::from_str(text)?;
        layer.validate()?;
        Ok(layer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, FRAC_PI_2};

    fn random_x(d: usize, rng: &mut Rng) -> Vector<f64> {
        Vector::from_vec((0..d).map(|_| rng.normal()).collect())
    }

    /// Layer with a scaling gate whose logits are exactly `logits` for x = e_0.
    fn layer_with_logits(logits: &[f64]) -> AdapterLayer<f64> {
        let n = logits.len();
        let cfg = AdapterConfig::new(3, 2, n, 2, GateMode::Rotmole);
        let mut layer = AdapterLayer::init(&cfg, &mut Rng::new(1)).unwrap();
        let wg = layer.params.router.w_g.as_mut().unwrap();
        for (j, &l) in logits.iter().enumerate() {
            wg[(0, j)] = l;
        }
        layer
    }

    #[test]
    fn config_validation() {
        assert!(AdapterConfig::new(4, 1, 2, 1, GateMode::Rotmole).validate().is_err());
        assert!(AdapterConfig::new(4, 2, 2, 3, GateMode::Rotmole).validate().is_err());
        assert!(AdapterConfig::new(4, 2, 2, 0, GateMode::Rotmole).validate().is_err());
        assert!(AdapterConfig::new(4, 2, 2, 1, GateMode::MlpGate).validate().is_err());
        assert!(AdapterConfig::new(4, 2, 2, 1, GateMode::ScalingOnly).with_mode(GateMode::MlpGate).validate().is_ok());
        let mut c = AdapterConfig::new(4, 2, 2, 1, GateMode::Rotmole);
        c.eps_degenerate = 0.0;
        assert!(matches!(AdapterLayer::<f64>::init(&c, &mut Rng::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_identity_on_adapter_delta() {
        for mode in GateMode::ALL {
            let cfg = AdapterConfig::new(8, 3, 4, 2, mode).with_mode(mode);
            let layer = AdapterLayer::<f64>::init(&cfg, &mut Rng::new(3)).unwrap();
            layer.validate().unwrap();
            let x = random_x(8, &mut Rng::new(4));
            let (y, _) = layer.forward(&x).unwrap();
            assert_eq!(y, layer.w0.matvec(&x).unwrap());
        }
    }

    #[test]
    fn init_angles_are_exactly_zero() {
        let cfg = AdapterConfig::new(8, 3, 4, 2, GateMode::Rotmole);
        let layer = AdapterLayer::<f64>::init(&cfg, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(10);
        for _ in 0..20 {
            let x = random_x(8, &mut rng);
            assert!(layer.route(&x).unwrap().theta.iter().all(|&t| t == 0.0));
            assert!(layer.rotation_angles(&x).unwrap().iter().all(|&t| t == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = AdapterConfig::new(6, 4, 3, 2, GateMode::Rotmole);
        let a = AdapterLayer::<f64>::init(&cfg, &mut Rng::new(99)).unwrap();
        let b = AdapterLayer::<f64>::init(&cfg, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn route_renormalizes_selected_softmax() {
        let layer = layer_with_logits(&[1.0, 2.0, 3.0, 4.0]);
        let d = layer.route(&Vector::from_f64(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(d.selected, vec![3, 2]);
        let (e4, e3) = (E.powi(4), E.powi(3));
        assert!((d.g[0] - e4 / (e4 + e3)).abs() < 1e-15);
        assert!((d.g[1] - e3 / (e4 + e3)).abs() < 1e-15);
        assert!((d.g[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn route_breaks_ties_by_lowest_index() {
        let layer = layer_with_logits(&[0.5, 0.5, 0.5, 0.5]);
        let d = layer.route(&Vector::from_f64(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert_eq!(d.g, vec![0.5, 0.5]);
    }

    #[test]
    fn rotation_logit_ln3_is_quarter_turn() {
        let mut layer = layer_with_logits(&[4.0, 3.0, 0.0, 0.0]);
        layer.params.router.w_theta.as_mut().unwrap()[(0, 0)] = 3f64.ln();
        let d = layer.route(&Vector::from_f64(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(d.selected[0], 0);
        assert!((d.theta[0] - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(d.theta[1], 0.0);
    }

    #[test]
    fn shape_errors() {
        let cfg = AdapterConfig::new(4, 2, 2, 1, GateMode::Rotmole);
        let layer = AdapterLayer::<f64>::init(&cfg, &mut Rng::new(0)).unwrap();
        let x = Vector::zeros(3);
        assert!(matches!(layer.forward(&x), Err(Error::Shape { .. })));
        assert!(matches!(layer.route(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_expert_is_plain_rotated_lora() {
        let cfg = AdapterConfig::new(5, 3, 1, 1, GateMode::Rotmole);
        let mut rng = Rng::new(21);
        let mut layer = AdapterLayer::<f64>::init(&cfg, &mut rng).unwrap();
        layer.params.experts[0].b = kaiming_uniform(5, 3, &mut rng);
        layer.params.router.w_theta = Some(kaiming_uniform(5, 1, &mut rng));
        let x = random_x(5, &mut rng);
        let (y, cache) = layer.forward(&x).unwrap();
        assert_eq!(cache.routing.g, vec![1.0]);
        let e = &layer.params.experts[0];
        let u = e.a.matvec(&x).unwrap();
        let plane = build_plane(&u, &layer.params.router.q[0], 1e-8).unwrap();
        let rot = crate::rotation::rotation_matrix_r(&plane, cache.routing.theta[0]).unwrap();
        let expected = layer.w0.matvec(&x).unwrap().add(&e.b.matmul(&rot).unwrap().matvec(&u).unwrap());
        assert!(y.sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn unselected_experts_do_not_contribute() {
        let cfg = AdapterConfig::new(6, 3, 4, 2, GateMode::Rotmole);
        let mut rng = Rng::new(5);
        let mut layer = AdapterLayer::<f64>::init(&cfg, &mut rng).unwrap();
        for e in &mut layer.params.experts {
            e.b = kaiming_uniform(6, 3, &mut rng);
        }
        let x = random_x(6, &mut rng);
        let (y, cache) = layer.forward(&x).unwrap();
        let idle = (0..4).find(|i| !cache.routing.selected.contains(i)).unwrap();
        layer.params.experts[idle].b = kaiming_uniform(6, 3, &mut rng);
        layer.params.experts[idle].a = kaiming_uniform(3, 6, &mut rng);
        assert_eq!(layer.forward(&x).unwrap().0, y);
    }

    #[test]
    fn logit_shift_leaves_routing_unchanged() {
        // A constant column offset in x·W_g is produced by a row added to W_g
        // along a coordinate fixed to 1.
        let cfg = AdapterConfig::new(5, 2, 4, 2, GateMode::ScalingOnly);
        let layer = AdapterLayer::<f64>::init(&cfg, &mut Rng::new(8)).unwrap();
        let mut shifted = layer.clone();
        let wg = shifted.params.router.w_g.as_mut().unwrap();
        for j in 0..4 {
            wg[(0, j)] += 3.25;
        }
        let mut x = random_x(5, &mut Rng::new(2));
        x[0] = 1.0;
        let a = layer.route(&x).unwrap();
        let b = shifted.route(&x).unwrap();
        assert_eq!(a.selected, b.selected);
        for (ga, gb) in a.g.iter().zip(&b.g) {
            assert!((ga - gb).abs() < 1e-12);
        }
    }

    #[test]
    fn param_counts() {
        let c = |r, mode| count_trainable_routing_params(&AdapterConfig::new(8, r, 4, 2, mode));
        assert_eq!(c(2, GateMode::Rotmole), 64);
        assert_eq!(c(2, GateMode::Rotmole) - c(2, GateMode::ScalingOnly), 32);
        assert_eq!(c(4, GateMode::Rotmole), 80);
        assert_eq!(c(4, GateMode::ScalingOnly), 32);
    }

    #[test]
    fn mlp_hidden_examples() {
        assert_eq!(mlp_hidden_dim(&AdapterConfig::new(4096, 4, 8, 2, GateMode::Rotmole)), 16);
        assert_eq!(mlp_hidden_dim(&AdapterConfig::new(8, 4, 4, 2, GateMode::Rotmole)), 7);
        let cfg = AdapterConfig::new(8, 4, 4, 2, GateMode::Rotmole);
        let mlp = count_trainable_routing_params(&cfg.with_mode(GateMode::MlpGate));
        let rot = count_trainable_routing_params(&cfg);
        assert!(mlp.abs_diff(rot) <= 8 + 4);
    }

    #[test]
    fn enumerated_params_match_formula() {
        for mode in GateMode::ALL {
            for r in 2..5 {
                let cfg = AdapterConfig::new(7, r, 3, 2, GateMode::ScalingOnly).with_mode(mode);
                let layer = AdapterLayer::<f64>::init(&cfg, &mut Rng::new(0)).unwrap();
                assert_eq!(layer.params.routing_count(), count_trainable_routing_params(&cfg), "{mode:?} r={r}");
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let cfg = AdapterConfig::new(5, 3, 3, 2, GateMode::Rotmole);
        let mut rng = Rng::new(12);
        let mut layer = AdapterLayer::<f64>::init(&cfg, &mut rng).unwrap();
        layer.params.router.w_theta = Some(kaiming_uniform(5, 3, &mut rng));
        let text = layer.to_json().unwrap();
        let back = AdapterLayer::<f64>::from_json(&text).unwrap();
        assert_eq!(back, layer);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["config", "W0", "experts", "router"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn json_with_wrong_shapes_rejected() {
        let cfg = AdapterConfig::new(4, 2, 2, 1, GateMode::ScalingOnly);
        let layer = AdapterLayer::<f64>::init(&cfg, &mut Rng::new(0)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&layer.to_json().unwrap()).unwrap();
        v["config"]["d"] = 5.into();
        assert!(AdapterLayer::<f64>::from_json(&v.to_string()).is_err());
    }
}
