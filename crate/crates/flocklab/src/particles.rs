//! Particle-level integrators for the alignment models.
//!
//! Deterministic mean-field and normalized-interaction systems advance with
//! classical RK4. Stochastic systems share one Euler-Maruyama core whose
//! drift coefficients encode the scaling regime, so regimes that agree at
//! epsilon = 1 produce bit-identical trajectories. Noise comes from
//! counter-based per-(particle, step) streams: results do not depend on how
//! force evaluation is scheduled.

use crate::kernels::{c_lambda, inv_pow, DimensionalKernelParams, KernelParams};
use crate::potential::PotentialSpec;
use crate::rng::StreamKey;
use crate::scalings::{ScalingKind, ScalingSpec};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StepError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(
        "velocity of particle {particle} grew from {from:.3e} to {to:.3e} in one step \
         (limit {factor} x (|v| + 1)); reduce dt"
    )]
    VelocityGrowth { particle: usize, from: f64, to: f64, factor: f64 },
    #[error("dt = {dt:.3e} exceeds the stiffness limit {limit:.3e} at epsilon = {epsilon}")]
    Stiffness { dt: f64, limit: f64, epsilon: f64 },
    #[error("interaction normalization underflowed for particle {particle} (sum = {sum:.3e})")]
    NormalizationUnderflow { particle: usize, sum: f64 },
}

/// Flat-storage ensemble: coordinate `a` of particle `i` lives at
/// `i * dim + a`. Every particle carries the same mass `weight`, so the
/// total mass is `n * weight` and never changes across steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub weight: f64,
    pub time: f64,
    pub step_index: u64,
}

impl ParticleEnsemble {
    pub fn new(
        dim: usize,
        positions: Vec<f64>,
        velocities: Vec<f64>,
        weight: f64,
    ) -> Result<Self, StepError> {
        if dim == 0 {
            return Err(StepError::InvalidModel("dim must be >= 1".into()));
        }
        if positions.is_empty() || positions.len() % dim != 0 {
            return Err(StepError::InvalidModel(format!(
                "positions length {} is not a positive multiple of dim {dim}",
                positions.len()
            )));
        }
        if velocities.len() != positions.len() {
            return Err(StepError::InvalidModel(format!(
                "velocities length {} does not match positions length {}",
                velocities.len(),
                positions.len()
            )));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(StepError::InvalidModel(format!("weight must be > 0, got {weight}")));
        }
        if positions.iter().chain(&velocities).any(|x| !x.is_finite()) {
            return Err(StepError::InvalidModel("non-finite coordinate in initial data".into()));
        }
        Ok(ParticleEnsemble { dim, positions, velocities, weight, time: 0.0, step_index: 0 })
    }

    /// Uniform draw on the box `[x_range]^dim x [v_range]^dim`, all positions
    /// first, then all velocities, from the key's own stream.
    pub fn sample_box(
        n: usize,
        dim: usize,
        total_mass: f64,
        x_range: (f64, f64),
        v_range: (f64, f64),
        key: &StreamKey,
    ) -> Result<Self, StepError> {
        if n == 0 {
            return Err(StepError::InvalidModel("n must be >= 1".into()));
        }
        let mut rng = key.rng();
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> {
            (0..n * dim).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
        };
        let positions = draw(x_range.0, x_range.1);
        let velocities = draw(v_range.0, v_range.1);
        ParticleEnsemble::new(dim, positions, velocities, total_mass / n as f64)
    }

    pub fn n(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn total_mass(&self) -> f64 {
        self.n() as f64 * self.weight
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    /// First particle with any position coordinate outside `[lo, hi]`, the
    /// safety-box check for compactly supported experiments.
    pub fn first_outside(&self, lo: f64, hi: f64) -> Option<usize> {
        self.positions
            .iter()
            .position(|&x| !(lo..=hi).contains(&x))
            .map(|flat| flat / self.dim)
    }

    pub fn max_speed(&self) -> f64 {
        (0..self.n()).map(|i| norm(self.velocity(i))).fold(0.0, f64::max)
    }
}

/// Velocity-dependent friction laws. The generalized law is
/// `mu(v) = beta |v|^k - alpha`; with k = 0, beta = mu, alpha = 0 it reduces
/// exactly to the linear law, and k = 2 is the Rayleigh-Helmholtz case with
/// stable speed sqrt(alpha/beta).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum FrictionSpec {
    None,
    Linear { mu: f64 },
    Generalized { alpha: f64, beta: f64, k: f64 },
}

impl FrictionSpec {
    pub fn validate(&self) -> Result<(), StepError> {
        match *self {
            FrictionSpec::None => Ok(()),
            FrictionSpec::Linear { mu } => {
                if !(mu >= 0.0) || !mu.is_finite() {
                    return Err(StepError::InvalidModel(format!("mu must be >= 0, got {mu}")));
                }
                Ok(())
            }
            FrictionSpec::Generalized { alpha, beta, k } => {
                if !(alpha >= 0.0) || !(beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
                    return Err(StepError::InvalidModel(format!(
                        "friction rates must be >= 0, got alpha = {alpha}, beta = {beta}"
                    )));
                }
                if !(0.0..=2.0).contains(&k) {
                    return Err(StepError::InvalidModel(format!(
                        "friction exponent must lie in [0, 2], got {k}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Rate `mu(|v|)`; the drift contribution is `-mu(|v|) v`.
    #[inline]
    fn rate(&self, speed: f64) -> f64 {
        match *self {
            FrictionSpec::None => 0.0,
            FrictionSpec::Linear { mu } => mu,
            FrictionSpec::Generalized { alpha, beta, k } => beta * speed.powf(k) - alpha,
        }
    }
}

/// Pairwise influence function used by the interaction sums.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum InfluenceChoice {
    /// Identically zero: free dynamics (the K = 0 configurations).
    Zero,
    /// `(1 + r^2)^(-lambda)`, the classical form the flocking results use.
    Classical { lambda: f64 },
    /// The regularized scaled family `(eps^2 + c_lambda r^2)^(-lambda)`.
    Scaled(KernelParams),
    /// The dimensional family with contact strength K and range sigma.
    Dimensional(DimensionalKernelParams),
}

impl InfluenceChoice {
    pub fn validate(&self) -> Result<(), StepError> {
        let invalid = |e: crate::kernels::KernelError| StepError::InvalidModel(e.to_string());
        match *self {
            InfluenceChoice::Zero => Ok(()),
            InfluenceChoice::Classical { lambda } => {
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(StepError::InvalidModel(format!(
                        "classical kernel needs lambda > 0, got {lambda}"
                    )));
                }
                Ok(())
            }
            InfluenceChoice::Scaled(p) => {
                KernelParams::new(p.lambda, p.epsilon, p.dim).map(|_| ()).map_err(invalid)
            }
            InfluenceChoice::Dimensional(d) => DimensionalKernelParams::new(d.lambda, d.strength, d.range)
                .map(|_| ())
                .map_err(invalid),
        }
    }
}

/// Hoisted kernel evaluator for the pair loops: every supported family has
/// the shape `scale * (base + c r^2)^(-lambda)`, so the hot path never
/// recomputes `c_lambda` or touches an enum.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PairKernel {
    scale: f64,
    base: f64,
    c: f64,
    lambda: f64,
}

impl PairKernel {
    pub(crate) fn compile(choice: &InfluenceChoice) -> Result<Self, StepError> {
        choice.validate()?;
        Ok(match *choice {
            InfluenceChoice::Zero => PairKernel { scale: 0.0, base: 1.0, c: 1.0, lambda: 1.0 },
            InfluenceChoice::Classical { lambda } => {
                PairKernel { scale: 1.0, base: 1.0, c: 1.0, lambda }
            }
            InfluenceChoice::Scaled(p) => PairKernel::from_params(&p),
            InfluenceChoice::Dimensional(d) => {
                let sigma2 = d.range * d.range;
                PairKernel {
                    scale: d.strength * sigma2.powf(d.lambda),
                    base: sigma2,
                    c: c_lambda(d.lambda),
                    lambda: d.lambda,
                }
            }
        })
    }

    pub(crate) fn from_params(p: &KernelParams) -> Self {
        PairKernel { scale: 1.0, base: p.epsilon * p.epsilon, c: p.c_lambda(), lambda: p.lambda }
    }

    #[inline(always)]
    pub(crate) fn eval_r2(&self, r2: f64) -> f64 {
        self.scale * inv_pow(self.base + self.c * r2, self.lambda)
    }

    pub(crate) fn contact(&self) -> f64 {
        self.eval_r2(0.0)
    }

    pub(crate) fn is_zero(&self) -> bool {
        self.scale == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelKind {
    CuckerSmale,
    MotschTadmor,
    Langevin,
    Scaled(ScalingSpec),
}

/// Complete description of one particle run. The interaction weight is the
/// per-particle mass, so total mass 1 reproduces the mean-field 1/n factor
/// and other masses exercise the M_0-dependent bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: ModelKind,
    pub kernel: InfluenceChoice,
    pub friction: FrictionSpec,
    pub potential: PotentialSpec,
    pub diffusion: f64,
    pub seed: u64,
    /// Particle mass; only the Langevin model accepts m != 1.
    #[serde(default = "default_mass")]
    pub mass: f64,
    /// One-step rejection threshold: error out if any particle's speed
    /// exceeds `max_growth * (old speed + 1)`.
    #[serde(default = "default_max_growth")]
    pub max_growth: f64,
}

fn default_mass() -> f64 {
    1.0
}

fn default_max_growth() -> f64 {
    10.0
}

impl ModelSpec {
    /// Spec for a scaled run: the kernel is pinned to the regime's own
    /// regularized family, friction and noise come from the regime itself.
    pub fn scaled(scaling: ScalingSpec, dim: usize, potential: PotentialSpec, seed: u64) -> Result<Self, StepError> {
        let params = scaling
            .kernel(dim)
            .map_err(|e| StepError::InvalidModel(e.to_string()))?;
        Ok(ModelSpec {
            model: ModelKind::Scaled(scaling),
            kernel: InfluenceChoice::Scaled(params),
            friction: FrictionSpec::None,
            potential,
            diffusion: 0.0,
            seed,
            mass: 1.0,
            max_growth: default_max_growth(),
        })
    }

    pub fn validate(&self) -> Result<(), StepError> {
        if !(self.diffusion >= 0.0) || !self.diffusion.is_finite() {
            return Err(StepError::InvalidModel(format!(
                "diffusion must be >= 0, got {}",
                self.diffusion
            )));
        }
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            return Err(StepError::InvalidModel(format!("mass must be > 0, got {}", self.mass)));
        }
        if !(self.max_growth > 1.0) || !self.max_growth.is_finite() {
            return Err(StepError::InvalidModel(format!(
                "max_growth must exceed 1, got {}",
                self.max_growth
            )));
        }
        self.kernel.validate()?;
        self.friction.validate()?;
        match &self.model {
            ModelKind::CuckerSmale | ModelKind::MotschTadmor => {
                if self.diffusion != 0.0 {
                    return Err(StepError::InvalidModel(
                        "deterministic alignment models require diffusion = 0".into(),
                    ));
                }
                if self.friction != FrictionSpec::None {
                    return Err(StepError::InvalidModel(
                        "deterministic alignment models carry no friction term".into(),
                    ));
                }
                if self.potential != PotentialSpec::Zero {
                    return Err(StepError::InvalidModel(
                        "deterministic alignment models carry no external force".into(),
                    ));
                }
                if self.mass != 1.0 {
                    return Err(StepError::InvalidModel(
                        "only the langevin model accepts mass != 1".into(),
                    ));
                }
                if self.model == ModelKind::MotschTadmor {
                    let phi = PairKernel::compile(&self.kernel)?;
                    if phi.is_zero() || !phi.contact().is_finite() {
                        return Err(StepError::InvalidModel(
                            "normalized interactions need a kernel with finite positive contact value"
                                .into(),
                        ));
                    }
                }
            }
            ModelKind::Langevin => {
                if self.friction == FrictionSpec::None {
                    return Err(StepError::InvalidModel(
                        "langevin requires an explicit friction law (use linear with mu = 0 for none)"
                            .into(),
                    ));
                }
            }
            ModelKind::Scaled(scaling) => {
                if self.diffusion != 0.0 || self.friction != FrictionSpec::None || self.mass != 1.0 {
                    return Err(StepError::InvalidModel(
                        "scaled regimes fix friction, noise, and mass; leave them at none/0/1".into(),
                    ));
                }
                match &self.kernel {
                    InfluenceChoice::Scaled(p)
                        if p.lambda == scaling.lambda && p.epsilon == scaling.epsilon => {}
                    // Zero switches alignment off for free-motion diagnostics.
                    InfluenceChoice::Zero => {}
                    _ => {
                        return Err(StepError::InvalidModel(
                            "scaled runs must use the regime's own kernel (see ModelSpec::scaled)"
                                .into(),
                        ))
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline(always)]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean-field alignment force `out_i = sum_j w phi(|x_i - x_j|)(v_j - v_i)`,
/// accumulated antisymmetrically over ordered pairs so momentum cancellation
/// is exact pair by pair. Self-interaction contributes zero and is skipped.
fn alignment(pos: &[f64], vel: &[f64], dim: usize, weight: f64, phi: &PairKernel, out: &mut [f64]) {
    out.fill(0.0);
    if phi.is_zero() {
        return;
    }
    let n = pos.len() / dim;
    for i in 0..n {
        for j in i + 1..n {
            let r2 = dist2(&pos[i * dim..(i + 1) * dim], &pos[j * dim..(j + 1) * dim]);
            let w = weight * phi.eval_r2(r2);
            for a in 0..dim {
                let f = w * (vel[j * dim + a] - vel[i * dim + a]);
                out[i * dim + a] += f;
                out[j * dim + a] -= f;
            }
        }
    }
}

/// Normalized alignment `out_i = contact * sum_j phi_ij (v_j - v_i) / sum_k phi_ik`,
/// the self term included in the normalizer. The particle weight cancels
/// between numerator and denominator; the kernel's contact value plays the
/// role of the overall alignment rate, so the dimensional family's strength
/// K carries over literally.
fn normalized_alignment(
    pos: &[f64],
    vel: &[f64],
    dim: usize,
    phi: &PairKernel,
    out: &mut [f64],
) -> Result<(), StepError> {
    out.fill(0.0);
    let n = pos.len() / dim;
    let contact = phi.contact();
    let mut denom = vec![contact; n];
    for i in 0..n {
        for j in i + 1..n {
            let r2 = dist2(&pos[i * dim..(i + 1) * dim], &pos[j * dim..(j + 1) * dim]);
            let w = phi.eval_r2(r2);
            denom[i] += w;
            denom[j] += w;
            for a in 0..dim {
                let f = w * (vel[j * dim + a] - vel[i * dim + a]);
                out[i * dim + a] += f;
                out[j * dim + a] -= f;
            }
        }
    }
    for (i, &d) in denom.iter().enumerate() {
        if !(d >= f64::MIN_POSITIVE) {
            return Err(StepError::NormalizationUnderflow { particle: i, sum: d });
        }
        let s = contact / d;
        for a in 0..dim {
            out[i * dim + a] *= s;
        }
    }
    Ok(())
}

enum DetModel {
    MeanField { weight: f64 },
    Normalized,
}

fn det_accel(
    model: &DetModel,
    pos: &[f64],
    vel: &[f64],
    dim: usize,
    phi: &PairKernel,
    out: &mut [f64],
) -> Result<(), StepError> {
    match model {
        DetModel::MeanField { weight } => {
            alignment(pos, vel, dim, *weight, phi, out);
            Ok(())
        }
        DetModel::Normalized => normalized_alignment(pos, vel, dim, phi, out),
    }
}

fn check_growth(old_vel: &[f64], new_vel: &[f64], dim: usize, factor: f64) -> Result<(), StepError> {
    for i in 0..old_vel.len() / dim {
        let from = norm(&old_vel[i * dim..(i + 1) * dim]);
        let to = norm(&new_vel[i * dim..(i + 1) * dim]);
        if to > factor * (from + 1.0) {
            return Err(StepError::VelocityGrowth { particle: i, from, to, factor });
        }
    }
    Ok(())
}

/// One classical RK4 step of `x' = v`, `v' = accel(x, v)`.
fn rk4_step(
    state: &ParticleEnsemble,
    phi: &PairKernel,
    model: DetModel,
    dt: f64,
    max_growth: f64,
) -> Result<ParticleEnsemble, StepError> {
    let dim = state.dim;
    let len = state.positions.len();
    let x0 = &state.positions;
    let v0 = &state.velocities;

    let mut kv = vec![vec![0.0; len]; 4];
    let mut xs = vec![0.0; len];
    let mut vs = vec![0.0; len];

    det_accel(&model, x0, v0, dim, phi, &mut kv[0])?;
    // Stage velocities double as the position slopes: k_x = v at the stage.
    let mut vstages: Vec<Vec<f64>> = Vec::with_capacity(3);
    for (stage, frac) in [(1, 0.5), (2, 0.5), (3, 1.0)] {
        let prev = &kv[stage - 1];
        let vprev: &[f64] = if stage == 1 { v0 } else { &vstages[stage - 2] };
        for m in 0..len {
            xs[m] = x0[m] + dt * frac * vprev[m];
            vs[m] = v0[m] + dt * frac * prev[m];
        }
        let (head, tail) = kv.split_at_mut(stage);
        let _ = head;
        det_accel(&model, &xs, &vs, dim, phi, &mut tail[0])?;
        vstages.push(vs.clone());
    }

    let sixth = dt / 6.0;
    let mut positions = vec![0.0; len];
    let mut velocities = vec![0.0; len];
    for m in 0..len {
        let kx = v0[m] + 2.0 * vstages[0][m] + 2.0 * vstages[1][m] + vstages[2][m];
        let kvm = kv[0][m] + 2.0 * kv[1][m] + 2.0 * kv[2][m] + kv[3][m];
        positions[m] = x0[m] + sixth * kx;
        velocities[m] = v0[m] + sixth * kvm;
    }
    check_growth(v0, &velocities, dim, max_growth)?;
    Ok(ParticleEnsemble {
        dim,
        positions,
        velocities,
        weight: state.weight,
        time: state.time + dt,
        step_index: state.step_index + 1,
    })
}

/// Mean-field alignment system: `x_i' = v_i`,
/// `v_i' = sum_j w phi(|x_i - x_j|)(v_j - v_i)`, advanced by one RK4 step.
/// Total mass and mean velocity are conserved to integrator order.
pub fn step_cucker_smale(
    state: &ParticleEnsemble,
    spec: &ModelSpec,
    dt: f64,
) -> Result<ParticleEnsemble, StepError> {
    require_model(spec, dt, "cucker_smale", |m| *m == ModelKind::CuckerSmale)?;
    let phi = PairKernel::compile(&spec.kernel)?;
    rk4_step(state, &phi, DetModel::MeanField { weight: state.weight }, dt, spec.max_growth)
}

/// Normalized-interaction system: accelerations are convex combinations of
/// relative velocities, so a far heavy cluster no longer freezes a light
/// one. Mean velocity is not conserved (the interaction is asymmetric).
pub fn step_motsch_tadmor(
    state: &ParticleEnsemble,
    spec: &ModelSpec,
    dt: f64,
) -> Result<ParticleEnsemble, StepError> {
    require_model(spec, dt, "motsch_tadmor", |m| *m == ModelKind::MotschTadmor)?;
    let phi = PairKernel::compile(&spec.kernel)?;
    rk4_step(state, &phi, DetModel::Normalized, dt, spec.max_growth)
}

/// Drift coefficients of the shared Euler-Maruyama core:
/// `dx = pos_rate v dt`,
/// `dv = [-friction_rate mu(|v|) v + align_rate F_align - force_rate grad psi] dt
///       + sqrt(noise_var dt) xi`.
struct EmCoeffs {
    pos_rate: f64,
    friction_rate: f64,
    align_rate: f64,
    force_rate: f64,
    noise_var: f64,
    friction: FrictionSpec,
}

fn em_step(
    state: &ParticleEnsemble,
    spec: &ModelSpec,
    phi: &PairKernel,
    co: &EmCoeffs,
    dt: f64,
) -> Result<ParticleEnsemble, StepError> {
    let dim = state.dim;
    let n = state.n();
    let mut align = vec![0.0; n * dim];
    alignment(&state.positions, &state.velocities, dim, state.weight, phi, &mut align);

    let noise_std = (co.noise_var * dt).sqrt();
    let noise_key = StreamKey::from_seed(spec.seed).child("noise");
    let mut grad = vec![0.0; dim];
    let mut positions = vec![0.0; n * dim];
    let mut velocities = vec![0.0; n * dim];

    for i in 0..n {
        spec.potential.grad(state.time, state.position(i), &mut grad);
        let mu = co.friction.rate(norm(state.velocity(i)));
        let mut rng =
            (noise_std > 0.0).then(|| noise_key.noise_rng(i as u64, state.step_index));
        for a in 0..dim {
            let m = i * dim + a;
            let v = state.velocities[m];
            let drift = co.friction_rate * (-(mu * v)) + co.align_rate * align[m]
                - co.force_rate * grad[a];
            let noise = match &mut rng {
                Some(r) => noise_std * r.sample::<f64, _>(StandardNormal),
                None => 0.0,
            };
            velocities[m] = v + dt * drift + noise;
            positions[m] = state.positions[m] + dt * (co.pos_rate * v);
        }
    }
    check_growth(&state.velocities, &velocities, dim, spec.max_growth)?;
    Ok(ParticleEnsemble {
        dim,
        positions,
        velocities,
        weight: state.weight,
        time: state.time + dt,
        step_index: state.step_index + 1,
    })
}

/// One Euler-Maruyama step of
/// `m dv_i = [-mu(|v_i|) v_i + F_align - grad psi(t, x_i)] dt + sqrt(2D) dW_i`.
/// Noise increments are independent per particle with per-component variance
/// `2D dt / m^2`, drawn from the (seed, particle, step) stream.
pub fn step_langevin(
    state: &ParticleEnsemble,
    spec: &ModelSpec,
    dt: f64,
) -> Result<ParticleEnsemble, StepError> {
    require_model(spec, dt, "langevin", |m| *m == ModelKind::Langevin)?;
    let phi = PairKernel::compile(&spec.kernel)?;
    let inv_m = 1.0 / spec.mass;
    let co = EmCoeffs {
        pos_rate: 1.0,
        friction_rate: inv_m,
        align_rate: inv_m,
        force_rate: inv_m,
        noise_var: 2.0 * spec.diffusion / (spec.mass * spec.mass),
        friction: spec.friction,
    };
    em_step(state, spec, &phi, &co, dt)
}

/// One Euler-Maruyama step of the interacting SDE for the given scaling
/// regime (each kinetic equation divided by its leading time coefficient):
///
/// * hyperbolic: `dx = v dt`,
///   `dv = (1/eps)[-v - grad psi + F_align] dt + sqrt(2/eps) dW`;
/// * intermediate(gamma): `dx = eps^-gamma v dt`,
///   `dv = eps^-(1+gamma)[-v + F_align] dt - eps^-1 grad psi dt
///         + sqrt(2 eps^(gamma-1)) dW`;
/// * frictionless: `dx = v dt`,
///   `dv = [-grad psi + (1/eps) F_align] dt + sqrt(2) dW`;
/// * generalized friction: as intermediate with `-v` replaced by
///   `-(|v|^k(eps) - alpha(eps)) v`.
///
/// The kernel is the regime's own regularized family at (lambda, eps).
pub fn step_scaled(
    state: &ParticleEnsemble,
    scaling: &ScalingSpec,
    spec: &ModelSpec,
    dt: f64,
) -> Result<ParticleEnsemble, StepError> {
    require_model(spec, dt, "scaled", |m| matches!(m, ModelKind::Scaled(s) if s == scaling))?;
    let limit = scaling.dt_limit();
    if dt > limit {
        return Err(StepError::Stiffness { dt, limit, epsilon: scaling.epsilon });
    }
    let phi = if spec.kernel == InfluenceChoice::Zero {
        PairKernel::compile(&spec.kernel)?
    } else {
        let params = scaling
            .kernel(state.dim)
            .map_err(|e| StepError::InvalidModel(e.to_string()))?;
        PairKernel::from_params(&params)
    };
    let eps = scaling.epsilon;
    let co = match &scaling.kind {
        ScalingKind::Hyperbolic => EmCoeffs {
            pos_rate: 1.0,
            friction_rate: 1.0 / eps,
            align_rate: 1.0 / eps,
            force_rate: 1.0 / eps,
            noise_var: 2.0 / eps,
            friction: FrictionSpec::Linear { mu: 1.0 },
        },
        ScalingKind::Intermediate { gamma } => {
            let fast = eps.powf(-(1.0 + gamma));
            EmCoeffs {
                pos_rate: eps.powf(-gamma),
                friction_rate: fast,
                align_rate: fast,
                force_rate: 1.0 / eps,
                noise_var: 2.0 * eps.powf(gamma - 1.0),
                friction: FrictionSpec::Linear { mu: 1.0 },
            }
        }
        ScalingKind::Frictionless => EmCoeffs {
            pos_rate: 1.0,
            friction_rate: 0.0,
            align_rate: 1.0 / eps,
            force_rate: 1.0,
            noise_var: 2.0,
            friction: FrictionSpec::None,
        },
        ScalingKind::GeneralizedFriction { gamma, k_fn, alpha_fn } => {
            let fast = eps.powf(-(1.0 + gamma));
            EmCoeffs {
                pos_rate: eps.powf(-gamma),
                friction_rate: fast,
                align_rate: fast,
                force_rate: 1.0 / eps,
                noise_var: 2.0 * eps.powf(gamma - 1.0),
                friction: FrictionSpec::Generalized {
                    alpha: alpha_fn.eval(eps),
                    beta: 1.0,
                    k: k_fn.eval(eps),
                },
            }
        }
    };
    em_step(state, spec, &phi, &co, dt)
}

fn require_model(
    spec: &ModelSpec,
    dt: f64,
    name: &str,
    ok: impl Fn(&ModelKind) -> bool,
) -> Result<(), StepError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(StepError::InvalidModel(format!("dt must be positive, got {dt}")));
    }
    spec.validate()?;
    if !ok(&spec.model) {
        return Err(StepError::InvalidModel(format!(
            "spec.model does not match the {name} stepper"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlockingDiagnostics {
    pub position_diameter: f64,
    pub velocity_diameter: f64,
    pub mean_velocity: Vec<f64>,
    /// `Lambda = sum_i weight |v_i - u_c|^2`, the kinetic-energy fluctuation
    /// about the mean velocity.
    pub kinetic_fluctuation: f64,
}

/// Exact O(n^2) flocking diagnostics. When every velocity is bitwise
/// identical the fluctuation is returned as exactly zero (the mean then IS
/// the common velocity; recomputing it in floats would break the
/// diameter-zero equivalence).
pub fn flocking_diagnostics(state: &ParticleEnsemble) -> FlockingDiagnostics {
    let n = state.n();
    let dim = state.dim;
    let mut pos_d2 = 0.0f64;
    let mut vel_d2 = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            pos_d2 = pos_d2.max(dist2(state.position(i), state.position(j)));
            vel_d2 = vel_d2.max(dist2(state.velocity(i), state.velocity(j)));
        }
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(state.velocity(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let kinetic_fluctuation = if vel_d2 == 0.0 {
        0.0
    } else {
        (0..n).map(|i| state.weight * dist2(state.velocity(i), &mean)).sum()
    };
    FlockingDiagnostics {
        position_diameter: pos_d2.sqrt(),
        velocity_diameter: vel_d2.sqrt(),
        mean_velocity: mean,
        kinetic_fluctuation,
    }
}
