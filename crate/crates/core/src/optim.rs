//! SGD with coupled L2, Adam, and AdamW as pure state transitions, plus
//! empirical probes of step displacement (σ) and expansiveness (τ).

use crate::error::{usage, Error, Result};
use crate::math::{dist, norm};
use crate::models::{GradVector, ParamVector};

/// Schedule multiplier `α_t` for AdamW, indexed from `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// Cosine decay from 1 to `floor` over `steps`, then flat at `floor`.
    Cosine { steps: usize, floor: f64 },
}

impl Schedule {
    pub fn alpha(&self, t: usize) -> f64 {
        match *self {
            Schedule::Constant(a) => a,
            Schedule::Cosine { steps, floor } => {
                if steps == 0 || t > steps {
                    return floor;
                }
                let phase = (t.saturating_sub(1)) as f64 / steps as f64;
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
            }
        }
    }

    /// `α_1, …, α_T`.
    pub fn values(&self, steps: usize) -> Vec<f64> {
        (1..=steps).map(|t| self.alpha(t)).collect()
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Constant(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { eta: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, lambda: 0.1, schedule: Schedule::default() }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return bad(format!("beta1 must lie in (0, 1), got {}", self.beta1));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("beta2 must lie in (0, 1), got {}", self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    /// AdamW requires `0 ≤ α_t·λ < 1` and `α_t ∈ (0, 1]`; `λ = 0` switches
    /// the decay off.
    pub fn check_decay(&self, t: usize) -> Result<f64> {
        let alpha = self.schedule.alpha(t);
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("schedule multiplier alpha_{t} = {alpha} outside (0, 1]")));
        }
        let prod = alpha * self.lambda;
        if !(0.0..1.0).contains(&prod) {
            return Err(Error::Config(format!("alpha_{t} * lambda = {prod} outside [0, 1)")));
        }
        Ok(alpha)
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(usage!("{what} has length {got}, expected {want}"));
    }
    Ok(())
}

/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, `t ← t + 1`.
pub fn update_moments(state: &OptimizerState, g: &GradVector, cfg: &OptimizerConfig) -> Result<OptimizerState> {
    check_len("gradient", g.len(), state.m.len())?;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let m = state.m.iter().zip(g.as_slice()).map(|(m, g)| b1 * m + (1.0 - b1) * g).collect();
    let v = state.v.iter().zip(g.as_slice()).map(|(v, g)| b2 * v + (1.0 - b2) * g * g).collect();
    Ok(OptimizerState { m, v, t: state.t + 1 })
}

/// `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn bias_correct(state: &OptimizerState, cfg: &OptimizerConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if state.t == 0 {
        return Err(usage!("bias correction needs at least one moment update (t = 0)"));
    }
    let t = i32::try_from(state.t).map_err(|_| usage!("step counter {} too large", state.t))?;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    Ok((state.m.iter().map(|m| m / c1).collect(), state.v.iter().map(|v| v / c2).collect()))
}

/// `η·m̂/(√v̂ + ε)` elementwise, with ε outside the root.
fn adaptive_step(mhat: &[f64], vhat: &[f64], cfg: &OptimizerConfig) -> Vec<f64> {
    mhat.iter().zip(vhat).map(|(m, v)| cfg.eta * m / (v.sqrt() + cfg.epsilon)).collect()
}

pub fn adam_step(theta: &ParamVector, state: &OptimizerState, g: &GradVector, cfg: &OptimizerConfig) -> Result<(ParamVector, OptimizerState)> {
    check_len("parameter vector", theta.len(), state.m.len())?;
    let next = update_moments(state, g, cfg)?;
    let (mhat, vhat) = bias_correct(&next, cfg)?;
    let step = adaptive_step(&mhat, &vhat, cfg);
    let out = theta.as_slice().iter().zip(&step).map(|(p, s)| p - s).collect();
    Ok((ParamVector::new(out), next))
}

/// `θ ← θ − α_t(η·m̂/(√v̂+ε) + λθ)` with `α_t` taken from the schedule at `t`.
pub fn adamw_step(
    theta: &ParamVector,
    state: &OptimizerState,
    g: &GradVector,
    cfg: &OptimizerConfig,
    t: usize,
) -> Result<(ParamVector, OptimizerState)> {
    let alpha = cfg.check_decay(t)?;
    check_len("parameter vector", theta.len(), state.m.len())?;
    let next = update_moments(state, g, cfg)?;
    let (mhat, vhat) = bias_correct(&next, cfg)?;
    let step = adaptive_step(&mhat, &vhat, cfg);
    let out = theta.as_slice().iter().zip(&step).map(|(p, s)| p - alpha * (s + cfg.lambda * p)).collect();
    Ok((ParamVector::new(out), next))
}

/// `θ ← (1 − ηλ/b)θ − (η/b)·g_sum` where `g_sum` is the summed per-sample gradient.
pub fn sgd_l2_step(theta: &ParamVector, g_sum: &GradVector, b: usize, cfg: &OptimizerConfig) -> Result<ParamVector> {
    if b == 0 {
        return Err(usage!("batch size must be >= 1"));
    }
    check_len("gradient", g_sum.len(), theta.len())?;
    let bf = b as f64;
    let shrink = 1.0 - cfg.eta * cfg.lambda / bf;
    let rate = cfg.eta / bf;
    Ok(ParamVector::new(theta.as_slice().iter().zip(g_sum.as_slice()).map(|(p, g)| shrink * p - rate * g).collect()))
}

/// Which update rule drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    Sgd,
    Adam,
    AdamW,
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::Sgd => "sgd",
            Rule::Adam => "adam",
            Rule::AdamW => "adamw",
        }
    }

    /// One step from the mean mini-batch gradient `g` of a batch of size `b`.
    pub fn step(
        &self,
        theta: &ParamVector,
        state: &OptimizerState,
        g: &GradVector,
        b: usize,
        cfg: &OptimizerConfig,
    ) -> Result<(ParamVector, OptimizerState)> {
        match self {
            Rule::Adam => adam_step(theta, state, g, cfg),
            Rule::AdamW => adamw_step(theta, state, g, cfg, state.t + 1),
            Rule::Sgd => {
                let g_sum = GradVector::new(g.as_slice().iter().map(|v| v * b as f64).collect());
                let next = sgd_l2_step(theta, &g_sum, b, cfg)?;
                Ok((next, OptimizerState { t: state.t + 1, ..state.clone() }))
            }
        }
    }

    /// Analytic ceiling on `‖θ − A(θ)‖` for the step taken from `state` with
    /// gradient `g`: `η‖m̂‖/ε` for Adam, `α_t(η‖m̂‖/ε + λ‖θ‖)` for AdamW.
    /// `None` for SGD.
    pub fn displacement_ceiling(&self, theta: &ParamVector, state: &OptimizerState, g: &GradVector, cfg: &OptimizerConfig) -> Result<Option<f64>> {
        if *self == Rule::Sgd {
            return Ok(None);
        }
        let next = update_moments(state, g, cfg)?;
        let (mhat, _) = bias_correct(&next, cfg)?;
        let adam = cfg.eta * norm(&mhat) / cfg.epsilon;
        Ok(Some(match self {
            Rule::Adam => adam,
            _ => cfg.schedule.alpha(next.t) * (adam + cfg.lambda * norm(theta.as_slice())),
        }))
    }
}

/// The update map `A^t` at one step: rule, hyperparameters, and the moment
/// estimates carried in from step `t − 1`.
#[derive(Debug, Clone, Copy)]
pub struct StepMap<'a> {
    pub rule: Rule,
    pub cfg: &'a OptimizerConfig,
    pub state: &'a OptimizerState,
    pub batch_size: usize,
}

impl StepMap<'_> {
    /// `A^t(θ)` given the gradient `g = g(θ)`.
    pub fn apply(&self, theta: &ParamVector, g: &GradVector) -> Result<ParamVector> {
        Ok(self.rule.step(theta, self.state, g, self.batch_size, self.cfg)?.0)
    }
}

/// Largest observed `‖θ − A^t(θ)‖`, an empirical lower bound on σ.
pub fn sigma_bound_probe<'a, I>(map: &StepMap<'_>, probes: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a ParamVector, &'a GradVector)>,
{
    let mut best = 0.0f64;
    let mut any = false;
    for (theta, g) in probes {
        any = true;
        let next = map.apply(theta, g)?;
        best = best.max(dist(theta.as_slice(), next.as_slice()));
    }
    if !any {
        return Err(usage!("sigma probe needs at least one point"));
    }
    Ok(best)
}

/// Largest observed `‖A(θ) − A(θ′)‖ / ‖θ − θ′‖` over pairs of
/// `(θ, g(θ))`; coincident pairs are skipped. `None` if every pair coincides.
pub fn expansiveness_probe<'a, I>(map: &StepMap<'_>, pairs: I) -> Result<Option<f64>>
where
    I: IntoIterator<Item = ((&'a ParamVector, &'a GradVector), (&'a ParamVector, &'a GradVector))>,
{
    let mut best: Option<f64> = None;
    for ((a, ga), (b, gb)) in pairs {
        let gap = dist(a.as_slice(), b.as_slice());
        if gap == 0.0 {
            continue;
        }
        let ratio = dist(map.apply(a, ga)?.as_slice(), map.apply(b, gb)?.as_slice()) / gap;
        best = Some(best.map_or(ratio, |r| r.max(ratio)));
    }
    Ok(best)
}
