//! Closed-form generalization bounds for Adam and AdamW.
//!
//! Every confidence term uses `log(2/δ)`.

use std::fmt;

use crate::error::{usage, Result};
use crate::math::norm;
use crate::models::ParamVector;

pub const LOG_CONVENTION: &str = "log(2/delta)";

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    /// Lipschitz constant of the loss.
    pub gamma: f64,
    /// Largest loss value.
    pub l_max: f64,
    pub eta: f64,
    pub b: usize,
    pub steps: usize,
    pub n: usize,
    pub delta: f64,
    /// Lower bound on the adaptive denominator; normally the optimizer's ε.
    pub c: f64,
    pub lambda: f64,
    /// `α_1..α_T`; only the AdamW bounds read it.
    pub alpha_schedule: Vec<f64>,
    pub theta_sup: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = [("gamma", self.gamma), ("l_max", self.l_max), ("eta", self.eta), ("theta_sup", self.theta_sup)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(usage!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(usage!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(usage!("delta must lie in (0,1), got {}", self.delta));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(usage!("c must lie in (0,1), got {}", self.c));
        }
        if self.steps == 0 {
            return Err(usage!("T must be >= 1"));
        }
        if self.b == 0 || self.b >= self.n {
            return Err(usage!("need 0 < b < N so that k = N/b > 1, got b={} N={}", self.b, self.n));
        }
        Ok(())
    }

    fn validate_schedule(&self) -> Result<()> {
        if self.alpha_schedule.len() != self.steps {
            return Err(usage!("alpha schedule has {} entries, expected T={}", self.alpha_schedule.len(), self.steps));
        }
        for (t, &a) in self.alpha_schedule.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(usage!("alpha_{} = {a} outside (0,1]", t + 1));
            }
            if a * self.lambda >= 1.0 {
                return Err(usage!("alpha_{} * lambda = {} must be < 1", t + 1, a * self.lambda));
            }
        }
        Ok(())
    }

    fn log_term(&self) -> f64 {
        (2.0 / self.delta).ln()
    }

    /// `L·√(log(2/δ)/(2N))`
    pub fn concentration_term(&self) -> f64 {
        self.l_max * (self.log_term() / (2.0 * self.n as f64)).sqrt()
    }

    /// `Σ_t α_t(ηγ²/c + γλ‖θ‖_sup)`
    fn adamw_sum(&self) -> f64 {
        let per_step = self.eta * self.gamma * self.gamma / self.c + self.gamma * self.lambda * self.theta_sup;
        self.alpha_schedule.iter().map(|a| a * per_step).sum()
    }

    /// Copy with `(γ, L)` replaced.
    pub fn with_loss(&self, gamma: f64, l_max: f64) -> Self {
        BoundInputs { gamma, l_max, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Theorem {
    /// Adam stability constants.
    Adam,
    /// Adam high-probability generalization bound.
    AdamGen,
    /// AdamW stability constants.
    AdamW,
    /// AdamW high-probability generalization bound.
    AdamWGen,
}

impl Theorem {
    pub fn tag(&self) -> &'static str {
        match self {
            Theorem::Adam => "thm1",
            Theorem::AdamGen => "thm2",
            Theorem::AdamW => "thm3",
            Theorem::AdamWGen => "thm4",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "thm1" => Some(Theorem::Adam),
            "thm2" => Some(Theorem::AdamGen),
            "thm3" => Some(Theorem::AdamW),
            "thm4" => Some(Theorem::AdamWGen),
            _ => None,
        }
    }
}

impl fmt::Display for Theorem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub theorem: Theorem,
    pub beta_bound: f64,
    pub rho_bound: f64,
    pub gen_error_bound: f64,
    /// `combine_eq13(ρ, β, …)` on this report's constants. Equal to
    /// `gen_error_bound` for Adam; differs for AdamW, whose printed bound
    /// omits the leading `1 +` on the β term.
    pub composed_bound: f64,
}

impl BoundReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "theorem={}\nbeta_bound={:e}\nrho_bound={:e}\ngen_error_bound={:e}\ncomposed_bound={:e}\nlog_convention={}\n",
            self.theorem, self.beta_bound, self.rho_bound, self.gen_error_bound, self.composed_bound, LOG_CONVENTION
        )
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "theorem          {}", self.theorem)?;
        writeln!(f, "beta_bound       {:>16.6e}", self.beta_bound)?;
        writeln!(f, "rho_bound        {:>16.6e}", self.rho_bound)?;
        writeln!(f, "gen_error_bound  {:>16.6e}", self.gen_error_bound)?;
        write!(f, "composed_bound   {:>16.6e}", self.composed_bound)
    }
}

/// Adam: `β ≤ (2η/c)·bTγ²/N`, `ρ ≤ (8η/c)·(bγ/N)²`.
pub fn thm1_bounds(input: &BoundInputs) -> Result<(f64, f64)> {
    input.validate()?;
    let (b, t, n) = (input.b as f64, input.steps as f64, input.n as f64);
    let lead = input.eta / input.c;
    let beta = 2.0 * lead * (b * t * input.gamma * input.gamma / n);
    let bg = b * input.gamma / n;
    let rho = 8.0 * lead * bg * bg;
    Ok((beta, rho))
}

/// Adam generalization bound.
pub fn thm2_bound(input: &BoundInputs) -> Result<f64> {
    input.validate()?;
    let (b, t, n) = (input.b as f64, input.steps as f64, input.n as f64);
    let log = input.log_term();
    let bg = b * input.gamma / n;
    let inner = 4.0 * bg * bg * (t * log).sqrt() + (b * t * input.gamma * input.gamma / n) * (1.0 + (2.0 * n * log).sqrt());
    Ok(2.0 * input.eta / input.c * inner + input.concentration_term())
}

/// AdamW: `β ≤ (2bT/N)·S`, `ρ ≤ (8b²/N²)·S` with `S = Σ_t α_t(ηγ²/c + γλ‖θ‖_sup)`.
pub fn thm3_bounds(input: &BoundInputs) -> Result<(f64, f64)> {
    input.validate()?;
    input.validate_schedule()?;
    let (b, t, n) = (input.b as f64, input.steps as f64, input.n as f64);
    let s = input.adamw_sum();
    Ok((2.0 * b * t / n * s, 8.0 * b * b / (n * n) * s))
}

/// AdamW generalization bound, evaluated as printed.
pub fn thm4_bound(input: &BoundInputs) -> Result<f64> {
    input.validate()?;
    input.validate_schedule()?;
    let (b, t, n) = (input.b as f64, input.steps as f64, input.n as f64);
    let log = input.log_term();
    let s = input.adamw_sum();
    let spread = 4.0 * b / n * (t * log).sqrt() + t * (2.0 * n * log).sqrt();
    Ok(2.0 * b / n * s * spread + input.concentration_term())
}

/// `ρ√(T log(2/δ)) + β(1 + √(2N log(2/δ))) + L√(log(2/δ)/(2N))`.
pub fn combine_eq13(rho: f64, beta: f64, l_max: f64, steps: usize, n: usize, delta: f64) -> Result<f64> {
    for (name, v) in [("rho", rho), ("beta", beta), ("L", l_max)] {
        if !(v >= 0.0) {
            return Err(usage!("{name} must be >= 0, got {v}"));
        }
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(usage!("delta must lie in (0,1), got {delta}"));
    }
    if n == 0 {
        return Err(usage!("N must be >= 1"));
    }
    let log = (2.0 / delta).ln();
    let (t, n) = (steps as f64, n as f64);
    Ok(rho * (t * log).sqrt() + beta * (1.0 + (2.0 * n * log).sqrt()) + l_max * (log / (2.0 * n)).sqrt())
}

/// Evaluates both the stability constants and the generalization bound of
/// the optimizer family that `theorem` belongs to.
pub fn evaluate(theorem: Theorem, input: &BoundInputs) -> Result<BoundReport> {
    let (beta, rho, gen) = match theorem {
        Theorem::Adam | Theorem::AdamGen => {
            let (beta, rho) = thm1_bounds(input)?;
            (beta, rho, thm2_bound(input)?)
        }
        Theorem::AdamW | Theorem::AdamWGen => {
            let (beta, rho) = thm3_bounds(input)?;
            (beta, rho, thm4_bound(input)?)
        }
    };
    let composed = combine_eq13(rho, beta, input.l_max, input.steps, input.n, input.delta)?;
    Ok(BoundReport { theorem, beta_bound: beta, rho_bound: rho, gen_error_bound: gen, composed_bound: composed })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComparison {
    pub theorem: Theorem,
    pub kl: f64,
    pub gjm: f64,
}

impl LossComparison {
    pub fn gjm_smaller(&self) -> bool {
        self.gjm < self.kl
    }

    /// `bound_KL / bound_GJM`.
    pub fn factor(&self) -> f64 {
        self.kl / self.gjm
    }
}

/// Evaluates `theorem` for two inputs that differ only in `(γ, L)`.
pub fn compare_losses(in_kl: &BoundInputs, in_gjm: &BoundInputs, theorem: Theorem) -> Result<LossComparison> {
    if *in_kl != in_gjm.with_loss(in_kl.gamma, in_kl.l_max) {
        return Err(usage!("loss comparison requires identical settings apart from gamma and L"));
    }
    let pick = |input: &BoundInputs| -> Result<f64> {
        let rep = evaluate(theorem, input)?;
        Ok(match theorem {
            Theorem::Adam | Theorem::AdamW => rep.beta_bound,
            Theorem::AdamGen | Theorem::AdamWGen => rep.gen_error_bound,
        })
    };
    Ok(LossComparison { theorem, kl: pick(in_kl)?, gjm: pick(in_gjm)? })
}

/// `1.5 × max_t ‖θ_t‖` over a trajectory.
pub fn theta_sup_from_trajectory<'a, I>(trajectory: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut best: Option<f64> = None;
    for theta in trajectory {
        let n = norm(theta.as_slice());
        best = Some(best.map_or(n, |b: f64| b.max(n)));
    }
    match best {
        Some(b) if b > 0.0 => Ok(1.5 * b),
        Some(_) => Err(usage!("trajectory norms are all zero")),
        None => Err(usage!("empty trajectory")),
    }
}
