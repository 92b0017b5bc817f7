//! TOML experiment configuration.
//!
//! ```toml
//! experiment = "stability"
//! seed = 7
//!
//! [data]
//! n = 600
//!
//! [optimizer]
//! rule = "adam"
//! eta = 1e-3
//!
//! [[loss]]
//! kind = "kl"
//!
//! [[loss]]
//! kind = "gjm"
//! alpha = 0.5
//!
//! [run]
//! steps = 100
//! b = 20
//! ```

use std::fmt;
use std::path::PathBuf;

use lipstab::{Arch, LossSpec, ModelSpec, OptimizerConfig, Rule, Schedule, Theorem};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl ConfigError {
    fn new(msg: impl Into<String>) -> Self {
        ConfigError { line: None, msg: msg.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Gradcheck,
    Stability,
    Bdc,
    Bounds,
    Sweep,
    Genplot,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Bdc => "bdc",
            ExperimentKind::Bounds => "bounds",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Genplot => "genplot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NeighborKind {
    /// One batch replaced by freshly drawn samples.
    #[default]
    Fresh,
    /// The neighbour equals the original set.
    Identical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataBlock {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub sigma: f64,
    pub val_size: usize,
    pub neighbor: NeighborKind,
    pub neighbor_batch: usize,
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock { n: 600, d: 8, classes: 10, sigma: 2.0, val_size: 500, neighbor: NeighborKind::Fresh, neighbor_batch: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub arch: ArchKind,
    pub hidden: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock { arch: ArchKind::Linear, hidden: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Sgd,
    #[default]
    Adam,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerBlock {
    pub rule: RuleKind,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub schedule: ScheduleKind,
    /// Multiplier of the constant schedule.
    pub alpha: f64,
    /// Final value of the cosine schedule, which starts at 1.
    pub floor: f64,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerBlock {
            rule: RuleKind::Adam,
            eta: d.eta,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            lambda: d.lambda,
            schedule: ScheduleKind::Constant,
            alpha: 1.0,
            floor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Kl,
    Gjm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBlock {
    pub kind: LossKind,
    #[serde(default = "default_clamp")]
    pub clamp_min: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Per-loss learning rate; falls back to `optimizer.eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

fn default_clamp() -> f64 {
    lipstab::losses::DEFAULT_KL_CLAMP
}

fn default_alpha() -> f64 {
    lipstab::losses::DEFAULT_GJM_ALPHA
}

impl LossBlock {
    pub fn spec(&self) -> LossSpec {
        match self.kind {
            LossKind::Kl => LossSpec::Kl { clamp_min: self.clamp_min },
            LossKind::Gjm => LossSpec::Gjm { alpha: self.alpha },
        }
    }

    /// `kl`, `gjm`, or `gjm-a<alpha>` for a non-default exponent.
    pub fn label(&self) -> String {
        match self.kind {
            LossKind::Kl if self.clamp_min == default_clamp() => "kl".into(),
            LossKind::Kl => format!("kl-c{}", self.clamp_min),
            LossKind::Gjm if self.alpha == default_alpha() => "gjm".into(),
            LossKind::Gjm => format!("gjm-a{}", self.alpha),
        }
    }
}

fn default_losses() -> Vec<LossBlock> {
    vec![
        LossBlock { kind: LossKind::Kl, clamp_min: default_clamp(), alpha: default_alpha(), eta: None },
        LossBlock { kind: LossKind::Gjm, clamp_min: default_clamp(), alpha: default_alpha(), eta: None },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    /// `T` for twin trainings.
    pub steps: usize,
    /// Passes over the partition for training curves.
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub n_seeds: usize,
    pub probe_size: usize,
    pub delta: f64,
    pub cs_threshold: usize,
    /// Random instances per gradient check.
    pub trials: usize,
    /// Also estimate ρ̂ in stability runs.
    pub rho: bool,
    /// Record the probe loss gap at every step.
    pub per_step_gaps: bool,
}

impl Default for RunBlock {
    fn default() -> Self {
        RunBlock {
            steps: 100,
            epochs: 20,
            b: None,
            k: None,
            n_seeds: 10,
            probe_size: 512,
            delta: 0.05,
            cs_threshold: lipstab::stability::DEFAULT_CS_THRESHOLD,
            trials: 20,
            rho: true,
            per_step_gaps: true,
        }
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileBlock {
    pub logit_bound: f64,
    pub n_samples: usize,
}

impl Default for ProfileBlock {
    fn default() -> Self {
        ProfileBlock { logit_bound: lipstab::losses::DEFAULT_LOGIT_BOUND, n_samples: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// Dotted path such as `run.steps` or `optimizer.eta`.
    pub field: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsBlock {
    /// `thm1`..`thm4`, or `all`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_sup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_schedule: Option<Vec<f64>>,
}

impl BoundsBlock {
    pub fn theorems(&self) -> Vec<Theorem> {
        match self.theorem.as_deref() {
            None | Some("all") => vec![Theorem::AdamGen, Theorem::AdamWGen],
            Some(tag) => Theorem::from_tag(tag).into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; not part of the echo.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default = "default_losses")]
    pub loss: Vec<LossBlock>,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub profile: ProfileBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsBlock>,
}

/// Where a validation failure points in the source text.
struct Site {
    section: &'static str,
    index: Option<usize>,
    key: &'static str,
}

fn at(section: &'static str, key: &'static str) -> Site {
    Site { section, index: None, key }
}

type Check = std::result::Result<(), (Site, String)>;

fn ensure(cond: bool, site: Site, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err((site, msg()))
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending line when known.
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of(src, s.start)),
            msg: e.message().trim().to_string(),
        })?;
        cfg.validate().map_err(|(site, msg)| ConfigError { line: locate(src, &site), msg })?;
        Ok(cfg)
    }

    /// The resolved configuration as TOML. Parsing the echo gives back an
    /// equal configuration (apart from the output directory).
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `(b, k)` after resolving whichever of the two is given.
    pub fn batch_shape(&self) -> (usize, usize) {
        let n = self.data.n;
        match (self.run.b, self.run.k) {
            (_, Some(k)) => (n.div_ceil(k.max(1)), k),
            (b, None) => {
                let b = b.unwrap_or(DEFAULT_BATCH_SIZE).max(1);
                (b, n.div_ceil(b))
            }
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let (d, classes) = (self.data.d, self.data.classes);
        let arch = match self.model.arch {
            ArchKind::Linear => Arch::LinearSoftmax { d, classes },
            ArchKind::Mlp => Arch::Mlp { d, hidden: self.model.hidden, classes },
        };
        ModelSpec::new(arch, self.seed).expect("validated architecture")
    }

    pub fn rule(&self) -> Rule {
        match self.optimizer.rule {
            RuleKind::Sgd => Rule::Sgd,
            RuleKind::Adam => Rule::Adam,
            RuleKind::Adamw => Rule::AdamW,
        }
    }

    /// The AdamW multiplier for a run of `steps` steps.
    pub fn schedule(&self, steps: usize) -> Schedule {
        match self.optimizer.schedule {
            ScheduleKind::Constant => Schedule::Constant(self.optimizer.alpha),
            ScheduleKind::Cosine => Schedule::Cosine { steps, floor: self.optimizer.floor },
        }
    }

    /// Optimizer settings for `loss` over `steps` steps, honouring a
    /// per-loss learning rate.
    pub fn optimizer_config(&self, loss: &LossBlock, steps: usize) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            eta: loss.eta.unwrap_or(o.eta),
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            lambda: o.lambda,
            schedule: self.schedule(steps),
        }
    }

    /// Validation without source positions, for configs built in code.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.validate().map_err(|(_, msg)| ConfigError::new(msg))
    }

    fn validate(&self) -> Check {
        let d = &self.data;
        ensure(d.n >= 2, at("data", "n"), || format!("n must be >= 2, got {}", d.n))?;
        ensure(d.d >= 1, at("data", "d"), || "d must be >= 1".into())?;
        ensure(d.classes >= 2, at("data", "classes"), || format!("classes must be >= 2, got {}", d.classes))?;
        ensure(d.sigma > 0.0 && d.sigma.is_finite(), at("data", "sigma"), || format!("sigma must be positive, got {}", d.sigma))?;
        ensure(d.val_size >= 1, at("data", "val_size"), || "val_size must be >= 1".into())?;
        if let ArchKind::Mlp = self.model.arch {
            ensure(self.model.hidden >= 1, at("model", "hidden"), || "hidden must be >= 1".into())?;
        }

        let o = &self.optimizer;
        ensure(o.eta > 0.0 && o.eta.is_finite(), at("optimizer", "eta"), || format!("eta must be positive, got {}", o.eta))?;
        ensure(o.beta1 > 0.0 && o.beta1 < 1.0, at("optimizer", "beta1"), || format!("beta1 must lie in (0,1), got {}", o.beta1))?;
        ensure(o.beta2 > 0.0 && o.beta2 < 1.0, at("optimizer", "beta2"), || format!("beta2 must lie in (0,1), got {}", o.beta2))?;
        ensure(o.epsilon > 0.0 && o.epsilon < 1.0, at("optimizer", "epsilon"), || format!("epsilon must lie in (0,1), got {}", o.epsilon))?;
        ensure(o.lambda >= 0.0 && o.lambda.is_finite(), at("optimizer", "lambda"), || format!("lambda must be >= 0, got {}", o.lambda))?;
        ensure(o.alpha > 0.0 && o.alpha <= 1.0, at("optimizer", "alpha"), || format!("alpha must lie in (0,1], got {}", o.alpha))?;
        ensure(o.floor > 0.0 && o.floor <= 1.0, at("optimizer", "floor"), || format!("floor must lie in (0,1], got {}", o.floor))?;
        ensure(o.alpha.max(o.floor) * o.lambda < 1.0 && o.lambda < 1.0 || o.rule != RuleKind::Adamw, at("optimizer", "lambda"), || format!("alpha_t * lambda must stay below 1 (lambda = {})", o.lambda))?;

        ensure(!self.loss.is_empty(), at("", "loss"), || "at least one [[loss]] block is required".into())?;
        for (i, l) in self.loss.iter().enumerate() {
            let site = |key| Site { section: "loss", index: Some(i), key };
            ensure(l.clamp_min > 0.0 && l.clamp_min < 1.0, site("clamp_min"), || format!("clamp_min must lie in (0,1), got {}", l.clamp_min))?;
            ensure(l.alpha > 0.0 && l.alpha <= 1.0, site("alpha"), || format!("alpha must lie in (0,1], got {}", l.alpha))?;
            if let Some(eta) = l.eta {
                ensure(eta > 0.0 && eta.is_finite(), site("eta"), || format!("eta must be positive, got {eta}"))?;
            }
            let label = l.label();
            ensure(self.loss[..i].iter().all(|o| o.label() != label), site("kind"), || format!("duplicate loss block {label}"))?;
        }

        let r = &self.run;
        ensure(r.steps >= 1, at("run", "steps"), || "steps must be >= 1".into())?;
        ensure(r.epochs >= 1, at("run", "epochs"), || "epochs must be >= 1".into())?;
        ensure(r.n_seeds >= 1, at("run", "n_seeds"), || "n_seeds must be >= 1".into())?;
        ensure(r.probe_size >= 1, at("run", "probe_size"), || "probe_size must be >= 1".into())?;
        ensure(r.delta > 0.0 && r.delta < 1.0, at("run", "delta"), || format!("delta must lie in (0,1), got {}", r.delta))?;
        ensure(r.cs_threshold >= 1, at("run", "cs_threshold"), || "cs_threshold must be >= 1".into())?;
        ensure(r.trials >= 1, at("run", "trials"), || "trials must be >= 1".into())?;
        if let Some(b) = r.b {
            ensure(b >= 1, at("run", "b"), || "b must be >= 1".into())?;
        }
        let (b, k) = self.batch_shape();
        let key = if r.k.is_some() { "k" } else { "b" };
        ensure(1 < k && k < d.n, at("run", key), || format!("need 1 < k < N, got k={k} (b={b}, N={})", d.n))?;
        if let (Some(given), Some(_)) = (r.b, r.k) {
            ensure(given == b, at("run", "b"), || format!("b={given} inconsistent with k={k} and N={}: padded batches hold {b}", d.n))?;
        }
        ensure(d.neighbor_batch < k, at("data", "neighbor_batch"), || format!("neighbor_batch must be < k={k}"))?;

        let p = &self.profile;
        ensure(p.logit_bound > 0.0 && p.logit_bound.is_finite(), at("profile", "logit_bound"), || "logit_bound must be positive".into())?;
        ensure(p.n_samples >= 1, at("profile", "n_samples"), || "n_samples must be >= 1".into())?;

        match (&self.sweep, self.experiment) {
            (None, ExperimentKind::Sweep) => return Err((at("", "experiment"), "sweep experiment needs a [sweep] block".into())),
            (Some(s), _) => {
                ensure(!s.values.is_empty(), at("sweep", "values"), || "sweep needs at least one value".into())?;
                ensure(s.values.iter().all(|v| v.is_finite()), at("sweep", "values"), || "sweep values must be finite".into())?;
            }
            _ => {}
        }
        match (&self.bounds, self.experiment) {
            (None, ExperimentKind::Bounds) => return Err((at("", "experiment"), "bounds experiment needs a [bounds] block".into())),
            (Some(bb), _) => {
                ensure(!bb.theorems().is_empty(), at("bounds", "theorem"), || format!("unknown theorem {:?}; use thm1..thm4 or all", bb.theorem.as_deref().unwrap_or("")))?;
                for (key, v) in [("gamma", bb.gamma), ("l_max", bb.l_max), ("eta", bb.eta), ("theta_sup", bb.theta_sup)] {
                    if let Some(v) = v {
                        ensure(v > 0.0 && v.is_finite(), at("bounds", key), || format!("{key} must be positive, got {v}"))?;
                    }
                }
                ensure(bb.gamma.is_some() == bb.l_max.is_some(), at("bounds", "gamma"), || "gamma and l_max must be given together".into())?;
            }
            _ => {}
        }
        Ok(())
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// First line assigning `site.key` inside the named section.
fn locate(src: &str, site: &Site) -> Option<usize> {
    let mut section = String::new();
    let mut array_index: Option<usize> = None;
    let mut loss_count = 0usize;
    for (no, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix("[[").and_then(|l| l.split("]]").next()) {
            section = h.trim().to_string();
            array_index = (section == "loss").then(|| {
                loss_count += 1;
                loss_count - 1
            });
            if site.key.is_empty() && section == site.section && array_index == site.index {
                return Some(no + 1);
            }
            continue;
        }
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            section = h.trim().to_string();
            array_index = None;
            continue;
        }
        if section != site.section || array_index != site.index {
            continue;
        }
        let key = line.split('=').next().map(str::trim);
        if key == Some(site.key) && line.contains('=') {
            return Some(no + 1);
        }
    }
    // Fall back to the section header when the key was defaulted.
    if site.section.is_empty() {
        return None;
    }
    let mut seen = 0usize;
    src.lines().enumerate().find_map(|(no, raw)| {
        let line = raw.trim();
        let hit = match site.index {
            Some(i) => {
                let is = line.starts_with("[[") && line.trim_start_matches('[').trim_end_matches(']').trim() == site.section;
                if is {
                    seen += 1;
                }
                is && seen == i + 1
            }
            None => line.trim_start_matches('[').trim_end_matches(']').trim() == site.section && line.starts_with('[') && !line.starts_with("[["),
        };
        hit.then_some(no + 1)
    })
}
