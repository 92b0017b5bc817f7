//! Training loops, twin trainings, and empirical stability estimates.
//!
//! A twin training advances two models in lockstep from the same
//! initialization and records, at every step `t`:
//!
//! * `Δ_t = ‖θ_t − θ'_t‖`,
//! * `σ̂_t`, the larger of the two step displacements `‖θ_{t−1} − θ_t‖`,
//! * `τ̂_t`, the expansion ratio of run A's update map on the pair
//!   `(θ_{t−1}, θ'_{t−1})`,
//! * whether both runs applied the same update map (same batch contents and
//!   identical moment estimates).
//!
//! Those records feed the growth-recursion audit and the CSV exports.

use crate::data::{sample_sequence, swap_two, BatchSequence, Dataset, Partition, Sample};
use crate::error::{usage, Result};
use crate::exec::Exec;
use crate::losses::{batch_loss, LossSpec};
use crate::math::{argmax, dist};
use crate::models::{GradVector, ModelSpec, ParamVector};
use crate::optim::{OptimizerConfig, OptimizerState, Rule};
use crate::rng::RngStream;
use crate::stats::median;

use rand::Rng;

/// Everything that determines one training trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TrainRun<'a> {
    pub model: ModelSpec,
    pub dataset: &'a Dataset,
    pub partition: &'a Partition,
    pub sequence: &'a BatchSequence,
    pub rule: Rule,
    pub cfg: OptimizerConfig,
    pub loss: LossSpec,
}

/// One optimizer step as seen by an observer.
#[derive(Debug)]
pub struct StepRecord<'a> {
    /// 1-based step number.
    pub t: usize,
    pub batch: usize,
    pub before: &'a ParamVector,
    pub after: &'a ParamVector,
    pub grad: &'a GradVector,
    /// Moment estimates after the step.
    pub state: &'a OptimizerState,
}

impl<'a> TrainRun<'a> {
    pub fn steps(&self) -> usize {
        self.sequence.len()
    }

    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.loss.validate()?;
        if self.sequence.k() != self.partition.k() {
            return Err(usage!("sequence draws from {} batches but the partition has {}", self.sequence.k(), self.partition.k()));
        }
        let meta = self.dataset.meta();
        if meta.dim != self.model.arch.input_dim() || meta.classes != self.model.arch.classes() {
            return Err(usage!("model {:?} does not fit data with d={} M={}", self.model.arch, meta.dim, meta.classes));
        }
        if let Some(&i) = self.partition.batches().iter().flatten().find(|&&i| i >= self.dataset.len()) {
            return Err(usage!("partition references sample {i} but the dataset has {}", self.dataset.len()));
        }
        Ok(())
    }

    fn batch(&self, r: usize) -> impl Iterator<Item = &'a Sample> + Clone + 'a {
        self.dataset.select(self.partition.batch(r))
    }

    fn step(&self, theta: &ParamVector, state: &OptimizerState, t: usize) -> Result<(ParamVector, OptimizerState, GradVector)> {
        let r = self.sequence.indices()[t - 1];
        let g = self.model.loss_grad(theta, self.batch(r), &self.loss)?;
        let (next, st) = self.rule.step(theta, state, &g, self.partition.batch_size(), &self.cfg)?;
        Ok((next, st, g))
    }
}

/// Runs the whole sequence, calling `observe` after every step.
pub fn train_observed<F>(run: &TrainRun<'_>, mut observe: F) -> Result<ParamVector>
where
    F: FnMut(&StepRecord<'_>),
{
    run.validate()?;
    let mut theta = run.model.init_params();
    let mut state = OptimizerState::new(theta.len());
    for t in 1..=run.steps() {
        let (next, st, g) = run.step(&theta, &state, t)?;
        observe(&StepRecord { t, batch: run.sequence.indices()[t - 1], before: &theta, after: &next, grad: &g, state: &st });
        theta = next;
        state = st;
    }
    Ok(theta)
}

/// `θ_T`. With an empty sequence this is the initialization.
pub fn train(run: &TrainRun<'_>) -> Result<ParamVector> {
    train_observed(run, |_| {})
}

/// Snapshot spacing: every step up to 1000 steps, then `⌈T/1000⌉`.
pub fn snapshot_stride(steps: usize) -> usize {
    if steps <= 1000 {
        1
    } else {
        steps.div_ceil(1000)
    }
}

/// `(t, θ_t)` snapshots including `t = 0` and `t = T`.
pub fn train_trajectory(run: &TrainRun<'_>) -> Result<Vec<(usize, ParamVector)>> {
    let stride = snapshot_stride(run.steps());
    let mut snaps = vec![(0, run.model.init_params())];
    let last = run.steps();
    train_observed(run, |rec| {
        if rec.t % stride == 0 || rec.t == last {
            snaps.push((rec.t, rec.after.clone()));
        }
    })?;
    Ok(snaps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinStep {
    pub t: usize,
    pub delta: f64,
    pub sigma_hat: f64,
    /// `None` when `Δ_{t−1} = 0`.
    pub tau_hat: Option<f64>,
    pub same_rule: bool,
    /// Largest pointwise loss gap over the probe set at this step, if probes were given.
    pub loss_gap_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinTrace {
    pub steps: Vec<TwinStep>,
    pub final_a: ParamVector,
    pub final_b: ParamVector,
}

impl TwinTrace {
    /// `Δ_0, Δ_1, …, Δ_T` with `Δ_0 = 0`.
    pub fn delta_trajectory(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.steps.iter().map(|s| s.delta)).collect()
    }
}

fn same_samples<'a>(a: impl Iterator<Item = &'a Sample>, b: impl Iterator<Item = &'a Sample>) -> bool {
    a.eq(b)
}

/// Largest `|ℓ(f_a(x), y) − ℓ(f_b(x), y)|` and the per-probe gaps.
pub fn probe_gaps(model: &ModelSpec, a: &ParamVector, b: &ParamVector, probes: &[Sample], loss: &LossSpec) -> Result<Vec<f64>> {
    probes
        .iter()
        .map(|s| {
            let la = loss.value(model.forward(a, &s.x)?.probs(), s.y.probs())?;
            let lb = loss.value(model.forward(b, &s.x)?.probs(), s.y.probs())?;
            Ok((la - lb).abs())
        })
        .collect()
}

/// Trains both runs in lockstep. The runs must share model, rule,
/// hyperparameters, loss and sequence length, and their partitions must
/// have the same shape; datasets and sequences may differ.
pub fn twin_train(a: &TrainRun<'_>, b: &TrainRun<'_>, probes: Option<&[Sample]>) -> Result<TwinTrace> {
    a.validate()?;
    b.validate()?;
    if a.model != b.model || a.rule != b.rule || a.cfg != b.cfg || a.loss != b.loss {
        return Err(usage!("twin runs must share model, optimizer and loss"));
    }
    if a.steps() != b.steps() || a.partition.k() != b.partition.k() || a.partition.batch_size() != b.partition.batch_size() {
        return Err(usage!("twin runs must share sequence length and partition shape"));
    }
    let mut ta = a.model.init_params();
    let mut tb = ta.clone();
    let mut sa = OptimizerState::new(ta.len());
    let mut sb = sa.clone();
    let mut steps = Vec::with_capacity(a.steps());
    let mut prev_delta = 0.0;
    for t in 1..=a.steps() {
        let (ra, rb) = (a.sequence.indices()[t - 1], b.sequence.indices()[t - 1]);
        let same_rule = sa == sb && same_samples(a.batch(ra), b.batch(rb));
        let (na, nsa, _) = a.step(&ta, &sa, t)?;
        let (nb, nsb, _) = b.step(&tb, &sb, t)?;
        let sigma_hat = dist(ta.as_slice(), na.as_slice()).max(dist(tb.as_slice(), nb.as_slice()));
        let tau_hat = if prev_delta > 0.0 {
            // run A's map applied to θ'_{t−1}
            let (cross, _, _) = a.step(&tb, &sa, t)?;
            Some(dist(na.as_slice(), cross.as_slice()) / prev_delta)
        } else {
            None
        };
        let delta = dist(na.as_slice(), nb.as_slice());
        let loss_gap_max = match probes {
            Some(p) => Some(probe_gaps(&a.model, &na, &nb, p, &a.loss)?.into_iter().fold(0.0, f64::max)),
            None => None,
        };
        steps.push(TwinStep { t, delta, sigma_hat, tau_hat, same_rule, loss_gap_max });
        prev_delta = delta;
        (ta, sa, tb, sb) = (na, nsa, nb, nsb);
    }
    Ok(TwinTrace { steps, final_a: ta, final_b: tb })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthCase {
    /// `Δ_t ≤ Δ_{t−1} + 2σ̂_t`
    Bounded,
    /// `Δ_t ≤ τ̂_t·Δ_{t−1}` on equal-rule steps
    Expansive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthAudit {
    pub checked: usize,
    pub equal_rule_steps: usize,
    pub violations: Vec<(usize, GrowthCase)>,
}

impl GrowthAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks both growth-recursion cases on every recorded step with slack `tol`.
pub fn audit_growth(trace: &TwinTrace, tol: f64) -> GrowthAudit {
    let mut audit = GrowthAudit { checked: 0, equal_rule_steps: 0, violations: Vec::new() };
    let mut prev = 0.0;
    for s in &trace.steps {
        audit.checked += 1;
        if s.delta > prev + 2.0 * s.sigma_hat + tol {
            audit.violations.push((s.t, GrowthCase::Bounded));
        }
        if s.same_rule {
            audit.equal_rule_steps += 1;
            let cap = s.tau_hat.map_or(0.0, |tau| tau * prev);
            if s.delta > cap + tol {
                audit.violations.push((s.t, GrowthCase::Expansive));
            }
        }
        prev = s.delta;
    }
    audit
}

/// Fixed inputs of a stability experiment: the pair of neighbouring
/// training sets, the model and the optimizer.
#[derive(Debug, Clone, Copy)]
pub struct StabilitySetup<'a> {
    pub model: ModelSpec,
    pub rule: Rule,
    pub cfg: OptimizerConfig,
    pub loss: LossSpec,
    pub dataset: &'a Dataset,
    pub partition: &'a Partition,
    pub neighbor_dataset: &'a Dataset,
    pub neighbor_partition: &'a Partition,
    pub steps: usize,
    /// Root seed for the per-seed sequences.
    pub seed: u64,
    /// Record the largest probe loss gap at every step, not only at `θ_T`.
    pub per_step_gaps: bool,
}

impl<'a> StabilitySetup<'a> {
    fn run(&self, dataset: &'a Dataset, partition: &'a Partition, sequence: &'a BatchSequence) -> TrainRun<'a> {
        TrainRun { model: self.model, dataset, partition, sequence, rule: self.rule, cfg: self.cfg, loss: self.loss }
    }

    fn step_probes<'p>(&self, probes: &'p [Sample]) -> Option<&'p [Sample]> {
        self.per_step_gaps.then_some(probes)
    }

    /// Sequence for seed index `i`; also keys the swap positions for ρ̂.
    pub fn sequence_stream(&self, i: usize) -> RngStream {
        RngStream::new(self.seed, format!("R/{i}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed_index: usize,
    pub trace: TwinTrace,
    /// Per-probe loss gaps at `θ_T`.
    pub probe_gaps: Vec<f64>,
    /// Swap positions, for ρ̂ runs.
    pub swap: Option<(usize, usize)>,
}

impl SeedOutcome {
    pub fn max_gap(&self) -> f64 {
        self.probe_gaps.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateKind {
    Beta,
    Rho,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub kind: EstimateKind,
    pub value: f64,
    pub n_seeds: usize,
    pub probe_size: usize,
    /// Sorted by seed index.
    pub seeds: Vec<SeedOutcome>,
}

impl StabilityReport {
    /// min / median / max of the per-seed largest probe gap.
    pub fn seed_spread(&self) -> (f64, f64, f64) {
        let v: Vec<f64> = self.seeds.iter().map(SeedOutcome::max_gap).collect();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(0.0, f64::max);
        (min, median(&v).unwrap_or(0.0), max)
    }

    /// `Δ_0..Δ_T` of the first seed.
    pub fn delta_trajectory(&self) -> Vec<f64> {
        self.seeds.first().map(|s| s.trace.delta_trajectory()).unwrap_or_default()
    }
}

fn check_estimate_inputs(setup: &StabilitySetup<'_>, n_seeds: usize, probes: &[Sample]) -> Result<()> {
    if n_seeds == 0 {
        return Err(usage!("n_seeds must be >= 1"));
    }
    if probes.is_empty() {
        return Err(usage!("probe set must be non-empty"));
    }
    if setup.steps == 0 {
        return Err(usage!("steps must be >= 1"));
    }
    Ok(())
}

/// β̂: for each seed draw `R`, twin-train on the neighbouring partitions,
/// average the per-probe loss gaps over seeds, then take the max over probes.
pub fn beta_hat(setup: &StabilitySetup<'_>, n_seeds: usize, probes: &[Sample], exec: Exec) -> Result<StabilityReport> {
    check_estimate_inputs(setup, n_seeds, probes)?;
    let k = setup.partition.k();
    let outcomes = exec.map_indexed(n_seeds, |i| -> Result<SeedOutcome> {
        let seq = sample_sequence(k, setup.steps, &setup.sequence_stream(i))?;
        let a = setup.run(setup.dataset, setup.partition, &seq);
        let b = setup.run(setup.neighbor_dataset, setup.neighbor_partition, &seq);
        let trace = twin_train(&a, &b, setup.step_probes(probes))?;
        let probe_gaps = probe_gaps(&setup.model, &trace.final_a, &trace.final_b, probes, &setup.loss)?;
        Ok(SeedOutcome { seed_index: i, trace, probe_gaps, swap: None })
    });
    let seeds = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; probes.len()];
    for s in &seeds {
        mean.iter_mut().zip(&s.probe_gaps).for_each(|(m, g)| *m += g);
    }
    let value = mean.iter().map(|m| m / n_seeds as f64).fold(0.0, f64::max);
    Ok(StabilityReport { kind: EstimateKind::Beta, value, n_seeds, probe_size: probes.len(), seeds })
}

/// Twin training on the first partition under `R` and `R` with positions
/// `i < j` swapped.
pub fn bdc_gap(setup: &StabilitySetup<'_>, seq: &BatchSequence, i: usize, j: usize, probes: &[Sample]) -> Result<(TwinTrace, Vec<f64>)> {
    let swapped = swap_two(seq, i, j)?;
    let a = setup.run(setup.dataset, setup.partition, seq);
    let b = setup.run(setup.dataset, setup.partition, &swapped);
    let trace = twin_train(&a, &b, setup.step_probes(probes))?;
    let gaps = probe_gaps(&setup.model, &trace.final_a, &trace.final_b, probes, &setup.loss)?;
    Ok((trace, gaps))
}

/// ρ̂: per seed, swap one position from the first half of `R` with one from
/// the second half; ρ̂ is the seed average of the largest probe gap.
pub fn rho_hat(setup: &StabilitySetup<'_>, n_seeds: usize, probes: &[Sample], exec: Exec) -> Result<StabilityReport> {
    check_estimate_inputs(setup, n_seeds, probes)?;
    if setup.steps < 2 {
        return Err(usage!("rho estimate needs at least two steps"));
    }
    let k = setup.partition.k();
    let half = setup.steps / 2;
    let outcomes = exec.map_indexed(n_seeds, |s| -> Result<SeedOutcome> {
        let stream = setup.sequence_stream(s);
        let seq = sample_sequence(k, setup.steps, &stream)?;
        let mut r = stream.substream("swap").rng();
        let i = r.random_range(0..half);
        let j = r.random_range(half..setup.steps);
        let (trace, probe_gaps) = bdc_gap(setup, &seq, i, j, probes)?;
        Ok(SeedOutcome { seed_index: s, trace, probe_gaps, swap: Some((i, j)) })
    });
    let seeds = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let value = seeds.iter().map(SeedOutcome::max_gap).sum::<f64>() / n_seeds as f64;
    Ok(StabilityReport { kind: EstimateKind::Rho, value, n_seeds, probe_size: probes.len(), seeds })
}

/// `(1/N) Σ ℓ(f^θ(xᵢ), yᵢ)`.
pub fn empirical_risk(model: &ModelSpec, theta: &ParamVector, samples: &[Sample], loss: &LossSpec) -> Result<f64> {
    batch_loss(model, theta, samples, loss)
}

/// `|R_train − R_val|`.
pub fn gen_error_estimate(model: &ModelSpec, theta: &ParamVector, train: &[Sample], val: &[Sample], loss: &LossSpec) -> Result<f64> {
    Ok((empirical_risk(model, theta, train, loss)? - empirical_risk(model, theta, val, loss)?).abs())
}

pub const DEFAULT_CS_THRESHOLD: usize = 5;

/// Mean absolute argmax-label error and the cumulative score: the percentage
/// of samples whose label error is strictly below `threshold`.
pub fn mae_cs(model: &ModelSpec, theta: &ParamVector, test: &[Sample], threshold: usize) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(usage!("test set must be non-empty"));
    }
    if threshold == 0 {
        return Err(usage!("CS threshold must be >= 1"));
    }
    let mut abs_sum = 0usize;
    let mut hits = 0usize;
    for s in test {
        let pred = argmax(model.forward(theta, &s.x)?.probs());
        let err = pred.abs_diff(s.label);
        abs_sum += err;
        if err < threshold {
            hits += 1;
        }
    }
    let n = test.len() as f64;
    Ok((abs_sum as f64 / n, 100.0 * hits as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl EpochPoint {
    pub fn gen_error(&self) -> f64 {
        (self.train_loss - self.val_loss).abs()
    }
}

/// Trains for `epochs × k` steps and evaluates train/validation risk at the
/// end of every epoch (epoch 0 is the initialization).
pub fn training_curve(run: &TrainRun<'_>, val: &[Sample], epochs: usize) -> Result<Vec<EpochPoint>> {
    let k = run.partition.k();
    if run.steps() != epochs * k {
        return Err(usage!("curve needs a sequence of epochs·k = {} steps, got {}", epochs * k, run.steps()));
    }
    let train_set = run.dataset.samples();
    let eval = |epoch: usize, theta: &ParamVector| -> Result<EpochPoint> {
        Ok(EpochPoint {
            epoch,
            train_loss: empirical_risk(&run.model, theta, train_set, &run.loss)?,
            val_loss: empirical_risk(&run.model, theta, val, &run.loss)?,
        })
    };
    let mut points = vec![eval(0, &run.model.init_params())?];
    let mut err = None;
    train_observed(run, |rec| {
        if rec.t % k == 0 && err.is_none() {
            match eval(rec.t / k, rec.after) {
                Ok(p) => points.push(p),
                Err(e) => err = Some(e),
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(points),
    }
}
