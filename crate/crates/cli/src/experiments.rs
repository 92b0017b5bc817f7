use lipstab::bounds::{compare_losses, evaluate, theta_sup_from_trajectory, BoundInputs, LOG_CONVENTION};
use lipstab::data::{gen_synthetic_dataset, neighbor_partition, partition, sample_sequence, SyntheticGenerator};
use lipstab::losses::{batch_loss, profile_loss};
use lipstab::math::{finite_diff_grad, relative_error, softmax};
use lipstab::stability::{
    audit_growth, beta_hat, gen_error_estimate, mae_cs, rho_hat, train_trajectory, training_curve, EpochPoint,
};
use lipstab::stats::{median, spearman};
use lipstab::{Arch, Dataset, ModelSpec, Partition, RngStream, Sample, StabilityReport, StabilitySetup, TrainRun};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ExperimentKind, LossBlock, NeighborKind};
use crate::output::{csv_bytes, json_bytes, num, pretty, RunOutput};
use crate::plot::emit_series;
use crate::{ConfigError, Ctx, Result};

/// Runs the experiment named in the config.
pub fn run_experiment(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<RunOutput> {
    match cfg.experiment {
        ExperimentKind::Gradcheck => gradcheck(cfg, ctx),
        ExperimentKind::Stability => stability(cfg, ctx),
        ExperimentKind::Bdc => bdc(cfg, ctx),
        ExperimentKind::Bounds => bounds(cfg, ctx),
        ExperimentKind::Sweep => sweep(cfg, ctx),
        ExperimentKind::Genplot => curves(cfg, ctx),
    }
}

/// Training set, its neighbour, and the held-out draws, all keyed by the
/// top-level seed.
pub struct Workspace {
    pub dataset: Dataset,
    pub partition: Partition,
    pub neighbor_dataset: Dataset,
    pub neighbor_partition: Partition,
    pub probes: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Workspace {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.seed;
        let d = &cfg.data;
        let dataset = gen_synthetic_dataset(d.n, d.d, d.classes, d.sigma, &RngStream::new(root, "data"))?;
        let (_, k) = cfg.batch_shape();
        let part = partition(&dataset, k, &RngStream::new(root, "partition"))?;
        let (neighbor_partition, neighbor_dataset) = match d.neighbor {
            NeighborKind::Fresh => neighbor_partition(&part, &dataset, d.neighbor_batch, &RngStream::new(root, "neighbor"))?,
            NeighborKind::Identical => (part.clone(), dataset.clone()),
        };
        let gen = SyntheticGenerator::from_meta(dataset.meta())?;
        let probes = gen.draw(cfg.run.probe_size, &RngStream::new(root, "probe"));
        let val = gen.draw(d.val_size, &RngStream::new(root, "val"));
        Ok(Workspace { dataset, partition: part, neighbor_dataset, neighbor_partition, probes, val })
    }

    fn setup<'a>(&'a self, cfg: &ExperimentConfig, loss: &LossBlock) -> StabilitySetup<'a> {
        StabilitySetup {
            model: cfg.model_spec(),
            rule: cfg.rule(),
            cfg: cfg.optimizer_config(loss, cfg.run.steps),
            loss: loss.spec(),
            dataset: &self.dataset,
            partition: &self.partition,
            neighbor_dataset: &self.neighbor_dataset,
            neighbor_partition: &self.neighbor_partition,
            steps: cfg.run.steps,
            seed: cfg.seed,
            per_step_gaps: cfg.run.per_step_gaps,
        }
    }
}

fn finish(cfg: &ExperimentConfig, mut out: RunOutput, results: Value) -> RunOutput {
    let echo = cfg.echo();
    let summary = json!({
        "experiment": cfg.experiment.name(),
        "log_convention": LOG_CONVENTION,
        "results": results,
        "config": echo,
    });
    out.add("summary.json", json_bytes(&summary));
    out.add("config_echo.toml", echo.into_bytes());
    out
}

#[derive(Serialize)]
struct TraceRow {
    seed: usize,
    t: usize,
    delta_t: f64,
    loss_diff_max: Option<f64>,
    sigma_hat_t: f64,
    tau_hat_t: Option<f64>,
}

fn trace_rows(rep: &StabilityReport) -> Vec<TraceRow> {
    rep.seeds
        .iter()
        .flat_map(|s| {
            s.trace.steps.iter().map(move |st| TraceRow {
                seed: s.seed_index,
                t: st.t,
                delta_t: st.delta,
                loss_diff_max: st.loss_gap_max,
                sigma_hat_t: st.sigma_hat,
                tau_hat_t: st.tau_hat,
            })
        })
        .collect()
}

fn audit_json(reps: &[&StabilityReport]) -> Value {
    let (mut checked, mut equal, mut violations) = (0, 0, 0);
    for rep in reps {
        for s in &rep.seeds {
            let a = audit_growth(&s.trace, 1e-9);
            checked += a.checked;
            equal += a.equal_rule_steps;
            violations += a.violations.len();
        }
    }
    json!({ "steps_checked": checked, "equal_rule_steps": equal, "violations": violations })
}

fn estimate_json(rep: &StabilityReport) -> Value {
    let (min, med, max) = rep.seed_spread();
    json!({
        "value": num(rep.value),
        "seed_min": num(min),
        "seed_median": num(med),
        "seed_max": num(max),
        "n_seeds": rep.n_seeds,
        "probe_size": rep.probe_size,
    })
}

/// β̂ (and optionally ρ̂) for one loss, plus fit metrics of the first seed's model.
pub struct StabilityPoint {
    pub beta: StabilityReport,
    pub rho: Option<StabilityReport>,
    pub summary: Value,
}

pub fn stability_point(cfg: &ExperimentConfig, ws: &Workspace, loss: &LossBlock, ctx: &Ctx, with_rho: bool) -> Result<StabilityPoint> {
    let setup = ws.setup(cfg, loss);
    ctx.note(format!("beta estimate for {} over {} seeds", loss.label(), cfg.run.n_seeds));
    let beta = beta_hat(&setup, cfg.run.n_seeds, &ws.probes, ctx.exec)?;
    let rho = if with_rho && cfg.run.steps >= 2 {
        ctx.note(format!("rho estimate for {}", loss.label()));
        Some(rho_hat(&setup, cfg.run.n_seeds, &ws.probes, ctx.exec)?)
    } else {
        None
    };
    let model = setup.model;
    let theta = &beta.seeds[0].trace.final_a;
    let spec = loss.spec();
    let gen = gen_error_estimate(&model, theta, ws.dataset.samples(), &ws.val, &spec)?;
    let (mae, cs) = mae_cs(&model, theta, &ws.val, cfg.run.cs_threshold)?;
    let reports: Vec<&StabilityReport> = std::iter::once(&beta).chain(rho.as_ref()).collect();
    let summary = json!({
        "loss": loss.label(),
        "eta": num(setup.cfg.eta),
        "steps": cfg.run.steps,
        "beta_hat": estimate_json(&beta),
        "rho_hat": rho.as_ref().map_or(Value::Null, estimate_json),
        "gen_error": num(gen),
        "mae": num(mae),
        "cs": num(cs),
        "cs_threshold": cfg.run.cs_threshold,
        "growth_audit": audit_json(&reports),
    });
    Ok(StabilityPoint { beta, rho, summary })
}

fn stability(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<RunOutput> {
    let ws = Workspace::build(cfg)?;
    let mut out = RunOutput::default();
    let mut results = Vec::new();
    for loss in &cfg.loss {
        let p = stability_point(cfg, &ws, loss, ctx, cfg.run.rho)?;
        out.add(format!("trace_{}.csv", loss.label()), csv_bytes(&trace_rows(&p.beta))?);
        out.stdout.push_str(&format!(
            "{:<8} beta_hat={} rho_hat={}\n",
            loss.label(),
            pretty(p.beta.value),
            p.rho.as_ref().map_or("n/a".into(), |r| pretty(r.value))
        ));
        results.push(p.summary);
    }
    Ok(finish(cfg, out, Value::Array(results)))
}

fn bdc(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<RunOutput> {
    if cfg.run.steps < 2 {
        return Err(ConfigError { line: None, msg: "bdc needs run.steps >= 2".into() }.into());
    }
    let ws = Workspace::build(cfg)?;
    let mut out = RunOutput::default();
    let mut results = Vec::new();
    for loss in &cfg.loss {
        let setup = ws.setup(cfg, loss);
        ctx.note(format!("rho estimate for {}", loss.label()));
        let rep = rho_hat(&setup, cfg.run.n_seeds, &ws.probes, ctx.exec)?;
        out.add(format!("bdc_{}.csv", loss.label()), csv_bytes(&trace_rows(&rep))?);
        out.stdout.push_str(&format!("{:<8} rho_hat={}\n", loss.label(), pretty(rep.value)));
        let swaps: Vec<Value> = rep.seeds.iter().map(|s| json!(s.swap.map(|(i, j)| [i, j]))).collect();
        results.push(json!({
            "loss": loss.label(),
            "rho_hat": estimate_json(&rep),
            "swaps": swaps,
            "growth_audit": audit_json(&[&rep]),
        }));
    }
    Ok(finish(cfg, out, Value::Array(results)))
}

#[derive(Serialize)]
struct GradRow {
    loss: String,
    target: String,
    trial: usize,
    rel_err: f64,
}

const LOSS_PAIRS_PER_TRIAL: usize = 50;

fn gradcheck(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<RunOutput> {
    let ws = Workspace::build(cfg)?;
    let (d, classes) = (cfg.data.d, cfg.data.classes);
    let archs = [Arch::LinearSoftmax { d, classes }, Arch::Mlp { d, hidden: cfg.model.hidden.max(1), classes }];
    let mut rows = Vec::new();
    for loss in &cfg.loss {
        let spec = loss.spec();
        let label = loss.label();
        ctx.note(format!("gradient check for {label}"));
        let mut r = RngStream::new(cfg.seed, format!("gradcheck/{label}")).rng();
        let mut trial = 0;
        while trial < cfg.run.trials * LOSS_PAIRS_PER_TRIAL {
            let yhat = softmax(&random_logits(&mut r, classes));
            let y = softmax(&random_logits(&mut r, classes));
            // stay clear of the clamp and of the GJM kink at ŷ = y
            if yhat.iter().zip(&y).any(|(a, b)| *a < 10.0 * loss.clamp_min || (a / b - 1.0).abs() < 1e-3) {
                continue;
            }
            let analytic = spec.grad(&yhat, &y)?;
            let numeric = finite_diff_grad(|p| spec.value(p, &y).unwrap_or(f64::NAN), &yhat, 1e-7)?;
            rows.push(GradRow { loss: label.clone(), target: "simplex".into(), trial, rel_err: relative_error(&analytic, &numeric, 1e-12) });
            trial += 1;
        }
        for arch in archs {
            for trial in 0..cfg.run.trials {
                let model = ModelSpec::new(arch, cfg.seed.wrapping_add(trial as u64))?;
                let theta = model.init_params();
                let batch: Vec<&Sample> = ws.dataset.select(ws.partition.batch(trial % ws.partition.k())).collect();
                let analytic = model.loss_grad(&theta, batch.iter().copied(), &spec)?;
                let numeric = finite_diff_grad(
                    |p| batch_loss(&model, &lipstab::ParamVector::new(p.to_vec()), batch.iter().copied(), &spec).unwrap_or(f64::NAN),
                    theta.as_slice(),
                    1e-6,
                )?;
                let rel_err = relative_error(analytic.as_slice(), &numeric, 1e-12);
                rows.push(GradRow { loss: label.clone(), target: arch.name().into(), trial, rel_err });
            }
        }
    }
    let mut results = Vec::new();
    let mut out = RunOutput::default();
    for loss in &cfg.loss {
        for target in ["simplex", "linear", "mlp"] {
            let max = rows.iter().filter(|r| r.loss == loss.label() && r.target == target).map(|r| r.rel_err).fold(0.0, f64::max);
            out.stdout.push_str(&format!("{:<8} {:<8} max_rel_err={:e}\n", loss.label(), target, max));
            results.push(json!({ "loss": loss.label(), "target": target, "max_rel_err": num(max) }));
        }
    }
    out.add("gradcheck.csv", csv_bytes(&rows)?);
    Ok(finish(cfg, out, Value::Array(results)))
}

fn random_logits<R: Rng>(r: &mut R, classes: usize) -> Vec<f64> {
    (0..classes).map(|_| r.random_range(-3.0..3.0)).collect()
}

#[derive(Serialize)]
struct BoundRow {
    theorem: String,
    loss: String,
    gamma: f64,
    l_max: f64,
    theta_sup: f64,
    beta_bound: f64,
    rho_bound: f64,
    gen_error_bound: f64,
    composed_bound: f64,
}

fn bounds(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<RunOutput> {
    let bb = cfg.bounds.clone().ok_or_else(|| ConfigError { line: None, msg: "missing [bounds] block".into() })?;
    let (run_b, k) = cfg.batch_shape();
    let steps = bb.steps.unwrap_or(cfg.run.steps);
    let alpha_schedule = bb.alpha_schedule.clone().unwrap_or_else(|| cfg.schedule(steps).values(steps));

    let theta_sup = match bb.theta_sup {
        Some(v) => v,
        None => {
            // 1.5 × the largest iterate norm seen while training each loss
            let ws = Workspace::build(cfg)?;
            let seq = sample_sequence(k, steps, &RngStream::new(cfg.seed, "R/0"))?;
            let mut best: f64 = 0.0;
            for loss in &cfg.loss {
                let run = TrainRun {
                    model: cfg.model_spec(),
                    dataset: &ws.dataset,
                    partition: &ws.partition,
                    sequence: &seq,
                    rule: cfg.rule(),
                    cfg: cfg.optimizer_config(loss, steps),
                    loss: loss.spec(),
                };
                let snaps = train_trajectory(&run)?;
                best = best.max(theta_sup_from_trajectory(snaps.iter().map(|(_, th)| th))?);
            }
            ctx.note(format!("theta_sup auto-filled as {best}"));
            best
        }
    };

    let base = BoundInputs {
        gamma: 1.0,
        l_max: 1.0,
        eta: bb.eta.unwrap_or(cfg.optimizer.eta),
        b: bb.b.unwrap_or(run_b),
        steps,
        n: bb.n.unwrap_or(cfg.data.n),
        delta: bb.delta.unwrap_or(cfg.run.delta),
        c: bb.c.unwrap_or(cfg.optimizer.epsilon),
        lambda: bb.lambda.unwrap_or(cfg.optimizer.lambda),
        alpha_schedule,
        theta_sup,
    };

    let measured: Vec<(String, BoundInputs, Option<lipstab::LossProfile>)> = match (bb.gamma, bb.l_max) {
        (Some(g), Some(l)) => vec![("given".into(), base.with_loss(g, l), None)],
        _ => cfg
            .loss
            .iter()
            .map(|loss| {
                ctx.note(format!("profiling {} on {} samples", loss.label(), cfg.profile.n_samples));
                let stream = RngStream::new(cfg.seed, format!("profile/{}", loss.label()));
                let p = profile_loss(&loss.spec(), cfg.data.classes, cfg.profile.logit_bound, cfg.profile.n_samples, &stream, ctx.exec)?;
                Ok((loss.label(), base.with_loss(p.gamma_hat, p.l_hat), Some(p)))
            })
            .collect::<Result<_>>()?,
    };

    let mut out = RunOutput::default();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut comparisons = Vec::new();
    let theorems = bb.theorems();
    for &th in &theorems {
        for (label, input, _) in &measured {
            let rep = evaluate(th, input)?;
            let text = format!(
                "[{th} {label}]\n  gamma            {}\n  l_max            {}\n  theta_sup        {}\n  beta_bound       {}\n  rho_bound        {}\n  gen_error_bound  {}\n  composed_bound   {}\n",
                pretty(input.gamma),
                pretty(input.l_max),
                pretty(input.theta_sup),
                pretty(rep.beta_bound),
                pretty(rep.rho_bound),
                pretty(rep.gen_error_bound),
                pretty(rep.composed_bound)
            );
            out.stdout.push_str(&text);
            for line in rep.to_kv().lines() {
                out.stdout.push_str(&format!("{th}.{label}.{line}\n"));
            }
            reports.push(json!({
                "theorem": th.tag(),
                "loss": label,
                "gamma": num(input.gamma),
                "l_max": num(input.l_max),
                "beta_bound": num(rep.beta_bound),
                "rho_bound": num(rep.rho_bound),
                "gen_error_bound": num(rep.gen_error_bound),
                "composed_bound": num(rep.composed_bound),
            }));
            rows.push(BoundRow {
                theorem: th.tag().into(),
                loss: label.clone(),
                gamma: input.gamma,
                l_max: input.l_max,
                theta_sup: input.theta_sup,
                beta_bound: rep.beta_bound,
                rho_bound: rep.rho_bound,
                gen_error_bound: rep.gen_error_bound,
                composed_bound: rep.composed_bound,
            });
        }
        let find = |name: &str| measured.iter().find(|(l, _, _)| l == name).map(|(_, i, _)| i);
        if let (Some(kl), Some(gjm)) = (find("kl"), find("gjm")) {
            let c = compare_losses(kl, gjm, th)?;
            out.stdout.push_str(&format!("{th}.compare.gjm_smaller={}\n{th}.compare.factor={}\n", c.gjm_smaller(), c.factor()));
            comparisons.push(json!({
                "theorem": th.tag(),
                "kl": num(c.kl),
                "gjm": num(c.gjm),
                "gjm_smaller": c.gjm_smaller(),
                "factor": num(c.factor()),
            }));
        }
    }
    let profiles: Vec<Value> = measured
        .iter()
        .filter_map(|(label, _, p)| {
            p.map(|p| json!({ "loss": label, "gamma_hat": num(p.gamma_hat), "l_hat": num(p.l_hat), "logit_bound": num(p.logit_bound), "n_samples": p.n_samples }))
        })
        .collect();
    out.add("bounds.csv", csv_bytes(&rows)?);
    let results = json!({
        "theta_sup": num(theta_sup),
        "theta_sup_source": if bb.theta_sup.is_some() { "given" } else { "trajectory" },
        "profiles": profiles,
        "reports": reports,
        "comparisons": comparisons,
    });
    Ok(finish(cfg, out, results))
}

/// A copy of `cfg` with the dotted `field` set to `value`.
pub fn with_field(cfg: &ExperimentConfig, field: &str, value: f64) -> Result<ExperimentConfig> {
    let bad = |msg: String| ConfigError { line: None, msg };
    let mut tree = toml::Value::try_from(cfg).map_err(|e| bad(format!("cannot re-encode config: {e}")))?;
    let mut slot = &mut tree;
    for part in field.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| bad(format!("sweep field {field} is not set in the config (set it explicitly to sweep it)")))?;
    }
    *slot = match slot {
        toml::Value::Integer(_) => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(bad(format!("sweep field {field} is an integer; {value} is not")).into());
            }
            toml::Value::Integer(value as i64)
        }
        toml::Value::Float(_) => toml::Value::Float(value),
        other => return Err(bad(format!("sweep field {field} is not numeric (found {})", other.type_str())).into()),
    };
    let mut next: ExperimentConfig = tree.try_into().map_err(|e: toml::de::Error| bad(e.message().to_string()))?;
    next.out = cfg.out.clone();
    next.check()?;
    Ok(next)
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    loss: String,
    beta_hat: f64,
    beta_min: f64,
    beta_median: f64,
    beta_max: f64,
    rho_hat: Option<f64>,
}

fn sweep(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<RunOutput> {
    let sw = cfg.sweep.clone().ok_or_else(|| ConfigError { line: None, msg: "missing [sweep] block".into() })?;
    // Resolve every point before running any, so a bad field fails fast.
    let points = sw
        .values
        .iter()
        .map(|&v| {
            let mut c = with_field(cfg, &sw.field, v)?;
            c.experiment = ExperimentKind::Stability;
            c.sweep = None;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = RunOutput::default();
    let mut rows = Vec::new();
    for (i, (v, pc)) in points.iter().enumerate() {
        ctx.note(format!("sweep point {}={v}", sw.field));
        let ws = Workspace::build(pc)?;
        let mut point_results = Vec::new();
        for loss in &pc.loss {
            let p = stability_point(pc, &ws, loss, ctx, pc.run.rho)?;
            let (min, med, max) = p.beta.seed_spread();
            rows.push(SweepRow {
                value: *v,
                loss: loss.label(),
                beta_hat: p.beta.value,
                beta_min: min,
                beta_median: med,
                beta_max: max,
                rho_hat: p.rho.as_ref().map(|r| r.value),
            });
            point_results.push(p.summary);
        }
        let point = finish(pc, RunOutput::default(), Value::Array(point_results));
        for a in point.artifacts {
            out.add(format!("point_{i:03}/{}", a.name), a.bytes);
        }
    }

    let mut stats = Vec::new();
    for loss in &cfg.loss {
        let label = loss.label();
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.loss == label).map(|r| (r.value, r.beta_hat)).unzip();
        let rho = spearman(&xs, &ys);
        out.stdout.push_str(&format!(
            "{:<8} spearman(beta_hat, {})={}\n",
            label,
            sw.field,
            rho.map_or("undefined".into(), pretty)
        ));
        stats.push(json!({
            "loss": label,
            "spearman": rho.map_or(Value::String("undefined".into()), num),
            "points": xs.len(),
        }));
    }
    out.add("sweep.csv", csv_bytes(&rows)?);
    let results = json!({ "field": sw.field, "values": sw.values, "spearman": stats });
    Ok(finish(cfg, out, results))
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct CurveRow {
    pub loss: String,
    pub seed: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub gen_error: f64,
}

fn curves(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<RunOutput> {
    let ws = Workspace::build(cfg)?;
    let (_, k) = cfg.batch_shape();
    let steps = cfg.run.epochs * k;
    let tasks: Vec<(usize, usize)> = (0..cfg.loss.len()).flat_map(|l| (0..cfg.run.n_seeds).map(move |s| (l, s))).collect();
    ctx.note(format!("{} training curves of {} epochs", tasks.len(), cfg.run.epochs));
    let base = cfg.model_spec();
    let curves = ctx.exec.map_slice(&tasks, |&(l, s)| -> Result<Vec<EpochPoint>> {
        let loss = &cfg.loss[l];
        let seq = sample_sequence(k, steps, &RngStream::new(cfg.seed, format!("R/{s}")))?;
        let run = TrainRun {
            model: ModelSpec::new(base.arch, cfg.seed.wrapping_add(s as u64))?,
            dataset: &ws.dataset,
            partition: &ws.partition,
            sequence: &seq,
            rule: cfg.rule(),
            cfg: cfg.optimizer_config(loss, steps),
            loss: loss.spec(),
        };
        Ok(training_curve(&run, &ws.val, cfg.run.epochs)?)
    });
    let mut rows = Vec::new();
    for (&(l, s), pts) in tasks.iter().zip(curves) {
        for p in pts? {
            rows.push(CurveRow {
                loss: cfg.loss[l].label(),
                seed: s,
                epoch: p.epoch,
                train_loss: p.train_loss,
                val_loss: p.val_loss,
                gen_error: p.gen_error(),
            });
        }
    }

    let mut out = RunOutput::default();
    let mut finals = Vec::new();
    for loss in &cfg.loss {
        let label = loss.label();
        let last: Vec<f64> = rows.iter().filter(|r| r.loss == label && r.epoch == cfg.run.epochs).map(|r| r.gen_error).collect();
        let med = median(&last).unwrap_or(f64::NAN);
        out.stdout.push_str(&format!("{:<8} median final-epoch gen_error={}\n", label, pretty(med)));
        finals.push((label, med));
    }
    let mut results = json!({
        "epochs": cfg.run.epochs,
        "n_seeds": cfg.run.n_seeds,
        "final_gen_error_median": finals.iter().map(|(l, m)| json!({ "loss": l, "value": num(*m) })).collect::<Vec<_>>(),
        "note": "directional comparison on synthetic data; absolute values are not comparable to face-image benchmarks",
    });
    let kl = finals.iter().find(|(l, _)| l == "kl").map(|(_, m)| *m);
    let gjm = finals.iter().find(|(l, _)| l == "gjm").map(|(_, m)| *m);
    if let (Some(kl), Some(gjm)) = (kl, gjm) {
        results["gjm_le_kl"] = json!(gjm <= kl);
        let etas: Vec<f64> = cfg.loss.iter().map(|l| l.eta.unwrap_or(cfg.optimizer.eta)).collect();
        results["confounded_by_learning_rate"] = json!(etas.windows(2).any(|w| w[0] != w[1]));
    }
    let curves_csv = csv_bytes(&rows)?;
    for a in emit_series(&curves_csv)?.artifacts {
        out.add(a.name, a.bytes);
    }
    out.add("curves.csv", curves_csv);
    Ok(finish(cfg, out, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: &str, extra: &str) -> ExperimentConfig {
        let src = format!(
            "experiment = \"{kind}\"\nseed = 11\n[data]\nn = 60\nd = 3\nclasses = 4\nval_size = 40\n[run]\nsteps = 20\nepochs = 3\nb = 10\nn_seeds = 2\nprobe_size = 16\ntrials = 2\n{extra}"
        );
        ExperimentConfig::from_toml(&src).unwrap()
    }

    #[test]
    fn identical_neighbor_gives_zero_beta() {
        let mut cfg = small("stability", "");
        cfg.data.neighbor = NeighborKind::Identical;
        cfg.run.n_seeds = 1;
        let out = run_experiment(&cfg, &Ctx::default()).unwrap();
        let s = out.summary().unwrap();
        for r in s["results"].as_array().unwrap() {
            assert_eq!(r["beta_hat"]["value"], json!(0.0));
        }
    }

    #[test]
    fn stability_writes_traces_and_passes_audit() {
        let cfg = small("stability", "");
        let out = run_experiment(&cfg, &Ctx::default()).unwrap();
        let trace = String::from_utf8(out.get("trace_kl.csv").unwrap().to_vec()).unwrap();
        assert!(trace.starts_with("seed,t,delta_t,loss_diff_max,sigma_hat_t,tau_hat_t\n"));
        assert_eq!(trace.lines().count(), 1 + 2 * 20);
        let s = out.summary().unwrap();
        for r in s["results"].as_array().unwrap() {
            assert_eq!(r["growth_audit"]["violations"], json!(0));
            assert!(r["beta_hat"]["value"].as_f64().unwrap() > 0.0);
        }
    }

    #[test]
    fn gradcheck_errors_are_small() {
        let cfg = small("gradcheck", "");
        let out = run_experiment(&cfg, &Ctx::default()).unwrap();
        for r in out.summary().unwrap()["results"].as_array().unwrap() {
            let e = r["max_rel_err"].as_f64().unwrap();
            assert!(e < 1e-5, "{r}");
        }
    }

    #[test]
    fn bounds_reference_inputs() {
        let cfg = small("bounds", "[bounds]\ntheorem = \"thm1\"\ngamma = 1.0\nl_max = 23.03\neta = 2e-5\nc = 1e-8\nb = 64\nsteps = 100\nn = 1000\ndelta = 0.05\ntheta_sup = 1.0\n");
        let out = run_experiment(&cfg, &Ctx::default()).unwrap();
        assert!(out.stdout.contains("beta_bound       25600\n"), "{}", out.stdout);
        assert!(out.stdout.contains("rho_bound        65.536\n"));
    }

    #[test]
    fn sweep_field_checks() {
        let cfg = small("stability", "");
        assert_eq!(with_field(&cfg, "run.steps", 40.0).unwrap().run.steps, 40);
        assert_eq!(with_field(&cfg, "optimizer.eta", 0.5).unwrap().optimizer.eta, 0.5);
        assert_eq!(with_field(&cfg, "model.arch", 1.0).unwrap_err().exit_code(), 2);
        assert_eq!(with_field(&cfg, "run.steps", 1.5).unwrap_err().exit_code(), 2);
        assert_eq!(with_field(&cfg, "run.nothing", 1.0).unwrap_err().exit_code(), 2);
        assert_eq!(with_field(&cfg, "optimizer.eta", -1.0).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn single_point_sweep_reports_undefined() {
        let cfg = small("sweep", "[sweep]\nfield = \"run.steps\"\nvalues = [10]\n");
        let out = run_experiment(&cfg, &Ctx::default()).unwrap();
        let s = out.summary().unwrap();
        assert_eq!(s["results"]["spearman"][0]["spearman"], json!("undefined"));
        let csv = String::from_utf8(out.get("sweep.csv").unwrap().to_vec()).unwrap();
        assert!(csv.starts_with("value,loss,"));
        assert_eq!(csv.lines().count(), 1 + 2);
    }

    #[test]
    fn curves_emit_series_per_loss() {
        let cfg = small("genplot", "");
        let out = run_experiment(&cfg, &Ctx::default()).unwrap();
        assert!(out.get("series_kl.csv").is_some() && out.get("series_gjm.csv").is_some());
        assert!(out.get("curves.svg").is_some());
        assert!(out.summary().unwrap()["results"]["gjm_le_kl"].is_boolean());
    }
}
