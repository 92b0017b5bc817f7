//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lipstab::bounds::{combine_eq13, compare_losses, thm1_bounds, thm2_bound, thm3_bounds, thm4_bound, BoundInputs};
use lipstab::data::{gen_synthetic_dataset, neighbor_partition, partition, sample_sequence, swap_two, SyntheticGenerator};
use lipstab::losses::profile_loss;
use lipstab::math::{finite_diff_grad, l2_norm, relative_error, softmax};
use lipstab::optim::{adam_step, adamw_step, bias_correct, update_moments};
use lipstab::stability::{audit_growth, train, train_observed, twin_train};
use lipstab::{
    Arch, Exec, GradVector, LossSpec, ModelSpec, OptimizerConfig, OptimizerState, ParamVector, RngStream, Rule, Schedule,
    Theorem, TrainRun,
};
use lipstab_cli::{run_experiment, Ctx, ExperimentConfig};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn random_simplex<R: Rng>(r: &mut R, m: usize, spread: f64) -> Vec<f64> {
    softmax(&(0..m).map(|_| r.random_range(-spread..spread)).collect::<Vec<_>>())
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut r = RngStream::new(1, "c1").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = r.random_range(2..12);
        let yhat = random_simplex(&mut r, m, 3.0);
        let y = random_simplex(&mut r, m, 3.0);
        for spec in [LossSpec::Kl { clamp_min: 1e-10 }, LossSpec::Gjm { alpha: 0.5 }] {
            let analytic = spec.grad(&yhat, &y).map_err(|e| e.to_string())?;
            let numeric = finite_diff_grad(|p| spec.value(p, &y).unwrap(), &yhat, 1e-7).map_err(|e| e.to_string())?;
            worst = worst.max(relative_error(&analytic, &numeric, 1e-12));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 1.0, format!("max rel err {worst:.2e} over 1000 pairs x 2 losses in {secs:.3}s"))
}

fn c2_hellinger() -> Outcome {
    let mut r = RngStream::new(2, "c2").rng();
    let gjm = LossSpec::Gjm { alpha: 0.5 };
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let m = r.random_range(2..20);
        let yhat = random_simplex(&mut r, m, 5.0);
        let y = random_simplex(&mut r, m, 5.0);
        let h: f64 = y.iter().zip(&yhat).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
        worst = worst.max((gjm.value(&yhat, &y).unwrap() - h).abs());
    }
    check(worst < 1e-12, format!("max |GJM - sum (sqrt y - sqrt yhat)^2| = {worst:.2e} over 10^4 pairs"))
}

fn c3_moment_bound() -> Outcome {
    let mut steps = 0usize;
    let mut violations = 0usize;
    let mut slack = f64::INFINITY;
    for run_idx in 0..20u64 {
        let mut r = RngStream::new(run_idx, "c3").rng();
        let ds = gen_synthetic_dataset(120, 5, 6, 2.0, &RngStream::new(run_idx, "data")).unwrap();
        let part = partition(&ds, 12, &RngStream::new(run_idx, "part")).unwrap();
        let seq = sample_sequence(12, 500, &RngStream::new(run_idx, "R")).unwrap();
        let cfg = OptimizerConfig {
            eta: r.random_range(1e-3..5e-2),
            beta1: r.random_range(0.5..0.99),
            beta2: r.random_range(0.9..0.9999),
            ..OptimizerConfig::default()
        };
        let loss = if run_idx % 2 == 0 { LossSpec::default() } else { LossSpec::Gjm { alpha: 0.5 } };
        let arch = if run_idx % 4 == 3 { Arch::Mlp { d: 5, hidden: 6, classes: 6 } } else { Arch::LinearSoftmax { d: 5, classes: 6 } };
        let run = TrainRun {
            model: ModelSpec::new(arch, run_idx).unwrap(),
            dataset: &ds,
            partition: &part,
            sequence: &seq,
            rule: Rule::Adam,
            cfg,
            loss,
        };
        let mut gmax: f64 = 0.0;
        train_observed(&run, |rec| {
            gmax = gmax.max(l2_norm(rec.grad.as_slice()).unwrap());
            let (mhat, _) = bias_correct(rec.state, &cfg).unwrap();
            let m = l2_norm(&mhat).unwrap();
            steps += 1;
            slack = slack.min(gmax - m);
            if m > gmax + 1e-12 {
                violations += 1;
            }
        })
        .map_err(|e| e.to_string())?;
    }
    check(violations == 0, format!("{violations} violations over {steps} Adam steps (20 runs, T=500); min slack {slack:.2e}"))
}

fn c4_growth_audit() -> Outcome {
    let ds = gen_synthetic_dataset(200, 6, 8, 2.0, &RngStream::new(4, "data")).unwrap();
    let part = partition(&ds, 10, &RngStream::new(4, "part")).unwrap();
    let (npart, nds) = neighbor_partition(&part, &ds, 3, &RngStream::new(4, "nb")).unwrap();
    let gen = SyntheticGenerator::from_meta(ds.meta()).unwrap();
    let probes = gen.draw(64, &RngStream::new(4, "probe"));
    let mut checked = 0;
    let mut equal = 0;
    let mut violations = 0;
    for (i, rule) in [Rule::Sgd, Rule::Adam, Rule::AdamW].into_iter().enumerate() {
        for (j, loss) in [LossSpec::default(), LossSpec::Gjm { alpha: 0.5 }].into_iter().enumerate() {
            for arch in [Arch::LinearSoftmax { d: 6, classes: 8 }, Arch::Mlp { d: 6, hidden: 5, classes: 8 }] {
                let seed = (10 * i + j) as u64;
                let seq = sample_sequence(10, 300, &RngStream::new(seed, "R")).unwrap();
                let cfg = OptimizerConfig { eta: 0.02, lambda: if rule == Rule::Sgd { 0.0 } else { 0.05 }, ..OptimizerConfig::default() };
                let model = ModelSpec::new(arch, seed).unwrap();
                let a = TrainRun { model, dataset: &ds, partition: &part, sequence: &seq, rule, cfg, loss };
                // dataset neighbour
                let b = TrainRun { dataset: &nds, partition: &npart, ..a };
                // sequence neighbour
                let swapped = swap_two(&seq, 20, 250).unwrap();
                let c = TrainRun { sequence: &swapped, ..a };
                for other in [&b, &c] {
                    let trace = twin_train(&a, other, Some(&probes)).map_err(|e| e.to_string())?;
                    if trace.delta_trajectory()[0] != 0.0 || trace.steps.iter().any(|s| s.delta < 0.0) {
                        return Err("delta trajectory must start at 0 and stay nonnegative".into());
                    }
                    let audit = audit_growth(&trace, 1e-9);
                    checked += audit.checked;
                    equal += audit.equal_rule_steps;
                    violations += audit.violations.len();
                }
            }
        }
    }
    check(
        violations == 0 && equal > 0,
        format!("{violations} violations over {checked} twin steps ({equal} equal-rule steps checked against tau)"),
    )
}

fn c5_bias_correction() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = RngStream::new(5, "c5").rng();
    for _ in 0..200 {
        let c: Vec<f64> = (0..6).map(|_| r.random_range(-10.0..10.0)).collect();
        let cfg = OptimizerConfig { beta1: r.random_range(0.01..0.999), beta2: r.random_range(0.01..0.9999), ..OptimizerConfig::default() };
        let st = update_moments(&OptimizerState::new(6), &GradVector::new(c.clone()), &cfg).unwrap();
        let (mhat, vhat) = bias_correct(&st, &cfg).unwrap();
        for i in 0..6 {
            worst = worst.max(rel(mhat[i], c[i])).max(rel(vhat[i], c[i] * c[i]));
        }
    }
    let ds = gen_synthetic_dataset(100, 4, 5, 2.0, &RngStream::new(5, "data")).unwrap();
    let part = partition(&ds, 10, &RngStream::new(5, "part")).unwrap();
    let seq = sample_sequence(10, 100, &RngStream::new(5, "R")).unwrap();
    let cfg = OptimizerConfig { eta: 0.01, lambda: 0.0, schedule: Schedule::Constant(1.0), ..OptimizerConfig::default() };
    let model = ModelSpec::new(Arch::LinearSoftmax { d: 4, classes: 5 }, 5).unwrap();
    let adam = TrainRun { model, dataset: &ds, partition: &part, sequence: &seq, rule: Rule::Adam, cfg, loss: LossSpec::default() };
    let adamw = TrainRun { rule: Rule::AdamW, ..adam };
    let a = train(&adam).unwrap();
    let w = train(&adamw).unwrap();
    let bitwise = a.as_slice().iter().zip(w.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
    // and step by step on the raw update functions
    let mut theta = ParamVector::new(vec![0.3, -0.2, 0.1]);
    let mut st = OptimizerState::new(3);
    let mut stepwise = true;
    for t in 1..=100 {
        let g = GradVector::new(vec![(t as f64).sin(), (t as f64).cos(), 0.5]);
        let (pa, sa) = adam_step(&theta, &st, &g, &cfg).unwrap();
        let (pw, sw) = adamw_step(&theta, &st, &g, &cfg, t).unwrap();
        stepwise &= pa.as_slice().iter().zip(pw.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()) && sa == sw;
        theta = pa;
        st = sa;
    }
    check(
        worst < 1e-15 && bitwise && stepwise,
        format!("t=1 max rel err {worst:.1e}; AdamW(lambda=0, alpha=1) bitwise equal to Adam over 100 steps: training {bitwise}, raw steps {stepwise}"),
    )
}

fn c6_decay_contraction() -> Outcome {
    let mut r = RngStream::new(6, "c6").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = r.random_range(1..10);
        let lambda = r.random_range(0.0..0.9);
        let alpha = r.random_range(0.05..1.0);
        let cfg = OptimizerConfig { eta: r.random_range(1e-4..1e-1), lambda, schedule: Schedule::Constant(alpha), ..OptimizerConfig::default() };
        let mut st = OptimizerState::new(n);
        st.m = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        st.v = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        st.t = r.random_range(0..50);
        let g = GradVector::new((0..n).map(|_| r.random_range(-1.0..1.0)).collect());
        let th = ParamVector::new((0..n).map(|_| r.random_range(-5.0..5.0)).collect());
        let th2 = ParamVector::new((0..n).map(|_| r.random_range(-5.0..5.0)).collect());
        // same state and gradient: identical adaptive terms for both points
        let (a, _) = adamw_step(&th, &st, &g, &cfg, st.t + 1).unwrap();
        let (b, _) = adamw_step(&th2, &st, &g, &cfg, st.t + 1).unwrap();
        let d_out = lipstab::models::param_distance(&a, &b).unwrap();
        let d_in = lipstab::models::param_distance(&th, &th2).unwrap();
        worst = worst.max(rel(d_out / d_in, (1.0 - alpha * lambda).abs()));
    }
    check(worst < 1e-12, format!("max rel deviation from |1 - alpha*lambda| = {worst:.2e} over 500 constructions"))
}

// Independent second evaluation of every bound, written in expanded form.
fn alt_bounds(i: &BoundInputs) -> [f64; 6] {
    let lg = (2.0f64).ln() - i.delta.ln();
    let (b, t, n) = (i.b as f64, i.steps as f64, i.n as f64);
    let beta1 = 2.0 * i.eta * b * t * i.gamma * i.gamma / (i.c * n);
    let rho1 = 8.0 * i.eta * b * b * i.gamma * i.gamma / (i.c * n * n);
    let tail = i.l_max * (lg / (2.0 * n)).sqrt();
    let gen2 = 8.0 * i.eta * b * b * i.gamma * i.gamma * (t * lg).sqrt() / (i.c * n * n) + beta1 + beta1 * (2.0 * n * lg).sqrt() + tail;
    let sum: f64 = i.alpha_schedule.iter().map(|a| a * i.eta * i.gamma * i.gamma / i.c + a * i.gamma * i.lambda * i.theta_sup).sum();
    let beta3 = 2.0 * b * t * sum / n;
    let rho3 = 8.0 * b * b * sum / (n * n);
    let gen4 = 8.0 * b * b * sum * (t * lg).sqrt() / (n * n) + 2.0 * b * t * sum * (2.0 * n * lg).sqrt() / n + tail;
    [beta1, rho1, gen2, beta3, rho3, gen4]
}

fn c7_bounds() -> Outcome {
    let mut r = RngStream::new(7, "c7").rng();
    let mut worst: f64 = 0.0;
    let mut worst_compose: f64 = 0.0;
    let mut doubling = true;
    for _ in 0..1000 {
        let b = r.random_range(1..256);
        let steps = r.random_range(1..500);
        let alpha = r.random_range(0.05..1.0);
        let input = BoundInputs {
            gamma: r.random_range(1e-3..20.0),
            l_max: r.random_range(1e-2..100.0),
            eta: r.random_range(1e-6..1e-1),
            b,
            steps,
            n: b * r.random_range(2..50) + r.random_range(0..b),
            delta: r.random_range(1e-4..0.999),
            c: r.random_range(1e-10..0.9),
            lambda: r.random_range(0.0..0.95),
            alpha_schedule: (0..steps).map(|_| alpha * r.random_range(0.5..1.0)).collect(),
            theta_sup: r.random_range(0.1..50.0),
        };
        let (beta1, rho1) = thm1_bounds(&input).unwrap();
        let (beta3, rho3) = thm3_bounds(&input).unwrap();
        let ours = [beta1, rho1, thm2_bound(&input).unwrap(), beta3, rho3, thm4_bound(&input).unwrap()];
        for (x, y) in ours.iter().zip(alt_bounds(&input)) {
            worst = worst.max(rel(*x, y));
        }
        let composed = combine_eq13(rho1, beta1, input.l_max, input.steps, input.n, input.delta).unwrap();
        worst_compose = worst_compose.max(rel(composed, ours[2]));
        let (beta_2t, rho_2t) = thm1_bounds(&BoundInputs { steps: 2 * steps, ..input.clone() }).unwrap();
        doubling &= beta_2t == 2.0 * beta1 && rho_2t == rho1;
    }
    check(
        worst < 1e-12 && worst_compose < 1e-12 && doubling,
        format!("dual-path max rel {worst:.1e}; combine(thm1) vs thm2 max rel {worst_compose:.1e}; beta doubles exactly with T: {doubling}"),
    )
}

fn c8_profiles() -> Outcome {
    let classes = 10;
    let kl = profile_loss(&LossSpec::Kl { clamp_min: 1e-10 }, classes, 10.0, 100_000, &RngStream::new(8, "kl"), Exec::default()).unwrap();
    let gjm = profile_loss(&LossSpec::Gjm { alpha: 0.5 }, classes, 10.0, 100_000, &RngStream::new(8, "gjm"), Exec::default()).unwrap();
    let base = BoundInputs {
        gamma: 1.0,
        l_max: 1.0,
        eta: 1e-3,
        b: 32,
        steps: 1000,
        n: 10_000,
        delta: 0.05,
        c: 1e-8,
        lambda: 0.01,
        alpha_schedule: vec![1.0; 1000],
        theta_sup: 10.0,
    };
    let in_kl = base.with_loss(kl.gamma_hat, kl.l_hat);
    let in_gjm = base.with_loss(gjm.gamma_hat, gjm.l_hat);
    let t2 = compare_losses(&in_kl, &in_gjm, Theorem::AdamGen).unwrap();
    let t4 = compare_losses(&in_kl, &in_gjm, Theorem::AdamWGen).unwrap();
    check(
        gjm.gamma_hat < kl.gamma_hat && gjm.l_hat < kl.l_hat && t2.gjm_smaller() && t4.gjm_smaller(),
        format!(
            "gamma GJM {:.4} < KL {:.4}; L GJM {:.4} < KL {:.4}; bound ratio KL/GJM thm2 {:.2}, thm4 {:.2}",
            gjm.gamma_hat, kl.gamma_hat, gjm.l_hat, kl.l_hat, t2.factor(), t4.factor()
        ),
    )
}

const SCALING_BASE: &str = r#"
experiment = "sweep"
seed = 2024

[data]
n = 600
d = 8
classes = 10
sigma = 2.0

[model]
arch = "linear"

[optimizer]
rule = "adam"
eta = 3e-3

[[loss]]
kind = "kl"

[run]
steps = 100
b = 20
n_seeds = 5
probe_size = 512
rho = false
per_step_gaps = false
"#;

fn c9_scaling() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (field, values) in [("run.steps", "[50, 100, 200]"), ("optimizer.eta", "[1e-3, 3e-3, 1e-2]")] {
        let src = format!("{SCALING_BASE}\n[sweep]\nfield = \"{field}\"\nvalues = {values}\n");
        let cfg = ExperimentConfig::from_toml(&src).map_err(|e| e.to_string())?;
        let out = run_experiment(&cfg, &Ctx::default()).map_err(|e| e.to_string())?;
        let s = out.summary().unwrap();
        let rho = s["results"]["spearman"][0]["spearman"].as_f64();
        ok &= rho.is_some_and(|v| v > 0.8);
        parts.push(format!("{field}: spearman {}", rho.map_or("undefined".into(), |v| format!("{v:.2}"))));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 120.0, format!("{} ({secs:.1}s)", parts.join("; ")))
}

fn curve_config(rule: &str) -> String {
    format!(
        r#"
experiment = "genplot"
seed = 99

[data]
n = 600
d = 8
classes = 10
sigma = 2.0
val_size = 1000

[optimizer]
rule = "{rule}"
eta = 1e-2
lambda = 0.01

[[loss]]
kind = "kl"

[[loss]]
kind = "gjm"
alpha = 0.5

[run]
epochs = 30
b = 20
n_seeds = 10
"#
    )
}

fn c10_gap_direction() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for rule in ["adam", "adamw"] {
        let cfg = ExperimentConfig::from_toml(&curve_config(rule)).map_err(|e| e.to_string())?;
        let out = run_experiment(&cfg, &Ctx::default()).map_err(|e| e.to_string())?;
        let s = out.summary().unwrap();
        let meds = s["results"]["final_gen_error_median"].as_array().unwrap();
        let get = |l: &str| meds.iter().find(|m| m["loss"] == l).and_then(|m| m["value"].as_f64()).unwrap();
        let (kl, gjm) = (get("kl"), get("gjm"));
        ok &= gjm <= kl;
        parts.push(format!("{rule}: median E GJM {gjm:.3e} vs KL {kl:.3e}"));
    }
    check(ok, format!("{} (10 seeds; directional, not numerical, replication)", parts.join("; ")))
}

fn lipstab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lipstab")).args(args).output().expect("binary runs")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = "seed = 5\n[data]\nn = 80\nd = 4\nclasses = 5\nval_size = 50\n[run]\nsteps = 30\nepochs = 4\nb = 10\nn_seeds = 3\nprobe_size = 32\ntrials = 3\n[profile]\nn_samples = 2000\n";
    let configs = [
        ("stability", format!("experiment = \"stability\"\n{small}")),
        ("bdc", format!("experiment = \"bdc\"\n{small}")),
        ("gradcheck", format!("experiment = \"gradcheck\"\n{small}")),
        ("genplot", format!("experiment = \"genplot\"\n{small}")),
        ("bounds", format!("experiment = \"bounds\"\n{small}[bounds]\ntheorem = \"all\"\n")),
        ("sweep", format!("experiment = \"sweep\"\n{small}[sweep]\nfield = \"optimizer.eta\"\nvalues = [1e-3, 1e-2]\n")),
    ];
    let mut compared = 0;
    for (name, src) in configs {
        let cfg_path = tmp.path().join(format!("{name}.toml"));
        std::fs::write(&cfg_path, src).unwrap();
        let first = tmp.path().join(format!("{name}_a"));
        let second = tmp.path().join(format!("{name}_b"));
        let o1 = lipstab(&["run", "--config", cfg_path.to_str().unwrap(), "--out", first.to_str().unwrap()]);
        if !o1.status.success() {
            return Err(format!("{name}: first run failed: {}", String::from_utf8_lossy(&o1.stderr)));
        }
        let echo = first.join("config_echo.toml");
        let o2 = lipstab(&["run", "--config", echo.to_str().unwrap(), "--out", second.to_str().unwrap(), "--threads", "1"]);
        if !o2.status.success() {
            return Err(format!("{name}: re-run from echo failed: {}", String::from_utf8_lossy(&o2.stderr)));
        }
        let (a, b) = (files(&first), files(&second));
        if a != b {
            return Err(format!("{name}: outputs differ after re-running from the config echo"));
        }
        compared += a.len();
    }
    Ok(format!("{compared} result files byte-identical across 6 experiments re-run from their config echo"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", c1_gradients),
        ("GJM alpha=0.5 identity", c2_hellinger),
        ("moment bound invariant", c3_moment_bound),
        ("growth recursion audit", c4_growth_audit),
        ("bias correction exactness", c5_bias_correction),
        ("AdamW decay contraction", c6_decay_contraction),
        ("bound calculators", c7_bounds),
        ("loss-profile ordering", c8_profiles),
        ("empirical stability scaling", c9_scaling),
        ("generalization-gap direction", c10_gap_direction),
        ("determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
