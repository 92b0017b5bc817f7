use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lipstab::Exec;
use lipstab_cli::config::{ExperimentConfig, ExperimentKind};
use lipstab_cli::plot::genplot_dir;
use lipstab_cli::{run_experiment, CliError, Ctx, RunOutput};

#[derive(Parser)]
#[command(name = "lipstab", version, about = "Adam/AdamW stability experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment named in the config.
    Run(Common),
    /// Run the config's [sweep] block.
    Sweep(Common),
    /// Evaluate the config's [bounds] block.
    Bounds(Common),
    /// Train and emit curve series, or re-emit them from `--out` when no config is given.
    Genplot(GenplotArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct GenplotArgs {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct ExecArgs {
    /// Output directory; overrides `out` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (1 runs sequentially).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    #[arg(long)]
    verbose: bool,
}

impl ExecArgs {
    fn ctx(&self) -> Ctx {
        let exec = match self.threads {
            Some(1) => Exec::Sequential,
            _ => Exec::default(),
        };
        #[cfg(feature = "parallel")]
        if let Some(n) = self.threads.filter(|&n| n > 1) {
            // Fails only if a pool already exists, which cannot happen here.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ctx { exec, verbose: self.verbose }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let src = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.into(), source: e })?;
    Ok(ExperimentConfig::from_toml(&src)?)
}

fn out_dir(args: &ExecArgs, cfg: Option<&ExperimentConfig>) -> PathBuf {
    args.out.clone().or_else(|| cfg.and_then(|c| c.out.clone())).unwrap_or_else(|| PathBuf::from("results"))
}

fn execute(cfg: ExperimentConfig, args: &ExecArgs) -> Result<(), CliError> {
    let ctx = args.ctx();
    let dir = out_dir(args, Some(&cfg));
    ctx.note(format!("{} -> {}", cfg.experiment.name(), dir.display()));
    let out = run_experiment(&cfg, &ctx)?;
    finish(&out, &dir)
}

fn finish(out: &RunOutput, dir: &Path) -> Result<(), CliError> {
    out.write_to(dir)?;
    print!("{}", out.stdout);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Run(c) => execute(load(&c.config)?, &c.exec),
        Cmd::Sweep(c) => {
            let mut cfg = load(&c.config)?;
            cfg.experiment = ExperimentKind::Sweep;
            cfg.check()?;
            execute(cfg, &c.exec)
        }
        Cmd::Bounds(c) => {
            let mut cfg = load(&c.config)?;
            cfg.experiment = ExperimentKind::Bounds;
            cfg.check()?;
            execute(cfg, &c.exec)
        }
        Cmd::Genplot(g) => match &g.config {
            Some(path) => {
                let mut cfg = load(path)?;
                cfg.experiment = ExperimentKind::Genplot;
                execute(cfg, &g.exec)
            }
            None => {
                let dir = out_dir(&g.exec, None);
                finish(&genplot_dir(&dir)?, &dir)
            }
        },
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lipstab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
