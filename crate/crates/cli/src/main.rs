use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use coprune::config::{RunConfig, PRESETS};
use coprune::env::{run_episode, EnvSpec};
use coprune::model::arch::ArchDescription;
use coprune::model::flops::{breakdown, flops_of_block, full_breakdown, prunable_budget, FlopsBreakdown};
use coprune::model::mask::removed_count;
use coprune::model::Architecture;
use coprune::orchestrator::{run_ablation, run_training, AblationGrid, ABLATION_FILE};
use coprune::report::{report_ablation, report_run};

#[derive(Parser)]
#[command(name = "coprune", version, about = "Joint training and RL-driven structured channel pruning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train, prune and fine-tune one configuration.
    Train(RunArgs),
    /// Write CSV summaries and SVG plots for a run or ablation directory.
    Report {
        run_dir: PathBuf,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the FLOPs breakdown of an architecture and, given actions, the
    /// per-step bounds and realized budget.
    Flops {
        /// Architecture JSON file or built-in architecture name.
        #[arg(long, conflicts_with_all = ["config", "preset"])]
        arch: Option<String>,
        /// Take the architecture (and pruning rate) from a run config file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Take the architecture (and pruning rate) from a run preset.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: Option<String>,
        /// Comma-separated per-block pruning actions in [0, 1).
        #[arg(long, value_delimiter = ',', conflicts_with = "uniform")]
        actions: Option<Vec<f64>>,
        /// The same action for every block.
        #[arg(long)]
        uniform: Option<f64>,
        /// Whole-model fraction of FLOPs to remove; defaults to the config's
        /// rate, or no constraint with --arch.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Run the embedding on/off comparison and the episodes-per-epoch sweep.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Seeds to repeat every arm with (overrides --seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.35, 0.5, 0.65])]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 15])]
        episodes: Vec<usize>,
        #[arg(long, default_value_t = 0.65)]
        sweep_rate: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration; `smoke` when neither this nor --config is given.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and print the resolved schedule and budget, then exit.
    #[arg(long)]
    dry_run: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref(), self.preset.as_deref())?.unwrap_or(RunConfig::preset("smoke")?);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn load_config(path: Option<&Path>, preset: Option<&str>) -> Result<Option<RunConfig>> {
    Ok(match (path, preset) {
        (Some(p), _) => Some(RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
        (None, Some(name)) => Some(RunConfig::preset(name)?),
        (None, None) => None,
    })
}

fn dry_run(cfg: &RunConfig) -> Result<()> {
    let (arch, budget) = cfg.validate()?;
    let full = full_breakdown(&arch);
    let s = &cfg.schedule;
    println!("config {} (seed {})", cfg.name, cfg.seed);
    println!("architecture {}: {} prunable blocks", arch.name, arch.blocks.len());
    println!(
        "schedule: T={} warmup 1..={} buffer-fill {}..={} agent-training {}..={} episodes/epoch {} agent steps/epoch {}",
        s.epochs,
        s.warmup,
        s.warmup + 1,
        s.fill_end,
        s.agent_start + 1,
        s.agent_end,
        s.episodes_per_epoch,
        s.agent_steps
    );
    println!("total MACs {} (prunable {}, fixed {})", full.total, full.prunable, full.fixed);
    println!(
        "target: remove {:.2}% of total MACs -> keep at most {} prunable MACs ({} total)",
        cfg.prune.rate * 100.0,
        budget,
        budget + full.fixed
    );
    println!("output directory {}", cfg.out_dir.display());
    Ok(())
}

fn resolve_arch(name_or_path: &str) -> Result<Architecture> {
    let desc = match ArchDescription::preset(name_or_path) {
        Some(d) => d,
        None => {
            let p = Path::new(name_or_path);
            if !p.exists() {
                bail!(
                    "'{name_or_path}' is neither an architecture file nor a built-in ({})",
                    ArchDescription::PRESETS.join(", ")
                );
            }
            ArchDescription::load(p).with_context(|| format!("reading architecture {}", p.display()))?
        }
    };
    Ok(desc.resolve()?)
}

fn flops(
    arch: Option<&str>,
    config: Option<&Path>,
    preset: Option<&str>,
    actions: Option<Vec<f64>>,
    uniform: Option<f64>,
    rate: Option<f64>,
) -> Result<()> {
    let (arch, rate) = match (arch, load_config(config, preset)?) {
        (Some(a), _) => (resolve_arch(a)?, rate),
        (None, Some(cfg)) => (cfg.architecture()?, rate.or(Some(cfg.prune.rate))),
        (None, None) => bail!("give --arch, --config or --preset"),
    };
    let full = full_breakdown(&arch);
    println!("architecture {}: {} prunable blocks", arch.name, arch.blocks.len());
    println!("{:>5} {:>6} {:>6} {:>6} {:>6} {:>3} {:>12}", "block", "kind", "c_in", "inner", "c_out", "s", "MACs");
    for (b, f) in arch.blocks.iter().zip(&full.per_block) {
        println!(
            "{:>5} {:>6} {:>6} {:>6} {:>6} {:>3} {:>12}",
            b.index,
            format!("{:?}", b.kind).chars().take(6).collect::<String>(),
            b.c_in,
            b.inner,
            b.c_out,
            b.stride,
            f
        );
    }
    println!(
        "prunable {}  stem {}  shortcuts {}  head {}  total {}",
        full.prunable, full.stem, full.shortcuts, full.head, full.total
    );

    let budget = match rate {
        Some(r) => prunable_budget(&full, r)?,
        None => full.prunable,
    };
    if let Some(r) = rate {
        println!("budget: remove {:.2}% of total -> {} prunable MACs", r * 100.0, budget);
    }
    let actions = match (actions, uniform) {
        (Some(a), _) => a,
        (None, Some(u)) => vec![u; arch.blocks.len()],
        (None, None) => return Ok(()),
    };
    if actions.len() != arch.blocks.len() {
        bail!("{} actions for {} blocks", actions.len(), arch.blocks.len());
    }
    if rate.is_none() {
        let mut kept = Vec::new();
        println!("no budget given: actions applied without bounds");
        println!("{:>5} {:>8} {:>6} {:>12}", "block", "action", "kept", "MACs");
        for (b, &a) in arch.blocks.iter().zip(&actions) {
            if !(0.0..1.0).contains(&a) {
                bail!("block {}: action {a} outside [0, 1)", b.index);
            }
            let k = b.inner - removed_count(a, b.inner);
            println!("{:>5} {:>8.4} {:>6} {:>12}", b.index, a, k, flops_of_block(b, k)?);
            kept.push(k);
        }
        let after = breakdown(&arch, &kept)?;
        print_realized(after.prunable, &full, None);
        return Ok(());
    }
    let spec = EnvSpec::new(&arch, budget)?;
    let rankings: Vec<Vec<usize>> = arch.blocks.iter().map(|b| (0..b.inner).collect()).collect();
    let mut next = actions.iter().copied();
    let ep = run_episode(&spec, &rankings, 0, &mut |_| Ok(next.next().expect("one action per block")), &mut |_| Ok(0.0))?;
    println!("{:>5} {:>8} {:>8} {:>8} {:>8} {:>6}", "block", "raw", "a_min", "a_max", "executed", "kept");
    for (l, s) in ep.steps.iter().enumerate() {
        println!(
            "{:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6}",
            l + 1,
            s.raw,
            s.bounds.a_min,
            s.bounds.a_max,
            s.executed,
            s.kept
        );
    }
    print_realized(ep.realized_flops, &full, Some(budget));
    Ok(())
}

fn print_realized(prunable: u64, full: &FlopsBreakdown, budget: Option<u64>) {
    let total = prunable + full.fixed;
    let budget = budget.map(|b| format!(", budget {b}")).unwrap_or_default();
    println!(
        "realized prunable {prunable} / {} ({:.4}%){budget}; total {total} / {} ({:.4}%)",
        full.prunable,
        100.0 * prunable as f64 / full.prunable as f64,
        full.total,
        100.0 * total as f64 / full.total as f64
    );
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Train(args) => {
            let cfg = args.config()?;
            if args.dry_run {
                return dry_run(&cfg);
            }
            let out = run_training(&cfg, &cfg.out_dir)?;
            let r = &out.report;
            println!(
                "baseline {:.2}%  pruned {:.2}%  delta {:+.2}  pruned FLOPs {:.2}%  -> {}",
                r.baseline_acc * 100.0,
                r.pruned_acc * 100.0,
                (r.pruned_acc - r.baseline_acc) * 100.0,
                r.pruned_flops_pct,
                cfg.out_dir.display()
            );
        }
        Cmd::Report { run_dir, out } => {
            if run_dir.join(ABLATION_FILE).exists() {
                let art = report_ablation(&run_dir, out.as_deref())?;
                for f in &art.files {
                    println!("{}", f.display());
                }
            } else {
                let art = report_run(&run_dir, out.as_deref())?;
                for f in &art.files {
                    println!("{}", f.display());
                }
                if let Some(s) = art.summary {
                    println!("{}", s.to_csv().trim_end());
                }
            }
        }
        Cmd::Flops {
            arch,
            config,
            preset,
            actions,
            uniform,
            rate,
        } => flops(arch.as_deref(), config.as_deref(), preset.as_deref(), actions, uniform, rate)?,
        Cmd::Ablate {
            run,
            seeds,
            rates,
            episodes,
            sweep_rate,
        } => {
            let cfg = run.config()?;
            if run.dry_run {
                return dry_run(&cfg);
            }
            let grid = AblationGrid {
                rates,
                episode_counts: episodes,
                sweep_rate,
                seeds: seeds.unwrap_or(vec![cfg.seed]),
            };
            let series = run_ablation(&cfg, &grid, &cfg.out_dir)?;
            println!("{} curves -> {}", series.len(), cfg.out_dir.join(ABLATION_FILE).display());
        }
    }
    Ok(())
}
