use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use sscl::config::{Arm, RunConfig};
use sscl::error::{Error, Result};
use sscl::pipeline::{self, Layout};
use sscl::sscl_core::pseudolabel::purity_exact;
use sscl::sscl_core::train::LossMode;

/// Semi-supervised contrastive learning for long-tailed tile classification.
#[derive(Debug, Parser)]
#[command(name = "sscl", version)]
struct Cli {
    /// Run configuration (TOML). Training verbs require one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, env = "SSCL_OUTPUT_ROOT", default_value = "runs", global = true)]
    out: PathBuf,
    /// Validate the config and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Render the synthetic region and write all tiles.
    GenData,
    /// Assign blocks to train/val/test/unlabeled.
    Split,
    /// Replicate training positives.
    Upsample,
    /// Pretrain one loss mode.
    Pretrain {
        /// Loss mode; defaults to `pretrain.loss.mode`.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<LossMode>,
        /// Continue after the last saved epoch.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the linear probe on a pretrained arm, or train the baseline.
    Probe {
        #[arg(long, value_parser = parse_arm)]
        arm: Option<Arm>,
    },
    /// Validation and test metrics of a trained arm.
    Eval {
        #[arg(long, value_parser = parse_arm)]
        arm: Option<Arm>,
    },
    /// All arms over all ablation seeds.
    Ablate {
        #[arg(long)]
        resume: bool,
    },
    /// Exact pseudo-negative purity table, as CSV.
    Purity {
        #[arg(long)]
        pool: u64,
        #[arg(long)]
        positives: u64,
        #[arg(long)]
        draw: u64,
    },
    /// Markdown summary of an ablation directory (default: the output root).
    Report { dir: Option<PathBuf> },
}

fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<LossMode, String> {
    match parse_arm(s)?.loss_mode() {
        Some(m) => Ok(m),
        None => Err("the baseline is not a pretraining mode".into()),
    }
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::GenData => "gen-data",
            Verb::Split => "split",
            Verb::Upsample => "upsample",
            Verb::Pretrain { .. } => "pretrain",
            Verb::Probe { .. } => "probe",
            Verb::Eval { .. } => "eval",
            Verb::Ablate { .. } => "ablate",
            Verb::Purity { .. } => "purity",
            Verb::Report { .. } => "report",
        }
    }

    fn needs_config(&self) -> bool {
        matches!(self, Verb::Pretrain { .. } | Verb::Probe { .. } | Verb::Eval { .. } | Verb::Ablate { .. })
    }
}

/// Lock file held for the duration of a verb.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
        let path = dir.join(".sscl.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(source) => Err(Error::Io { path, source }),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn plan(cli: &Cli, cfg: &RunConfig, layout: &Layout) -> Vec<String> {
    let seed = cfg.seed;
    let arm_or = |a: &Option<Arm>| a.unwrap_or(Arm::Pretrained(cfg.pretrain.loss.mode.into()));
    match &cli.verb {
        Verb::GenData => vec![format!("generate region (seed {seed}) into {}", layout.raw().display())],
        Verb::Split => vec![format!("split {} into {}", layout.raw().display(), layout.split().display())],
        Verb::Upsample => vec![format!("upsample train split ({:?})", cfg.data.upsample)],
        Verb::Pretrain { mode, .. } => {
            let m = mode.unwrap_or(cfg.pretrain.loss.mode);
            vec![format!(
                "pretrain {} for {} epochs into {}",
                m.name(),
                cfg.pretrain.epochs,
                layout.arm(Arm::Pretrained(m.into()), seed).display()
            )]
        }
        Verb::Probe { arm } => vec![format!("probe {} (seed {seed})", arm_or(arm))],
        Verb::Eval { arm } => vec![format!("evaluate {} (seed {seed}) on val and test", arm_or(arm))],
        Verb::Ablate { .. } => {
            let mut v = vec![format!("prepare data under {}", layout.root.join("data").display())];
            for s in &cfg.ablation.seeds {
                for a in &cfg.ablation.arms {
                    v.push(format!("train, probe and evaluate {a} with seed {s}"));
                }
            }
            v.push(format!("write metrics.csv, summary.csv and report.md under {}", layout.root.display()));
            v
        }
        Verb::Purity { pool, positives, draw } => vec![format!("purity table for N={pool} K={positives} m={draw}")],
        Verb::Report { dir } => vec![format!("report on {}", dir.as_deref().unwrap_or(&layout.root).display())],
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Verb::Purity { pool, positives, draw } = cli.verb {
        let est = purity_exact(pool, positives, draw)?;
        let mut out = io::stdout().lock();
        let _ = writeln!(out, "n,p_exactly,p_at_most");
        for n in 0..est.pmf.len() {
            let _ = writeln!(out, "{n},{},{}", est.exactly(n), est.at_most(n));
        }
        return Ok(());
    }
    if cli.verb.needs_config() && cli.config.is_none() {
        return Err(Error::MissingConfig(PathBuf::from("<none given>")));
    }
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    let layout = Layout::new(&cli.out);

    if cli.dry_run {
        println!("# verb: {}\n# output root: {}", cli.verb.name(), layout.root.display());
        for step in plan(cli, &cfg, &layout) {
            println!("# - {step}");
        }
        print!("{}", cfg.to_toml());
        return Ok(());
    }

    if let Verb::Report { dir } = &cli.verb {
        let root = dir.as_deref().unwrap_or(&layout.root);
        let text = sscl::report::render(root)?;
        let _lock = Lock::acquire(root)?;
        let path = root.join(pipeline::REPORT);
        fs::write(&path, &text).map_err(|source| Error::Io { path, source })?;
        print!("{text}");
        return Ok(());
    }

    let _lock = Lock::acquire(&layout.root)?;
    let seed = cfg.seed;
    let default_arm = Arm::Pretrained(cfg.pretrain.loss.mode.into());
    match &cli.verb {
        Verb::GenData => {
            let s = pipeline::gen_data(&cfg, &layout)?;
            println!(
                "{} tiles, {} positive, {} defective dropped, {} structures",
                s.tiles, s.positives, s.defective, s.structures
            );
        }
        Verb::Split => {
            let s = pipeline::split(&cfg, &layout)?;
            for (name, (pos, n)) in &s.counts {
                println!("{name}: {n} tiles, {pos} positive");
            }
        }
        Verb::Upsample => {
            let (before, after) = pipeline::upsample(&cfg, &layout)?;
            println!("train positives: {before} -> {after}");
        }
        Verb::Pretrain { mode, resume } => {
            let m = mode.unwrap_or(cfg.pretrain.loss.mode);
            let s = pipeline::pretrain(&cfg, &layout, m, seed, *resume)?;
            println!("{} steps, loss {:.4} -> {:.4}", s.steps, s.first_loss, s.last_loss);
            if s.pseudo_selected > 0 {
                let purity = 1.0 - s.pseudo_positive as f64 / s.pseudo_selected as f64;
                println!("pseudo-negatives: {} selected, {:.4} truly negative", s.pseudo_selected, purity);
            }
        }
        Verb::Probe { arm } => {
            let arm = arm.unwrap_or(default_arm);
            let r = match arm {
                Arm::Baseline => pipeline::baseline(&cfg, &layout, seed)?,
                _ => pipeline::probe(&cfg, &layout, arm, seed)?,
            };
            println!("{arm}: best epoch {} val BA {:.4} macro F1 {:.4}", r.epoch, r.balanced_accuracy, r.macro_f1);
        }
        Verb::Eval { arm } => {
            let arm = arm.unwrap_or(default_arm);
            for r in pipeline::evaluate(&cfg, &layout, arm, seed)? {
                println!("{arm} {}: BA {:.4} macro F1 {:.4}", r.split, r.balanced_accuracy, r.macro_f1);
            }
        }
        Verb::Ablate { resume } => {
            pipeline::run_ablation(&cfg, &layout, *resume)?;
            print!("{}", fs::read_to_string(layout.root.join(pipeline::REPORT)).unwrap_or_default());
        }
        Verb::Purity { .. } | Verb::Report { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::MissingConfig(_)) => {
            eprintln!("error: {e}");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
