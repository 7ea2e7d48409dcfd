use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advst::classifier::ModelParams;
use advst::gradcheck;
use advst_cli::{ablate, ablation_csv, accuracy_csv, evaluate, export, parse_sweep, train, RunConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advst", version, about = "Adversarial semantics-transform training for single-domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        match self.seed {
            Some(s) => cfg.with_override("seed", &s.to_string()),
            None => Ok(cfg),
        }
    }

    fn out_dir(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.out.clone().or_else(|| cfg.out.clone())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, or one per value with --sweep.
    Train {
        #[command(flatten)]
        common: Common,
        /// Repeat training for each value, e.g. `lambda=1,10,100`.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Accuracy of a checkpoint on the config's test and target domains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Extra domains from raw dumps (`name=path`).
        #[arg(long = "data")]
        data: Vec<String>,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negates one primitive's backward (mutation check).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// The five component ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds per configuration, consecutive from the config's seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Embedding CSV and a preview of generated samples.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples per domain.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        no_preview: bool,
    },
}

fn print_accuracies(rows: &[advst_cli::DomainAccuracy]) {
    for r in rows {
        println!("{:<16} {:.4}  (n={})", r.domain, r.accuracy, r.n);
    }
}

fn cmd_train(common: &Common, sweep: Option<&str>) -> Result<()> {
    let cfg = common.load()?;
    let out = common.out_dir(&cfg);
    let Some(sweep) = sweep else {
        let outcome = train(&cfg, out.as_deref())?;
        print_accuracies(&outcome.accuracies);
        return Ok(());
    };
    let (key, values) = parse_sweep(sweep)?;
    let mut summary = String::new();
    for v in &values {
        let c = cfg.with_override(&key, v)?;
        let dir = out.as_ref().map(|o| o.join(format!("{key}={v}")));
        println!("{key} = {v}");
        let outcome = train(&c, dir.as_deref())?;
        print_accuracies(&outcome.accuracies);
        if summary.is_empty() {
            summary = format!("{key}");
            for a in &outcome.accuracies {
                summary.push_str(&format!(",acc_{}", a.domain));
            }
            summary.push('\n');
        }
        summary.push_str(v);
        for a in &outcome.accuracies {
            summary.push_str(&format!(",{}", a.accuracy));
        }
        summary.push('\n');
    }
    if let Some(o) = out {
        fs::write(o.join("sweep.csv"), summary)?;
    }
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, data: &[String]) -> Result<()> {
    let cfg = common.load()?;
    let model = ModelParams::<f32>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut domains = if data.is_empty() || common.config.is_some() { cfg.load_eval_domains()? } else { Vec::new() };
    for d in data {
        let (name, path) = d.split_once('=').with_context(|| format!("--data `{d}`: expected NAME=PATH"))?;
        domains.push(advst::data::Dataset::load_raw(Path::new(path), name)?);
    }
    let rows = evaluate(&model, &domains)?;
    let csv = accuracy_csv(&rows);
    print!("{csv}");
    if let Some(o) = common.out_dir(&cfg) {
        fs::create_dir_all(&o)?;
        fs::write(o.join("eval.csv"), csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> Result<()> {
    let fault: Option<&'static str> = match fault {
        Some(f) => match gradcheck::fault_targets().into_iter().find(|t| *t == f) {
            Some(t) => Some(t),
            None => bail!("unknown fault target `{f}`"),
        },
        None => None,
    };
    let report = gradcheck::run_all(fault, seed)?;
    println!("suite,case,max_rel_error,tolerance,status");
    for c in &report.cases {
        println!(
            "{},{},{:.3e},{:.0e},{}",
            c.suite,
            c.name,
            c.max_rel_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failures = report.failures();
    if !failures.is_empty() {
        let names: Vec<String> = failures.iter().map(|c| format!("{}/{}", c.suite, c.name)).collect();
        bail!("{} gradient check(s) failed: {}", failures.len(), names.join(", "));
    }
    println!("all {} checks passed", report.cases.len());
    Ok(())
}

fn cmd_ablate(common: &Common, seeds: usize) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = common.load()?;
    let out = common.out_dir(&cfg);
    let rows = ablate(&cfg, seeds, out.as_deref(), |msg| eprintln!("{msg}"))?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    if let Some(o) = out {
        fs::write(o.join("ablation.csv"), csv)?;
    }
    Ok(())
}

fn cmd_export(common: &Common, checkpoint: &Path, samples: usize, no_preview: bool) -> Result<()> {
    let cfg = common.load()?;
    let out = common.out_dir(&cfg).context("export needs --out or `out` in the config")?;
    let model = ModelParams::<f32>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let paths = export(&model, &cfg, &out, samples, !no_preview)?;
    println!("wrote {}", paths.embeddings.display());
    if let Some(p) = paths.preview {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, sweep } => cmd_train(common, sweep.as_deref()),
        Command::Eval { common, checkpoint, data } => cmd_eval(common, checkpoint, data),
        Command::Gradcheck { seed, inject_fault } => cmd_gradcheck(*seed, inject_fault.as_deref()),
        Command::Ablate { common, seeds } => cmd_ablate(common, *seeds),
        Command::Export { common, checkpoint, samples, no_preview } => cmd_export(common, checkpoint, *samples, *no_preview),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
