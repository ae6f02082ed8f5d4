use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use treevb::harness::{parse_config, run_experiment, ExperimentSpec, Method, Task};
use treevb::inference::{Estimator, Model};

#[derive(Parser)]
#[command(
    name = "treevb",
    version,
    about = "Variational Bayesian wavelet image reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct images corrupted by additive Gaussian noise.
    Denoise(RunArgs),
    /// Reconstruct images from a random subset of their pixels.
    Inpaint(RunArgs),
    /// Run the built-in reference checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// Image files or directories of PGM/PNG images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Plain key=value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated models: lap-fact, t-fact, lap-tree, t-tree.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated estimators: vb, map.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    learn_hypers: bool,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    mask_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner_rounds: Option<usize>,
    #[arg(long)]
    pls_iters: Option<usize>,
    #[arg(long)]
    pm_samples: Option<usize>,
    #[arg(long)]
    pm_cg_iters: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Skip float, coefficient and marginal dumps.
    #[arg(long)]
    no_dumps: bool,
}

fn parse_list<T: std::str::FromStr<Err = treevb::Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(anyhow::Error::from))
        .collect()
}

fn expand_images(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    matches!(
                        f.extension()
                            .and_then(|e| e.to_str())
                            .map(str::to_ascii_lowercase)
                            .as_deref(),
                        Some("pgm" | "png")
                    )
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn build_spec(task: Task, args: RunArgs) -> Result<ExperimentSpec> {
    let file: BTreeMap<String, String> = match &args.config {
        Some(p) => parse_config(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => BTreeMap::new(),
    };
    let known = [
        "model",
        "mode",
        "learn_hypers",
        "levels",
        "sigma2",
        "mask_frac",
        "seed",
        "outer",
        "inner_rounds",
        "pls_iters",
        "pm_samples",
        "pm_cg_iters",
        "out_dir",
        "dumps",
    ];
    if let Some(k) = file.keys().find(|k| !known.contains(&k.as_str())) {
        bail!("unknown config key '{k}'");
    }
    fn get<T: std::str::FromStr>(
        file: &BTreeMap<String, String>,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        file.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| anyhow::anyhow!("config key {key}: {e}"))
            })
            .transpose()
    }

    let mut spec = ExperimentSpec::new(task);
    let models: Vec<Model> =
        parse_list(&get(&file, args.model, "model")?.unwrap_or_else(|| "lap-tree".into()))?;
    let modes: Vec<Estimator> =
        parse_list(&get(&file, args.mode, "mode")?.unwrap_or_else(|| "vb".into()))?;
    spec.methods = modes
        .iter()
        .flat_map(|&estimator| models.iter().map(move |&model| Method { model, estimator }))
        .collect();
    spec.learn_hypers =
        args.learn_hypers || get::<bool>(&file, None, "learn_hypers")?.unwrap_or(false);
    spec.dumps = !args.no_dumps && get::<bool>(&file, None, "dumps")?.unwrap_or(true);
    if let Some(v) = get(&file, args.levels, "levels")? {
        spec.levels = v;
    }
    if let Some(v) = get(&file, args.sigma2, "sigma2")? {
        spec.sigma2 = v;
    }
    if let Some(v) = get(&file, args.mask_frac, "mask_frac")? {
        spec.mask_frac = v;
    }
    if let Some(v) = get(&file, args.seed, "seed")? {
        spec.seed = v;
    }
    let b = &mut spec.budgets;
    for (slot, flag, key) in [
        (&mut b.outer, args.outer, "outer"),
        (&mut b.inner_rounds, args.inner_rounds, "inner_rounds"),
        (&mut b.pls_iters, args.pls_iters, "pls_iters"),
        (&mut b.pm_samples, args.pm_samples, "pm_samples"),
        (&mut b.pm_cg_iters, args.pm_cg_iters, "pm_cg_iters"),
    ] {
        if let Some(v) = get(&file, flag, key)? {
            *slot = v;
        }
    }
    spec.out_dir = get(&file, args.out_dir, "out_dir")?;
    spec.images = expand_images(&args.images)?;
    Ok(spec)
}

fn run(task: Task, args: RunArgs) -> Result<ExitCode> {
    let spec = build_spec(task, args)?;
    let report = run_experiment(&spec)?;
    let mut out = std::io::stdout().lock();
    report.write_csv(&mut out)?;
    for s in &report.summary {
        println!("# {} ({} images): {} dB", s.method, s.images, s.formatted());
    }
    for f in &report.failures {
        let m = f
            .method
            .map(|m| m.to_string())
            .unwrap_or_else(|| "-".into());
        eprintln!("failed: {} {}: {}", f.image, m, f.error);
    }
    if let Some(dir) = &spec.out_dir {
        eprintln!("outputs written to {}", Path::new(dir).display());
    }
    Ok(if report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Denoise(a) => run(Task::Denoise, a),
        Command::Inpaint(a) => run(Task::Inpaint, a),
        Command::Selftest => Ok(if treevb::selftest::run_all(&mut std::io::stdout()) {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        }),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
