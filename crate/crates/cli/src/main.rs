use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ncod_core::data::{load_csv, save_csv, save_sidecar, sidecar_path};
use ncod_core::experiment::{run_experiment, ExperimentConfig};
use ncod_core::noise::{NoiseKind, NoiseSpec, PairMap};
use ncod_core::{synth_clusters, Result, Rng, SynthSpec};

#[derive(Parser)]
#[command(
    name = "ncod",
    version,
    about = "Noisy-label training with per-sample outlier discounts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-cluster dataset as CSV.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        sep: f64,
        #[arg(long)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt the labels of a CSV dataset and write a `.noise` sidecar.
    Inject {
        #[arg(long)]
        rate: f64,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Asymmetric flip `FROM:TO`; repeatable. Defaults to c -> c+1 mod C.
        #[arg(long = "pair", value_parser = parse_pair)]
        pairs: Vec<(usize, usize)>,
        /// Flip exactly round(rate * n) labels instead of independent draws.
        #[arg(long)]
        exact: bool,
        csv: PathBuf,
    },
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config and $NCOD_OUT_DIR.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Symmetric,
    Asymmetric,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected FROM:TO, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad class `{v}`: {e}"))
    };
    Ok((parse(a)?, parse(b)?))
}

fn synth(spec: &SynthSpec, out: &Path) -> Result<()> {
    let set = synth_clusters(spec)?;
    save_csv(&set, out)?;
    println!(
        "wrote {} ({} rows, {} classes)",
        out.display(),
        set.len(),
        set.num_classes
    );
    Ok(())
}

fn inject(
    csv: &Path,
    kind: Kind,
    rate: f64,
    seed: u64,
    pairs: &[(usize, usize)],
    exact: bool,
) -> Result<()> {
    let set = load_csv(csv)?;
    let spec = match kind {
        Kind::Symmetric => {
            if !pairs.is_empty() {
                return Err(ncod_core::Error::ConfigInvalid(
                    "--pair only applies to --kind asymmetric".into(),
                ));
            }
            NoiseSpec::symmetric(rate)
        }
        Kind::Asymmetric if pairs.is_empty() => {
            println!(
                "no --pair given: using the cyclic default c -> c+1 mod {}",
                set.num_classes
            );
            NoiseSpec::asymmetric(rate, None)
        }
        Kind::Asymmetric => {
            NoiseSpec::asymmetric(rate, Some(PairMap::from_pairs(set.num_classes, pairs)?))
        }
    };
    let spec = NoiseSpec {
        exact_count: exact,
        ..spec
    };
    let (noisy, report) = spec.apply(&set.clean_labels, set.num_classes, &mut Rng::new(seed))?;
    let out = sidecar_path(csv);
    save_sidecar(&out, &set.clean_labels, &noisy)?;
    let kind = match spec.kind {
        NoiseKind::Symmetric => "symmetric",
        NoiseKind::Asymmetric => "asymmetric",
    };
    println!(
        "{kind} noise: realized rate {:.4} ({} of {} labels flipped), wrote {}",
        report.realized_rate,
        report.num_flipped(),
        set.len(),
        out.display()
    );
    Ok(())
}

fn run(config: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    cfg.validate()?;
    let dir = out_dir.unwrap_or_else(|| cfg.output_dir());
    let summary = run_experiment(&cfg, &dir)?;
    let auc = summary
        .final_u_auc
        .map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "final test accuracy {:.4}, u_auc {auc} ({} epochs, traces in {})",
        summary.final_accuracy,
        summary.report.records.len(),
        summary.out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            classes,
            per_class,
            dim,
            sep,
            spread,
            seed,
            out,
        } => synth(
            &SynthSpec {
                num_classes: classes,
                per_class,
                dim,
                separation: sep,
                spread,
                seed,
            },
            &out,
        ),
        Command::Inject {
            rate,
            kind,
            seed,
            pairs,
            exact,
            csv,
        } => inject(&csv, kind, rate, seed, &pairs, exact),
        Command::Run { config, out_dir } => run(&config, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
