//! `koopman` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

use koopman_core::checks::{example1_exactness, run_checks, EXACTNESS_TOL};
use koopman_core::config::ExperimentConfig;
use koopman_core::edmd::{build_snapshots, fit_with, sample_uniform};
use koopman_core::experiments::{reproduce, RunOptions, FIGURES};

#[derive(Parser, Debug)]
#[command(name = "koopman", version, about = "Koopman surrogates with manifold reprojection")]
struct Cli {
    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `edmd.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fail when a snapshot trajectory leaves the inflated domain instead of dropping it.
    #[arg(long, global = true)]
    strict: bool,
    /// Fit even with fewer snapshots than observables (minimum-norm solution).
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit K̂ and write it with its metadata.
    Fit {
        /// Also compare against the exact operator where one is known.
        #[arg(long)]
        verify: bool,
    },
    /// Write the CSVs behind one figure: fig3, fig45, fig6 or fig7.
    Reproduce { figure: String },
    /// Run the structural checks and print one line per check.
    Check,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type AnyResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn run(cli: Cli) -> AnyResult<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        cfg.edmd.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    let out = cfg.output.dir.clone();
    fs::create_dir_all(&out)?;

    let (command, ok, files) = match &cli.command {
        Command::Fit { verify } => {
            let (ok, files) = cmd_fit(&cfg, &cli, *verify)?;
            ("fit".to_string(), ok, files)
        }
        Command::Reproduce { figure } => {
            if !FIGURES.contains(&figure.as_str()) {
                return Err(format!("unknown figure `{figure}` (expected one of {})", FIGURES.join(", ")).into());
            }
            let opts = RunOptions { seed: cfg.edmd.seed, strict: cli.strict, ..RunOptions::default() };
            let files = reproduce(figure, &opts, &out).map_err(|e| format!("{figure}: {e}"))?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            (format!("reproduce {figure}"), true, files)
        }
        Command::Check => {
            let outcomes = run_checks(&cfg, cli.strict)?;
            for o in &outcomes {
                println!("{o}");
            }
            (String::from("check"), outcomes.iter().all(|o| o.passed), Vec::new())
        }
    };
    write_manifest(&out, &command, &text, &cfg, &files, ok)?;
    Ok(ok)
}

fn cmd_fit(cfg: &ExperimentConfig, cli: &Cli, verify: bool) -> AnyResult<(bool, Vec<PathBuf>)> {
    let system = cfg.system()?;
    let dictionary = cfg.dictionary_for(&system)?;
    if cfg.edmd.m < dictionary.len() && !cli.force {
        return Err(format!(
            "m = {} snapshots cannot determine {} observables; pass --force for the minimum-norm fit",
            cfg.edmd.m,
            dictionary.len()
        )
        .into());
    }
    let points = sample_uniform(system.domain(), cfg.edmd.m, cfg.edmd.seed);
    let snapshots = build_snapshots(&system, &points, cfg.edmd.dt, cfg.edmd.flow_tol, cli.strict)?;
    info!("{} snapshot pairs", snapshots.len());
    let mut opts = cfg.fit_options();
    opts.allow_rank_deficient = cli.force;
    let k = fit_with(&snapshots.with_seed(cfg.edmd.seed), &dictionary, &opts)?;

    let path = cfg.output.dir.join("koopman.csv");
    k.save(&path)?;
    println!("residual_rms = {:e}", k.residual_rms);
    println!("condition_number = {:e}", k.condition_number);
    println!("wrote {}", path.display());

    let mut ok = true;
    if verify {
        match example1_exactness(&system, &k) {
            Ok(err) => {
                ok = err <= EXACTNESS_TOL;
                println!("{} ‖K̂ − exp(Δt·A)‖_F = {err:e}", if ok { "PASS" } else { "FAIL" });
            }
            Err(e) => println!("verify: {e}"),
        }
    }
    let mut files = vec![path.clone()];
    files.push(koopman_core::edmd::sidecar_path(&path));
    Ok((ok, files.into_iter().filter(|f| f.exists()).collect()))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config_text: &str,
    cfg: &ExperimentConfig,
    files: &[PathBuf],
    ok: bool,
) -> AnyResult<()> {
    let hash = Sha256::digest(cfg.to_toml().as_bytes());
    let raw = Sha256::digest(config_text.as_bytes());
    let mut text = String::new();
    text += &format!("command = {command}\n");
    text += &format!("koopman_version = {}\n", env!("CARGO_PKG_VERSION"));
    text += &format!("config_sha256 = {}\n", hex(&hash));
    text += &format!("config_file_sha256 = {}\n", hex(&raw));
    text += &format!("seed = {}\n", cfg.edmd.seed);
    text += &format!("status = {}\n", if ok { "ok" } else { "failed" });
    for f in files {
        text += &format!("output = {}\n", f.file_name().map(|n| n.to_string_lossy()).unwrap_or_default());
    }
    text += "\n[config]\n";
    text += &cfg.to_toml();
    fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
