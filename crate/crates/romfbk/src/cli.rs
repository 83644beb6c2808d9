//! Command-line front end: generate data, train, run loops, evaluate,
//! benchmark, export.
//!
//! All artifacts are written atomically (temporary file plus rename), and
//! every random choice descends from the root seed, so re-running a
//! command with the same inputs reproduces its outputs byte for byte.
//! Wall-clock numbers go to stdout only, never into artifacts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::controller::{
    benchmark, run_full_order_loop, run_latent_loop, run_uncontrolled, BenchScenario,
    LoopOptions, LoopReport,
};
use crate::grid::{gaussian_density, Scenario};
use crate::io;
use crate::ocp::generate_dataset;
use crate::seed::derive_seed;
use crate::training::{evaluate_model, train_controller};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "romfbk",
    version,
    about = "Reduced-order feedback control of a 2D transport plant"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Full,
    Latent,
    Uncontrolled,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenarios and solve the open-loop control problems.
    Generate {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset artifact.
        #[arg(long)]
        out: PathBuf,
        /// Root seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train reducers, policy, and latent forward model on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input dataset artifact.
        #[arg(long)]
        dataset: PathBuf,
        /// Output model artifact; a `<out>.loss.csv` sidecar records the
        /// optimization history.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one closed-loop scenario with a trained model.
    Control {
        /// Model artifact.
        #[arg(long)]
        model: PathBuf,
        /// Feedback regime.
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        /// Scenario parameters: target μ1 μ2, optionally followed by the
        /// background flow γ α.
        #[arg(long, num_args = 2..=4, required = true, allow_negative_numbers = true)]
        scenario: Vec<f64>,
        /// Initial Gaussian center x1 x2.
        #[arg(long, num_args = 2, required = true, allow_negative_numbers = true)]
        y0: Vec<f64>,
        /// Observation noise level.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output report artifact.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report reconstruction and policy errors on a dataset split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Evaluate the training split instead of the held-out one.
        #[arg(long, default_value_t = false)]
        train_split: bool,
        /// Optional JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare wall-clock cost of open-loop optimization against both
    /// feedback loops.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of benchmark scenarios.
        #[arg(long, default_value_t = 3)]
        scenarios: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON output (contains timings; not byte-reproducible).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump an artifact's tensors to CSV files.
    ExportCsv {
        /// Input artifact of any kind.
        #[arg(long)]
        input: PathBuf,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point behind `main`; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    configure_threads();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the same error path
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Caps the rayon pool when ROMFBK_THREADS is set. Ignores failures from
/// an already-initialized pool, which only happens in-process in tests.
fn configure_threads() {
    if let Ok(v) = std::env::var("ROMFBK_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out, seed } => generate_cmd(&config, &out, seed),
        Command::Train { config, dataset, out, seed } => {
            train_cmd(&config, &dataset, &out, seed)
        }
        Command::Control { model, mode, scenario, y0, sigma, seed, out } => {
            control_cmd(&model, mode, &scenario, &y0, sigma, seed, &out)
        }
        Command::Evaluate { model, dataset, train_split, out } => {
            evaluate_cmd(&model, &dataset, train_split, &out)
        }
        Command::Bench { model, config, scenarios, seed, out } => {
            bench_cmd(&model, &config, scenarios, seed, &out)
        }
        Command::ExportCsv { input, out } => {
            let written = io::export_csv(&input, &out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn generate_cmd(config: &Option<PathBuf>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?.resolved(seed);
    let grid = cfg.grid()?;
    let ds = generate_dataset(grid, &cfg.fom, &cfg.ocp, &cfg.dataset)?;
    io::save_dataset(out, &ds)?;
    let n_train = ds.indices(true).len();
    let n_test = ds.indices(false).len();
    println!(
        "dataset: {} trajectories ({n_train} train, {n_test} test) on a {}x{} grid -> {}",
        ds.trajectories.len(),
        grid.nx(),
        grid.nx(),
        out.display()
    );
    Ok(())
}

fn loss_csv_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".loss.csv");
    PathBuf::from(os)
}

fn train_cmd(
    config: &Option<PathBuf>,
    dataset: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?.resolved(seed);
    let ds = io::load_dataset(dataset)?;
    if cfg.train.mu_box.len() != ds.mu_dim() {
        return Err(Error::invalid(format!(
            "config parameter box covers {} entries but the dataset scenarios have {}",
            cfg.train.mu_box.len(),
            ds.mu_dim()
        )));
    }
    let (model, report) = train_controller(&ds, &cfg.train)?;
    io::save_model(out, &model)?;

    let mut rows = Vec::new();
    for (i, v) in report.stage1.loss_history.iter().enumerate() {
        rows.push(vec![1.0, i as f64, *v]);
    }
    if let Some(s2) = &report.stage2 {
        for (i, v) in s2.loss_history.iter().enumerate() {
            rows.push(vec![2.0, i as f64, *v]);
        }
    }
    let csv = loss_csv_path(out);
    io::write_csv(
        &csv,
        &["stage".into(), "iteration".into(), "loss".into()],
        &rows,
    )?;

    println!(
        "model: trained on {} transitions, final loss {:.6e} -> {}",
        report.n_transitions,
        report.final_parts.total(),
        out.display()
    );
    println!("loss history -> {}", csv.display());
    let test = ds.split(false);
    if !test.is_empty() {
        let eval = evaluate_model(&model, &test)?;
        print_eval(&eval);
    }
    Ok(())
}

fn scenario_from_args(values: &[f64]) -> Result<Scenario> {
    match values {
        [mu1, mu2] => Ok(Scenario::vacuum(*mu1, *mu2)),
        [mu1, mu2, gamma, alpha] => Ok(Scenario::with_flow(*mu1, *mu2, *gamma, *alpha)),
        _ => Err(Error::invalid(format!(
            "--scenario takes 2 values (target) or 4 (target plus flow), got {}",
            values.len()
        ))),
    }
}

fn control_cmd(
    model_path: &Path,
    mode: Mode,
    scenario: &[f64],
    y0: &[f64],
    sigma: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma = {sigma} must be ≥ 0")));
    }
    let model = io::load_model(model_path)?;
    let scenario = scenario_from_args(scenario)?;
    let y0 = gaussian_density(model.meta.grid, (y0[0], y0[1]), model.meta.variance)?;
    let opts = LoopOptions { sigma, seed, shadow_plant: true };
    let (report, mode_name): (LoopReport, &str) = match mode {
        Mode::Full => (run_full_order_loop(&model, &y0, &scenario, &opts)?, "full"),
        Mode::Latent => (run_latent_loop(&model, &y0, &scenario, &opts)?, "latent"),
        Mode::Uncontrolled => {
            (run_uncontrolled(&y0, &scenario, &model.meta.fom)?, "uncontrolled")
        }
    };
    io::save_loop_report(out, &report, &scenario, mode_name, sigma, seed)?;
    println!(
        "{mode_name} loop: distance {:.4} -> {:.4}, arrival {:.4} -> {}",
        report.distances[0],
        report.final_distance(),
        report.arrival,
        out.display()
    );
    println!(
        "timing: inference {:.3} ms, plant {:.3} ms",
        report.inference_secs * 1e3,
        report.plant_secs * 1e3
    );
    Ok(())
}

fn print_eval(eval: &crate::training::EvalReport) {
    println!("eps_state   {:.6}", eval.eps_state);
    println!("eps_control {:.6}", eval.eps_control);
    println!("eps_policy  {:.6}", eval.eps_policy);
    match eval.eps_forward {
        Some(v) => println!("eps_forward {v:.6}"),
        None => println!("eps_forward n/a"),
    }
}

fn evaluate_cmd(
    model_path: &Path,
    dataset: &Path,
    train_split: bool,
    out: &Option<PathBuf>,
) -> Result<()> {
    let model = io::load_model(model_path)?;
    let ds = io::load_dataset(dataset)?;
    let split = ds.split(train_split);
    if split.is_empty() {
        return Err(Error::invalid("requested split is empty"));
    }
    let eval = evaluate_model(&model, &split)?;
    println!(
        "{} split: {} trajectories",
        if train_split { "train" } else { "test" },
        split.len()
    );
    print_eval(&eval);
    if let Some(path) = out {
        let json = serde_json::to_vec_pretty(&eval)?;
        std::fs::write(path, json)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

fn bench_cmd(
    model_path: &Path,
    config: &Option<PathBuf>,
    scenarios: usize,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    if scenarios == 0 {
        return Err(Error::invalid("bench needs at least one scenario"));
    }
    let cfg = load_config(config)?.resolved(None);
    let model = io::load_model(model_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bench"));
    let ((ix_lo, ix_hi), (iy_lo, iy_hi)) = cfg.dataset.initial_box;
    let ((tx_lo, tx_hi), (ty_lo, ty_hi)) = cfg.dataset.target_box;
    let tasks: Vec<BenchScenario> = (0..scenarios)
        .map(|_| BenchScenario {
            y0_center: (rng.gen_range(ix_lo..ix_hi), rng.gen_range(iy_lo..iy_hi)),
            scenario: Scenario::vacuum(
                rng.gen_range(tx_lo..tx_hi),
                rng.gen_range(ty_lo..ty_hi),
            ),
        })
        .collect();
    let report = benchmark(&model, &cfg.ocp, &tasks)?;
    println!("{:>10} {:>12} {:>12} {:>12}", "scenario", "ocp [s]", "full [s]", "latent [s]");
    for (i, c) in report.cases.iter().enumerate() {
        println!(
            "{i:>10} {:>12.4} {:>12.6} {:>12.6}",
            c.ocp_secs, c.full_secs, c.latent_secs
        );
    }
    println!(
        "means: ocp {:.4} s, full {:.6} s, latent {:.6} s",
        report.ocp_secs_mean, report.full_secs_mean, report.latent_secs_mean
    );
    println!(
        "ratios: ocp/full {:.1}, full/latent {:.2}",
        report.ocp_over_full, report.full_over_latent
    );
    if let Some(path) = out {
        let cases: Vec<serde_json::Value> = report
            .cases
            .iter()
            .map(|c| {
                serde_json::json!({
                    "ocp_secs": c.ocp_secs,
                    "full_secs": c.full_secs,
                    "latent_secs": c.latent_secs,
                    "ocp_final_distance": c.ocp_final_distance,
                    "full_final_distance": c.full_final_distance,
                    "latent_final_distance": c.latent_final_distance,
                })
            })
            .collect();
        let json = serde_json::json!({
            "cases": cases,
            "ocp_secs_mean": report.ocp_secs_mean,
            "full_secs_mean": report.full_secs_mean,
            "latent_secs_mean": report.latent_secs_mean,
            "ocp_over_full": report.ocp_over_full,
            "full_over_latent": report.full_over_latent,
        });
        std::fs::write(path, serde_json::to_vec_pretty(&json)?)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}
